"""Command-line experiment runner.

Exit codes: 0 success, 1 configuration or data error, 2 numeric divergence,
3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .clustering import ClusterAssignment, cluster_per_class, cross_cluster_coherence, gradient_coherence
from .data import (DomainDataset, NormStats, SyntheticDomainSpec, apply_normalization, generate,
                   leave_one_domain_out, load_csv, preset)
from .errors import CicfError, ConfigError, NumericError
from .intervention import se_report
from .model import ModelSpec, ParamVector, init_params, per_sample_grads
from .reports import (COHERENCE_SCHEMA, COMPARE_SCHEMA, EVAL_SCHEMA, SE_REPORT_SCHEMA,
                      SUMMARY_SCHEMA, write_csv, write_json)
from .sampling import (SamplerKind, cluster_histogram, draw, proportional_allocation,
                       sampler_difference_E)
from .trainers import TRAINERS, TrainConfig, TrainingDiverged, evaluate

log = logging.getLogger("cicf_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def build_dataset(cfg: dict, seed: int) -> DomainDataset:
    data = cfg["data"]
    data_seed = data.get("seed")
    data_seed = seed if data_seed is None else data_seed
    if "csv" in data:
        return load_csv(data["csv"], data.get("csv_schema"))
    if "generator" in data:
        gen = dict(data["generator"])
        gen["seed"] = data_seed
        try:
            return generate(SyntheticDomainSpec(**gen))
        except TypeError as exc:
            raise ConfigError(f"data.generator: {exc}") from None
    return generate(preset(data["preset"], seed=data_seed))


def model_spec(cfg: dict, dataset: DomainDataset) -> ModelSpec:
    m = cfg["model"]
    widths = [dataset.feature_dim, *m["hidden"], dataset.class_count]
    return ModelSpec(tuple(widths), m["activation"], m["split_index"])


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg["training"])
    return TrainConfig(K=cfg["clustering"]["K"], cluster_space=cfg["clustering"]["space"],
                       seed=seed, **t)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CICF_LAB_THREADS", "1")))
    except ValueError:
        raise ConfigError("CICF_LAB_THREADS must be an integer") from None


def _run_job(args):
    cfg, method, domain, seed = args
    dataset = build_dataset(cfg, seed)
    train, test = leave_one_domain_out(dataset, domain, normalize=cfg["data"]["normalize"])
    spec = model_spec(cfg, dataset)
    tc = train_config(cfg, seed)
    trainer = TRAINERS[method]
    try:
        model, metrics = trainer(tc, train, spec, test)
    except TrainingDiverged as exc:
        return {"error": str(exc), "domain": domain, "seed": seed}
    rows = [(method, domain, seed, *row) for row in metrics.csv_rows()]
    norm = train.norm
    return {
        "domain": domain, "seed": seed, "rows": rows,
        "accuracy": metrics.final_test_accuracy.get(domain, float("nan")),
        "wall": metrics.wall_seconds,
        "model": {
            "layer_widths": list(spec.layer_widths), "activation": spec.activation,
            "split_index": spec.split_index, "method": method, "test_domain": domain,
            "seed": seed, "values": [float(v) for v in model.params.values],
            "norm": None if norm is None else {"mean": norm.mean.tolist(), "std": norm.std.tolist()},
        },
    }


def _map(jobs):
    n = min(_threads(), len(jobs))
    if n <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_job, jobs))


def _domains(cfg: dict, dataset: DomainDataset) -> list[int]:
    present = dataset.present_domains()
    chosen = cfg.get("domains") or present
    bad = [d for d in chosen if d not in present]
    if bad:
        raise ConfigError(f"domains: {bad} not present in the data (have {present})")
    return list(chosen)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: dict, method: str) -> int:
    out = _out_dir(cfg)
    write_json(out / "resolved-config.json", cfg)
    seeds = cfg["seeds"]
    domains = _domains(cfg, build_dataset(cfg, seeds[0]))
    jobs = [(cfg, method, d, s) for d in domains for s in seeds]
    results = _map(jobs)
    failed = [r for r in results if "error" in r]
    if failed:
        for r in failed:
            log.error("domain %s seed %s: %s", r["domain"], r["seed"], r["error"])
        return EXIT_NUMERIC
    rows = []
    summary = {"method": method, "seeds": list(seeds), "domains": {}}
    for d in domains:
        accs = [r["accuracy"] for r in results if r["domain"] == d]
        summary["domains"][str(d)] = {
            "mean": float(np.mean(accs)), "std": float(np.std(accs)),
            "n_seeds": len(accs), "per_seed": accs,
        }
    summary["mean_accuracy"] = float(np.mean([v["mean"] for v in summary["domains"].values()]))
    for r in sorted(results, key=lambda r: (r["domain"], r["seed"])):
        rows.extend(r["rows"])
        write_json(out / "models" / f"{method}_domain{r['domain']}_seed{r['seed']}.json", r["model"])
        log.info("domain %d seed %d: accuracy %.4f (%.2fs)", r["domain"], r["seed"],
                 r["accuracy"], r["wall"])
    write_csv(out / "metrics.csv",
              ["method", "test_domain", "seed", "epoch", "split", "domain", "loss", "accuracy"], rows)
    cfgmod.validate(summary, SUMMARY_SCHEMA)
    write_json(out / "summary.json", summary)
    return EXIT_OK


def _analysis_setup(cfg: dict):
    seed = cfg["seeds"][0]
    dataset = build_dataset(cfg, seed)
    spec = model_spec(cfg, dataset)
    params = init_params(spec, seed)
    cl = cfg["clustering"]
    assignment = cluster_per_class(dataset, cl["K"], cl["space"], params=params, spec=spec,
                                   seed=seed, max_iter=cl["max_iter"])
    return seed, dataset, spec, params, assignment


def cmd_cluster(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_json(out / "resolved-config.json", cfg)
    seed, dataset, spec, params, assignment = _analysis_setup(cfg)
    grads = per_sample_grads(params, spec, dataset.features, dataset.labels)
    coh = gradient_coherence(params, spec, dataset, assignment, seed=seed, grads=grads)
    cross = cross_cluster_coherence(params, spec, dataset, assignment, seed=seed, grads=grads)
    report = {
        "K_dagger": assignment.n_clusters,
        "sizes": [int(s) for s in assignment.sizes],
        "class_of_cluster": [int(c) for c in assignment.class_of_cluster],
        "coherence": [float(c) for c in coh],
        "cross_cluster": None if np.isnan(cross) else cross,
        "mean_intra": float(np.mean(coh)),
        "seed": seed,
    }
    cfgmod.validate(report, COHERENCE_SCHEMA)
    rows = zip(assignment.sample_ids.tolist(),
               assignment.class_of_cluster[assignment.assignment].tolist(),
               assignment.assignment.tolist())
    write_csv(out / "assignment.csv", ["sample_id", "class_id", "cluster_id"], rows)
    write_json(out / "coherence.json", report)
    log.info("%d clusters over %d samples", assignment.n_clusters, len(dataset))
    return EXIT_OK


def cmd_analyze_se(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_json(out / "resolved-config.json", cfg)
    seed, dataset, spec, params, assignment = _analysis_setup(cfg)
    grads = per_sample_grads(params, spec, dataset.features, dataset.labels)
    trials = cfg["analysis"]["trials"]
    reports = []
    for M in cfg["analysis"]["M_sweep"]:
        if M > len(dataset):
            raise ConfigError(f"analysis.M_sweep: M={M} exceeds dataset size {len(dataset)}")
        reports.append(se_report(grads, assignment, M, trials, seed).to_json())
    doc = {"reports": reports, "trials": trials, "seed": seed,
           "K_dagger": assignment.n_clusters, "N": len(dataset)}
    cfgmod.validate(doc, SE_REPORT_SCHEMA)
    write_json(out / "se_report.json", doc)
    cols = ["M", "se_random_exact", "se_ours_exact", "se_random_mc", "se_ours_mc"]
    write_csv(out / "se_curve.csv", cols,
              [[r[c] if r[c] is not None else "" for c in cols] for r in reports])
    return EXIT_OK


def compare_samplers(dataset: DomainDataset, assignment: ClusterAssignment, M: int,
                     iterations: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    alloc = proportional_allocation(assignment.sizes, M)
    strat = np.array(alloc.counts)
    pairs = {"stratified_vs_random": [], "stratified_vs_class_weighted": [],
             "random_vs_class_weighted": []}
    for _ in range(iterations):
        rand = cluster_histogram(draw(dataset, None, SamplerKind.RANDOM, M, rng).indices, assignment)
        cw = cluster_histogram(
            draw(dataset, None, SamplerKind.CLASS_WEIGHTED_RANDOM, M, rng).indices, assignment)
        pairs["stratified_vs_random"].append(sampler_difference_E(strat, rand).E)
        pairs["stratified_vs_class_weighted"].append(sampler_difference_E(strat, cw).E)
        pairs["random_vs_class_weighted"].append(sampler_difference_E(rand, cw).E)
    out = {"M": M, "K_dagger": assignment.n_clusters, "iterations": iterations, "seed": seed,
           "allocation": [int(c) for c in strat], "pairs": {}}
    for name, es in pairs.items():
        es = np.array(es, dtype=np.float64)
        sd = float(es.std(ddof=1)) if es.size > 1 else 0.0
        out["pairs"][name] = {"mean_E": float(es.mean()), "std_E": sd,
                              "ratio": float(es.mean() / M),
                              "ci95_half_width": 1.96 * sd / np.sqrt(es.size)}
    return out


def cmd_compare_samplers(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_json(out / "resolved-config.json", cfg)
    seed, dataset, _, _, assignment = _analysis_setup(cfg)
    M = min(cfg["analysis"]["compare_M"], len(dataset))
    doc = compare_samplers(dataset, assignment, M, cfg["analysis"]["compare_iterations"], seed)
    cfgmod.validate(doc, COMPARE_SCHEMA)
    write_json(out / "compare_samplers.json", doc)
    for name, v in doc["pairs"].items():
        log.info("%s: mean E %.2f (E/M %.3f)", name, v["mean_E"], v["ratio"])
    return EXIT_OK


def _load_model(path: Path):
    doc = json.loads(path.read_text(encoding="utf-8"))
    spec = ModelSpec(tuple(doc["layer_widths"]), doc["activation"], doc["split_index"])
    params = ParamVector(np.array(doc["values"]), spec.manifest)
    return doc, spec, params


def cmd_eval(cfg: dict, model_paths: list[str] | None) -> int:
    out = _out_dir(cfg)
    write_json(out / "resolved-config.json", cfg)
    if model_paths:
        paths = [Path(p) for p in model_paths]
    else:
        paths = sorted((out / "models").glob("*.json"))
    if not paths:
        raise ConfigError(f"no model files given and none under {out / 'models'}")
    evals = []
    for path in paths:
        doc, spec, params = _load_model(path)
        dataset = build_dataset(cfg, doc["seed"])
        _, test = leave_one_domain_out(dataset, doc["test_domain"], normalize=False)
        if doc.get("norm"):
            test = apply_normalization(test, NormStats(np.array(doc["norm"]["mean"]),
                                                       np.array(doc["norm"]["std"])))
        res = evaluate(params, spec, test)
        evals.append({"model": path.name, "test_domain": doc["test_domain"], "seed": doc["seed"],
                      "accuracy": res.accuracy, "loss": res.loss,
                      "confusion": res.confusion.tolist()})
    doc = {"evaluations": evals}
    cfgmod.validate(doc, EVAL_SCHEMA)
    write_json(out / "eval.json", doc)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cicf-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. training.alpha=0 (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("cluster", help="per-class K-means and gradient coherence"))
    tr = sub.add_parser("train", help="leave-one-domain-out training")
    common(tr)
    tr.add_argument("--method", choices=sorted(TRAINERS), required=True)
    common(sub.add_parser("analyze-se", help="analytic and Monte-Carlo standard errors"))
    common(sub.add_parser("compare-samplers", help="difference metric E between samplers"))
    ev = sub.add_parser("eval", help="evaluate saved models on their held-out domain")
    common(ev)
    ev.add_argument("--model", action="append", help="model JSON (default: all under OUT/models)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.set, out_dir=args.out, seed=args.seed)
        if args.command == "train":
            return cmd_train(cfg, args.method)
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "analyze-se":
            return cmd_analyze_se(cfg)
        if args.command == "compare-samplers":
            return cmd_compare_samplers(cfg)
        return cmd_eval(cfg, args.model)
    except (TrainingDiverged, NumericError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CicfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
