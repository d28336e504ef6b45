"""Schemas for emitted JSON files and atomic file writers."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}
_count = {"type": "integer", "minimum": 0}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["method", "seeds", "domains", "mean_accuracy"],
    "properties": {
        "method": {"enum": ["erm", "maml", "cicf"]},
        "seeds": {"type": "array", "items": _count},
        "mean_accuracy": _num,
        "domains": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["mean", "std", "n_seeds", "per_seed"],
                "properties": {
                    "mean": _num, "std": _num, "n_seeds": _count,
                    "per_seed": {"type": "array", "items": _num},
                },
            },
        },
    },
}

SE_ENTRY_SCHEMA = {
    "type": "object",
    "required": ["M", "N", "se_random_exact", "se_random_approx", "se_ours_exact",
                 "se_ours_approx", "se_random_mc", "se_ours_mc", "trials", "seed"],
    "properties": {
        "M": _count, "N": _count, "trials": _count, "seed": _count,
        "se_random_exact": _num, "se_random_approx": _num,
        "se_ours_exact": _num_or_null, "se_ours_approx": _num,
        "se_random_mc": _num, "se_ours_mc": _num,
        "se_random_mc_half_width": _num, "se_ours_mc_half_width": _num,
        "rounding_bias": _num,
    },
}

SE_REPORT_SCHEMA = {
    "type": "object",
    "required": ["reports", "trials", "seed", "K_dagger", "N"],
    "properties": {
        "reports": {"type": "array", "items": SE_ENTRY_SCHEMA},
        "trials": _count, "seed": _count, "K_dagger": _count, "N": _count,
    },
}

COMPARE_SCHEMA = {
    "type": "object",
    "required": ["M", "K_dagger", "iterations", "seed", "pairs"],
    "properties": {
        "M": _count, "K_dagger": _count, "iterations": _count, "seed": _count,
        "pairs": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["mean_E", "ratio", "ci95_half_width"],
                "properties": {"mean_E": _num, "ratio": _num, "ci95_half_width": _num,
                               "std_E": _num},
            },
        },
    },
}

COHERENCE_SCHEMA = {
    "type": "object",
    "required": ["K_dagger", "sizes", "class_of_cluster", "coherence", "cross_cluster"],
    "properties": {
        "K_dagger": _count,
        "sizes": {"type": "array", "items": _count},
        "class_of_cluster": {"type": "array", "items": _count},
        "coherence": {"type": "array", "items": {"type": "number", "minimum": -1, "maximum": 1}},
        "cross_cluster": _num_or_null,
        "mean_intra": _num,
    },
}

EVAL_SCHEMA = {
    "type": "object",
    "required": ["evaluations"],
    "properties": {
        "evaluations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model", "test_domain", "seed", "accuracy", "confusion"],
                "properties": {
                    "model": {"type": "string"}, "test_domain": _count, "seed": _count,
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "confusion": {"type": "array", "items": {"type": "array", "items": _count}},
                },
            },
        },
    },
}


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    _atomic_write(path, buf.getvalue())
