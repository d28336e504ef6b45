import numpy as np
import pytest

from cicf_lab.clustering import ClusterAssignment
from cicf_lab.data import DomainDataset


def blobs(sizes, centers, labels, spread=0.3, seed=0, domains=None):
    """Gaussian blobs with known membership; returns (dataset, blob id per row)."""
    rng = np.random.default_rng(seed)
    X, y, b = [], [], []
    for i, (n, c, lab) in enumerate(zip(sizes, centers, labels)):
        X.append(np.asarray(c, float) + spread * rng.standard_normal((n, len(c))))
        y += [lab] * n
        b += [i] * n
    y = np.array(y)
    dom = np.zeros(y.size, dtype=int) if domains is None else np.asarray(domains)
    ds = DomainDataset(np.vstack(X), y, dom, class_count=int(y.max()) + 1,
                       domain_count=int(dom.max()) + 1)
    return ds, np.array(b)


def assignment_from_blobs(blob_ids, labels):
    k = blob_ids.max() + 1
    class_of = np.array([labels[blob_ids == i][0] for i in range(k)])
    return ClusterAssignment(blob_ids, np.zeros((k, 0)), class_of)


@pytest.fixture
def three_blob_fixture():
    """60 samples, 3 clusters of 20 (integral quotas for M in {3, 6, 12, ...})."""
    ds, b = blobs([20, 20, 20], [(-3, 0), (3, 0), (0, 4)], [0, 0, 1], seed=1)
    return ds, assignment_from_blobs(b, ds.labels)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
