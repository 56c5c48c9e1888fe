from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from lcgnn.data import Graph, degree_onehot_features, make_fixture

REPO = Path(__file__).resolve().parents[1]

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def data_dir() -> Path:
    return Path(os.environ.get("LCGNN_DATA_DIR", REPO / "data"))


def mutag_available() -> bool:
    return (data_dir() / "MUTAG" / "MUTAG_A.txt").is_file()


def random_graph(rng: np.random.Generator, n_min=1, n_max=8, feat_dim=3, p=0.4) -> Graph:
    n = int(rng.integers(n_min, n_max + 1))
    iu, iv = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], iv[keep]], axis=1)
    return Graph(
        num_nodes=n,
        edges=edges,
        features=rng.uniform(-1.0, 1.0, (n, feat_dim)),
        label=int(rng.integers(0, 2)),
    )


@pytest.fixture
def fixture_dataset():
    return degree_onehot_features(make_fixture(0))


@pytest.fixture
def acceptance_report(request):
    """Record one criterion outcome; the summary is printed at the end of the session.

    A criterion that raises before recording is logged as FAIL.
    """
    recorded = []

    def record(criterion: str, passed: bool, detail: str = "") -> None:
        recorded.append(criterion)
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")

    yield record
    if not recorded:
        _ACCEPTANCE.append((request.node.name, False, "raised before reporting"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {criterion}: {detail}")
