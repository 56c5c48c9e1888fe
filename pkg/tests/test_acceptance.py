"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The MUTAG training criterion takes roughly 20 minutes on one CPU core and is
marked ``slow``; ``pytest -m "not slow"`` skips it.
"""

from __future__ import annotations

import json
import time

import mpmath
import numpy as np
import pytest

from lcgnn import cli
from lcgnn import trainer as trainer_mod
from lcgnn.autodiff import Tape, backward, finite_difference_gradient
from lcgnn.contrastive import infonce_loss, init_memory_bank, label_contrastive_loss_single
from lcgnn.data import load_dataset, make_fixture, parse_tu_dataset, write_tu_dataset
from lcgnn.encoder import GraphBatch, encode_graph, init_encoders, momentum_update
from lcgnn.experiments import (
    DEFAULT_BETAS,
    LOSS_MODES,
    run_ablation,
    run_cross_validation,
    run_less_data_experiment,
)
from lcgnn.trainer import TrainingConfig, batch_losses, init_state, train_epoch

from conftest import data_dir, mutag_available, random_graph

mpmath.mp.dps = 50


def _param_distance(a, b) -> float:
    return float(np.sqrt(sum(np.sum((pa.data - pb.data) ** 2) for pa, pb in zip(a, b))))


# --------------------------------------------------------------------------
# 1. gradient correctness of the full mixed loss


def test_criterion_1_gradient_correctness(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    graphs = [random_graph(rng, n_min=2, n_max=8, feat_dim=3) for _ in range(24)]
    labels = np.array([g.label for g in graphs])
    labels[:2] = [0, 1]  # both classes present
    batches = [np.arange(i, i + 6) for i in range(0, 24, 6)]

    worst, checks = 0.0, 0
    for beta in (0.0, 0.5, 1.0):
        for normalize in (True, False):
            config = TrainingConfig(beta=beta, hidden=4, layers=3, dropout=0.5, normalize=normalize, seed=7)
            state = init_state(3, labels, 2, config)
            params = state.encoder_q.parameters() + state.classifier.parameters()
            for b, slots in enumerate(batches):
                batch = GraphBatch.from_graphs([graphs[i] for i in slots])
                y = labels[slots]

                def total():
                    # fixed dropout mask: same stream seed on every evaluation
                    rng_b = np.random.default_rng([config.seed, b])
                    return batch_losses(state, batch, slots, y, config, training=True, rng=rng_b)[0]

                for p in params:
                    p.zero_grad()
                with Tape() as tape:
                    loss = total()
                analytic = backward(tape, loss)
                for p in params:
                    numeric = finite_difference_gradient(lambda _: total(), p, h=1e-5)
                    a = analytic.get(p, np.zeros_like(p.data))
                    denom = max(np.linalg.norm(a), np.linalg.norm(numeric))
                    if denom < 1e-10:
                        continue
                    worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
                    checks += 1
    elapsed = time.perf_counter() - start
    passed = worst < 1e-4 and elapsed < 60.0
    acceptance_report(
        "1 gradient correctness",
        passed,
        f"24 graphs, beta in {{0, 0.5, 1}}, {checks} parameter tensors, max rel err {worst:.2e} (< 1e-4), "
        f"{elapsed:.1f}s (< 60s)",
    )
    assert passed


# --------------------------------------------------------------------------
# 2. label contrastive loss against a scalar high-precision oracle


def _oracle_lc(q, y, keys, labels, tau):
    sims = [mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(b)) for a, b in zip(q, k)) / mpmath.mpf(tau)
            for k in keys]
    pos = mpmath.fsum(mpmath.exp(s) for s, lab in zip(sims, labels) if lab == y)
    total = mpmath.fsum(mpmath.exp(s) for s in sims)
    return float(-mpmath.log(pos / total))


def test_criterion_2_loss_oracle(acceptance_report):
    rng = np.random.default_rng(99)
    worst = worst_allpos = worst_infonce = 0.0
    for _ in range(1000):
        m, d = int(rng.integers(1, 21)), int(rng.integers(1, 9))
        labels = rng.integers(0, 3, m)
        y = int(labels[rng.integers(m)])
        keys, q = rng.normal(size=(m, d)), rng.normal(size=d)
        tau = float(rng.uniform(0.05, 1.0))
        bank = init_memory_bank(labels, d)
        bank.keys[:] = keys
        got = label_contrastive_loss_single(q, y, bank, tau).item()
        worst = max(worst, abs(got - _oracle_lc(q, y, keys, labels, tau)))
    for _ in range(200):
        m, d = int(rng.integers(1, 21)), int(rng.integers(1, 9))
        bank = init_memory_bank(np.full(m, 2), d, seed=rng)
        q = rng.normal(size=d) * 5
        worst_allpos = max(worst_allpos, abs(label_contrastive_loss_single(q, 2, bank, 0.07).item()))

        labels = np.ones(m, dtype=int)
        pos = int(rng.integers(m))
        labels[pos] = 0
        keys = rng.normal(size=(m, d))
        bank = init_memory_bank(labels, d)
        bank.keys[:] = keys
        tau = float(rng.uniform(0.05, 1.0))
        lc = label_contrastive_loss_single(q, 0, bank, tau).item()
        worst_infonce = max(worst_infonce, abs(lc - infonce_loss(q, pos, keys, tau).item()))
    passed = worst < 1e-10 and worst_allpos < 1e-12 and worst_infonce < 1e-12
    acceptance_report(
        "2 loss oracle equivalence",
        passed,
        f"1000 instances max abs err {worst:.1e} (< 1e-10); all-positive max {worst_allpos:.1e} (< 1e-12); "
        f"one-positive vs InfoNCE max {worst_infonce:.1e} (< 1e-12)",
    )
    assert passed


# --------------------------------------------------------------------------
# 3. momentum contract


def test_criterion_3_momentum_contract(acceptance_report, fixture_dataset, monkeypatch):
    worst = 0.0
    for alpha in (0.5, 0.9, 0.99):
        for n in (1, 5, 10):
            q, _ = init_encoders(7, hidden_dim=16, seed=1)
            k, _ = init_encoders(7, hidden_dim=16, seed=2)
            frozen = [p.data.copy() for p in q.parameters()]
            d0 = _param_distance(k.parameters(), q.parameters())
            for _ in range(n):
                momentum_update(k, q, alpha)
            ratio = _param_distance(k.parameters(), q.parameters()) / d0
            worst = max(worst, abs(ratio - alpha**n) / alpha**n)
            assert all(np.array_equal(p.data, f) for p, f in zip(q.parameters(), frozen))

    q, _ = init_encoders(7, hidden_dim=16, seed=1)
    k, _ = init_encoders(7, hidden_dim=16, seed=2)
    momentum_update(k, q, 0.0)
    alpha_zero_exact = all(np.array_equal(pk.data, pq.data) for pk, pq in zip(k.parameters(), q.parameters()))

    # full run: between consecutive momentum updates nothing else may touch the key encoder
    ds = fixture_dataset
    config = TrainingConfig(batch_size=3, hidden=8, alpha=0.9)
    state = init_state(ds.feature_dim, ds.labels, ds.num_classes, config)
    last = {"snap": [p.data.copy() for p in state.encoder_k.parameters()]}
    violations = []
    real_update = trainer_mod.momentum_update

    def checked_update(key, query, alpha):
        if not all(np.array_equal(p.data, s) for p, s in zip(key.parameters(), last["snap"])):
            violations.append(state.epoch)
        expected = [pq.data + alpha * (pk.data - pq.data) for pk, pq in zip(key.parameters(), query.parameters())]
        real_update(key, query, alpha)
        if not all(np.array_equal(p.data, e) for p, e in zip(key.parameters(), expected)):
            violations.append(state.epoch)
        last["snap"] = [p.data.copy() for p in key.parameters()]
        return key

    monkeypatch.setattr(trainer_mod, "momentum_update", checked_update)
    for _ in range(30):
        train_epoch(state, ds.graphs, ds.labels, config)  # asserts the optimizer registry each epoch
        state.check_registry()
    registry_ok = not violations

    passed = worst < 1e-12 and alpha_zero_exact and registry_ok
    acceptance_report(
        "3 momentum contract",
        passed,
        f"max rel err of distance ratio vs alpha^n {worst:.1e} (< 1e-12); alpha=0 exact copy: {alpha_zero_exact}; "
        f"key encoder untouched outside momentum over 30 epochs: {registry_ok}",
    )
    assert passed


# --------------------------------------------------------------------------
# 4. permutation invariance


def test_criterion_4_encoder_invariance(acceptance_report):
    rng = np.random.default_rng(4)
    mismatches = 0
    for trial in range(100):
        g = random_graph(rng, n_min=1, n_max=20, feat_dim=7, p=float(rng.uniform(0.1, 0.6)))
        params, _ = init_encoders(7, hidden_dim=64, num_layers=3, seed=trial)
        h = g.permute(rng.permutation(g.num_nodes))
        if not np.array_equal(encode_graph(params, g).data, encode_graph(params, h).data):
            mismatches += 1
    acceptance_report("4 encoder invariance", mismatches == 0, f"{mismatches}/100 permuted graphs differ (exact equality)")
    assert mismatches == 0


# --------------------------------------------------------------------------
# 6. less-data harness


FIXTURE_CONFIG = TrainingConfig(folds=2, epochs=10, batch_size=4, hidden=16)


def test_criterion_6_less_data_harness(acceptance_report, fixture_dataset):
    report = run_less_data_experiment(fixture_dataset, FIXTURE_CONFIG, ratios=[0.6, 1.0])
    plain = run_cross_validation(fixture_dataset, FIXTURE_CONFIG)
    identical = report.results["LCGNN"][1.0].to_dict(with_curve=True) == plain.to_dict(with_curve=True)
    table = report.table()
    shape_ok = [r["method"] for r in table] == ["GIN", "LCGNN"] and all(
        list(r)[1:] == ["0.6", "1"] for r in table
    )
    passed = identical and shape_ok
    acceptance_report(
        "6 less-data harness",
        passed,
        f"ratio-1.0 row bit-identical to plain CV: {identical}; grid {len(table)} methods x 2 ratios: {shape_ok}",
    )
    assert passed


# --------------------------------------------------------------------------
# 7. ablation harness


def test_criterion_7_ablation_harness(acceptance_report, fixture_dataset):
    betas = run_ablation(fixture_dataset, FIXTURE_CONFIG, "beta")
    modes = run_ablation(fixture_dataset, FIXTURE_CONFIG, "loss-mode")
    rows_ok = [r["value"] for r in betas.rows()] == list(DEFAULT_BETAS) and [
        r["value"] for r in modes.rows()
    ] == list(LOSS_MODES)

    none = modes.results[LOSS_MODES.index("none")]
    beta0 = run_cross_validation(fixture_dataset, FIXTURE_CONFIG.replace(beta=0.0))
    keys = ("cls_loss", "train_acc", "test_acc")
    equivalent = (
        none.fold_accuracies == beta0.fold_accuracies
        and none.final_accuracies == beta0.final_accuracies
        and none.final_cls_loss == beta0.final_cls_loss
        and [[p[k] for k in keys] for p in none.mean_curve] == [[p[k] for k in keys] for p in beta0.mean_curve]
    )
    passed = rows_ok and equivalent
    acceptance_report(
        "7 ablation harness",
        passed,
        f"beta sweep {len(betas.rows())} rows, loss-mode sweep {len(modes.rows())} rows: {rows_ok}; "
        f"mode none == beta 0 bit-for-bit: {equivalent}",
    )
    assert passed


# --------------------------------------------------------------------------
# 8. parser


def test_criterion_8_parser(acceptance_report, tmp_path):
    fixture = make_fixture(0)
    first = write_tu_dataset(fixture, tmp_path / "a")
    second = write_tu_dataset(parse_tu_dataset(tmp_path / "a", fixture.name), tmp_path / "b", fixture.name)
    names = sorted(p.name for p in first.iterdir())
    round_trip = names == sorted(p.name for p in second.iterdir()) and all(
        (first / n).read_bytes() == (second / n).read_bytes() for n in names
    )
    detail = f"fixture round-trip byte-identical: {round_trip}"
    mutag_ok = True
    if mutag_available():
        stats = parse_tu_dataset(data_dir(), "MUTAG").stats()
        mutag_ok = (
            stats["graphs"] == 188 and stats["classes"] == 2 and abs(stats["mean_nodes"] - 17.93) <= 0.01
        )
        detail += (
            f"; MUTAG {stats['graphs']} graphs, {stats['classes']} classes, mean nodes {stats['mean_nodes']:.4f}, "
            f"mean edges {stats['mean_edges']:.2f} (188 / 2 / 17.93 +- 0.01)"
        )
    else:
        detail += "; MUTAG not present locally"
    passed = round_trip and mutag_ok
    acceptance_report("8 parser", passed, detail)
    assert passed


# --------------------------------------------------------------------------
# 9. determinism through the manifest


def test_criterion_9_determinism(acceptance_report, tmp_path):
    assert cli.main(["fixture", "--out", str(tmp_path / "data")]) == 0
    out = tmp_path / "run"
    argv = ["cv", "--dataset", "FIXTURE", "--data-dir", str(tmp_path / "data"), "--out", str(out),
            "--folds", "2", "--epochs", "10", "--batch", "4", "--hidden", "16"]
    assert cli.main(argv) == 0
    assert cli.main(["replay", "--manifest", str(out / "manifest.json")]) == 0
    replay = out / "replay"
    files = ["summary.json", "mean_curve.csv", "fold_00_metrics.csv", "fold_01_metrics.csv"]
    same = all((out / f).read_bytes() == (replay / f).read_bytes() for f in files)
    manifests_match = (
        json.loads((out / "manifest.json").read_text())["config"]
        == json.loads((replay / "manifest.json").read_text())["config"]
    )
    passed = same and manifests_match
    acceptance_report("9 determinism", passed, f"replayed run reproduces summary and metrics byte-for-byte: {same}")
    assert passed


# --------------------------------------------------------------------------
# 5. desk-scale MUTAG run


@pytest.mark.slow
def test_criterion_5_mutag_desk_scale(acceptance_report):
    if not mutag_available():
        acceptance_report("5 MUTAG desk-scale run", False, f"MUTAG not found under {data_dir()}")
        pytest.fail("MUTAG dataset missing")
    dataset = load_dataset(data_dir(), "MUTAG")
    start = time.perf_counter()
    lc_acc, lc_final_acc, lc_loss, base_loss, base_acc = [], [], [], [], []
    for seed in (0, 1, 2):
        config = TrainingConfig(seed=seed)  # hidden 64, K 3, beta 0.5, alpha 0.9, tau 0.07, 300 epochs, 10 folds
        with_lc = run_cross_validation(dataset, config)
        without = run_cross_validation(dataset, config.replace(beta=0.0, mode="none"))
        lc_acc.append(with_lc.mean)
        lc_final_acc.append(np.mean(with_lc.final_accuracies))
        lc_loss.append(with_lc.final_cls_loss)
        base_loss.append(without.final_cls_loss)
        base_acc.append(without.mean)
    elapsed = time.perf_counter() - start
    mean_acc = float(np.mean(lc_acc))
    passed = mean_acc >= 0.80 and np.mean(lc_loss) <= np.mean(base_loss)
    acceptance_report(
        "5 MUTAG desk-scale run",
        passed,
        f"beta=0.5 mean CV acc {mean_acc:.4f} (>= 0.80; per seed {np.round(lc_acc, 4).tolist()}, "
        f"final-epoch {np.mean(lc_final_acc):.4f}); final cls loss beta=0.5 {np.mean(lc_loss):.4f} vs "
        f"beta=0 {np.mean(base_loss):.4f} (<=); beta=0 acc {np.mean(base_acc):.4f}; {elapsed / 60:.1f} min",
    )
    assert passed
