"""Acceptance criteria 1-9.

Each test prints one ``AC<n> PASS|FAIL`` line (also repeated in the pytest
terminal summary) and then asserts. Run on its own with::

    pytest tests/test_acceptance.py -s
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from tripforecast import data, explain, nn, train
from tripforecast import ndcore as nd
from tripforecast.benchmark import BENCH_MODEL, run_benchmark
from tripforecast.checkpoint import save_checkpoint

from conftest import ACCEPTANCE_LINES, EFFICIENCY_LOG, EFFICIENCY_TOL, random_batch, small_config
from oracles import brute_force_windows

# First measurement of the benchmark at seed 0 (percent). Later runs may not
# be worse than these by more than REGRESSION_SLACK_PCT percentage points.
PINNED_ERRORS = {
    "persistence": 100.364,
    "PM1": 55.934,
    "PM2": 52.260,
    "PM3": 52.782,
    "PM4": 48.640,
    "PM4-cv": 47.968,
}
REGRESSION_SLACK_PCT = 1.0
BENCHMARK_BUDGET_S = 15 * 60
GRID_BUDGET_S = 300.0


def report(capsys, n, title, ok, detail):
    line = f"AC{n} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[n] = line
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def test_ac1_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst = {}
    for variant in nn.VARIANTS:
        for seed in (0, 1, 2):
            cfg = small_config(variant, L=6, fc_sizes=(8, 2))
            params = nn.init_params(cfg, seed)
            # one fixed sample; the seeds vary the parameter draw
            rng = np.random.default_rng(100)
            feats, vlen = random_batch(rng, 1, 6, lengths=[5])
            target = rng.uniform(0, 1, size=(2, 1))
            f = lambda: train.loss(nn.forward_batch(cfg, params, feats, vlen), target, "MSE")
            err = nd.grad_check(f, params.tensors())
            worst[variant] = max(worst.get(variant, 0.0), err)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    detail = ", ".join(f"{v} {e:.4e}" for v, e in worst.items())
    report(capsys, 1, "gradient suite", ok, f"max rel err {detail} (tol 1e-4), {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------------------
# 2. Shapley oracle and efficiency
# ---------------------------------------------------------------------------


def _random_game(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(9, 4))
    v = rng.normal(size=4)
    c = rng.normal()

    def f(features, valid_len):
        mask = (np.arange(features.shape[1])[None, :] < valid_len[:, None])[..., None]
        h = np.tanh((features * mask) @ W).sum(axis=1)
        return np.sin(h @ v) + c * (h**2).sum(axis=1) + h.prod(axis=1)

    return f


def test_ac2_shapley_oracle(capsys):
    worst = 0.0
    sizes = []
    for g in range(20):
        rng = np.random.default_rng(100 + g)
        level = "feature" if g % 5 == 4 else "event"
        n = int(rng.integers(2, 11))
        feats, _ = random_batch(rng, 1, n + 2, lengths=[n])
        sample = data.SequenceSample(feats[0], n, np.zeros(2), "v", 0.0, n)
        bg = rng.uniform(0, 1, size=9)
        game = _random_game(g)
        att = explain.timeshap(game, sample, bg, level)
        assert att.exact and len(att.weights) <= 10
        bf = explain.brute_force_shapley(game, sample, bg, level)
        worst = max(worst, float(np.abs(att.weights - bf).max()))
        sizes.append(len(att.weights))

    # model explanations in both modes feed the suite-wide efficiency log
    cfg = small_config("PM4", L=16)
    params = nn.init_params(cfg, 0)
    feats, _ = random_batch(np.random.default_rng(7), 1, 16, lengths=[15])
    sample = data.SequenceSample(feats[0], 15, np.zeros(2), "v", 0.0, 15)
    for level in explain.LEVELS:
        for output in explain.OUTPUTS:
            explain.explain_prediction(cfg, params, sample, np.full(9, 0.1), level=level, output=output, n_samples=512)
    gap = max(EFFICIENCY_LOG)
    ok = worst <= 1e-6 and gap <= EFFICIENCY_TOL
    detail = (
        f"20 games (m {min(sizes)}..{max(sizes)}) max |exact - brute force| {worst:.1e} (tol 1e-6); "
        f"efficiency max gap {gap:.1e} over {len(EFFICIENCY_LOG)} explanations so far (tol 1e-8)"
    )
    report(capsys, 2, "Shapley oracle equivalence", ok, detail)


# ---------------------------------------------------------------------------
# 3 and 4. synthetic benchmark
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def bench():
    return run_benchmark(seed=0)


def test_ac3_method_ordering(bench, capsys):
    err = bench.errors()
    ordering = err["PM4"] < err["PM1"] and all(err[v] < err["persistence"] for v in nn.VARIANTS)
    regressions = [k for k, pin in PINNED_ERRORS.items() if err[k] > pin + REGRESSION_SLACK_PCT]
    in_budget = bench.wall_clock_s <= BENCHMARK_BUDGET_S
    ok = ordering and not regressions and in_budget
    detail = ", ".join(f"{k} {v:.2f}%" for k, v in err.items())
    detail += f"; PM4 < PM1 and all < persistence: {ordering}; regressions vs pins: {regressions or 'none'}"
    detail += f"; {bench.wall_clock_s:.0f} s (<= {BENCHMARK_BUDGET_S} s)"
    report(capsys, 3, "method ordering", ok, detail)


def test_ac4_cross_val_direction(bench, capsys):
    fixed, cv = bench.fixed["PM4"].prediction_error_pct, bench.cv.prediction_error_pct
    other = run_benchmark(seed=1, variants=("PM4",))
    o_fixed, o_cv = other.fixed["PM4"].prediction_error_pct, other.cv.prediction_error_pct
    note = "holds" if o_cv <= o_fixed else "does not hold (reported only)"
    detail = f"seed 0: cross-val {cv:.3f}% vs fixed {fixed:.3f}%; seed 1: {o_cv:.3f}% vs {o_fixed:.3f}%, {note}"
    report(capsys, 4, "cross-val direction", cv <= fixed, detail)


# ---------------------------------------------------------------------------
# 5. metric identities
# ---------------------------------------------------------------------------


def test_ac5_metric_identities(capsys):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = rng.normal(scale=10 ** rng.uniform(-3, 4), size=(int(rng.integers(1, 200)), 2))
        P = X + rng.normal(scale=rng.uniform(0.01, 5) * np.abs(X).mean(), size=X.shape)
        c = 10 ** rng.uniform(-6, 6)
        base = train.prediction_error(P, X)
        worst = max(
            worst,
            abs(train.prediction_error(X, X)),
            abs(train.prediction_error(np.zeros_like(X), X) - 100.0),
            abs(train.prediction_error(c * P, c * X) - base) / max(1.0, base),
        )
    report(capsys, 5, "metric identities", worst <= 1e-12, f"max deviation {worst:.1e} over 50 random cases (tol 1e-12)")


# ---------------------------------------------------------------------------
# 6. preprocessing
# ---------------------------------------------------------------------------


def test_ac6_preprocessing_properties(capsys):
    checked = []
    for seed in range(3):
        raw = data.generate_synthetic(data.FleetSpec(vehicles=5, days=105, seed=seed))
        raw = sorted(raw, key=lambda t: (t.vehicle_id, t.start_time))
        merged = data.merge_trips(raw)
        for vid in {t.vehicle_id for t in merged}:
            mine = [t for t in merged if t.vehicle_id == vid]
            gaps = [b.start_time - a.end_time for a, b in zip(mine, mine[1:])]
            assert all(g > data.MERGE_GAP_S for g in gaps)
        assert data.merge_trips(merged) == merged
        assert abs(sum(t.distance_km for t in merged) - sum(t.distance_km for t in raw)) < 1e-9 * len(raw)
        cleaned = data.filter_short(merged)
        assert all(t.distance_km >= 3.0 for t in cleaned)
        assert cleaned == [t for t in merged if t.distance_km >= 3.0]
        for vid in sorted({t.vehicle_id for t in cleaned}):
            series = data.build_features([t for t in cleaned if t.vehicle_id == vid])
            for window in (1, 3, 8, 14):
                samples = data.make_windows(series, window, 64)
                oracle = brute_force_windows(series, window, 64)
                assert [s.target_index for s in samples] == [j for j, _ in oracle]
                for s, (j, prior) in zip(samples, oracle):
                    assert s.valid_len == len(prior)
                    assert np.array_equal(s.features[: s.valid_len, 0], series.delta_t[prior])
                    assert np.array_equal(s.features[: s.valid_len, 1], series.distance[prior])
                    assert not s.features[s.valid_len :].any()
        checked.append(len(raw))
    report(capsys, 6, "preprocessing properties", True, f"merge gaps, 3 km filter, idempotence, window oracle on fleets of {checked} trips")


# ---------------------------------------------------------------------------
# 7. masking
# ---------------------------------------------------------------------------


def test_ac7_masking_invariance(capsys):
    worst = {}
    for variant in nn.VARIANTS:
        for source in nn.ATTENTION_SOURCES:
            cfg = small_config(variant, L=12, attention_source=source)
            params = nn.init_params(cfg, 2)
            rng = np.random.default_rng(5)
            feats, vlen = random_batch(rng, 16, 12)
            base = nn.predict(cfg, params, feats, vlen)
            noisy = feats.copy()
            for b, n in enumerate(vlen):
                noisy[b, n:] = rng.normal(scale=1e3, size=noisy[b, n:].shape)
            diff = float(np.abs(nn.predict(cfg, params, noisy, vlen) - base).max())
            worst[variant] = max(worst.get(variant, 0.0), diff)
    ok = all(d == 0.0 for d in worst.values())
    report(capsys, 7, "masking invariance", ok, ", ".join(f"{v} max |diff| {d:g}" for v, d in worst.items()))


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------


def _artifacts(dataset, tmp_path, tag):
    cfg = small_config("PM4", L=dataset.max_seq_len)
    tc = train.TrainConfig(epochs=3, batch_size=32, patience=3, seed=11)
    params, rep = train.train_fixed_split(cfg, dataset, tc)
    _, cv = train.cross_validate_transfer(cfg, dataset.train + dataset.val, dataset.test, dataset.stats, tc, rounds=2, params=params, round_epochs=1)
    save_checkpoint(tmp_path / f"{tag}.ckpt.json", cfg, params, {"seed": 11})
    bg = explain.background_values(dataset.train)
    sample = dataset.test[2]
    for level in explain.LEVELS:
        att = explain.explain_prediction(cfg, params, sample, bg, level=level, output="delta_t")
        explain.write_attribution_json(tmp_path / f"{tag}.{level}.json", att, {"seed": 11})
    sampled = explain.timeshap(explain.model_scorer(cfg, params, "distance"), sample, bg, "event", max_exact_m=2, n_samples=64, seed=3)
    explain.write_attribution_json(tmp_path / f"{tag}.sampled.json", sampled)
    return {
        "history": json.dumps(rep.history + cv.history).encode(),
        "checkpoint": (tmp_path / f"{tag}.ckpt.json").read_bytes(),
        "attributions": b"".join((tmp_path / f"{tag}.{k}.json").read_bytes() for k in ("event", "feature", "sampled")),
    }


def test_ac8_determinism(small_dataset, tmp_path, capsys):
    a = _artifacts(small_dataset, tmp_path, "a")
    b = _artifacts(small_dataset, tmp_path, "b")
    same = {k: a[k] == b[k] for k in a}
    detail = ", ".join(f"{k} ({len(a[k])} bytes) {'identical' if v else 'DIFFER'}" for k, v in same.items())
    report(capsys, 8, "determinism", all(same.values()), detail)


# ---------------------------------------------------------------------------
# 9. grid search
# ---------------------------------------------------------------------------


def test_ac9_grid_search(capsys):
    trips = data.generate_synthetic(data.FleetSpec(), seed=0)
    grid = train.GridSpec({"window_days": [3, 5, 8], "learning_rate": [0.001, 0.01], "loss": ["MAE", "MSE"]})
    model = replace(BENCH_MODEL, variant="PM4", lstm_layer_sizes=(8, 8), attention_size=4, fc_sizes=(8, 2), max_seq_len=32)
    tc = train.TrainConfig(optimizer_kind="Adam", epochs=2, batch_size=64, patience=2)
    t0 = time.perf_counter()
    first = train.grid_search(grid, trips, model, tc, budget=len(grid), seed=0)
    elapsed = time.perf_counter() - t0
    second = train.grid_search(grid, trips, model, tc, budget=len(grid), seed=0, n_jobs=2)
    deterministic = first.ranked == second.ranked
    paper = {"window_days": 8, "learning_rate": 0.01, "loss": "MAE"}
    hits = [(i, r) for i, r in enumerate(first.ranked) if r["point"] == paper]
    valid = len(hits) == 1 and math.isfinite(hits[0][1]["error"]) and tc.optimizer_kind == "Adam"
    ok = len(first.ranked) == 12 and elapsed <= GRID_BUDGET_S and deterministic and valid
    rank = hits[0][0] + 1 if hits else None
    detail = (
        f"12 points in {elapsed:.0f} s (<= {GRID_BUDGET_S:.0f} s); rankings identical across runs and n_jobs: {deterministic}; "
        f"(8, 0.01, MAE, Adam) ranked {rank}/12 at {hits[0][1]['error']:.2f}%" if hits else "paper point missing"
    )
    report(capsys, 9, "grid search", ok, detail)
