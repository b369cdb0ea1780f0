"""The desk-scale synthetic benchmark.

Trains every variant on the default synthetic fleet, compares against the
persistence baseline, and runs PM4 cross-validation transfer warm-started
from its fixed-split weights. Model sizes are reduced so the whole run
finishes in a few minutes on one CPU core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .data import Dataset, FleetSpec, generate_synthetic, prepare_dataset
from .nn import VARIANTS, ModelConfig
from .train import EvalReport, TrainConfig, cross_validate_transfer, persistence_error, train_fixed_split

BENCH_MODEL = ModelConfig(lstm_layer_sizes=(16, 16, 16), attention_size=8, fc_sizes=(16, 2))
BENCH_TRAIN = TrainConfig(epochs=8, batch_size=128, patience=3)
BENCH_WINDOW_DAYS = 8
BENCH_CV_ROUNDS = 10
BENCH_CV_ROUND_EPOCHS = 1


@dataclass
class BenchmarkResult:
    seed: int
    persistence_pct: float
    fixed: dict = field(default_factory=dict)  # variant -> EvalReport
    cv: EvalReport | None = None
    wall_clock_s: float = 0.0

    def errors(self) -> dict:
        out = {"persistence": self.persistence_pct}
        out.update({v: r.prediction_error_pct for v, r in self.fixed.items()})
        if self.cv is not None:
            out["PM4-cv"] = self.cv.prediction_error_pct
        return out


def benchmark_dataset(seed: int = 0, spec: FleetSpec | None = None, window_days: int = BENCH_WINDOW_DAYS) -> Dataset:
    trips = generate_synthetic(spec or FleetSpec(), seed=seed)
    return prepare_dataset(trips, window_days=window_days)


def run_benchmark(
    seed: int = 0,
    variants=VARIANTS,
    model: ModelConfig = BENCH_MODEL,
    train_config: TrainConfig = BENCH_TRAIN,
    cv_rounds: int = BENCH_CV_ROUNDS,
    cv_round_epochs: int | None = BENCH_CV_ROUND_EPOCHS,
    dataset: Dataset | None = None,
    log=None,
) -> BenchmarkResult:
    """Run the comparison; ``cv_rounds=0`` skips cross-validation."""
    t0 = time.perf_counter()
    ds = dataset if dataset is not None else benchmark_dataset(seed)
    tc = replace(train_config, seed=seed)
    res = BenchmarkResult(seed, persistence_error(ds.test, ds.stats))
    say = log or (lambda msg: None)
    say(f"persistence: {res.persistence_pct:.3f}%")
    pm4_params = None
    for v in variants:
        cfg = replace(model, variant=v, max_seq_len=ds.max_seq_len)
        params, report = train_fixed_split(cfg, ds, tc)
        res.fixed[v] = report
        if v == "PM4":
            pm4_params = params
        say(f"{v}: {report.prediction_error_pct:.3f}% ({report.wall_clock_s:.0f} s)")
    if cv_rounds and pm4_params is not None:
        cfg = replace(model, variant="PM4", max_seq_len=ds.max_seq_len)
        _, res.cv = cross_validate_transfer(
            cfg, ds.train + ds.val, ds.test, ds.stats, tc, rounds=cv_rounds, params=pm4_params, round_epochs=cv_round_epochs
        )
        say(f"PM4 cross-val: {res.cv.prediction_error_pct:.3f}% ({res.cv.wall_clock_s:.0f} s)")
    res.wall_clock_s = time.perf_counter() - t0
    return res
