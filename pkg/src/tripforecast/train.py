"""Losses, optimizers, the prediction-error metric and the training regimes.

Two regimes are provided:

* :func:`train_fixed_split` -- train on one split, early-stop on another,
  report on a held-out test set.
* :func:`cross_validate_transfer` -- repeated rounds on resampled subsets
  of a pool, each round continuing from the previous round's weights.

:func:`grid_search` sweeps hyperparameters on a subsample of the training
data.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import ndcore as nd
from .data import Dataset, NormStats, SequenceSample, denormalize_targets, prepare_dataset, to_arrays
from .ndcore import NumericError, Tensor
from .nn import ModelConfig, ModelParams, forward_batch, init_params, predict
from .seeds import derive_seed, rng_for

LOSS_KINDS = ("MAE", "MSE", "LHC", "HL", "MSLE", "PS")
OPTIMIZER_KINDS = ("SGD", "Adam", "Adagrad", "RMSProp")


class ConfigError(ValueError):
    pass


class LossDomainError(NumericError):
    pass


class UndefinedMetricError(ValueError):
    pass


class LeakageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Losses and metric
# ---------------------------------------------------------------------------


def loss(pred, target, kind: str) -> Tensor:
    """Mean loss of ``pred`` against ``target`` as a 0-d tensor.

    ``pred`` may be a tensor on the tape; ``target`` is constant.
    """
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")
    pred = nd.constant(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nd.ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    if kind == "MSLE" and (np.any(pred.data <= -1) or np.any(target <= -1)):
        raise LossDomainError("MSLE needs predictions and targets > -1")
    if kind == "PS" and np.any(pred.data <= 0):
        raise LossDomainError("PS (Poisson) loss needs positive predictions")
    tgt = nd.constant(target)
    if kind == "MAE":
        per = nd.unary("abs", pred - tgt)
    elif kind == "MSE":
        per = nd.unary("square", pred - tgt)
    elif kind == "LHC":
        per = nd.unary("logcosh", pred - tgt)
    elif kind == "HL":
        per = nd.unary("huber", pred - tgt)
    elif kind == "MSLE":
        per = nd.unary("square", nd.unary("log1p", pred) - nd.constant(np.log1p(target)))
    else:
        per = pred - nd.unary("log", pred) * tgt
    return nd.mean(per)


def prediction_error(preds, labels) -> float:
    """``100 * ||labels - preds|| / ||labels||`` over all entries."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape or labels.size == 0:
        raise ValueError(f"need equal non-empty lengths, got {preds.size} and {labels.size}")
    denom = np.sum(labels**2)
    if denom == 0:
        raise UndefinedMetricError("labels are all zero")
    return float(100.0 * math.sqrt(np.sum((labels - preds) ** 2) / denom))


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

ADAM_BETA1, ADAM_BETA2 = 0.9, 0.999
RMSPROP_RHO = 0.9
EPS = 1e-8


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict, kind: str, lr: float):
    """Update ``params`` in place; returns ``(params, state)``.

    ``state`` starts as an empty dict and is filled on the first call.
    """
    if kind not in OPTIMIZER_KINDS:
        raise ConfigError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZER_KINDS}")
    if len(params) != len(grads):
        raise ValueError("params and grads are not aligned")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    if not state:
        state["t"] = 0
        if kind == "Adam":
            state["m"] = [np.zeros_like(p) for p in params]
            state["v"] = [np.zeros_like(p) for p in params]
        elif kind in ("Adagrad", "RMSProp"):
            state["s"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    for k, (p, g) in enumerate(zip(params, grads)):
        if kind == "SGD":
            p -= lr * g
        elif kind == "Adam":
            m, v = state["m"][k], state["v"][k]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            m_hat = m / (1 - ADAM_BETA1**t)
            v_hat = v / (1 - ADAM_BETA2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + EPS)
        elif kind == "Adagrad":
            s = state["s"][k]
            s += g * g
            p -= lr * g / (np.sqrt(s) + EPS)
        else:
            s = state["s"][k]
            s *= RMSPROP_RHO
            s += (1 - RMSPROP_RHO) * g * g
            p -= lr * g / (np.sqrt(s) + EPS)
    return params, state


# ---------------------------------------------------------------------------
# Configs and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "MAE"
    optimizer_kind: str = "Adam"
    learning_rate: float = 0.01
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    patience: int = 50
    eval_train_max: int = 2048

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss_kind!r}")
        if self.optimizer_kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer {self.optimizer_kind!r}")
        # lr = 0 is accepted as a no-op run
        if not 0 <= self.learning_rate <= 0.1:
            raise ConfigError("learning_rate must lie in [0, 0.1]")
        if not 16 <= self.batch_size <= 512:
            raise ConfigError("batch_size must lie in [16, 512]")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")


@dataclass
class EvalReport:
    prediction_error_pct: float
    per_target: dict
    n_samples: int
    history: list = field(default_factory=list)
    best_epoch: int = 0
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(config: ModelConfig, params: ModelParams, samples: Sequence[SequenceSample], stats: NormStats) -> EvalReport:
    """Prediction error on denormalized (seconds, km) targets, both combined."""
    feats, vlen, tgt = to_arrays(samples)
    if len(samples) == 0:
        raise ConfigError("cannot evaluate on an empty sample set")
    pred = denormalize_targets(predict(config, params, feats, vlen), stats)
    true = denormalize_targets(tgt, stats)
    return EvalReport(
        prediction_error_pct=prediction_error(pred, true),
        per_target={
            "delta_t": prediction_error(pred[:, 0], true[:, 0]),
            "distance": prediction_error(pred[:, 1], true[:, 1]),
        },
        n_samples=len(samples),
    )


def persistence_predictions(samples: Sequence[SequenceSample]) -> np.ndarray:
    """Previous trip's normalized (time gap, distance) for each sample."""
    return np.array([s.features[s.valid_len - 1, :2] for s in samples])


def persistence_error(samples: Sequence[SequenceSample], stats: NormStats) -> float:
    pred = denormalize_targets(persistence_predictions(samples), stats)
    true = denormalize_targets(np.stack([s.target for s in samples]), stats)
    return prediction_error(pred, true)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _batch_loss(config, params, feats, vlen, tgt, kind) -> Tensor:
    out = forward_batch(config, params, feats, vlen)
    return loss(out, tgt.T, kind)


def _dataset_loss(config, params, feats, vlen, tgt, kind) -> float:
    pred = predict(config, params, feats, vlen)
    with nd.no_grad():
        return loss(pred.T, tgt.T, kind).item()


def _fit(
    config: ModelConfig,
    params: ModelParams,
    train: Sequence[SequenceSample],
    val: Sequence[SequenceSample],
    test: Sequence[SequenceSample] | None,
    tc: TrainConfig,
    stats: NormStats,
    seed: int,
    epoch_offset: int = 0,
):
    """Mini-batch training with early stopping; returns (best params, history, best epoch)."""
    if not train or not val:
        raise ConfigError("training and validation splits must be non-empty")
    params = params.copy().set_requires_grad(True)
    feats, vlen, tgt = to_arrays(train)
    rng = rng_for(seed, "shuffle")
    mon_idx = np.sort(rng_for(seed, "monitor").permutation(len(train))[: tc.eval_train_max])
    mon = [train[i] for i in mon_idx]
    mf, mv, mt = feats[mon_idx], vlen[mon_idx], tgt[mon_idx]

    def record(epoch):
        row = {
            "epoch": epoch_offset + epoch,
            "train_loss": _dataset_loss(config, params, mf, mv, mt, tc.loss_kind),
            "train_error": evaluate(config, params, mon, stats).prediction_error_pct,
            "val_error": evaluate(config, params, val, stats).prediction_error_pct,
        }
        row["test_error"] = evaluate(config, params, test, stats).prediction_error_pct if test else None
        return row

    history = [record(0)]
    best_val, best_epoch, best = history[0]["val_error"], 0, params.copy()
    tensors = params.tensors()
    state: dict = {}
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(train))
        for lo in range(0, len(order), tc.batch_size):
            idx = order[lo : lo + tc.batch_size]
            tape = nd.Tape()
            with tape:
                batch_loss = _batch_loss(config, params, feats[idx], vlen[idx], tgt[idx], tc.loss_kind)
            nd.backward(tape, batch_loss, wrt=tensors)
            optimizer_step([t.data for t in tensors], [t.grad for t in tensors], state, tc.optimizer_kind, tc.learning_rate)
            tape.reset()
        history.append(record(epoch))
        if history[-1]["val_error"] < best_val:
            best_val, best_epoch, best = history[-1]["val_error"], epoch, params.copy()
        elif epoch - best_epoch >= tc.patience:
            break
    best.set_requires_grad(False)
    return best, history, epoch_offset + best_epoch


def train_fixed_split(
    config: ModelConfig,
    dataset: Dataset,
    train_config: TrainConfig = TrainConfig(),
    params: ModelParams | None = None,
) -> tuple[ModelParams, EvalReport]:
    """Train on ``dataset.train``, early-stop on ``dataset.val``, report on ``dataset.test``.

    The returned parameters are those with the best validation error.
    """
    t0 = time.perf_counter()
    tc = train_config
    if not dataset.test:
        raise ConfigError("test split is empty")
    if params is None:
        params = init_params(config, derive_seed(tc.seed, "init", config.variant))
    best, history, best_epoch = _fit(
        config, params, dataset.train, dataset.val, dataset.test, tc, dataset.stats, derive_seed(tc.seed, "fit")
    )
    best.norm_stats = dataset.stats.to_dict()
    report = evaluate(config, best, dataset.test, dataset.stats)
    report.history = history
    report.best_epoch = best_epoch
    report.wall_clock_s = time.perf_counter() - t0
    return best, report


def _key(s: SequenceSample) -> tuple:
    return (s.vehicle_id, s.target_index)


def cross_validate_transfer(
    config: ModelConfig,
    pool: Sequence[SequenceSample],
    test_set: Sequence[SequenceSample],
    stats: NormStats,
    train_config: TrainConfig = TrainConfig(),
    rounds: int = 10,
    params: ModelParams | None = None,
    train_fraction: float = 0.75,
    val_fraction: float = 0.15,
    round_epochs: int | None = None,
) -> tuple[ModelParams, EvalReport]:
    """Repeated resampled training rounds carrying the weights forward.

    Each round draws ``train_fraction`` of the pool for training and a
    disjoint ``val_fraction`` for early stopping; whatever is left over is
    unused that round. ``params`` warm-starts the first round.
    """
    t0 = time.perf_counter()
    tc = train_config if round_epochs is None else replace(train_config, epochs=round_epochs)
    pool_keys = {_key(s) for s in pool}
    if pool_keys & {_key(s) for s in test_set}:
        raise LeakageError("test samples overlap the cross-validation pool")
    if not test_set or rounds < 1:
        raise ConfigError("need a non-empty test set and at least one round")
    if params is None:
        params = init_params(config, derive_seed(tc.seed, "init", config.variant))
    history, best_epoch, offset = [], 0, 0
    splits = cv_round_indices(len(pool), tc.seed, rounds, train_fraction, val_fraction)
    for r, (tr_idx, va_idx) in enumerate(splits):
        tr = [pool[i] for i in tr_idx]
        va = [pool[i] for i in va_idx]
        params, hist, best_epoch = _fit(
            config, params, tr, va, test_set, tc, stats, derive_seed(tc.seed, "cv-fit", r), epoch_offset=offset
        )
        for row in hist:
            row["round"] = r
        history += hist
        offset = history[-1]["epoch"]
    params.norm_stats = stats.to_dict()
    report = evaluate(config, params, test_set, stats)
    report.history = history
    report.best_epoch = best_epoch
    report.wall_clock_s = time.perf_counter() - t0
    return params, report


def cv_round_indices(n: int, seed: int, rounds: int, train_fraction: float = 0.75, val_fraction: float = 0.15):
    """The (train, val) pool indices each round uses; same draws as training."""
    n_tr = int(math.floor(n * train_fraction + 1e-9))
    n_va = int(math.floor(n * val_fraction + 1e-9))
    out = []
    for r in range(rounds):
        perm = rng_for(seed, "cv-round", r).permutation(n)
        out.append((np.sort(perm[:n_tr]), np.sort(perm[n_tr : n_tr + n_va])))
    return out


# ---------------------------------------------------------------------------
# Reports on disk
# ---------------------------------------------------------------------------


def write_metrics(path, report: EvalReport, run_config: dict) -> None:
    doc = {
        "config": run_config,
        "history": report.history,
        "final": {
            "prediction_error_pct": report.prediction_error_pct,
            "per_target": report.per_target,
            "n_samples": report.n_samples,
            "best_epoch": report.best_epoch,
        },
        "metadata": {"wall_clock_s": report.wall_clock_s},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def write_curve_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_error", "test_error"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_error"]), "" if row["test_error"] is None else repr(row["test_error"])])


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

# Ranges as printed: (start, step, stop), inclusive.
TABLE1_RANGES = {
    "window_days": (1, 1, 14),
    "lstm_layers": (1, 1, 5),
    "lstm_neurons": (20, 10, 150),
    "attention_size": (4, 4, 256),
    "fc_layers": (1, 1, 3),
    "batch_size": (16, 16, 512),
    "learning_rate": (0.00001, 0.05, 0.1),
}
TABLE1_CHOICES = {
    "optimizer": OPTIMIZER_KINDS,
    "loss": LOSS_KINDS,
}


def parse_range(text: str) -> list:
    """Expand ``"(start:step:stop)"`` into its inclusive lattice."""
    body = text.strip().strip("()")
    parts = body.split(":")
    if len(parts) != 3:
        raise ConfigError(f"range {text!r} is not (start:step:stop)")
    start, step, stop = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ConfigError(f"range {text!r} is empty")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    vals = [start + i * step for i in range(n)]
    if all(float(p).is_integer() for p in (start, step, stop)):
        return [int(round(v)) for v in vals]
    return [round(v, 12) for v in vals]


def _in_table1(name: str, value) -> bool:
    if name in TABLE1_CHOICES:
        return value in TABLE1_CHOICES[name]
    if name not in TABLE1_RANGES:
        return True
    lo, _, hi = TABLE1_RANGES[name]
    vals = value if isinstance(value, (tuple, list)) else (value,)
    return all(lo <= v <= hi for v in vals)


@dataclass
class GridSpec:
    """Discrete values per hyperparameter.

    Values may be given as lists or as ``"(start:step:stop)"`` strings.
    Recognised names: window_days, lstm_layers, lstm_neurons (a tuple of
    widths), attention_size, fc_layers, batch_size, learning_rate,
    optimizer, loss.
    """

    values: dict

    def __post_init__(self):
        expanded = {}
        for name, vals in self.values.items():
            if isinstance(vals, str):
                vals = parse_range(vals)
            vals = [tuple(v) if isinstance(v, list) else v for v in vals]
            if not vals:
                raise ConfigError(f"hyperparameter {name!r} has no values")
            for v in vals:
                if not _in_table1(name, v):
                    raise ConfigError(f"{name}={v!r} lies outside its searchable range")
            expanded[name] = vals
        self.values = expanded

    def points(self) -> list[dict]:
        names = sorted(self.values)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.values[n] for n in names))]

    def __len__(self) -> int:
        return math.prod(len(v) for v in self.values.values()) if self.values else 0


@dataclass
class GridResult:
    ranked: list  # [{"point", "error", "seed"}], best first
    best: dict
    variation: dict  # hyperparameter -> spread of mean error across its values


def apply_point(point: dict, model: ModelConfig, tc: TrainConfig) -> tuple[ModelConfig, TrainConfig, int]:
    """Turn a grid point into concrete configs plus the window size."""
    m, t = {}, {}
    sizes = list(model.lstm_layer_sizes)
    if "lstm_neurons" in point:
        v = point["lstm_neurons"]
        sizes = list(v) if isinstance(v, tuple) else [v] * len(sizes)
    if "lstm_layers" in point:
        n = point["lstm_layers"]
        sizes = (sizes * n)[:n] if len(sizes) < n else sizes[:n]
    m["lstm_layer_sizes"] = tuple(sizes)
    if "attention_size" in point:
        m["attention_size"] = point["attention_size"]
    if "fc_layers" in point:
        hidden = model.fc_sizes[0] if len(model.fc_sizes) > 1 else 32
        m["fc_sizes"] = tuple([hidden] * (point["fc_layers"] - 1) + [2])
    for src, dst in (("batch_size", "batch_size"), ("learning_rate", "learning_rate"), ("optimizer", "optimizer_kind"), ("loss", "loss_kind")):
        if src in point:
            t[dst] = point[src]
    return replace(model, **m), replace(tc, **t), int(point.get("window_days", 8))


def _point_key(point: dict) -> str:
    return json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in sorted(point.items())}, sort_keys=True)


def tuning_split(dataset: Dataset, seed: int, fraction: float = 0.25):
    """Seeded ``fraction`` subsample of the training split, cut 80/20 into fit and held-out parts."""
    rng = rng_for(seed, "tuning-subsample", dataset.window_days)
    n = len(dataset.train)
    take = np.sort(rng.permutation(n)[: max(2, int(round(n * fraction)))])
    sub = [dataset.train[i] for i in take]
    cut = int(round(len(sub) * 0.8))
    return sub[:cut], sub[cut:]


def _run_trial(args):
    point, trips, model, tc, seed, fraction, tz = args
    mcfg, tcfg, window = apply_point(point, model, tc)
    trial_seed = derive_seed(seed, "trial", _point_key(point))
    tcfg = replace(tcfg, seed=trial_seed)
    ds = prepare_dataset(trips, window_days=window, max_seq_len=model.max_seq_len, tz=tz)
    fit, held = tuning_split(ds, seed, fraction)
    tuning = Dataset(fit, held, held, ds.stats, ds.window_days, ds.max_seq_len, tz)
    mcfg = replace(mcfg, max_seq_len=ds.max_seq_len)
    try:
        _, report = train_fixed_split(mcfg, tuning, tcfg)
        err = report.prediction_error_pct
    except NumericError:
        err = math.inf
    return {"point": point, "error": err, "seed": trial_seed}


def grid_search(
    grid: GridSpec,
    trips,
    model: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    budget: int | None = None,
    seed: int = 0,
    subsample: float = 0.25,
    tz: str = "Europe/Stockholm",
    n_jobs: int = 1,
) -> GridResult:
    """Evaluate grid points on a 25% tuning subsample and rank them.

    If the grid has more points than ``budget``, a seeded random subset of
    ``budget`` points is evaluated. Trials are independent and seeded from
    (``seed``, point), so the ranking does not depend on ``n_jobs``.
    Numerically failed trials (e.g. a loss leaving its domain) rank last
    with an infinite error.
    """
    points = grid.points()
    if not points:
        raise ConfigError("empty grid")
    if budget is not None:
        if budget < 1:
            raise ConfigError("budget must be >= 1")
        if budget < len(points):
            pick = np.sort(rng_for(seed, "grid-budget").permutation(len(points))[:budget])
            points = [points[i] for i in pick]
    jobs = [(p, trips, model, train_config, seed, subsample, tz) for p in points]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_run_trial, jobs))
    else:
        results = [_run_trial(j) for j in jobs]
    order = sorted(range(len(results)), key=lambda i: (results[i]["error"], i))
    ranked = [results[i] for i in order]

    variation = {}
    for name in sorted(grid.values):
        means = {}
        for r in results:
            means.setdefault(_point_key({"v": r["point"][name]}), []).append(r["error"])
        if len(means) > 1:
            m = [float(np.mean(v)) for v in means.values()]
            variation[name] = max(m) - min(m)
    return GridResult(ranked, ranked[0], variation)
