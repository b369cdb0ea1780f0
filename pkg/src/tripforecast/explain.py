"""TimeSHAP-style attributions for sequence forecasts.

A prediction is explained either per historical trip (``level="event"``)
or per feature group (``level="feature"``: time gap, distance, weekday).
Units switched off in a coalition are replaced by a background value. The
explainer fits a linear surrogate ``g(z) = b0 + sum(w_i z_i)`` by
Shapley-kernel weighted least squares, with the empty and full coalitions
imposed as equality constraints so that ``b0 + sum(w) == f(X)`` exactly.

With every coalition enumerated the solution is the exact Shapley value;
:func:`brute_force_shapley` computes that directly from the classical
formula and serves as an independent check.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FeatureSeries, SequenceSample
from .nn import ModelConfig, ModelParams, predict
from .seeds import rng_for

LEVELS = ("event", "feature")
OUTPUTS = ("delta_t", "distance")
FEATURE_GROUPS = {"delta_t": (0,), "distance": (1,), "weekday": tuple(range(2, 9))}

# A scorer maps a padded batch (features (N, L, F), valid_len (N,)) to (N,) scores.
Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ExplainError(ValueError):
    pass


class DegenerateExplanationError(ExplainError):
    pass


class CostGuardError(ExplainError):
    pass


@dataclass
class Attribution:
    weights: np.ndarray
    base_score: float
    model_score: float
    level: str
    output: str | None = None
    units: list = field(default_factory=list)
    exact: bool = True

    @property
    def efficiency_gap(self) -> float:
        return float(self.base_score + self.weights.sum() - self.model_score)

    def to_dict(self, echo: dict | None = None) -> dict:
        weights = {}
        for u, w in zip(self.units, self.weights):
            entry = {"shap_value": float(w)}
            if echo and u in echo:
                entry.update(echo[u])
            weights[str(u)] = entry
        return {
            "level": self.level,
            "output": self.output,
            "base_score": self.base_score,
            "model_score": self.model_score,
            "exact": self.exact,
            "weights": weights,
        }


def n_units(sample: SequenceSample, level: str) -> int:
    if level == "event":
        return int(sample.valid_len)
    if level == "feature":
        return len(FEATURE_GROUPS)
    raise ExplainError(f"level must be one of {LEVELS}")


def _perturb_batch(sample: SequenceSample, Z: np.ndarray, background: np.ndarray, level: str) -> np.ndarray:
    """Features for every coalition row of ``Z``: ``(N, L, F)``."""
    Z = np.asarray(Z, dtype=bool)
    m = n_units(sample, level)
    if Z.ndim != 2 or Z.shape[1] != m:
        raise ExplainError(f"coalitions have {Z.shape[-1]} entries, {level} level needs {m}")
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (sample.features.shape[1],):
        raise ExplainError(f"background needs {sample.features.shape[1]} values")
    n = sample.valid_len
    X = np.broadcast_to(sample.features, (len(Z),) + sample.features.shape).copy()
    if level == "event":
        off = ~Z  # (N, n)
        X[:, :n, :] = np.where(off[:, :, None], background[None, None, :], X[:, :n, :])
    else:
        for u, cols in enumerate(FEATURE_GROUPS.values()):
            off = ~Z[:, u]
            for c in cols:
                X[off, :n, c] = background[c]
    return X


def perturb(sample: SequenceSample, z, background, level: str) -> SequenceSample:
    """The sample with switched-off units replaced by ``background``.

    Padded rows are left untouched (zero).
    """
    z = np.asarray(z).reshape(1, -1)
    if not np.isin(z, (0, 1)).all():
        raise ExplainError("coalition entries must be 0 or 1")
    X = _perturb_batch(sample, z, background, level)[0]
    return SequenceSample(X, sample.valid_len, sample.target.copy(), sample.vehicle_id, sample.target_time, sample.target_index)


def shapley_kernel_weight(m: int, s: int) -> float:
    """``(m-1) / (C(m,s) s (m-s))`` for ``0 < s < m``."""
    if not 0 < s < m:
        raise ExplainError(f"kernel weight undefined for s={s}, m={m}; endpoints are constraints")
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _all_coalitions(m: int) -> np.ndarray:
    masks = np.arange(2**m, dtype=np.int64)
    return ((masks[:, None] >> np.arange(m)) & 1).astype(bool)


def _score(model: Scorer, sample: SequenceSample, Z: np.ndarray, background, level) -> np.ndarray:
    X = _perturb_batch(sample, Z, background, level)
    vlen = np.full(len(Z), sample.valid_len, dtype=np.int64)
    return np.asarray(model(X, vlen), dtype=np.float64).reshape(-1)


def _sample_coalitions(m: int, n_samples: int, seed: int) -> np.ndarray:
    """Paired draws: a subset whose size follows the kernel mass, plus its complement."""
    rng = rng_for(seed, "coalitions", m)
    sizes = np.arange(1, m)
    mass = (m - 1) / (sizes * (m - sizes))
    mass = mass / mass.sum()
    half = max(1, n_samples // 2)
    rows = np.zeros((2 * half, m), dtype=bool)
    for k in range(half):
        s = rng.choice(sizes, p=mass)
        on = rng.choice(m, size=s, replace=False)
        rows[2 * k, on] = True
        rows[2 * k + 1] = ~rows[2 * k]
    return rows


def timeshap(
    model: Scorer,
    sample: SequenceSample,
    background,
    level: str = "event",
    max_exact_m: int = 12,
    n_samples: int = 2048,
    seed: int = 0,
) -> Attribution:
    """Fit the constrained kernel-weighted linear surrogate.

    Enumerates every coalition when there are at most ``max_exact_m``
    units; otherwise draws ``n_samples`` coalitions (seeded, in
    complementary pairs) and weights them uniformly, since they were drawn
    in proportion to the kernel.
    """
    m = n_units(sample, level)
    ends = np.vstack([np.zeros(m, dtype=bool), np.ones(m, dtype=bool)])
    f0, f1 = _score(model, sample, ends, background, level)
    delta = f1 - f0
    units = list(range(m)) if level == "event" else list(FEATURE_GROUPS)
    if m == 1:
        return Attribution(np.array([delta]), float(f0), float(f1), level, units=units)

    exact = m <= max_exact_m
    if exact:
        Z = _all_coalitions(m)[1:-1]
        sizes = Z.sum(axis=1)
        kw = np.array([shapley_kernel_weight(m, int(s)) for s in sizes])
    else:
        Z = _sample_coalitions(m, n_samples, seed)
        kw = np.ones(len(Z))
    y = _score(model, sample, Z, background, level)

    # eliminate the last weight with the efficiency constraint
    Zf = Z.astype(np.float64)
    A = Zf[:, :-1] - Zf[:, -1:]
    b = y - f0 - Zf[:, -1] * delta
    sw = np.sqrt(kw)
    sol, _, rank, sv = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    if rank < m - 1 or sv[-1] <= sv[0] * 1e-12:
        raise DegenerateExplanationError(
            f"coalition design has rank {rank} < {m - 1}; draw more samples"
        )
    w = np.append(sol, delta - sol.sum())
    return Attribution(w, float(f0), float(f1), level, units=units, exact=exact)


def brute_force_shapley(model: Scorer, sample: SequenceSample, background, level: str = "event", max_m: int = 16) -> np.ndarray:
    """Shapley values from the subset-sum definition (2^m model calls)."""
    m = n_units(sample, level)
    if m > max_m:
        raise CostGuardError(f"{m} units is too many for exact enumeration (limit {max_m})")
    values = _score(model, sample, _all_coalitions(m), background, level)
    masks = np.arange(2**m, dtype=np.int64)
    sizes = np.array([bin(x).count("1") for x in range(2**m)])
    fact = [math.factorial(k) for k in range(m + 1)]
    w = np.zeros(m)
    for i in range(m):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        s = sizes[without]
        coef = np.array([fact[k] * fact[m - k - 1] for k in s], dtype=np.float64) / fact[m]
        w[i] = np.sum(coef * (values[without | bit] - values[without]))
    return w


# ---------------------------------------------------------------------------
# Model glue and reports
# ---------------------------------------------------------------------------


def model_scorer(config: ModelConfig, params: ModelParams, output: str = "distance") -> Scorer:
    """Scorer for one normalized model output."""
    if output not in OUTPUTS:
        raise ExplainError(f"output must be one of {OUTPUTS}")
    col = OUTPUTS.index(output)

    def score(features, valid_len):
        return predict(config, params, features, valid_len)[:, col]

    return score


def background_values(train_samples: Sequence[SequenceSample] | None, zeros: bool = False, n_features: int = 9) -> np.ndarray:
    """Training-set per-feature means in normalized space, or zeros."""
    if zeros:
        return np.zeros(n_features)
    from .data import feature_means

    return feature_means(train_samples)


def explain_prediction(
    config: ModelConfig,
    params: ModelParams,
    sample: SequenceSample,
    background,
    level: str = "event",
    output: str = "distance",
    **kwargs,
) -> Attribution:
    att = timeshap(model_scorer(config, params, output), sample, background, level, **kwargs)
    att.output = output
    return att


def trip_echo(sample: SequenceSample, series: FeatureSeries | None) -> dict:
    """Start time and distance of each history trip, keyed by unit index."""
    if series is None or sample.target_index < 0:
        return {}
    first = sample.target_index - sample.valid_len
    return {
        u: {"start_time": float(series.start_time[first + u]), "distance_km": float(series.distance[first + u])}
        for u in range(sample.valid_len)
    }


def write_attribution_json(path, att: Attribution, run_config: dict | None = None, echo: dict | None = None) -> None:
    doc = att.to_dict(echo)
    if run_config is not None:
        doc["config"] = run_config
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def write_attribution_csv(path, att: Attribution) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_index", "shap_value"])
        for u, v in zip(att.units, att.weights):
            w.writerow([u, repr(float(v))])
