"""LSTM stacks, the attention head and the four forecasting architectures.

Variants
--------
``PM1``  one 3-layer LSTM over (dt, distance, weekday) -> linear FC head
``PM2``  two parallel LSTMs, (dt, weekday) and (distance, weekday) -> linear FC head
``PM3``  PM1 plus an attention head -> relu FC -> sigmoid output
``PM4``  PM2 with one attention head per branch -> relu FC -> sigmoid output

All computations go through :mod:`tripforecast.ndcore`. Batches are laid
out column-wise: a step of a batch of ``B`` sequences is a ``(width, B)``
matrix. Sequences are padded at the end; padded steps never update state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor

VARIANTS = ("PM1", "PM2", "PM3", "PM4")
ATTENTION_SOURCES = ("all_layers", "top_layer")

# Column layout of SequenceSample.features.
DT_COL = 0
DIST_COL = 1
WEEKDAY_COLS = tuple(range(2, 9))
N_FEATURES = 9


class ConfigError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureLayout:
    """Which feature columns each branch reads."""

    dt: int = DT_COL
    distance: int = DIST_COL
    weekday: tuple[int, ...] = WEEKDAY_COLS

    @property
    def n_features(self) -> int:
        return 2 + len(self.weekday)

    def joint(self) -> tuple[int, ...]:
        return (self.dt, self.distance, *self.weekday)

    def time_branch(self) -> tuple[int, ...]:
        return (self.dt, *self.weekday)

    def distance_branch(self) -> tuple[int, ...]:
        return (self.distance, *self.weekday)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "PM4"
    lstm_layer_sizes: tuple[int, ...] = (40, 60, 40)
    attention_size: int = 64
    fc_sizes: tuple[int, ...] = (64, 2)
    max_seq_len: int = 64
    input_feature_layout: FeatureLayout = field(default_factory=FeatureLayout)
    attention_source: str = "all_layers"

    def __post_init__(self):
        object.__setattr__(self, "variant", self.variant.upper())
        object.__setattr__(self, "lstm_layer_sizes", tuple(int(s) for s in self.lstm_layer_sizes))
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 1 <= len(self.lstm_layer_sizes) <= 5:
            raise ConfigError("lstm_layer_sizes needs 1 to 5 layers")
        if not 1 <= len(self.fc_sizes) <= 3:
            raise ConfigError("fc_sizes needs 1 to 3 layers")
        if self.fc_sizes[-1] != 2:
            raise ConfigError("the last fully-connected layer must have 2 outputs")
        if min(self.lstm_layer_sizes) < 1 or min(self.fc_sizes) < 1:
            raise ConfigError("layer widths must be positive")
        if self.has_attention and self.attention_size < 1:
            raise ConfigError("attention_size must be positive for attention variants")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.attention_source not in ATTENTION_SOURCES:
            raise ConfigError(f"attention_source must be one of {ATTENTION_SOURCES}")

    @property
    def parallel(self) -> bool:
        return self.variant in ("PM2", "PM4")

    @property
    def has_attention(self) -> bool:
        return self.variant in ("PM3", "PM4")

    @property
    def sigmoid_head(self) -> bool:
        return self.has_attention

    def branch_columns(self) -> list[tuple[int, ...]]:
        lay = self.input_feature_layout
        if self.parallel:
            return [lay.time_branch(), lay.distance_branch()]
        return [lay.joint()]

    @property
    def attention_width(self) -> int:
        """Row count k of the hidden matrix fed to attention."""
        if self.attention_source == "all_layers":
            return sum(self.lstm_layer_sizes)
        return self.lstm_layer_sizes[-1]

    def head_input_width(self) -> int:
        n_branches = 2 if self.parallel else 1
        width = n_branches * self.lstm_layer_sizes[-1]
        if self.has_attention:
            width += n_branches * self.attention_width
        return width

    def to_dict(self) -> dict:
        lay = self.input_feature_layout
        return {
            "variant": self.variant,
            "lstm_layer_sizes": list(self.lstm_layer_sizes),
            "attention_size": self.attention_size,
            "fc_sizes": list(self.fc_sizes),
            "max_seq_len": self.max_seq_len,
            "input_feature_layout": {
                "dt": lay.dt,
                "distance": lay.distance,
                "weekday": list(lay.weekday),
            },
            "attention_source": self.attention_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        lay = d.pop("input_feature_layout", None)
        if lay is not None:
            d["input_feature_layout"] = FeatureLayout(
                dt=lay["dt"], distance=lay["distance"], weekday=tuple(lay["weekday"])
            )
        return cls(**d)


GATES = ("i", "f", "o", "c")


@dataclass
class LstmLayerParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_c: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @property
    def hidden(self) -> int:
        return self.U_i.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.W_i.shape[1]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for prefix in ("W", "U", "b"):
            for g in GATES:
                name = f"{prefix}_{g}"
                yield name, getattr(self, name)


@dataclass
class AttentionParams:
    W_h: Tensor  # k x k
    W_v: Tensor  # k_a x k_a
    v_a: Tensor  # k_a x 1
    w: Tensor  # (k + k_a) x 1
    W_p: Tensor  # k x k
    W_x: Tensor  # k x k

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("W_h", "W_v", "v_a", "w", "W_p", "W_x"):
            yield name, getattr(self, name)


@dataclass
class BranchParams:
    layers: list[LstmLayerParams]
    attention: AttentionParams | None = None


@dataclass
class ModelParams:
    branches: list[BranchParams]
    fc: list[tuple[Tensor, Tensor]]
    norm_stats: dict | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        """Parameters under their canonical checkpoint names, in canonical order."""
        out = []
        for bi, br in enumerate(self.branches):
            for li, layer in enumerate(br.layers):
                out += [(f"branch{bi}.lstm{li}.{n}", t) for n, t in layer.named()]
            if br.attention is not None:
                out += [(f"branch{bi}.attention.{n}", t) for n, t in br.attention.named()]
        for j, (W, b) in enumerate(self.fc):
            out += [(f"fc{j}.W", W), (f"fc{j}.b", b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def copy(self) -> "ModelParams":
        clone = _map_params(self, lambda t: Tensor(t.data.copy()))
        clone.norm_stats = None if self.norm_stats is None else dict(self.norm_stats)
        return clone

    def set_requires_grad(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors():
            t.requires_grad = flag
        return self


def _map_params(params: ModelParams, fn) -> ModelParams:
    branches = []
    for br in params.branches:
        layers = [LstmLayerParams(**{n: fn(t) for n, t in layer.named()}) for layer in br.layers]
        att = None
        if br.attention is not None:
            att = AttentionParams(**{n: fn(t) for n, t in br.attention.named()})
        branches.append(BranchParams(layers, att))
    fc = [(fn(W), fn(b)) for W, b in params.fc]
    return ModelParams(branches, fc, params.norm_stats)


# ---------------------------------------------------------------------------
# Shapes, counting and initialisation
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    """Canonical (name, shape) list; the layout a checkpoint must match."""
    shapes = []
    k_a = config.attention_size
    k = config.attention_width
    for bi, cols in enumerate(config.branch_columns()):
        n_in = len(cols)
        for li, h in enumerate(config.lstm_layer_sizes):
            for g in GATES:
                shapes.append((f"branch{bi}.lstm{li}.W_{g}", (h, n_in)))
            for g in GATES:
                shapes.append((f"branch{bi}.lstm{li}.U_{g}", (h, h)))
            for g in GATES:
                shapes.append((f"branch{bi}.lstm{li}.b_{g}", (h, 1)))
            n_in = h
        if config.has_attention:
            shapes += [
                (f"branch{bi}.attention.W_h", (k, k)),
                (f"branch{bi}.attention.W_v", (k_a, k_a)),
                (f"branch{bi}.attention.v_a", (k_a, 1)),
                (f"branch{bi}.attention.w", (k + k_a, 1)),
                (f"branch{bi}.attention.W_p", (k, k)),
                (f"branch{bi}.attention.W_x", (k, k)),
            ]
    n_in = config.head_input_width()
    for j, n_out in enumerate(config.fc_sizes):
        shapes += [(f"fc{j}.W", (n_out, n_in)), (f"fc{j}.b", (n_out, 1))]
        n_in = n_out
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(r * c for _, (r, c) in param_shapes(config))


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Assemble ModelParams from canonical-name arrays (no copying of layout logic)."""
    n_branches = 2 if config.parallel else 1
    branches = []
    for bi in range(n_branches):
        layers = []
        for li in range(len(config.lstm_layer_sizes)):
            pre = f"branch{bi}.lstm{li}."
            layers.append(
                LstmLayerParams(
                    **{f"{p}_{g}": Tensor(arrays[pre + f"{p}_{g}"]) for p in "WUb" for g in GATES}
                )
            )
        att = None
        if config.has_attention:
            pre = f"branch{bi}.attention."
            att = AttentionParams(
                **{n: Tensor(arrays[pre + n]) for n in ("W_h", "W_v", "v_a", "w", "W_p", "W_x")}
            )
        branches.append(BranchParams(layers, att))
    fc = [
        (Tensor(arrays[f"fc{j}.W"]), Tensor(arrays[f"fc{j}.b"])) for j in range(len(config.fc_sizes))
    ]
    return ModelParams(branches, fc)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    arrays = {}
    for name, (rows, cols) in param_shapes(config):
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b") and (".lstm" in name or name.startswith("fc")):
            arrays[name] = np.ones((rows, cols)) if leaf == "b_f" else np.zeros((rows, cols))
            continue
        limit = np.sqrt(6.0 / (rows + cols))
        arrays[name] = rng.uniform(-limit, limit, size=(rows, cols))
    return params_from_arrays(config, arrays)


def check_params(config: ModelConfig, params: ModelParams) -> None:
    expected = param_shapes(config)
    got = [(n, t.shape) for n, t in params.named()]
    if [n for n, _ in expected] != [n for n, _ in got]:
        raise ConfigError(f"parameters do not match variant {config.variant}")
    for (n, s), (_, gs) in zip(expected, got):
        if tuple(s) != tuple(gs):
            raise ConfigError(f"parameter {n} has shape {gs}, expected {s}")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def lstm_cell_forward(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmLayerParams):
    """One LSTM step with the four gate groups kept separate.

    ``x`` is ``(n_in, B)``, states are ``(hidden, B)``. Returns ``(h, c)``.
    """
    x, h_prev, c_prev = nd.constant(x), nd.constant(h_prev), nd.constant(c_prev)
    if x.ndim != 2 or x.shape[0] != p.n_inputs:
        raise nd.ShapeError(f"input shape {x.shape} does not fit W of shape {p.W_i.shape}")
    if h_prev.shape != (p.hidden, x.shape[1]) or c_prev.shape != h_prev.shape:
        raise nd.ShapeError(
            f"state shapes {h_prev.shape}/{c_prev.shape} do not fit hidden size {p.hidden}"
        )
    B = x.shape[1]

    def pre(W, U, b):
        return nd.matmul(W, x) + nd.matmul(U, h_prev) + nd.repeat(b, B, axis=1)

    i = nd.sigmoid(pre(p.W_i, p.U_i, p.b_i))
    f = nd.sigmoid(pre(p.W_f, p.U_f, p.b_f))
    o = nd.sigmoid(pre(p.W_o, p.U_o, p.b_o))
    g = nd.tanh(pre(p.W_c, p.U_c, p.b_c))
    c = f * c_prev + i * g
    h = o * nd.tanh(c)
    return h, c


def _lstm_layer(inputs: Tensor, valid: np.ndarray, p: LstmLayerParams) -> tuple[Tensor, Tensor]:
    """Run one layer over ``T`` steps given all inputs at once.

    ``inputs`` is ``(n_in, T*B)`` with step-major columns, ``valid`` a
    ``(T, B)`` boolean array. Input projections for every step are done in a
    single product; the recurrence is one fused op. Returns the hidden
    states of all steps ``(h, T*B)`` and the final state ``(h, B)``.
    """
    T, B = valid.shape
    W = nd.concat([p.W_i, p.W_f, p.W_o, p.W_c], axis=0)
    U = nd.concat([p.U_i, p.U_f, p.U_o, p.U_c], axis=0)
    bias = nd.concat([p.b_i, p.b_f, p.b_o, p.b_c], axis=0)
    projected = nd.matmul(W, inputs) + nd.repeat(bias, T * B, axis=1)
    states = nd.lstm_recurrence(projected, U, valid)
    return states, nd.slice_axis(states, (T - 1) * B, T * B, axis=1)


def _valid_matrix(valid_len: np.ndarray, T: int) -> np.ndarray:
    return np.arange(T)[:, None] < np.asarray(valid_len)[None, :]


def _step_major(x: np.ndarray) -> np.ndarray:
    """(B, T, F) -> (F, T*B) with columns ordered step-major."""
    B, T, F = x.shape
    return np.ascontiguousarray(np.transpose(x, (2, 1, 0)).reshape(F, T * B))


def _run_stack(x: np.ndarray, valid: np.ndarray, layers: Sequence[LstmLayerParams]):
    """Stacked LSTM over a ``(B, T, F)`` batch.

    Returns per-layer state matrices ``(h_l, T*B)`` and per-layer final
    states ``(h_l, B)``.
    """
    inputs = nd.constant(_step_major(x))
    all_states, lasts = [], []
    for layer in layers:
        states, h_last = _lstm_layer(inputs, valid, layer)
        all_states.append(states)
        lasts.append(h_last)
        inputs = states
    return all_states, lasts


def lstm_stack_forward(sequence, valid_len: int, layers: Sequence[LstmLayerParams]):
    """Stacked LSTM over one padded ``(L, F)`` sequence.

    Returns ``(H, h_last)``: the top-layer hidden matrix ``(k, valid_len)``
    and the top-layer state after the last valid step ``(k, 1)``.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if valid_len < 1:
        raise EmptySequenceError("sequence has no valid steps")
    if valid_len > seq.shape[0]:
        raise CapacityError(f"valid_len {valid_len} exceeds sequence length {seq.shape[0]}")
    x = seq[None, :valid_len, :]
    valid = np.ones((valid_len, 1), dtype=bool)
    all_states, lasts = _run_stack(x, valid, layers)
    return all_states[-1], lasts[-1]


def project_embed(H: Tensor, L: int) -> tuple[Tensor, np.ndarray]:
    """Zero-pad a ``(k, n_valid)`` hidden matrix to ``(k, L)`` plus its mask."""
    H = nd.constant(H)
    k, n = H.shape
    if n > L:
        raise CapacityError(f"{n} valid steps exceed capacity {L}")
    mask = np.zeros(L, dtype=bool)
    mask[:n] = True
    if n == L:
        return H, mask
    return nd.concat([H, nd.constant(np.zeros((k, L - n)))], axis=1), mask


def _embed_batch(states: Tensor, valid: np.ndarray) -> Tensor:
    """Batched counterpart of :func:`project_embed`.

    Held states at padded steps are zeroed. Columns past the batch's longest
    sequence are omitted: their attention weight is zero and so is their
    content, so they cannot change the context vector.
    """
    if valid.all():
        return states
    k = states.shape[0]
    return nd.where(np.broadcast_to(valid.reshape(1, -1), (k, valid.size)), states, 0.0)


def attention_forward(H: Tensor, mask, p: AttentionParams, h_last: Tensor):
    """Attention over hidden states.

    ``H`` is ``(k, T*B)`` with step-major columns (``B`` = columns of
    ``h_last``), ``mask`` a length ``T*B`` boolean vector. Scores pass
    through a sigmoid, not a softmax, so the weights need not sum to one.

    Returns ``(alpha (1, T*B), r (k, B), h_star (k, B))``.
    """
    H, h_last = nd.constant(H), nd.constant(h_last)
    k, N = H.shape
    B = h_last.shape[1]
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if p.W_h.shape != (k, k) or p.W_x.shape != (k, k) or p.W_p.shape != (k, k):
        raise nd.ShapeError(f"attention weights do not match hidden width {k}")
    k_a = p.W_v.shape[0]
    if p.v_a.shape != (k_a, 1) or p.w.shape != (k + k_a, 1):
        raise nd.ShapeError("aspect vector or scoring vector has the wrong size")
    if h_last.shape[0] != k or N % B or mask.shape != (N,):
        raise nd.ShapeError(f"H {H.shape}, mask {mask.shape} and h_last {h_last.shape} disagree")
    T = N // B

    aspect = nd.repeat(nd.matmul(p.W_v, p.v_a), N, axis=1)
    M = nd.tanh(nd.concat([nd.matmul(p.W_h, H), aspect], axis=0))
    scores = nd.matmul(nd.transpose(p.w), M)
    alpha = nd.where(mask[None, :], nd.sigmoid(scores), 0.0)
    weighted = H * nd.repeat(alpha, k, axis=0)
    r = nd.sum_axis(nd.reshape(weighted, (k, T, B)), axis=1)
    h_star = nd.tanh(nd.matmul(p.W_p, r) + nd.matmul(p.W_x, h_last))
    return alpha, r, h_star


def _dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return nd.matmul(W, x) + nd.repeat(b, x.shape[1], axis=1)


# ---------------------------------------------------------------------------
# Full models
# ---------------------------------------------------------------------------


def _as_batch(samples, max_seq_len: int):
    """Accept a SequenceSample, a list of them, or a (features, valid_len) pair."""
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        feats, vlen = samples
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        return feats, np.atleast_1d(np.asarray(vlen, dtype=np.int64))
    if hasattr(samples, "features"):
        samples = [samples]
    feats = np.stack([s.features for s in samples])
    vlen = np.array([s.valid_len for s in samples], dtype=np.int64)
    return feats, vlen


def forward_batch(config: ModelConfig, params: ModelParams, features: np.ndarray, valid_len) -> Tensor:
    """Model output ``(2, B)`` for a ``(B, L, F)`` padded batch.

    Row 0 is the normalized next time gap, row 1 the normalized distance.
    """
    features = np.asarray(features, dtype=np.float64)
    valid_len = np.asarray(valid_len, dtype=np.int64)
    B = features.shape[0]
    if features.ndim != 3 or valid_len.shape != (B,):
        raise nd.ShapeError(f"bad batch: features {features.shape}, valid_len {valid_len.shape}")
    if features.shape[2] != config.input_feature_layout.n_features:
        raise ConfigError(
            f"samples carry {features.shape[2]} features, layout expects "
            f"{config.input_feature_layout.n_features}"
        )
    if valid_len.min() < 1:
        raise EmptySequenceError("every sequence needs at least one valid step")
    if valid_len.max() > min(features.shape[1], config.max_seq_len):
        raise CapacityError("valid_len exceeds the padding capacity")
    if len(params.branches) != (2 if config.parallel else 1) or (
        config.has_attention != (params.branches[0].attention is not None)
    ):
        raise ConfigError(f"parameters do not match variant {config.variant}")

    T = int(valid_len.max())
    valid = _valid_matrix(valid_len, T)
    x = features[:, :T, :]
    step_mask = valid.reshape(-1)

    parts_star, parts_last = [], []
    for cols, branch in zip(config.branch_columns(), params.branches):
        all_states, lasts = _run_stack(x[:, :, list(cols)], valid, branch.layers)
        parts_last.append(lasts[-1])
        if branch.attention is None:
            continue
        if config.attention_source == "all_layers":
            states, h_last = nd.concat(all_states, axis=0), nd.concat(lasts, axis=0)
        else:
            states, h_last = all_states[-1], lasts[-1]
        H = _embed_batch(states, valid)
        _, _, h_star = attention_forward(H, step_mask, branch.attention, h_last)
        parts_star.append(h_star)

    out = nd.concat(parts_star + parts_last, axis=0)
    n_fc = len(params.fc)
    for j, (W, b) in enumerate(params.fc):
        out = _dense(out, W, b)
        last = j == n_fc - 1
        if config.sigmoid_head:
            out = nd.sigmoid(out) if last else nd.relu(out)
    return out


def model_forward(config: ModelConfig, params: ModelParams, sample) -> Tensor:
    """Normalized ``(dt_next, d_next)`` for one sample or a list of samples.

    Returns a ``(2, B)`` tensor; for a single sample ``B == 1``.
    """
    feats, vlen = _as_batch(sample, config.max_seq_len)
    return forward_batch(config, params, feats, vlen)


def predict(config: ModelConfig, params: ModelParams, features, valid_len, batch_size: int = 1024) -> np.ndarray:
    """Untaped forward pass; returns ``(B, 2)`` normalized predictions."""
    features = np.asarray(features, dtype=np.float64)
    valid_len = np.asarray(valid_len, dtype=np.int64)
    out = []
    with nd.no_grad():
        for lo in range(0, features.shape[0], batch_size):
            y = forward_batch(config, params, features[lo : lo + batch_size], valid_len[lo : lo + batch_size])
            out.append(y.data.T)
    if not out:
        return np.zeros((0, 2))
    return np.concatenate(out, axis=0)


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    return replace(config, variant=variant)
