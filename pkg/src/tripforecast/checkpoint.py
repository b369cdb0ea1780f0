"""Checkpoint JSON documents.

Layout::

    {
      "format_version": 1,
      "config": {...ModelConfig...},
      "params": {"branch0.lstm0.W_i": {"shape": [h, n], "values": [...]}, ...},
      "norm_stats": {"dt_min": ..., "dt_max": ..., "d_min": ..., "d_max": ...},
      "run_config": {...}            # optional, the resolved run settings
    }

Parameter names follow :func:`tripforecast.nn.param_shapes`; values are
row-major. Python's float repr round-trips float64 exactly, so a
save/load cycle is bitwise lossless.
"""

from __future__ import annotations

import json

import numpy as np

from .nn import ModelConfig, ModelParams, param_shapes, params_from_arrays

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def checkpoint_document(config: ModelConfig, params: ModelParams, run_config: dict | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "params": {
            name: {"shape": list(t.data.shape), "values": [float(v) for v in t.data.ravel()]}
            for name, t in params.named()
        },
        "norm_stats": params.norm_stats,
    }
    if run_config is not None:
        doc["run_config"] = run_config
    return doc


def save_checkpoint(path, config: ModelConfig, params: ModelParams, run_config: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_document(config, params, run_config), fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    """Return ``(config, params, document)``; ``params.norm_stats`` is restored."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"{path}: not valid JSON ({exc})") from exc
    return (*from_document(doc), doc)


def from_document(doc: dict) -> tuple[ModelConfig, ModelParams]:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format_version {version!r}, this build reads {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        stored = doc["params"]
    except (KeyError, TypeError) as exc:
        raise CheckpointIntegrityError(f"checkpoint is missing {exc}") from exc
    expected = param_shapes(config)
    names = [n for n, _ in expected]
    missing = [n for n in names if n not in stored]
    extra = [n for n in stored if n not in set(names)]
    if missing or extra:
        raise CheckpointIntegrityError(f"parameter names differ: missing {missing}, unexpected {extra}")
    arrays = {}
    for name, shape in expected:
        entry = stored[name]
        values = entry.get("values", [])
        if tuple(entry.get("shape", ())) != shape or len(values) != shape[0] * shape[1]:
            raise CheckpointIntegrityError(
                f"{name}: expected shape {shape} ({shape[0] * shape[1]} values), "
                f"found shape {entry.get('shape')} with {len(values)} values"
            )
        arrays[name] = np.asarray(values, dtype=np.float64).reshape(shape)
    params = params_from_arrays(config, arrays)
    params.norm_stats = doc.get("norm_stats")
    return config, params


def checkpoint_roundtrip(config: ModelConfig, params: ModelParams, path) -> ModelParams:
    save_checkpoint(path, config, params)
    return load_checkpoint(path)[1]
