"""Embedding model plugins.

A plugin is a callable ``(batch: uint8 ndarray[B, S, S, 3]) -> float ndarray[B, d]``
with an optional ``input_size`` attribute (pixels per side the crops are
resized to; default 84). Builtins are simple stubs for wiring and testing;
real vision models plug in by dotted path, e.g. ``--model mypkg.embed:encode``.
"""

from __future__ import annotations

import importlib
from typing import Callable, Protocol

import numpy as np

from .errors import PluginLoadError

DEFAULT_INPUT_SIZE = 84


class ModelPlugin(Protocol):
    def __call__(self, batch: np.ndarray) -> np.ndarray: ...


def constant_model(batch: np.ndarray) -> np.ndarray:
    """Same fixed 4-d vector for every crop; wiring smoke-test stub."""
    return np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (batch.shape[0], 1))


def mean_rgb_model(batch: np.ndarray) -> np.ndarray:
    """Per-channel pixel mean; 3-d, hand-computable on solid-color images."""
    return batch.astype(np.float64).mean(axis=(1, 2)) / 255.0


def grid_mean_model(batch: np.ndarray) -> np.ndarray:
    """Per-channel means over a 4x4 spatial grid; 48-d coarse layout signature."""
    b, h, w, _ = batch.shape
    hs, ws = h // 4, w // 4
    cells = []
    for gy in range(4):
        for gx in range(4):
            cell = batch[:, gy * hs : (gy + 1) * hs, gx * ws : (gx + 1) * ws, :]
            cells.append(cell.astype(np.float64).mean(axis=(1, 2)) / 255.0)
    return np.concatenate(cells, axis=1)


BUILTIN_MODELS: dict[str, Callable] = {
    "constant": constant_model,
    "mean-rgb": mean_rgb_model,
    "grid-mean": grid_mean_model,
}


def resolve_model(name: str) -> ModelPlugin:
    """Builtin name or ``module.path:callable`` dotted reference."""
    if name in BUILTIN_MODELS:
        return BUILTIN_MODELS[name]
    if ":" in name:
        module_name, _, attr = name.partition(":")
        try:
            module = importlib.import_module(module_name)
            plugin = getattr(module, attr)
        except (ImportError, AttributeError) as exc:
            raise PluginLoadError(f"cannot load plugin {name!r}: {exc}") from exc
        if not callable(plugin):
            raise PluginLoadError(f"plugin {name!r} is not callable")
        return plugin
    raise PluginLoadError(
        f"unknown model {name!r}; builtins: {sorted(BUILTIN_MODELS)} or module:callable"
    )


def model_input_size(plugin: ModelPlugin) -> int:
    return int(getattr(plugin, "input_size", DEFAULT_INPUT_SIZE))
