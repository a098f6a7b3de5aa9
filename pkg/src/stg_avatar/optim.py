"""Adam over named numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0   # tensors dropped for non-finite gradients


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update. ``lr`` is a float or a per-name dict."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        rate = lr.get(name, 0.0) if isinstance(lr, dict) else lr
        if g is None or rate == 0.0:
            continue
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            continue
        m = state.m.get(name)
        if m is None or m.shape != p.shape:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + eps)


def remap_state(state: AdamState, keep: np.ndarray, n_new: int, names) -> None:
    """Follow a structural edit: keep rows ``keep`` then append ``n_new`` zero rows."""
    for name in names:
        for store in (state.m, state.v):
            if name in store:
                arr = store[name][keep]
                pad = np.zeros((n_new,) + arr.shape[1:])
                store[name] = np.concatenate([arr, pad])
