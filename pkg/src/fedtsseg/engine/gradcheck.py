"""Central finite-difference verification for every differentiable primitive."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, record


class GradCheckError(RuntimeError):
    """The finite-difference estimate itself is unusable (non-finite)."""


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - fd| / max(1, |analytic|). When
    ``max_coords`` is given and x has more coordinates, a seeded subset is
    checked (used for whole-model sweeps where x is one weight tensor among
    many). Returns the max over checked coordinates.
    """
    probe = x.copy(requires_grad=True)
    with record() as tape:
        y = f(probe)
        if y.size != 1:
            raise ValueError(f"grad_check target must be scalar, got shape {y.shape}")
        (analytic,) = backward(y, [probe], tape)

    flat = probe.data.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        idx = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        idx = np.arange(n)

    an_flat = analytic.reshape(-1)
    worst = 0.0
    for i in idx:
        i = int(i)
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - eps
        lo = f(Tensor(bumped.reshape(x.shape))).item()
        fd = (hi - lo) / (2.0 * eps)
        if not np.isfinite(fd):
            raise GradCheckError(f"non-finite finite-difference estimate at coordinate {i}: {fd}")
        err = abs(an_flat[i] - fd) / max(1.0, abs(an_flat[i]))
        if err > worst:
            worst = err
    return float(worst)
