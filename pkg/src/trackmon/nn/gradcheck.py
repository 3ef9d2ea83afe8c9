"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from trackmon.nn.core import Param


@dataclass
class GradCheckReport:
    """Worst-coordinate comparison between analytic and numeric gradients."""

    max_rel_err: float
    worst_param: str
    worst_index: tuple
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def _relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-10:
        return 0.0
    return abs(analytic - numeric) / scale


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Iterable[tuple[str, Param]],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare each parameter's grad buffer against central differences.

    ``loss_fn`` must be a pure forward evaluation of the scalar loss at the
    current parameter values; the caller populates the analytic gradients
    (one zero-grads + forward + backward pass) before calling.  Every
    coordinate is probed unless ``max_coords_per_param`` caps it, in which
    case a seeded subset is drawn.  The reported error is
    |analytic - numeric| / max(|analytic|, |numeric|), with coordinates
    where both magnitudes fall below 1e-10 counting as exact.
    """
    named = list(params)
    worst = (0.0, "", ())
    n_checked = 0
    for name, p in named:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in idx:
            saved = flat[i]
            flat[i] = saved + h
            up = loss_fn()
            flat[i] = saved - h
            down = loss_fn()
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            err = _relative_error(float(gflat[i]), numeric)
            n_checked += 1
            if err > worst[0]:
                worst = (err, name, np.unravel_index(int(i), p.value.shape))
    return GradCheckReport(
        max_rel_err=worst[0],
        worst_param=worst[1],
        worst_index=tuple(int(j) for j in worst[2]),
        n_checked=n_checked,
    )
