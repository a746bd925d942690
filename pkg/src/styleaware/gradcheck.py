"""Central finite-difference verification of autograd gradients."""

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch


@dataclass
class GradSample:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    kink: bool = False

    def relative_error(self, floor: float) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), floor)
        return abs(self.analytic - self.numeric) / scale


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Sequence[Tuple[str, torch.Tensor]],
    n_coords: int = 100,
    step: float = 1e-5,
    seed: int = 0,
    nonzero_only: bool = False,
    kink_tol: float = 0.1,
) -> List[GradSample]:
    """Compare autograd against (f(p+h) - f(p-h)) / 2h on ``n_coords``
    coordinates drawn uniformly from all parameter entries, or only from
    entries whose analytic gradient is non-zero.

    ``loss_fn`` must be deterministic; run it in float64 for meaningful
    comparisons.

    A coordinate is flagged ``kink`` when the one-sided slopes on either
    side disagree by more than ``kink_tol`` relative to their size.  That
    happens where the loss is not differentiable, e.g. a ReLU input that
    sits exactly at zero because instance norm over a 1x1 map returns 0.
    There the central difference averages two slopes and autograd picks
    one, so the two cannot be compared.
    """
    params = [(n, p) for n, p in named_params if p.numel() > 0]
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    if nonzero_only:
        mask = np.concatenate([
            np.zeros(p.numel(), bool) if g is None else (g.detach().flatten() != 0).cpu().numpy()
            for (_, p), g in zip(params, grads)
        ])
        pool = np.flatnonzero(mask)
    else:
        pool = np.arange(int(sizes.sum()))
    flat = rng.choice(pool, size=min(n_coords, len(pool)), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    samples = []
    with torch.no_grad():
        f_zero = float(loss_fn())
        for k in np.sort(flat):
            which = int(np.searchsorted(offsets, k, side="right") - 1)
            name, p = params[which]
            local = int(k - offsets[which])
            idx = np.unravel_index(local, tuple(p.shape))
            g = grads[which]
            analytic = 0.0 if g is None else float(g[idx])
            orig = p[idx].item()
            p[idx] = orig + step
            f_plus = float(loss_fn())
            p[idx] = orig - step
            f_minus = float(loss_fn())
            p[idx] = orig
            right = (f_plus - f_zero) / step
            left = (f_zero - f_minus) / step
            kink = abs(right - left) > kink_tol * max(abs(right), abs(left), 1e-8)
            samples.append(GradSample(name, tuple(int(i) for i in idx), analytic,
                                      (f_plus - f_minus) / (2 * step), kink))
    return samples
