"""Damped Gauss-Newton (Levenberg-Marquardt) for small dense problems,
with optional box bounds handled by projection and an active set."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    cost: float                         # sum of squared residuals
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    jacobian: np.ndarray | None = None
    first_step: float = 0.0


def levenberg_marquardt(fun, x0, lower=None, upper=None, max_iter: int = 100,
                        gtol: float = 1e-12, xtol: float = 1e-12, ftol: float = 1e-14,
                        lam0: float = 1e-4) -> LMResult:
    """Minimize ||r(x)||^2 where ``fun(x) -> (r, J)``.

    Only iterates that lower the cost are accepted. Bounded coordinates are
    clamped after each step; coordinates pinned at a bound whose gradient
    points outward are frozen for that step.
    """
    x = np.array(x0, dtype=np.float64)
    n = len(x)
    lo = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, float), (n,))
    hi = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (n,))
    x = np.clip(x, lo, hi)
    r, J = fun(x)
    cost = float(r @ r)
    history = [cost]
    lam = lam0
    first_step = None
    converged = False
    it = 0
    while it < max_iter:
        g = J.T @ r
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        if not free.any() or np.max(np.abs(g[free])) <= gtol * max(1.0, cost):
            converged = True
            break
        Jf = J[:, free]
        A = Jf.T @ Jf
        d = np.diag(A).copy()
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        accepted = False
        while lam < 1e16:
            try:
                step_f = np.linalg.solve(A + lam * np.diag(d), -g[free])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            step = np.zeros(n)
            step[free] = step_f
            x_new = np.clip(x + step, lo, hi)
            r_new, J_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        it += 1
        if not accepted:
            converged = True        # no descent direction left at this precision
            break
        dx = np.linalg.norm(x_new - x)
        if first_step is None:
            first_step = dx
        rel = (cost - cost_new) / max(cost, 1e-300)
        x, r, J, cost = x_new, r_new, J_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if dx <= xtol * (np.linalg.norm(x) + xtol) or rel <= ftol:
            converged = True
            break
    return LMResult(x, cost, it, converged, history, J, 0.0 if first_step is None else first_step)
