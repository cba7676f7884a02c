"""Small dense convex QP solver (operator splitting with solution polishing).

Solves  min 1/2 x'diag(p)x + q'x  s.t.  lo <= A x <= hi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InfeasibleQP(ValueError):
    pass


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    y: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    complementarity: float
    polished: bool

    @property
    def kkt_residual(self) -> float:
        return max(self.primal_residual, self.dual_residual, self.complementarity)


def _objective(p, q, x) -> float:
    return float(0.5 * np.dot(p * x, x) + np.dot(q, x))


def kkt_residuals(p, q, A, lo, hi, x, y) -> tuple[float, float, float]:
    ax = A @ x
    primal = float(np.max(np.maximum(np.maximum(lo - ax, ax - hi), 0.0), initial=0.0))
    dual = float(np.max(np.abs(p * x + q + A.T @ y), initial=0.0))
    upper = np.where(y > 0, y * np.where(np.isfinite(hi), hi - ax, np.inf), 0.0)
    lower = np.where(y < 0, -y * np.where(np.isfinite(lo), ax - lo, np.inf), 0.0)
    comp = float(np.max(np.abs(np.concatenate([upper, lower])), initial=0.0))
    return primal, dual, comp


def _polish(p, q, A, lo, hi, z, y):
    """Solve the equality-constrained problem on the guessed active set."""
    low = (z - lo < -y) & np.isfinite(lo)
    up = (hi - z < y) & np.isfinite(hi)
    act = low | up
    rows = A[act]
    b = np.where(low, lo, hi)[act]
    n, m = A.shape[1], rows.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = np.diag(p)
    kkt[:n, n:] = rows.T
    kkt[n:, :n] = rows
    sol = np.linalg.lstsq(kkt, np.concatenate([-q, b]), rcond=None)[0]
    x = sol[:n]
    y_full = np.zeros_like(y)
    y_full[act] = sol[n:]
    return x, y_full


def solve_qp(p, q, A, lo, hi, *, rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6,
             tol: float = 1e-9, max_iter: int = 20000, labels=None) -> QPResult:
    """Operator-splitting solve followed by an active-set polish.

    ``p`` must be strictly positive.  Raises InfeasibleQP naming the row with
    the largest violation when no feasible point is reached.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("quadratic term must be positive definite")
    if np.any(lo > hi):
        j = int(np.argmax(lo - hi))
        raise InfeasibleQP(f"empty interval for constraint {labels[j] if labels else j}")
    m, n = A.shape
    eq = np.isclose(lo, hi, rtol=0.0, atol=1e-12)

    def factor(rho):
        r = np.where(eq, 1e3 * rho, rho)
        return r, np.linalg.inv(np.diag(p + sigma) + A.T @ (r[:, None] * A))

    r, kinv = factor(rho)
    x = np.zeros(n)
    z = np.clip(np.zeros(m), lo, hi)
    y = np.zeros(m)
    it = 0
    for it in range(1, max_iter + 1):
        xt = kinv @ (sigma * x - q + A.T @ (r * z - y))
        zt = A @ xt
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / r, lo, hi)
        y = y + r * (zr - z_new)
        z = z_new
        if it % 25 == 0:
            prim = np.max(np.abs(A @ x - z), initial=0.0)
            dual = np.max(np.abs(p * x + q + A.T @ y), initial=0.0)
            if prim <= tol and dual <= tol:
                break
            # rebalance the penalty when one residual dominates
            if it % 200 == 0 and prim > 0 and dual > 0:
                scale = np.sqrt((prim / max(np.max(np.abs(z)), 1e-12)) / (dual / max(np.max(np.abs(q)), 1e-12)))
                if scale > 5 or scale < 0.2:
                    rho = float(np.clip(rho * scale, 1e-6, 1e6))
                    r, kinv = factor(rho)

    best = (x, y, False)
    res = kkt_residuals(p, q, A, lo, hi, x, y)
    try:
        xp, yp = _polish(p, q, A, lo, hi, A @ x, y)
        res_p = kkt_residuals(p, q, A, lo, hi, xp, yp)
        if max(res_p) < max(res):
            best, res = (xp, yp, True), res_p
    except np.linalg.LinAlgError:
        pass
    x, y, polished = best
    if res[0] > 1e-6:
        viol = np.maximum(lo - A @ x, A @ x - hi)
        j = int(np.argmax(viol))
        raise InfeasibleQP(f"constraint {labels[j] if labels else j} violated by {viol[j]:.3g}")
    return QPResult(x, y, _objective(p, q, x), it, *res, polished)
