"""Dense convex quadratic programming.

``min 0.5 u'Hu + f'u  s.t.  lb <= u <= ub,  A u <= b,  E u = e``

Bound-only problems are solved by a primal active-set method. Problems with
general constraints are solved through their dual, a bound-constrained QP in
the multipliers, with the same active-set routine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    const: float = 0.0

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError("H must be square")
        self.H = 0.5 * (H + H.T)
        self.f = np.asarray(self.f, dtype=float).reshape(n)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.broadcast_to(np.asarray(self.lb, float), (n,)).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, float), (n,)).copy()
        for name in ("A_ineq", "A_eq"):
            M = getattr(self, name)
            if M is not None:
                M = np.atleast_2d(np.asarray(M, dtype=float))
                if M.shape[1] != n:
                    raise ValueError(f"{name} has {M.shape[1]} columns, expected {n}")
                setattr(self, name, M)
        if self.A_ineq is not None:
            self.b_ineq = np.asarray(self.b_ineq, dtype=float).reshape(len(self.A_ineq))
        if self.A_eq is not None:
            self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(len(self.A_eq))

    @property
    def n(self) -> int:
        return len(self.f)

    def objective(self, u) -> float:
        return float(0.5 * u @ self.H @ u + self.f @ u + self.const)

    def has_general_constraints(self) -> bool:
        return (self.A_ineq is not None and len(self.A_ineq)) or (self.A_eq is not None and len(self.A_eq))


@dataclass
class QpSolution:
    u: np.ndarray
    objective: float
    status: str
    iterations: int
    residuals: dict = field(default_factory=dict)
    violated: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def check_psd(H, tol=1e-10):
    w = np.linalg.eigvalsh(H)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -tol * scale:
        raise ValueError(f"H is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    return w


def _bounded_active_set(H, f, lb, ub, x0=None, max_iter=None, tol=1e-12):
    """Primal active set for ``min 0.5 x'Hx + f'x`` over a box.

    Returns ``(x, iterations, status)``; status is ``"optimal"``,
    ``"unbounded"`` or ``"max_iter"``.
    """
    n = len(f)
    max_iter = 20 * n + 50 if max_iter is None else max_iter
    if x0 is None:
        x0 = np.zeros(n)
    x = np.clip(x0, lb, ub)
    x = np.where(np.isfinite(x), x, 0.0)
    fixed = np.zeros(n, dtype=bool)       # working set
    at_upper = np.zeros(n, dtype=bool)
    scale = 1.0 + np.max(np.abs(H)) + np.max(np.abs(f), initial=0.0)
    for it in range(1, max_iter + 1):
        free = ~fixed
        g = H @ x + f
        p = np.zeros(n)
        unbounded_dir = False
        if np.any(free):
            Hff = H[np.ix_(free, free)]
            gf = g[free]
            try:
                L = np.linalg.cholesky(Hff)
                pf = -np.linalg.solve(L.T, np.linalg.solve(L, gf))
            except np.linalg.LinAlgError:
                pf, *_ = np.linalg.lstsq(Hff, -gf, rcond=None)
                if np.linalg.norm(Hff @ pf + gf) > 1e-9 * scale:
                    # gradient has a component in the null space: descent ray
                    w, V = np.linalg.eigh(Hff)
                    null = V[:, np.abs(w) <= 1e-10 * max(1.0, np.abs(w).max())]
                    pf = -null @ (null.T @ gf)
                    pf *= 1e6 / max(np.linalg.norm(pf), 1e-300)
                    unbounded_dir = True
            p[free] = pf
        if np.max(np.abs(p)) <= tol * (1.0 + np.max(np.abs(x))):
            # stationary on the working set: check multiplier signs
            mu = np.where(at_upper, -g, g)
            mu[~fixed] = np.inf
            i = int(np.argmin(mu))
            if not fixed.any() or mu[i] >= -1e-12 * scale:
                return x, it, "optimal"
            fixed[i] = False
            at_upper[i] = False
            continue
        # largest feasible step along p
        alpha, block, block_up = 1.0, -1, False
        with np.errstate(divide="ignore", invalid="ignore"):
            for i in np.flatnonzero(free & (p != 0)):
                if p[i] < 0 and np.isfinite(lb[i]):
                    a = (lb[i] - x[i]) / p[i]
                    if a < alpha:
                        alpha, block, block_up = a, i, False
                elif p[i] > 0 and np.isfinite(ub[i]):
                    a = (ub[i] - x[i]) / p[i]
                    if a < alpha:
                        alpha, block, block_up = a, i, True
        if unbounded_dir and block < 0:
            return x, it, "unbounded"
        alpha = max(alpha, 0.0)
        x = x + alpha * p
        if block >= 0:
            x[block] = ub[block] if block_up else lb[block]
            fixed[block] = True
            at_upper[block] = block_up
    return x, max_iter, "max_iter"


def kkt_residuals(prob: QpProblem, u, lam_ineq=None, lam_eq=None) -> dict:
    """Stationarity, primal feasibility and complementarity residuals (infinity norms)."""
    g = prob.H @ u + prob.f
    if lam_ineq is not None and prob.A_ineq is not None:
        g = g + prob.A_ineq.T @ lam_ineq
    if lam_eq is not None and prob.A_eq is not None:
        g = g + prob.A_eq.T @ lam_eq
    # bound multipliers from the remaining gradient
    mu_lo = np.where(np.isclose(u, prob.lb, rtol=0, atol=1e-9), np.maximum(g, 0.0), 0.0)
    mu_up = np.where(np.isclose(u, prob.ub, rtol=0, atol=1e-9), np.maximum(-g, 0.0), 0.0)
    stat = g - mu_lo + mu_up
    feas = [np.maximum(prob.lb - u, 0.0), np.maximum(u - prob.ub, 0.0)]
    comp = 0.0
    if prob.A_ineq is not None:
        slack = prob.A_ineq @ u - prob.b_ineq
        feas.append(np.maximum(slack, 0.0))
        if lam_ineq is not None:
            comp = float(np.max(np.abs(lam_ineq * slack), initial=0.0))
    if prob.A_eq is not None:
        feas.append(np.abs(prob.A_eq @ u - prob.b_eq))
    return {"stationarity": float(np.max(np.abs(stat), initial=0.0)),
            "primal": float(max(np.max(v, initial=0.0) for v in feas)),
            "complementarity": comp}


def solve_qp(prob: QpProblem, tol: float = 1e-6, x0=None) -> QpSolution:
    """Solve a convex QP; residuals are judged against ``tol`` scaled by problem norms."""
    check_psd(prob.H)
    if np.any(prob.lb > prob.ub):
        i = int(np.argmax(prob.lb - prob.ub))
        return QpSolution(np.clip(np.zeros(prob.n), prob.lb, prob.ub), np.nan, "infeasible", 0, {}, i)
    scale = 1.0 + max(np.max(np.abs(prob.H)), np.max(np.abs(prob.f), initial=0.0))
    if not prob.has_general_constraints():
        u, it, status = _bounded_active_set(prob.H, prob.f, prob.lb, prob.ub, x0)
        res = kkt_residuals(prob, u)
        if status == "optimal" and max(res.values()) > tol * scale:
            status = "inaccurate"
        return QpSolution(u, prob.objective(u), status, it, res)
    return _solve_dual(prob, tol, scale)


def _solve_dual(prob: QpProblem, tol, scale) -> QpSolution:
    """Dual active set: bounds become rows, multipliers are sign constrained."""
    n = prob.n
    rows, rhs = [], []
    if prob.A_ineq is not None:
        rows.append(prob.A_ineq)
        rhs.append(prob.b_ineq)
    fin_lo = np.flatnonzero(np.isfinite(prob.lb))
    fin_up = np.flatnonzero(np.isfinite(prob.ub))
    if len(fin_lo):
        rows.append(-np.eye(n)[fin_lo])
        rhs.append(-prob.lb[fin_lo])
    if len(fin_up):
        rows.append(np.eye(n)[fin_up])
        rhs.append(prob.ub[fin_up])
    m_in = sum(len(r) for r in rows)
    if prob.A_eq is not None:
        rows.append(prob.A_eq)
        rhs.append(prob.b_eq)
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    try:
        L = np.linalg.cholesky(prob.H)
    except np.linalg.LinAlgError:
        raise ValueError("general constraints require a positive definite H")
    Hinv_G = np.linalg.solve(L.T, np.linalg.solve(L, G.T))
    Hinv_f = np.linalg.solve(L.T, np.linalg.solve(L, prob.f))
    Q = G @ Hinv_G
    c = h + G @ Hinv_f
    m = len(h)
    lo = np.zeros(m)
    lo[m_in:] = -np.inf
    lam, it, status = _bounded_active_set(Q, c, lo, np.full(m, np.inf))
    u = -(Hinv_f + Hinv_G @ lam)
    lam_in = lam[:m_in]
    viol = G[:m_in] @ u - h[:m_in]
    if prob.A_eq is not None:
        eq_viol = np.abs(G[m_in:] @ u - h[m_in:])
        viol = np.concatenate([viol, eq_viol])
    worst = int(np.argmax(viol)) if len(viol) else None
    # residuals in terms of the original rows
    full_prob = QpProblem(prob.H, prob.f, A_ineq=G[:m_in], b_ineq=h[:m_in],
                          A_eq=G[m_in:] if m > m_in else None, b_eq=h[m_in:] if m > m_in else None)
    res = kkt_residuals(full_prob, u, lam_in, lam[m_in:] if m > m_in else None)
    if status == "unbounded" or (len(viol) and viol.max() > max(tol * scale, 1e-6) * 1e3):
        return QpSolution(u, np.nan, "infeasible", it, res, worst)
    if status == "optimal" and max(res.values()) > tol * scale:
        status = "inaccurate"
    return QpSolution(u, prob.objective(u), status, it, res)


def projected_gradient(H, f, lb, ub, iters=1_000_000, x0=None, stop=1e-15):
    """Reference solver: fixed-step projected gradient (slow but simple)."""
    L = float(np.linalg.eigvalsh(H)[-1])
    x = np.clip(np.zeros(len(f)) if x0 is None else x0, lb, ub)
    for _ in range(iters):
        xn = np.clip(x - (H @ x + f) / L, lb, ub)
        if np.max(np.abs(xn - x)) <= stop:
            return xn
        x = xn
    return x
