"""Receding-horizon stochastic MPC on SARX expectation dynamics.

The predicted mean trajectory is

    x_{k+j+1} = A'_j x_k + sum_{a<=j} B'_{j,a} nu_hat(a+1) u_{k+a} + F'_j

where ``nu_hat(a+1)`` is the forecast delivery probability of the packet sent
at ``k+a``. States are eliminated so the QP is posed in ``u_k..u_{k+N-1}``.
Every predicted state is weighted by ``Q`` except the last one, which takes
the terminal weight. The terminal weight is either a fixed matrix or, with
``terminal_weight="riccati"``, the infinite-horizon cost-to-go of the SARX
map at the target under the forecast delivery probability at the end of the
horizon.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from . import markov_learner as ml
from .fsmc_baseline import FsmcModel
from .plant_sarx import ComposedMatrices, SarxModel, sarx_predict_matrices
from .qp import QpProblem, QpSolution, solve_qp

log = logging.getLogger(__name__)

CONTROLLERS = ("learned", "fsmc", "deterministic", "lossless")


def _as_matrix(w, n):
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w) * np.eye(n)
    if w.ndim == 1:
        return np.diag(w)
    return w


@dataclass
class MpcConfig:
    horizon: int = 10
    state_weight: list = field(default_factory=lambda: [10.0, 1.0, 100.0, 1.0])
    input_weight: float | list = 0.1
    terminal_weight: list | str | None = "riccati"
    input_bounds: tuple = (-20.0, 20.0)
    state_lower: list | None = None
    state_upper: list | None = None
    terminal_lower: list | None = None
    terminal_upper: list | None = None
    target: list = field(default_factory=lambda: [5.0, 0.0, np.pi, 0.0])
    qp_tol: float = 1e-6

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        lo, hi = self.input_bounds
        if lo > hi:
            raise ValueError("empty input bounds")
        Q = self.Q()
        if np.linalg.eigvalsh(0.5 * (Q + Q.T))[0] < -1e-12:
            raise ValueError("state weight must be positive semidefinite")
        if np.linalg.eigvalsh(np.atleast_2d(self.R()))[0] <= 0:
            raise ValueError("input weight must be positive definite")
        if isinstance(self.terminal_weight, str) and self.terminal_weight != "riccati":
            raise ValueError(f"unknown terminal weight {self.terminal_weight!r}")

    def Q(self, n=None):
        n = len(self.target) if n is None else n
        return _as_matrix(self.state_weight, n)

    def QN(self, n=None):
        if isinstance(self.terminal_weight, str):
            raise ValueError(f"terminal weight {self.terminal_weight!r} depends on the plant model")
        return self.Q(n) if self.terminal_weight is None else _as_matrix(self.terminal_weight, len(self.target) if n is None else n)

    def R(self, n_u=1):
        return _as_matrix(self.input_weight, n_u)

    def to_dict(self):
        def plain(v):
            return np.asarray(v).tolist() if v is not None else None
        return {"horizon": self.horizon, "state_weight": plain(self.state_weight),
                "input_weight": plain(self.input_weight), "terminal_weight": plain(self.terminal_weight),
                "input_bounds": list(self.input_bounds), "state_lower": plain(self.state_lower),
                "state_upper": plain(self.state_upper), "terminal_lower": plain(self.terminal_lower),
                "terminal_upper": plain(self.terminal_upper), "target": plain(self.target),
                "qp_tol": self.qp_tol}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "input_bounds" in d:
            d["input_bounds"] = tuple(d["input_bounds"])
        return cls(**d)


def loss_aware_riccati(A, B, Q, R, delivery: float, tol: float = 1e-12, max_iter: int = 100):
    """Cost-to-go matrix for LQ control whose input arrives with probability ``delivery``.

    Solves ``P = Q + A'PA - d A'PB (R + B'PB)^-1 B'PA`` by Newton (Kleinman)
    iterations started from the lossless Riccati solution; ``d = 1`` gives the
    standard discrete algebraic Riccati equation.
    """
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    P = solve_discrete_are(A, B, Q, R)
    d = float(delivery)
    if d >= 1.0:
        return P
    if not 0.0 < d:
        raise ValueError("delivery probability must be positive")
    n = len(A)
    I = np.eye(n * n)
    AA = np.kron(A.T, A.T)
    for _ in range(max_iter):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        Ac = A - B @ K
        M = I - d * np.kron(Ac.T, Ac.T) - (1.0 - d) * AA
        Pn = np.linalg.solve(M, (Q + d * K.T @ R @ K).reshape(-1)).reshape(n, n)
        Pn = 0.5 * (Pn + Pn.T)
        done = np.max(np.abs(Pn - P)) <= tol * np.max(np.abs(Pn))
        P = Pn
        if done:
            break
    if np.linalg.eigvalsh(P)[0] < -1e-9 * np.max(np.abs(P)):
        raise np.linalg.LinAlgError("loss-aware Riccati iteration lost definiteness")
    return P


@dataclass
class Condensed:
    """Stacked mean-trajectory maps for one mode sequence: ``X = S x + Fs + G0 diag(nu) U``."""

    S: np.ndarray     # (N*nx, nx)
    Fs: np.ndarray    # (N*nx,)
    G0: np.ndarray    # (N*nx, N*nu), unscaled by the delivery forecasts
    nx: int
    nu: int

    @classmethod
    def from_composed(cls, cm: ComposedMatrices, N: int) -> "Condensed":
        if cm.horizon < N:
            raise ValueError(f"composed matrices cover {cm.horizon} steps, horizon is {N}")
        nx, nu = cm.Ap.shape[1], cm.Bp.shape[3]
        G0 = cm.Bp[:N, :N].transpose(0, 2, 1, 3).reshape(N * nx, N * nu)
        return cls(cm.Ap[:N].reshape(N * nx, nx), cm.Fp[:N].reshape(-1), G0, nx, nu)


def _weights(config: MpcConfig, nx: int, nu: int, terminal):
    N = config.horizon
    if terminal is None:
        if isinstance(config.terminal_weight, str):
            raise ValueError(f"terminal weight {config.terminal_weight!r} must be supplied explicitly")
        terminal = config.QN(nx)
    W = np.kron(np.eye(N), config.Q(nx))
    W[(N - 1) * nx:, (N - 1) * nx:] = terminal
    return W, np.kron(np.eye(N), config.R(nu))


def assemble_qp(x_now, cond: Condensed, nu_hat, config: MpcConfig, W, Rb, x_target=None) -> QpProblem:
    N, nx, nu = config.horizon, cond.nx, cond.nu
    nu_hat = np.asarray(nu_hat, dtype=float).reshape(-1)
    if len(nu_hat) < N:
        raise ValueError(f"need {N} delivery forecasts, got {len(nu_hat)}")
    nu_hat = nu_hat[:N]
    if np.any(nu_hat < 0) or np.any(nu_hat > 1):
        raise ValueError("delivery forecasts must lie in [0, 1]")
    x_now = np.asarray(x_now, dtype=float)
    if x_now.shape != (nx,):
        raise ValueError(f"state has shape {x_now.shape}, expected ({nx},)")
    target = np.asarray(config.target if x_target is None else x_target, dtype=float)
    target = np.broadcast_to(target, (N, nx)) if target.ndim == 1 else target[:N]

    free = cond.S @ x_now + cond.Fs
    G = cond.G0 * np.repeat(nu_hat, nu)[None, :]
    e0 = free - target.reshape(-1)
    GW = G.T @ W
    H = 2.0 * (GW @ G + Rb)
    f = 2.0 * (GW @ e0)
    const = float(e0 @ W @ e0)

    lo, hi = config.input_bounds
    A_rows, b_rows = [], []
    free = free.reshape(N, nx)
    for lower, upper, steps in ((config.state_lower, config.state_upper, range(N)),
                                (config.terminal_lower, config.terminal_upper, [N - 1])):
        for j in steps:
            Gj, fj = G[j * nx:(j + 1) * nx], free[j]
            if upper is not None:
                up = np.asarray(upper, dtype=float)
                m = np.isfinite(up)
                A_rows.append(Gj[m])
                b_rows.append(up[m] - fj[m])
            if lower is not None:
                low = np.asarray(lower, dtype=float)
                m = np.isfinite(low)
                A_rows.append(-Gj[m])
                b_rows.append(fj[m] - low[m])
    A_ineq = np.vstack(A_rows) if A_rows else None
    b_ineq = np.concatenate(b_rows) if b_rows else None
    return QpProblem(H, f, np.full(N * nu, lo), np.full(N * nu, hi), A_ineq, b_ineq, const=const)


def build_qp(x_now, cm: ComposedMatrices, nu_hat, config: MpcConfig, x_target=None,
             terminal_weight=None) -> QpProblem:
    """Condensed QP in the stacked inputs ``U = (u_k, ..., u_{k+N-1})``.

    ``terminal_weight`` overrides the configured terminal weight; it is
    required when the configuration asks for a model-derived one.
    """
    cond = Condensed.from_composed(cm, config.horizon)
    W, Rb = _weights(config, cond.nx, cond.nu, terminal_weight)
    return assemble_qp(x_now, cond, nu_hat, config, W, Rb, x_target)


# channel forecasts --------------------------------------------------------

class AlwaysDelivered:
    """Delivery forecast fixed at one (deterministic MPC)."""

    name = "deterministic"

    def forecast(self, gamma_prev_db, x_now, horizon):
        return np.ones(horizon)


class LearnedForecast:
    name = "learned"

    def __init__(self, model: ml.LearnedChannelModel):
        self.model = model

    def forecast(self, gamma_prev_db, x_now, horizon):
        return ml.predict_pdp(self.model, gamma_prev_db, x_now, horizon)


class FsmcForecast:
    name = "fsmc"

    def __init__(self, model: FsmcModel):
        self.model = model
        self._tables = {}

    def forecast(self, gamma_prev_db, x_now, horizon):
        tab = self._tables.get(horizon)
        if tab is None:
            tab = np.array([ml.pdp_forecast(self.model.tpm, self.model.pdp, s, horizon)
                            for s in range(self.model.n_states)])
            self._tables[horizon] = np.clip(tab, 0.0, 1.0)
            tab = self._tables[horizon]
        return tab[self.model.state_of(gamma_prev_db)].copy()


@dataclass
class StepInfo:
    u: np.ndarray
    nu_hat: np.ndarray
    status: str
    iterations: int
    fallback: bool = False


class StochasticMpc:
    """One receding-horizon controller instance (strictly sequential).

    Condensed prediction maps are cached per mode sequence and terminal
    weights per end-of-horizon delivery forecast.
    """

    def __init__(self, sarx: SarxModel, config: MpcConfig, forecaster):
        if sarx.horizon < config.horizon:
            raise ValueError("SARX model horizon shorter than the MPC horizon")
        self.sarx = sarx
        self.config = config
        self.forecaster = forecaster
        self.n_fallbacks = 0
        self._cond = {}
        self._weights = {}
        self._lin = None

    def linearization(self):
        """First-step affine map of the SARX model in the target's mode."""
        if self._lin is None:
            target = np.asarray(self.config.target, dtype=float)
            A, B, _ = self.sarx.step_matrices(self.sarx.modes(target))[0]
            self._lin = (A, B)
        return self._lin

    def weights(self, end_delivery: float):
        key = end_delivery if self.config.terminal_weight == "riccati" else None
        w = self._weights.get(key)
        if w is None:
            nx, nu = self.sarx.n_x, self.sarx.n_u
            terminal = None
            if key is not None:
                A, B = self.linearization()
                terminal = loss_aware_riccati(A, B, self.config.Q(nx), self.config.R(nu),
                                              max(end_delivery, 1e-3))
            w = _weights(self.config, nx, nu, terminal)
            self._weights[key] = w
        return w

    def condensed(self, x_now) -> Condensed:
        modes = self.sarx.modes(x_now)
        cond = self._cond.get(modes)
        if cond is None:
            cm = sarx_predict_matrices(self.sarx, x_now, self.config.horizon)
            cond = Condensed.from_composed(cm, self.config.horizon)
            self._cond[modes] = cond
        return cond

    def build(self, x_now, nu_hat) -> QpProblem:
        nu_hat = np.asarray(nu_hat, dtype=float)
        W, Rb = self.weights(float(nu_hat[self.config.horizon - 1]))
        return assemble_qp(x_now, self.condensed(x_now), nu_hat, self.config, W, Rb)

    def control_step(self, x_now, gamma_prev_db: float) -> "StepInfo":
        N = self.config.horizon
        nu_hat = self.forecaster.forecast(gamma_prev_db, x_now, N)
        return self.solve(x_now, nu_hat)

    def solve(self, x_now, nu_hat) -> "StepInfo":
        prob = self.build(x_now, nu_hat)
        sol: QpSolution = solve_qp(prob, self.config.qp_tol)
        n_u = self.sarx.n_u
        if sol.status in ("optimal", "inaccurate"):
            return StepInfo(sol.u[:n_u].copy(), np.asarray(nu_hat), sol.status, sol.iterations)
        self.n_fallbacks += 1
        log.warning("QP %s (constraint %s); applying zero input", sol.status, sol.violated)
        return StepInfo(np.zeros(n_u), np.asarray(nu_hat), sol.status, sol.iterations, True)


def make_forecaster(kind: str, learned=None, fsmc=None):
    if kind == "learned":
        if learned is None:
            raise ValueError("learned controller needs a learned channel model")
        return LearnedForecast(learned)
    if kind == "fsmc":
        if fsmc is None:
            raise ValueError("fsmc controller needs an FSMC model")
        return FsmcForecast(fsmc)
    if kind in ("deterministic", "lossless"):
        return AlwaysDelivered()
    raise ValueError(f"unknown controller {kind!r}; expected one of {CONTROLLERS}")


def stage_cost(x, u, config: MpcConfig) -> float:
    e = np.asarray(x, dtype=float) - np.asarray(config.target, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(e @ config.Q(len(e)) @ e + u @ config.R(len(u)) @ u)
