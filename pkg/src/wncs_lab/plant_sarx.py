"""Inverted pendulum on a cart and its switching ARX (SARX) identification.

The plant is integrated with forward Euler at the control period. The SARX
model predicts ``x(k+j+1) = A x(k+j) + B u(k+j) + F`` for each horizon step j,
with the affine map picked by regression trees evaluated on the measured
regressor ``x(k)`` only, so the mode sequence never depends on future inputs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import cart
from . import channel_physics as phys

log = logging.getLogger(__name__)

RIDGE = 1e-8


@dataclass(frozen=True)
class PendulumParams:
    cart_mass_kg: float = 0.5
    pendulum_mass_kg: float = 0.2
    arm_length_m: float = 0.3
    friction: float = 0.1
    gravity: float = 9.81
    sample_period_s: float = 0.001

    def __post_init__(self):
        for k, v in asdict(self).items():
            ok = v >= 0 if k == "friction" else v > 0
            if not (ok and math.isfinite(v)):
                raise ValueError(f"{k} must be {'non-negative' if k == 'friction' else 'positive'} and finite")


def _sin_cos(angle: float):
    """sin and cos reduced about the nearest multiple of pi.

    The float nearest to k*pi then gives sin exactly zero, so both
    equilibria (0 and pi) are exact fixed points of the Euler map.
    """
    n = round(angle / math.pi)
    r = angle - n * math.pi
    sign = -1.0 if n % 2 else 1.0
    return sign * math.sin(r), sign * math.cos(r)


def pendulum_derivative(y, u: float, p: PendulumParams = PendulumParams()) -> np.ndarray:
    y1, y2, y3, y4 = (float(v) for v in y)
    if not all(math.isfinite(v) for v in (y1, y2, y3, y4, u)):
        raise ValueError("non-finite plant state or input")
    m, M, L, d, g = p.pendulum_mass_kg, p.cart_mass_kg, p.arm_length_m, p.friction, p.gravity
    s, c = _sin_cos(y3)
    D =m * L * L * (M + m * (1.0 - c * c))
    force = u - d * y2
    f2 = (m * L * L / D) * (-m * g * c * s + m * L * y4 * y4 * s) + (m * L * L / D) * force
    f4 = (m * L / D) * ((m + M) * g * s - c * m * L * y4 * y4 * s) - (m * L * c / D) * force
    return np.array([y2, f2, y4, f4])


def step(y, u_applied: float, p: PendulumParams = PendulumParams()) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y + pendulum_derivative(y, u_applied, p) * p.sample_period_s


def apply_packet(u_commanded: float, gamma_linear: float, frame_bits: int, rng: np.random.Generator,
                 mode: str = "packet"):
    """Bernoulli delivery of one control packet; returns ``(u_applied, delivered)``.

    ``mode`` is ``"packet"`` (success probability ``1 - R_p``) or ``"bit"``
    (success probability ``1 - R_b``, the literal case-study variant).
    """
    if gamma_linear < 0:
        raise phys.ChannelDomainError("SINR must be non-negative")
    p_loss = phys.error_rate(gamma_linear, frame_bits, mode)
    delivered = bool(rng.random() >= p_loss)
    return (u_commanded if delivered else 0.0), delivered


# --- regressors ------------------------------------------------------------

def regressor_dim(n_y: int, n_u: int, delta_y: int, delta_u: int) -> int:
    return (delta_y + 1) * n_y + n_u * delta_u


def build_regressors(Y, U, delta_y: int = 0, delta_u: int = 0):
    """Stack ``x(k) = [y(k), ..., y(k-dy), u(k-1), ..., u(k-du)]``.

    Returns ``(X, first)`` where row ``i`` of ``X`` is ``x(first + i)``.
    """
    Y = np.asarray(Y, dtype=float)
    U = np.asarray(U, dtype=float).reshape(len(Y), -1)
    first = max(delta_y, delta_u)
    cols = [Y[first - i: len(Y) - i] for i in range(delta_y + 1)]
    cols += [U[first - i: len(U) - i] for i in range(1, delta_u + 1)]
    return np.hstack(cols), first


@dataclass
class LeafAffine:
    a: np.ndarray   # row of A
    b: np.ndarray   # row of B
    f: float


@dataclass
class SarxModel:
    """Per-horizon-step, per-output trees with leaf-wise affine rows."""

    n_y: int
    n_u: int
    delta_y: int
    delta_u: int
    horizon: int
    trees: list                  # trees[j][c]
    leaf_maps: list              # leaf_maps[j][c][leaf] -> LeafAffine
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_x(self) -> int:
        return regressor_dim(self.n_y, self.n_u, self.delta_y, self.delta_u)

    def modes(self, x_now) -> tuple:
        x = np.asarray(x_now, dtype=float)
        return tuple(tuple(t.leaf_index(x) for t in row) for row in self.trees)

    def step_matrices(self, modes):
        """Per-step ``(A_j, B_j, F_j)`` for a mode sequence."""
        nx, ny, nu = self.n_x, self.n_y, self.n_u
        out = []
        for j in range(self.horizon):
            A = np.zeros((nx, nx))
            B = np.zeros((nx, nu))
            F = np.zeros(nx)
            for c in range(ny):
                lm = self.leaf_maps[j][c][modes[j][c]]
                A[c], B[c], F[c] = lm.a, lm.b, lm.f
            # shift rows: older outputs and inputs move down the regressor
            for i in range(1, self.delta_y + 1):
                A[i * ny:(i + 1) * ny, (i - 1) * ny:i * ny] = np.eye(ny)
            base = (self.delta_y + 1) * ny
            if self.delta_u:
                B[base:base + nu] = np.eye(nu)
                for i in range(1, self.delta_u):
                    A[base + i * nu: base + (i + 1) * nu, base + (i - 1) * nu: base + i * nu] = np.eye(nu)
            out.append((A, B, F))
        return out

    def to_dict(self):
        return {
            "n_y": self.n_y, "n_u": self.n_u, "delta_y": self.delta_y, "delta_u": self.delta_u,
            "horizon": self.horizon,
            "trees": [[t.to_dict(include_samples=False) for t in row] for row in self.trees],
            "leaf_maps": [[[{"a": lm.a.tolist(), "b": lm.b.tolist(), "f": lm.f} for lm in leaves]
                           for leaves in row] for row in self.leaf_maps],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_y"], d["n_u"], d["delta_y"], d["delta_u"], d["horizon"],
                   [[cart.RegressionTree.from_dict(t) for t in row] for row in d["trees"]],
                   [[[LeafAffine(np.array(lm["a"]), np.array(lm["b"]), float(lm["f"])) for lm in leaves]
                     for leaves in row] for row in d["leaf_maps"]])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _lstsq_row(Z, t):
    """Least-squares affine row; ridge fallback when Z is rank deficient."""
    rank = np.linalg.matrix_rank(Z)
    if rank < Z.shape[1]:
        log.warning("rank-deficient SARX leaf regression (rank %d < %d); using ridge %g",
                    rank, Z.shape[1], RIDGE)
        G = Z.T @ Z + RIDGE * np.eye(Z.shape[1])
        return np.linalg.solve(G, Z.T @ t)
    return np.linalg.lstsq(Z, t, rcond=None)[0]


def sarx_identify(corpus, delta_y: int = 0, delta_u: int = 0, horizon: int = 10,
                  tree_config: cart.FitConfig = cart.FitConfig(4, 200, 0.0),
                  max_samples: int | None = None, seed: int = 0) -> SarxModel:
    """Identify a SARX model from loss-free ``(Y, U)`` trajectories.

    ``corpus`` is an iterable of ``(Y, U)`` with ``Y`` of shape ``(K, n_y)``
    and ``U`` of shape ``(K,)`` or ``(K, n_u)``. ``max_samples`` optionally
    subsamples the regression data per horizon step (deterministically).
    """
    corpus = [(np.asarray(Y, dtype=float), np.asarray(U, dtype=float).reshape(len(Y), -1)) for Y, U in corpus]
    n_y = corpus[0][0].shape[1]
    n_u = corpus[0][1].shape[1]
    rng = np.random.default_rng(seed)
    trees, maps = [], []
    for j in range(horizon):
        Xk, Xkj, Ukj, Ynext = [], [], [], []
        for Y, U in corpus:
            X, first = build_regressors(Y, U, delta_y, delta_u)
            # rows k with k + j + 1 inside the trajectory
            K = len(X) - j - 1
            if K <= 0:
                continue
            Xk.append(X[:K])
            Xkj.append(X[j:j + K])
            Ukj.append(U[first + j: first + j + K])
            Ynext.append(Y[first + j + 1: first + j + 1 + K])
        Xk, Xkj, Ukj, Ynext = map(np.vstack, (Xk, Xkj, Ukj, Ynext))
        if max_samples is not None and len(Xk) > max_samples:
            sel = np.sort(rng.choice(len(Xk), max_samples, replace=False))
            Xk, Xkj, Ukj, Ynext = Xk[sel], Xkj[sel], Ukj[sel], Ynext[sel]
        Z = np.hstack([Xkj, Ukj, np.ones((len(Xkj), 1))])
        row_trees, row_maps = [], []
        nx = Xk.shape[1]
        for c in range(n_y):
            t = cart.fit(Xk, Ynext[:, c], tree_config)
            leaves = []
            for lf in t.leaves():
                theta = _lstsq_row(Z[lf.sample_indices], Ynext[lf.sample_indices, c])
                leaves.append(LeafAffine(theta[:nx].copy(), theta[nx:nx + n_u].copy(), float(theta[-1])))
            row_trees.append(t)
            row_maps.append(leaves)
        trees.append(row_trees)
        maps.append(row_maps)
    return SarxModel(n_y, n_u, delta_y, delta_u, horizon, trees, maps)


@dataclass
class ComposedMatrices:
    """Multi-step prediction ``x_{k+j+1} = Ap[j] x_k + sum_a Bp[j, a] u_{k+a} + Fp[j]``."""

    Ap: np.ndarray   # (N, nx, nx)
    Bp: np.ndarray   # (N, N, nx, nu), zero for a > j
    Fp: np.ndarray   # (N, nx)

    @property
    def horizon(self):
        return len(self.Ap)


def compose(step_mats) -> ComposedMatrices:
    N = len(step_mats)
    nx = step_mats[0][0].shape[0]
    nu = step_mats[0][1].shape[1]
    Ap = np.zeros((N, nx, nx))
    Bp = np.zeros((N, N, nx, nu))
    Fp = np.zeros((N, nx))
    A_acc = np.eye(nx)
    F_acc = np.zeros(nx)
    for j, (A, B, F) in enumerate(step_mats):
        A_acc = A @ A_acc
        F_acc = A @ F_acc + F
        Ap[j] = A_acc
        Fp[j] = F_acc
        if j:
            Bp[j, :j] = np.einsum("ab,tbc->tac", A, Bp[j - 1, :j])
        Bp[j, j] = B
    return ComposedMatrices(Ap, Bp, Fp)


def sarx_predict_matrices(model: SarxModel, x_now, N: int | None = None) -> ComposedMatrices:
    N = model.horizon if N is None else N
    if N > model.horizon:
        raise ValueError(f"model identified for horizon {model.horizon}, asked for {N}")
    modes = model.modes(x_now)
    key = (modes, N)
    cm = model._cache.get(key)
    if cm is None:
        cm = compose(model.step_matrices(modes)[:N])
        model._cache[key] = cm
    return cm


def one_step_rmse(model: SarxModel, corpus):
    """Per-output RMSE of the j=0 predictor and the std of the predicted signal."""
    errs, sig = [], []
    for Y, U in corpus:
        Y = np.asarray(Y, dtype=float)
        U = np.asarray(U, dtype=float).reshape(len(Y), -1)
        X, first = build_regressors(Y, U, model.delta_y, model.delta_u)
        preds = np.zeros((len(X) - 1, model.n_y))
        for c in range(model.n_y):
            leaves = model.trees[0][c].leaf_indices(X[:-1])
            for lid, lm in enumerate(model.leaf_maps[0][c]):
                m = leaves == lid
                preds[m, c] = X[:-1][m] @ lm.a + U[first:first + len(X) - 1][m] @ lm.b + lm.f
        truth = Y[first + 1: first + len(X)]
        errs.append(preds - truth)
        sig.append(truth)
    e = np.vstack(errs)
    s = np.vstack(sig)
    return np.sqrt(np.mean(e ** 2, axis=0)), s.std(axis=0)
