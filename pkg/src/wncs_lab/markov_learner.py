"""Learning a Markov abstraction of the SINR from trace data with two regression trees.

Tree ``T`` partitions ``(Gamma(k), x(k))`` with response ``Gamma(k+1)``; each of
its leaves is a channel state. Tree ``Pi`` partitions ``Gamma(k)`` alone with
response ``T(Gamma(k), x(k))``. The transition matrix factors through Pi's
intervals::

    P[i, j] = sum_r p(tau_j | pi_r) * p(pi_r | tau_i)

where ``p(tau_j | pi_r)`` is a same-time co-occurrence frequency and
``p(pi_r | tau_i)`` is the mass of leaf i's next-step Gaussian on interval r.
Each state also carries a delivery probability, ``pdp[i]``, obtained by
averaging the link error rate over the leaf's current-SINR Gaussian.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from . import cart
from . import channel_physics as phys


@dataclass(frozen=True)
class SinrTrace:
    """SINR in dB and the plant regressor at each control period."""

    gamma_db: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma_db, dtype=float)
        x = np.asarray(self.states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if len(g) != len(x):
            raise ValueError("gamma and state sequences differ in length")
        object.__setattr__(self, "gamma_db", g)
        object.__setattr__(self, "states", x)

    def __len__(self):
        return len(self.gamma_db)


@dataclass
class Datasets:
    predictors: np.ndarray        # rows (Gamma(k), x(k))
    responses: np.ndarray         # Gamma(k+1)
    next_predictors: np.ndarray   # rows (Gamma(k+1), x(k+1))

    def __len__(self):
        return len(self.responses)


@dataclass(frozen=True)
class LeafGaussian:
    mean: float
    variance: float
    count: int


@dataclass(frozen=True)
class LearnerConfig:
    tree_T: cart.FitConfig = field(default_factory=lambda: cart.FitConfig(9, 20, 0.0))
    tree_Pi: cart.FitConfig = field(default_factory=lambda: cart.FitConfig(9, 20, 0.0))
    frame_bits: int = 1064
    loss_model: str = "packet"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(cart.FitConfig(**d["tree_T"]), cart.FitConfig(**d["tree_Pi"]),
                   d.get("frame_bits", 1064), d.get("loss_model", "packet"))


def build_datasets(traces) -> Datasets:
    """Pair each sample with its successor; the last sample of every trace is dropped."""
    if isinstance(traces, SinrTrace):
        traces = [traces]
    P, R, Pn = [], [], []
    for tr in traces:
        if len(tr) < 2:
            raise ValueError("trace must contain at least two samples")
        pts = np.column_stack([tr.gamma_db, tr.states])
        P.append(pts[:-1])
        R.append(tr.gamma_db[1:])
        Pn.append(pts[1:])
    if not P:
        raise ValueError("no traces given")
    return Datasets(np.vstack(P), np.concatenate(R), np.vstack(Pn))


def _gaussian(samples) -> LeafGaussian:
    n = len(samples)
    if n < 2:
        raise ValueError("a leaf needs at least two samples for an unbiased variance")
    s = np.sort(samples)
    return LeafGaussian(float(np.mean(s)), float(np.var(s, ddof=1)), n)


def fit_T(data: Datasets, config: cart.FitConfig = cart.FitConfig()):
    """Grow the state tree and fit current / next-step Gaussians per leaf."""
    tree = cart.fit(data.predictors, data.responses, config)
    cur, nxt = [], []
    for lf in tree.leaves():
        cur.append(_gaussian(data.predictors[lf.sample_indices, 0]))
        nxt.append(_gaussian(data.responses[lf.sample_indices]))
    return tree, cur, nxt


def naive_tpm(tree_T: cart.RegressionTree, data: Datasets) -> np.ndarray:
    """Transition frequencies between consecutive leaves (single-tree estimate)."""
    a = tree_T.leaf_indices(data.predictors)
    b = tree_T.leaf_indices(data.next_predictors)
    n = tree_T.n_leaves
    counts = np.zeros((n, n))
    np.add.at(counts, (a, b), 1.0)
    occ = counts.sum(axis=1, keepdims=True)
    if np.any(occ == 0):
        raise ValueError("empty leaf in naive TPM")
    return counts / occ


def fit_Pi(data: Datasets, tree_T: cart.RegressionTree, config: cart.FitConfig = cart.FitConfig()):
    """Grow the SINR-only tree whose response is the state tree's prediction."""
    response = tree_T.predict(data.predictors)
    return cart.fit(data.predictors[:, :1], response, config)


def pi_intervals(tree_Pi: cart.RegressionTree) -> np.ndarray:
    """Interval edges ``e[0] = -inf < e[1] < ... < e[m] = inf`` of Pi's leaves."""
    lv = tree_Pi.leaves()
    edges = [lv[0].lower[0]] + [lf.upper[0] for lf in lv]
    e = np.array(edges, dtype=float)
    assert e[0] == -np.inf and e[-1] == np.inf and np.all(np.diff(e) > 0)
    return e


def p_tau_given_pi(tree_T, tree_Pi, data: Datasets) -> np.ndarray:
    """Row r: fraction of samples in interval r that sit in each T-leaf (same time index)."""
    r = tree_Pi.leaf_indices(data.predictors[:, :1])
    j = tree_T.leaf_indices(data.predictors)
    counts = np.zeros((tree_Pi.n_leaves, tree_T.n_leaves))
    np.add.at(counts, (r, j), 1.0)
    occ = counts.sum(axis=1, keepdims=True)
    if np.any(occ == 0):
        raise ValueError("empty Pi leaf")
    return counts / occ


def p_pi_given_tau(next_gaussians, edges) -> np.ndarray:
    """Row i: mass of leaf i's next-step Gaussian on each interval."""
    edges = np.asarray(edges, dtype=float)
    out = np.zeros((len(next_gaussians), len(edges) - 1))
    for i, g in enumerate(next_gaussians):
        if g.variance <= 0:
            r = int(np.searchsorted(edges, g.mean, side="right")) - 1
            out[i, min(max(r, 0), len(edges) - 2)] = 1.0
            continue
        z = (edges - g.mean) / math.sqrt(g.variance)
        out[i] = np.diff(ndtr(z))
    return out


def compose_tpm(tau_given_pi, pi_given_tau) -> np.ndarray:
    A = np.asarray(pi_given_tau, dtype=float)
    B = np.asarray(tau_given_pi, dtype=float)
    if A.shape[1] != B.shape[0] or A.shape[0] != B.shape[1]:
        raise ValueError(f"shape mismatch: p(pi|tau) {A.shape} vs p(tau|pi) {B.shape}")
    P = A @ B
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
    return P


def gaussian_error_mass(mean, variance, frame_bits, loss_model="packet", tol=1e-8) -> float:
    """E[R(10^(G/10))] for G ~ N(mean, variance), R the packet or bit error rate."""
    def err(z):
        return phys.error_rate(10.0 ** (z / 10.0), frame_bits, loss_model)
    if variance <= 0:
        return float(err(mean))
    sd = math.sqrt(variance)
    c = 1.0 / math.sqrt(2 * math.pi)
    val, abserr = integrate.quad(lambda t: err(mean + sd * t) * c * math.exp(-0.5 * t * t),
                                 -38.0, 38.0, points=[-3.0, 0.0, 3.0],
                                 epsabs=tol * 1e-2, epsrel=1e-10, limit=200)
    if abserr > tol:
        raise RuntimeError(f"error-rate quadrature did not converge (abserr={abserr:g})")
    return float(min(max(val, 0.0), 1.0))


def state_pdp_learned(current_gaussians, frame_bits: int, loss_model: str = "packet") -> np.ndarray:
    return np.array([1.0 - gaussian_error_mass(g.mean, g.variance, frame_bits, loss_model)
                     for g in current_gaussians])


@dataclass
class LearnedChannelModel:
    tree_T: cart.RegressionTree
    tree_Pi: cart.RegressionTree
    current_gaussians: list
    next_gaussians: list
    tpm: np.ndarray
    pdp: np.ndarray
    pi_edges: np.ndarray
    config: LearnerConfig = field(default_factory=LearnerConfig)
    fingerprint: str = ""
    _pdp_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_states(self) -> int:
        return self.tree_T.n_leaves

    def state_of(self, gamma_db: float, x) -> int:
        return self.tree_T.leaf_index(np.concatenate(([gamma_db], np.atleast_1d(x))))

    def pdp_table(self, horizon: int) -> np.ndarray:
        """Row i holds the predicted delivery probabilities 1..horizon from state i."""
        tab = self._pdp_cache.get(horizon)
        if tab is None:
            tab = np.empty((self.n_states, horizon))
            Pj = np.eye(self.n_states)
            for j in range(horizon):
                Pj = Pj @ self.tpm
                tab[:, j] = Pj @ self.pdp
            tab = np.clip(tab, 0.0, 1.0)
            self._pdp_cache[horizon] = tab
        return tab

    def to_json(self) -> str:
        doc = {
            "tree_T": self.tree_T.to_dict(include_samples=False),
            "tree_Pi": self.tree_Pi.to_dict(include_samples=False),
            "gaussians": {"current": [asdict(g) for g in self.current_gaussians],
                          "next": [asdict(g) for g in self.next_gaussians]},
            "tpm": self.tpm.tolist(),
            "pdp": self.pdp.tolist(),
            "pi_edges": ["-inf" if np.isneginf(e) else "inf" if np.isposinf(e) else float(e)
                         for e in self.pi_edges],
            "config": self.config.to_dict(),
            "corpus_fingerprint": self.fingerprint,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "LearnedChannelModel":
        d = json.loads(text)
        return cls(cart.RegressionTree.from_dict(d["tree_T"]),
                   cart.RegressionTree.from_dict(d["tree_Pi"]),
                   [LeafGaussian(**g) for g in d["gaussians"]["current"]],
                   [LeafGaussian(**g) for g in d["gaussians"]["next"]],
                   np.array(d["tpm"], dtype=float), np.array(d["pdp"], dtype=float),
                   np.array([float(e) for e in d["pi_edges"]]),
                   LearnerConfig.from_dict(d["config"]), d.get("corpus_fingerprint", ""))


def corpus_fingerprint(data: Datasets) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.predictors).tobytes())
    h.update(np.ascontiguousarray(data.responses).tobytes())
    return h.hexdigest()[:16]


def learn(traces, config: LearnerConfig = LearnerConfig()) -> LearnedChannelModel:
    """Offline learning: state tree, SINR tree, composed TPM and per-state PDP."""
    data = build_datasets(traces)
    tree_T, cur, nxt = fit_T(data, config.tree_T)
    tree_Pi = fit_Pi(data, tree_T, config.tree_Pi)
    edges = pi_intervals(tree_Pi)
    tau_pi = p_tau_given_pi(tree_T, tree_Pi, data)
    pi_tau = p_pi_given_tau(nxt, edges)
    P = compose_tpm(tau_pi, pi_tau)
    nu = state_pdp_learned(cur, config.frame_bits, config.loss_model)
    return LearnedChannelModel(tree_T, tree_Pi, cur, nxt, P, nu, edges, config, corpus_fingerprint(data))


def predict_pdp(model: LearnedChannelModel, gamma_db: float, x, horizon: int) -> np.ndarray:
    """Predicted delivery probabilities for steps 1..horizon from the current state."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    i = model.state_of(gamma_db, x)
    return model.pdp_table(horizon)[i].copy()


def pdp_forecast(tpm, pdp, state: int, horizon: int) -> np.ndarray:
    """Iterate the row vector e_state * P^j and weight by the state PDPs."""
    P = np.asarray(tpm, dtype=float)
    v = np.zeros(len(P))
    v[state] = 1.0
    out = np.empty(horizon)
    for j in range(horizon):
        v = v @ P
        out[j] = v @ np.asarray(pdp)
    return out


def leaf_mean_identity_residual(tree_T, tree_Pi, tau_given_pi) -> float:
    """max_r |c_pi_r - sum_j p(tau_j|pi_r) c_tau_j| / (1 + |c_pi_r|)."""
    lhs = tree_Pi.values
    rhs = np.asarray(tau_given_pi) @ tree_T.values
    return float(np.max(np.abs(lhs - rhs) / (1.0 + np.abs(lhs))))


def markov_modulated_trace(tpm, means, stds, n, seed, n_features: int = 1, feature_noise: float = 1.0):
    """Synthetic SINR from a hidden Markov chain with Gaussian emissions.

    Returns ``(SinrTrace, hidden_states)``. The plant features are
    independent noise, irrelevant to the channel.
    """
    rng = np.random.default_rng(seed)
    P = np.asarray(tpm, dtype=float)
    cdf = np.cumsum(P, axis=1)
    s = np.empty(n, dtype=int)
    s[0] = rng.integers(len(P))
    u = rng.random(n)
    for k in range(1, n):
        s[k] = min(int(np.searchsorted(cdf[s[k - 1]], u[k], side="right")), len(P) - 1)
    g = np.asarray(means)[s] + np.asarray(stds)[s] * rng.standard_normal(n)
    x = feature_noise * rng.standard_normal((n, n_features))
    return SinrTrace(g, x), s
