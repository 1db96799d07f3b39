"""Autoregressive simulation of correlated log-normal fading.

Shadowing and power-control-error processes are zero-mean Gaussian with an
exponentially decaying autocovariance. Each is realised by an AR(p) model fit
with the Yule-Walker equations, whose theoretical ACF reproduces the target
exactly up to lag p.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter, lfiltic

from . import channel_physics as phys

TRACE_COLUMNS = ("k", "gamma_db", "y1", "y2", "y3", "y4", "u", "delivered")


class ArFitError(np.linalg.LinAlgError):
    def __init__(self, msg, condition=None):
        super().__init__(msg)
        self.condition = condition


@dataclass(frozen=True)
class AcfSpec:
    variance: float
    decay_kind: str
    decay_scale: float
    sample_period_s: float
    speed_mps: float = 0.0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")
        if self.decay_scale <= 0 or self.sample_period_s <= 0:
            raise ValueError("decay scale and sample period must be positive")
        if self.decay_kind not in ("distance", "time"):
            raise ValueError(f"decay_kind must be 'distance' or 'time', got {self.decay_kind!r}")

    @property
    def lag1_correlation(self) -> float:
        if self.decay_kind == "distance":
            return float(np.exp(-self.speed_mps * self.sample_period_s / self.decay_scale))
        return float(np.exp(-self.sample_period_s / self.decay_scale))


@dataclass(frozen=True)
class ArModel:
    """AR model ``z(k) = -sum_n a_n z(k-n) + w(k)`` with ``w ~ N(0, noise_variance)``."""

    coeffs: tuple
    noise_variance: float

    @property
    def order(self) -> int:
        return len(self.coeffs)

    def spectral_radius(self) -> float:
        return _spectral_radius(self.coeffs)

    def is_stationary(self) -> bool:
        return self.spectral_radius() < 1.0


@functools.lru_cache(maxsize=64)
def _spectral_radius(coeffs: tuple) -> float:
    p = len(coeffs)
    if p == 0:
        return 0.0
    comp = np.zeros((p, p))
    comp[0, :] = -np.asarray(coeffs)
    comp[1:, :-1] = np.eye(p - 1)
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def acf_values(spec: AcfSpec, p: int) -> np.ndarray:
    """Target autocovariance R(0..p) of an exponentially correlated process."""
    if p < 1:
        raise ValueError("AR order must be >= 1")
    n = np.arange(p + 1)
    return spec.variance * spec.lag1_correlation ** n


def levinson_durbin(r: np.ndarray):
    """Solve the Yule-Walker system by the Levinson-Durbin recursion.

    Returns ``(a, sigma2, reflection)`` for the convention
    ``z(k) = -sum a_m z(k-m) + w(k)``.
    """
    r = np.asarray(r, dtype=float)
    p = len(r) - 1
    a = np.zeros(p)
    err = r[0]
    refl = np.zeros(p)
    for m in range(p):
        acc = r[m + 1] + np.dot(a[:m], r[m:0:-1])
        k = -acc / err
        refl[m] = k
        a_prev = a[:m].copy()
        a[:m] = a_prev + k * a_prev[::-1]
        a[m] = k
        err = err * (1.0 - k * k)
        if err <= 0:
            raise ArFitError(f"non-positive prediction error at order {m + 1}; "
                             "autocovariance is not positive definite")
    return a, err, refl


def fit_ar(acf) -> ArModel:
    """Fit AR(p) coefficients to the autocovariance sequence ``acf[0..p]``."""
    r = np.asarray(acf, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("need at least R(0) and R(1)")
    if not r[0] > 0:
        raise ArFitError("R(0) must be positive")
    refl = None
    try:
        a, sigma2, refl = levinson_durbin(r)
    except ArFitError as exc:
        exc.condition = _toeplitz_condition(r)
        raise
    if np.any(np.abs(refl) >= 1.0):
        raise ArFitError("reflection coefficient outside the unit disc", _toeplitz_condition(r))
    sigma2 = max(float(r[0] + np.dot(a, r[1:])), 0.0)
    model = ArModel(tuple(float(x) for x in a), sigma2)
    assert model.is_stationary(), "fitted AR model is not stationary"
    return model


def _toeplitz_condition(r):
    from scipy.linalg import toeplitz
    return float(np.linalg.cond(toeplitz(r[:-1])))


def theoretical_acf(model: ArModel, max_lag: int) -> np.ndarray:
    """ACF of the stationary AR process for lags ``0..max_lag``.

    Lags up to the order come from solving the Yule-Walker system backwards
    (step-down recursion); later lags follow the AR recursion.
    """
    p = model.order
    out = np.zeros(max_lag + 1)
    if p == 0:
        out[0] = model.noise_variance
        return out
    a = np.asarray(model.coeffs)
    # Build the (p+1)x(p+1) linear system relating R(0..p) to (a, sigma^2).
    M = np.zeros((p + 1, p + 1))
    rhs = np.zeros(p + 1)
    full = np.concatenate(([1.0], a))
    for n in range(p + 1):
        for m in range(p + 1):
            M[n, abs(n - m)] += full[m]
    rhs[0] = model.noise_variance
    r = np.linalg.solve(M, rhs)
    out[: min(p, max_lag) + 1] = r[: min(p, max_lag) + 1]
    for n in range(p + 1, max_lag + 1):
        out[n] = -np.dot(a, out[n - 1::-1][:p])
    return out


def generate(model: ArModel, n_samples: int, seed=None, burn_in: int | None = None, rng=None) -> np.ndarray:
    """Draw ``n_samples`` of the AR process after discarding ``burn_in``.

    Either ``seed`` or an explicit numpy ``rng`` must be given.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not model.is_stationary():
        raise ValueError("refusing to simulate a non-stationary AR model")
    if burn_in is None:
        burn_in = 10 * model.order
    if burn_in < 0:
        raise ValueError("burn_in must be >= 0")
    if rng is None:
        rng = np.random.default_rng(seed)
    zi = stationary_filter_state(model, rng)
    w = rng.standard_normal(n_samples + burn_in) * np.sqrt(model.noise_variance)
    if model.order == 0:
        return w[burn_in:]
    z, _ = lfilter([1.0], np.concatenate(([1.0], model.coeffs)), w, zi=zi)
    return z[burn_in:]


@functools.lru_cache(maxsize=32)
def _stationary_factor(model: ArModel) -> np.ndarray:
    """Map from standard normals to a stationary ``lfilter`` state (past z(-1), z(-2), ... drawn jointly)."""
    p = model.order
    acf = theoretical_acf(model, p - 1)
    cov = acf[np.abs(np.subtract.outer(np.arange(p), np.arange(p)))]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        chol = v * np.sqrt(np.clip(w, 0.0, None))
    # lfiltic is linear in the past outputs, so fold it into the factor
    den = np.concatenate(([1.0], model.coeffs))
    to_state = np.column_stack([lfiltic([1.0], den, e) for e in np.eye(p)])
    factor = to_state @ chol
    factor.setflags(write=False)
    return factor


def stationary_filter_state(model: ArModel, rng: np.random.Generator):
    """Draw ``lfilter`` initial conditions from the stationary distribution.

    Slowly decorrelating fading (lag-1 correlation near one) would otherwise
    need a burn-in of many correlation times to forget a zero start.
    """
    p = model.order
    if p == 0:
        return None
    return _stationary_factor(model) @ rng.standard_normal(p)


class ArStream:
    """Stateful AR generator producing samples in blocks.

    Owns a private RNG; samples come out one at a time through :meth:`next`
    while being generated internally in blocks for speed.
    """

    def __init__(self, model: ArModel, rng: np.random.Generator, block: int = 4096, burn_in=None):
        if not model.is_stationary():
            raise ValueError("refusing to simulate a non-stationary AR model")
        self.model = model
        self.rng = rng
        self.block = block
        self._den = np.concatenate(([1.0], model.coeffs))
        self._zi = stationary_filter_state(model, rng)
        self._buf = np.empty(0)
        self._pos = 0
        burn = 10 * model.order if burn_in is None else burn_in
        if burn:
            self.take(burn)

    def _refill(self, n):
        w = self.rng.standard_normal(n) * np.sqrt(self.model.noise_variance)
        if self.model.order == 0:
            return w
        z, self._zi = lfilter([1.0], self._den, w, zi=self._zi)
        return z

    def take(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self._pos >= len(self._buf):
                if n >= self.block:
                    out.append(self._refill(n))
                    break
                self._buf = self._refill(self.block)
                self._pos = 0
            chunk = self._buf[self._pos:self._pos + n]
            self._pos += len(chunk)
            n -= len(chunk)
            out.append(chunk)
        return np.concatenate(out) if out else np.empty(0)

    def next(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._refill(self.block)
            self._pos = 0
        v = self._buf[self._pos]
        self._pos += 1
        return float(v)


def fading_acf_specs(params: phys.ChannelParams, sample_period_s: float):
    """ACF specs (in dB^2) of shadowing and power-control error."""
    shadow = AcfSpec(params.sigma_beta ** 2, "distance", params.shadow_decay_m,
                     sample_period_s, params.speed_mps)
    pce = AcfSpec(params.sigma_xi ** 2, "time", params.pce_decorr_s, sample_period_s)
    return shadow, pce


def fit_fading_models(params: phys.ChannelParams, sample_period_s: float, order: int = 50):
    """Return AR models (in dB) for shadowing and PCE; zero-variance gives a silent model."""
    models = []
    for spec in fading_acf_specs(params, sample_period_s):
        if spec.variance == 0:
            models.append(ArModel(tuple([0.0] * order), 0.0))
        else:
            models.append(fit_ar(acf_values(spec, order)))
    return tuple(models)


class SinrGenerator:
    """Online coupled SINR generator.

    Four independent AR streams (shadowing and PCE on both links) advance one
    sample per call; the reference-link distance follows the cart position.
    Streams are seeded from ``seed`` through :class:`numpy.random.SeedSequence`.
    """

    def __init__(self, params: phys.ChannelParams, sample_period_s: float, seed,
                 order: int = 50, models=None, burn_in=None, block: int = 4096):
        self.params = params
        shadow, pce = models if models is not None else fit_fading_models(params, sample_period_s, order)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = ss.spawn(4)
        rngs = [np.random.default_rng(c) for c in children]
        self.beta0 = ArStream(shadow, rngs[0], block, burn_in)
        self.beta1 = ArStream(shadow, rngs[1], block, burn_in)
        self.xi0 = ArStream(pce, rngs[2], block, burn_in)
        self.xi1 = ArStream(pce, rngs[3], block, burn_in)
        self._alpha1 = float(phys.path_gain(params.d1_m))

    def step(self, cart_position: float):
        """Advance all fading streams one sample and return ``(gamma_db, gamma_linear)``."""
        d0 = phys.link_distance(cart_position, self.params.d0_offset_m)
        alpha0 = float(phys.path_gain(d0))
        f0 = phys.db_to_neper(self.beta0.next() + self.xi0.next())
        f1 = phys.db_to_neper(self.beta1.next() + self.xi1.next())
        g = float(phys.sinr_from_components(self.params, alpha0, self._alpha1, f0, f1))
        return float(phys.sinr_db(g)), g

    def fading_block(self, n: int):
        """Next ``n`` log-normal fading factors (natural-log scale) of both links.

        The fading streams do not depend on the cart, so closed-loop callers
        can draw them up front and combine them with the path gain per step.
        """
        f0 = phys.db_to_neper(self.beta0.take(n) + self.xi0.take(n))
        f1 = phys.db_to_neper(self.beta1.take(n) + self.xi1.take(n))
        return f0, f1

    def block(self, cart_positions) -> np.ndarray:
        """Vectorised version of :meth:`step` over a sequence of positions; returns linear SINR."""
        pos = np.asarray(cart_positions, dtype=float)
        n = len(pos)
        d0 = phys.link_distance(pos, self.params.d0_offset_m)
        f0 = phys.db_to_neper(self.beta0.take(n) + self.xi0.take(n))
        f1 = phys.db_to_neper(self.beta1.take(n) + self.xi1.take(n))
        return phys.sinr_from_components(self.params, phys.path_gain(d0), self._alpha1, f0, f1)


def write_trace_csv(path, gamma_db, states, inputs, delivered):
    """Write one trace in the corpus CSV schema (one row per control period)."""
    path = Path(path)
    states = np.asarray(states, dtype=float)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for k in range(len(gamma_db)):
            w.writerow([k, repr(float(gamma_db[k])), *(repr(float(v)) for v in states[k]),
                        repr(float(inputs[k])), int(delivered[k])])


def read_trace_csv(path):
    """Read a corpus trace; returns dict of numpy arrays keyed by column."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = [h.strip() for h in next(r)]
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [[float(v) for v in row] for row in r]
    arr = np.array(rows, dtype=float).reshape(-1, len(TRACE_COLUMNS))
    out = {name: arr[:, i] for i, name in enumerate(TRACE_COLUMNS)}
    out["k"] = out["k"].astype(int)
    out["delivered"] = out["delivered"].astype(int)
    return out
