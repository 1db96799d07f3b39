"""Physics-based finite-state Markov chain (FSMC) abstraction of the SINR.

The SINR in dB at a fixed plant configuration is approximated by a Gaussian
process (moment matching). Its range is cut into equiprobable regions; each
region becomes a Markov state with a packet delivery probability (PDP) and
transitions given by the bivariate Gaussian law of two consecutive samples.

Sign convention: the stored ``pdp`` is the probability that a packet is
*delivered*. The integral over the error rate is its complement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr, ndtri

from . import channel_physics as phys
from .fading_sim import SinrGenerator

_INF_CUT = 38.0  # |z| beyond which the standard normal density underflows


class QuadratureError(RuntimeError):
    def __init__(self, msg, achieved=None):
        super().__init__(msg)
        self.achieved = achieved


@dataclass(frozen=True)
class GaussianSinrMoments:
    mean_db: float
    variance_db2: float
    lag1_autocov_db2: float
    stderr: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.variance_db2 < 0:
            raise ValueError("variance must be non-negative")
        if abs(self.lag1_autocov_db2) > self.variance_db2 * (1 + 1e-12):
            raise ValueError("|lag-1 autocovariance| exceeds the variance")

    @property
    def std_db(self) -> float:
        return math.sqrt(self.variance_db2)

    @property
    def correlation(self) -> float:
        return self.lag1_autocov_db2 / self.variance_db2 if self.variance_db2 > 0 else 0.0

    def to_dict(self):
        return {"mean_db": self.mean_db, "variance_db2": self.variance_db2,
                "lag1_autocov_db2": self.lag1_autocov_db2, "stderr": dict(self.stderr)}


@dataclass(frozen=True)
class FsmcModel:
    thresholds: np.ndarray
    steady_probs: np.ndarray
    tpm: np.ndarray
    pdp: np.ndarray
    moments: GaussianSinrMoments
    reference_position: float = 5.0
    loss_model: str = "packet"
    frame_bits: int = 1064

    @property
    def n_states(self) -> int:
        return len(self.pdp)

    def state_of(self, gamma_db: float) -> int:
        """Region index r with thresholds[r] <= gamma_db < thresholds[r+1]."""
        r = int(np.searchsorted(self.thresholds, gamma_db, side="right")) - 1
        return min(max(r, 0), self.n_states - 1)

    def to_json(self) -> str:
        th = [None if not np.isfinite(t) else float(t) for t in self.thresholds]
        th[0], th[-1] = "-inf", "inf"
        doc = {"n_states": self.n_states, "thresholds": th,
               "steady_probs": self.steady_probs.tolist(), "tpm": self.tpm.tolist(),
               "pdp": self.pdp.tolist(), "moments": self.moments.to_dict(),
               "reference_position": self.reference_position,
               "loss_model": self.loss_model, "frame_bits": self.frame_bits}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FsmcModel":
        d = json.loads(text)
        m = d["moments"]
        return cls(thresholds=np.array([float(t) for t in d["thresholds"]]),
                   steady_probs=np.array(d["steady_probs"]), tpm=np.array(d["tpm"]),
                   pdp=np.array(d["pdp"]),
                   moments=GaussianSinrMoments(m["mean_db"], m["variance_db2"],
                                               m["lag1_autocov_db2"], m.get("stderr", {})),
                   reference_position=d["reference_position"],
                   loss_model=d.get("loss_model", "packet"), frame_bits=d.get("frame_bits", 1064))


def moment_match(params: phys.ChannelParams, fixed_cart_position: float, n_mc: int, seed,
                 sample_period_s: float = 1e-3, n_chains: int = 64, ar_order: int = 50,
                 allow_degenerate: bool = False) -> GaussianSinrMoments:
    """Monte Carlo estimate of mean, variance and lag-1 autocovariance of Gamma in dB.

    ``n_chains`` independent stationary runs of the fading simulator are pooled;
    standard errors come from the spread of the per-chain statistics.
    """
    if n_mc < 10_000:
        raise ValueError("n_mc must be at least 1e4")
    per = max(n_mc // n_chains, 2)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    pos = np.full(per, float(fixed_cart_position))
    chains = []
    models = None
    for child in root.spawn(n_chains):
        gen = SinrGenerator(params, sample_period_s, child, order=ar_order, models=models, block=per)
        models = (gen.beta0.model, gen.xi0.model)
        chains.append(phys.sinr_db(gen.block(pos)))
    g = np.array(chains)
    mean = float(g.mean())
    dev = g - mean
    var = float(np.mean(dev ** 2))
    cov1 = float(np.mean(dev[:, 1:] * dev[:, :-1]))
    if var <= (1e-12 * max(1.0, abs(mean))) ** 2:  # round-off of a constant trace
        var = cov1 = 0.0
    if var == 0 and not allow_degenerate:
        raise ValueError("degenerate SINR trace (zero variance)")
    sqn = math.sqrt(n_chains)
    se = {"mean_db": float(g.mean(axis=1).std(ddof=1) / sqn),
          "variance_db2": float((dev ** 2).mean(axis=1).std(ddof=1) / sqn),
          "lag1_autocov_db2": float((dev[:, 1:] * dev[:, :-1]).mean(axis=1).std(ddof=1) / sqn)}
    cov1 = float(np.clip(cov1, -var, var))
    return GaussianSinrMoments(mean, var, cov1, se)


def analytic_moments_interference_free(params: phys.ChannelParams, cart_position: float,
                                       sample_period_s: float = 1e-3) -> GaussianSinrMoments:
    """Exact Gaussian moments of Gamma when the interferer is off.

    Without interference Gamma is an affine function of the summed dB fading
    of the reference link, hence exactly Gaussian.
    """
    from .fading_sim import fading_acf_specs
    d0 = phys.link_distance(cart_position, params.d0_offset_m)
    a0 = float(phys.path_gain(d0))
    mean = 0.5 * 10.0 * math.log10(params.p0_w * a0 ** 2 / (params.n0 / 4.0))
    shadow, pce = fading_acf_specs(params, sample_period_s)
    var = 0.25 * (shadow.variance + pce.variance)
    cov = 0.25 * (shadow.variance * shadow.lag1_correlation + pce.variance * pce.lag1_correlation)
    return GaussianSinrMoments(mean, var, cov)


def equiprobable_thresholds(moments: GaussianSinrMoments, n_states: int) -> np.ndarray:
    if n_states < 2:
        raise ValueError("need at least two states")
    q = np.arange(n_states + 1) / n_states
    th = moments.mean_db + moments.std_db * ndtri(q)
    th[0], th[-1] = -np.inf, np.inf
    return th


def region_probs(moments: GaussianSinrMoments, thresholds) -> np.ndarray:
    z = (np.asarray(thresholds) - moments.mean_db) / moments.std_db
    return np.diff(ndtr(z))


def state_pdp(moments: GaussianSinrMoments, thresholds, r: int, frame_bits: int,
              loss_model: str = "packet", tol: float = 1e-8) -> float:
    """Delivery probability of region ``r`` (complement of its mean error rate)."""
    lo, hi = thresholds[r], thresholds[r + 1]
    mu, sd = moments.mean_db, moments.std_db

    def err(zeta):
        return phys.error_rate(10.0 ** (zeta / 10.0), frame_bits, loss_model)

    if sd == 0:
        return 1.0 - err(mu) if lo <= mu < hi else float("nan")
    zlo = max((lo - mu) / sd, -_INF_CUT)
    zhi = min((hi - mu) / sd, _INF_CUT)
    p_r = float(ndtr(zhi) - ndtr(zlo))
    if p_r <= 0:
        raise QuadratureError(f"region {r} carries no probability mass")
    dens = 1.0 / math.sqrt(2 * math.pi)
    val, abserr = integrate.quad(lambda z: err(mu + sd * z) * dens * math.exp(-0.5 * z * z),
                                 zlo, zhi, epsabs=tol * p_r * 1e-2, epsrel=1e-10, limit=200)
    if abserr > tol * p_r:
        raise QuadratureError(f"PDP quadrature for region {r} did not converge", abserr)
    return float(min(max(1.0 - val / p_r, 0.0), 1.0))


def bvn_rectangle(a1, b1, a2, b2, rho: float) -> float:
    """P(a1 < X < b1, a2 < Y < b2) for standard bivariate normal with correlation rho.

    Integrates the conditional normal CDF of Y|X over the X-interval with
    adaptive quadrature; the integrand's sharp steps at high correlation are
    passed as breakpoints.
    """
    if not -1.0 < rho < 1.0:
        raise ValueError("correlation must lie in (-1, 1)")
    a1, b1 = max(a1, -_INF_CUT), min(b1, _INF_CUT)
    if b1 <= a1:
        return 0.0
    s = math.sqrt(1.0 - rho * rho)
    a2c, b2c = max(a2, -_INF_CUT), min(b2, _INF_CUT)
    if b2c <= a2c:
        return 0.0
    dens = 1.0 / math.sqrt(2 * math.pi)

    def f(x):
        m = rho * x
        return dens * math.exp(-0.5 * x * x) * (ndtr((b2c - m) / s) - ndtr((a2c - m) / s))

    pts = []
    if abs(rho) > 1e-3:  # below this the integrand varies on the same scale as the X density
        for edge in (a2c, b2c):
            for off in (-4 * s, 0.0, 4 * s):
                x = (edge + off) / rho
                if a1 < x < b1:
                    pts.append(x)
    val, _ = integrate.quad(f, a1, b1, points=sorted(set(pts)) or None,
                            epsabs=1e-14, epsrel=1e-12, limit=500)
    return float(val)


def tpm_physics(moments: GaussianSinrMoments, thresholds) -> np.ndarray:
    """Transition matrix from the joint law of two consecutive SINR samples."""
    rho = moments.correlation
    if rho >= 1.0:
        raise ValueError("lag-1 correlation must be < 1 for a proper bivariate Gaussian")
    z = (np.asarray(thresholds, dtype=float) - moments.mean_db) / moments.std_db
    n = len(z) - 1
    p = np.diff(ndtr(np.clip(z, -np.inf, np.inf)))
    P = np.zeros((n, n))
    if rho == 0:
        P[:] = p[None, :]
        return P
    for r in range(n):
        for q in range(n):
            # the joint law is exchangeable, so fill the symmetric mass once
            if q < r:
                P[r, q] = P[q, r] * p[q] / p[r]
                continue
            P[r, q] = bvn_rectangle(z[r], z[r + 1], z[q], z[q + 1], rho) / p[r]
    assert np.all(P > -1e-12) and np.all(P < 1 + 1e-12)
    P = np.clip(P, 0.0, 1.0)
    resid = np.abs(P.sum(axis=1) - 1.0).max()
    if resid > 1e-9:
        raise QuadratureError("TPM rows do not sum to one", resid)
    return P / P.sum(axis=1, keepdims=True)


def build_fsmc(moments: GaussianSinrMoments, n_states: int = 9, frame_bits: int = 1064,
               loss_model: str = "packet", reference_position: float = 5.0) -> FsmcModel:
    th = equiprobable_thresholds(moments, n_states)
    probs = region_probs(moments, th)
    tpm = tpm_physics(moments, th)
    pdp = np.array([state_pdp(moments, th, r, frame_bits, loss_model) for r in range(n_states)])
    return FsmcModel(th, probs, tpm, pdp, moments, reference_position, loss_model, frame_bits)


def stationary_distribution(P) -> np.ndarray:
    w, v = np.linalg.eig(np.asarray(P).T)
    i = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, i])
    return pi / pi.sum()
