"""Physical-layer model of an interfered IEEE 802.15.4 / WirelessHART link.

Path loss, instantaneous SINR, bit error rate of O-QPSK/DSSS and the
resulting packet error rate. All internal arithmetic is linear; dBm values
are converted to watts once, when a :class:`ChannelParams` is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from math import comb

import numpy as np

LN10_OVER_10 = math.log(10.0) / 10.0

# (-1)^i * C(16, i) for i = 2..16, exact integers.
_BER_TERMS = [((-1) ** i) * comb(16, i) for i in range(2, 17)]
_BER_RATES = [20.0 * (1.0 - i) / i for i in range(2, 17)]

LOSS_MODELS = ("packet", "bit")


class ChannelDomainError(ValueError):
    """Raised when a physical-layer formula is evaluated outside its domain."""


def dbm_to_watt(p_dbm: float) -> float:
    return 10.0 ** (p_dbm / 10.0) / 1000.0


def db_to_neper(x_db):
    """Convert a log-normal exponent given in dB to natural-log scale."""
    return x_db * LN10_OVER_10


@dataclass(frozen=True)
class ChannelParams:
    """Constants of the reference link and its single interferer.

    Defaults describe the reference scenario. ``pce_decorr_s`` is the
    decorrelation time of the power-control error in seconds.
    """

    p0_dbm: float = 0.0
    p1_dbm: float = 10.0
    n0: float = 10.0 ** (-174.0 / 10.0) / 1000.0
    bandwidth_hz: float = 2.0e6
    symbol_rate: float = 62.5e3
    sigma_beta: float = 2.0
    shadow_decay_m: float = 9.0
    speed_mps: float = 5.37
    sigma_xi: float = 1.5
    pce_decorr_s: float = 1.5
    d0_offset_m: float = 14.0
    d1_m: float = 10.0
    frame_bits: int = 1064
    p0_w: float = field(init=False, repr=False, compare=False)
    p1_w: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("p0_dbm", "p1_dbm", "n0", "bandwidth_hz", "symbol_rate", "sigma_beta",
                     "sigma_xi", "d0_offset_m", "d1_m", "shadow_decay_m", "pce_decorr_s",
                     "speed_mps"):
            if not math.isfinite(getattr(self, name)):
                raise ChannelDomainError(f"{name} must be finite")
        if self.n0 <= 0:
            raise ChannelDomainError("noise density n0 must be positive")
        if self.bandwidth_hz <= 0 or self.symbol_rate <= 0:
            raise ChannelDomainError("bandwidth and symbol rate must be positive")
        if self.sigma_beta < 0 or self.sigma_xi < 0:
            raise ChannelDomainError("fading standard deviations must be non-negative")
        if self.frame_bits < 1:
            raise ChannelDomainError("frame_bits must be >= 1")
        if self.d1_m <= 0 or self.d0_offset_m <= 0:
            raise ChannelDomainError("link distances must be positive")
        if self.shadow_decay_m <= 0 or self.pce_decorr_s <= 0 or self.speed_mps < 0:
            raise ChannelDomainError("decorrelation constants must be positive")
        object.__setattr__(self, "p0_w", dbm_to_watt(self.p0_dbm))
        object.__setattr__(self, "p1_w", dbm_to_watt(self.p1_dbm))

    @property
    def processing_gain(self) -> float:
        return self.bandwidth_hz / self.symbol_rate

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.init}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        known = {f.name for f in fields(cls) if f.init}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown channel parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LinkRealization:
    """Link distances and fading samples at one instant.

    Fading samples are on natural-log scale, i.e. the multiplicative factor
    of link ``i`` is ``exp(beta_i + xi_i)``.
    """

    d0_m: float
    d1_m: float
    beta0: float = 0.0
    beta1: float = 0.0
    xi0: float = 0.0
    xi1: float = 0.0

    def __post_init__(self):
        if not (self.d0_m > 0 and self.d1_m > 0):
            raise ChannelDomainError("link distances must be positive")
        for v in (self.beta0, self.beta1, self.xi0, self.xi1):
            if not math.isfinite(v):
                raise ChannelDomainError("fading samples must be finite")


def path_loss_db(d_m):
    """Distance-dependent path loss in dB (two-slope 2.4 GHz model).

    Works elementwise on arrays. Note the model is discontinuous at 8 m:
    the far branch starts 0.2382 dB above the near branch's end value.
    """
    d = np.asarray(d_m, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise ChannelDomainError(f"distance must be positive and finite, got {d_m!r}")
    out = np.where(d <= 8.0, 40.2 + 20.0 * np.log10(d), 58.5 + 33.0 * np.log10(d / 8.0))
    return float(out) if out.ndim == 0 else out


def path_gain(d_m):
    """Linear path loss coefficient alpha = 10^(-PL/10)."""
    return 10.0 ** (-np.asarray(path_loss_db(d_m)) / 10.0)


def sinr_linear(params: ChannelParams, link: LinkRealization) -> float:
    a0 = float(path_gain(link.d0_m))
    a1 = float(path_gain(link.d1_m))
    return sinr_from_components(params, a0, a1, link.beta0 + link.xi0, link.beta1 + link.xi1)


def sinr_from_components(params: ChannelParams, alpha0, alpha1, fade0, fade1):
    """Vectorised SINR given path gains and summed natural-log fading exponents."""
    num = params.p0_w * np.square(alpha0) * np.exp(fade0)
    den = params.n0 / 4.0 + 8.0 / (3.0 * params.processing_gain) * params.p1_w * np.square(alpha1) * np.exp(fade1)
    g = np.sqrt(num / den)
    if not np.all(np.isfinite(g)):
        raise ChannelDomainError("non-finite SINR")
    return g


def sinr_db(gamma_linear):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(gamma_linear)


def bit_error_rate(gamma_linear):
    """Bit error rate of O-QPSK with DSSS as a function of linear SINR.

    The alternating binomial series is summed with exact integer weights.
    Accepts scalars or arrays.
    """
    g = np.asarray(gamma_linear, dtype=float)
    if np.any(g < 0) or np.any(np.isnan(g)):
        raise ChannelDomainError("SINR must be non-negative")
    # exponentials decay with the index, so the last terms are smallest;
    # sum small-to-large to limit cancellation.
    total = np.zeros_like(g)
    for w, r in zip(reversed(_BER_TERMS), reversed(_BER_RATES)):
        total = total + w * np.exp(r * g)
    rb = total / 30.0
    assert np.all(rb >= -1e-12) and np.all(rb <= 0.5 + 1e-12)
    rb = np.clip(rb, 0.0, 0.5)
    return float(rb) if rb.ndim == 0 else rb


def packet_error_rate(gamma_linear, frame_bits: int):
    if frame_bits < 1:
        raise ChannelDomainError("frame_bits must be >= 1")
    rb = np.asarray(bit_error_rate(gamma_linear))
    # 1 - (1-rb)^l computed stably
    rp = -np.expm1(frame_bits * np.log1p(-rb))
    return float(rp) if rp.ndim == 0 else rp


def error_rate(gamma_linear, frame_bits: int, loss_model: str = "packet"):
    """Loss probability of one control packet.

    ``loss_model="packet"`` uses the packet error rate over ``frame_bits``;
    ``"bit"`` reproduces the case-study variant where the Bernoulli delivery
    parameter is one minus the bit error rate.
    """
    if loss_model == "packet":
        return packet_error_rate(gamma_linear, frame_bits)
    if loss_model == "bit":
        return bit_error_rate(gamma_linear)
    raise ValueError(f"unknown loss model {loss_model!r}; expected one of {LOSS_MODELS}")


def link_distance(cart_position_m, d0_offset_m: float):
    d = np.asarray(cart_position_m, dtype=float) + d0_offset_m
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ChannelDomainError(
            f"cart position {cart_position_m!r} puts the receiver at or behind the transmitter")
    return float(d) if d.ndim == 0 else d
