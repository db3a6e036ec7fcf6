"""Numerical models of the approximate inference hardware.

Covers dynamic fixed-point formats, the k-bit leading-one truncating
multiplier, random bit flips in weight storage, and the straight-through
gradient rule used to train through all of them.

Scalar entry points (``quantize``, ``drum_multiply``, ``inject_bit_flips``)
operate on :class:`FixedWord`; the ``*_array`` variants are the vectorized
forms used by the forward pass and must agree with the scalar ones exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import Rng, ShapeError

# Effective width per multiplier mode; K1 is the most aggressive.
DEFAULT_MODE_K = {"K1": 3, "K2": 4, "K3": 5, "K4": 6}

# Per-bit flip rate of SRAM weight storage at near-threshold supply voltages.
NTV_FLIP_RATES = {"400mV": 0.1, "660mV": 0.01, "850mV": 0.001}


@dataclass(frozen=True)
class FixedPointFormat:
    word_bits: int = 16
    frac_bits: int = 15
    signed: bool = True

    def __post_init__(self):
        # 24 bits keeps exact float64 accumulation of raw products.
        if self.word_bits < 2 or self.word_bits > 24:
            raise ValueError(f"word_bits must be in [2, 24], got {self.word_bits}")
        if not 0 <= self.frac_bits <= self.word_bits - 1:
            raise ValueError(
                f"frac_bits must be in [0, {self.word_bits - 1}], got {self.frac_bits}"
            )
        if not self.signed:
            raise ValueError("only signed formats are supported")

    @property
    def raw_min(self) -> int:
        return -(1 << (self.word_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.word_bits - 1)) - 1

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.raw_min * self.ulp

    @property
    def max_value(self) -> float:
        return self.raw_max * self.ulp


@dataclass(frozen=True)
class FixedWord:
    raw: int
    fmt: FixedPointFormat

    def __post_init__(self):
        if not self.fmt.raw_min <= self.raw <= self.fmt.raw_max:
            raise ValueError(f"raw value {self.raw} does not fit in {self.fmt.word_bits} bits")

    @property
    def value(self) -> float:
        return self.raw * self.fmt.ulp


@dataclass(frozen=True)
class ApproxMulConfig:
    k: int
    mode_label: str = ""

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"effective width k must be >= 2, got {self.k}")

    @classmethod
    def from_mode(cls, label: str, mode_k: dict | None = None) -> "ApproxMulConfig":
        table = DEFAULT_MODE_K if mode_k is None else mode_k
        if label not in table:
            raise ValueError(f"unknown multiplier mode {label!r}")
        return cls(k=int(table[label]), mode_label=label)


@dataclass(frozen=True)
class NtvConfig:
    flip_prob: float
    voltage_label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")

    @classmethod
    def from_voltage(cls, label: str) -> "NtvConfig":
        if label not in NTV_FLIP_RATES:
            raise ValueError(f"no flip rate known for voltage {label!r}")
        return cls(NTV_FLIP_RATES[label], label)


@dataclass(frozen=True)
class HardwareModel:
    """One multiplier variant plus one storage variant.

    ``multiplier=None`` means an exact fixed-point multiplier and
    ``storage=None`` means reliable SRAM.  A ``*_frac_bits`` of ``None``
    selects dynamic fixed point: the fraction width is chosen per layer from
    the tensor being quantized.
    """

    multiplier: ApproxMulConfig | None = None
    storage: NtvConfig | None = None
    weight_bits: int = 16
    activation_bits: int = 16
    weight_frac_bits: int | None = None
    activation_frac_bits: int | None = None

    def __post_init__(self):
        # Fail early on invalid static formats.
        if self.weight_frac_bits is not None:
            FixedPointFormat(self.weight_bits, self.weight_frac_bits)
        if self.activation_frac_bits is not None:
            FixedPointFormat(self.activation_bits, self.activation_frac_bits)
        FixedPointFormat(self.weight_bits, 0)
        FixedPointFormat(self.activation_bits, 0)

    @property
    def multiplier_label(self) -> str:
        if self.multiplier is None:
            return "exact"
        return self.multiplier.mode_label or f"k{self.multiplier.k}"

    @property
    def storage_label(self) -> str:
        if self.storage is None:
            return "reliable"
        return self.storage.voltage_label or f"p{self.storage.flip_prob:g}"

    @property
    def label(self) -> str:
        return f"{self.multiplier_label}/{self.storage_label}"

    @property
    def stochastic(self) -> bool:
        return self.storage is not None and self.storage.flip_prob > 0.0

    @property
    def approximate(self) -> bool:
        return self.multiplier is not None or self.stochastic

    def weight_format(self, weights: np.ndarray) -> FixedPointFormat:
        if self.weight_frac_bits is not None:
            return FixedPointFormat(self.weight_bits, self.weight_frac_bits)
        return choose_format(weights, self.weight_bits)

    def activation_format(self, activations: np.ndarray) -> FixedPointFormat:
        if self.activation_frac_bits is not None:
            return FixedPointFormat(self.activation_bits, self.activation_frac_bits)
        return choose_format(activations, self.activation_bits)


def _fits(lo: float, hi: float, frac_bits: int, word_bits: int) -> bool:
    scale = 2.0 ** frac_bits
    raw_hi = np.rint(hi * scale)
    raw_lo = np.rint(lo * scale)
    return raw_hi <= (1 << (word_bits - 1)) - 1 and raw_lo >= -(1 << (word_bits - 1))


def choose_format(values: np.ndarray, word_bits: int = 16) -> FixedPointFormat:
    """Widest fraction field that holds every value without saturating."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot choose a format for an empty tensor")
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot choose a format for non-finite values")
    top = word_bits - 1
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return FixedPointFormat(word_bits, top)
    lo, hi = float(values.min()), float(values.max())
    frac = top - math.ceil(math.log2(peak))
    frac = min(max(frac, 0), top)
    # The log estimate can be off by one at powers of two and rounding edges.
    while frac > 0 and not _fits(lo, hi, frac, word_bits):
        frac -= 1
    while frac < top and _fits(lo, hi, frac + 1, word_bits):
        frac += 1
    return FixedPointFormat(word_bits, frac)


def quantize_array(x: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    """Round-half-even to raw integers, saturating at the format bounds."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize NaN or infinite values")
    raw = np.rint(x * (2.0 ** fmt.frac_bits))
    return np.clip(raw, fmt.raw_min, fmt.raw_max).astype(np.int64)


def dequantize_array(raw: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) * fmt.ulp


def quantize(x: float, fmt: FixedPointFormat) -> FixedWord:
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot quantize {x}")
    return FixedWord(int(quantize_array(np.float64(x), fmt)), fmt)


def dequantize(w: FixedWord) -> float:
    return w.value


def _bit_length(mag: np.ndarray) -> np.ndarray:
    # frexp is exact for integers below 2**53: mag = m * 2**e with m in [0.5, 1).
    _, exp = np.frexp(mag.astype(np.float64))
    return np.where(mag > 0, exp, 0)


def drum_truncate(mag: np.ndarray, k: int) -> np.ndarray:
    """Keep k bits from the leading one and set the lowest kept bit.

    Magnitudes with at most k significant bits are returned unchanged.
    """
    mag = np.asarray(mag, dtype=np.int64)
    if np.any(mag < 0):
        raise ValueError("drum_truncate expects magnitudes")
    shift = np.maximum(_bit_length(mag) - k, 0)
    truncated = ((mag >> shift) | 1) << shift
    return np.where(shift > 0, truncated, mag)


def drum_approximate(raw: np.ndarray, k: int) -> np.ndarray:
    """Signed operand as seen by the approximate multiplier."""
    raw = np.asarray(raw, dtype=np.int64)
    return np.sign(raw) * drum_truncate(np.abs(raw), k)


def drum_multiply(a: FixedWord, b: FixedWord, cfg: ApproxMulConfig) -> float:
    prod = int(drum_approximate(np.int64(a.raw), cfg.k)) * int(drum_approximate(np.int64(b.raw), cfg.k))
    return math.ldexp(float(prod), -(a.fmt.frac_bits + b.fmt.frac_bits))


def inject_flips_array(raw: np.ndarray, fmt: FixedPointFormat, flip_prob: float, rng: Rng) -> np.ndarray:
    """XOR every bit of every word independently with probability ``flip_prob``."""
    raw = np.asarray(raw, dtype=np.int64)
    if flip_prob <= 0.0:
        return raw.copy()
    n = fmt.word_bits
    hits = rng.uniform(raw.shape + (n,)) < flip_prob
    mask = (hits.astype(np.int64) << np.arange(n, dtype=np.int64)).sum(axis=-1)
    word_mask = (1 << n) - 1
    flipped = (raw & word_mask) ^ mask
    return np.where(flipped >= (1 << (n - 1)), flipped - (1 << n), flipped)


def inject_bit_flips(w: FixedWord, cfg: NtvConfig, rng: Rng) -> FixedWord:
    raw = inject_flips_array(np.int64(w.raw), w.fmt, cfg.flip_prob, rng)
    return FixedWord(int(raw), w.fmt)


def ste_backward(grad_out: np.ndarray) -> np.ndarray:
    """Pass gradients with magnitude below one; clamp the rest to +-1."""
    g = np.asarray(grad_out, dtype=np.float64)
    return np.where(np.abs(g) < 1.0, g, np.sign(g))


def approx_forward_linear(
    activations: np.ndarray,
    weights: np.ndarray,
    hw: HardwareModel,
    rng: Rng | None = None,
) -> np.ndarray:
    """Pre-activations ``activations @ weights.T`` as computed by ``hw``.

    Weights are ``(fan_out, fan_in)``, activations ``(batch, fan_in)``.
    Products go through the configured multiplier on quantized operands and
    are accumulated exactly.
    """
    a = np.asarray(activations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[1]:
        raise ShapeError(f"activations {a.shape} do not match weights {w.shape}")

    w_fmt = hw.weight_format(w)
    a_fmt = hw.activation_format(a)
    w_raw = quantize_array(w, w_fmt)
    if hw.stochastic:
        if rng is None:
            raise ValueError("a noisy storage model needs an Rng")
        w_raw = inject_flips_array(w_raw, w_fmt, hw.storage.flip_prob, rng)
    a_raw = quantize_array(a, a_fmt)
    if hw.multiplier is not None:
        w_raw = drum_approximate(w_raw, hw.multiplier.k)
        a_raw = drum_approximate(a_raw, hw.multiplier.k)
    # Integer products summed in float64 stay exact below 2**53.
    acc = a_raw.astype(np.float64) @ w_raw.T.astype(np.float64)
    return np.ldexp(acc, -(w_fmt.frac_bits + a_fmt.frac_bits))
