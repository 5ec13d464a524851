"""Sampled-signal containers, QAM mapping, pulse shaping, quality metrics.

Everything downstream (channel simulator, DBP receivers, training
loops) moves data around in the two value types defined here: a
uniformly sampled complex baseband waveform with one or two
polarizations, and a frame of constellation symbols.  Amplitudes are
in sqrt(W) so |u|^2 is instantaneous power in watts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import resample_poly

from .errors import ConfigError

SNR_CAP_DB = 100.0  # returned when the aligned residual is exactly zero


@dataclass(frozen=True)
class SamplingGrid:
    """Uniform time grid: sample rate in Hz, length, samples per symbol."""

    sample_rate: float
    n_samples: int
    samples_per_symbol: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.n_samples <= 0:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")
        if self.samples_per_symbol < 1:
            raise ConfigError("samples_per_symbol must be >= 1")
        if self.n_samples % self.samples_per_symbol != 0:
            raise ConfigError(
                f"n_samples={self.n_samples} not divisible by samples_per_symbol={self.samples_per_symbol}")

    @property
    def symbol_rate(self) -> float:
        return self.sample_rate / self.samples_per_symbol

    @property
    def omega(self) -> np.ndarray:
        """Angular FFT frequencies in rad/s (fftfreq ordering)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n_samples, d=1.0 / self.sample_rate)


@dataclass(frozen=True)
class ComplexSignal:
    """Complex baseband waveform, one or two polarizations, plus its grid.

    ``delay`` carries the accumulated front-end filter group delay in
    samples so the receiver knows where symbol centers sit.
    """

    grid: SamplingGrid
    pol_x: np.ndarray
    pol_y: np.ndarray | None = None
    delay: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pol_x", np.asarray(self.pol_x, dtype=np.complex128))
        if len(self.pol_x) != self.grid.n_samples:
            raise ValueError(f"pol_x has {len(self.pol_x)} samples, grid says {self.grid.n_samples}")
        if self.pol_y is not None:
            object.__setattr__(self, "pol_y", np.asarray(self.pol_y, dtype=np.complex128))
            if len(self.pol_y) != len(self.pol_x):
                raise ValueError("pol_x and pol_y lengths differ")

    @property
    def dual_pol(self) -> bool:
        return self.pol_y is not None

    def pols(self) -> tuple[np.ndarray, ...]:
        return (self.pol_x,) if self.pol_y is None else (self.pol_x, self.pol_y)

    def with_pols(self, pol_x, pol_y=None, **extra) -> "ComplexSignal":
        """Same grid and bookkeeping, new sample arrays."""
        if pol_y is None and self.pol_y is not None:
            raise ValueError("dual-pol signal requires both polarizations")
        return replace(self, pol_x=np.asarray(pol_x), pol_y=None if pol_y is None else np.asarray(pol_y), **extra)

    @property
    def energy(self) -> float:
        e = float(np.sum(np.abs(self.pol_x) ** 2))
        if self.pol_y is not None:
            e += float(np.sum(np.abs(self.pol_y) ** 2))
        return e

    @property
    def mean_power(self) -> float:
        """Average power in W, summed over polarizations."""
        return self.energy / self.grid.n_samples


@dataclass(frozen=True)
class SymbolFrame:
    """Constellation symbols, shape (n_pol, n_symbols).

    ``modulation_order`` is set for transmitted frames built by
    ``qam_map`` (whose points are unit-mean-energy by construction) and
    None for recovered frames, which are generally off-constellation.
    """

    symbols: np.ndarray
    modulation_order: int | None = None
    normalized: bool = True

    def __post_init__(self):
        sym = np.atleast_2d(np.asarray(self.symbols, dtype=np.complex128))
        object.__setattr__(self, "symbols", sym)
        if sym.shape[0] not in (1, 2):
            raise ValueError(f"expected 1 or 2 polarization rows, got {sym.shape[0]}")
        if self.modulation_order is not None and self.normalized and sym.size:
            table = constellation(self.modulation_order)
            dist = np.min(np.abs(sym.reshape(-1, 1) - table.reshape(1, -1)), axis=1)
            if np.max(dist) > 1e-12:
                raise ValueError("declared-constellation frame contains off-grid symbols")

    @property
    def n_symbols(self) -> int:
        return self.symbols.shape[1]

    @property
    def n_pol(self) -> int:
        return self.symbols.shape[0]

    def interior(self, guard: int) -> "SymbolFrame":
        """Drop ``guard`` symbols on both ends of every polarization."""
        if guard < 0 or 2 * guard >= self.n_symbols:
            raise ValueError(f"guard {guard} leaves no interior in frame of {self.n_symbols}")
        sl = self.symbols[:, guard:self.n_symbols - guard]
        return SymbolFrame(sl, self.modulation_order, normalized=False)


# ---------------------------------------------------------------------------
# QAM constellations (Gray-labeled, unit mean energy)


def _gray_decode(g: np.ndarray) -> np.ndarray:
    b = g.copy()
    shift = 1
    while np.any(g >> shift):
        b ^= g >> shift
        shift += 1
    return b


def constellation(order: int) -> np.ndarray:
    """Gray-labeled square-QAM table, index = label, unit mean energy.

    Per-axis bits are Gray-decoded to an amplitude level, all-zero bits
    mapping to the most positive level; the first half of the label
    addresses the in-phase axis.
    """
    if order not in (4, 16, 64):
        raise ConfigError(f"unsupported modulation order {order} (choose 4, 16, or 64)")
    bits_per_axis = int(np.log2(order)) // 2
    n_levels = 1 << bits_per_axis
    levels = (n_levels - 1 - 2 * np.arange(n_levels)).astype(float)  # +max ... -max
    labels = np.arange(order)
    i_bits = labels >> bits_per_axis
    q_bits = labels & (n_levels - 1)
    points = levels[_gray_decode(i_bits)] + 1j * levels[_gray_decode(q_bits)]
    return points / np.sqrt(np.mean(np.abs(points) ** 2))


def qam_map(indices, order: int) -> SymbolFrame:
    """Map integer labels onto the Gray QAM constellation.

    ``indices`` may be a flat sequence (single polarization) or a
    (2, n) array for dual polarization.
    """
    table = constellation(order)
    idx = np.atleast_2d(np.asarray(indices))
    if np.any(idx < 0) or np.any(idx >= order):
        raise ConfigError(f"symbol index out of range for order {order}")
    return SymbolFrame(table[idx], modulation_order=order)


def random_symbols(rng: np.random.Generator, n: int, order: int, n_pol: int = 1) -> SymbolFrame:
    indices = rng.integers(0, order, size=(n_pol, n))
    return qam_map(indices, order)


# ---------------------------------------------------------------------------
# root-raised-cosine shaping


def rrc_taps(rolloff: float, span_symbols: int, sps: int) -> np.ndarray:
    """Root-raised-cosine impulse response, span_symbols*sps + 1 taps.

    Closed form sampled at t = k/sps symbol periods with the removable
    singularities at t=0 and t=±1/(4*rolloff) replaced by their limits.
    Returned unnormalized (peak value 1 - b + 4b/pi at the center).
    """
    if not 0.0 < rolloff <= 1.0:
        raise ConfigError(f"rolloff must lie in (0, 1], got {rolloff}")
    if span_symbols <= 0 or span_symbols % 2:
        raise ConfigError(f"span_symbols must be a positive even integer, got {span_symbols}")
    b = float(rolloff)
    n = span_symbols * sps
    t = (np.arange(n + 1) - n / 2) / sps
    taps = np.empty(n + 1)

    with np.errstate(divide="ignore", invalid="ignore"):
        num = np.sin(np.pi * t * (1 - b)) + 4 * b * t * np.cos(np.pi * t * (1 + b))
        den = np.pi * t * (1 - (4 * b * t) ** 2)
        taps = num / den

    taps[t == 0.0] = 1.0 - b + 4 * b / np.pi
    singular = np.isclose(np.abs(t), 1.0 / (4 * b))
    if np.any(singular):
        taps[singular] = (b / np.sqrt(2)) * (
            (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
    return taps


def shape(symbols: SymbolFrame, sps: int, taps: np.ndarray, symbol_rate: float = 1.0) -> ComplexSignal:
    """Zero-stuff to ``sps`` samples per symbol and apply the pulse filter.

    Full linear convolution; the output is zero-padded up to a multiple
    of ``sps`` and the filter group delay (len(taps)-1)//2 is recorded
    on the returned signal for later symbol alignment.
    """
    taps = np.asarray(taps)
    n_up = symbols.n_symbols * sps
    out_pols = []
    for p in range(symbols.n_pol):
        up = np.zeros(n_up, dtype=np.complex128)
        up[::sps] = symbols.symbols[p]
        out_pols.append(np.convolve(up, taps, mode="full"))
    n_full = len(out_pols[0])
    n_padded = int(np.ceil(n_full / sps)) * sps
    out_pols = [np.concatenate([y, np.zeros(n_padded - n_full, dtype=np.complex128)]) for y in out_pols]
    grid = SamplingGrid(sample_rate=symbol_rate * sps, n_samples=n_padded, samples_per_symbol=sps)
    return ComplexSignal(grid, out_pols[0], out_pols[1] if len(out_pols) == 2 else None,
                         delay=(len(taps) - 1) // 2)


def matched_filter_downsample(sig: ComplexSignal, taps: np.ndarray, delay: int) -> SymbolFrame:
    """Matched filter ("same" alignment) then one sample per symbol slot.

    ``delay`` is the total pipeline group delay in samples: symbol k is
    read at sample delay + k*sps.
    """
    taps = np.asarray(taps)
    sps = sig.grid.samples_per_symbol
    n = sig.grid.n_samples
    if not 0 <= delay < n:
        raise IndexError(f"delay {delay} outside signal of {n} samples")
    c = (len(taps) - 1) // 2
    n_sym = (n - 1 - delay) // sps + 1
    rows = []
    for u in sig.pols():
        filt = np.convolve(u, taps, mode="full")[c:c + n]
        rows.append(filt[delay::sps][:n_sym])
    return SymbolFrame(np.stack(rows), modulation_order=None, normalized=False)


def resample_down(sig: ComplexSignal, factor: int) -> ComplexSignal:
    """Integer-factor rate reduction with a linear-phase polyphase filter.

    Output sample k corresponds to input sample k*factor (the
    anti-alias filter delay is compensated internally), so recorded
    delays divide through when they are multiples of ``factor``.
    """
    if factor == 1:
        return sig
    if sig.grid.samples_per_symbol % factor:
        raise ConfigError(f"decimation {factor} does not divide samples_per_symbol")
    if sig.delay % factor:
        raise ConfigError(f"recorded delay {sig.delay} not a multiple of decimation {factor}")
    pols = [resample_poly(u, 1, factor) for u in sig.pols()]
    grid = SamplingGrid(sig.grid.sample_rate / factor, len(pols[0]),
                        sig.grid.samples_per_symbol // factor)
    return ComplexSignal(grid, pols[0], pols[1] if len(pols) == 2 else None,
                         delay=sig.delay // factor)


# ---------------------------------------------------------------------------
# quality metric


def effective_snr(rx: SymbolFrame, tx: SymbolFrame, per_polarization: bool = False) -> float:
    """Effective SNR in dB after least-squares complex alignment.

    The scalar a minimizing sum |a*rx - tx|^2 is found in closed form
    (a = <rx, tx> / |rx|^2, one scalar across all polarizations), then
    SNR = sum|tx|^2 / sum|a*rx - tx|^2.  Any fixed complex gain or
    phase on rx is therefore invisible to the metric.  With
    ``per_polarization`` each row is aligned separately before the
    residuals are pooled, which absorbs the per-polarization phase
    ambiguity of blind equalizers.
    """
    r = rx.symbols
    t = tx.symbols
    if r.size == 0 or t.size == 0:
        raise ValueError("effective_snr needs non-empty frames")
    if r.shape != t.shape:
        raise ValueError(f"frame shapes differ: {r.shape} vs {t.shape}")

    pairs = zip(r, t) if per_polarization else [(r.reshape(-1), t.reshape(-1))]
    sig_e = 0.0
    res_e = 0.0
    for rr, tt in pairs:
        denom = np.sum(np.abs(rr) ** 2)
        a = np.sum(np.conj(rr) * tt) / denom if denom > 0 else 0.0
        sig_e += np.sum(np.abs(tt) ** 2)
        res_e += np.sum(np.abs(a * rr - tt) ** 2)
    if res_e == 0.0:
        return SNR_CAP_DB
    return 10.0 * np.log10(sig_e / res_e)
