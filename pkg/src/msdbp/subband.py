"""Filter-bank subband processing with MIMO intensity coupling.

A wideband signal is split into S spectral slices by a DFT-modulated
analysis bank (real symmetric prototype, matched synthesis bank,
integer decimation with an oversampling margin).  The modified
split-step receiver then runs per-subband CD filters whose taps absorb
both the in-band dispersion and the inter-band walk-off, while the
nonlinear phase of every subband is driven by ALL subband intensity
waveforms through an S x S x L real tensor (cross-phase coupling; no
phase information is exchanged between bands).  The tensor can be
replaced by a cascade of sparse stages whose composition is checked
against the equivalent dense tensor by impulse probing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import FiberParams
from .dbp import ls_cd_fir
from .errors import ConfigError
from .signals import ComplexSignal, SamplingGrid, rrc_taps


@dataclass(frozen=True)
class FilterBankConfig:
    """Uniform DFT-modulated bank: S channels spaced sample_rate/S apart.

    ``oversample`` is the integer per-subband oversampling target; the
    decimation actually used is ceil(S/oversample), so the realized
    ratio S/D lies in [oversample/2, oversample].  The prototype is an
    RRC on the channel spacing whose roll-off is the guard fraction of
    the channel width.
    """

    n_subbands: int
    prototype: np.ndarray
    oversample: int = 2
    guard_band_fraction: float = 0.2

    def __post_init__(self):
        if self.n_subbands < 2:
            raise ConfigError(f"need at least 2 subbands, got {self.n_subbands}")
        if self.oversample < 1:
            raise ConfigError("oversample must be an integer >= 1")
        p = np.asarray(self.prototype, dtype=np.float64)
        object.__setattr__(self, "prototype", p)
        if not np.allclose(p, p[::-1], atol=0.0):
            raise ConfigError("prototype must be exactly symmetric")

    @property
    def decimation(self) -> int:
        return max(1, -(-self.n_subbands // self.oversample))

    def center_offsets(self, sample_rate: float) -> np.ndarray:
        """Subband center frequencies in Hz, symmetric about baseband."""
        s = self.n_subbands
        return (np.arange(s) - (s - 1) / 2.0) * sample_rate / s


def design_prototype(n_subbands: int, sample_rate_ignored: float = 0.0,
                     span_channels: int = 24, guard_band_fraction: float = 0.2) -> np.ndarray:
    """RRC prototype on the channel spacing, normalized for unit
    analysis+synthesis round-trip gain (sum of squared shifted channel
    responses equals one)."""
    taps = rrc_taps(guard_band_fraction, span_channels, n_subbands)
    n = len(taps)
    grid = 8192
    h = np.fft.fft(taps, grid)
    k = np.arange(n_subbands) * (grid // n_subbands)
    c = np.sum(np.abs(h[k]) ** 2)
    return taps / np.sqrt(c)


def make_filter_bank(n_subbands: int, oversample: int = 2,
                     guard_band_fraction: float = 0.2, span_channels: int = 24) -> FilterBankConfig:
    proto = design_prototype(n_subbands, 0.0, span_channels, guard_band_fraction)
    return FilterBankConfig(n_subbands, proto, oversample, guard_band_fraction)


@dataclass(frozen=True)
class SubbandFrame:
    """S decimated complex waveforms on a common grid.

    ``pad`` samples were appended to the wideband input so its length
    divides the decimation; merge removes them again.
    """

    bands: np.ndarray            # (S, n) complex
    sample_rate: float           # per-subband rate, Hz
    centers: tuple               # per-subband center offsets at the wideband rate, Hz
    decimation: int
    parent_length: int
    pad: int
    delay: int = 0               # inherited wideband front-end delay, in wideband samples
    parent_sps: int = 1          # wideband samples per symbol, for re-wrapping after merge

    def __post_init__(self):
        object.__setattr__(self, "bands", np.asarray(self.bands, dtype=np.complex128))
        if self.bands.ndim != 2:
            raise ValueError("bands must be a (S, n) array")


# ---------------------------------------------------------------------------
# analysis / synthesis


def split(sig: ComplexSignal, cfg: FilterBankConfig) -> SubbandFrame:
    """Analysis bank: downshift each channel, prototype filter, decimate.

    Signals whose length does not divide the decimation are zero-padded
    (never truncated) and the pad is recorded on the frame.
    """
    if sig.dual_pol:
        raise ConfigError("subband processing operates on single-polarization signals")
    d = cfg.decimation
    u = sig.pol_x
    pad = (-len(u)) % d
    if pad:
        u = np.concatenate([u, np.zeros(pad, dtype=np.complex128)])
    fs = sig.grid.sample_rate
    n = np.arange(len(u))
    centers = cfg.center_offsets(fs)
    bands = []
    for f_k in centers:
        v = u * np.exp(-2j * np.pi * f_k / fs * n)
        w = ad.conv_same(v, cfg.prototype)
        bands.append(w[::d])
    return SubbandFrame(np.stack(bands), fs / d, tuple(centers), d,
                        parent_length=sig.grid.n_samples, pad=pad, delay=sig.delay,
                        parent_sps=sig.grid.samples_per_symbol)


def merge(frame: SubbandFrame, cfg: FilterBankConfig) -> ComplexSignal:
    """Matched synthesis bank; exact structural inverse of split.

    Zero-stuff each subband back to the wideband rate, filter with the
    same prototype (gain D to undo the stuffing loss), upshift, sum.
    Analysis and synthesis both use "same" centered convolutions, so
    the declared round-trip group delay is zero.
    """
    if len(frame.centers) != cfg.n_subbands or frame.decimation != cfg.decimation:
        raise ConfigError("frame does not match this filter-bank configuration")
    d = frame.decimation
    n_wide = frame.parent_length + frame.pad
    fs = frame.sample_rate * d
    n = np.arange(n_wide)
    out = np.zeros(n_wide, dtype=np.complex128)
    for k, f_k in enumerate(frame.centers):
        up = ad.upsample(frame.bands[k], d, n_wide)
        w = ad.conv_same(up, cfg.prototype * d)
        out = out + w * np.exp(2j * np.pi * f_k / fs * n)
    out = out[:frame.parent_length]
    grid = SamplingGrid(fs, frame.parent_length, frame.parent_sps)
    return ComplexSignal(grid, out, delay=frame.delay)


def merge_arrays(bands: list, frame: SubbandFrame, cfg: FilterBankConfig):
    """Graph-friendly merge over per-subband arrays or autodiff nodes."""
    d = frame.decimation
    n_wide = frame.parent_length + frame.pad
    fs = frame.sample_rate * d
    n = np.arange(n_wide)
    out = None
    for k, f_k in enumerate(frame.centers):
        up = ad.upsample(bands[k], d, n_wide)
        w = ad.conv_same(up, cfg.prototype * d)
        m = ad.mul(w, np.exp(2j * np.pi * f_k / fs * n))
        out = m if out is None else ad.add(out, m)
    return ad.take(out, 0, frame.parent_length)


# ---------------------------------------------------------------------------
# MIMO intensity coupling


@dataclass(frozen=True)
class MimoIntensityTensor:
    """Real S x S x L tensor coupling subband intensities to phases."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64)
        object.__setattr__(self, "coefficients", c)
        if c.ndim != 3 or c.shape[0] != c.shape[1]:
            raise ValueError(f"expected (S, S, L) tensor, got {c.shape}")
        if c.shape[2] % 2 == 0:
            raise ValueError("tap axis length must be odd")

    @property
    def n_subbands(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_taps(self) -> int:
        return self.coefficients.shape[2]

    @property
    def center(self) -> int:
        return (self.n_taps - 1) // 2


@dataclass(frozen=True)
class TensorCascade:
    """Ordered sparse MIMO stages applied in sequence to the intensities."""

    stages: tuple

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("cascade needs at least one stage")
        s = self.stages[0].n_subbands
        if any(st.n_subbands != s for st in self.stages):
            raise ValueError("cascade stages disagree on subband count")

    @property
    def composed_length(self) -> int:
        return sum(st.n_taps - 1 for st in self.stages) + 1


def coupled_phase(frame_or_power, tensor: MimoIntensityTensor):
    """Per-subband phase waveforms phi_i[n] = sum_jk c[i,j,k] P_j[n-k+c].

    Accepts a SubbandFrame (intensities taken as |band|^2) or a raw
    (S, N) real power array / autodiff node; linear in the powers.
    """
    p = ad.abs2(frame_or_power.bands) if isinstance(frame_or_power, SubbandFrame) else frame_or_power
    if ad.value_of(p).shape[0] != tensor.n_subbands:
        raise ValueError("subband count mismatch between frame and tensor")
    return ad.mimo_conv(p, tensor.coefficients)


def cascade_phase(frame_or_power, cascade: TensorCascade):
    """Intensities through stage 1, its output through stage 2, etc."""
    x = ad.abs2(frame_or_power.bands) if isinstance(frame_or_power, SubbandFrame) else frame_or_power
    for stage in cascade.stages:
        x = ad.mimo_conv(x, stage.coefficients)
    return x


def compose_cascade_dense(cascade: TensorCascade) -> MimoIntensityTensor:
    """Equivalent dense tensor of a cascade, built by impulse probing."""
    s = cascade.stages[0].n_subbands
    l_total = cascade.composed_length
    n = 2 * l_total + 1
    center = l_total
    dense = np.zeros((s, s, l_total))
    for j in range(s):
        impulse = np.zeros((s, n))
        impulse[j, center] = 1.0
        out = impulse
        for stage in cascade.stages:
            out = ad.mimo_conv(out, stage.coefficients)
        c_out = (l_total - 1) // 2
        dense[:, j, :] = out[:, center - c_out:center - c_out + l_total]
    return MimoIntensityTensor(dense)


def sparsity_report(cascade_or_tensor) -> dict:
    """Exact zero count over all coefficients."""
    if isinstance(cascade_or_tensor, TensorCascade):
        arrays = [st.coefficients for st in cascade_or_tensor.stages]
    else:
        arrays = [cascade_or_tensor.coefficients]
    zeros = sum(int(np.sum(a == 0.0)) for a in arrays)
    total = sum(a.size for a in arrays)
    return {"zeros": zeros, "total": total, "fraction": zeros / total if total else 0.0}


# ---------------------------------------------------------------------------
# the modified split-step receiver


@dataclass(frozen=True)
class SubbandStep:
    """Per-subband CD/walk-off filters plus one coupling (tensor or cascade)."""

    taps: tuple          # S complex tap vectors (walk-off breaks tap symmetry)
    coupling: object     # MimoIntensityTensor or TensorCascade


@dataclass(frozen=True)
class SubbandDbpModel:
    steps: tuple
    n_subbands: int
    subband_rate: float

    def __post_init__(self):
        for st in self.steps:
            if len(st.taps) != self.n_subbands:
                raise ValueError("per-subband tap list length mismatch")


def coupling_stages(coupling) -> list:
    """Coefficient arrays of a coupling: one for a dense tensor, several
    for a cascade.  Plain lists of arrays/nodes pass through untouched
    (the training path supplies those)."""
    if isinstance(coupling, TensorCascade):
        return [st.coefficients for st in coupling.stages]
    if isinstance(coupling, MimoIntensityTensor):
        return [coupling.coefficients]
    return list(coupling)


def subband_core(bands: list, steps: list):
    """Shared forward pass over per-subband arrays or autodiff nodes.

    ``steps`` entries are (taps_list, coupling); each step filters
    every subband, then rotates u_i by -phi_i with phi from the chained
    intensity coupling stages.  Rotations preserve per-sample
    magnitudes.
    """
    for taps_list, coupling in steps:
        bands = [ad.conv_same(u, taps_list[i]) for i, u in enumerate(bands)]
        phi = ad.stack_rows([ad.abs2(u) for u in bands])
        for coeffs in coupling_stages(coupling):
            phi = ad.mimo_conv(phi, coeffs)
        bands = [ad.rotate(u, ad.row(phi, i), sign=-1.0) for i, u in enumerate(bands)]
    return bands


def subband_dbp_forward(frame: SubbandFrame, model: SubbandDbpModel) -> SubbandFrame:
    """Evaluation path of the subband receiver."""
    if frame.bands.shape[0] != model.n_subbands:
        raise ConfigError("frame/model subband count mismatch")
    steps = [(st.taps, st.coupling) for st in model.steps]
    bands = subband_core([frame.bands[i] for i in range(model.n_subbands)], steps)
    return SubbandFrame(np.stack([ad.value_of(b) for b in bands]), frame.sample_rate,
                        frame.centers, frame.decimation, frame.parent_length, frame.pad,
                        frame.delay, frame.parent_sps)


def init_subband_model(fiber: FiberParams, frame: SubbandFrame, n_steps: int,
                       taps_per_subband: int, coupling_taps: int,
                       cascade_lengths: tuple | None = None,
                       fit_band: float = 0.8, xpm_factor: float = 2.0) -> SubbandDbpModel:
    """Physical initializer for the subband receiver.

    Per-subband filters are LS fits of each band's inverse dispersion
    including its walk-off group delay; couplings start at the analytic
    Kerr values (gamma*L_eff self term, ``xpm_factor`` times that for
    cross terms).  With ``cascade_lengths`` the coupling becomes a
    cascade whose first stage holds the physical tensor and later
    stages start as identity passthroughs.
    """
    s = frame.bands.shape[0]
    z_step = fiber.total_length / n_steps
    from .dbp import _segment_effective_lengths
    l_eff = _segment_effective_lengths(fiber, n_steps)[::-1]
    steps = []
    for i in range(n_steps):
        taps = tuple(
            ls_cd_fir(fiber.beta2, z_step, frame.sample_rate, taps_per_subband,
                      freq_offset=frame.centers[k], fit_band=fit_band)
            for k in range(s))
        gamma_eff = fiber.gamma * l_eff[i]
        if cascade_lengths is None:
            c = np.zeros((s, s, coupling_taps))
            c[:, :, (coupling_taps - 1) // 2] = gamma_eff * (
                xpm_factor * np.ones((s, s)) - (xpm_factor - 1.0) * np.eye(s))
            coupling = MimoIntensityTensor(c)
        else:
            stages = []
            for si, ln in enumerate(cascade_lengths):
                c = np.zeros((s, s, ln))
                if si == 0:
                    c[:, :, (ln - 1) // 2] = gamma_eff * (
                        xpm_factor * np.ones((s, s)) - (xpm_factor - 1.0) * np.eye(s))
                else:
                    c[:, :, (ln - 1) // 2] = np.eye(s)
                stages.append(MimoIntensityTensor(c))
            coupling = TensorCascade(tuple(stages))
        steps.append(SubbandStep(taps, coupling))
    return SubbandDbpModel(tuple(steps), s, frame.sample_rate)
