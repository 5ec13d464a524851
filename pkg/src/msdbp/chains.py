"""End-to-end transmit/receive pipelines shared by the CLI and tests.

A ChainSpec pins the modulation, pulse shaping, rates and guard
handling of an experiment; this module generates transmit frames,
pushes them through the channel, resamples to the receiver grid, and
builds the training problems (loss graphs) and evaluation paths for
the three receiver families: plain multi-step DBP, subband DBP with
MIMO intensity coupling, and the PMD compensation chains.

Frames carry everything the receivers need: waveforms on the receiver
grid, transmitted symbols, the recorded group delay, and the scalar
chain gain that maps transmitted symbols onto received symbol
amplitudes (launch scaling times the shaping/matched-filter gain), so
losses compare like with like.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import training
from .channel import AmplifierConfig, FiberParams, PmdLink, cd_operator, propagate
from .dbp import DbpModel, DbpStep, FoldedFir, dbp_core, dbp_forward, fd_reference_dbp
from .errors import ConfigError
from .signals import (ComplexSignal, SamplingGrid, SymbolFrame, constellation,
                      effective_snr, matched_filter_downsample, qam_map, random_symbols,
                      resample_down, rrc_taps, shape)
from .subband import (FilterBankConfig, SubbandDbpModel, SubbandFrame, SubbandStep,
                      MimoIntensityTensor, TensorCascade, merge_arrays, split,
                      subband_core, subband_dbp_forward)


@dataclass(frozen=True)
class ChainSpec:
    """Transmitter/receiver frame conventions of one experiment."""

    symbol_rate: float = 10e9
    tx_sps: int = 8
    rx_sps: int = 2
    n_symbols: int = 1024
    guard_symbols: int = 96
    rolloff: float = 0.1
    span_symbols: int = 32
    modulation_order: int = 16
    n_pol: int = 1

    def __post_init__(self):
        if self.tx_sps % self.rx_sps:
            raise ConfigError("tx_sps must be an integer multiple of rx_sps")
        if 2 * self.guard_symbols >= self.n_symbols:
            raise ConfigError("guard symbols leave no frame interior")
        if self.n_pol not in (1, 2):
            raise ConfigError("n_pol must be 1 or 2")

    @property
    def rx_rate(self) -> float:
        return self.symbol_rate * self.rx_sps

    def tx_taps(self) -> np.ndarray:
        t = rrc_taps(self.rolloff, self.span_symbols, self.tx_sps)
        return t / np.sqrt(np.sum(t * t))

    def rx_taps(self) -> np.ndarray:
        t = rrc_taps(self.rolloff, self.span_symbols, self.rx_sps)
        return t / np.sqrt(np.sum(t * t))


def chain_symbol_gain(chain: ChainSpec) -> complex:
    """Back-to-back symbol gain of shape -> resample -> matched filter.

    Measured once on an isolated unit symbol; deterministic for a given
    chain, used to calibrate received symbols onto the transmit scale.
    """
    n = 4 * chain.span_symbols
    idx = np.zeros((1, n), dtype=int)
    syms = qam_map(idx, 4).symbols.copy()
    syms[:] = 0.0
    syms[0, n // 2] = 1.0
    frame = SymbolFrame(syms, modulation_order=None, normalized=False)
    tx = shape(frame, chain.tx_sps, chain.tx_taps(), symbol_rate=chain.symbol_rate)
    rx = resample_down(tx, chain.tx_sps // chain.rx_sps)
    out = matched_filter_downsample(rx, chain.rx_taps(), rx.delay)
    return complex(out.symbols[0, n // 2])


@dataclass
class RxFrame:
    """One simulated frame on the receiver grid."""

    tx_symbols: np.ndarray      # (n_pol, n_symbols) complex
    rx_pols: tuple              # receiver-grid waveforms, one per polarization
    delay: int                  # rx-grid samples to the first symbol center
    sym_scale: complex          # received-symbol amplitude per unit tx symbol
    rx_rate: float
    rx_sps: int
    seed: int

    def rx_signal(self) -> ComplexSignal:
        grid = SamplingGrid(self.rx_rate, len(self.rx_pols[0]), self.rx_sps)
        return ComplexSignal(grid, self.rx_pols[0],
                             self.rx_pols[1] if len(self.rx_pols) == 2 else None,
                             delay=self.delay)


def simulate_frame(chain: ChainSpec, fiber: FiberParams, power_dbm: float, seed: int,
                   amp: AmplifierConfig | None = None, pmd: PmdLink | None = None,
                   steps_per_span: int = 50, frame_index: int = 0) -> RxFrame:
    """Generate one (tx symbols, receiver waveform) pair.

    The launch scale targets ``power_dbm`` total power (all
    polarizations) from the frame's own measured mean power, which
    keeps it deterministic per seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5b]))
    syms = random_symbols(rng, chain.n_symbols, chain.modulation_order, chain.n_pol)
    tx = shape(syms, chain.tx_sps, chain.tx_taps(), symbol_rate=chain.symbol_rate)
    p_target = 1e-3 * 10.0 ** (power_dbm / 10.0)
    scale = np.sqrt(p_target / tx.mean_power)
    tx = tx.with_pols(*[u * scale for u in tx.pols()])
    rx_wide = propagate(tx, fiber, pmd=pmd, amp=amp, steps_per_span=steps_per_span,
                        frame_index=frame_index)
    rx = resample_down(rx_wide, chain.tx_sps // chain.rx_sps)
    g0 = chain_symbol_gain(chain)
    return RxFrame(syms.symbols, tuple(rx.pols()), rx.delay, scale * g0,
                   chain.rx_rate, chain.rx_sps, seed)


def recover_symbols(out: ComplexSignal, chain: ChainSpec) -> SymbolFrame:
    fr = matched_filter_downsample(out, chain.rx_taps(), out.delay)
    return SymbolFrame(fr.symbols[:, :chain.n_symbols], normalized=False)


def frame_snr(out: ComplexSignal, frame: RxFrame, chain: ChainSpec,
              per_polarization: bool = False) -> float:
    """Effective SNR of a receiver output against the frame's tx symbols."""
    rx = recover_symbols(out, chain)
    g = chain.guard_symbols
    rx_i = rx.interior(g)
    tx_i = SymbolFrame(frame.tx_symbols, normalized=False).interior(g)
    return effective_snr(rx_i, tx_i, per_polarization=per_polarization)


# ---------------------------------------------------------------------------
# receiver evaluation paths


def linear_receiver(frame: RxFrame, fiber: FiberParams) -> ComplexSignal:
    """Chromatic-dispersion-only compensation (the linear equalizer)."""
    return cd_operator(frame.rx_signal(), fiber.beta2, fiber.total_length, "backward")


def fd_dbp_receiver(frame: RxFrame, fiber: FiberParams, steps_per_span: int = 1) -> ComplexSignal:
    return fd_reference_dbp(frame.rx_signal(), fiber, steps_per_span)


def dbp_receiver(frame: RxFrame, model: DbpModel) -> ComplexSignal:
    return dbp_forward(frame.rx_signal(), model)


def mean_snr(frames, chain: ChainSpec, receiver, per_polarization: bool = False) -> float:
    vals = [frame_snr(receiver(f), f, chain, per_polarization) for f in frames]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# plain DBP training


def dbp_param_set(model: DbpModel) -> training.ParamSet:
    """Half taps as real/imaginary pairs plus the nonlinear scale, per step."""
    params: training.ParamSet = {}
    for i, st in enumerate(model.steps):
        params[f"step{i:02d}.re"] = st.filter.half_taps.real.copy()
        params[f"step{i:02d}.im"] = st.filter.half_taps.imag.copy()
        params[f"step{i:02d}.nl"] = np.array([st.nl_scale])
    return params


def dbp_model_from_params(params: training.ParamSet, template: DbpModel) -> DbpModel:
    steps = []
    for i, st in enumerate(template.steps):
        half = params[f"step{i:02d}.re"] + 1j * params[f"step{i:02d}.im"]
        steps.append(DbpStep(FoldedFir(half, st.filter.full_length),
                             float(params[f"step{i:02d}.nl"][0])))
    return DbpModel(tuple(steps), template.samples_per_symbol, template.sample_rate,
                    template.fiber, template.seed)


def _symbol_pickoff(nodes_pols, frame: RxFrame, chain: ChainSpec, rx_taps: np.ndarray):
    """Matched filter, symbol-rate pick-off, gain calibration, guard trim."""
    g = chain.guard_symbols
    inv = 1.0 / frame.sym_scale
    syms = []
    for u in nodes_pols:
        filt = ad.conv_same(u, rx_taps)
        s = ad.downsample(filt, frame.delay, chain.rx_sps, chain.n_symbols)
        syms.append(ad.take(ad.mul(s, inv), g, chain.n_symbols - g))
    return syms


def build_dbp_problem(template: DbpModel, frames, chain: ChainSpec) -> training.TrainProblem:
    """Supervised MSE problem over the model's taps and nonlinear scales."""
    rx_taps = chain.rx_taps()
    lengths = [st.filter.full_length for st in template.steps]
    n_steps = len(lengths)
    g = chain.guard_symbols

    def build_loss(nodes, batch):
        total = None
        for idx in batch:
            frame = frames[int(idx)]
            steps = []
            for i in range(n_steps):
                half = ad.complex_pair(nodes[f"step{i:02d}.re"], nodes[f"step{i:02d}.im"])
                steps.append((ad.mirror_expand(half, lengths[i]), nodes[f"step{i:02d}.nl"]))
            pols = dbp_core(list(frame.rx_pols), steps)
            syms = _symbol_pickoff(pols, frame, chain, rx_taps)
            tx = frame.tx_symbols
            term = None
            for p, s in enumerate(syms):
                m = training.mse_loss(s, tx[p, g:chain.n_symbols - g])
                term = m if term is None else ad.add(term, m)
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, 1.0 / len(batch))

    return training.TrainProblem(dbp_param_set(template), build_loss, len(frames))


# ---------------------------------------------------------------------------
# subband DBP training


def subband_frames(frames, bank: FilterBankConfig):
    """Split each frame's waveform once; training reuses the cached bands."""
    return [split(f.rx_signal(), bank) for f in frames]


def subband_param_set(model: SubbandDbpModel) -> training.ParamSet:
    params: training.ParamSet = {}
    for i, st in enumerate(model.steps):
        for k, taps in enumerate(st.taps):
            params[f"sb{i:02d}.b{k}.re"] = np.asarray(taps).real.copy()
            params[f"sb{i:02d}.b{k}.im"] = np.asarray(taps).imag.copy()
        if isinstance(st.coupling, TensorCascade):
            for si, stage in enumerate(st.coupling.stages):
                params[f"sb{i:02d}.mimo{si}"] = stage.coefficients.copy()
        else:
            params[f"sb{i:02d}.mimo0"] = st.coupling.coefficients.copy()
    return params


def subband_model_from_params(params: training.ParamSet, template: SubbandDbpModel) -> SubbandDbpModel:
    steps = []
    for i, st in enumerate(template.steps):
        taps = tuple(params[f"sb{i:02d}.b{k}.re"] + 1j * params[f"sb{i:02d}.b{k}.im"]
                     for k in range(len(st.taps)))
        if isinstance(st.coupling, TensorCascade):
            stages = tuple(MimoIntensityTensor(params[f"sb{i:02d}.mimo{si}"])
                           for si in range(len(st.coupling.stages)))
            coupling = TensorCascade(stages)
        else:
            coupling = MimoIntensityTensor(params[f"sb{i:02d}.mimo0"])
        steps.append(SubbandStep(taps, coupling))
    return SubbandDbpModel(tuple(steps), template.n_subbands, template.subband_rate)


def build_subband_problem(template: SubbandDbpModel, frames, bands, chain: ChainSpec,
                          bank: FilterBankConfig) -> training.TrainProblem:
    """Supervised MSE over per-subband taps and coupling tensors.

    ``bands`` are the pre-split SubbandFrames matching ``frames``; the
    loss merges the processed bands back to the wideband grid before
    the matched filter, so gradients flow through the synthesis bank.
    """
    rx_taps = chain.rx_taps()
    s = template.n_subbands
    n_casc = [len(st.coupling.stages) if isinstance(st.coupling, TensorCascade) else 1
              for st in template.steps]
    g = chain.guard_symbols

    def build_loss(nodes, batch):
        total = None
        for idx in batch:
            frame, sub = frames[int(idx)], bands[int(idx)]
            steps = []
            for i in range(len(template.steps)):
                taps = [ad.complex_pair(nodes[f"sb{i:02d}.b{k}.re"], nodes[f"sb{i:02d}.b{k}.im"])
                        for k in range(s)]
                coupling = [nodes[f"sb{i:02d}.mimo{si}"] for si in range(n_casc[i])]
                steps.append((taps, coupling))
            out_bands = subband_core([sub.bands[k] for k in range(s)], steps)
            wide = merge_arrays(out_bands, sub, bank)
            syms = _symbol_pickoff([wide], frame, chain, rx_taps)
            term = training.mse_loss(syms[0], frame.tx_symbols[0, g:chain.n_symbols - g])
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, 1.0 / len(batch))

    return training.TrainProblem(subband_param_set(template), build_loss, len(frames))


def subband_receiver(frame_band: SubbandFrame, model: SubbandDbpModel,
                     bank: FilterBankConfig) -> ComplexSignal:
    from .subband import merge
    return merge(subband_dbp_forward(frame_band, model), bank)


# ---------------------------------------------------------------------------
# PMD chains


def cd_compensated_frames(frames, fiber: FiberParams):
    """Bake the (fixed, exact) CD compensation into copies of the frames."""
    out = []
    for f in frames:
        sig = linear_receiver(f, fiber)
        out.append(RxFrame(f.tx_symbols, tuple(sig.pols()), f.delay, f.sym_scale,
                           f.rx_rate, f.rx_sps, f.seed))
    return out


def pmd_blocks(frames, chain: ChainSpec):
    """Adaptation blocks for pmd.adapt, one per frame interior."""
    g = chain.guard_symbols
    blocks = []
    for f in frames:
        blocks.append({
            "rx_x": f.rx_pols[0],
            "rx_y": f.rx_pols[1],
            "sym_start": f.delay + g * chain.rx_sps,
            "sym_step": chain.rx_sps,
            "n_sym": chain.n_symbols - 2 * g,
            "scale": f.sym_scale,
            "tx_x": f.tx_symbols[0, g:chain.n_symbols - g],
            "tx_y": f.tx_symbols[1, g:chain.n_symbols - g],
        })
    return blocks


def pmd_chain_receiver(frame: RxFrame, stages, rotation_first: bool = False) -> ComplexSignal:
    from .pmd import pmd_comp_forward
    return pmd_comp_forward(frame.rx_signal(), stages, rotation_first)


def mimo_receiver(frame: RxFrame, w) -> ComplexSignal:
    from .pmd import mimo_fir_apply
    return mimo_fir_apply(frame.rx_signal(), w)
