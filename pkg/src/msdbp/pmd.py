"""Multi-step PMD compensation and the conventional MIMO baseline.

The multi-step compensator mirrors the reverse of the section-wise
link model: each stage convolves both polarizations with one short
real fractional-delay filter (pol-y sees the reversed tap sequence, so
a single parameter set encodes opposite group delays on the two
polarizations) and then applies a memoryless determinant-one unitary
rotation parameterized by three angles.  The baseline is the usual
4 x 4 real MIMO filter acting on the separated real/imaginary parts.
Both adapt by SGD, supervised on pilots or blind via the
constant-modulus cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import training
from .errors import ConfigError
from .signals import ComplexSignal


@dataclass(frozen=True)
class RotationParams:
    """Three angles (mixing, phase-1, phase-2) of a det-1 unitary."""

    angles: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=np.float64)
        object.__setattr__(self, "angles", a)
        if a.shape != (3,):
            raise ValueError(f"expected 3 angles, got shape {a.shape}")


def rotation_matrix(p) -> np.ndarray:
    """2x2 complex unitary with determinant one; smooth in the angles."""
    angles = p.angles if isinstance(p, RotationParams) else np.asarray(p, dtype=np.float64)
    return ad.su2_matrix(angles)


def fd_design(delta: float, length: int) -> "FdFilter":
    """Lagrange fractional-delay design of order length-1.

    Interpolates at (length-1)//2 + delta samples (the same integer
    center convention the convolutions use); exact for integer delays,
    DC gain exactly one (the weights interpolate the constant 1).
    """
    if length < 1:
        raise ConfigError(f"filter length must be >= 1, got {length}")
    if abs(delta) > (length - 1) / 2 + 1e-12:
        raise ValueError(f"delay {delta} outside +-{(length - 1) / 2} for {length} taps")
    center = (length - 1) // 2
    d = center + delta
    taps = np.ones(length)
    for k in range(length):
        for m in range(length):
            if m != k:
                taps[k] *= (d - m) / (k - m)
    return FdFilter(taps, delta)


@dataclass(frozen=True)
class FdFilter:
    """Real fractional-delay taps; ``delta`` is the nominal design delay."""

    taps: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", t)
        if t.ndim != 1 or len(t) < 1:
            raise ValueError("taps must be a non-empty 1-D real array")


@dataclass(frozen=True)
class PmdStage:
    """One compensation stage: shared FD filter (flipped for pol-y) + rotation.

    The flip is structural: only one tap sequence is stored, pol-x is
    convolved with it and pol-y with its reversal, realizing opposite
    fractional delays from a single parameter set.
    """

    rotation: RotationParams
    fd: FdFilter


def identity_stage(fd_length: int = 5) -> PmdStage:
    return PmdStage(RotationParams(np.zeros(3)), fd_design(0.0, fd_length))


def pmd_stage_core(pol_x, pol_y, taps, angles, rotation_first: bool = False):
    """Stage forward over arrays or autodiff nodes.

    Default order is FD-then-rotation; both orders generate the same
    model class once stages are composed.
    """
    m = ad.su2_matrix(angles)

    def do_fd(x, y):
        return ad.conv_same(x, taps), ad.conv_same(y, ad.flip(taps))

    def do_rot(x, y):
        out = ad.matmul2(m, ad.stack_rows([x, y]))
        return ad.row(out, 0), ad.row(out, 1)

    if rotation_first:
        pol_x, pol_y = do_rot(pol_x, pol_y)
        return do_fd(pol_x, pol_y)
    pol_x, pol_y = do_fd(pol_x, pol_y)
    return do_rot(pol_x, pol_y)


def pmd_stage_apply(sig: ComplexSignal, stage: PmdStage, rotation_first: bool = False) -> ComplexSignal:
    """Apply one stage to a dual-polarization signal."""
    if not sig.dual_pol:
        raise ValueError("PMD compensation requires a dual-polarization signal")
    x, y = pmd_stage_core(sig.pol_x, sig.pol_y, stage.fd.taps, stage.rotation.angles,
                          rotation_first)
    return sig.with_pols(x, y)


def pmd_comp_forward(sig: ComplexSignal, stages, rotation_first: bool = False) -> ComplexSignal:
    """Stages applied in order; empty list is the identity."""
    out = sig
    for stage in stages:
        out = pmd_stage_apply(out, stage, rotation_first)
    return out


# ---------------------------------------------------------------------------
# conventional baseline: 4x4 real MIMO filter


@dataclass(frozen=True)
class MimoFirBaseline:
    """Real 4x4xL tensor acting on (Re x, Im x, Re y, Im y)."""

    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float64)
        object.__setattr__(self, "tensor", t)
        if t.ndim != 3 or t.shape[:2] != (4, 4):
            raise ValueError(f"expected (4, 4, L) tensor, got {t.shape}")
        if t.shape[2] % 2 == 0:
            raise ValueError("tap axis length must be odd")


def identity_mimo(length: int = 7) -> MimoFirBaseline:
    t = np.zeros((4, 4, length))
    t[np.arange(4), np.arange(4), (length - 1) // 2] = 1.0
    return MimoFirBaseline(t)


def mimo_core(pol_x, pol_y, tensor):
    """4-channel real convolution over arrays or autodiff nodes.

    The complex inputs are constants here (only the tensor learns), so
    the real/imaginary split happens outside the graph.
    """
    xv, yv = ad.value_of(pol_x), ad.value_of(pol_y)
    chans = np.stack([xv.real, xv.imag, yv.real, yv.imag])
    out = ad.mimo_conv(chans, tensor)
    return (ad.complex_pair(ad.row(out, 0), ad.row(out, 1)),
            ad.complex_pair(ad.row(out, 2), ad.row(out, 3)))


def mimo_fir_apply(sig: ComplexSignal, w: MimoFirBaseline) -> ComplexSignal:
    """Apply the 4x4 real MIMO filter to a dual-polarization signal."""
    if not sig.dual_pol:
        raise ValueError("the MIMO baseline requires a dual-polarization signal")
    x, y = mimo_core(sig.pol_x, sig.pol_y, w.tensor)
    return sig.with_pols(ad.value_of(x), ad.value_of(y))


# ---------------------------------------------------------------------------
# parameter packing and adaptation


def stage_params(stages) -> training.ParamSet:
    params: training.ParamSet = {}
    for i, st in enumerate(stages):
        params[f"stage{i:02d}.ang"] = st.rotation.angles.copy()
        params[f"stage{i:02d}.fd"] = st.fd.taps.copy()
    return params


def stages_from_params(params: training.ParamSet, n_stages: int):
    return [PmdStage(RotationParams(params[f"stage{i:02d}.ang"]),
                     FdFilter(params[f"stage{i:02d}.fd"]))
            for i in range(n_stages)]


def mimo_params(w: MimoFirBaseline) -> training.ParamSet:
    return {"mimo.w": w.tensor.copy()}


def mimo_from_params(params: training.ParamSet) -> MimoFirBaseline:
    return MimoFirBaseline(params["mimo.w"])


def build_adapt_problem(model, blocks, mode: str, modulus: float = 1.0,
                        rotation_first: bool = False, mf_taps=None) -> training.TrainProblem:
    """Adaptation problem for either compensator architecture.

    ``model`` is a PmdStage list or a MimoFirBaseline; ``blocks`` is a
    list of dicts with keys rx_x, rx_y (receiver-grid arrays), sym_start,
    sym_step, n_sym (symbol pick-offs), scale (chain gain), and, for
    supervised mode, tx_x/tx_y pilot symbols.  ``mf_taps`` is the
    receiver's matched filter, applied between the compensator and the
    symbol pick-off so adaptation optimizes the actual decision chain.
    """
    if mode not in ("cma", "supervised-mse"):
        raise ConfigError(f"unknown adaptation mode {mode!r}")
    is_mimo = isinstance(model, MimoFirBaseline)
    params0 = mimo_params(model) if is_mimo else stage_params(model)
    n_stages = 0 if is_mimo else len(model)

    def build_loss(nodes, batch):
        total = None
        for idx in batch:
            b = blocks[int(idx)]
            if is_mimo:
                x, y = mimo_core(b["rx_x"], b["rx_y"], nodes["mimo.w"])
            else:
                x, y = b["rx_x"], b["rx_y"]
                for i in range(n_stages):
                    x, y = pmd_stage_core(x, y, nodes[f"stage{i:02d}.fd"],
                                          nodes[f"stage{i:02d}.ang"], rotation_first)
            if mf_taps is not None:
                x = ad.conv_same(x, mf_taps)
                y = ad.conv_same(y, mf_taps)
            inv = 1.0 / b["scale"]
            sx = ad.mul(ad.downsample(x, b["sym_start"], b["sym_step"], b["n_sym"]), inv)
            sy = ad.mul(ad.downsample(y, b["sym_start"], b["sym_step"], b["n_sym"]), inv)
            if mode == "cma":
                term = training.cma_loss([sx, sy], modulus)
            else:
                term = ad.add(training.mse_loss(sx, b["tx_x"]), training.mse_loss(sy, b["tx_y"]))
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, 1.0 / len(batch))

    return training.TrainProblem(params0, build_loss, len(blocks))


def adapt(model, blocks, mode: str, opt: training.OptimizerConfig,
          modulus: float = 1.0, rotation_first: bool = False, mf_taps=None, **train_kwargs):
    """Block-wise SGD adaptation; returns the adapted model and loss trace."""
    is_mimo = isinstance(model, MimoFirBaseline)
    problem = build_adapt_problem(model, blocks, mode, modulus, rotation_first, mf_taps)
    result = training.train(problem, opt, **train_kwargs)
    adapted = mimo_from_params(result.params) if is_mimo \
        else stages_from_params(result.params, len(model))
    return adapted, result.history
