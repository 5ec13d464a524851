"""Multi-step digital backpropagation with short time-domain filters.

The receiver alternates a short complex FIR filter (stored folded,
i.e. only the independent half of a symmetric impulse response) with a
memoryless nonlinear phase rotation whose scale is a learnable
effective gamma*L_eff per step.  Filters are initialized to truncated
least-squares fits of the per-segment inverse dispersion response;
untrained, that initializer doubles as the repeated-truncated-filter
baseline that joint optimization is measured against.

Also here: the complexity accountant (declared rule: a K-tap folded
symmetric complex filter costs 4*ceil(K/2) real multiplications per
output sample, each nonlinear stage a flat constant) and the
frequency-domain-exact split-step reference receiver used as an
accuracy oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import FiberParams, _cd_phase
from .errors import ConfigError
from .signals import ComplexSignal

NONLINEAR_STAGE_REAL_MULTS = 6  # 3 for the intensity, 3 to apply the rotation


@dataclass(frozen=True)
class FoldedFir:
    """Symmetric complex FIR filter stored as its independent half.

    ``half_taps`` holds taps 0..(K-1)/2; the mirrored half is implied.
    K must be odd.
    """

    half_taps: np.ndarray
    full_length: int

    def __post_init__(self):
        h = np.asarray(self.half_taps, dtype=np.complex128)
        object.__setattr__(self, "half_taps", h)
        if self.full_length < 1 or self.full_length % 2 == 0:
            raise ValueError(f"full_length must be odd and positive, got {self.full_length}")
        if len(h) != (self.full_length + 1) // 2:
            raise ValueError(
                f"half_taps has {len(h)} entries, expected {(self.full_length + 1) // 2}")

    def expand(self) -> np.ndarray:
        """Full symmetric tap vector; exact mirror of the stored half."""
        return np.concatenate([self.half_taps, self.half_taps[:-1][::-1]])


def fold(taps) -> FoldedFir:
    """Fold an exactly symmetric odd-length tap vector.

    Asymmetry is not tolerated at all: callers symmetrize first if the
    design produced roundoff-level asymmetry.
    """
    taps = np.asarray(taps, dtype=np.complex128)
    k = len(taps)
    if k % 2 == 0:
        raise ValueError(f"folded filters need an odd tap count, got {k}")
    if not np.array_equal(taps, taps[::-1]):
        raise ValueError("taps are not exactly symmetric")
    return FoldedFir(taps[:(k + 1) // 2].copy(), k)


@dataclass(frozen=True)
class DbpStep:
    """One backpropagation step: folded CD filter + nonlinear scale (rad/W)."""

    filter: FoldedFir
    nl_scale: float


@dataclass(frozen=True)
class DbpModel:
    """Ordered DBP steps plus the link/grid metadata they were built for."""

    steps: tuple[DbpStep, ...]
    samples_per_symbol: int
    sample_rate: float
    fiber: FiberParams | None = None
    seed: int | None = None

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("DbpModel needs at least one step")

    @property
    def tap_counts(self) -> list[int]:
        return [s.filter.full_length for s in self.steps]


# ---------------------------------------------------------------------------
# filtering


def fir_apply(sig: ComplexSignal, f) -> ComplexSignal:
    """Linear convolution with "same" centered alignment.

    Accepts a FoldedFir (expanded exactly before use) or a plain tap
    vector.  Output length equals input length; the (K-1)/2 samples at
    each edge are contaminated by the zero boundary and must be treated
    as guard by the caller.
    """
    taps = f.expand() if isinstance(f, FoldedFir) else np.asarray(f)
    pols = [ad.conv_same(u, taps) for u in sig.pols()]
    return sig.with_pols(*pols)


def dbp_core(pols: list, steps: list):
    """Shared forward pass over plain arrays or autodiff nodes.

    ``steps`` is a list of (full_taps, nl_scale) pairs whose entries
    may be ndarrays (evaluation) or Vars (training).  Each step
    convolves every polarization and applies u <- u*exp(-j*scale*P)
    with P the total instantaneous power across polarizations.
    """
    for taps, nl in steps:
        pols = [ad.conv_same(u, taps) for u in pols]
        if len(pols) == 2:
            p = ad.add(ad.abs2(pols[0]), ad.abs2(pols[1]))
        else:
            p = ad.abs2(pols[0])
        phi = ad.mul(nl, p)
        pols = [ad.rotate(u, phi, sign=-1.0) for u in pols]
    return pols


def dbp_forward(rx: ComplexSignal, model: DbpModel) -> ComplexSignal:
    """Run the multi-step receiver (deterministic evaluation path)."""
    if rx.grid.samples_per_symbol != model.samples_per_symbol:
        raise ConfigError(
            f"signal at {rx.grid.samples_per_symbol} samples/symbol, model built for "
            f"{model.samples_per_symbol}")
    steps = [(s.filter.expand(), s.nl_scale) for s in model.steps]
    return rx.with_pols(*dbp_core(list(rx.pols()), steps))


# ---------------------------------------------------------------------------
# initialization: truncated least-squares inverse-CD filters


def ls_cd_fir(beta2: float, z: float, sample_rate: float, n_taps: int,
              freq_offset: float = 0.0, fit_band: float = 1.0,
              max_oob_gain: float = 1.3, grid_points: int = 1024) -> np.ndarray:
    """Least-squares FIR fit of the inverse-CD response, gain-capped.

    Fits exp(+j*(beta2/2)*(w + w_off)^2 * z) over the in-band grid
    |f| <= fit_band * sample_rate/2.  If the unconstrained solution
    exceeds ``max_oob_gain`` anywhere outside that band, an out-of-band
    energy penalty is bisected until the peak gain meets the cap:
    short truncated filters otherwise develop large out-of-band gain
    that explodes multiplicatively in long cascades.  beta2 in ps^2/km,
    z in km, ``freq_offset`` in Hz (subband designs; it also brings in
    the walk-off group delay of the band).
    """
    if n_taps < 1:
        raise ConfigError(f"n_taps must be >= 1, got {n_taps}")
    f = np.linspace(-0.5, 0.5, grid_points, endpoint=False) * sample_rate
    w = 2.0 * np.pi * f
    w_abs = w + 2.0 * np.pi * freq_offset
    in_band = np.abs(f) <= 0.5 * fit_band * sample_rate
    target = np.exp(0.5j * beta2 * 1e-24 * w_abs ** 2 * z)
    c = (n_taps - 1) // 2
    k = np.arange(n_taps) - c
    basis = np.exp(-1j * np.outer(w / sample_rate, k))
    return _capped_lstsq(basis[in_band], target[in_band], basis[~in_band], max_oob_gain)


def _capped_lstsq(a_in, t_in, a_out, max_oob_gain: float) -> np.ndarray:
    """min |a_in h - t_in|^2 subject to max |a_out h| <= cap (bisected penalty)."""

    def solve(lam):
        if len(a_out) == 0 or lam == 0.0:
            taps, *_ = np.linalg.lstsq(a_in, t_in, rcond=None)
            return taps
        rows = np.concatenate([a_in, np.sqrt(lam) * a_out])
        rhs = np.concatenate([t_in, np.zeros(len(a_out))])
        taps, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
        return taps

    def oob_peak(taps):
        return np.max(np.abs(a_out @ taps)) if len(a_out) else 0.0

    taps = solve(0.0)
    if oob_peak(taps) <= max_oob_gain:
        return taps
    lo, hi = 1e-8, 1e3
    for _ in range(60):
        lam = np.sqrt(lo * hi)
        taps = solve(lam)
        if oob_peak(taps) > max_oob_gain:
            lo = lam
        else:
            hi = lam
    return solve(hi)


def linear_warm_start(template: DbpModel, iterations: int = 6000, step_size: float = 2e-3,
                      fit_band: float = 0.56, oob_weight: float = 0.2,
                      anchor_start: float = 0.3, anchor_end: float = 1e-4,
                      grid_points: int = 1024) -> DbpModel:
    """Frequency-domain warm start for the training recipe.

    Adam on the in-band error of the composed response prod_i H_i(w)
    against the full-link inverse dispersion, plus an annealed anchor
    pulling every step toward its own dispersion segment's inverse.
    The anchor keeps each filter spatially meaningful (the nonlinear
    rotations between filters act on partially backpropagated fields),
    while its decay lets the product term balance the individual
    truncation errors, which is where repeated identical truncated
    filters lose.  Out-of-band the composed magnitude is penalized
    above one.  Nonlinear scales are left at their physical values; SGD
    on data does the rest.  Never used for the untrained baseline.
    """
    fiber = template.fiber
    if fiber is None:
        raise ConfigError("linear_warm_start needs the model's fiber metadata")
    fs = template.sample_rate
    f = np.linspace(-0.5, 0.5, grid_points, endpoint=False) * fs
    w = 2.0 * np.pi * f
    in_band = np.abs(f) <= 0.5 * fit_band * fs
    target = np.exp(0.5j * fiber.beta2 * 1e-24 * w ** 2 * fiber.total_length)

    halves = [st.filter.half_taps.copy() for st in template.steps]
    lengths = [st.filter.full_length for st in template.steps]
    z_alloc = _dispersion_allocation(lengths, fiber.total_length)
    anchors = [np.exp(0.5j * fiber.beta2 * 1e-24 * w ** 2 * z) for z in z_alloc]
    bases = []
    for k in lengths:
        c = (k - 1) // 2
        cols = [2.0 * np.cos(w / fs * (c - m)) for m in range(c)] + [np.ones_like(w)]
        bases.append(np.stack(cols, axis=1))

    n = len(halves)
    m_state = [np.zeros_like(h) for h in halves]
    v_state = [np.zeros(h.shape) for h in halves]
    n_in = int(np.sum(in_band))
    decay = (anchor_end / anchor_start) ** (1.0 / max(1, iterations - 1))
    for t in range(1, iterations + 1):
        mu = anchor_start * decay ** (t - 1)
        resp = [b @ h for b, h in zip(bases, halves)]
        prefix = [np.ones_like(target)]
        for r in resp:
            prefix.append(prefix[-1] * r)
        suffix = [np.ones_like(target)]
        for r in reversed(resp):
            suffix.append(suffix[-1] * r)
        suffix = suffix[::-1]
        prod = prefix[-1]
        err = np.where(in_band, prod - target, 0.0)
        mag = np.abs(prod)
        over = np.where(~in_band & (mag > 1.0), (mag - 1.0) / np.maximum(mag, 1e-12), 0.0)
        for i in range(n):
            g_i = prefix[i] * suffix[i + 1]
            gw = (err + oob_weight * over * prod) * np.conj(g_i) / n_in
            gw = gw + mu * np.where(in_band, resp[i] - anchors[i], 0.0) / n_in
            grad = bases[i].T @ gw
            m_state[i] = 0.9 * m_state[i] + 0.1 * grad
            v_state[i] = 0.999 * v_state[i] + 0.001 * np.abs(grad) ** 2
            m_hat = m_state[i] / (1.0 - 0.9 ** t)
            v_hat = v_state[i] / (1.0 - 0.999 ** t)
            halves[i] = halves[i] - step_size * m_hat / (np.sqrt(v_hat) + 1e-8)

    steps = tuple(DbpStep(FoldedFir(h, k), st.nl_scale)
                  for h, k, st in zip(halves, lengths, template.steps))
    return DbpModel(steps, template.samples_per_symbol, template.sample_rate, fiber,
                    template.seed)


def _dispersion_allocation(lengths, total_length: float) -> np.ndarray:
    """Per-step dispersion chunks, proportional to each filter's memory."""
    memory = np.maximum(np.asarray(lengths, dtype=float) - 1.0, 1.0)
    return total_length * memory / np.sum(memory)


def factorized_warm_start(template: DbpModel, fit_band: float = 0.56,
                          max_oob_gain: float = 1.3, grid_points: int = 2048) -> DbpModel:
    """Product-optimal warm start via root factorization.

    Any odd symmetric FIR factors into symmetric 3-tap sections (roots
    pair up as r, 1/r), so the best composed response available to the
    cascade is the capped-LS fit of the whole-link inverse dispersion
    at the composed length.  That filter is fit, factored, and its
    sections are dealt round-robin to the steps ((K-1)/2 sections
    each), with gains balanced per step.  The composed linear response
    is then near-ideal, but individual steps lose their correspondence
    to link segments, so this start suits the weakly nonlinear regime
    where the rotations are small; nonlinear scales stay physical.
    """
    fiber = template.fiber
    if fiber is None:
        raise ConfigError("factorized_warm_start needs the model's fiber metadata")
    fs = template.sample_rate
    lengths = [st.filter.full_length for st in template.steps]
    composed_len = sum(k - 1 for k in lengths) + 1

    f = np.linspace(-0.5, 0.5, grid_points, endpoint=False) * fs
    w = 2.0 * np.pi * f
    in_band = np.abs(f) <= 0.5 * fit_band * fs
    target = np.exp(0.5j * fiber.beta2 * 1e-24 * w ** 2 * fiber.total_length)
    c = (composed_len - 1) // 2
    cols = [2.0 * np.cos(w / fs * (c - m)) for m in range(c)] + [np.ones_like(w)]
    basis = np.stack(cols, axis=1)
    half = _capped_lstsq(basis[in_band], target[in_band], basis[~in_band], max_oob_gain)
    h_total = np.concatenate([half, half[:-1][::-1]])

    roots = np.roots(h_total)
    used = np.zeros(len(roots), dtype=bool)
    sections = []
    for i in range(len(roots)):
        if used[i]:
            continue
        used[i] = True
        j = int(np.argmin(np.where(used, np.inf, np.abs(roots - 1.0 / roots[i]))))
        used[j] = True
        sections.append(np.array([1.0, -(roots[i] + roots[j]), 1.0], dtype=np.complex128))
    sections.sort(key=lambda s: abs(s[1]))

    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    assigned = {i: [] for i in order}
    front = True
    for i in order:
        for _ in range((lengths[i] - 1) // 2):
            assigned[i].append(sections.pop(0 if front else -1))
            front = not front
    scale_residual = h_total[0]
    taps_per_step = []
    for i in range(len(lengths)):
        h = np.array([1.0 + 0j])
        for sec in assigned[i]:
            h = np.convolve(h, sec)
        peak = np.max(np.abs(np.fft.fft(h, 256)))
        taps_per_step.append(h / peak)
        scale_residual = scale_residual * peak
    spread = scale_residual ** (1.0 / len(lengths))
    steps = []
    for h, k, st in zip(taps_per_step, lengths, template.steps):
        h = h * spread
        h = 0.5 * (h + h[::-1])
        steps.append(DbpStep(fold(h), st.nl_scale))
    return DbpModel(tuple(steps), template.samples_per_symbol, template.sample_rate,
                    fiber, template.seed)


def _segment_effective_lengths(fiber: FiberParams, n_steps: int) -> np.ndarray:
    """Attenuation-weighted effective length of each uniform link segment."""
    edges = np.linspace(0.0, fiber.total_length, n_steps + 1)
    a = fiber.alpha
    if a == 0.0:
        return np.diff(edges)
    out = np.empty(n_steps)
    for i in range(n_steps):
        z0, z1 = edges[i], edges[i + 1]
        # integrate exp(-alpha * (z mod span)) across span boundaries
        acc, z = 0.0, z0
        while z < z1 - 1e-12:
            span_idx = int(z // fiber.span_length + 1e-12)
            span_end = min((span_idx + 1) * fiber.span_length, z1)
            local = z - span_idx * fiber.span_length
            acc += np.exp(-a * local) * (1.0 - np.exp(-a * (span_end - z))) / a
            z = span_end
        out[i] = acc
    return out


def init_model(fiber: FiberParams, n_steps: int, taps_per_step, sample_rate: float,
               samples_per_symbol: int, fit_band: float = 0.56, max_oob_gain: float = 1.3,
               seed: int | None = None) -> DbpModel:
    """Truncated-LS initializer (and untrained baseline) for the receiver.

    Nonlinear rotations sit on a uniform step grid (scale = physical
    gamma*L_eff of each segment, far end of the link first); each
    step's taps are the least-squares fit of an inverse-CD chunk,
    symmetrized and folded.  The dispersion chunks sum to the full link
    but are allocated proportionally to each filter's memory (tap count
    minus one), so in mixed-length patterns like [5, 3] the longer
    filters take on more dispersion than the shorter ones.
    ``taps_per_step`` is either one odd integer, a pattern that is
    tiled across the steps (e.g. [5, 3]), or a full per-step list.
    """
    counts = np.atleast_1d(np.asarray(taps_per_step, dtype=int))
    if len(counts) == n_steps:
        per_step = counts
    else:
        per_step = np.resize(counts, n_steps)
    if np.any(per_step % 2 == 0) or np.any(per_step < 1):
        raise ValueError(f"tap counts must be odd and positive, got {list(per_step)}")

    z_per_step = _dispersion_allocation(per_step, fiber.total_length)
    l_eff = _segment_effective_lengths(fiber, n_steps)[::-1]  # receiver undoes the far end first
    steps = []
    for i in range(n_steps):
        taps = ls_cd_fir(fiber.beta2, float(z_per_step[i]), sample_rate, int(per_step[i]),
                         fit_band=fit_band, max_oob_gain=max_oob_gain)
        taps = 0.5 * (taps + taps[::-1])  # exact symmetry for folding
        steps.append(DbpStep(fold(taps), float(fiber.gamma * l_eff[i])))
    return DbpModel(tuple(steps), samples_per_symbol, sample_rate, fiber, seed)


# ---------------------------------------------------------------------------
# complexity accounting


def complexity_report(model_or_tap_counts, complex_mult_real_mults: int = 4,
                      nonlinear_stage_real_mults: int = NONLINEAR_STAGE_REAL_MULTS) -> dict:
    """Declared-accounting complexity of a multi-step receiver.

    One folded K-tap symmetric complex filter costs
    ``complex_mult_real_mults * ceil(K/2)`` real multiplications per
    complex output sample (folding shares each mirrored tap pair), and
    every nonlinear stage adds a flat constant.  Accepts a DbpModel or
    a bare list of tap counts, one per step.
    """
    if isinstance(model_or_tap_counts, DbpModel):
        counts = model_or_tap_counts.tap_counts
    else:
        counts = [int(k) for k in model_or_tap_counts]
    if any(k < 1 for k in counts):
        raise ValueError("tap counts must be positive")
    per_step = []
    for k in counts:
        filt = complex_mult_real_mults * ((k + 1) // 2)
        per_step.append({
            "taps": k,
            "filter_real_mults": filt,
            "nonlinear_real_mults": nonlinear_stage_real_mults,
        })
    return {
        "accounting": {
            "complex_mult_real_mults": complex_mult_real_mults,
            "nonlinear_stage_real_mults": nonlinear_stage_real_mults,
            "folding": "mirrored taps share one multiplier",
        },
        "n_steps": len(counts),
        "total_taps": int(sum(counts)),
        "real_mults_per_sample": int(sum(s["filter_real_mults"] + s["nonlinear_real_mults"]
                                         for s in per_step)),
        "per_step": per_step,
    }


# ---------------------------------------------------------------------------
# frequency-domain-exact reference receiver (oracle only, not a product path)


def fd_reference_dbp(rx: ComplexSignal, fiber: FiberParams, steps_per_span: int = 1) -> ComplexSignal:
    """Split-step DBP with exact frequency-domain CD inverses.

    Symmetric scheme mirrored from the forward simulator: spans are
    undone last-first, each step applies half inverse CD, a nonlinear
    rotation of -gamma*l_eff(segment) (the signal sits at launch power
    because span gains compensate span losses), then half inverse CD.
    """
    dz = fiber.span_length / steps_per_span
    half = np.exp(1j * _cd_phase(rx.grid, fiber.beta2, dz / 2.0))
    l_effs = [fiber.effective_length(dz, s * dz) for s in range(steps_per_span)]
    pols = [u.copy() for u in rx.pols()]
    dual = len(pols) == 2

    def apply_half():
        for i, u in enumerate(pols):
            pols[i] = np.fft.ifft(np.fft.fft(u) * half)

    for _ in range(fiber.n_spans):
        for s in reversed(range(steps_per_span)):
            apply_half()
            p = np.abs(pols[0]) ** 2
            if dual:
                p = p + np.abs(pols[1]) ** 2
            rot = np.exp(-1j * fiber.gamma * l_effs[s] * p)
            for i in range(len(pols)):
                pols[i] = pols[i] * rot
            apply_half()
    return rx.with_pols(*pols)
