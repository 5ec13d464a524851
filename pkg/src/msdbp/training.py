"""SGD training machinery: losses, optimizers, L1, pruning, fake quantization.

Parameters live in a flat named ParamSet of real float64 arrays
(complex filter taps as stacked real/imaginary pairs).  A training
problem supplies the initial ParamSet and a loss builder that turns
parameter nodes plus a mini-batch into a scalar autodiff node; the
loop here handles fake-quantization wrapping, backward, the L1
subgradient, masking, the optimizer update, best-so-far retention,
checkpointing and the divergence guard.  Everything is keyed off
explicit seeds and iteration numbers, so runs (and interrupted,
resumed runs) are bit-reproducible.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError
from .signals import ComplexSignal, SymbolFrame

ParamSet = dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# losses


def _as_node_or_array(x):
    if isinstance(x, SymbolFrame):
        return x.symbols
    if isinstance(x, ComplexSignal):
        return x
    return x


def mse_loss(rx_syms, tx_syms):
    """Mean squared symbol error, |rx - tx|^2 averaged over all entries.

    Accepts SymbolFrames, ndarrays, or autodiff nodes; callers slice
    away guard symbols before computing the loss.
    """
    r = _as_node_or_array(rx_syms)
    t = _as_node_or_array(tx_syms)
    if ad.value_of(r).size == 0 or ad.value_of(t).size == 0:
        raise ValueError("mse_loss needs non-empty frames")
    return ad.mean_all(ad.abs2(ad.sub(r, t)))


def cma_loss(sig, modulus: float):
    """Constant-modulus cost, mean of (|u|^2 - R)^2 summed over polarizations."""
    if modulus <= 0:
        raise ValueError(f"CMA modulus must be positive, got {modulus}")
    if isinstance(sig, ComplexSignal):
        pols = list(sig.pols())
    elif isinstance(sig, (list, tuple)):
        pols = list(sig)
    else:
        pols = [sig]
    total = None
    for u in pols:
        e = ad.sub(ad.abs2(u), float(modulus))
        term = ad.mean_all(ad.mul(e, e))
        total = term if total is None else ad.add(total, term)
    return total


def cma_modulus(constellation_points: np.ndarray) -> float:
    """Godard radius E|s|^4 / E|s|^2 of a constellation."""
    p = np.abs(np.asarray(constellation_points))
    return float(np.mean(p ** 4) / np.mean(p ** 2))


def backward(loss):
    """Reverse-mode pass; delegates to the autodiff engine."""
    ad.backward(loss)


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class OptimizerConfig:
    """kind "sgd" is the plain update p <- p - a*g; "adam" the usual
    adaptive-moment method.  "halve-thirds" cuts the step size by 2 at
    each third of the iteration budget."""

    kind: str = "adam"
    step_size: float = 1e-3
    schedule: str = "halve-thirds"   # or "constant"
    batch_size: int = 1
    iterations: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("halve-thirds", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def step_size_at(self, iteration: int) -> float:
        if self.schedule == "constant" or self.iterations <= 0:
            return self.step_size
        third = max(1, self.iterations // 3)
        return self.step_size * 0.5 ** min(2, iteration // third)


@dataclass(frozen=True)
class RegularizerConfig:
    l1_weight: float = 0.0
    prune_threshold: float = 0.0
    groups: tuple[str, ...] = ()   # parameter-name prefixes the L1/prune act on

    def __post_init__(self):
        if not np.isfinite(self.l1_weight) or not np.isfinite(self.prune_threshold):
            raise ConfigError("regularizer values must be finite")
        if self.l1_weight < 0 or self.prune_threshold < 0:
            raise ConfigError("regularizer values must be >= 0")

    def selects(self, name: str) -> bool:
        return any(g in name for g in self.groups)


@dataclass(frozen=True)
class FakeQuantConfig:
    """Quantize-dequantize on designated coefficients during the forward
    pass; scale policy is per-filter max-abs, recomputed every
    iteration from the float parameters."""

    bits: int = 6
    enabled: bool = False
    groups: tuple[str, ...] = ()

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"quantizer bits must lie in [2, 16], got {self.bits}")

    def selects(self, name: str) -> bool:
        return any(name.startswith(g) for g in self.groups)


def fake_quantize(x, cfg: FakeQuantConfig, scale: float):
    """Spec'd quantize-dequantize entry point (array or node input)."""
    return ad.fake_quant(x, cfg.bits, scale)


# ---------------------------------------------------------------------------
# regularization and pruning


def l1_penalty(params: ParamSet, l1_weight: float, groups: tuple[str, ...] = ()):
    """L1 value and subgradient over the selected parameter groups.

    Subgradient is sign(p), zero at zero; it is added to the data-loss
    gradient after backward.
    """
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if groups and not any(g in name for g in groups):
            continue
        value += float(np.sum(np.abs(p)))
        grads[name] = l1_weight * np.sign(p)
    return l1_weight * value, grads


def prune(params: ParamSet, threshold: float, groups: tuple[str, ...] = ()):
    """Zero selected entries with |p| < threshold; freeze them via a mask.

    Returns (pruned params, mask dict of {0.,1.}, exact zero fraction
    over the selected groups).
    """
    out: ParamSet = {}
    masks: dict[str, np.ndarray] = {}
    zeros = 0
    total = 0
    for name, p in params.items():
        if groups and not any(g in name for g in groups):
            out[name] = p.copy()
            continue
        keep = np.abs(p) >= threshold
        out[name] = np.where(keep, p, 0.0)
        masks[name] = keep.astype(np.float64)
        zeros += int(np.sum(~keep) + np.sum(p[keep] == 0.0))
        total += p.size
    fraction = zeros / total if total else 0.0
    return out, masks, fraction


def sparsity_of(params: ParamSet, groups: tuple[str, ...] = ()):
    zeros = sum(int(np.sum(p == 0.0)) for n, p in params.items()
                if not groups or any(g in n for g in groups))
    total = sum(p.size for n, p in params.items()
                if not groups or any(g in n for g in groups))
    return {"zeros": zeros, "total": total, "fraction": zeros / total if total else 0.0}


# ---------------------------------------------------------------------------
# optimizer step


@dataclass
class OptimizerState:
    iteration: int = 0
    m: ParamSet = field(default_factory=dict)
    v: ParamSet = field(default_factory=dict)


def step(params: ParamSet, grads: ParamSet, cfg: OptimizerConfig,
         state: OptimizerState, masks: dict[str, np.ndarray] | None = None) -> ParamSet:
    """One optimizer update; mutates ``state``, returns new parameters.

    Plain SGD applies p <- p - a*g verbatim.  Masked entries get zero
    gradient and stay exactly zero.
    """
    lr = cfg.step_size_at(state.iteration)
    t = state.iteration + 1
    new: ParamSet = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p.copy()
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches parameter {name} {p.shape}")
        if masks and name in masks:
            g = g * masks[name]
        if cfg.kind == "sgd":
            q = p - lr * g
        else:
            m = state.m.get(name, np.zeros_like(p))
            v = state.v.get(name, np.zeros_like(p))
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            state.m[name] = m
            state.v[name] = v
            m_hat = m / (1.0 - 0.9 ** t)
            v_hat = v / (1.0 - 0.999 ** t)
            q = p - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        if masks and name in masks:
            q = q * masks[name]
        new[name] = q
    state.iteration = t
    return new


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainProblem:
    """Bundle tying a parameterized receiver to its data.

    ``build_loss(nodes, batch)`` gets a dict of parameter nodes (leaf
    Vars, possibly wrapped in fake quantization) and a list of frame
    indices, and returns the scalar data-loss node.  ``n_frames`` is
    the pool the batch sampler draws from.
    """

    params0: ParamSet
    build_loss: object
    n_frames: int


@dataclass
class TrainResult:
    params: ParamSet            # best-so-far parameters
    final_params: ParamSet      # parameters after the last update
    history: list               # rows: [iteration, data, l1, total, wall_seconds]
    state: OptimizerState
    masks: dict


def _batch_indices(seed: int, iteration: int, n_frames: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration]))
    return rng.integers(0, n_frames, size=batch_size)


def _param_nodes(params: ParamSet, fq: FakeQuantConfig | None):
    nodes = {}
    leaves = {}
    for name, p in params.items():
        leaf = ad.Var(p)
        leaves[name] = leaf
        if fq is not None and fq.enabled and fq.selects(name):
            scale = float(np.max(np.abs(p)))
            nodes[name] = ad.fake_quant(leaf, fq.bits, scale)
        else:
            nodes[name] = leaf
    return nodes, leaves


def save_checkpoint(path: str, params: ParamSet, state: OptimizerState,
                    best_params: ParamSet, best_loss: float, masks: dict, history: list):
    os.makedirs(path, exist_ok=True)
    arrays = {}
    for tag, group in (("p", params), ("m", state.m), ("v", state.v), ("b", best_params)):
        for name, arr in group.items():
            arrays[f"{tag}:{name}"] = arr
    for name, arr in masks.items():
        arrays[f"k:{name}"] = arr
    for key, arr in arrays.items():
        np.save(os.path.join(path, key.replace(":", "__").replace("/", "_") + ".npy"), arr)
    meta = {
        "iteration": state.iteration,
        "best_loss": best_loss,
        "keys": sorted(arrays),
        "history": history,
    }
    tmp = os.path.join(path, "state.json.tmp")
    with open(tmp, "w") as f:
        json.dump(meta, f, sort_keys=True)
    os.replace(tmp, os.path.join(path, "state.json"))


def load_checkpoint(path: str):
    with open(os.path.join(path, "state.json")) as f:
        meta = json.load(f)
    groups = {"p": {}, "m": {}, "v": {}, "b": {}, "k": {}}
    for key in meta["keys"]:
        tag, name = key.split(":", 1)
        arr = np.load(os.path.join(path, key.replace(":", "__").replace("/", "_") + ".npy"))
        groups[tag][name] = arr
    state = OptimizerState(iteration=meta["iteration"], m=groups["m"], v=groups["v"])
    return groups["p"], state, groups["b"], meta["best_loss"], groups["k"], meta["history"]


def train(problem: TrainProblem, opt: OptimizerConfig,
          reg: RegularizerConfig | None = None, fq: FakeQuantConfig | None = None,
          masks: dict | None = None, checkpoint_dir: str | None = None,
          checkpoint_every: int = 0, resume: bool = False,
          stop_after: int | None = None, log_every: int = 0) -> TrainResult:
    """Mini-batch SGD over the problem's frames.

    Each iteration draws its batch from a generator seeded by
    (opt.seed, iteration), builds the loss graph (fake quantization
    applied to designated coefficients when enabled), runs backward,
    adds the L1 subgradient, and steps the optimizer.  The lowest
    recorded total loss retains its parameters.  Aborts with
    DivergenceError if the loss goes non-finite.
    """
    reg = reg or RegularizerConfig()
    masks = dict(masks or {})
    params = {k: np.array(v, dtype=np.float64) for k, v in problem.params0.items()}
    state = OptimizerState()
    history: list = []
    best_params = {k: v.copy() for k, v in params.items()}
    best_loss = np.inf

    if resume:
        if not checkpoint_dir or not os.path.exists(os.path.join(checkpoint_dir, "state.json")):
            raise ConfigError("resume requested but no checkpoint found")
        params, state, best_params, best_loss, saved_masks, history = load_checkpoint(checkpoint_dir)
        masks = saved_masks or masks

    if masks:
        params = {k: (v * masks[k] if k in masks else v) for k, v in params.items()}

    t0 = time.monotonic()
    last = opt.iterations if stop_after is None else min(stop_after, opt.iterations)
    while state.iteration < last:
        it = state.iteration
        batch = _batch_indices(opt.seed, it, problem.n_frames, opt.batch_size)
        nodes, leaves = _param_nodes(params, fq)
        loss = problem.build_loss(nodes, batch)
        data_loss = float(ad.value_of(loss))
        pen, l1_grads = l1_penalty(params, reg.l1_weight, reg.groups) if reg.l1_weight > 0 \
            else (0.0, {})
        total = data_loss + pen
        if not np.isfinite(total):
            raise DivergenceError(
                f"loss became non-finite at iteration {it}: data={data_loss}, l1={pen}")

        if total < best_loss:
            best_loss = total
            best_params = {k: v.copy() for k, v in params.items()}

        ad.backward(loss)
        grads = {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
                 for name, leaf in leaves.items()}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"gradient of {name!r} became non-finite at iteration {it}")
        for name, g in l1_grads.items():
            grads[name] = grads[name] + g

        params = step(params, grads, opt, state, masks=masks)
        history.append([it, data_loss, pen, total, time.monotonic() - t0])
        if log_every and (it % log_every == 0 or state.iteration == last):
            print(f"  iter {it:6d}  data {data_loss:.6e}  l1 {pen:.3e}  total {total:.6e}")
        if checkpoint_dir and checkpoint_every and state.iteration % checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, params, state, best_params, best_loss, masks, history)

    if checkpoint_dir and checkpoint_every:
        save_checkpoint(checkpoint_dir, params, state, best_params, best_loss, masks, history)
    return TrainResult(best_params, params, history, state, masks)
