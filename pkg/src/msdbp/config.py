"""Experiment configuration: strict schema, explicit units, YAML front end.

Configs are plain YAML with every physical quantity carrying its unit
in the key name.  Parsing is strict: unknown keys are rejected by
name, and all values are normalized into the typed objects the rest of
the package uses.  The canonical JSON form of a parsed config (sorted
keys, shortest-roundtrip floats) feeds the digest that datasets,
artifacts and reports embed, which is what makes reruns byte-auditable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .chains import ChainSpec
from .channel import AmplifierConfig, FiberParams
from .errors import ConfigError
from .training import FakeQuantConfig, OptimizerConfig, RegularizerConfig

SCHEMA_VERSION = 1

RECEIVER_KINDS = ("dbp", "subband_dbp", "pmd_multistage", "pmd_mimo")
WARM_STARTS = ("none", "anchored", "factorized")


@dataclass(frozen=True)
class PmdSpec:
    enabled: bool = False
    sections: int = 10
    mean_dgd_ps: float = 50.0


@dataclass(frozen=True)
class DatasetSpec:
    train_frames: int = 16
    eval_frames: int = 4


@dataclass(frozen=True)
class ReceiverSpec:
    kind: str = "dbp"
    steps: int = 25
    taps_per_step: tuple = (5, 3)
    fit_band: float = 0.56
    max_oob_gain: float = 1.3
    warm_start: str = "factorized"
    # subband receivers
    subbands: int = 3
    subband_oversample: int = 2
    subband_guard_fraction: float = 0.2
    prototype_span_channels: int = 24
    subband_taps: int = 7
    coupling_taps: int = 9
    cascade_lengths: tuple | None = None
    # PMD receivers
    stages: int = 10
    fd_length: int = 5
    mimo_taps: int = 7
    mode: str = "supervised-mse"


@dataclass(frozen=True)
class TrainSpec:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    l1_weight: float = 0.0
    prune_threshold: float = 0.0
    prune_at_fraction: float = 0.8
    checkpoint_every: int = 0
    quantization: FakeQuantConfig = field(default_factory=FakeQuantConfig)


@dataclass(frozen=True)
class EvalSpec:
    power_sweep_dbm: tuple = ()
    eval_frames: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    chain: ChainSpec
    fiber: FiberParams
    forward_steps_per_span: int
    launch_power_dbm: float
    amplifier: AmplifierConfig
    pmd: PmdSpec
    dataset: DatasetSpec
    receiver: ReceiverSpec
    training: TrainSpec
    evaluation: EvalSpec
    raw: dict = field(repr=False, default_factory=dict)

    def digest(self) -> str:
        return config_digest(self.raw)


def config_digest(normalized: dict) -> str:
    blob = json.dumps(normalized, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _section(raw: dict, name: str, allowed: dict, required: tuple = ()):
    d = raw.get(name, {})
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key!r}")
    for key in required:
        if key not in d:
            raise ConfigError(f"missing required key {name}.{key!r}")
    out = dict(allowed)
    out.update(d)
    return out


def _num(x, name, kind=float, lo=None, hi=None):
    try:
        v = kind(x)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a {kind.__name__}, got {x!r}") from None
    if lo is not None and v < lo:
        raise ConfigError(f"{name} must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{name} must be <= {hi}, got {v}")
    return v


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top_allowed = {"schema_version", "name", "seed", "chain", "fiber", "launch_power_dbm",
                   "amplifier", "pmd", "dataset", "receiver", "training", "evaluation"}
    for key in raw:
        if key not in top_allowed:
            raise ConfigError(f"unknown key {key!r}")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if "name" not in raw or "seed" not in raw:
        raise ConfigError("config needs 'name' and 'seed'")

    c = _section(raw, "chain", {
        "symbol_rate_gbaud": 10.0, "tx_samples_per_symbol": 8, "rx_samples_per_symbol": 2,
        "frame_symbols": 1024, "guard_symbols": 96, "rolloff": 0.1,
        "filter_span_symbols": 32, "modulation_order": 16, "polarizations": 1})
    chain = ChainSpec(
        symbol_rate=_num(c["symbol_rate_gbaud"], "chain.symbol_rate_gbaud", float, 0.001) * 1e9,
        tx_sps=_num(c["tx_samples_per_symbol"], "chain.tx_samples_per_symbol", int, 1),
        rx_sps=_num(c["rx_samples_per_symbol"], "chain.rx_samples_per_symbol", int, 1),
        n_symbols=_num(c["frame_symbols"], "chain.frame_symbols", int, 16),
        guard_symbols=_num(c["guard_symbols"], "chain.guard_symbols", int, 0),
        rolloff=_num(c["rolloff"], "chain.rolloff", float),
        span_symbols=_num(c["filter_span_symbols"], "chain.filter_span_symbols", int, 2),
        modulation_order=_num(c["modulation_order"], "chain.modulation_order", int),
        n_pol=_num(c["polarizations"], "chain.polarizations", int, 1, 2))

    f = _section(raw, "fiber", {
        "beta2_ps2_per_km": -21.7, "gamma_per_w_km": 1.3, "alpha_db_per_km": 0.2,
        "span_km": 80.0, "n_spans": 25, "forward_steps_per_span": 50})
    fiber = FiberParams(
        beta2=_num(f["beta2_ps2_per_km"], "fiber.beta2_ps2_per_km"),
        gamma=_num(f["gamma_per_w_km"], "fiber.gamma_per_w_km"),
        alpha_db=_num(f["alpha_db_per_km"], "fiber.alpha_db_per_km", float, 0.0),
        span_length=_num(f["span_km"], "fiber.span_km", float, 0.001),
        n_spans=_num(f["n_spans"], "fiber.n_spans", int, 1))
    forward_steps = _num(f["forward_steps_per_span"], "fiber.forward_steps_per_span", int, 1)

    a = _section(raw, "amplifier", {
        "noise_enabled": False, "gain_db": None, "noise_figure_db": 4.5})
    amp = AmplifierConfig(
        gain_db=None if a["gain_db"] is None else _num(a["gain_db"], "amplifier.gain_db", float, 0.0),
        noise_figure_db=_num(a["noise_figure_db"], "amplifier.noise_figure_db"),
        noise_enabled=bool(a["noise_enabled"]),
        seed=int(raw["seed"]))

    p = _section(raw, "pmd", {"enabled": False, "sections": 10, "mean_dgd_ps": 50.0})
    pmd = PmdSpec(bool(p["enabled"]), _num(p["sections"], "pmd.sections", int, 1),
                  _num(p["mean_dgd_ps"], "pmd.mean_dgd_ps", float, 0.0))

    d = _section(raw, "dataset", {"train_frames": 16, "eval_frames": 4})
    dataset = DatasetSpec(_num(d["train_frames"], "dataset.train_frames", int, 1),
                          _num(d["eval_frames"], "dataset.eval_frames", int, 1))

    r = _section(raw, "receiver", {
        "kind": "dbp", "steps": 25, "taps_per_step": [5, 3], "fit_band": 0.56,
        "max_oob_gain": 1.3, "warm_start": "factorized", "subbands": 3,
        "subband_oversample": 2, "subband_guard_fraction": 0.2,
        "prototype_span_channels": 24, "subband_taps": 7, "coupling_taps": 9,
        "cascade_lengths": None, "stages": 10, "fd_length": 5, "mimo_taps": 7,
        "mode": "supervised-mse"})
    if r["kind"] not in RECEIVER_KINDS:
        raise ConfigError(f"receiver.kind must be one of {RECEIVER_KINDS}, got {r['kind']!r}")
    if r["warm_start"] not in WARM_STARTS:
        raise ConfigError(f"receiver.warm_start must be one of {WARM_STARTS}")
    taps = r["taps_per_step"]
    taps = tuple(int(t) for t in (taps if isinstance(taps, (list, tuple)) else [taps]))
    cascade = r["cascade_lengths"]
    cascade = None if cascade is None else tuple(int(x) for x in cascade)
    receiver = ReceiverSpec(
        kind=r["kind"], steps=_num(r["steps"], "receiver.steps", int, 1),
        taps_per_step=taps, fit_band=_num(r["fit_band"], "receiver.fit_band", float, 0.05, 1.0),
        max_oob_gain=_num(r["max_oob_gain"], "receiver.max_oob_gain", float, 1.0),
        warm_start=r["warm_start"],
        subbands=_num(r["subbands"], "receiver.subbands", int, 1),
        subband_oversample=_num(r["subband_oversample"], "receiver.subband_oversample", int, 1),
        subband_guard_fraction=_num(r["subband_guard_fraction"], "receiver.subband_guard_fraction", float, 0.01, 1.0),
        prototype_span_channels=_num(r["prototype_span_channels"], "receiver.prototype_span_channels", int, 4),
        subband_taps=_num(r["subband_taps"], "receiver.subband_taps", int, 1),
        coupling_taps=_num(r["coupling_taps"], "receiver.coupling_taps", int, 1),
        cascade_lengths=cascade,
        stages=_num(r["stages"], "receiver.stages", int, 1),
        fd_length=_num(r["fd_length"], "receiver.fd_length", int, 1),
        mimo_taps=_num(r["mimo_taps"], "receiver.mimo_taps", int, 1),
        mode=r["mode"])
    if receiver.mode not in ("supervised-mse", "cma"):
        raise ConfigError(f"receiver.mode must be supervised-mse or cma, got {receiver.mode!r}")

    t = _section(raw, "training", {
        "optimizer": "adam", "step_size": 1e-3, "schedule": "halve-thirds",
        "batch_size": 1, "iterations": 10000, "seed": 7, "l1_weight": 0.0,
        "prune_threshold": 0.0, "prune_at_fraction": 0.8, "checkpoint_every": 0,
        "quantization": {}})
    q_allowed = {"enabled": False, "bits": 6}
    q = dict(q_allowed)
    qd = t["quantization"] or {}
    for key in qd:
        if key not in q_allowed:
            raise ConfigError(f"unknown key training.quantization.{key!r}")
    q.update(qd)
    training = TrainSpec(
        optimizer=OptimizerConfig(
            kind=t["optimizer"], step_size=_num(t["step_size"], "training.step_size", float),
            schedule=t["schedule"], batch_size=_num(t["batch_size"], "training.batch_size", int, 1),
            iterations=_num(t["iterations"], "training.iterations", int, 0),
            seed=_num(t["seed"], "training.seed", int)),
        l1_weight=_num(t["l1_weight"], "training.l1_weight", float, 0.0),
        prune_threshold=_num(t["prune_threshold"], "training.prune_threshold", float, 0.0),
        prune_at_fraction=_num(t["prune_at_fraction"], "training.prune_at_fraction", float, 0.0, 1.0),
        checkpoint_every=_num(t["checkpoint_every"], "training.checkpoint_every", int, 0),
        quantization=FakeQuantConfig(bits=_num(q["bits"], "training.quantization.bits", int),
                                     enabled=bool(q["enabled"])))

    e = _section(raw, "evaluation", {"power_sweep_dbm": None, "eval_frames": None})
    sweep = e["power_sweep_dbm"]
    if sweep is None:
        sweep = [float(raw.get("launch_power_dbm", 0.0))]
    evaluation = EvalSpec(tuple(float(x) for x in sweep),
                          None if e["eval_frames"] is None
                          else _num(e["eval_frames"], "evaluation.eval_frames", int, 1))

    normalized = _normalize(raw)
    return ExperimentConfig(
        name=str(raw["name"]), seed=int(raw["seed"]), chain=chain, fiber=fiber,
        forward_steps_per_span=forward_steps,
        launch_power_dbm=_num(raw.get("launch_power_dbm", 0.0), "launch_power_dbm"),
        amplifier=amp, pmd=pmd, dataset=dataset, receiver=receiver, training=training,
        evaluation=evaluation, raw=normalized)


def _normalize(obj):
    """JSON-stable view of the raw config (tuples->lists, numbers kept)."""
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    return obj


def load_config(path: str, seed_override: int | None = None) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if seed_override is not None:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        raw = dict(raw)
        raw["seed"] = int(seed_override)
    return parse_config(raw)
