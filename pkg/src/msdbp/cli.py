"""Reproducible experiment runner.

Verbs: simulate (dataset generation), train, evaluate, export, import,
report.  Every command is a pure function of the config file, flags
and input files; all randomness flows from named seeds, writes are
atomic, and an output directory hosts one experiment at a time (lock
file).  Exit codes: 0 success, 2 configuration error, 3 integrity
error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from importlib import resources

import numpy as np

from . import artifact as art
from . import chains, dbp, pmd, subband, training
from .channel import PmdLink, draw_pmd_link
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DivergenceError, IntegrityError
from .signals import SymbolFrame, constellation, effective_snr

TRAIN_SEED_STRIDE = 1_000_000
EVAL_SEED_OFFSET = 900_000


@contextmanager
def _lock(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is locked by another run "
            f"(delete {path} if that run is no longer alive)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(path):
            os.unlink(path)


def resolve_config_path(path: str) -> str:
    """A plain path, or ``preset:NAME`` for a shipped preset."""
    if path.startswith("preset:"):
        name = path.split(":", 1)[1]
        ref = resources.files("msdbp") / "presets" / f"{name}.yaml"
        if not ref.is_file():
            raise ConfigError(f"unknown preset {name!r}")
        return str(ref)
    return path


def _pmd_link(cfg: ExperimentConfig) -> PmdLink | None:
    if not cfg.pmd.enabled:
        return None
    return draw_pmd_link(cfg.seed + 77, cfg.pmd.sections, cfg.pmd.mean_dgd_ps)


def _frame_seed(cfg: ExperimentConfig, split: str, index: int) -> int:
    base = cfg.seed * TRAIN_SEED_STRIDE
    return base + (EVAL_SEED_OFFSET + index if split == "eval" else index)


def generate_frames(cfg: ExperimentConfig, split: str, count: int, power_dbm: float,
                    threads: int = 1):
    link = _pmd_link(cfg)

    def one(i):
        seed = _frame_seed(cfg, split, i)
        return chains.simulate_frame(cfg.chain, cfg.fiber, power_dbm, seed,
                                     amp=cfg.amplifier, pmd=link,
                                     steps_per_span=cfg.forward_steps_per_span,
                                     frame_index=seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(count)))
    return [one(i) for i in range(count)]


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> str:
    ds_dir = os.path.join(out_dir, "dataset")
    os.makedirs(ds_dir, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "config_digest": cfg.digest(),
        "config": cfg.raw,
        "launch_power_dbm": cfg.launch_power_dbm,
        "frames": [],
    }
    for split, count in (("train", cfg.dataset.train_frames), ("eval", cfg.dataset.eval_frames)):
        frames = generate_frames(cfg, split, count, cfg.launch_power_dbm, threads)
        for i, fr in enumerate(frames):
            rx_name = f"{split}_{i:04d}.rx.npy"
            tx_name = f"{split}_{i:04d}.tx.npy"
            np.save(os.path.join(ds_dir, rx_name), np.stack(fr.rx_pols))
            np.save(os.path.join(ds_dir, tx_name), fr.tx_symbols)
            manifest["frames"].append({
                "split": split, "index": i, "seed": fr.seed,
                "sym_scale": [fr.sym_scale.real, fr.sym_scale.imag],
                "delay": fr.delay, "rx_rate_hz": fr.rx_rate, "rx_sps": fr.rx_sps,
                "rx_file": rx_name, "tx_file": tx_name,
            })
    art.atomic_write_text(os.path.join(ds_dir, "manifest.json"),
                          json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return ds_dir


def load_dataset(out_dir: str, cfg: ExperimentConfig | None = None):
    ds_dir = os.path.join(out_dir, "dataset")
    with open(os.path.join(ds_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if cfg is not None and manifest["config_digest"] != cfg.digest():
        raise ConfigError("dataset was generated from a different config (digest mismatch)")
    frames = {"train": [], "eval": []}
    for meta in manifest["frames"]:
        rx = np.load(os.path.join(ds_dir, meta["rx_file"]))
        tx = np.load(os.path.join(ds_dir, meta["tx_file"]))
        frames[meta["split"]].append(chains.RxFrame(
            tx, tuple(rx), meta["delay"], complex(*meta["sym_scale"]),
            meta["rx_rate_hz"], meta["rx_sps"], meta["seed"]))
    return manifest, frames


# ---------------------------------------------------------------------------
# train


def _quant_groups(kind: str) -> tuple:
    return (".re", ".im") if kind in ("dbp", "subband_dbp") else ()


def _l1_groups(kind: str) -> tuple:
    return (".mimo",) if kind == "subband_dbp" else ()


def build_initial_model(cfg: ExperimentConfig, frames):
    r = cfg.receiver
    if r.kind == "dbp":
        model = dbp.init_model(cfg.fiber, r.steps, list(r.taps_per_step),
                               cfg.chain.rx_rate, cfg.chain.rx_sps,
                               fit_band=r.fit_band, max_oob_gain=r.max_oob_gain,
                               seed=cfg.seed)
        if r.warm_start == "anchored":
            model = dbp.linear_warm_start(model, fit_band=r.fit_band)
        elif r.warm_start == "factorized":
            model = dbp.factorized_warm_start(model, fit_band=r.fit_band,
                                              max_oob_gain=r.max_oob_gain)
        return model
    if r.kind == "subband_dbp":
        bank = subband.make_filter_bank(r.subbands, r.subband_oversample,
                                        r.subband_guard_fraction, r.prototype_span_channels)
        probe = subband.split(frames[0].rx_signal(), bank)
        model = subband.init_subband_model(cfg.fiber, probe, r.steps, r.subband_taps,
                                           r.coupling_taps, r.cascade_lengths)
        return (model, bank)
    if r.kind == "pmd_multistage":
        return [pmd.identity_stage(r.fd_length) for _ in range(r.stages)]
    if r.kind == "pmd_mimo":
        return pmd.identity_mimo(r.mimo_taps)
    raise ConfigError(f"unknown receiver kind {r.kind!r}")


def _train_problem(cfg: ExperimentConfig, model, frames):
    r = cfg.receiver
    if r.kind == "dbp":
        return chains.build_dbp_problem(model, frames, cfg.chain)
    if r.kind == "subband_dbp":
        sb_model, bank = model
        bands = chains.subband_frames(frames, bank)
        return chains.build_subband_problem(sb_model, frames, bands, cfg.chain, bank)
    cd_frames = chains.cd_compensated_frames(frames, cfg.fiber)
    blocks = chains.pmd_blocks(cd_frames, cfg.chain)
    modulus = training.cma_modulus(constellation(cfg.chain.modulation_order))
    return pmd.build_adapt_problem(model, blocks, r.mode, modulus,
                                   mf_taps=cfg.chain.rx_taps())


def _model_from_params(cfg: ExperimentConfig, model, params):
    r = cfg.receiver
    if r.kind == "dbp":
        return chains.dbp_model_from_params(params, model)
    if r.kind == "subband_dbp":
        sb_model, bank = model
        return (chains.subband_model_from_params(params, sb_model), bank)
    if r.kind == "pmd_multistage":
        return pmd.stages_from_params(params, len(model))
    return pmd.mimo_from_params(params)


def _payload_from_model(cfg: ExperimentConfig, model, quantization=None):
    prov = {"config_digest": cfg.digest(), "seed": cfg.seed,
            "training_seed": cfg.training.optimizer.seed}
    r = cfg.receiver
    if r.kind == "dbp":
        return art.dbp_to_payload(model, prov, quantization)
    if r.kind == "subband_dbp":
        return art.subband_to_payload(model[0], prov)
    if r.kind == "pmd_multistage":
        return art.pmd_stages_to_payload(model, prov)
    return art.mimo_to_payload(model, prov)


def model_from_artifact(cfg: ExperimentConfig, payload: dict):
    model = art.model_from_payload(payload)
    if payload["kind"] == "subband_dbp":
        r = cfg.receiver
        bank = subband.make_filter_bank(r.subbands, r.subband_oversample,
                                        r.subband_guard_fraction, r.prototype_span_channels)
        return (model, bank)
    return model


def write_history_csv(path: str, history):
    rows = ["iteration,data_loss,l1_penalty,total_loss,wall_seconds"]
    for it, data, l1, total, wall in history:
        rows.append(f"{it},{data!r},{l1!r},{total!r},{wall!r}")
    art.atomic_write_text(path, "\n".join(rows) + "\n")


def cmd_train(cfg: ExperimentConfig, out_dir: str, resume: bool = False,
              stop_after: int | None = None) -> str:
    _, frames = load_dataset(out_dir, cfg)
    model = build_initial_model(cfg, frames["train"])
    problem = _train_problem(cfg, model, frames["train"])
    spec = cfg.training
    reg = training.RegularizerConfig(spec.l1_weight, spec.prune_threshold,
                                     _l1_groups(cfg.receiver.kind))
    fq = training.FakeQuantConfig(spec.quantization.bits, spec.quantization.enabled,
                                  _quant_groups(cfg.receiver.kind))
    ckpt = os.path.join(out_dir, "checkpoints")
    two_phase = spec.prune_threshold > 0.0
    if two_phase and (resume or stop_after is not None):
        raise ConfigError("resume/stop-after are only supported for single-phase runs")

    if not two_phase:
        result = training.train(problem, spec.optimizer, reg, fq,
                                checkpoint_dir=ckpt, checkpoint_every=spec.checkpoint_every,
                                resume=resume, stop_after=stop_after)
        params, history, masks = result.params, result.history, result.masks
    else:
        total = spec.optimizer.iterations
        phase1 = max(1, int(total * spec.prune_at_fraction))
        opt1 = training.OptimizerConfig(spec.optimizer.kind, spec.optimizer.step_size,
                                        spec.optimizer.schedule, spec.optimizer.batch_size,
                                        phase1, spec.optimizer.seed)
        r1 = training.train(problem, opt1, reg, fq)
        pruned, masks, _ = training.prune(r1.params, spec.prune_threshold, reg.groups)
        problem2 = training.TrainProblem(pruned, problem.build_loss, problem.n_frames)
        opt2 = training.OptimizerConfig(spec.optimizer.kind, spec.optimizer.step_size / 2.0,
                                        "constant", spec.optimizer.batch_size,
                                        total - phase1, spec.optimizer.seed + 1)
        r2 = training.train(problem2, opt2, training.RegularizerConfig(0.0, 0.0, reg.groups),
                            fq, masks=masks)
        params, history = r2.params, r1.history + [
            [r1.history[-1][0] + 1 + h[0], h[1], h[2], h[3], h[4]] for h in r2.history]

    trained = _model_from_params(cfg, model, params)
    quantization = None
    if fq.enabled:
        scales = {name: float(np.max(np.abs(v))) for name, v in params.items()
                  if fq.selects(name)}
        quantization = {"enabled": True, "bits": fq.bits, "scales": scales}
    payload = _payload_from_model(cfg, trained, quantization)
    model_path = os.path.join(out_dir, "model.json")
    art.save_artifact(model_path, payload)
    write_history_csv(os.path.join(out_dir, "history.csv"), history)
    return model_path


# ---------------------------------------------------------------------------
# evaluate


def quantized_view(payload: dict):
    """Apply stored coefficient quantization before rebuilding the model."""
    q = payload.get("quantization")
    if not q or not q.get("enabled"):
        return payload
    out = json.loads(json.dumps(payload))
    for name, scale in q["scales"].items():
        p = out["params"][name]
        data = training.fake_quantize(np.array(p["data"]),
                                      training.FakeQuantConfig(q["bits"], True), scale)
        p["data"] = np.asarray(data).tolist()
    return out


def _receiver_fn(cfg: ExperimentConfig, model):
    r = cfg.receiver
    if r.kind == "dbp":
        return lambda f: chains.dbp_receiver(f, model), False
    if r.kind == "subband_dbp":
        sb_model, bank = model

        def run(f):
            return chains.subband_receiver(subband.split(f.rx_signal(), bank), sb_model, bank)
        return run, False
    if r.kind == "pmd_multistage":
        def run(f):
            g = chains.linear_receiver(f, cfg.fiber)
            return pmd.pmd_comp_forward(g, model)
        return run, False

    def run(f):
        g = chains.linear_receiver(f, cfg.fiber)
        return pmd.mimo_fir_apply(g, model)
    return run, True  # blind equalizer: align polarizations independently


def cmd_evaluate(cfg: ExperimentConfig, out_dir: str, model_path: str | None = None,
                 threads: int = 1) -> dict:
    payload = art.load_artifact(model_path or os.path.join(out_dir, "model.json"))
    model = model_from_artifact(cfg, quantized_view(payload))
    receiver, per_pol = _receiver_fn(cfg, model)
    n_eval = cfg.evaluation.eval_frames or cfg.dataset.eval_frames
    per_power = []
    for power in cfg.evaluation.power_sweep_dbm:
        frames = generate_frames(cfg, "eval", n_eval, power, threads)
        snr = chains.mean_snr(frames, cfg.chain, receiver, per_polarization=per_pol)
        per_power.append({"power_dbm": power, "eff_snr_db": snr})
    report = {
        "schema_version": 1,
        "config_digest": cfg.digest(),
        "model_digest": payload["digest"],
        "per_power": per_power,
    }
    if payload["kind"] == "dbp":
        rep = dbp.complexity_report(art.dbp_from_payload(payload))
        report["complexity"] = {"real_mults_per_sample": rep["real_mults_per_sample"],
                                "total_taps": rep["total_taps"]}
    if payload["kind"] == "subband_dbp":
        sb_model = model[0]
        zeros = total = 0
        for st in sb_model.steps:
            rep = subband.sparsity_report(st.coupling)
            zeros += rep["zeros"]
            total += rep["total"]
        report["sparsity"] = {"zeros": zeros, "total": total,
                              "fraction": zeros / total if total else 0.0}
    art.atomic_write_text(os.path.join(out_dir, "evaluation.json"),
                          json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n")
    return report


# ---------------------------------------------------------------------------
# export / import / report


def cmd_export(artifact_path: str, dest: str) -> str:
    payload = art.load_artifact(artifact_path)
    return art.save_artifact(dest, {k: v for k, v in payload.items()
                                    if k not in ("digest", "schema_version")})


def cmd_import(src: str, out_dir: str) -> str:
    payload = art.load_artifact(src)
    dest = os.path.join(out_dir, "model.json")
    art.save_artifact(dest, {k: v for k, v in payload.items()
                             if k not in ("digest", "schema_version")})
    return dest


def cmd_report(artifact_path: str) -> dict:
    payload = art.load_artifact(artifact_path)
    out = {"kind": payload["kind"], "digest": payload["digest"]}
    if payload["kind"] == "dbp":
        out["complexity"] = dbp.complexity_report(art.dbp_from_payload(payload))
    if payload["kind"] == "subband_dbp":
        model = art.subband_from_payload(payload)
        out["sparsity_per_step"] = [subband.sparsity_report(st.coupling) for st in model.steps]
    if "quantization" in payload:
        out["quantization"] = {k: payload["quantization"][k] for k in ("enabled", "bits")}
    return out


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    p = argparse.ArgumentParser(prog="msdbp",
                                description="multi-step DBP simulation and learning workbench")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", required=True, help="config path or preset:NAME")
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        if out:
            sp.add_argument("--out", required=True, help="experiment output directory")
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("simulate", help="generate the dataset for a config")
    common(sp)
    sp = sub.add_parser("train", help="train the configured receiver on a dataset")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    sp.add_argument("--stop-after", type=int, default=None,
                    help="pause after N iterations (checkpoint remains resumable)")
    sp = sub.add_parser("evaluate", help="evaluate a trained model over the power sweep")
    common(sp)
    sp.add_argument("--model", default=None, help="artifact path (default: OUT/model.json)")
    sp = sub.add_parser("export", help="verify and re-serialize an artifact")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dest", required=True)
    sp.add_argument("--threads", type=int, default=1)
    sp = sub.add_parser("import", help="verify an artifact and install it into an experiment dir")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int, default=1)
    sp = sub.add_parser("report", help="print complexity/sparsity accounting of an artifact")
    sp.add_argument("--model", required=True)
    sp.add_argument("--threads", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "simulate":
            cfg = load_config(resolve_config_path(args.config), args.seed)
            with _lock(args.out):
                cmd_simulate(cfg, args.out, args.threads)
        elif args.verb == "train":
            cfg = load_config(resolve_config_path(args.config), args.seed)
            with _lock(args.out):
                cmd_train(cfg, args.out, resume=args.resume, stop_after=args.stop_after)
        elif args.verb == "evaluate":
            cfg = load_config(resolve_config_path(args.config), args.seed)
            with _lock(args.out):
                report = cmd_evaluate(cfg, args.out, args.model, args.threads)
            json.dump(report, sys.stdout, indent=2, sort_keys=True)
            print()
        elif args.verb == "export":
            cmd_export(args.model, args.dest)
        elif args.verb == "import":
            cmd_import(args.model, args.out)
        elif args.verb == "report":
            json.dump(cmd_report(args.model), sys.stdout, indent=2, sort_keys=True)
            print()
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
