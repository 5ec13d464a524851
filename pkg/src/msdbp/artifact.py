"""Model artifacts: versioned, digest-protected, human-diffable JSON.

One text file holds the architecture descriptor, every parameter
(complex taps as real/imaginary pair arrays, tensors flattened in
row-major order with their axis meaning spelled out), optional
quantization metadata, and provenance (config digest plus seeds).  The
content digest covers the canonical serialization of everything except
the digest itself; loads verify it, so a flipped byte surfaces as an
integrity error rather than silently perturbing a model.  Writes are
atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .channel import FiberParams
from .dbp import DbpModel, DbpStep, FoldedFir
from .errors import IntegrityError
from .pmd import FdFilter, MimoFirBaseline, PmdStage, RotationParams
from .subband import MimoIntensityTensor, SubbandDbpModel, SubbandStep, TensorCascade

ARTIFACT_VERSION = 1


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def compute_digest(payload: dict) -> str:
    body = {k: v for k, v in payload.items() if k != "digest"}
    return hashlib.sha256(_canonical(body).encode()).hexdigest()


def atomic_write_text(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_artifact(path: str, payload: dict) -> str:
    payload = dict(payload)
    payload["schema_version"] = ARTIFACT_VERSION
    payload["digest"] = compute_digest(payload)
    atomic_write_text(path, _canonical(payload) + "\n")
    return payload["digest"]


def load_artifact(path: str) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("schema_version")
    if version != ARTIFACT_VERSION:
        raise IntegrityError(
            f"artifact schema version {version!r} not supported (expected {ARTIFACT_VERSION})")
    digest = payload.get("digest")
    if digest != compute_digest(payload):
        raise IntegrityError("artifact digest mismatch: file corrupted or tampered")
    return payload


def _arr(a, axes: str) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "axes": axes, "data": a.reshape(-1).tolist()}


def _unarr(d) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


# ---------------------------------------------------------------------------
# model <-> payload


def dbp_to_payload(model: DbpModel, provenance: dict, quantization: dict | None = None) -> dict:
    params = {}
    for i, st in enumerate(model.steps):
        params[f"step{i:02d}.re"] = _arr(st.filter.half_taps.real, "half-tap real part")
        params[f"step{i:02d}.im"] = _arr(st.filter.half_taps.imag, "half-tap imaginary part")
        params[f"step{i:02d}.nl"] = _arr([st.nl_scale], "nonlinear scale rad/W")
    payload = {
        "kind": "dbp",
        "architecture": {
            "taps_per_step": model.tap_counts,
            "samples_per_symbol": model.samples_per_symbol,
            "sample_rate_hz": model.sample_rate,
            "fiber": None if model.fiber is None else {
                "beta2_ps2_per_km": model.fiber.beta2, "gamma_per_w_km": model.fiber.gamma,
                "alpha_db_per_km": model.fiber.alpha_db, "span_km": model.fiber.span_length,
                "n_spans": model.fiber.n_spans},
            "seed": model.seed,
        },
        "params": params,
        "provenance": provenance,
    }
    if quantization:
        payload["quantization"] = quantization
    return payload


def dbp_from_payload(payload: dict) -> DbpModel:
    arch = payload["architecture"]
    fiber = None
    if arch.get("fiber"):
        fb = arch["fiber"]
        fiber = FiberParams(fb["beta2_ps2_per_km"], fb["gamma_per_w_km"],
                            fb["alpha_db_per_km"], fb["span_km"], fb["n_spans"])
    steps = []
    for i, k in enumerate(arch["taps_per_step"]):
        re = _unarr(payload["params"][f"step{i:02d}.re"])
        im = _unarr(payload["params"][f"step{i:02d}.im"])
        nl = float(_unarr(payload["params"][f"step{i:02d}.nl"])[0])
        steps.append(DbpStep(FoldedFir(re + 1j * im, int(k)), nl))
    return DbpModel(tuple(steps), int(arch["samples_per_symbol"]),
                    float(arch["sample_rate_hz"]), fiber, arch.get("seed"))


def subband_to_payload(model: SubbandDbpModel, provenance: dict) -> dict:
    params = {}
    arch_steps = []
    for i, st in enumerate(model.steps):
        for k, taps in enumerate(st.taps):
            t = np.asarray(taps)
            params[f"sb{i:02d}.b{k}.re"] = _arr(t.real, "subband tap real part")
            params[f"sb{i:02d}.b{k}.im"] = _arr(t.imag, "subband tap imaginary part")
        if isinstance(st.coupling, TensorCascade):
            stage_lengths = [s.n_taps for s in st.coupling.stages]
            for si, stage in enumerate(st.coupling.stages):
                params[f"sb{i:02d}.mimo{si}"] = _arr(
                    stage.coefficients, "output subband x input subband x tap")
        else:
            stage_lengths = None
            params[f"sb{i:02d}.mimo0"] = _arr(
                st.coupling.coefficients, "output subband x input subband x tap")
        arch_steps.append({
            "taps_per_subband": [len(t) for t in st.taps],
            "cascade_lengths": stage_lengths,
            "coupling_taps": (st.coupling.stages[0].n_taps
                              if isinstance(st.coupling, TensorCascade)
                              else st.coupling.n_taps),
        })
    return {
        "kind": "subband_dbp",
        "architecture": {
            "n_subbands": model.n_subbands,
            "subband_rate_hz": model.subband_rate,
            "steps": arch_steps,
        },
        "params": params,
        "provenance": provenance,
    }


def subband_from_payload(payload: dict) -> SubbandDbpModel:
    arch = payload["architecture"]
    s = int(arch["n_subbands"])
    steps = []
    for i, meta in enumerate(arch["steps"]):
        taps = tuple(_unarr(payload["params"][f"sb{i:02d}.b{k}.re"]) +
                     1j * _unarr(payload["params"][f"sb{i:02d}.b{k}.im"])
                     for k in range(s))
        if meta["cascade_lengths"]:
            stages = tuple(MimoIntensityTensor(_unarr(payload["params"][f"sb{i:02d}.mimo{si}"]))
                           for si in range(len(meta["cascade_lengths"])))
            coupling = TensorCascade(stages)
        else:
            coupling = MimoIntensityTensor(_unarr(payload["params"][f"sb{i:02d}.mimo0"]))
        steps.append(SubbandStep(taps, coupling))
    return SubbandDbpModel(tuple(steps), s, float(arch["subband_rate_hz"]))


def pmd_stages_to_payload(stages, provenance: dict) -> dict:
    params = {}
    for i, st in enumerate(stages):
        params[f"stage{i:02d}.ang"] = _arr(st.rotation.angles, "mixing, phase-1, phase-2")
        params[f"stage{i:02d}.fd"] = _arr(st.fd.taps, "fractional-delay tap")
    return {
        "kind": "pmd_multistage",
        "architecture": {"n_stages": len(stages),
                         "fd_length": len(stages[0].fd.taps) if stages else 0},
        "params": params,
        "provenance": provenance,
    }


def pmd_stages_from_payload(payload: dict):
    n = int(payload["architecture"]["n_stages"])
    return [PmdStage(RotationParams(_unarr(payload["params"][f"stage{i:02d}.ang"])),
                     FdFilter(_unarr(payload["params"][f"stage{i:02d}.fd"])))
            for i in range(n)]


def mimo_to_payload(w: MimoFirBaseline, provenance: dict) -> dict:
    return {
        "kind": "pmd_mimo",
        "architecture": {"taps": w.tensor.shape[2]},
        "params": {"mimo.w": _arr(w.tensor, "output component x input component x tap")},
        "provenance": provenance,
    }


def mimo_from_payload(payload: dict) -> MimoFirBaseline:
    return MimoFirBaseline(_unarr(payload["params"]["mimo.w"]))


def model_from_payload(payload: dict):
    kind = payload.get("kind")
    loaders = {"dbp": dbp_from_payload, "subband_dbp": subband_from_payload,
               "pmd_multistage": pmd_stages_from_payload, "pmd_mimo": mimo_from_payload}
    if kind not in loaders:
        raise IntegrityError(f"unknown artifact kind {kind!r}")
    return loaders[kind](payload)
