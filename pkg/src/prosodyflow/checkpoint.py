"""Checkpoint serialization.

Layout: one JSON header line (magic string, format version, kind, dims,
metadata, named parameter manifest with shapes and byte offsets), then the
raw little-endian float32 parameter payload in manifest order. The
manifest is sorted by name, so the sha256 of the payload equals
``FlowModel.param_hash()`` / ``cascade_param_hash()``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict

import numpy as np

from .cascade import Cascade
from .generative import FlowModel
from .autodiff import Tensor

MAGIC = "prosodyflow-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _manifest_and_payload(named: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(named):
        arr = named[name].astype("<f4")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def _read_params(manifest: list[dict], payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def _write(path, header: dict, payload: bytes) -> None:
    header = {"magic": MAGIC, "version": FORMAT_VERSION, **header,
              "payload_bytes": len(payload),
              "param_hash": hashlib.sha256(payload).hexdigest()}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)


def _read(path) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint (bad header)") from exc
    if header.get("magic") != MAGIC:
        raise CheckpointError(
            f"{path}: magic {header.get('magic')!r} != expected {MAGIC!r}"
        )
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')} != expected {FORMAT_VERSION}"
        )
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"{path}: truncated payload, header promises {header.get('payload_bytes')} "
            f"bytes, found {len(payload)}"
        )
    actual = hashlib.sha256(payload).hexdigest()
    if actual != header.get("param_hash"):
        raise CheckpointError(
            f"{path}: payload hash {actual} does not match header "
            f"{header.get('param_hash')}"
        )
    return header, payload


def _model_descriptor(model: FlowModel) -> dict:
    return {
        "kind": model.kind,
        "noise_dim": model.noise_dim,
        "out_dim": model.out_dim,
        "sigma_min": model.sigma_min,
        "solver_steps": model.solver_steps,
        "share_noise_across_groups": model.share_noise_across_groups,
        "net_config": asdict(model.net.config),
        "metadata": model.metadata,
    }


def _model_from_descriptor(desc: dict, state: dict[str, np.ndarray]) -> FlowModel:
    from .nets import (CouplingConfig, CouplingStack, DetConfig, DetPredictor,
                       DiTConfig, DiTStack)

    cfg = desc["net_config"]
    rng = np.random.default_rng(0)  # overwritten by load_state below
    kind = desc["kind"]
    if kind in ("CFM", "RF"):
        net = DiTStack(DiTConfig(**cfg), rng)
    elif kind == "NF":
        net = CouplingStack(CouplingConfig(**cfg), rng)
    elif kind == "DET":
        net = DetPredictor(DetConfig(**cfg), rng)
    else:
        raise CheckpointError(f"unknown model kind {kind!r} in checkpoint")
    net.load_state(state)
    return FlowModel(
        kind=kind,
        net=net,
        noise_dim=desc["noise_dim"],
        out_dim=desc["out_dim"],
        sigma_min=desc["sigma_min"],
        solver_steps=desc["solver_steps"],
        share_noise_across_groups=desc["share_noise_across_groups"],
        metadata=desc.get("metadata", {}),
    )


def save_model(path, model: FlowModel, extra_metadata: dict | None = None) -> None:
    named = {k: v.data for k, v in model.net.params().items()}
    manifest, payload = _manifest_and_payload(named)
    desc = _model_descriptor(model)
    if extra_metadata:
        desc["metadata"] = {**desc["metadata"], **extra_metadata}
    _write(path, {"payload_kind": "model", "model": desc, "params": manifest}, payload)


def load_model(path) -> FlowModel:
    header, payload = _read(path)
    if header.get("payload_kind") != "model":
        raise CheckpointError(f"{path}: holds {header.get('payload_kind')!r}, not a model")
    state = _read_params(header["params"], payload)
    return _model_from_descriptor(header["model"], state)


def save_cascade(path, cascade: Cascade, extra_metadata: dict | None = None) -> None:
    named: dict[str, np.ndarray] = {}
    variables = {}
    for var, model in cascade.models.items():
        variables[var] = _model_descriptor(model)
        for name, p in model.net.params().items():
            named[f"{var}.{name}"] = p.data
    for var, w in cascade.projections.items():
        named[f"proj.{var}"] = w.data
    manifest, payload = _manifest_and_payload(named)
    header = {
        "payload_kind": "cascade",
        "cascade": {
            "mode": cascade.mode,
            "order": list(cascade.order),
            "condition_dim": cascade.condition_dim,
            "variables": variables,
            "metadata": {**cascade.metadata, **(extra_metadata or {})},
        },
        "params": manifest,
    }
    _write(path, header, payload)


def load_cascade(path) -> Cascade:
    header, payload = _read(path)
    if header.get("payload_kind") != "cascade":
        raise CheckpointError(f"{path}: holds {header.get('payload_kind')!r}, not a cascade")
    state = _read_params(header["params"], payload)
    desc = header["cascade"]
    models = {}
    for var, model_desc in desc["variables"].items():
        prefix = f"{var}."
        sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)
               and not k.startswith("proj.")}
        models[var] = _model_from_descriptor(model_desc, sub)
    projections = {}
    for key, arr in state.items():
        if key.startswith("proj."):
            var = key[len("proj."):]
            projections[var] = Tensor(arr, requires_grad=True, name=key)
    return Cascade(mode=desc["mode"], order=tuple(desc["order"]), models=models,
                   projections=projections, condition_dim=desc["condition_dim"],
                   metadata=desc.get("metadata", {}))


def cascade_param_hash(cascade: Cascade) -> str:
    named: dict[str, np.ndarray] = {}
    for var, model in cascade.models.items():
        for name, p in model.net.params().items():
            named[f"{var}.{name}"] = p.data
    for var, w in cascade.projections.items():
        named[f"proj.{var}"] = w.data
    _, payload = _manifest_and_payload(named)
    return hashlib.sha256(payload).hexdigest()


def peek_header(path) -> dict:
    header, _ = _read(path)
    return header
