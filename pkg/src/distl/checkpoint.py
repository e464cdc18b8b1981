"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DISTLCKP"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    ...       raw C-order array payloads, back to back

The header holds ``spec`` (ModelSpec fields), ``meta`` (generation,
global_step, rng_state, optimizer hyper-parameters, free-form metadata) and
``arrays``: a list of ``{name, dtype, shape, offset, nbytes}`` where
``offset`` is relative to the start of the payload. Array names are
``student/<param>``, ``teacher/<param>``, ``center`` and
``optim/<index>/<field>``. The writer is deterministic: equal checkpoints
serialize to equal bytes.
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from distl.errors import InvalidInputError
from distl.model import ModelSpec, build_model

MAGIC = b"DISTLCKP"
FORMAT_VERSION = 1


def _arrays(ckpt) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, model in (("student", ckpt.student), ("teacher", ckpt.teacher)):
        for name, t in model.state_dict().items():
            out.append((f"{prefix}/{name}", t.detach().cpu().numpy()))
    out.append(("center", ckpt.center.detach().cpu().numpy()))
    if ckpt.optimizer is not None:
        for idx, st in sorted(ckpt.optimizer.state_dict()["state"].items()):
            for key in sorted(st):
                val = st[key]
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                out.append((f"optim/{idx}/{key}", arr))
    return out


def _optimizer_meta(opt) -> dict | None:
    if opt is None:
        return None
    groups = []
    for g in opt.state_dict()["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
    return {"type": type(opt).__name__, "param_groups": groups}


def dumps(ckpt) -> bytes:
    arrays = _arrays(ckpt)
    index, offset, blobs = [], 0, []
    for name, arr in arrays:
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "meta": {
            "generation": ckpt.generation,
            "global_step": ckpt.global_step,
            "rng_state": ckpt.rng_state,
            "optimizer": _optimizer_meta(ckpt.optimizer),
            "extra": ckpt.meta,
        },
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_json_default).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def save_checkpoint(ckpt, path) -> str:
    """Write ``ckpt`` to ``path`` atomically; returns the SHA-256 of the bytes."""
    data = dumps(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def read_header(data: bytes) -> tuple[dict, int]:
    if data[:8] != MAGIC:
        raise InvalidInputError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version > FORMAT_VERSION:
        raise InvalidInputError(f"checkpoint format {version} is newer than supported {FORMAT_VERSION}")
    header = json.loads(data[20:20 + hlen].decode())
    return header, 20 + hlen


def loads(data: bytes):
    from distl.distill import Checkpoint

    header, start = read_header(data)
    arrays = {}
    for ent in header["arrays"]:
        lo = start + ent["offset"]
        buf = data[lo:lo + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(buf, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    spec = ModelSpec(**header["spec"])
    meta = header["meta"]

    def _model(prefix):
        model = build_model(spec, 0)
        state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items()
                 if k.startswith(prefix + "/")}
        if state and next(iter(state.values())).dtype == torch.float64:
            model = model.double()
        model.load_state_dict(state)
        return model

    student, teacher = _model("student"), _model("teacher")
    optimizer = None
    opt_meta = meta.get("optimizer")
    if opt_meta is not None:
        groups = copy.deepcopy(opt_meta["param_groups"])
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        cls = getattr(torch.optim, opt_meta["type"])
        optimizer = cls(student.parameters(), lr=groups[0].get("lr", 1e-3))
        state = {}
        for name, arr in arrays.items():
            if name.startswith("optim/"):
                _, idx, key = name.split("/", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
        optimizer.load_state_dict({"state": state, "param_groups": groups})
    return Checkpoint(
        spec=spec, student=student, teacher=teacher,
        center=torch.from_numpy(arrays["center"]),
        optimizer=optimizer, generation=meta["generation"], global_step=meta["global_step"],
        rng_state=meta.get("rng_state") or {}, meta=meta.get("extra") or {},
    )


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
