"""Versioned binary checkpoint container.

Layout: magic "DCKP", u32 format version, u64 JSON header length, the JSON
header, then the raw little-endian array payload. The header maps each
array (parameters plus optional optimizer moments) to dtype/shape/offset
and embeds the full model configuration; loading rebuilds the model from
that configuration and validates every stored shape against it, restoring
values bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, config_to_dict, model_config_from_dict
from .errors import ConfigError, DataError
from .model import DiscoNet, build_model

MAGIC = b"DCKP"
FORMAT_VERSION = 1


@dataclass
class CheckpointBundle:
    model: DiscoNet
    model_config: ModelConfig
    iteration: int
    optimizer_state: dict | None
    extra: dict


def _le_dtype(arr: np.ndarray) -> str:
    kind = np.dtype(arr.dtype).str
    return "<" + kind[1:]


def save_checkpoint(path, model: DiscoNet, iteration: int, optimizer=None, extra=None):
    """Serialize parameters (and optimizer moments) with the model config."""
    arrays = []
    blobs = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=_le_dtype(arr))
        arrays.append(
            {
                "name": name,
                "dtype": _le_dtype(arr),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": data.nbytes,
            }
        )
        blobs.append(data.tobytes())
        offset += data.nbytes

    for pname, p in model.named_parameters():
        add("param:" + pname, p.data)
    optim_header = None
    if optimizer is not None:
        state = optimizer.state_dict()
        optim_header = {"step_count": state["step_count"]}
        for pname, arr in state["m"].items():
            add("adam_m:" + pname, arr)
        for pname, arr in state["v"].items():
            add("adam_v:" + pname, arr)

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": config_to_dict(model.config),
        "iteration": int(iteration),
        "optimizer": optim_header,
        "extra": extra or {},
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> CheckpointBundle:
    """Rebuild the model from the embedded config and restore all arrays."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise DataError(f"checkpoint: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"checkpoint: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint: corrupt header: {exc}") from exc
    payload_start = 16 + hlen

    cfg = model_config_from_dict(header["model_config"])
    model = build_model(cfg)
    stored = {}
    for meta in header["arrays"]:
        start = payload_start + meta["offset"]
        end = start + meta["nbytes"]
        if end > len(buf):
            raise DataError(
                f"checkpoint: array {meta['name']} extends past end of file"
            )
        arr = np.frombuffer(buf[start:end], dtype=np.dtype(meta["dtype"]))
        stored[meta["name"]] = arr.reshape(meta["shape"]).copy()

    for pname, p in model.named_parameters():
        key = "param:" + pname
        if key not in stored:
            raise ConfigError(f"checkpoint missing parameter {pname}")
        arr = stored[key]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ConfigError(
                f"checkpoint shape mismatch for {pname}: stored {arr.shape} "
                f"vs config-derived {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=True)

    optimizer_state = None
    if header.get("optimizer") is not None:
        m = {
            k[len("adam_m:") :]: v for k, v in stored.items() if k.startswith("adam_m:")
        }
        v = {
            k[len("adam_v:") :]: a for k, a in stored.items() if k.startswith("adam_v:")
        }
        optimizer_state = {
            "step_count": header["optimizer"]["step_count"],
            "m": m,
            "v": v,
        }

    return CheckpointBundle(
        model=model,
        model_config=cfg,
        iteration=int(header["iteration"]),
        optimizer_state=optimizer_state,
        extra=header.get("extra", {}),
    )
