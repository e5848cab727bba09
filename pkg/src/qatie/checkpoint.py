"""Versioned binary checkpoint container.

Byte layout (all integers little-endian):

    header   8s   magic "QATIECKP"
             u32  version (currently 1)
             u32  tensor count
    tensor   u16  name length, then UTF-8 name
             u8   dtype tag: 0=f32, 1=i8, 2=u8, 3=i32
             u8   rank
             u32  x rank dims
             raw row-major payload
    qparams  u32  entry count
    entry    u16  name length, then UTF-8 name
             u8   flags: bit0 signed, bit1 per-channel
             i8   channel axis (-1 when per-tensor)
             u8   bits
             u32  value count n
             f64  x n scales
             i32  x n zero points
    config   u32  byte length, then UTF-8 JSON (sorted keys)

Tensors and qparams are written in sorted name order, so identical state
always produces identical bytes (save -> load -> save is a fixed point).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import CheckpointError
from .int8 import Int8Network, int8_from_state, int8_state
from .model import ModelConfig, Network, init_network
from .qat import QatNetwork, QatPlan, attach_fakequant, default_qat_plan
from .quant import QuantParams
from .tensor import Tensor

MAGIC = b"QATIECKP"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("u1"), 3: np.dtype("<i4")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.int8): 1,
            np.dtype(np.uint8): 2, np.dtype(np.int32): 3}


def _write_name(buf, name: str):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int, what: str) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def _read_name(buf, what: str) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2, what))
    return _read_exact(buf, n, what).decode("utf-8")


def save_checkpoint(path, tensors: dict[str, np.ndarray],
                    qparams: dict[str, QuantParams], config: dict) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _TAG_FOR:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        _write_name(buf, name)
        buf.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_DTYPE_TAGS[_TAG_FOR[arr.dtype]], copy=False).tobytes())
    buf.write(struct.pack("<I", len(qparams)))
    for name in sorted(qparams):
        qp = qparams[name]
        scales = np.atleast_1d(np.asarray(qp.scale, dtype="<f8"))
        zps = np.atleast_1d(np.asarray(qp.zero_point, dtype="<i4"))
        flags = (1 if qp.signed else 0) | (2 if qp.per_channel_axis is not None else 0)
        axis = qp.per_channel_axis if qp.per_channel_axis is not None else -1
        _write_name(buf, name)
        buf.write(struct.pack("<BbBI", flags, axis, qp.bits, scales.size))
        buf.write(scales.tobytes())
        buf.write(zps.tobytes())
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    magic = _read_exact(buf, 8, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    version, n_tensors = struct.unpack("<II", _read_exact(buf, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = _read_name(buf, "tensor name")
        tag, rank = struct.unpack("<BB", _read_exact(buf, 2, f"tensor {name!r} header"))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, f"tensor {name!r} dims"))
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        raw = _read_exact(buf, nbytes, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    (n_qp,) = struct.unpack("<I", _read_exact(buf, 4, "qparams count"))
    qparams: dict[str, QuantParams] = {}
    for _ in range(n_qp):
        name = _read_name(buf, "qparams name")
        flags, axis, bits, n = struct.unpack("<BbBI", _read_exact(buf, 7, f"qparams {name!r}"))
        scales = np.frombuffer(_read_exact(buf, 8 * n, f"qparams {name!r} scales"), "<f8").copy()
        zps = np.frombuffer(_read_exact(buf, 4 * n, f"qparams {name!r} zero points"), "<i4").copy()
        per_channel = bool(flags & 2)
        qparams[name] = QuantParams(
            scale=scales if per_channel else scales.reshape(()),
            zero_point=zps if per_channel else zps.reshape(()),
            signed=bool(flags & 1),
            per_channel_axis=axis if per_channel else None,
            bits=bits,
        )
    (cfg_len,) = struct.unpack("<I", _read_exact(buf, 4, "config length"))
    config = json.loads(_read_exact(buf, cfg_len, "config blob").decode("utf-8"))
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint config block")
    return tensors, qparams, config


# --------------------------------------------------------- model-level API


def _model_config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def save_model(path, model, extra: dict | None = None) -> None:
    """Write a Network (fp32), QatNetwork (fp32 + observers) or Int8Network."""
    extra = extra or {}
    if isinstance(model, Int8Network):
        tensors, qparams = int8_state(model)
        config = {"kind": "int8", "model": _model_config_dict(model.config), **extra}
    elif isinstance(model, QatNetwork):
        tensors = {name: p.data.astype(np.float32, copy=False)
                   for name, p in model.named_parameters()}
        for pname, state in model.observer_states().items():
            tensors[f"qat.obs.{pname}"] = state
        qparams = {}
        config = {"kind": "qat", "model": _model_config_dict(model.config),
                  "momentum": model.inst.plan.momentum, **extra}
    elif isinstance(model, Network):
        tensors = {name: p.data.astype(np.float32, copy=False)
                   for name, p in model.named_parameters()}
        qparams = {}
        config = {"kind": "fp32", "model": _model_config_dict(model.config), **extra}
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    save_checkpoint(path, tensors, qparams, config)


def load_model(path):
    """Returns (model, config_echo). The model kind is auto-detected."""
    tensors, qparams, config = load_checkpoint(path)
    kind = config.get("kind")
    mcfg = _config_from_dict(config["model"])
    if kind == "int8":
        return int8_from_state(tensors, qparams, mcfg), config
    if kind in ("fp32", "qat"):
        net = init_network(mcfg, seed=0)
        for name, p in net.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {tensors[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = tensors[name].astype(np.float32, copy=True)
        if kind == "fp32":
            return net, config
        qnet = attach_fakequant(net, default_qat_plan(config.get("momentum", 0.99)))
        states = {name[len("qat.obs."):]: arr for name, arr in tensors.items()
                  if name.startswith("qat.obs.")}
        qnet.load_observer_states(states)
        return qnet, config
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")
