"""Binary checkpoint format.

Layout (little endian)::

    b"SURD"  u32 version  u32 tensor_count
    per tensor: u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 data
    u32 config_len, config text (utf-8 ``key=value`` lines)

The trailing config block is optional on read.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SURD"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    config: dict = field(default_factory=dict)
    version: int = VERSION


def encode(tensors: dict, config: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    text = "".join(f"{k}={v}\n" for k, v in (config or {}).items()).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}, "
                                  f"file has {len(view)}")
        out = view[pos:pos + n]
        pos += n
        return out

    magic = bytes(take(4))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported version: expected {VERSION}, found {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = data
    config = {}
    if pos < len(view):
        (n,) = struct.unpack("<I", take(4))
        for line in bytes(take(n)).decode("utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                config[k] = v
    return Checkpoint(tensors, config, version)


def save_checkpoint(path, tensors: dict, config: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensors, config))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())


# ---------------------------------------------------------------------------
# models

MODEL_KEYS = ("height", "width", "channels", "patch", "embed_dim", "depth", "heads",
              "mlp_ratio", "num_classes", "bn_neck", "stage_layers", "keep_ratio")


def model_config_dict(cfg) -> dict:
    """Architecture echo stored under ``model.*`` keys."""
    p = cfg.patch
    sched = cfg.sparsify
    return {
        "model.height": p.height, "model.width": p.width, "model.channels": p.channels,
        "model.patch": p.patch, "model.embed_dim": cfg.embed_dim, "model.depth": cfg.depth,
        "model.heads": cfg.heads, "model.mlp_ratio": cfg.mlp_ratio,
        "model.num_classes": cfg.num_classes, "model.bn_neck": int(cfg.bn_neck),
        "model.stage_layers": "" if sched is None else ",".join(map(str, sched.stage_layers)),
        "model.keep_ratio": "" if sched is None else sched.base_ratio,
    }


def model_config_from(config: dict):
    from . import hts, vit

    try:
        m = {k: config["model." + k] for k in MODEL_KEYS}
        patch = vit.PatchConfig(int(m["height"]), int(m["width"]), int(m["channels"]),
                                int(m["patch"]))
        sched = None
        if m["stage_layers"]:
            layers = tuple(int(v) for v in m["stage_layers"].split(","))
            sched = hts.SparsifySchedule(layers, float(m["keep_ratio"]))
        return vit.ModelConfig(patch, int(m["embed_dim"]), int(m["depth"]), int(m["heads"]),
                               float(m["mlp_ratio"]), int(m["num_classes"]), sched,
                               bool(int(m["bn_neck"])))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint has no architecture entry {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CheckpointError(f"bad architecture entry in checkpoint: {exc}") from None


def save_model(path, model, config: dict | None = None) -> None:
    merged = dict(config or {})
    merged.update(model_config_dict(model.cfg))
    save_checkpoint(path, model.state_dict(), merged)


def load_model(path):
    """Rebuild a VisionTransformer; every tensor must match the stored architecture."""
    from . import vit
    from .numerics import Tensor

    ckpt = load_checkpoint(path)
    cfg = model_config_from(ckpt.config)
    fresh = vit.init_params(cfg)
    missing = sorted(set(fresh) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(fresh))
    if missing or extra:
        raise CheckpointError(f"tensor names differ from the architecture: missing {missing}, "
                              f"unexpected {extra}")
    params = {}
    for name, ref in fresh.items():
        data = ckpt.tensors[name]
        if data.shape != ref.shape:
            raise CheckpointError(f"{name}: expected shape {ref.shape}, found {data.shape}")
        params[name] = Tensor(data.copy(), requires_grad=ref.requires_grad, name=name)
    return vit.VisionTransformer(cfg, params)
