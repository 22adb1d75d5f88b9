"""Siamese pyramid encoder, metric projection head and metric-induced decoder."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import DimensionError, IntegrityError, Tensor

DecoderKind = Literal["metric", "simple", "none"]
N_LEVELS = 5
CKPT_MAGIC = b"DCLM1"


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (8, 16, 24, 32, 48)
    embed_dim: int = 16
    input_size: int = 64
    decoder: DecoderKind = "metric"
    dec_width: int = 16

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != N_LEVELS:
            raise ConfigError(f"need {N_LEVELS} stages, got {len(self.stage_channels)}")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} is not divisible by 32")
        if self.decoder not in ("metric", "simple", "none"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")


@dataclass
class ModelParams:
    """All trainable tensors keyed by stable names, plus the architecture."""

    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.astype(dtype), name=k)
                                         for k, v in self.tensors.items()})


def _conv_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    prev = cfg.in_channels
    for i, c in enumerate(cfg.stage_channels, 1):
        shapes[f"enc.s{i}.conv1"] = (c, prev, 3, 3)
        shapes[f"enc.s{i}.conv2"] = (c, c, 3, 3)
        prev = c
    shapes["proj"] = (cfg.embed_dim, sum(cfg.stage_channels), 3, 3)
    if cfg.decoder == "none":
        return shapes
    w = cfg.dec_width
    for i, c in enumerate(cfg.stage_channels, 1):
        shapes[f"dec.fuse{i}"] = (w, 2 * c, 3, 3)
    for i in range(1, N_LEVELS):
        extra = 2 * cfg.embed_dim + 1 if (i == 1 and cfg.decoder == "metric") else 0
        shapes[f"dec.cross{i}"] = (w, w + extra, 3, 3)
    for i in range(1, N_LEVELS + 1):
        shapes[f"dec.head{i}"] = (w, w, 1, 1)
    shapes["dec.cls"] = (1, N_LEVELS * w, 1, 1)
    return shapes


def init_params(cfg: EncoderConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases, drawn in name order from one seeded stream."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _conv_shapes(cfg).items():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        tensors[f"{name}.weight"] = Tensor(w.astype(dtype), name=f"{name}.weight")
        tensors[f"{name}.bias"] = Tensor(np.zeros(shape[0], dtype=dtype), name=f"{name}.bias")
    return ModelParams(cfg, tensors)


def _conv(x: Tensor, params: ModelParams, name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.weight"]
    return T.conv2d(x, w, params[f"{name}.bias"], stride=stride, pad=w.shape[2] // 2)


def siamese_encode(image: Tensor, params: ModelParams) -> list[Tensor]:
    """Five-level feature pyramid; level i has stride 2**i.

    Both epochs go through this one function and one parameter set, so a
    batch may simply stack T1 and T2 images.
    """
    cfg = params.config
    if image.data.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected [N,{cfg.in_channels},H,W] image, got {image.shape}")
    H, W = image.shape[2:]
    if H % 32 or W % 32:
        raise ConfigError(f"input size {H}x{W} is not divisible by 32")
    x = image
    levels = []
    for i in range(1, N_LEVELS + 1):
        x = T.relu(_conv(x, params, f"enc.s{i}.conv1", stride=2))
        x = T.relu(_conv(x, params, f"enc.s{i}.conv2"))
        levels.append(x)
    return levels


def metric_project(pyr: list[Tensor], params: ModelParams) -> Tensor:
    """Upsample every level to level-1 resolution, concat, conv3x3, L2-normalize."""
    ups = [T.upsample(f, 2 ** i, "nearest") for i, f in enumerate(pyr)]
    return T.l2_normalize(_conv(T.concat(ups, axis=1), params, "proj"))


def decode(pyr1: list[Tensor], pyr2: list[Tensor], u1: Tensor, u2: Tensor,
           params: ModelParams) -> Tensor:
    """Change logits [N,1,H,W] at input resolution."""
    cfg = params.config
    if cfg.decoder == "none":
        raise ConfigError("model was built without a decoder")
    for a, b in zip(pyr1, pyr2):
        if a.shape != b.shape:
            raise DimensionError(f"pyramid level shapes differ: {a.shape} vs {b.shape}")
    fused = [T.relu(_conv(T.concat([a, b], axis=1), params, f"dec.fuse{i}"))
             for i, (a, b) in enumerate(zip(pyr1, pyr2), 1)]
    outs: list[Tensor] = [None] * N_LEVELS  # type: ignore[list-item]
    outs[-1] = fused[-1]
    for i in range(N_LEVELS - 1, 0, -1):  # levels 4..1
        x = T.add(fused[i - 1], T.upsample(outs[i], 2, "bilinear"))
        if i == 1 and cfg.decoder == "metric":
            if u1.shape[2:] != x.shape[2:]:
                raise DimensionError(f"embedding {u1.shape} does not match level 1 {x.shape}")
            x = T.concat([x, u1, u2, T.channel_dot(u1, u2)], axis=1)
        outs[i - 1] = T.relu(_conv(x, params, f"dec.cross{i}"))
    heads = [T.upsample(_conv(o, params, f"dec.head{i}"), 2 ** (i - 1), "bilinear")
             for i, o in enumerate(outs, 1)]
    logits = _conv(T.concat(heads, axis=1), params, "dec.cls")
    return T.upsample(logits, 2, "bilinear")


@dataclass
class ForwardOutput:
    u1: Tensor
    u2: Tensor
    logits: Tensor | None
    pyr1: list[Tensor]
    pyr2: list[Tensor]

    def similarity(self) -> Tensor:
        return T.channel_dot(self.u1, self.u2)


def forward(img1: Tensor, img2: Tensor, params: ModelParams) -> ForwardOutput:
    if img1.shape != img2.shape:
        raise DimensionError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    n = img1.shape[0]
    pyr = siamese_encode(T.concat([img1, img2], axis=0), params)
    u = metric_project(pyr, params)
    pyr1 = [T.slice_batch(f, 0, n) for f in pyr]
    pyr2 = [T.slice_batch(f, n, 2 * n) for f in pyr]
    u1, u2 = T.slice_batch(u, 0, n), T.slice_batch(u, n, 2 * n)
    logits = None if params.config.decoder == "none" else decode(pyr1, pyr2, u1, u2, params)
    return ForwardOutput(u1, u2, logits, pyr1, pyr2)


def predict_metric(u1: Tensor | np.ndarray, u2: Tensor | np.ndarray, d_thre: float,
                   factor: int = 2) -> np.ndarray:
    """Binary mask where 1 - cos > d_thre, nearest-upsampled by ``factor``."""
    a = u1.data if isinstance(u1, Tensor) else np.asarray(u1)
    b = u2.data if isinstance(u2, Tensor) else np.asarray(u2)
    dist = 1.0 - np.einsum("nchw,nchw->nhw", a, b)[:, None]
    mask = (dist > d_thre).astype(np.uint8)
    return mask.repeat(factor, axis=2).repeat(factor, axis=3)


def predict_seg(logits: Tensor | np.ndarray) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z > 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoints: "DCLM1", u32 manifest length, JSON manifest, DCLT records


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    manifest = {
        "config": asdict(params.config),
        "tensors": [[k, list(v.shape)] for k, v in params.tensors.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for v in params.tensors.values():
            fh.write(T.to_bytes(v))


def load_checkpoint(path: str | Path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:5] != CKPT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", buf, 5)
    manifest = json.loads(buf[9:9 + n])
    cfg = EncoderConfig(**manifest["config"])
    pos = 9 + n
    tensors = {}
    for name, shape in manifest["tensors"]:
        arr, pos = T.from_bytes(buf, pos)
        if list(arr.shape) != shape:
            raise IntegrityError(f"{path}: tensor {name} has shape {arr.shape}, manifest says {shape}")
        tensors[name] = Tensor(arr, name=name)
    if pos != len(buf):
        raise IntegrityError(f"{path}: {len(buf) - pos} trailing bytes")
    return ModelParams(cfg, tensors)
