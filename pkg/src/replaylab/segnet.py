"""Residual mini-UNet with a normalized-ReLU soft-segmentation head."""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArtifactError, ConfigError, ShapeError

CHECKPOINT_MAGIC = b"RLCKPT01"


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 2
    base_features: int = 8
    spatial_rank: int = 2
    in_channels: int = 1
    residual: bool = True
    patch_size: int = 32
    kernel_size: int = 3

    def widths(self) -> list[int]:
        return [self.base_features * 2 ** i for i in range(self.levels)]

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_features < 1 or self.in_channels < 1:
            raise ConfigError("base_features and in_channels must be >= 1")
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        extent = self.patch_size
        for _ in range(self.levels - 1):
            if extent % 2:
                raise ConfigError(
                    f"patch extent {self.patch_size} cannot be pooled {self.levels - 1} times"
                )
            extent //= 2
        # the bottleneck must keep a spatial neighbourhood for its 3x3 convs
        if extent < 2 and self.levels > 1:
            raise ConfigError(
                f"levels={self.levels} too deep for patch extent {self.patch_size} "
                f"(bottleneck extent {extent})"
            )


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    seed: int
    # names in the encoder half (used by encoder-only transfer)
    encoder_names: tuple[str, ...] = field(default=())

    def clone(self) -> "Model":
        return Model(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            self.seed,
            self.encoder_names,
        )

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x: Tensor) -> Tensor:
        return _forward(self, x)


def _kernel_shape(cfg: ModelConfig, out_c: int, in_c: int, k: int) -> tuple[int, ...]:
    return (out_c, in_c) + (k,) * cfg.spatial_rank


def _layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """(name, shape, in_encoder) for every parameter, in creation order."""
    k = cfg.kernel_size
    widths = cfg.widths()
    out: list[tuple[str, tuple[int, ...], bool]] = []

    def block(prefix: str, in_c: int, out_c: int, enc: bool) -> None:
        out.append((f"{prefix}.conv1.w", _kernel_shape(cfg, out_c, in_c, k), enc))
        out.append((f"{prefix}.conv1.b", (out_c,), enc))
        out.append((f"{prefix}.conv2.w", _kernel_shape(cfg, out_c, out_c, k), enc))
        out.append((f"{prefix}.conv2.b", (out_c,), enc))
        if cfg.residual and in_c != out_c:
            out.append((f"{prefix}.proj.w", _kernel_shape(cfg, out_c, in_c, 1), enc))
            out.append((f"{prefix}.proj.b", (out_c,), enc))

    in_c = cfg.in_channels
    for i, w in enumerate(widths):
        block(f"enc{i}", in_c, w, True)
        in_c = w
    for i in reversed(range(cfg.levels - 1)):
        w = widths[i]
        out.append((f"up{i}.w", _kernel_shape(cfg, w, widths[i + 1], k), False))
        out.append((f"up{i}.b", (w,), False))
        block(f"dec{i}", 2 * w, w, False)
    out.append(("head.w", _kernel_shape(cfg, 1, widths[0], 1), False))
    out.append(("head.b", (1,), False))
    return out


def build_model(config: ModelConfig, seed: int) -> Model:
    """He-normal (fan-in) weights, zero biases, fully determined by ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    enc = []
    for name, shape, in_enc in _layout(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
        if in_enc:
            enc.append(name)
    return Model(config, params, seed, tuple(enc))


def _block(p: dict[str, Tensor], prefix: str, x: Tensor, residual: bool) -> Tensor:
    h = ad.relu(ad.conv(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
    h = ad.conv(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    if residual:
        if f"{prefix}.proj.w" in p:
            skip = ad.conv(x, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])
        else:
            skip = x
        h = ad.add(h, skip)
    return ad.relu(h)


def pre_activation(model: Model, x: Tensor) -> Tensor:
    """Head output before the normalized ReLU."""
    cfg, p = model.config, model.params
    skips = []
    h = x
    for i in range(cfg.levels):
        h = _block(p, f"enc{i}", h, cfg.residual)
        if i < cfg.levels - 1:
            skips.append(h)
            h = ad.max_pool(h)
    for i in reversed(range(cfg.levels - 1)):
        h = ad.conv(ad.upsample(h), p[f"up{i}.w"], p[f"up{i}.b"])
        h = ad.relu(h)
        h = ad.concat([skips[i], h], axis=1)
        h = _block(p, f"dec{i}", h, cfg.residual)
    return ad.conv(h, p["head.w"], p["head.b"])


def _forward(model: Model, x: Tensor) -> Tensor:
    cfg = model.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != cfg.spatial_rank + 2 or x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"expected input (N, {cfg.in_channels}, {cfg.spatial_rank} spatial dims), got {x.shape}"
        )
    div = 2 ** (cfg.levels - 1)
    if any(s % div for s in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by {div}")
    return normalized_relu(pre_activation(model, x))


normalized_relu = ad.normalized_relu


def predict(model: Model, patch) -> np.ndarray:
    """Soft mask in [0, 1] for one patch (spatial array) or a batch (N, C, ...)."""
    arr = np.asarray(patch.data if isinstance(patch, Tensor) else patch, dtype=np.float64)
    single = arr.ndim == model.config.spatial_rank
    if single:
        arr = arr[None, None]
    out = _forward(model, Tensor(arr)).data
    return out[0, 0] if single else out


# ---------------------------------------------------------------- checkpoints

def _header(model: Model) -> dict:
    return {
        "config": asdict(model.config),
        "seed": model.seed,
        "encoder_names": list(model.encoder_names),
        "tensors": [[name, list(t.shape)] for name, t in model.params.items()],
    }


def checkpoint_bytes(model: Model) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for t in model.params.values():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(raw: bytes) -> Model:
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ArtifactError("not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    params = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        params[name] = Tensor(data.reshape(shape), requires_grad=True, name=name)
    if offset != len(raw):
        raise ArtifactError(f"checkpoint has {len(raw) - offset} trailing bytes")
    cfg = ModelConfig(**header["config"])
    return Model(cfg, params, header["seed"], tuple(header["encoder_names"]))


def save_checkpoint(model: Model, path: str | os.PathLike) -> str:
    """Atomic write; returns the sha256 of the file contents."""
    raw = checkpoint_bytes(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> Model:
    return model_from_bytes(Path(path).read_bytes())
