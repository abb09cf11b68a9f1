"""Synthetic multi-center segmentation cohorts.

Each domain ("center") is a seeded generator of image/soft-label volumes:
smooth background texture, a multiplicative low-frequency bias field,
additive Gaussian noise, and Gaussian-blurred ellipsoidal lesions whose
intensity is above (``lesion-bright``, FLAIR-like) or below
(``lesion-dark``, T2w-like) the surrounding tissue.

All randomness comes from numpy's PCG64 generator seeded through
``SeedSequence`` so cohorts are byte-identical across runs.
"""
from __future__ import annotations

import hashlib
import os
import shutil
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ArtifactError, ConfigError, ShapeError

BRIGHT = "lesion-bright"
DARK = "lesion-dark"


@dataclass(frozen=True)
class DomainSpec:
    name: str
    n_subjects: int
    contrast_polarity: str = BRIGHT
    lesion_count_range: tuple[int, int] = (2, 4)
    lesion_radius_range: tuple[float, float] = (2.0, 4.5)
    noise_sigma: float = 0.1
    bias_field_strength: float = 0.2
    volume_shape: tuple[int, ...] = (64, 64)
    seed: int = 0
    lesion_contrast: float = 1.0
    texture_amplitude: float = 0.3
    blur_sigma: float = 0.8

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise ConfigError(f"{self.name}: n_subjects must be >= 2")
        if self.contrast_polarity not in (BRIGHT, DARK):
            raise ConfigError(f"{self.name}: unknown polarity {self.contrast_polarity!r}")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"{self.name}: bad lesion_count_range {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range
        if rlo <= 0 or rhi < rlo:
            raise ConfigError(f"{self.name}: bad lesion_radius_range {self.lesion_radius_range}")
        if len(self.volume_shape) not in (2, 3):
            raise ConfigError(f"{self.name}: volume_shape must be 2-d or 3-d")
        if 2 * rhi + 2 > min(self.volume_shape):
            raise ConfigError(
                f"{self.name}: lesion radius {rhi} exceeds volume extent {min(self.volume_shape)}"
            )
        if self.noise_sigma < 0 or self.bias_field_strength < 0:
            raise ConfigError(f"{self.name}: noise_sigma and bias_field_strength must be >= 0")

    def to_text(self) -> str:
        """Ordered ``key = value`` manifest."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DomainSpec":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "DomainSpec":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown domain field {key!r}")
            kwargs[key] = _coerce(key, value)
        if "name" not in kwargs or "n_subjects" not in kwargs:
            raise ConfigError("domain spec needs at least name and n_subjects")
        return cls(**kwargs)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


_INT_TUPLES = {"lesion_count_range", "volume_shape"}
_FLOAT_TUPLES = {"lesion_radius_range"}
_INTS = {"n_subjects", "seed"}
_STRS = {"name", "contrast_polarity"}


def _coerce(key: str, value):
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    try:
        if key in _INT_TUPLES:
            return tuple(int(v) for v in value.split(","))
        if key in _FLOAT_TUPLES:
            return tuple(float(v) for v in value.split(","))
        if key in _INTS:
            return int(value)
        if key in _STRS:
            return value
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    subject_id: str
    domain: str = ""


@dataclass
class Domain:
    spec: DomainSpec
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.spec.name


# ---------------------------------------------------------------- generator

def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _bias_field(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    grids = np.meshgrid(*[np.linspace(-1.0, 1.0, s) for s in shape], indexing="ij")
    lin = rng.normal(size=len(shape))
    quad = rng.normal(size=len(shape))
    f = sum(a * g + b * g * g for a, b, g in zip(lin, quad, grids))
    f = f - f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _lesion_mask(rng: np.random.Generator, spec: DomainSpec) -> np.ndarray:
    shape = spec.volume_shape
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    mask = np.zeros(shape, dtype=bool)
    lo, hi = spec.lesion_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        radii = rng.uniform(*spec.lesion_radius_range, size=len(shape))
        margin = int(np.ceil(radii.max())) + 1
        center = [rng.uniform(margin, s - 1 - margin) for s in shape]
        d = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        mask |= d <= 1.0
    return mask


def generate_subject(spec: DomainSpec, index: int) -> Sample:
    rng = _rng(spec.seed, index)
    shape = spec.volume_shape
    label = _lesion_mask(rng, spec).astype(np.float64)
    if spec.blur_sigma > 0:
        label = np.clip(gaussian_filter(label, spec.blur_sigma, mode="constant"), 0.0, 1.0)
    texture = gaussian_filter(rng.normal(size=shape), 3.0, mode="reflect")
    texture /= texture.std() or 1.0
    bias = 1.0 + spec.bias_field_strength * _bias_field(rng, shape)
    sign = 1.0 if spec.contrast_polarity == BRIGHT else -1.0
    tissue = 1.0 + spec.texture_amplitude * texture + sign * spec.lesion_contrast * label
    image = tissue * bias + rng.normal(0.0, spec.noise_sigma, size=shape) if spec.noise_sigma else tissue * bias
    image = (image - image.mean()) / (image.std() or 1.0)
    return Sample(image, label, f"{spec.name}-{index:03d}", spec.name)


def generate_domain(spec: DomainSpec, train_ratio: float = 0.8) -> Domain:
    spec.validate()
    samples = [generate_subject(spec, i) for i in range(spec.n_subjects)]
    train, test = split_domain(samples, train_ratio, spec.seed)
    return Domain(spec, train, test)


def split_domain(samples: Sequence[Sample], ratio: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    n = len(samples)
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    if n < 2:
        raise ConfigError(f"need at least 2 samples to split, got {n}")
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    order = _rng(seed, 0x5EED).permutation(n)
    train = [samples[i] for i in sorted(order[:n_train])]
    test = [samples[i] for i in sorted(order[n_train:])]
    return train, test


def sample_patches(
    sample: Sample,
    n: int,
    patch_shape: Sequence[int],
    fg_probability: float,
    rng: np.random.Generator | int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw ``n`` patches; each is foreground-centred with probability ``fg_probability``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    vol = sample.label.shape
    patch_shape = tuple(int(p) for p in patch_shape)
    if len(patch_shape) != len(vol) or any(p > v for p, v in zip(patch_shape, vol)):
        raise ShapeError(f"patch {patch_shape} does not fit volume {vol}")
    if n < 1:
        raise ConfigError("n must be >= 1")
    fg = np.flatnonzero(sample.label.reshape(-1) > 0.5)
    out = []
    for _ in range(n):
        use_fg = rng.random() < fg_probability
        if use_fg and fg.size:
            flat = int(fg[rng.integers(fg.size)])
        else:
            flat = int(rng.integers(sample.label.size))
        center = np.unravel_index(flat, vol)
        start = [min(max(c - p // 2, 0), v - p) for c, p, v in zip(center, patch_shape, vol)]
        sl = tuple(slice(s, s + p) for s, p in zip(start, patch_shape))
        out.append((sample.image[sl], sample.label[sl]))
    return out


# ---------------------------------------------------------------- cohorts

REFERENCE_CENTERS = [
    # name, subjects, polarity (Karo/Milan act as the T2w-like centers)
    ("BWH", 80, BRIGHT),
    ("Karo", 51, DARK),
    ("Milan", 47, DARK),
    ("Rennes", 51, BRIGHT),
    ("NIH", 28, BRIGHT),
    ("Montp", 13, BRIGHT),
    ("UCSF", 12, BRIGHT),
    ("AMU", 8, BRIGHT),
]


def _varied(i: int, name: str, n: int, polarity: str, shape: tuple[int, ...]) -> DomainSpec:
    # deterministic per-center scanner differences
    rng = _rng(1000 + i)
    lo_r = float(np.round(rng.uniform(2.0, 3.0), 2))
    return DomainSpec(
        name=name,
        n_subjects=n,
        contrast_polarity=polarity,
        lesion_count_range=(int(rng.integers(1, 3)), int(rng.integers(3, 6))),
        lesion_radius_range=(lo_r, float(np.round(lo_r + rng.uniform(1.5, 3.0), 2))),
        noise_sigma=float(np.round(rng.uniform(0.05, 0.25), 3)),
        bias_field_strength=float(np.round(rng.uniform(0.1, 0.4), 3)),
        volume_shape=shape,
        seed=7919 * (i + 1),
        lesion_contrast=float(np.round(rng.uniform(0.9, 1.3), 3)),
    )


def reference_cohort(volume_shape: tuple[int, ...] = (64, 64)) -> list[DomainSpec]:
    """Eight centers with the reference cohort's subject counts, in descending-size order."""
    return [_varied(i, n, c, p, volume_shape) for i, (n, c, p) in enumerate(REFERENCE_CENTERS)]


DESK_CENTERS = [
    ("Alpha", 24, BRIGHT),
    ("Beta", 20, DARK),
    ("Gamma", 20, BRIGHT),
    ("Delta", 16, BRIGHT),
]


def desk_cohort(volume_shape: tuple[int, ...] = (64, 64)) -> list[DomainSpec]:
    """Four small centers, one of them lesion-dark."""
    return [_varied(i, n, c, p, volume_shape) for i, (n, c, p) in enumerate(DESK_CENTERS)]


COHORTS = {"ref8": reference_cohort, "desk4": desk_cohort}


def descending_order(specs: Sequence[DomainSpec]) -> list[DomainSpec]:
    """Sort by subject count, largest first; ties keep their given order."""
    return sorted(specs, key=lambda s: -s.n_subjects)


def shuffled_order(specs: Sequence[DomainSpec], seed: int) -> list[DomainSpec]:
    perm = np.random.default_rng(seed).permutation(len(specs))
    return [specs[i] for i in perm]


# ---------------------------------------------------------------- archive

RAW_MAGIC = b"RLTENSOR"


def write_raw(path: Path, arr: np.ndarray) -> None:
    header = ("shape=" + ",".join(str(s) for s in arr.shape) + "\n").encode()
    path.write_bytes(RAW_MAGIC + header + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_raw(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(RAW_MAGIC):
        raise ArtifactError(f"{path}: bad tensor magic")
    nl = raw.index(b"\n", len(RAW_MAGIC))
    header = raw[len(RAW_MAGIC):nl].decode()
    if not header.startswith("shape="):
        raise ArtifactError(f"{path}: bad tensor header")
    shape = tuple(int(s) for s in header[6:].split(","))
    data = np.frombuffer(raw, dtype="<f8", offset=nl + 1)
    if data.size != int(np.prod(shape)):
        raise ArtifactError(f"{path}: {data.size} values for shape {shape}")
    return data.reshape(shape).astype(np.float64)


def domain_dirname(spec: DomainSpec) -> str:
    return f"{spec.name}-{spec.digest()[:12]}"


def write_domain(root: str | os.PathLike, domain: Domain) -> tuple[Path, bool]:
    """Write one domain directory; returns (path, written). Skips when already complete."""
    root = Path(root)
    target = root / domain_dirname(domain.spec)
    if (target / "COMPLETE").exists():
        return target, False
    tmp = root / (target.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "subjects").mkdir(parents=True)
    (tmp / "spec.txt").write_text(domain.spec.to_text())
    split_lines = [f"train = {s.subject_id}" for s in domain.train]
    split_lines += [f"test = {s.subject_id}" for s in domain.test]
    (tmp / "split.txt").write_text("\n".join(split_lines) + "\n")
    for s in sorted(domain.train + domain.test, key=lambda s: s.subject_id):
        write_raw(tmp / "subjects" / f"{s.subject_id}.image.f64", s.image)
        write_raw(tmp / "subjects" / f"{s.subject_id}.label.f64", s.label)
    (tmp / "COMPLETE").write_text(domain.spec.digest() + "\n")
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)
    return target, True


def read_domain(path: str | os.PathLike) -> Domain:
    path = Path(path)
    if not (path / "COMPLETE").exists():
        raise ArtifactError(f"{path}: incomplete domain archive")
    spec = DomainSpec.from_text((path / "spec.txt").read_text())
    if (path / "COMPLETE").read_text().strip() != spec.digest():
        raise ArtifactError(f"{path}: spec hash mismatch")
    domain = Domain(spec)
    for line in (path / "split.txt").read_text().splitlines():
        side, _, sid = (p.strip() for p in line.partition("="))
        sample = Sample(
            read_raw(path / "subjects" / f"{sid}.image.f64"),
            read_raw(path / "subjects" / f"{sid}.label.f64"),
            sid,
            spec.name,
        )
        (domain.train if side == "train" else domain.test).append(sample)
    return domain


def write_archive(root: str | os.PathLike, domains: Sequence[Domain]) -> tuple[list[Path], int]:
    """Write a cohort archive with an ordered index; returns (dirs, number newly written)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs, written = [], 0
    for d in domains:
        p, w = write_domain(root, d)
        dirs.append(p)
        written += int(w)
    index = "".join(f"{p.name}\n" for p in dirs)
    idx = root / "cohort.txt"
    if not idx.exists() or idx.read_text() != index:
        idx.write_text(index)
    return dirs, written


def read_archive(root: str | os.PathLike) -> list[Domain]:
    root = Path(root)
    idx = root / "cohort.txt"
    if not idx.exists():
        raise ArtifactError(f"{root}: no cohort.txt index")
    return [read_domain(root / name) for name in idx.read_text().split()]


def with_shape(specs: Sequence[DomainSpec], shape: tuple[int, ...]) -> list[DomainSpec]:
    return [replace(s, volume_shape=tuple(shape)) for s in specs]
