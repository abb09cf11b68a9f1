"""Experiment configuration, (regime x seed) orchestration and report tables.

Config files are flat ``section.key = value`` documents. Output layout::

    <output>/config.txt                 canonical config
    <output>/manifest.txt               config hash and versions
    <output>/data/                      cohort archive (unless data.archive is set)
    <output>/cells/<regime>/seed<k>/    R.tsv, cell.txt, audit.tsv, stages.jsonl, checkpoints
    <output>/report/                    zero_shot_curves.tsv, bwt.tsv, heatmap_<regime>.tsv
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .continual import (
    MULTI, REGIMES, SEQUENTIAL, RegimeConfig, ResultMatrix, compute_bwt,
    per_domain_bwt, run_regime, zero_shot_violations,
)
from .domainsynth import (
    COHORTS, Domain, DomainSpec, descending_order, domain_dirname, generate_domain, read_archive,
    shuffled_order, with_shape, write_archive,
)
from .errors import ArtifactError, ConfigError, UsageError
from .segnet import ModelConfig

log = logging.getLogger(__name__)

ORDER_MODES = ("shuffled", "fixed-descending", "listed")
WORKERS_ENV = "REPLAYLAB_WORKERS"

# keys that select which cells to run or where to put them; not part of the hash
_UNHASHED = {"experiment.output", "experiment.seeds", "train.regimes"}


@dataclass
class ExperimentConfig:
    cohort: str = "desk4"
    archive: str = ""
    volume: tuple[int, ...] = (64, 64)
    train_ratio: float = 0.8
    domains: list[DomainSpec] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: RegimeConfig = field(default_factory=RegimeConfig)
    regimes: tuple[str, ...] = REGIMES
    seeds: tuple[int, ...] = tuple(range(9))
    order: str = "shuffled"
    output: str = "runs/default"

    # ------------------------------------------------------------ (de)serialisation

    def to_items(self) -> list[tuple[str, str]]:
        items = [
            ("data.cohort", self.cohort),
            ("data.archive", self.archive),
            ("data.volume", ",".join(map(str, self.volume))),
            ("data.train_ratio", repr(self.train_ratio)),
        ]
        for f in fields(ModelConfig):
            items.append((f"model.{f.name}", _fmt(getattr(self.model, f.name))))
        items.append(("train.regimes", ",".join(self.regimes)))
        for f in fields(RegimeConfig):
            if f.name != "regime":
                items.append((f"train.{f.name}", _fmt(getattr(self.train, f.name))))
        items += [
            ("experiment.seeds", ",".join(map(str, self.seeds))),
            ("experiment.order", self.order),
            ("experiment.output", self.output),
        ]
        for i, spec in enumerate(self.domains):
            for line in spec.to_text().splitlines():
                key, _, value = (p.strip() for p in line.partition("="))
                items.append((f"domain.{i}.{key}", value))
        return items

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_items())

    def hashed_text(self) -> str:
        """Config text without cell-selection keys; this is what the hash covers."""
        return "".join(f"{k} = {v}\n" for k, v in self.to_items() if k not in _UNHASHED)

    def digest(self) -> str:
        return hashlib.sha256(self.hashed_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        items: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
            key, _, value = (p.strip() for p in line.partition("="))
            items[key] = value
        return cls.from_items(items)

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ExperimentConfig":
        cfg = cls()
        model_kw, train_kw, dom_kw = {}, {}, {}
        mfields = {f.name: f for f in fields(ModelConfig)}
        tfields = {f.name: f for f in fields(RegimeConfig)}
        for key, value in items.items():
            section, _, name = key.partition(".")
            if section == "data":
                if name == "cohort":
                    cfg.cohort = value
                elif name == "archive":
                    cfg.archive = value
                elif name == "volume":
                    cfg.volume = _ints(key, value)
                elif name == "train_ratio":
                    cfg.train_ratio = _float(key, value)
                else:
                    raise ConfigError(f"unknown key {key!r}")
            elif section == "model":
                if name not in mfields:
                    raise ConfigError(f"unknown key {key!r}")
                model_kw[name] = _parse_like(key, value, getattr(ModelConfig(), name))
            elif section == "train":
                if name == "regimes":
                    cfg.regimes = parse_regimes(value)
                elif name in tfields and name != "regime":
                    train_kw[name] = _parse_like(key, value, getattr(RegimeConfig(), name))
                else:
                    raise ConfigError(f"unknown key {key!r}")
            elif section == "experiment":
                if name == "seeds":
                    cfg.seeds = parse_seeds(value)
                elif name == "order":
                    cfg.order = value
                elif name == "output":
                    cfg.output = value
                else:
                    raise ConfigError(f"unknown key {key!r}")
            elif section == "domain":
                idx, _, fname = name.partition(".")
                if not idx.isdigit() or not fname:
                    raise ConfigError(f"domain keys look like domain.<index>.<field>, got {key!r}")
                dom_kw.setdefault(int(idx), {})[fname] = value
            else:
                raise ConfigError(f"unknown section in key {key!r}")
        cfg.model = ModelConfig(**model_kw)
        cfg.train = RegimeConfig(**train_kw)
        cfg.domains = [DomainSpec.from_mapping(dom_kw[i]) for i in sorted(dom_kw)]
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.regimes:
            raise ConfigError("at least one regime is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.order not in ORDER_MODES:
            raise ConfigError(f"unknown order mode {self.order!r}; valid: {', '.join(ORDER_MODES)}")
        if not self.domains and not self.archive and self.cohort not in COHORTS:
            raise ConfigError(f"unknown cohort {self.cohort!r}; valid: {', '.join(COHORTS)}")
        if self.model.patch_size != self.train.patch_size:
            raise ConfigError("model.patch_size and train.patch_size must match")
        if self.model.spatial_rank != len(self.volume):
            raise ConfigError("model.spatial_rank must match the rank of data.volume")
        self.model.validate()
        for r in self.regimes:
            replace(self.train, regime=r).validate()
        for spec in self.domains:
            spec.validate()

    # ------------------------------------------------------------ data

    def specs(self) -> list[DomainSpec]:
        if self.domains:
            return list(self.domains)
        return with_shape(COHORTS[self.cohort](), self.volume)

    def order_for(self, domains: Sequence[Domain], seed: int) -> list[Domain]:
        by_name = {d.name: d for d in domains}
        specs = [d.spec for d in domains]
        if self.order == "shuffled":
            ordered = shuffled_order(specs, seed)
        elif self.order == "fixed-descending":
            ordered = descending_order(specs)
        else:
            ordered = specs
        return [by_name[s.name] for s in ordered]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from exc


def _ints(key: str, value: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integers, got {value!r}") from exc


def _parse_like(key: str, value: str, default):
    if isinstance(default, bool):
        if value.lower() not in ("true", "false"):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value.lower() == "true"
    if isinstance(default, int):
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc
    if isinstance(default, float):
        return _float(key, value)
    return value


def parse_seeds(value: str) -> tuple[int, ...]:
    """``0,1,2`` or ``0-8`` (inclusive) or a mix."""
    out: list[int] = []
    try:
        for part in value.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError as exc:
        raise ConfigError(f"bad seed list {value!r}") from exc
    return tuple(out)


def parse_regimes(value: str) -> tuple[str, ...]:
    names = tuple(p.strip() for p in value.split(",") if p.strip())
    bad = [n for n in names if n not in REGIMES]
    if bad:
        raise UsageError(f"unknown regime(s) {', '.join(bad)}; valid regimes: {', '.join(REGIMES)}")
    return names


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_text(text)


# ---------------------------------------------------------------- io helpers

def write_atomic(path: Path, data: str | bytes) -> bool:
    """Write unless identical content is already there; returns whether bytes were written."""
    raw = data.encode() if isinstance(data, str) else data
    if path.exists() and path.read_bytes() == raw:
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return True


def read_kv(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, _, v = (p.strip() for p in line.partition("="))
            out[k] = v
    return out


def _manifest(cfg: ExperimentConfig) -> str:
    return (
        f"config_hash = {cfg.digest()}\n"
        f"replaylab = {__version__}\n"
        f"numpy = {np.__version__}\n"
        f"python = {platform.python_version()}\n"
    )


# ---------------------------------------------------------------- commands

def data_root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.archive) if cfg.archive else Path(cfg.output) / "data"


def cmd_generate(cfg: ExperimentConfig) -> tuple[list[Path], int]:
    """Write the cohort archive; returns (domain dirs, number of domains newly written)."""
    specs = cfg.specs()
    for s in specs:
        s.validate()
    root = data_root(cfg)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create {root}: {exc}") from exc
    pending = [s for s in specs if not (root / domain_dirname(s) / "COMPLETE").exists()]
    generated = {s.name: generate_domain(s, cfg.train_ratio) for s in pending}
    # complete directories are skipped by write_archive, so a bare Domain suffices
    return write_archive(root, [generated.get(s.name, Domain(s)) for s in specs])


def load_domains(cfg: ExperimentConfig) -> list[Domain]:
    root = data_root(cfg)
    if cfg.archive:
        if not root.exists():
            raise ConfigError(f"archive {root} does not exist")
        return read_archive(root)
    cmd_generate(cfg)
    return read_archive(root)


def cell_dir(output: str | os.PathLike, regime: str, seed: int) -> Path:
    return Path(output) / "cells" / regime / f"seed{seed}"


def _run_cell(args) -> str:
    cfg_text, regime, seed = args
    cfg = ExperimentConfig.from_text(cfg_text)
    return run_cell(cfg, load_domains(cfg), regime, seed)


def run_cell(cfg: ExperimentConfig, domains: list[Domain], regime: str, seed: int) -> str:
    """Run (or resume) one (regime, seed) cell; returns its directory."""
    d = cell_dir(cfg.output, regime, seed)
    info = d / "cell.txt"
    if info.exists() and read_kv(info).get("config_hash") == cfg.digest() and (d / "R.tsv").exists():
        log.info("cell %s seed %d already complete", regime, seed)
        return str(d)
    sequence = cfg.order_for(domains, seed)
    rcfg = replace(cfg.train, regime=regime)
    work = d / "stages"
    run = run_regime(sequence, rcfg, seed, cfg.model, workdir=work)
    write_atomic(d / "audit.tsv", run.audit.to_text())
    write_atomic(d / "R.tsv", run.matrix.to_text())
    lines = [
        f"regime = {regime}",
        f"seed = {seed}",
        f"config_hash = {cfg.digest()}",
        f"order = {','.join(run.matrix.order)}",
    ]
    if regime in SEQUENTIAL:
        avg, _ = compute_bwt(run.matrix)
        lines.append(f"bwt = {avg!r}")
        lines.append(f"zero_shot_violations = {len(zero_shot_violations(run.audit, run.matrix.order))}")
    write_atomic(d / "config.txt", cfg.hashed_text())
    write_atomic(info, "\n".join(lines) + "\n")
    return str(d)


def cmd_run(cfg: ExperimentConfig, workers: int | None = None) -> list[str]:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.txt", cfg.to_text())
    write_atomic(out / "manifest.txt", _manifest(cfg))
    domains = load_domains(cfg)
    cells = [(r, s) for r in cfg.regimes for s in cfg.seeds]
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1 and len(cells) > 1:
        text = cfg.to_text()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, [(text, r, s) for r, s in cells]))
    return [run_cell(cfg, domains, r, s) for r, s in cells]


# ---------------------------------------------------------------- report

@dataclass
class Cell:
    regime: str
    seed: int
    matrix: ResultMatrix
    config_hash: str
    config_text: str


def collect_cells(output: str | os.PathLike) -> list[Cell]:
    root = Path(output) / "cells"
    cells = []
    if not root.exists():
        raise ArtifactError(f"no cells under {root}")
    for info in sorted(root.glob("*/seed*/cell.txt")):
        kv = read_kv(info)
        if not (info.parent / "R.tsv").exists():
            continue
        m = ResultMatrix.from_text((info.parent / "R.tsv").read_text(), kv["regime"])
        cells.append(Cell(kv["regime"], int(kv["seed"]), m, kv["config_hash"],
                          (info.parent / "config.txt").read_text()))
    if not cells:
        raise ArtifactError(f"no completed cells under {root}")
    cells.sort(key=lambda c: (REGIMES.index(c.regime), c.seed))
    return cells


def _check_hashes(cells: list[Cell]) -> None:
    hashes = sorted({c.config_hash for c in cells})
    if len(hashes) <= 1:
        return
    first = dict(ExperimentConfig.from_text(cells[0].config_text).to_items())
    diffs = []
    for c in cells[1:]:
        other = dict(ExperimentConfig.from_text(c.config_text).to_items())
        for k in sorted(set(first) | set(other)):
            if k in _UNHASHED:
                continue
            if first.get(k) != other.get(k):
                diffs.append(f"  {k}: {first.get(k)!r} vs {other.get(k)!r} ({c.regime} seed {c.seed})")
    summary = "\n".join(sorted(set(diffs))) or "  (configs differ outside tracked keys)"
    raise ArtifactError(f"cells carry {len(hashes)} different config hashes: {', '.join(hashes)}\n{summary}")


def _f(x: float) -> str:
    return f"{x:.6f}"


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


CURVES_HEADER = ["regime", "stage", "n_seeds", "mean_dice", "std_dice"]
BWT_HEADER_FIXED = ["center"]
HEATMAP_HEADER = ["trained_on", "tested_on", "n_seeds", "mean_dice", "std_dice"]


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    text = "\t".join(header) + "\n" + "".join("\t".join(r) + "\n" for r in rows)
    write_atomic(path, text)


def read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    rows = [line.split("\t") for line in lines[1:]]
    for r in rows:
        if len(r) != len(header):
            raise ArtifactError(f"{path}: row {r} does not match header {header}")
    return header, rows


def _canonical_names(cells: list[Cell]) -> list[str]:
    names: list[str] = []
    for c in cells:
        for n in c.matrix.order:
            if n not in names:
                names.append(n)
    return names


def cmd_report(output: str | os.PathLike) -> dict[str, Path]:
    """Emit zero-shot curves, the BWT table and per-regime heatmaps."""
    cells = collect_cells(output)
    _check_hashes(cells)
    out = Path(output) / "report"
    names = _canonical_names(cells)
    k = len(names)
    regimes = [r for r in REGIMES if any(c.regime == r for c in cells)]
    written: dict[str, Path] = {}

    # (a) zero-shot Dice vs stage
    rows = []
    for r in regimes:
        rc = [c for c in cells if c.regime == r]
        for stage in range(k):
            vals = []
            for c in rc:
                row = c.matrix.rows[0] if r == MULTI else c.matrix.rows[stage]
                vals.append(float(np.mean(row)))
            m, s = _mean_std(vals)
            rows.append([r, str(stage + 1), str(len(vals)), _f(m), _f(s)])
    written["curves"] = out / "zero_shot_curves.tsv"
    write_table(written["curves"], CURVES_HEADER, rows)

    # (b) per-center and average BWT for the sequential regimes
    seq = [r for r in regimes if r in SEQUENTIAL]
    if seq:
        header = ["center"] + [f"{r}_{stat}" for r in seq for stat in ("mean", "std")]
        per_center = {r: {n: [] for n in names} for r in seq}
        averages = {r: [] for r in seq}
        for c in cells:
            if c.regime not in seq:
                continue
            for n, v in per_domain_bwt(c.matrix).items():
                per_center[c.regime][n].append(v)
            averages[c.regime].append(compute_bwt(c.matrix)[0])
        order = _report_order(cells, names)
        body = []
        for n in order:
            row = [n]
            for r in seq:
                row += list(map(_f, _mean_std(per_center[r][n])))
            body.append(row)
        body.append(["average"] + [x for r in seq for x in map(_f, _mean_std(averages[r]))])
        written["bwt"] = out / "bwt.tsv"
        write_table(written["bwt"], header, body)

    # (c) heatmaps keyed by domain name (K x K for single/sequential, 1 x K for multi)
    for r in regimes:
        rc = [c for c in cells if c.regime == r]
        acc: dict[tuple[str, str], list[float]] = {}
        for c in rc:
            for label, row in zip(c.matrix.row_labels, c.matrix.rows):
                for tested, v in zip(c.matrix.order, row):
                    acc.setdefault((label, tested), []).append(v)
        trained = ["pooled"] if r == MULTI else _report_order(rc, names)
        body = []
        for t in trained:
            for tested in _report_order(rc, names):
                vals = acc.get((t, tested), [])
                m, s = _mean_std(vals) if vals else (float("nan"), float("nan"))
                body.append([t, tested, str(len(vals)), _f(m), _f(s)])
        written[f"heatmap_{r}"] = out / f"heatmap_{r}.tsv"
        write_table(written[f"heatmap_{r}"], HEATMAP_HEADER, body)
    return written


def _report_order(cells: list[Cell], names: list[str]) -> list[str]:
    """Sequence order when every cell shares it (fixed orders), else first-seen order."""
    orders = {tuple(c.matrix.order) for c in cells}
    return list(orders.pop()) if len(orders) == 1 else names
