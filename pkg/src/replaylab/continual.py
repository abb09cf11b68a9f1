"""Training regimes, replay memory, AdamW, and the K x K evaluation matrix.

Four regimes are supported:

* ``single-domain``: one fresh model per domain.
* ``multi-domain``: one model on the pooled training sets.
* ``fine-tune``: one model trained on the domains in sequence.
* ``replay``: fine-tune plus a capped per-domain memory buffer mixed into
  every later stage.

Every stage draws its randomness from a stream keyed by ``(seed, stage)``
and starts a fresh optimizer, so a run can be resumed from the last
stage checkpoint and still reproduce the uninterrupted result bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .domainsynth import Domain, Sample, sample_patches
from .errors import ConfigError, ContractError, TrainingError
from .objectives import dice_loss, dice_score
from .segnet import Model, ModelConfig, build_model, load_checkpoint, predict, save_checkpoint

log = logging.getLogger(__name__)

SINGLE = "single-domain"
MULTI = "multi-domain"
FINETUNE = "fine-tune"
REPLAY = "replay"
REGIMES = (SINGLE, MULTI, FINETUNE, REPLAY)
SEQUENTIAL = (FINETUNE, REPLAY)

MERGED = "merged"
BALANCED = "balanced"


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


# purpose tags for stream()
_INIT, _STAGE, _BUFFER, _REINIT = 1, 2, 3, 4


# ---------------------------------------------------------------- memory buffer

@dataclass
class MemoryBuffer:
    cap: float = 20
    entries: list[tuple[str, Sample]] = field(default_factory=list)

    def count(self, domain: str) -> int:
        return sum(1 for d, _ in self.entries if d == domain)

    def domains(self) -> list[str]:
        seen: list[str] = []
        for d, _ in self.entries:
            if d not in seen:
                seen.append(d)
        return seen

    def __len__(self) -> int:
        return len(self.entries)


def buffer_update(buffer: MemoryBuffer, domain: Domain, cap: float | None = None,
                  seed: int | np.random.Generator = 0) -> MemoryBuffer:
    """Append up to ``cap`` training samples of ``domain``, uniformly without replacement."""
    cap = buffer.cap if cap is None else cap
    if not domain.train:
        raise ContractError(f"domain {domain.name} has an empty training set")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(domain.train)
    k = n if cap >= n else int(cap)
    picks = sorted(rng.choice(n, size=k, replace=False).tolist()) if k < n else list(range(n))
    buffer.entries.extend((domain.name, domain.train[i]) for i in picks)
    return buffer


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: dict[str, ad.Tensor],
               grads: dict[str, np.ndarray]) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_schedule(epoch: int, base_lr: float = 1e-4, step: int = 50, gamma: float = 0.5) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return base_lr * gamma ** (epoch // step)


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class RegimeConfig:
    regime: str = REPLAY
    epochs: int = 40
    batch_size: int = 4
    lr: float = 1e-4
    lr_step: int = 50
    lr_gamma: float = 0.5
    weight_decay: float = 0.01
    buffer_cap: float = 20.0
    mixing: str = MERGED
    transfer: str = "all"
    patches_per_image: int = 4
    patch_size: int = 32
    fg_probability: float = 0.75
    threshold: float = 0.5

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; valid: {', '.join(REGIMES)}")
        if self.epochs < 1 or self.batch_size < 1 or self.patches_per_image < 1:
            raise ConfigError("epochs, batch_size and patches_per_image must be positive")
        if self.mixing not in (MERGED, BALANCED):
            raise ConfigError(f"unknown mixing {self.mixing!r}")
        if self.transfer not in ("all", "encoder-only"):
            raise ConfigError(f"unknown transfer {self.transfer!r}")
        if self.buffer_cap < 0:
            raise ConfigError("buffer_cap must be >= 0")


# ---------------------------------------------------------------- audit

@dataclass
class AuditLog:
    """Every sample access: (stage, purpose, domain, split, subject)."""

    records: list[tuple[int, str, str, str, str]] = field(default_factory=list)

    def touch(self, stage: int, purpose: str, sample: Sample, split: str) -> None:
        self.records.append((stage, purpose, sample.domain, split, sample.subject_id))

    def to_text(self) -> str:
        lines = ["stage\tpurpose\tdomain\tsplit\tsubject"]
        lines += ["\t".join(map(str, r)) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AuditLog":
        out = cls()
        for line in text.splitlines()[1:]:
            st, purpose, dom, split, sid = line.split("\t")
            out.records.append((int(st), purpose, dom, split, sid))
        return out


def zero_shot_violations(audit: AuditLog, order: Sequence[str]) -> list[tuple]:
    """Training accesses at stage i to domains not among the first i+1 in ``order``."""
    pos = {name: i for i, name in enumerate(order)}
    return [r for r in audit.records
            if r[1] == "train" and (r[3] != "train" or pos.get(r[2], math.inf) > r[0])]


# ---------------------------------------------------------------- staging & training

def stage_train_set(regime: str, current: Sequence[Sample], buffer: MemoryBuffer | None,
                    mixing: str = MERGED) -> tuple[list[Sample], list[Sample]]:
    """Return (current samples, replayed samples) for one stage.

    For ``merged`` mixing the two are trained on as one pool; for ``balanced``
    each batch is half current, half replayed.
    """
    if regime not in SEQUENTIAL:
        raise ConfigError(f"stage_train_set applies to {SEQUENTIAL}, got {regime!r}")
    if regime == FINETUNE or buffer is None:
        return list(current), []
    cur_domains = {s.domain for s in current}
    replayed = [s for d, s in buffer.entries if d not in cur_domains]
    return list(current), replayed


def _batches(current: list[Sample], replayed: list[Sample], cfg: RegimeConfig,
             rng: np.random.Generator) -> list[list[Sample]]:
    if cfg.mixing == MERGED or not replayed:
        pool = current + replayed
        order = rng.permutation(len(pool))
        return [[pool[i] for i in order[j:j + cfg.batch_size]]
                for j in range(0, len(pool), cfg.batch_size)]
    half = max(cfg.batch_size // 2, 1)
    cur = [current[i] for i in rng.permutation(len(current))]
    rep_order = rng.permutation(len(replayed))
    out, r = [], 0
    for j in range(0, len(cur), half):
        batch = cur[j:j + half]
        for _ in range(cfg.batch_size - half):
            if r == len(rep_order):
                rep_order, r = rng.permutation(len(replayed)), 0
            batch.append(replayed[rep_order[r]])
            r += 1
        out.append(batch)
    return out


def train_stage(model: Model, current: list[Sample], replayed: list[Sample], cfg: RegimeConfig,
                rng: np.random.Generator, audit: AuditLog | None = None, stage: int = 0) -> float:
    """Train ``model`` in place for ``cfg.epochs`` epochs; returns the last epoch's mean loss."""
    rank = model.config.spatial_rank
    patch = (cfg.patch_size,) * rank
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    names = list(model.params)
    last = float("nan")
    if audit is not None:
        for s in current + replayed:
            audit.touch(stage, "train", s, "train")
    for epoch in range(cfg.epochs):
        opt.lr = lr_schedule(epoch, cfg.lr, cfg.lr_step, cfg.lr_gamma)
        losses = []
        for batch in _batches(current, replayed, cfg, rng):
            xs, ys = [], []
            for s in batch:
                for img, lab in sample_patches(s, cfg.patches_per_image, patch, cfg.fg_probability, rng):
                    xs.append(img)
                    ys.append(lab)
            x = np.stack(xs)[:, None]
            y = np.stack(ys)[:, None]
            model.zero_grad()
            with ad.Graph() as graph:
                loss = dice_loss(model.forward(ad.Tensor(x)), y)
            ad.backward(graph, loss)
            grads = {n: model.params[n].grad for n in names if model.params[n].grad is not None}
            adamw_step(opt, model.params, grads)
            losses.append(loss.item())
        last = float(np.mean(losses))
        if not math.isfinite(last):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
    return last


def evaluate(model: Model, domains: Sequence[Domain], threshold: float = 0.5,
             audit: AuditLog | None = None, stage: int = 0) -> list[float]:
    """Mean thresholded test Dice on each domain (zero-shot for unseen ones)."""
    row = []
    for d in domains:
        scores = []
        for s in d.test:
            if audit is not None:
                audit.touch(stage, "eval", s, "test")
            scores.append(dice_score(predict(model, s.image), s.label, threshold))
        row.append(float(np.mean(scores)))
    return row


# ---------------------------------------------------------------- results

@dataclass
class ResultMatrix:
    regime: str
    order: list[str]
    rows: list[list[float]]
    row_labels: list[str] = field(default_factory=list)

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64)

    def is_complete(self) -> bool:
        return len(self.rows) == len(self.row_labels) and all(len(r) == len(self.order) for r in self.rows)

    def to_text(self) -> str:
        lines = ["trained_on\t" + "\t".join(self.order)]
        for label, row in zip(self.row_labels, self.rows):
            lines.append(label + "\t" + "\t".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, regime: str = "") -> "ResultMatrix":
        lines = text.splitlines()
        order = lines[0].split("\t")[1:]
        labels, rows = [], []
        for line in lines[1:]:
            parts = line.split("\t")
            labels.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
        return cls(regime, order, rows, labels)


def compute_bwt(R) -> tuple[float, list[float]]:
    """Average backward transfer and per-domain terms R[K-1][i] - R[i][i], i < K-1."""
    if isinstance(R, ResultMatrix):
        if not R.is_complete() or len(R.rows) != len(R.order):
            raise ContractError("BWT needs a complete K x K matrix")
        R = R.R
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or not np.all(np.isfinite(R)):
        raise ContractError(f"BWT needs a complete K x K matrix, got shape {R.shape}")
    k = R.shape[0]
    if k == 1:
        return 0.0, []
    per = [float(R[k - 1, i] - R[i, i]) for i in range(k - 1)]
    return float(sum(per) / (k - 1)), per


def per_domain_bwt(matrix: ResultMatrix) -> dict[str, float]:
    """Per-domain BWT keyed by name; the final domain contributes exactly 0."""
    _, per = compute_bwt(matrix)
    out = dict(zip(matrix.order, per))
    out[matrix.order[-1]] = 0.0
    return out


# ---------------------------------------------------------------- orchestration

@dataclass
class StageRecord:
    stage: int
    domain: str
    epochs: int
    final_train_loss: float
    row: list[float]
    train_samples: int
    buffer_size: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class RegimeRun:
    matrix: ResultMatrix
    stages: list[StageRecord]
    audit: AuditLog
    buffer: MemoryBuffer | None = None
    model: Model | None = None
    # stage index -> training multiset as (domain, subject) pairs
    train_sets: dict[int, list[tuple[str, str]]] = field(default_factory=dict)


def init_seed(seed: int) -> int:
    return int(stream(seed, _INIT).integers(2 ** 31))


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _reinit_decoder(model: Model, seed: int, stage: int) -> None:
    fresh = build_model(model.config, int(stream(seed, _REINIT, stage).integers(2 ** 31)))
    for name, t in fresh.params.items():
        if name not in model.encoder_names:
            model.params[name].data[...] = t.data


def run_regime(
    sequence: Sequence[Domain],
    config: RegimeConfig,
    seed: int,
    model_config: ModelConfig | None = None,
    workdir: str | os.PathLike | None = None,
    max_stages: int | None = None,
    on_stage: Callable[[StageRecord], None] | None = None,
) -> RegimeRun:
    """Train and evaluate one regime on an ordered domain sequence.

    With ``workdir``, each finished stage leaves a checkpoint, a JSON line in
    ``stages.jsonl`` and its audit records; a later call resumes after the last
    finished stage. ``max_stages`` stops early (used to emulate interruption).
    """
    config.validate()
    if not sequence:
        raise ConfigError("need at least one domain")
    model_config = model_config or ModelConfig(patch_size=config.patch_size)
    if model_config.patch_size != config.patch_size:
        raise ConfigError("model patch_size and regime patch_size differ")
    order = [d.name for d in sequence]
    k = len(sequence)
    regime = config.regime

    if regime == MULTI:
        plan = [("pooled", [s for d in sequence for s in d.train])]
    else:
        plan = [(d.name, d.train) for d in sequence]

    wd = Path(workdir) if workdir is not None else None
    done: list[StageRecord] = []
    audit = AuditLog()
    if wd is not None:
        wd.mkdir(parents=True, exist_ok=True)
        log_path = wd / "stages.jsonl"
        if log_path.exists():
            for line in log_path.read_text().splitlines():
                done.append(StageRecord(**json.loads(line)))
        for rec in done:
            audit.records.extend(AuditLog.from_text((wd / f"audit_stage{rec.stage}.tsv").read_text()).records)

    buffer = MemoryBuffer(cap=config.buffer_cap) if regime == REPLAY else None
    model: Model | None = None
    train_sets: dict[int, list[tuple[str, str]]] = {}
    if regime in SEQUENTIAL:
        model = build_model(model_config, init_seed(seed))
        if done:
            model = load_checkpoint(wd / f"stage{done[-1].stage}.ckpt")
        if buffer is not None:
            for rec in done:
                buffer_update(buffer, sequence[rec.stage], seed=stream(seed, _BUFFER, rec.stage))

    for stage in range(len(done), len(plan)):
        if max_stages is not None and stage >= max_stages:
            break
        label, current = plan[stage]
        rng = stream(seed, _STAGE, stage)
        stage_audit = AuditLog()
        if regime in SEQUENTIAL:
            cur, rep = stage_train_set(regime, current, buffer, config.mixing)
            if stage > 0 and config.transfer == "encoder-only":
                _reinit_decoder(model, seed, stage)
        else:
            model = build_model(model_config, init_seed(seed))
            cur, rep = list(current), []
        train_sets[stage] = sorted((s.domain, s.subject_id) for s in cur + rep)
        try:
            loss = train_stage(model, cur, rep, config, rng, stage_audit, stage)
        except TrainingError as exc:
            raise TrainingError(f"{regime} seed {seed} stage {stage} ({label}): {exc}") from exc
        if buffer is not None:
            buffer_update(buffer, sequence[stage], seed=stream(seed, _BUFFER, stage))
        row = evaluate(model, sequence, config.threshold, stage_audit, stage)
        rec = StageRecord(stage, label, config.epochs, loss, row, len(cur) + len(rep),
                          len(buffer) if buffer is not None else 0)
        log.info("%s seed=%d stage=%d (%s) loss=%.4f mean_dice=%.4f",
                 regime, seed, stage, label, loss, float(np.mean(row)))
        audit.records.extend(stage_audit.records)
        if wd is not None:
            save_checkpoint(model, wd / f"stage{stage}.ckpt")
            _write_atomic(wd / f"audit_stage{stage}.tsv", stage_audit.to_text())
            with open(wd / "stages.jsonl", "a") as fh:
                fh.write(rec.to_json() + "\n")
        done.append(rec)
        if on_stage is not None:
            on_stage(rec)

    labels = [r.domain for r in done]
    matrix = ResultMatrix(regime, order, [r.row for r in done], labels)
    return RegimeRun(matrix, done, audit, buffer, model, train_sets)
