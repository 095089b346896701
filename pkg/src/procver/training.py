"""End-to-end training: procedure classification plus sequence alignment on positive pairs."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import DatasetSplit, Split, candidate_pairs, sample_pairs, sample_segments
from .evaluation import auc, evaluate_pairs
from .losses import LossBreakdown, classification_loss, sequence_alignment_loss, total_loss
from .model import CatModel, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    steps_per_epoch: int | None = None
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    lam: float = 1.0
    K: int = 16
    seed: int = 0
    aug_sigma: float | None = None
    clip_norm: float = 5.0
    eval_every: int = 1
    checkpoint_every: int = 0
    val_pairs: tuple[int, int] = (200, 400)

    def __post_init__(self):
        self.val_pairs = tuple(self.val_pairs)
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2 (pairs)")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.lam < 0 or self.epochs < 1:
            raise ValueError(f"invalid train config {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["val_pairs"] = list(self.val_pairs)
        return d


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "step", **r}, sort_keys=True) for r in self.steps]
        lines += [json.dumps({"kind": "epoch", **r}, sort_keys=True) for r in self.epochs]
        return "\n".join(lines) + "\n"


def class_index(split: Split) -> dict[tuple[str, str], int]:
    """Procedure key -> class label, in sorted key order."""
    return {k: i for i, k in enumerate(sorted(p.key for p in split.procedures))}


def build_batch(dataset: DatasetSplit, cfg: TrainConfig, rng: np.random.Generator, labels: dict | None = None):
    """``batch_size`` train-mode clips as consecutive positive pairs, with procedure labels.

    Returns (clips (B, K, D_in), labels (B,)); clips 2i and 2i+1 share a procedure.
    """
    split = dataset.train
    labels = labels if labels is not None else class_index(split)
    byproc = split.videos_by_procedure()
    eligible = [k for k in sorted(byproc) if len(byproc[k]) >= 2]
    if not eligible:
        raise ValueError("no training procedure has at least two videos")
    n_pairs = cfg.batch_size // 2
    pick = rng.choice(len(eligible), size=n_pairs, replace=n_pairs > len(eligible))
    aug = cfg.aug_sigma
    if aug is None:
        aug = 0.5 * dataset.generator.noise_sigma if dataset.generator is not None else 0.0
    clips, ys = [], []
    for i in pick:
        key = eligible[int(i)]
        vids = byproc[key]
        for j in rng.choice(len(vids), size=2, replace=False):
            clip = sample_segments(dataset.features(vids[int(j)]), cfg.K, "train", rng)
            if aug > 0:
                clip = clip + rng.normal(0.0, aug, clip.shape)
            clips.append(clip)
            ys.append(labels[key])
    return np.stack(clips), np.array(ys, dtype=np.int64)


def batch_loss(model: CatModel, clips: np.ndarray, labels: np.ndarray, lam: float):
    """(total tensor, breakdown); the alignment term pairs clip 2i with clip 2i+1."""
    out = model(clips)
    cls = classification_loss(out.logits, labels)
    if lam > 0:
        seq = sequence_alignment_loss(nx.take(out.frame_features, slice(0, None, 2)), nx.take(out.frame_features, slice(1, None, 2)))
        total = nx.add(cls, nx.mul(seq, lam))
    else:
        with nx.no_grad():
            seq = sequence_alignment_loss(out.frame_features.data[0::2], out.frame_features.data[1::2])
        total = cls
    return total, total_loss(cls.item(), seq.item(), lam)


def validation_auc(model: CatModel, dataset: DatasetSplit, cfg: TrainConfig, split: str = "val") -> float | None:
    sp = dataset.split(split)
    if not sp:
        return None
    pairs = _fixed_pairs(sp, cfg)
    if not pairs:
        return None
    return auc(evaluate_pairs(model, dataset, pairs))


def _fixed_pairs(split: Split, cfg: TrainConfig):
    pos, neg = candidate_pairs(split)
    if not pos or not neg:
        return []
    n_pos, n_neg = min(cfg.val_pairs[0], len(pos)), min(cfg.val_pairs[1], len(neg))
    return sample_pairs(split, n_pos, n_neg, np.random.default_rng(cfg.seed + 7919))


class Trainer:
    """Owns model, optimizer and RNG; can be checkpointed and resumed exactly."""

    def __init__(self, dataset: DatasetSplit, mcfg: ModelConfig, tcfg: TrainConfig, model: CatModel | None = None):
        n_classes = len(dataset.train.procedures)
        if mcfg.C != n_classes:
            raise ValueError(f"model has C={mcfg.C} classes but the training split has {n_classes} procedures")
        if mcfg.D_in != dataset.dim:
            raise ValueError(f"model expects D_in={mcfg.D_in}, data has dim {dataset.dim}")
        if mcfg.K != tcfg.K:
            raise ValueError(f"model K={mcfg.K} differs from train K={tcfg.K}")
        self.dataset, self.mcfg, self.tcfg = dataset, mcfg, tcfg
        self.model = model or CatModel(mcfg)
        self.opt = nx.AdamState(weight_decay=tcfg.weight_decay)
        self.rng = np.random.default_rng(tcfg.seed)
        self.labels = class_index(dataset.train)
        self.step = 0
        self.log = TrainLog()
        self.best_auc = -1.0
        self.best_state: dict | None = None
        self.snapshots: list[tuple[int, dict]] = []
        n_videos = len(dataset.train.videos)
        self.steps_per_epoch = tcfg.steps_per_epoch or max(1, math.ceil(n_videos / tcfg.batch_size))
        self.total_steps = tcfg.epochs * self.steps_per_epoch

    # -- persistence ------------------------------------------------------
    def save(self, path: str | os.PathLike) -> None:
        extra = {
            "step": self.step,
            "train_config": self.tcfg.to_dict(),
            "log": {"steps": self.log.steps, "epochs": self.log.epochs},
            "best_auc": self.best_auc,
        }
        save_checkpoint(path, self.model, self.opt, self.rng.bit_generator.state, extra)

    @classmethod
    def resume(cls, dataset: DatasetSplit, path: str | os.PathLike) -> "Trainer":
        ck = load_checkpoint(path)
        tcfg = TrainConfig.from_dict(ck.extra["train_config"])
        tr = cls(dataset, ck.model.cfg, tcfg, model=ck.model)
        tr.opt = ck.optimizer
        tr.rng.bit_generator.state = ck.rng_state
        tr.step = ck.extra["step"]
        tr.log = TrainLog(**ck.extra["log"])
        tr.best_auc = ck.extra["best_auc"]
        return tr

    # -- optimization -----------------------------------------------------
    def train_step(self) -> dict:
        cfg = self.tcfg
        lr = nx.cosine_lr(self.step, self.total_steps, cfg.base_lr)
        clips, labels = build_batch(self.dataset, cfg, self.rng, self.labels)
        self.model.zero_grad()
        try:
            total, parts = batch_loss(self.model, clips, labels, cfg.lam)
            total.backward()
            params = self.model.parameters()
            norm = nx.clip_grad_norm(params, cfg.clip_norm)
            if not math.isfinite(norm):
                raise nx.NumericError("non-finite gradient norm")
            nx.adam_step(params, self.opt, lr)
        except nx.NumericError as exc:
            last = self.log.steps[-1] if self.log.steps else None
            raise TrainingDivergence(f"training diverged at step {self.step}: {exc}; last record {last}") from exc
        if norm > cfg.clip_norm:
            log.debug("step %d: gradient norm %.3f clipped to %.1f", self.step, norm, cfg.clip_norm)
        rec = {
            "step": self.step,
            "lr": lr,
            "cls": parts.cls,
            "cls_sum": parts.cls * len(labels),
            "seq": parts.seq,
            "total": parts.total,
            "lambda": parts.lam,
            "grad_norm": norm,
            "clipped": norm > cfg.clip_norm,
        }
        self.log.steps.append(rec)
        self.step += 1
        return rec

    def end_of_epoch(self, epoch: int, out_dir: Path | None, keep_snapshots: bool) -> None:
        cfg = self.tcfg
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            val = validation_auc(self.model, self.dataset, cfg)
            self.log.epochs.append({"epoch": epoch, "step": self.step, "val_auc": val})
            log.info("epoch %d step %d loss %.4f val_auc %s", epoch, self.step, self.log.steps[-1]["total"], val)
            if keep_snapshots:
                self.snapshots.append((epoch, self.model.state_dict()))
            if val is not None and val > self.best_auc:
                self.best_auc = val
                self.best_state = self.model.state_dict()
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", self.model, extra={"epoch": epoch, "val_auc": val})
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            self.save(out_dir / f"epoch{epoch:04d}.ckpt")

    def run(
        self,
        out_dir: str | os.PathLike | None = None,
        keep_snapshots: bool = False,
        stop_at_step: int | None = None,
        on_step: Callable[[dict], None] | None = None,
    ) -> TrainLog:
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        end = self.total_steps if stop_at_step is None else min(stop_at_step, self.total_steps)
        while self.step < end:
            rec = self.train_step()
            if on_step is not None:
                on_step(rec)
            if self.step % self.steps_per_epoch == 0:
                self.end_of_epoch(self.step // self.steps_per_epoch, out, keep_snapshots)
        if out is not None and self.step == self.total_steps:
            self.save(out / "last.ckpt")
            (out / "train_log.jsonl").write_text(self.log.to_jsonl())
        return self.log


@dataclass
class TrainResult:
    model: CatModel
    log: TrainLog
    best_model: CatModel
    best_auc: float | None
    snapshots: list[tuple[int, dict]]


def train(
    dataset: DatasetSplit,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    keep_snapshots: bool = False,
) -> TrainResult:
    """Optimize classification + lambda * alignment with AdamW and a cosine schedule.

    The best model is the one with the highest validation AUC; without a
    validation split it is the final model.
    """
    tr = Trainer(dataset, mcfg, tcfg)
    tr.run(out_dir, keep_snapshots=keep_snapshots)
    best = tr.model
    if tr.best_state is not None:
        best = CatModel(mcfg)
        best.load_state_dict(tr.best_state)
    return TrainResult(tr.model, tr.log, best, tr.best_auc if tr.best_auc >= 0 else None, tr.snapshots)
