"""Verification distances, AUC, WDR, thresholding, curves and embedding spread."""

from __future__ import annotations

import csv
import io
import json
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .data import DatasetSplit, PairSample, VideoRecord, sample_segments


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


@dataclass(frozen=True)
class PairDistance:
    pair: PairSample
    d: float


def _unit(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e)
    if n == 0:
        raise MetricError("zero-norm embedding")
    return e / n


def pair_distance(ea, eb) -> float:
    """Euclidean distance between l2-normalized embeddings, in [0, 2]."""
    return float(np.linalg.norm(_unit(ea) - _unit(eb)))


def verify(d: float, tau: float) -> bool:
    """True (consistent) iff d <= tau."""
    return d <= tau


def score(ref, cand) -> float:
    """Cosine similarity between two embeddings."""
    return float(np.clip(_unit(ref) @ _unit(cand), -1.0, 1.0))


def _split(distances: Iterable[PairDistance]) -> tuple[np.ndarray, np.ndarray]:
    distances = list(distances)
    pos = np.array([x.d for x in distances if x.pair.is_positive], dtype=np.float64)
    neg = np.array([x.d for x in distances if not x.pair.is_positive], dtype=np.float64)
    return pos, neg


def auc_from_distances(pos: Sequence[float], neg: Sequence[float]) -> float:
    """P(positive distance < negative distance), ties counted 1/2 (Mann-Whitney U / (P*N))."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC needs at least one positive and one negative pair")
    ranks = stats.rankdata(np.concatenate([-pos, -neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc(distances: Iterable[PairDistance]) -> float:
    return auc_from_distances(*_split(distances))


def wdr(distances: Iterable[PairDistance]) -> float:
    """Mean Levenshtein-weighted negative distance over mean positive distance."""
    distances = list(distances)
    pos = [x.d for x in distances if x.pair.is_positive]
    neg = [(x.d, x.pair.ed) for x in distances if not x.pair.is_positive]
    if not pos or not neg:
        raise MetricError("WDR needs at least one positive and one negative pair")
    if any(ed < 1 for _, ed in neg):
        raise MetricError("negative pair with Levenshtein distance 0")
    mean_pos = sum(pos) / len(pos)
    if mean_pos <= 0:
        raise MetricError("mean positive distance is zero (degenerate embedding)")
    return (sum(d / ed for d, ed in neg) / len(neg)) / mean_pos


def split_auc(distances: Iterable[PairDistance], splits: Sequence[str] = ("alter-number", "alter-order")) -> dict[str, float]:
    """AUC of the shared positives against the negatives of each transformation split."""
    distances = list(distances)
    pos = [x.d for x in distances if x.pair.is_positive]
    out = {}
    for name in splits:
        neg = [x.d for x in distances if not x.pair.is_positive and x.pair.tag == name]
        if not neg:
            raise MetricError(f"split {name!r} has no negative pairs")
        out[name] = auc_from_distances(pos, neg)
    return out


def distance_vs_levenshtein(distances: Iterable[PairDistance]) -> dict[int, float]:
    """Mean distance per Levenshtein bucket (bucket 0 holds the positives)."""
    buckets: dict[int, list[float]] = defaultdict(list)
    for x in distances:
        buckets[x.pair.ed].append(x.d)
    return {ed: float(np.mean(v)) for ed, v in sorted(buckets.items())}


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(stats.spearmanr(xs, ys).statistic)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(stats.pearsonr(xs, ys).statistic)


def error_rates(pos: np.ndarray, neg: np.ndarray, tau: float) -> tuple[float, float]:
    """(false positive rate, false negative rate) of the decision d <= tau."""
    return float(np.mean(neg <= tau)), float(np.mean(pos > tau))


def select_tau(distances: Iterable[PairDistance]) -> float:
    """Equal-error-rate threshold: midpoint of the interval minimizing |FPR - FNR|."""
    pos, neg = _split(distances)
    if pos.size == 0 or neg.size == 0:
        raise MetricError("threshold selection needs positives and negatives")
    u = np.unique(np.concatenate([pos, neg]))
    # (lo, hi, gap): tau in [lo, hi) accepts the distances <= lo; the leading interval accepts none
    intervals = []
    if u[0] > 0:
        intervals.append((0.0, u[0], 1.0))
    for j, lo in enumerate(u):
        hi = u[j + 1] if j + 1 < u.size else lo
        fpr, fnr = error_rates(pos, neg, lo)
        intervals.append((lo, hi, abs(fpr - fnr)))
    gaps = np.array([g for _, _, g in intervals])
    best = gaps.min()
    first = int(np.flatnonzero(gaps <= best + 1e-12)[0])
    last = first
    while last + 1 < len(intervals) and intervals[last + 1][2] <= best + 1e-12:
        last += 1
    return float(0.5 * (intervals[first][0] + intervals[last][1]))


def embedding_spread(groups: Mapping[object, np.ndarray], normalize: bool = True) -> tuple[float, float]:
    """(mean intra-procedure variance, inter-procedure variance of centroids).

    Both are mean squared distances to the respective centroid. ``normalize``
    l2-normalizes embeddings first so models with different scales compare.
    """
    if not groups:
        raise MetricError("no embedding groups")
    cents, intra = [], []
    for emb in groups.values():
        e = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        if normalize:
            e = e / np.linalg.norm(e, axis=1, keepdims=True)
        c = e.mean(axis=0)
        cents.append(c)
        intra.append(float(((e - c) ** 2).sum(axis=1).mean()))
    cents = np.stack(cents)
    g = cents.mean(axis=0)
    inter = float(((cents - g) ** 2).sum(axis=1).mean())
    return float(np.mean(intra)), inter


# --------------------------------------------------------------------------
# embedding extraction
# --------------------------------------------------------------------------


def embed_videos(model, dataset: DatasetSplit, videos: Sequence[VideoRecord], workers: int = 1, chunk: int = 64) -> dict[str, np.ndarray]:
    """Eval-mode (segment center) embeddings for ``videos``, keyed by video id."""
    K = model.cfg.K
    videos = list(videos)
    chunks = [videos[i:i + chunk] for i in range(0, len(videos), chunk)]

    def run(vs):
        clips = np.stack([sample_segments(dataset.features(v), K, "eval") for v in vs])
        return model.embed(clips)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    out = {}
    for vs, embs in zip(chunks, results):
        for v, e in zip(vs, embs):
            out[v.video_id] = e
    return out


def split_variance(model, dataset: DatasetSplit, split: str = "test", workers: int = 1) -> dict[str, float]:
    """embedding_spread per task over the split's procedures, averaged across tasks."""
    sp = dataset.split(split)
    emb = embed_videos(model, dataset, sp.videos, workers=workers)
    by_task: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for v in sp.videos:
        by_task[v.procedure.task_id][v.procedure.procedure_id].append(emb[v.video_id])
    rows = [embedding_spread({k: np.stack(e) for k, e in procs.items()}) for _, procs in sorted(by_task.items())]
    if not rows:
        raise MetricError(f"split {split!r} is empty")
    intra, inter = np.mean(rows, axis=0)
    return {"intra_procedure": float(intra), "inter_procedure": float(inter)}


def pair_distances(pairs: Sequence[PairSample], embeddings: Mapping[str, np.ndarray]) -> list[PairDistance]:
    return [PairDistance(p, pair_distance(embeddings[p.a.video_id], embeddings[p.b.video_id])) for p in pairs]


def evaluate_pairs(model, dataset: DatasetSplit, pairs: Sequence[PairSample], workers: int = 1) -> list[PairDistance]:
    vids = {}
    for p in pairs:
        vids[p.a.video_id] = p.a
        vids[p.b.video_id] = p.b
    emb = embed_videos(model, dataset, list(vids.values()), workers=workers)
    return pair_distances(pairs, emb)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    auc: float
    wdr: float
    tau: float
    num_positive: int
    num_negative: int
    per_split_auc: dict[str, float] = field(default_factory=dict)
    ed_curve: dict[int, float] = field(default_factory=dict)
    checkpoint_curve: list[dict] = field(default_factory=list)
    variance: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ed_curve"] = {str(k): v for k, v in self.ed_curve.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["ed_curve"] = {int(k): v for k, v in d.get("ed_curve", {}).items()}
        return cls(**d)

    def ed_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ed", "mean_distance"])
        for ed, m in sorted(self.ed_curve.items()):
            w.writerow([ed, repr(m)])
        return buf.getvalue()

    def checkpoint_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["checkpoint", "wdr", "auc"])
        for row in self.checkpoint_curve:
            w.writerow([row["checkpoint"], repr(row["wdr"]), repr(row["auc"])])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"AUC {100 * self.auc:.2f}  WDR {self.wdr:.4f}  tau {self.tau:.4f}  (P={self.num_positive}, N={self.num_negative})"]
        for k, v in sorted(self.per_split_auc.items()):
            lines.append(f"  {k:<13} AUC {100 * v:.2f}")
        return "\n".join(lines)


def build_report(distances: Sequence[PairDistance], with_splits: bool = False, tau: float | None = None) -> MetricsReport:
    pos, neg = _split(distances)
    rep = MetricsReport(
        auc=auc(distances),
        wdr=wdr(distances),
        tau=select_tau(distances) if tau is None else tau,
        num_positive=int(pos.size),
        num_negative=int(neg.size),
        ed_curve=distance_vs_levenshtein(distances),
    )
    if with_splits:
        rep.per_split_auc = split_auc(distances)
    return rep


def write_report(rep: MetricsReport, path: str | os.PathLike) -> None:
    base = os.fspath(path)
    stem = base[:-5] if base.endswith(".json") else base
    with open(base, "w") as fh:
        fh.write(rep.to_json())
    with open(stem + ".ed_curve.csv", "w") as fh:
        fh.write(rep.ed_curve_csv())
    if rep.checkpoint_curve:
        with open(stem + ".checkpoint_curve.csv", "w") as fh:
            fh.write(rep.checkpoint_curve_csv())
