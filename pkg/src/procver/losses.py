"""Procedure classification loss, sequence alignment loss and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class DegenerateInputError(ValueError):
    """A frame vector has zero norm, so its cosine similarity is undefined."""


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    seq: float
    total: float
    lam: float


def classification_loss(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of (N, C) logits against procedure labels.

    ``reduction="sum"`` is the dataset-sum form; training uses the batch mean.
    """
    return nx.cross_entropy(logits, labels, reduction=reduction)


@dataclass
class CorrelationMatrix:
    cosine: Tensor
    row_softmax: Tensor  # corr1: each row sums to 1
    col_softmax: Tensor  # corr2: each column sums to 1
    average: Tensor


def correlation(seq1, seq2) -> CorrelationMatrix:
    """Cosine similarities between all frame pairs, row/column softmaxed and averaged.

    Inputs are (K, D) or batched (B, K, D).
    """
    a, b = nx.as_tensor(seq1), nx.as_tensor(seq2)
    if a.shape != b.shape or a.ndim not in (2, 3):
        raise nx.ShapeError(f"correlation: incompatible sequences {a.shape} / {b.shape}")
    if (np.linalg.norm(a.data, axis=-1) == 0).any() or (np.linalg.norm(b.data, axis=-1) == 0).any():
        raise DegenerateInputError("zero-norm frame vector in sequence alignment input")
    cos = nx.matmul(nx.l2_normalize(a), nx.transpose(nx.l2_normalize(b)))
    c1 = nx.softmax(cos, axis=-1)
    c2 = nx.softmax(cos, axis=-2)
    return CorrelationMatrix(cos, c1, c2, nx.mul(nx.add(c1, c2), 0.5))


def sequence_alignment_loss(seq1, seq2, reduction: str = "mean") -> Tensor:
    """sum_i |1 - corr_avg[i, i]| per pair; batched inputs are reduced over pairs."""
    corr = correlation(seq1, seq2)
    gap = nx.add(1.0, nx.neg(nx.diagonal(corr.average)))
    per_pair = nx.abs_sum(gap, axis=-1)
    if per_pair.ndim == 0:
        return per_pair
    if reduction == "mean":
        return nx.mean(per_pair)
    if reduction == "sum":
        return nx.sum_all(per_pair)
    raise ValueError(f"unknown reduction {reduction!r}")


def identical_orthonormal_value(K: int) -> float:
    """Closed-form L_seq for two identical sequences of K orthonormal frames."""
    return K * (1.0 - math.e / (math.e + K - 1))


def total_loss(cls: float, seq: float, lam: float = 1.0) -> LossBreakdown:
    if not all(math.isfinite(x) for x in (cls, seq, lam)):
        raise nx.NumericError(f"non-finite loss input cls={cls} seq={seq} lambda={lam}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return LossBreakdown(cls, seq, cls + lam * seq, lam)
