"""Online verification: compare a growing test prefix against windows of a complete reference."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .data import PVFT_HEADER_SIZE, DataError, StepToken, Synthesizer, decode_header, sample_segments
from .model import CatModel


class StreamClosed(RuntimeError):
    """Frames were fed to a stream that has been closed."""


@dataclass(frozen=True)
class WarningEvent:
    t: int
    distance: float
    threshold: float

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "distance": self.distance, "threshold": self.threshold}, sort_keys=True)


def prefix_embed(frames: np.ndarray, t: int, model: CatModel) -> np.ndarray:
    """Embedding of the first ``t`` frames, resampled to K segment centers."""
    K = model.cfg.K
    if t < K:
        raise DataError(f"prefix of {t} frames is shorter than K={K}")
    if t > len(frames):
        raise DataError(f"prefix length {t} exceeds the {len(frames)} available frames")
    return model.embed(sample_segments(frames[:t], K, "eval"))


class ReferencePrefixes:
    """Raw embeddings of every reference prefix length in [K, T0], computed once.

    Each prefix is embedded on its own, exactly as ``prefix_embed`` does, so an
    identical test stream reproduces the reference embeddings bit for bit.
    """

    def __init__(self, reference: np.ndarray, model: CatModel):
        K = model.cfg.K
        T0 = len(reference)
        if T0 < K:
            raise DataError(f"reference has {T0} frames, needs at least K={K}")
        self.K, self.T0 = K, T0
        self.embeddings = np.stack([prefix_embed(reference, t, model) for t in range(K, T0 + 1)])

    def window(self, t: int, k: int) -> np.ndarray:
        """Embeddings of prefixes t-k .. t+k, lengths clamped into [K, T0]."""
        lengths = np.clip(np.arange(t - k, t + k + 1), self.K, self.T0)
        return self.embeddings[lengths - self.K]


def windowed_distance(
    test_frames: np.ndarray,
    t: int,
    reference: np.ndarray | ReferencePrefixes,
    model: CatModel,
    k: int,
) -> float:
    """Mean squared L2 distance between the t-frame test prefix and the 2k+1 reference prefixes."""
    if k < 0:
        raise ValueError("window k must be non-negative")
    ref = reference if isinstance(reference, ReferencePrefixes) else ReferencePrefixes(reference, model)
    e = prefix_embed(test_frames, t, model)
    diff = ref.window(t, k) - e
    return float((diff * diff).sum(axis=1).mean())


def default_threshold(matched_distances: Iterable[float], n_std: float = 3.0) -> float:
    """mean + n_std * std of distances observed on matched (consistent) streams."""
    d = np.asarray(list(matched_distances), dtype=np.float64)
    if d.size == 0:
        raise ValueError("need matched-stream distances to derive a threshold")
    return float(d.mean() + n_std * d.std())


@dataclass
class StreamState:
    reference: ReferencePrefixes
    window_k: int = 30
    warn_threshold: float = float("inf")
    stride: int = 25
    history: list[tuple[int, float]] = field(default_factory=list)
    warned_at: int | None = None
    closed: bool = False
    _frames: list[np.ndarray] = field(default_factory=list, repr=False)
    _count: int = 0
    _next_eval: int | None = None

    def __post_init__(self):
        if self.window_k < 0 or self.stride < 1:
            raise ValueError("window_k must be >= 0 and stride >= 1")

    @property
    def num_frames(self) -> int:
        return self._count

    def frames(self) -> np.ndarray:
        return np.concatenate(self._frames) if self._frames else np.zeros((0, 0))

    def close(self) -> None:
        self.closed = True


def open_stream(reference: np.ndarray, model: CatModel, window_k: int = 30, warn_threshold: float = float("inf"), stride: int = 25) -> StreamState:
    return StreamState(ReferencePrefixes(reference, model), window_k, warn_threshold, stride)


def feed(state: StreamState, new_frames: np.ndarray, model: CatModel, stride: int | None = None) -> list[WarningEvent]:
    """Append frames; evaluate at t = K, K + stride, ...; the first threshold crossing warns.

    ``stride`` overrides the state's stride from this call on. Returns the warning
    raised by this call (at most one per stream) as a list.
    """
    if stride is not None:
        if stride < 1:
            raise ValueError("stride must be >= 1")
        state.stride = stride
    if state.closed:
        raise StreamClosed("stream already closed")
    new_frames = np.asarray(new_frames)
    if new_frames.ndim != 2:
        raise DataError(f"frames must be 2-D, got {new_frames.shape}")
    if new_frames.shape[0] == 0:
        return []
    if state._frames and new_frames.shape[1] != state._frames[0].shape[1]:
        raise DataError(f"frame dim changed from {state._frames[0].shape[1]} to {new_frames.shape[1]}")
    state._frames.append(new_frames)
    state._count += new_frames.shape[0]
    K = state.reference.K
    if state._next_eval is None:
        state._next_eval = K
    events = []
    if state._next_eval > state._count:
        return events
    frames = state.frames()
    state._frames = [frames]
    while state._next_eval <= state._count:
        t = state._next_eval
        d = windowed_distance(frames, t, state.reference, model, state.window_k)
        state.history.append((t, d))
        if state.warned_at is None and d > state.warn_threshold:
            state.warned_at = t
            events.append(WarningEvent(t, d, state.warn_threshold))
        state._next_eval += state.stride
    return events


def monitor(reference: np.ndarray, stream: np.ndarray, model: CatModel, window_k: int, threshold: float, stride: int, chunk: int = 1) -> StreamState:
    """Feed ``stream`` through a fresh state ``chunk`` frames at a time."""
    state = open_stream(reference, model, window_k, threshold, stride)
    for i in range(0, len(stream), chunk):
        feed(state, stream[i:i + chunk], model)
    state.close()
    return state


def distance_curve(reference: np.ndarray, stream: np.ndarray, model: CatModel, window_k: int, times: Sequence[int]) -> list[float]:
    ref = ReferencePrefixes(reference, model)
    return [windowed_distance(stream, t, ref, model, window_k) for t in times]


def read_stream(fh: BinaryIO, chunk_frames: int = 25) -> tuple[int, Iterator[np.ndarray]]:
    """Incremental PVFT reader: returns (dim, iterator of float32 row chunks).

    A header frame count of 0 marks an open-ended stream read until EOF; otherwise
    the stream must deliver exactly that many rows.
    """
    header = _read_exact(fh, PVFT_HEADER_SIZE)
    if len(header) < PVFT_HEADER_SIZE:
        raise DataError("stream ended before the PVFT header")
    n, dim = decode_header(header)
    row = 4 * dim

    def chunks():
        seen = 0
        while True:
            buf = _read_exact(fh, row * chunk_frames)
            if not buf:
                break
            if len(buf) % row:
                raise DataError(f"stream ended mid-row after {seen} frames")
            arr = np.frombuffer(buf, dtype="<f4").reshape(-1, dim).astype(np.float32)
            seen += arr.shape[0]
            if n and seen > n:
                raise DataError(f"stream has more than the {n} frames its header declares")
            yield arr
        if n and seen != n:
            raise DataError(f"stream truncated: {seen} of {n} frames")

    return dim, chunks()


def _read_exact(fh: BinaryIO, size: int) -> bytes:
    """Read up to ``size`` bytes, looping over short reads from pipes."""
    parts, got = [], 0
    while got < size:
        b = fh.read(size - got)
        if not b:
            break
        parts.append(b)
        got += len(b)
    return b"".join(parts)


def divergent_stream(
    synth: Synthesizer,
    steps: Sequence[StepToken],
    s: int,
    rng: np.random.Generator,
    reference: np.ndarray | None = None,
    ref_durations: Sequence[int] | None = None,
    offset: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Render ``steps[:s]`` followed by an equally long tail of steps absent from ``steps[s:]``.

    Without ``reference`` the stream is a fresh render that matches in content only.
    With ``reference`` and its ``ref_durations`` the first s steps are the reference's own
    frames, so the stream replays the recording up to the divergence. ``offset`` pins the
    per-video offset of the rendered part. Returns (frames, first frame of the divergent tail).
    """
    if not 0 < s < len(steps):
        raise ValueError(f"divergence step {s} must lie inside the {len(steps)}-step procedure")
    if reference is not None and ref_durations is None:
        raise ValueError("replaying a reference prefix needs its step durations")
    banned = set(steps[s:])
    pool = [t for t in synth.vocab if t not in banned]
    tail: list[StepToken] = []
    prev = steps[s - 1]
    while len(tail) < len(steps) - s:
        tok = pool[int(rng.integers(len(pool)))]
        if tok != prev:
            tail.append(tok)
            prev = tok
    seq = list(steps[:s]) + tail
    dur = synth.durations(len(seq), rng)
    if ref_durations is not None:
        dur[:s] = np.asarray(ref_durations)[:s]
    frames = synth.render(seq, rng, dur, offset=offset)
    div = int(dur[:s].sum())
    if reference is not None:
        if len(reference) < div:
            raise ValueError("reference is shorter than its first s steps")
        frames[:div] = reference[:div]
    return frames, div
