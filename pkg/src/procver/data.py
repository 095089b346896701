"""Step/procedure/task data model, synthetic procedure videos, feature files and sampling."""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import struct
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
PVFT_MAGIC = b"PVFT"
PVFT_VERSION = 1
_PVFT_HEADER = struct.Struct("<4sIII")
PVFT_HEADER_SIZE = _PVFT_HEADER.size


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class StepToken:
    verb: str
    object: str

    def __post_init__(self):
        if not self.verb or not self.object:
            raise DataError(f"step token needs a verb and an object, got {self.verb!r}/{self.object!r}")

    @classmethod
    def parse(cls, text: str) -> "StepToken":
        verb, sep, obj = text.partition("-")
        if not sep:
            raise DataError(f"step token {text!r} is not of the form verb-object")
        return cls(verb, obj)

    def __str__(self) -> str:
        return f"{self.verb}-{self.object}"


def tokens(texts: Iterable[str]) -> tuple[StepToken, ...]:
    return tuple(StepToken.parse(t) for t in texts)


@dataclass(frozen=True)
class ProcedureRecord:
    task_id: str
    procedure_id: str
    steps: tuple[StepToken, ...]
    split: str = "train"

    def __post_init__(self):
        if not self.steps:
            raise DataError(f"procedure {self.procedure_id!r} has no steps")
        if self.split not in SPLITS:
            raise DataError(f"procedure {self.procedure_id!r}: unknown split {self.split!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.task_id, self.procedure_id)


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    procedure: ProcedureRecord
    num_frames: int
    feature_file: str | None = None
    seed: int | None = None


@dataclass
class Split:
    name: str
    procedures: list[ProcedureRecord] = field(default_factory=list)
    videos: list[VideoRecord] = field(default_factory=list)

    def videos_by_procedure(self) -> dict[tuple[str, str], list[VideoRecord]]:
        out: dict[tuple[str, str], list[VideoRecord]] = {p.key: [] for p in self.procedures}
        for v in self.videos:
            out[v.procedure.key].append(v)
        return out

    def __bool__(self) -> bool:
        return bool(self.procedures)


@dataclass
class DatasetSplit:
    """Procedure-disjoint train/val/test splits plus access to frame features."""

    dim: int
    train: Split
    val: Split
    test: Split
    root: Path | None = None
    generator: "GeneratorConfig | None" = None
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def procedures(self) -> list[ProcedureRecord]:
        return self.train.procedures + self.val.procedures + self.test.procedures

    @property
    def videos(self) -> list[VideoRecord]:
        return self.train.videos + self.val.videos + self.test.videos

    def features(self, video: VideoRecord) -> np.ndarray:
        """(num_frames, dim) float32 rows for ``video``."""
        cached = self._cache.get(video.video_id)
        if cached is not None:
            return cached
        if video.feature_file is None:
            raise DataError(f"video {video.video_id!r} has no feature source")
        path = Path(video.feature_file)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        arr = read_features(path)
        if arr.shape != (video.num_frames, self.dim):
            raise DataError(f"{path}: features {arr.shape} disagree with manifest ({video.num_frames}, {self.dim})")
        self._cache[video.video_id] = arr
        return arr


@dataclass(frozen=True)
class PairSample:
    a: VideoRecord
    b: VideoRecord
    is_positive: bool
    ed: int

    @property
    def tag(self) -> str:
        """``positive``, ``alter-order`` (same step multiset) or ``alter-number``."""
        if self.is_positive:
            return "positive"
        return "alter-order" if Counter(self.a.procedure.steps) == Counter(self.b.procedure.steps) else "alter-number"


# --------------------------------------------------------------------------
# Levenshtein distance over step tokens
# --------------------------------------------------------------------------


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute edit distance between two token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


# --------------------------------------------------------------------------
# PVFT feature files
# --------------------------------------------------------------------------


def encode_features(frames: np.ndarray) -> bytes:
    arr = np.asarray(frames)
    if arr.ndim != 2:
        raise DataError(f"features must be 2-D (frames, dim), got shape {arr.shape}")
    header = _PVFT_HEADER.pack(PVFT_MAGIC, PVFT_VERSION, arr.shape[0], arr.shape[1])
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_header(buf: bytes) -> tuple[int, int]:
    """Parse a PVFT header; returns (num_frames, dim)."""
    if len(buf) < _PVFT_HEADER.size:
        raise DataError("truncated PVFT header")
    magic, version, n, dim = _PVFT_HEADER.unpack_from(buf)
    if magic != PVFT_MAGIC:
        raise DataError(f"bad PVFT magic {magic!r}")
    if version != PVFT_VERSION:
        raise DataError(f"unsupported PVFT version {version}")
    if dim == 0:
        raise DataError("PVFT dim must be positive")
    return n, dim


def decode_features(buf: bytes) -> np.ndarray:
    n, dim = decode_header(buf)
    payload = buf[_PVFT_HEADER.size:]
    if len(payload) != n * dim * 4:
        raise DataError(f"PVFT payload has {len(payload)} bytes, header promises {n}x{dim} float32")
    return np.frombuffer(payload, dtype="<f4").reshape(n, dim).astype(np.float32)


def write_features(path: str | os.PathLike, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(frames))


def read_features(path: str | os.PathLike) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


def read_features_header(path: str | os.PathLike) -> tuple[int, int]:
    with open(path, "rb") as fh:
        return decode_header(fh.read(_PVFT_HEADER.size))


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


def manifest_dict(ds: DatasetSplit) -> dict:
    tasks: dict[str, list] = {}
    for split in (ds.train, ds.val, ds.test):
        byproc = split.videos_by_procedure()
        for p in split.procedures:
            tasks.setdefault(p.task_id, []).append(
                {
                    "procedure_id": p.procedure_id,
                    "steps": [str(s) for s in p.steps],
                    "split": p.split,
                    "videos": [
                        {"video_id": v.video_id, "feature_file": v.feature_file, "num_frames": v.num_frames}
                        for v in byproc[p.key]
                    ],
                }
            )
    doc = {"dim": ds.dim, "tasks": [{"task_id": t, "procedures": procs} for t, procs in sorted(tasks.items())]}
    if ds.generator is not None:
        doc["generator"] = ds.generator.to_dict()
    return doc


def write_manifest(ds: DatasetSplit, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(manifest_dict(ds), indent=1, sort_keys=True) + "\n")


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise DataError(f"manifest: missing {key!r} in {where}")
    val = obj[key]
    if kind is int and isinstance(val, bool) or not isinstance(val, kind):
        raise DataError(f"manifest: {where}.{key} must be {kind.__name__}")
    return val


def parse_manifest(doc: dict, root: Path | None = None, check_files: bool = True) -> DatasetSplit:
    dim = _require(doc, "dim", int, "manifest")
    if dim <= 0:
        raise DataError("manifest: dim must be positive")
    splits = {name: Split(name) for name in SPLITS}
    seen_proc: dict[tuple[str, str], str] = {}
    seen_video: set[str] = set()
    for t in _require(doc, "tasks", list, "manifest"):
        task_id = _require(t, "task_id", str, "task")
        seen_steps: dict[tuple, str] = {}
        for p in _require(t, "procedures", list, f"task {task_id}"):
            pid = _require(p, "procedure_id", str, f"task {task_id}")
            split = _require(p, "split", str, f"procedure {pid}")
            if split not in SPLITS:
                raise DataError(f"manifest: procedure {pid}: unknown split {split!r}")
            key = (task_id, pid)
            if key in seen_proc:
                if seen_proc[key] != split:
                    raise DataError(f"manifest: split overlap, procedure {pid} in {seen_proc[key]} and {split}")
                raise DataError(f"manifest: duplicate procedure id {pid} in task {task_id}")
            seen_proc[key] = split
            steps = tokens(_require(p, "steps", list, f"procedure {pid}"))
            if steps in seen_steps:
                raise DataError(f"manifest: procedures {seen_steps[steps]} and {pid} have identical steps")
            seen_steps[steps] = pid
            proc = ProcedureRecord(task_id, pid, steps, split)
            splits[split].procedures.append(proc)
            for v in _require(p, "videos", list, f"procedure {pid}"):
                vid = _require(v, "video_id", str, f"procedure {pid}")
                if vid in seen_video:
                    raise DataError(f"manifest: duplicate video id {vid}")
                seen_video.add(vid)
                n = _require(v, "num_frames", int, f"video {vid}")
                if n <= 0:
                    raise DataError(f"manifest: video {vid} has no frames")
                ffile = _require(v, "feature_file", str, f"video {vid}")
                if check_files:
                    path = Path(ffile) if root is None or Path(ffile).is_absolute() else root / ffile
                    try:
                        hn, hdim = read_features_header(path)
                    except OSError as exc:
                        raise DataError(f"manifest: cannot read {path}: {exc}") from exc
                    if hdim != dim:
                        raise DataError(f"{path}: dimension {hdim} != manifest dim {dim}")
                    if hn != n:
                        raise DataError(f"{path}: {hn} frames != manifest num_frames {n}")
                splits[split].videos.append(VideoRecord(vid, proc, n, ffile))
    gen = GeneratorConfig.from_dict(doc["generator"]) if "generator" in doc else None
    return DatasetSplit(dim, splits["train"], splits["val"], splits["test"], root=root, generator=gen)


def load_manifest(path: str | os.PathLike) -> DatasetSplit:
    """Load and validate a manifest; ``path`` may be the JSON file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(doc, root=path.parent)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

_VERBS = ["take", "put", "pour", "screw", "stir", "open", "close", "shake", "wipe", "press", "fill", "rinse"]
_OBJECTS = ["flask", "beaker", "tube", "clamp", "funnel", "cylinder", "dropper", "bottle", "lid", "stand", "rod", "dish"]
TRANSFORMS = ("delete", "insert", "swap")


@dataclass
class GeneratorConfig:
    seed: int = 0
    D_in: int = 64
    num_tasks: int = 10
    procedures_per_task: int = 5
    videos_per_procedure: int = 10
    step_vocab_size: int = 32
    task_vocab_size: int = 8
    steps_range: tuple[int, int] = (5, 8)
    duration_range: tuple[int, int] = (4, 10)
    noise_sigma: float = 0.1
    # lag-1 temporal correlation of the frame noise (0 = independent frames)
    noise_corr: float = 0.0
    # per-video constant appearance offset, in units of noise_sigma
    background_ratio: float = 1.0
    transform_weights: dict[str, float] = field(default_factory=lambda: {"delete": 1 / 3, "insert": 1 / 3, "swap": 1 / 3})
    max_edits: int = 2
    # "procedure": each task's procedures are spread over the splits; "task": whole tasks are
    split_mode: str = "procedure"
    # (train, val, test) procedures per task, or tasks per split in task mode
    split_counts: tuple[int, int, int] | None = None
    min_frames: int = 16

    def __post_init__(self):
        self.steps_range = tuple(self.steps_range)
        self.duration_range = tuple(self.duration_range)
        if self.split_counts is not None:
            self.split_counts = tuple(self.split_counts)
        self.validate()

    def validate(self) -> None:
        d_min, d_max = self.duration_range
        s_min, s_max = self.steps_range
        if d_min < 1 or d_max < d_min:
            raise ValueError(f"bad duration_range {self.duration_range}")
        if s_min < 2 or s_max < s_min:
            raise ValueError(f"bad steps_range {self.steps_range}")
        if self.noise_sigma < 0 or self.background_ratio < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0 <= self.noise_corr < 1:
            raise ValueError("noise_corr must lie in [0, 1)")
        if set(self.transform_weights) - set(TRANSFORMS):
            raise ValueError(f"unknown transforms {set(self.transform_weights) - set(TRANSFORMS)}")
        w = [self.transform_weights.get(t, 0.0) for t in TRANSFORMS]
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("transform weights must be non-negative and sum to 1")
        if min(self.D_in, self.num_tasks, self.procedures_per_task, self.videos_per_procedure, self.max_edits) < 1:
            raise ValueError("counts must be positive")
        if self.task_vocab_size < 2 or self.step_vocab_size < self.task_vocab_size:
            raise ValueError("need step_vocab_size >= task_vocab_size >= 2")
        if self.step_vocab_size > len(_VERBS) * 64:
            raise ValueError("step_vocab_size too large")
        if self.split_mode not in ("procedure", "task"):
            raise ValueError(f"unknown split_mode {self.split_mode!r}")
        counts = self.counts()
        total = self.procedures_per_task if self.split_mode == "procedure" else self.num_tasks
        if len(counts) != 3 or min(counts) < 0 or sum(counts) != total:
            raise ValueError(f"split_counts {counts} must be three non-negative ints summing to {total}")
        if counts[0] < 1:
            raise ValueError("the training split cannot be empty")

    def counts(self) -> tuple[int, int, int]:
        """(train, val, test) procedures per task (procedure mode) or tasks (task mode)."""
        if self.split_counts is not None:
            return self.split_counts
        n = self.procedures_per_task if self.split_mode == "procedure" else self.num_tasks
        if self.split_mode == "procedure":
            n_test = 2 if n >= 3 else 0
            return n - n_test, 0, n_test
        n_test = max(1, round(0.2 * n)) if n >= 2 else 0
        n_val = max(1, round(0.2 * n)) if n >= 3 else 0
        return n - n_val - n_test, n_val, n_test

    def to_dict(self) -> dict:
        d = asdict(self)
        d["steps_range"] = list(self.steps_range)
        d["duration_range"] = list(self.duration_range)
        if self.split_counts is not None:
            d["split_counts"] = list(self.split_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator config keys {sorted(unknown)}")
        return cls(**d)


def _video_rng(seed: int, video_id: str) -> np.random.Generator:
    words = np.frombuffer(hashlib.sha256(video_id.encode()).digest()[:16], dtype="<u4").tolist()
    return np.random.default_rng(np.random.SeedSequence([seed, *words]))


class Synthesizer:
    """Renders frame features for step sequences from fixed unit-norm step prototypes."""

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
        names = [StepToken(v, o) for o in _OBJECTS for v in _VERBS]
        extra = itertools.count()
        while len(names) < cfg.step_vocab_size:
            obj = f"item{next(extra)}"
            names.extend(StepToken(v, obj) for v in _VERBS)
        order = rng.permutation(len(names))[: cfg.step_vocab_size]
        self.vocab: list[StepToken] = [names[i] for i in order]
        protos = rng.standard_normal((cfg.step_vocab_size, cfg.D_in))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.prototypes = {tok: protos[i] for i, tok in enumerate(self.vocab)}

    def durations(self, n_steps: int, rng: np.random.Generator) -> np.ndarray:
        d_min, d_max = self.cfg.duration_range
        dur = rng.integers(d_min, d_max + 1, size=n_steps)
        i = 0
        while dur.sum() < self.cfg.min_frames:
            dur[i % n_steps] += 1
            i += 1
        return dur

    def video_offset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.cfg.D_in) * (self.cfg.noise_sigma * self.cfg.background_ratio)

    def video_layout(self, video_id: str, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Step durations and per-video offset that ``generate_dataset`` used for ``video_id``."""
        rng = _video_rng(self.cfg.seed, video_id)
        dur = self.durations(n_steps, rng)
        return dur, self.video_offset(rng)

    def render(self, steps: Sequence[StepToken], rng: np.random.Generator, durations=None, offset=None) -> np.ndarray:
        """(num_frames, D_in) float32 features: prototype + frame noise + a per-video offset.

        ``offset`` pins the per-video offset (e.g. to re-record in the same setting).
        """
        cfg = self.cfg
        dur = self.durations(len(steps), rng) if durations is None else np.asarray(durations)
        drawn = self.video_offset(rng)
        offset = drawn if offset is None else np.asarray(offset)
        rows = np.repeat(np.stack([self.prototypes[s] for s in steps]), dur, axis=0)
        noise = rng.standard_normal(rows.shape)
        if cfg.noise_corr > 0:
            # stationary AR(1) along time: unit marginal variance, lag-1 correlation noise_corr
            c = np.sqrt(1.0 - cfg.noise_corr**2)
            for t in range(1, len(noise)):
                noise[t] = cfg.noise_corr * noise[t - 1] + c * noise[t]
        noise *= cfg.noise_sigma
        return (rows + noise + offset).astype(np.float32)

    def step_boundaries(self, durations: Sequence[int]) -> np.ndarray:
        """First frame index of each step."""
        return np.concatenate([[0], np.cumsum(durations)[:-1]]).astype(int)


def _no_adjacent_repeat(seq: Sequence[StepToken]) -> bool:
    return all(a != b for a, b in zip(seq, seq[1:]))


def _apply_transform(seq: list, kind: str, vocab: Sequence[StepToken], rng: np.random.Generator) -> list | None:
    if kind == "delete":
        if len(seq) <= 2:
            return None
        i = int(rng.integers(len(seq)))
        return seq[:i] + seq[i + 1:]
    if kind == "insert":
        i = int(rng.integers(len(seq) + 1))
        tok = vocab[int(rng.integers(len(vocab)))]
        return seq[:i] + [tok] + seq[i:]
    cands = [i for i in range(len(seq) - 1) if seq[i] != seq[i + 1]]
    if not cands:
        return None
    i = cands[int(rng.integers(len(cands)))]
    out = list(seq)
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _task_procedures(cfg: GeneratorConfig, vocab: list[StepToken], rng: np.random.Generator) -> list[tuple[StepToken, ...]]:
    task_vocab = [vocab[i] for i in rng.choice(len(vocab), size=cfg.task_vocab_size, replace=False)]
    s_min, s_max = cfg.steps_range
    length = int(rng.integers(s_min, s_max + 1))
    base: list[StepToken] = []
    while len(base) < length:
        tok = task_vocab[int(rng.integers(len(task_vocab)))]
        if not base or tok != base[-1]:
            base.append(tok)
    kinds = [t for t in TRANSFORMS if cfg.transform_weights.get(t, 0.0) > 0]
    probs = np.array([cfg.transform_weights[t] for t in kinds])
    procs = [tuple(base)]
    attempts = 0
    while len(procs) < cfg.procedures_per_task:
        attempts += 1
        if attempts > 200 * cfg.procedures_per_task:
            raise ValueError("step vocabulary too small to build distinct procedure variants")
        seq: list | None = list(base)
        for _ in range(int(rng.integers(1, cfg.max_edits + 1))):
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            seq = _apply_transform(seq, kind, task_vocab, rng)
            if seq is None:
                break
        if seq is None or tuple(seq) in procs or not _no_adjacent_repeat(seq):
            continue
        procs.append(tuple(seq))
    return procs


def generate_dataset(cfg: GeneratorConfig, out_dir: str | os.PathLike | None = None, workers: int = 1) -> DatasetSplit:
    """Build a synthetic procedure dataset; a pure function of ``cfg``.

    With ``out_dir`` the manifest and PVFT feature files are written there and the
    returned dataset references them; the in-memory features are the same float32 rows.
    """
    synth = Synthesizer(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A5C]))
    counts = cfg.counts()
    labels = [name for name, n in zip(SPLITS, counts) for _ in range(n)]
    if cfg.split_mode == "task":
        split_of_task = [labels[i] for i in rng.permutation(cfg.num_tasks)]
    splits = {name: Split(name) for name in SPLITS}
    jobs = []
    for ti in range(cfg.num_tasks):
        task_id = f"t{ti:02d}"
        procs = _task_procedures(cfg, synth.vocab, rng)
        if cfg.split_mode == "task":
            assign = [split_of_task[ti]] * len(procs)
        else:
            assign = [labels[i] for i in rng.permutation(len(procs))]
        for pi, steps in enumerate(procs):
            proc = ProcedureRecord(task_id, f"{task_id}.p{pi}", steps, assign[pi])
            splits[proc.split].procedures.append(proc)
            for vi in range(cfg.videos_per_procedure):
                jobs.append((proc, f"{proc.procedure_id}.v{vi:02d}"))

    def render(job):
        proc, vid = job
        return synth.render(proc.steps, _video_rng(cfg.seed, vid))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        frames = list(pool.map(render, jobs))

    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "features").mkdir(parents=True, exist_ok=True)
    cache = {}
    for (proc, vid), arr in zip(jobs, frames):
        ffile = None
        if root is not None:
            ffile = f"features/{vid}.pvft"
            write_features(root / ffile, arr)
        splits[proc.split].videos.append(VideoRecord(vid, proc, arr.shape[0], ffile, seed=cfg.seed))
        cache[vid] = arr
    ds = DatasetSplit(cfg.D_in, splits["train"], splits["val"], splits["test"], root=root, generator=cfg, _cache=cache)
    if root is not None:
        write_manifest(ds, root / "manifest.json")
    return ds


def summarize(ds: DatasetSplit) -> dict:
    """Per-split counts: tasks, procedures, videos, distinct steps."""
    out = {}
    for split in (ds.train, ds.val, ds.test):
        out[split.name] = {
            "tasks": len({p.task_id for p in split.procedures}),
            "procedures": len(split.procedures),
            "videos": len(split.videos),
            "steps": len({s for p in split.procedures for s in p.steps}),
        }
    return out


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def segment_indices(num_frames: int, K: int, mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """One frame index per each of K equal contiguous segments.

    ``train`` picks uniformly inside each segment, ``eval`` picks the segment center.
    """
    if K < 1:
        raise ValueError("K must be positive")
    if num_frames < K:
        raise DataError(f"video has {num_frames} frames, need at least K={K}")
    bounds = (np.arange(K + 1) * num_frames) // K
    start, end = bounds[:-1], bounds[1:]
    if mode == "eval":
        return start + (end - start) // 2
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        return rng.integers(start, end)
    raise ValueError(f"unknown sampling mode {mode!r}")


def sample_segments(frames: np.ndarray, K: int, mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """K rows of ``frames`` (float64) chosen by TSN-style segment sampling."""
    return np.asarray(frames, dtype=np.float64)[segment_indices(len(frames), K, mode, rng)]


def candidate_pairs(split: Split):
    byproc = split.videos_by_procedure()
    pos = []
    for p in split.procedures:
        pos.extend(itertools.combinations(byproc[p.key], 2))
    neg = []
    by_task: dict[str, list[ProcedureRecord]] = defaultdict(list)
    for p in split.procedures:
        by_task[p.task_id].append(p)
    for procs in by_task.values():
        for p, q in itertools.combinations(procs, 2):
            neg.extend(itertools.product(byproc[p.key], byproc[q.key]))
    return pos, neg


def sample_pairs(split: Split, n_pos: int, n_neg: int, rng: np.random.Generator) -> list[PairSample]:
    """Positives within a procedure, negatives across procedures of one task; no repeats."""
    pos, neg = candidate_pairs(split)
    if n_pos > len(pos) or n_neg > len(neg):
        raise DataError(
            f"requested {n_pos} positive / {n_neg} negative pairs, split {split.name!r} offers {len(pos)} / {len(neg)}"
        )
    ed_cache: dict = {}

    def ed(a: VideoRecord, b: VideoRecord) -> int:
        k = (a.procedure.key, b.procedure.key)
        if k not in ed_cache:
            ed_cache[k] = levenshtein(a.procedure.steps, b.procedure.steps)
        return ed_cache[k]

    out = [PairSample(a, b, True, 0) for a, b in (pos[i] for i in np.sort(rng.choice(len(pos), n_pos, replace=False)))]
    for i in np.sort(rng.choice(len(neg), n_neg, replace=False)):
        a, b = neg[i]
        d = ed(a, b)
        if d < 1:
            raise DataError(f"procedures {a.procedure.procedure_id} and {b.procedure.procedure_id} have identical steps")
        out.append(PairSample(a, b, False, d))
    return out


def all_pairs(split: Split) -> list[PairSample]:
    """Every positive and negative pair of a split."""
    pos, neg = candidate_pairs(split)
    out = [PairSample(a, b, True, 0) for a, b in pos]
    out += [PairSample(a, b, False, levenshtein(a.procedure.steps, b.procedure.steps)) for a, b in neg]
    return out
