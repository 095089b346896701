"""Transformer-encoder procedure embedder with an order-preserving flatten head."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import AdamState, Parameter, Tensor

CKPT_MAGIC = b"PVCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


@dataclass
class ModelConfig:
    D_in: int = 64
    D: int = 64
    K: int = 16
    layers: int = 2
    heads: int = 4
    D_prime: int = 128
    C: int = 2
    use_transformer_encoder: bool = True
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.K < 1 or self.C < 2 or self.D_prime < 2 or self.D_in < 1 or self.layers < 0:
            raise ValueError(f"invalid model config {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    frame_features: Tensor  # (B, K, D) projected frames before position embedding
    encoded: Tensor  # (B, K, D)
    embedding: Tensor  # (B, D_prime)
    logits: Tensor  # (B, C)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CatModel:
    """Projection, position embedding, pre-norm encoder, flatten head, classifier."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        D, K = cfg.D, cfg.K
        self.params: dict[str, Parameter] = {}

        def p(name, value):
            self.params[name] = Parameter(value, name=name)

        p("proj.w", _uniform(rng, cfg.D_in, (cfg.D_in, D)))
        p("proj.b", _uniform(rng, cfg.D_in, (D,)))
        p("pos", rng.normal(0.0, 0.02, (K, D)))
        if cfg.use_transformer_encoder:
            hidden = cfg.mlp_ratio * D
            for i in range(cfg.layers):
                pre = f"enc{i}."
                p(pre + "ln1.g", np.ones(D))
                p(pre + "ln1.b", np.zeros(D))
                for n in ("q", "k", "v", "o"):
                    p(pre + f"attn.{n}.w", _uniform(rng, D, (D, D)))
                    p(pre + f"attn.{n}.b", _uniform(rng, D, (D,)))
                p(pre + "ln2.g", np.ones(D))
                p(pre + "ln2.b", np.zeros(D))
                p(pre + "mlp.w1", _uniform(rng, D, (D, hidden)))
                p(pre + "mlp.b1", _uniform(rng, D, (hidden,)))
                p(pre + "mlp.w2", _uniform(rng, hidden, (hidden, D)))
                p(pre + "mlp.b2", _uniform(rng, hidden, (D,)))
            p("enc.ln.g", np.ones(D))
            p("enc.ln.b", np.zeros(D))
        p("head.w", _uniform(rng, K * D, (K * D, cfg.D_prime)))
        p("head.b", _uniform(rng, K * D, (cfg.D_prime,)))
        p("cls.w", _uniform(rng, cfg.D_prime, (cfg.D_prime, cfg.C)))
        p("cls.b", _uniform(rng, cfg.D_prime, (cfg.C,)))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].data.shape:
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    def _block(self, x: Tensor, i: int) -> Tensor:
        P = self.params
        pre = f"enc{i}."
        h = nx.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = nx.linear(h, P[pre + "attn.q.w"], P[pre + "attn.q.b"])
        k = nx.linear(h, P[pre + "attn.k.w"], P[pre + "attn.k.b"])
        v = nx.linear(h, P[pre + "attn.v.w"], P[pre + "attn.v.b"])
        a = nx.attention(q, k, v, self.cfg.heads)
        x = x + nx.linear(a, P[pre + "attn.o.w"], P[pre + "attn.o.b"])
        h = nx.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        h = nx.gelu(nx.linear(h, P[pre + "mlp.w1"], P[pre + "mlp.b1"]))
        return x + nx.linear(h, P[pre + "mlp.w2"], P[pre + "mlp.b2"])

    def forward(self, clips) -> ForwardOutput:
        """``clips`` is (K, D_in) or (B, K, D_in); outputs always carry a batch axis."""
        cfg, P = self.cfg, self.params
        x = clips if isinstance(clips, Tensor) else Tensor(clips)
        if x.ndim == 2:
            x = nx.reshape(x, (1, *x.shape))
        if x.ndim != 3 or x.shape[1:] != (cfg.K, cfg.D_in):
            raise nx.ShapeError(f"expected clips of shape (B, {cfg.K}, {cfg.D_in}), got {x.shape}")
        B = x.shape[0]
        frames = nx.linear(x, P["proj.w"], P["proj.b"])
        h = frames + P["pos"]
        if cfg.use_transformer_encoder:
            for i in range(cfg.layers):
                h = self._block(h, i)
            h = nx.layer_norm(h, P["enc.ln.g"], P["enc.ln.b"])
        flat = nx.reshape(h, (B, cfg.K * cfg.D))
        emb = nx.linear(flat, P["head.w"], P["head.b"])
        logits = nx.linear(emb, P["cls.w"], P["cls.b"])
        return ForwardOutput(frames, h, emb, logits)

    __call__ = forward

    def embed(self, clips) -> np.ndarray:
        """Embeddings before the classifier: (D_prime,) for one clip, (B, D_prime) for a batch."""
        single = np.ndim(clips) == 2
        with nx.no_grad():
            emb = self.forward(clips).embedding.data
        return emb[0].copy() if single else emb.copy()


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------


def _pack_blob(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<Q")
        return self.take(n)

    def arrays(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nl,) = self.unpack("<H")
            name = self.take(nl).decode()
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def save_checkpoint(
    path: str | os.PathLike,
    model: CatModel,
    optimizer: AdamState | None = None,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write model parameters, optimizer moments, RNG state and free-form metadata."""
    header = {"model_config": asdict(model.cfg), "extra": extra or {}}
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_blob(json.dumps(header, sort_keys=True).encode())]
    parts.append(_pack_arrays(model.state_dict()))
    if optimizer is None:
        parts.append(struct.pack("<B", 0))
    else:
        hyper = {k: getattr(optimizer, k) for k in ("beta1", "beta2", "epsilon", "weight_decay", "step_count")}
        parts.append(struct.pack("<B", 1) + _pack_blob(json.dumps(hyper, sort_keys=True).encode()))
        parts.append(_pack_arrays(optimizer.first_moment))
        parts.append(_pack_arrays(optimizer.second_moment))
    parts.append(_pack_blob(json.dumps(rng_state, sort_keys=True).encode()))
    body = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: CatModel
    optimizer: AdamState | None
    rng_state: dict | None
    extra: dict


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 8 + 32 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    r = _Reader(body)
    r.take(8)
    header = json.loads(r.blob())
    model = CatModel(ModelConfig.from_dict(header["model_config"]))
    model.load_state_dict(r.arrays())
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        hyper = json.loads(r.blob())
        opt = AdamState(**hyper)
        opt.first_moment = r.arrays()
        opt.second_moment = r.arrays()
    rng_state = json.loads(r.blob())
    return Checkpoint(model, opt, rng_state, header.get("extra", {}))
