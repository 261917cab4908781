"""Reusable neural layers: sinusoidal positions, multi-head self- and
cross-attention, position-wise feed-forward, and the fusion value MLP.

Layers are pure functions of (input, params, rng-for-dropout). Parameters
live in a :class:`~tscan.autodiff.ParamStore` under ``<prefix>.<matrix>``
names; each layer has a matching ``init_*`` that registers them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore, ShapeError, Tensor


@dataclass(frozen=True)
class LayerConfig:
    """Widths shared by every attention block."""

    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    dropout_rate: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even and >= 2, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by "
                             f"n_heads={self.n_heads}")
        if self.d_ff < 1:
            raise ValueError(f"d_ff must be positive, got {self.d_ff}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {"d_model": self.d_model, "n_heads": self.n_heads,
                "d_ff": self.d_ff, "dropout_rate": self.dropout_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerConfig":
        return cls(**d)


@dataclass
class AttentionWeights:
    """Per-head attention probabilities captured during one forward pass."""

    probs: np.ndarray  # (n_heads, L_q, L_k)

    @property
    def n_heads(self) -> int:
        return self.probs.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.probs.sum(axis=-1)

    def received(self) -> np.ndarray:
        """Mean over heads and query rows of attention received per key."""
        return self.probs.mean(axis=(0, 1))


_PE_CACHE: dict[tuple[int, int], Tensor] = {}


def positional_encoding(length: int, d_model: int) -> Tensor:
    """Fixed sinusoidal table: sin at even columns, cos at odd ones."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if d_model < 2 or d_model % 2 != 0:
        raise ValueError(f"d_model must be even and >= 2, got {d_model}")
    key = (length, d_model)
    cached = _PE_CACHE.get(key)
    if cached is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        i2 = np.arange(0, d_model, 2, dtype=np.float64)
        angles = pos / np.power(10000.0, i2 / d_model)
        table = np.empty((length, d_model))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        cached = _PE_CACHE[key] = Tensor(table)
    return cached


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(store: ParamStore, prefix: str, rng: np.random.Generator,
                n_in: int, n_out: int) -> None:
    store.register(f"{prefix}.w", glorot(rng, n_in, n_out))
    store.register(f"{prefix}.b", np.zeros(n_out))


def linear(x: Node, store: ParamStore, prefix: str) -> Node:
    return ad.add_rowvec(ad.matmul(x, store[f"{prefix}.w"]), store[f"{prefix}.b"])


def dropout(x: Node, rate: float, train: bool, rng: np.random.Generator | None) -> Node:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.constant(mask, op="dropout_mask"))


def _split_heads(x: Node, n_heads: int) -> Node:
    length, d_model = x.shape
    per = ad.reshape(x, (length, n_heads, d_model // n_heads))
    return ad.permute(per, (1, 0, 2))  # (H, L, d_head)


def _merge_heads(x: Node) -> Node:
    n_heads, length, d_head = x.shape
    return ad.reshape(ad.permute(x, (1, 0, 2)), (length, n_heads * d_head))


def _layer_norm_affine(x: Node, store: ParamStore, prefix: str) -> Node:
    normed = ad.layer_norm(x)
    return ad.add_rowvec(ad.mul_rowvec(normed, store[f"{prefix}.g"]),
                         store[f"{prefix}.b"])


def _init_attention(store: ParamStore, prefix: str, cfg: LayerConfig,
                    rng: np.random.Generator) -> None:
    d = cfg.d_model
    for mat in ("wq", "wk", "wv", "wo"):
        store.register(f"{prefix}.{mat}", glorot(rng, d, d))
    store.register(f"{prefix}.ln.g", np.ones(d))
    store.register(f"{prefix}.ln.b", np.zeros(d))


def _attention(q_in: Node, k_in: Node, v_in: Node, store: ParamStore,
               prefix: str, cfg: LayerConfig, train: bool,
               rng: np.random.Generator | None) -> tuple[Node, AttentionWeights]:
    """Scaled dot-product attention with learned projections.

    Returns the pre-residual output and the captured probabilities.
    """
    qh = _split_heads(ad.matmul(q_in, store[f"{prefix}.wq"]), cfg.n_heads)
    kh = _split_heads(ad.matmul(k_in, store[f"{prefix}.wk"]), cfg.n_heads)
    vh = _split_heads(ad.matmul(v_in, store[f"{prefix}.wv"]), cfg.n_heads)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(cfg.d_head))
    probs = ad.softmax(scores, axis=-1)
    weights = AttentionWeights(np.array(probs.data))
    out = ad.matmul(_merge_heads(ad.matmul(probs, vh)), store[f"{prefix}.wo"])
    return dropout(out, cfg.dropout_rate, train, rng), weights


def init_msa(store: ParamStore, prefix: str, cfg: LayerConfig,
             rng: np.random.Generator) -> None:
    _init_attention(store, prefix, cfg, rng)


def msa(x: Node, store: ParamStore, prefix: str, cfg: LayerConfig,
        train: bool = False,
        rng: np.random.Generator | None = None) -> tuple[Node, AttentionWeights]:
    """Multi-head self-attention sublayer with residual and layer norm."""
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(f"msa: input width {x.shape[-1]} != d_model {cfg.d_model}")
    attn, weights = _attention(x, x, x, store, prefix, cfg, train, rng)
    return _layer_norm_affine(ad.add(x, attn), store, f"{prefix}.ln"), weights


def init_mca(store: ParamStore, prefix: str, cfg: LayerConfig,
             rng: np.random.Generator) -> None:
    _init_attention(store, prefix, cfg, rng)


def mca(q: Node, k: Node, v: Node, store: ParamStore, prefix: str,
        cfg: LayerConfig, train: bool = False,
        rng: np.random.Generator | None = None) -> tuple[Node, AttentionWeights]:
    """Multi-head cross-attention; residual is taken from the query input."""
    for name, node in (("q", q), ("k", k), ("v", v)):
        if node.shape[-1] != cfg.d_model:
            raise ShapeError(f"mca: {name} width {node.shape[-1]} != "
                             f"d_model {cfg.d_model}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"mca: key length {k.shape[0]} != value length {v.shape[0]}")
    attn, weights = _attention(q, k, v, store, prefix, cfg, train, rng)
    return _layer_norm_affine(ad.add(q, attn), store, f"{prefix}.ln"), weights


def init_ffn(store: ParamStore, prefix: str, cfg: LayerConfig,
             rng: np.random.Generator) -> None:
    store.register(f"{prefix}.w1", glorot(rng, cfg.d_model, cfg.d_ff))
    store.register(f"{prefix}.b1", np.zeros(cfg.d_ff))
    store.register(f"{prefix}.w2", glorot(rng, cfg.d_ff, cfg.d_model))
    store.register(f"{prefix}.b2", np.zeros(cfg.d_model))
    store.register(f"{prefix}.ln.g", np.ones(cfg.d_model))
    store.register(f"{prefix}.ln.b", np.zeros(cfg.d_model))


def ffn(x: Node, store: ParamStore, prefix: str, cfg: LayerConfig,
        train: bool = False, rng: np.random.Generator | None = None) -> Node:
    """Position-wise two-layer network with residual and layer norm."""
    if x.shape[-1] != cfg.d_model:
        raise ShapeError(f"ffn: input width {x.shape[-1]} != d_model {cfg.d_model}")
    hidden = ad.relu(ad.add_rowvec(ad.matmul(x, store[f"{prefix}.w1"]),
                                   store[f"{prefix}.b1"]))
    out = ad.add_rowvec(ad.matmul(hidden, store[f"{prefix}.w2"]),
                        store[f"{prefix}.b2"])
    out = dropout(out, cfg.dropout_rate, train, rng)
    return _layer_norm_affine(ad.add(x, out), store, f"{prefix}.ln")


def init_v_mlp(store: ParamStore, prefix: str, cfg: LayerConfig,
               rng: np.random.Generator) -> None:
    store.register(f"{prefix}.w1", glorot(rng, 2 * cfg.d_model, cfg.d_ff))
    store.register(f"{prefix}.b1", np.zeros(cfg.d_ff))
    store.register(f"{prefix}.w2", glorot(rng, cfg.d_ff, cfg.d_model))
    store.register(f"{prefix}.b2", np.zeros(cfg.d_model))


def v_mlp(q: Node, k: Node, store: ParamStore, prefix: str,
          cfg: LayerConfig) -> Node:
    """Two-layer map from the feature-axis concatenation of q and k back
    to d_model; this is the value source for cross-attention fusion."""
    if q.shape != k.shape:
        raise ShapeError(f"v_mlp: shapes {q.shape} and {k.shape} differ")
    joint = ad.concat([q, k], axis=-1)
    hidden = ad.relu(ad.add_rowvec(ad.matmul(joint, store[f"{prefix}.w1"]),
                                   store[f"{prefix}.b1"]))
    return ad.add_rowvec(ad.matmul(hidden, store[f"{prefix}.w2"]),
                         store[f"{prefix}.b2"])
