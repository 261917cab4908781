"""The temporal-spatial correlation attention network.

Each branch chunks the (t x d) input along time (the spatial branch
additionally transposes each chunk), runs the first chunk through an
encoder block and folds the remaining chunks through a chain of fusion
blocks, where the current chunk's self-attended queries cross-attend to
the previous block's output. Branch outputs are pooled and combined by a
configurable fusion head into class probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Node, ParamStore, ShapeError, Tensor
from .layers import AttentionWeights, LayerConfig

FUSIONS = ("temporal-only", "spatial-only", "concatenate", "adding",
           "bilinear", "max-pool")
TASKS = ("ihm", "los", "decompensation", "phenotype")

TASK_CLASSES = {"ihm": 2, "los": 10, "decompensation": 2, "phenotype": 25}


@dataclass(frozen=True)
class ModelConfig:
    t: int
    d: int
    n: int
    layer: LayerConfig = field(default_factory=LayerConfig)
    fusion: str = "concatenate"
    task: str = "ihm"
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.t < 1 or self.d < 1:
            raise ValueError(f"t and d must be positive, got t={self.t} d={self.d}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.t % self.n != 0:
            raise ValueError(f"window t={self.t} is not divisible into n={self.n} "
                             f"equal chunks")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")

    @property
    def chunk_len(self) -> int:
        return self.t // self.n

    @property
    def uses_temporal(self) -> bool:
        return self.fusion != "spatial-only"

    @property
    def uses_spatial(self) -> bool:
        return self.fusion != "temporal-only"

    def to_dict(self) -> dict:
        return {"t": self.t, "d": self.d, "n": self.n,
                "layer": self.layer.to_dict(), "fusion": self.fusion,
                "task": self.task, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layer"] = LayerConfig.from_dict(d.get("layer", {}))
        return cls(**d)


def chunk_sample(x, n: int) -> list[Tensor]:
    """Split a (t x d) sample into n contiguous, equal time slices.

    Concatenating the result along time reproduces the input exactly.
    """
    arr = x.numpy() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"chunk_sample: expected a (t, d) matrix, got {arr.shape}")
    t = arr.shape[0]
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if t % n != 0:
        raise ValueError(f"t={t} is not divisible by n={n}")
    step = t // n
    return [Tensor(arr[j * step:(j + 1) * step]) for j in range(n)]


@dataclass
class BlockState:
    """Output of one encoder or fusion block, kept for inspection."""

    name: str
    z: Node
    msa_weights: AttentionWeights
    mca_weights: AttentionWeights | None = None
    k_source: Node | None = None


def init_encoder(store: ParamStore, prefix: str, in_width: int, cfg: LayerConfig,
                 rng: np.random.Generator) -> None:
    ly.init_linear(store, f"{prefix}.embed", rng, in_width, cfg.d_model)
    ly.init_msa(store, f"{prefix}.msa", cfg, rng)
    ly.init_ffn(store, f"{prefix}.ffn", cfg, rng)


def init_fusion_encoder(store: ParamStore, prefix: str, in_width: int,
                        cfg: LayerConfig, rng: np.random.Generator) -> None:
    init_encoder(store, prefix, in_width, cfg, rng)
    ly.init_mca(store, f"{prefix}.mca", cfg, rng)
    ly.init_v_mlp(store, f"{prefix}.vmlp", cfg, rng)


def _embed_with_positions(x: Node, store: ParamStore, prefix: str,
                          cfg: LayerConfig) -> Node:
    emb = ly.linear(x, store, f"{prefix}.embed")
    pe = ly.positional_encoding(emb.shape[0], cfg.d_model)
    return ad.add(emb, ad.constant(pe, op="pe"))


def encoder_forward(x0, store: ParamStore, prefix: str, cfg: LayerConfig,
                    train: bool = False,
                    rng: np.random.Generator | None = None) -> BlockState:
    """First block of a branch: embed, add positions, self-attend, feed-forward."""
    x = x0 if isinstance(x0, Node) else ad.constant(x0, op="chunk")
    h = _embed_with_positions(x, store, prefix, cfg)
    attended, weights = ly.msa(h, store, f"{prefix}.msa", cfg, train, rng)
    z = ly.ffn(attended, store, f"{prefix}.ffn", cfg, train, rng)
    return BlockState(name=prefix, z=z, msa_weights=weights)


def fusion_encoder_forward(xj, z_prev: Node, store: ParamStore, prefix: str,
                           cfg: LayerConfig, train: bool = False,
                           rng: np.random.Generator | None = None) -> BlockState:
    """Recursive block: Q self-attends over the current chunk, K is the
    previous block's output, V maps their concatenation; cross-attention
    then feed-forward produce the fused representation."""
    x = xj if isinstance(xj, Node) else ad.constant(xj, op="chunk")
    if x.shape[0] != z_prev.shape[0]:
        raise ShapeError(f"fusion block {prefix}: chunk has {x.shape[0]} tokens but "
                         f"previous output has {z_prev.shape[0]} (chunking mismatch)")
    h = _embed_with_positions(x, store, prefix, cfg)
    q, msa_weights = ly.msa(h, store, f"{prefix}.msa", cfg, train, rng)
    k = z_prev
    v = ly.v_mlp(q, k, store, f"{prefix}.vmlp", cfg)
    crossed, mca_weights = ly.mca(q, k, v, store, f"{prefix}.mca", cfg, train, rng)
    z = ly.ffn(crossed, store, f"{prefix}.ffn", cfg, train, rng)
    return BlockState(name=prefix, z=z, msa_weights=msa_weights,
                      mca_weights=mca_weights, k_source=k)


@dataclass
class ForwardResult:
    probs: Node
    temporal: list[BlockState] | None
    spatial: list[BlockState] | None


def _pooled(z: Node) -> Node:
    """Mean over the token axis, kept as a 1-row matrix for the heads."""
    return ad.reshape(ad.mean(z, axis=0), (1, z.shape[1]))


def _squeeze_activation(logits: Node, task: str) -> Node:
    flat = ad.reshape(logits, (logits.shape[-1],))
    if task == "phenotype":
        return ad.sigmoid(flat)
    return ad.softmax(flat, axis=0)


def fuse_and_predict(zt: Node | None, zs: Node | None, fusion: str, task: str,
                     store: ParamStore) -> Node:
    """Pool branch tokens and combine them into class probabilities.

    Softmax tasks return a distribution over classes; the phenotype task
    returns independent per-label sigmoids. The max-pool mode fuses
    per-branch predictions by elementwise maximum (renormalized for
    distributions).
    """
    if zt is not None and zs is not None and zt.shape[-1] != zs.shape[-1]:
        raise ShapeError(f"branch widths differ: {zt.shape[-1]} vs {zs.shape[-1]}")
    if fusion == "temporal-only":
        return _squeeze_activation(ly.linear(_pooled(zt), store, "head"), task)
    if fusion == "spatial-only":
        return _squeeze_activation(ly.linear(_pooled(zs), store, "head"), task)
    vt, vs = _pooled(zt), _pooled(zs)
    if fusion == "concatenate":
        joint = ad.concat([vt, vs], axis=1)
        return _squeeze_activation(ly.linear(joint, store, "head"), task)
    if fusion == "adding":
        summed = ad.add(ly.linear(vt, store, "head.t"), ly.linear(vs, store, "head.s"))
        return _squeeze_activation(summed, task)
    if fusion == "bilinear":
        d_model = vt.shape[1]
        outer = ad.matmul(ad.reshape(vt, (d_model, 1)), vs)
        flat = ad.reshape(outer, (1, d_model * d_model))
        return _squeeze_activation(ly.linear(flat, store, "head"), task)
    if fusion == "max-pool":
        pt = _squeeze_activation(ly.linear(vt, store, "head.t"), task)
        ps = _squeeze_activation(ly.linear(vs, store, "head.s"), task)
        fused = ad.maximum(pt, ps)
        if task == "phenotype":
            return fused
        return ad.div(fused, ad.sum(fused))
    raise ValueError(f"unknown fusion {fusion!r}")


class TSCANModel:
    """Both branches plus the fusion head, owning one parameter store."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: ParamStore | None = None) -> None:
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> ParamStore:
        cfg = self.config
        rng = np.random.default_rng(seed)
        store = ParamStore()
        branch_widths = {}
        if cfg.uses_temporal:
            branch_widths["temporal"] = cfg.d
        if cfg.uses_spatial:
            branch_widths["spatial"] = cfg.chunk_len
        for branch, width in branch_widths.items():
            init_encoder(store, f"{branch}.encoder", width, cfg.layer, rng)
            for j in range(1, cfg.n):
                init_fusion_encoder(store, f"{branch}.fusion{j}", width,
                                    cfg.layer, rng)
        self._init_head(store, rng)
        return store

    def _init_head(self, store: ParamStore, rng: np.random.Generator) -> None:
        cfg = self.config
        dm, nc = cfg.layer.d_model, cfg.n_classes
        if cfg.fusion in ("temporal-only", "spatial-only"):
            ly.init_linear(store, "head", rng, dm, nc)
        elif cfg.fusion == "concatenate":
            ly.init_linear(store, "head", rng, 2 * dm, nc)
        elif cfg.fusion == "bilinear":
            ly.init_linear(store, "head", rng, dm * dm, nc)
        else:  # adding, max-pool: one head per branch
            ly.init_linear(store, "head.t", rng, dm, nc)
            ly.init_linear(store, "head.s", rng, dm, nc)

    def branch_forward(self, x, branch: str, train: bool = False,
                       rng: np.random.Generator | None = None) -> list[BlockState]:
        """Fold the chunk sequence through the encoder and fusion chain.

        The spatial branch runs on transposed chunks, so its tokens are the
        d feature columns instead of the t/n hours.
        """
        cfg = self.config
        chunks = chunk_sample(x, cfg.n)
        if branch == "spatial":
            chunks = [Tensor(c.numpy().T) for c in chunks]
        elif branch != "temporal":
            raise ValueError(f"branch must be 'temporal' or 'spatial', got {branch!r}")
        states = [encoder_forward(chunks[0], self.params, f"{branch}.encoder",
                                  cfg.layer, train, rng)]
        for j in range(1, cfg.n):
            states.append(fusion_encoder_forward(
                chunks[j], states[-1].z, self.params, f"{branch}.fusion{j}",
                cfg.layer, train, rng))
        return states

    def forward(self, x, train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        cfg = self.config
        arr = x.numpy() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if arr.shape != (cfg.t, cfg.d):
            raise ShapeError(f"sample shape {arr.shape} != (t={cfg.t}, d={cfg.d})")
        temporal = (self.branch_forward(arr, "temporal", train, rng)
                    if cfg.uses_temporal else None)
        spatial = (self.branch_forward(arr, "spatial", train, rng)
                   if cfg.uses_spatial else None)
        probs = fuse_and_predict(temporal[-1].z if temporal else None,
                                 spatial[-1].z if spatial else None,
                                 cfg.fusion, cfg.task, self.params)
        return ForwardResult(probs=probs, temporal=temporal, spatial=spatial)

    def predict(self, x) -> np.ndarray:
        """Inference-mode class probabilities as a plain array."""
        return np.array(self.forward(x, train=False).probs.data)

    def predict_many(self, xs) -> np.ndarray:
        return np.stack([self.predict(x) for x in xs])

    # -- checkpoint: parameter file plus a JSON sidecar with the config --

    def save(self, path) -> None:
        path = Path(path)
        self.params.save(path)
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(self.config.to_dict(), indent=2,
                                      sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TSCANModel":
        path = Path(path)
        sidecar = path.with_name(path.name + ".json")
        config = ModelConfig.from_dict(json.loads(sidecar.read_text()))
        model = cls(config, seed=0)
        model.params.load_file(path)
        return model


@dataclass
class AttentionReport:
    """Aggregated attention weights for explainability.

    ``temporal_weights`` holds one nonnegative unit-sum vector per chunk
    (attention received per hour position); ``indicator_weights`` is one
    unit-sum vector over the d feature columns, taken from the spatial
    branch. ``metadata`` records how the aggregation was done.
    """

    temporal_weights: list[np.ndarray] | None
    indicator_weights: np.ndarray | None
    metadata: dict

    def to_json_dict(self) -> dict:
        return {
            "temporal_weights": ([w.tolist() for w in self.temporal_weights]
                                 if self.temporal_weights is not None else None),
            "indicator_weights": (self.indicator_weights.tolist()
                                  if self.indicator_weights is not None else None),
            "metadata": self.metadata,
        }


def _normalized(v: np.ndarray) -> np.ndarray:
    total = v.sum()
    if total <= 0:
        return np.full_like(v, 1.0 / v.size)
    return v / total


def attention_report(model: TSCANModel, samples) -> AttentionReport:
    """Average self-attention received over samples, heads, and query rows.

    Temporal weights come from the temporal branch (one vector per chunk,
    renormalized per chunk); indicator weights from the spatial branch
    (averaged over its blocks, renormalized over the d columns).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("attention_report needs at least one sample")
    cfg = model.config
    temporal_acc = (np.zeros((cfg.n, cfg.chunk_len)) if cfg.uses_temporal else None)
    indicator_acc = np.zeros(cfg.d) if cfg.uses_spatial else None
    for x in samples:
        result = model.forward(x, train=False)
        if temporal_acc is not None:
            for j, state in enumerate(result.temporal):
                temporal_acc[j] += state.msa_weights.received()
        if indicator_acc is not None:
            for state in result.spatial:
                indicator_acc += state.msa_weights.received()
    temporal = ([_normalized(row) for row in temporal_acc]
                if temporal_acc is not None else None)
    indicator = _normalized(indicator_acc) if indicator_acc is not None else None
    return AttentionReport(
        temporal_weights=temporal,
        indicator_weights=indicator,
        metadata={
            "samples": len(samples),
            "aggregation": "uniform mean over samples, heads, and query rows of "
                           "self-attention received (column means of the "
                           "probability matrices); spatial blocks averaged; "
                           "each vector renormalized to sum 1",
            "n_chunks": cfg.n,
            "chunk_len": cfg.chunk_len,
            "d": cfg.d,
            "fusion": cfg.fusion,
        },
    )
