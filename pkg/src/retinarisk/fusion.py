"""Multi-modal fusion model, Monte-Carlo dropout and saliency.

The image is encoded twice (conv pyramid, patch transformer); transformer
tokens attend over projected conv cells, and the class-token output is
concatenated with the graph readout and the metadata vector before the
projection to the fused width. Two heads read the fused vector: a 5-way
grade classifier and a sigmoid progression-risk score.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbones import (
    DESK_CNN,
    DESK_VIT,
    PAPER_CNN,
    PAPER_VIT,
    CnnConfig,
    ConvBackbone,
    VisionTransformer,
    VitConfig,
)
from .numerics import ConfigurationError, DimensionError, Tensor, concat, dropout, softmax
from .numerics.module import Linear, Module, MultiHeadAttention
from .temporal_graph import READOUT_DIM, GcnConfig, GraphBatch, GraphEncoder

NUM_CLASSES = 5
FUSED_DIM = 512
MC_SAMPLES = 50


class RiskTier(str, enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


def stratify_risk(r: float) -> RiskTier:
    """low: r < 0.3, medium: 0.3 <= r <= 0.7, high: r > 0.7."""
    if not 0.0 <= r <= 1.0 or math.isnan(r):
        raise ValueError(f"risk score must lie in [0, 1], got {r}")
    if r < 0.3:
        return RiskTier.LOW
    if r <= 0.7:
        return RiskTier.MEDIUM
    return RiskTier.HIGH


@dataclass(frozen=True)
class ModelConfig:
    cnn: CnnConfig = DESK_CNN
    vit: VitConfig = DESK_VIT
    gcn: GcnConfig = GcnConfig()
    meta_dim: int = 2
    fused_dim: int = FUSED_DIM
    num_classes: int = NUM_CLASSES
    dropout: float = 0.3
    use_vit: bool = True
    use_gnn: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.cnn.input_size != self.vit.image_size or self.cnn.in_channels != self.vit.in_channels:
            raise ConfigurationError("conv and transformer branches must see the same image size")
        if self.meta_dim < 0:
            raise ConfigurationError("meta_dim must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError("dtype must be float64 or float32")

    @property
    def image_size(self) -> int:
        return self.cnn.input_size

    @property
    def attn_dim(self) -> int:
        return self.vit.embed_dim

    @property
    def fusion_in_dim(self) -> int:
        return self.attn_dim + (READOUT_DIM if self.use_gnn else 0) + self.meta_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        cnn = CnnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("cnn").items()})
        vit = VitConfig(**d.pop("vit"))
        gcn = GcnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("gcn").items()})
        return cls(cnn=cnn, vit=vit, gcn=gcn, **d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def param_count(self) -> int:
        d = self.attn_dim
        total = self.cnn.param_count() + Linear.count(self.cnn.output_channels, d)
        if self.use_vit:
            total += self.vit.param_count() + MultiHeadAttention.count(d)
        if self.use_gnn:
            total += self.gcn.param_count()
        total += Linear.count(self.fusion_in_dim, self.fused_dim)
        total += Linear.count(self.fused_dim, self.num_classes) + Linear.count(self.fused_dim, 1)
        return total


def desk_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def paper_config(**overrides) -> ModelConfig:
    base = ModelConfig(cnn=PAPER_CNN, vit=PAPER_VIT, gcn=GcnConfig(hidden=(64, 64, 64)))
    return dataclasses.replace(base, **overrides)


def infer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Feature shapes per stage, derived from the config alone."""
    g, c = cfg.cnn.output_grid, cfg.cnn.output_channels
    shapes = {
        "cnn": cfg.cnn.output_shape(),
        "cnn_flat": (g * g, c),
        "vit": cfg.vit.output_shape(),
        "cross": cfg.vit.output_shape(),
        "gnn": (READOUT_DIM,),
        "fusion_in": (cfg.fusion_in_dim,),
        "fused": (cfg.fused_dim,),
        "class_probs": (cfg.num_classes,),
        "risk": (1,),
    }
    if not cfg.use_vit:
        del shapes["vit"], shapes["cross"]
    if not cfg.use_gnn:
        del shapes["gnn"]
    return shapes


@dataclass
class InputBatch:
    """Model inputs for ``B`` subjects."""

    images: np.ndarray
    graphs: GraphBatch
    meta: np.ndarray

    def __post_init__(self):
        if self.images.ndim == 3:
            self.images = self.images[None]
        self.meta = np.atleast_2d(np.asarray(self.meta, dtype=np.float64))
        b = self.images.shape[0]
        if self.graphs.batch_size != b or self.meta.shape[0] != b:
            raise DimensionError(f"batch sizes disagree: images {b}, graphs "
                                 f"{self.graphs.batch_size}, meta {self.meta.shape[0]}")

    @property
    def size(self) -> int:
        return self.images.shape[0]


def flatten_cnn(f_cnn: Tensor) -> Tensor:
    """``[..., G, G, C] -> [..., G*G, C]``; row ``g*G + h`` is cell ``(g, h)``."""
    *lead, g1, g2, c = f_cnn.shape
    return f_cnn.reshape(tuple(lead) + (g1 * g2, c))


class CrossAttention(Module):
    """Transformer tokens (queries) attend over projected conv cells (keys/values).

    The conv cells are first mapped ``C_cnn -> D`` by one shared linear map;
    there is no residual path around the attention.
    """

    def __init__(self, cnn_channels: int, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.kv_proj = self.child("kv_proj", Linear(cnn_channels, dim, rng))
        self.attn = self.child("attn", MultiHeadAttention(dim, heads, rng))
        # zero queries: attention starts uniform (mean pooling over cells) and sharpens with training
        self.attn._params["wq"].data[...] = 0.0

    def __call__(self, f_vit: Tensor, f_cnn_flat: Tensor, return_weights: bool = False):
        if f_cnn_flat.shape[-1] != self.kv_proj.n_in:
            raise ConfigurationError(
                f"conv width {f_cnn_flat.shape[-1]} != projection input {self.kv_proj.n_in}")
        if f_vit.shape[-1] != self.kv_proj.n_out:
            raise ConfigurationError(f"token width {f_vit.shape[-1]} != {self.kv_proj.n_out}")
        kv = self.kv_proj(f_cnn_flat)
        return self.attn(f_vit, kv, kv, return_weights=return_weights)


def cross_attend(f_vit: Tensor, f_cnn_flat: Tensor, params: CrossAttention) -> Tensor:
    return params(f_vit, f_cnn_flat)


def fuse(a0: Tensor, f_gnn: Tensor | None, meta, w_f: Linear) -> Tensor:
    """Concatenate ``[a0, f_gnn, meta]`` (``f_gnn`` may be absent) and project."""
    meta = meta if isinstance(meta, Tensor) else Tensor(np.asarray(meta, dtype=np.float64))
    parts = [a0] + ([f_gnn] if f_gnn is not None else []) + [meta]
    x = concat(parts, axis=-1)
    if x.shape[-1] != w_f.n_in:
        raise ConfigurationError(f"fusion input width {x.shape[-1]} != W_f input {w_f.n_in}")
    return w_f(x)


@dataclass
class Heads:
    classifier: Linear
    risk: Linear


def predict_once(fused: Tensor, heads: Heads, dropout_on: bool, rng: np.random.Generator | None,
                 rate: float = 0.3) -> tuple[Tensor, Tensor, Tensor]:
    """One stochastic (or deterministic) pass of both heads.

    Returns ``(class_probs, risk, logits)``; risk is shaped like the batch.
    """
    h = dropout(fused, rate, "mc" if dropout_on else "eval", rng)
    logits = heads.classifier(h)
    risk = heads.risk(h).sigmoid()
    return softmax(logits, axis=-1), risk.reshape(risk.shape[:-1]), logits


@dataclass
class ModelOutput:
    logits: Tensor
    probs: Tensor
    risk: Tensor
    fused: Tensor


class FusionModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.attn_dim
        self.cnn = self.child("cnn", ConvBackbone(cfg.cnn, rng))
        self.cross = None
        self.vit = None
        self.pool_proj = None
        if cfg.use_vit:
            self.vit = self.child("vit", VisionTransformer(cfg.vit, rng))
            self.cross = self.child("cross", CrossAttention(cfg.cnn.output_channels, d, cfg.vit.heads, rng))
        else:
            # mean-pooled conv cells stand in for the attended class token
            self.pool_proj = self.child("pool_proj", Linear(cfg.cnn.output_channels, d, rng))
        self.gnn = self.child("gnn", GraphEncoder(cfg.gcn, rng)) if cfg.use_gnn else None
        self.w_f = self.child("w_f", Linear(cfg.fusion_in_dim, cfg.fused_dim, rng))
        self.heads = Heads(self.child("classifier", Linear(cfg.fused_dim, cfg.num_classes, rng)),
                           self.child("risk_head", Linear(cfg.fused_dim, 1, rng)))
        if cfg.dtype != "float64":
            self.cast(np.dtype(cfg.dtype))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def image_tensor(self, images: np.ndarray, requires_grad: bool = False) -> Tensor:
        return Tensor(np.asarray(images, dtype=self.dtype), requires_grad=requires_grad)

    def encode(self, batch: InputBatch, image: Tensor | None = None) -> Tensor:
        """Fused representation ``[B, fused_dim]`` (before head dropout)."""
        x = image if image is not None else self.image_tensor(batch.images)
        f_cnn_flat = flatten_cnn(self.cnn(x))
        if self.cfg.use_vit:
            f_vit = self.vit(x)
            a0 = self.cross(f_vit, f_cnn_flat)[:, 0, :]
        else:
            a0 = self.pool_proj(f_cnn_flat.mean(axis=1))
        f_gnn = None
        if self.cfg.use_gnn:
            g = batch.graphs
            f_gnn = self.gnn(GraphBatch(g.features.astype(self.dtype), g.a_norm.astype(self.dtype),
                                        g.pool.astype(self.dtype)))
        meta = Tensor(batch.meta.astype(self.dtype))
        if meta.shape[-1] != self.cfg.meta_dim:
            raise ConfigurationError(f"metadata width {meta.shape[-1]} != {self.cfg.meta_dim}")
        return fuse(a0, f_gnn, meta, self.w_f)

    def forward(self, batch: InputBatch, train: bool = False,
                rng: np.random.Generator | None = None, image: Tensor | None = None) -> ModelOutput:
        fused = self.encode(batch, image)
        probs, risk, logits = predict_once(fused, self.heads, train, rng, self.cfg.dropout)
        return ModelOutput(logits, probs, risk, fused)


@dataclass
class McPrediction:
    class_probs: np.ndarray
    risk: float
    sigma: float | None
    ci95: tuple[float, float] | None
    tier: RiskTier
    k: int
    class_sigma: np.ndarray | None = None

    @property
    def grade(self) -> int:
        return int(np.argmax(self.class_probs))

    def to_dict(self) -> dict:
        out = {
            "class_probs": [float(p) for p in self.class_probs],
            "grade": self.grade,
            "risk": float(self.risk),
            "tier": self.tier.value,
            "k": self.k,
        }
        if self.sigma is not None:
            out["sigma"] = float(self.sigma)
            out["ci95"] = [float(self.ci95[0]), float(self.ci95[1])]
            out["class_sigma"] = [float(s) for s in self.class_sigma]
        return out


def summarize_samples(prob_samples: np.ndarray, risk_samples: np.ndarray) -> McPrediction:
    """Reduce ``K`` stochastic passes: sample means, population sigma, and
    the interval ``mean +/- 1.96 sigma / sqrt(K)``."""
    prob_samples = np.asarray(prob_samples, dtype=np.float64)
    risk_samples = np.asarray(risk_samples, dtype=np.float64).ravel()
    k = risk_samples.size
    if k < 2:
        raise ConfigurationError("MC summary needs K >= 2 samples")
    # averaging offsets from the first sample keeps identical samples exact (sigma == 0)
    mean_probs = prob_samples[0] + (prob_samples - prob_samples[0]).mean(axis=0)
    r_hat = float(risk_samples[0] + (risk_samples - risk_samples[0]).mean())
    sigma = float(np.sqrt(np.mean((risk_samples - r_hat) ** 2)))
    half = 1.96 * sigma / math.sqrt(k)
    # interval clipped only when r_hat sits exactly on a bound
    return McPrediction(mean_probs, r_hat, sigma, (r_hat - half, r_hat + half),
                        stratify_risk(min(max(r_hat, 0.0), 1.0)), k,
                        np.sqrt(np.mean((prob_samples - mean_probs) ** 2, axis=0)))


def mc_predict(model: FusionModel, batch: InputBatch, k: int = MC_SAMPLES,
               rng: np.random.Generator | None = None, rate: float | None = None,
               bayesian: bool = True) -> list[McPrediction]:
    """``K`` passes with head dropout active; one record per subject.

    With ``bayesian=False`` a single deterministic pass is reported and the
    sigma / interval fields are left empty.
    """
    rate = model.cfg.dropout if rate is None else rate
    fused = model.encode(batch)
    if not bayesian:
        probs, risk, _ = predict_once(fused, model.heads, False, None, rate)
        return [McPrediction(probs.data[i].astype(np.float64), float(risk.data[i]), None, None,
                             stratify_risk(float(risk.data[i])), 1) for i in range(batch.size)]
    if k < 2:
        raise ConfigurationError("mc_predict needs K >= 2")
    if rng is None:
        raise ConfigurationError("mc_predict needs an explicit rng")
    probs_k = np.empty((k, batch.size, model.cfg.num_classes))
    risk_k = np.empty((k, batch.size))
    for s in range(k):
        probs, risk, _ = predict_once(fused, model.heads, rate > 0.0, rng, rate)
        probs_k[s], risk_k[s] = probs.data, risk.data
    return [summarize_samples(probs_k[:, i], risk_k[:, i]) for i in range(batch.size)]


def saliency_map(score_fn: Callable[[Tensor], Tensor], image: np.ndarray) -> np.ndarray:
    """``|d score / d pixel|``, max over channels, min-max scaled to [0, 1]."""
    x = Tensor(np.asarray(image, dtype=np.float64), requires_grad=True)
    score = score_fn(x)
    if score.size != 1:
        raise ValueError("saliency target must be a scalar")
    score.sum().backward()
    g = np.abs(x.grad if x.grad is not None else np.zeros_like(x.data))
    if g.ndim == 3:
        g = g.max(axis=-1)
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.zeros_like(g)
    return (g - lo) / (hi - lo)


def saliency(model: FusionModel, batch: InputBatch, target: int | str = "risk") -> np.ndarray:
    """Saliency of one subject's image for a class logit (int) or ``"risk"``."""
    if batch.size != 1:
        raise DimensionError("saliency works on a single subject")

    def score(x: Tensor) -> Tensor:
        out = model.forward(batch, train=False, image=x.reshape((1,) + x.shape))
        if target == "risk":
            return out.risk.sum()
        return out.logits[0, int(target)]

    return saliency_map(score, batch.images[0])
