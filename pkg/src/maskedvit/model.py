"""Two-stage transformer over tiled slides, with a scalar grading head.

Stage one embeds per-patch feature vectors and runs a region transformer
whose self-attention is (optionally) background-masked; each region is
summarized by its class token. Stage two runs an unmasked transformer
over the region summaries, and the slide class token feeds a linear head
trained with mean-squared error against the integer grade. Predictions
round half away from zero and clamp to the label range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import serialize
from .attention import (
    INIT_STD,
    LN_EPS,
    TransformerBlockParams,
    attention_weights,
    linear_init,
    prepend_class_token,
    transformer_block,
)
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    backward,
    layer_norm,
    matmul,
    zero_grad,
)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A model configuration violates its own constraints."""


class LabelError(ValueError):
    """A grade label is outside {0, ..., num_classes - 1}."""


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; training aborted."""


class CheckpointError(ValueError):
    """A checkpoint file does not match the model that tries to load it."""


@dataclass
class ModelConfig:
    """Geometry and capacity of the two-stage model.

    Defaults are desk-scale: 1024-pixel regions of 256-pixel patches give
    16 tokens per region, embedded at width 64. Grown configurations
    (e.g. 2048/384) follow the same contracts, just slower.
    """

    region_size: int = 1024
    patch_size: int = 256
    feature_dim: int = 10
    embed_dim: int = 64
    region_depth: int = 2
    slide_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 6
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.region_size < 1 or self.patch_size < 1:
            raise ConfigError("region_size and patch_size must be positive")
        if self.region_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide region_size {self.region_size}"
            )
        if self.embed_dim < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}"
            )
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.region_depth < 1 or self.slide_depth < 1:
            raise ConfigError("both transformer stages need at least one block")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two grade classes")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def grid_size(self) -> int:
        return self.region_size // self.patch_size

    @property
    def tokens_per_region(self) -> int:
        return self.grid_size * self.grid_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class SlideSample:
    """One preprocessed slide: retained regions with features and tissue fractions."""

    slide_id: str
    label: int
    region_coords: np.ndarray  # (regions, 2) int64, (x, y) pixel offsets
    features: np.ndarray  # (regions, tokens, feature_dim) float64
    tissue: np.ndarray  # (regions, tokens) float64 in [0, 1]
    slide_size: tuple[int, int] = (0, 0)  # (width, height) pixels, 0 if unknown
    region_size: int = 0  # tiling geometry, 0 if unknown
    patch_size: int = 0

    def validate(self, config: ModelConfig | None = None) -> None:
        m = self.features.shape[0]
        if m < 1:
            raise ValueError(f"slide {self.slide_id!r} has no retained regions")
        if self.features.ndim != 3 or self.tissue.shape != self.features.shape[:2]:
            raise ShapeError(
                f"features {self.features.shape} and tissue {self.tissue.shape} disagree"
            )
        if self.region_coords.shape != (m, 2):
            raise ShapeError(f"region_coords must be ({m}, 2), got {self.region_coords.shape}")
        if self.region_size and self.patch_size:
            grid = self.region_size // self.patch_size
            if grid * grid != self.features.shape[1]:
                raise ShapeError(
                    f"slide {self.slide_id!r}: geometry {self.region_size}/{self.patch_size} "
                    f"implies {grid * grid} tokens, features have {self.features.shape[1]}"
                )
        if config is not None:
            if not 0 <= self.label < config.num_classes:
                raise LabelError(f"label {self.label} outside 0..{config.num_classes - 1}")
            if self.features.shape[1] != config.tokens_per_region:
                raise ShapeError(
                    f"slide {self.slide_id!r} has {self.features.shape[1]} tokens per "
                    f"region, config expects {config.tokens_per_region}"
                )
            if self.features.shape[2] != config.feature_dim:
                raise ShapeError(
                    f"slide {self.slide_id!r} has feature_dim {self.features.shape[2]}, "
                    f"config expects {config.feature_dim}"
                )


def decode_grade(logit: float, num_classes: int = 6) -> int:
    """Round half away from zero, then clamp to the label range."""
    if logit >= 0.0:
        score = math.floor(logit + 0.5)
    else:
        score = math.ceil(logit - 0.5)
    return max(0, min(num_classes - 1, score))


def mse_loss(logit: Tensor, label: int) -> Tensor:
    """Squared error between the scalar logit and an integer grade."""
    if logit.size != 1:
        raise ShapeError(f"logit must be scalar, got shape {logit.shape}")
    if not isinstance(label, (int, np.integer)):
        raise LabelError(f"label must be an integer, got {label!r}")
    diff = logit - float(label)
    return diff * diff


class HierarchicalViT:
    """Patch embedder + masked region transformer + slide transformer + head."""

    def __init__(self, config: ModelConfig, masking: bool = True):
        config.validate()
        self.config = config
        self.masking = bool(masking)
        self._params: dict[str, Parameter] = {}
        rng = np.random.default_rng(config.seed)
        d, f = config.embed_dim, config.feature_dim
        t = config.tokens_per_region

        self.embed_weight = self._register(Parameter("embed.weight", linear_init(rng, f, d)))
        self.embed_bias = self._register(Parameter("embed.bias", np.zeros(d)))

        self.region_cls = self._register(Parameter("region.cls", rng.normal(0.0, INIT_STD, (1, 1, d))))
        self.region_pos = self._register(Parameter("region.pos", rng.normal(0.0, INIT_STD, (1, t + 1, d))))
        self.region_blocks = [
            self._register_block(
                TransformerBlockParams.create(d, config.num_heads, config.mlp_ratio, rng, f"region.block{i}")
            )
            for i in range(config.region_depth)
        ]
        self.region_norm_gamma = self._register(Parameter("region.norm.gamma", np.ones(d)))
        self.region_norm_beta = self._register(Parameter("region.norm.beta", np.zeros(d)))

        self.slide_cls = self._register(Parameter("slide.cls", rng.normal(0.0, INIT_STD, (1, 1, d))))
        self.slide_blocks = [
            self._register_block(
                TransformerBlockParams.create(d, config.num_heads, config.mlp_ratio, rng, f"slide.block{i}")
            )
            for i in range(config.slide_depth)
        ]
        self.slide_norm_gamma = self._register(Parameter("slide.norm.gamma", np.ones(d)))
        self.slide_norm_beta = self._register(Parameter("slide.norm.beta", np.zeros(d)))

        self.head_weight = self._register(Parameter("head.weight", linear_init(rng, d, 1)))
        self.head_bias = self._register(Parameter("head.bias", np.zeros(1)))

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ConfigError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def _register_block(self, block: TransformerBlockParams) -> TransformerBlockParams:
        for p in block.parameters():
            self._register(p)
        return block

    def parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    # -- forward stages --------------------------------------------------

    def embed_patches(self, features: np.ndarray | Tensor) -> Tensor:
        """(regions, tokens, feature_dim) -> (regions, tokens, embed_dim)."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim != 3 or x.shape[-1] != self.config.feature_dim:
            raise ShapeError(
                f"features must be (regions, tokens, {self.config.feature_dim}), got {x.shape}"
            )
        return matmul(x, self.embed_weight) + self.embed_bias

    def region_forward(
        self, embedded: Tensor, tissue: np.ndarray | None, masking: bool | None = None
    ) -> Tensor:
        """Run the region transformer; returns one class-token summary per region.

        `tissue` is required when masking is on; pass masking=False (or
        construct the model with masking off) to ignore it.
        """
        masking = self.masking if masking is None else masking
        t = self.config.tokens_per_region
        m = embedded.shape[0]
        if embedded.shape[1] != t:
            raise ShapeError(f"expected {t} tokens per region, got {embedded.shape[1]}")
        pct = None
        if masking:
            if tissue is None:
                raise ValueError("masking requires tissue fractions")
            pct = np.asarray(tissue, dtype=np.float64)
            if pct.shape != (m, t):
                raise ShapeError(f"tissue must be ({m}, {t}), got {pct.shape}")
        x = prepend_class_token(embedded, self.region_cls)
        x = x + self.region_pos
        for block in self.region_blocks:
            x = transformer_block(x, pct, block)
        x = layer_norm(x, self.region_norm_gamma, self.region_norm_beta, LN_EPS)
        return x[:, 0, :]  # (regions, embed_dim)

    def slide_forward(self, region_tokens: Tensor) -> Tensor:
        """(regions, embed_dim) -> (embed_dim,) slide embedding. Never masked."""
        if region_tokens.ndim != 2 or region_tokens.shape[1] != self.config.embed_dim:
            raise ShapeError(
                f"region tokens must be (regions, {self.config.embed_dim}), "
                f"got {region_tokens.shape}"
            )
        x = region_tokens.reshape((1,) + region_tokens.shape)
        x = prepend_class_token(x, self.slide_cls)
        for block in self.slide_blocks:
            x = transformer_block(x, None, block)
        x = layer_norm(x, self.slide_norm_gamma, self.slide_norm_beta, LN_EPS)
        return x[0, 0, :]

    def head(self, slide_embedding: Tensor) -> Tensor:
        """(embed_dim,) -> scalar logit."""
        row = slide_embedding.reshape((1, self.config.embed_dim))
        out = matmul(row, self.head_weight) + self.head_bias
        return out.reshape(())

    def forward(self, sample: SlideSample) -> Tensor:
        sample.validate(self.config)
        embedded = self.embed_patches(sample.features)
        region_tokens = self.region_forward(embedded, sample.tissue)
        return self.head(self.slide_forward(region_tokens))

    def predict(self, sample: SlideSample) -> tuple[float, int]:
        """Returns (raw logit, decoded integer grade)."""
        logit = self.forward(sample).item()
        return logit, decode_grade(logit, self.config.num_classes)

    def region_attention(
        self, sample: SlideSample, layer_index: int = -1, masking: bool | None = None
    ) -> Tensor:
        """Attention maps of one region-transformer block: (regions, heads, seq, seq)."""
        masking = self.masking if masking is None else masking
        sample.validate(self.config)
        embedded = self.embed_patches(sample.features)
        x = prepend_class_token(embedded, self.region_cls)
        x = x + self.region_pos
        pct = np.asarray(sample.tissue, dtype=np.float64) if masking else None
        return attention_weights(x, pct, self.region_blocks, layer_index)


# -- checkpoints -----------------------------------------------------------


@dataclass
class ModelCheckpoint:
    """Everything needed to reconstruct a model and resume training."""

    config: ModelConfig
    masking: bool
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, model: HierarchicalViT, adam, step: int, meta: dict | None = None):
        from .optim import Adam  # local import to avoid a cycle at module load

        assert isinstance(adam, Adam)
        return cls(
            config=model.config,
            masking=model.masking,
            step=step,
            params={name: p.data.copy() for name, p in model.parameters().items()},
            adam_m={k: v.copy() for k, v in adam.state.m.items()},
            adam_v={k: v.copy() for k, v in adam.state.v.items()},
            adam_step=adam.state.step,
            meta=dict(meta or {}),
        )

    def restore(self, lr: float = 1e-3):
        """Rebuild (model, optimizer) with the stored weights and moments."""
        from .optim import Adam, AdamState

        model = HierarchicalViT(self.config, self.masking)
        live = model.parameters()
        if set(live) != set(self.params):
            missing = sorted(set(live) ^ set(self.params))
            raise CheckpointError(f"parameter names disagree with checkpoint: {missing}")
        for name, p in live.items():
            stored = self.params[name]
            if stored.shape != p.data.shape:
                raise CheckpointError(
                    f"{name!r} has shape {stored.shape} in checkpoint, model wants {p.data.shape}"
                )
            p.data[...] = stored
        state = AdamState(
            step=self.adam_step,
            m={k: v.copy() for k, v in self.adam_m.items()},
            v={k: v.copy() for k, v in self.adam_v.items()},
        )
        adam = Adam(list(live.values()), lr=lr, state=state)
        return model, adam

    def save(self, path) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, arr in self.params.items():
            arrays[f"param/{name}"] = arr
        for name, arr in self.adam_m.items():
            arrays[f"adam_m/{name}"] = arr
        for name, arr in self.adam_v.items():
            arrays[f"adam_v/{name}"] = arr
        meta = {
            "kind": "checkpoint",
            "version": self.version,
            "config": self.config.to_dict(),
            "masking": self.masking,
            "step": self.step,
            "adam_step": self.adam_step,
            "meta": self.meta,
        }
        serialize.write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        meta, arrays = serialize.read_container(path)
        if meta.get("kind") != "checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {meta.get('version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        params, adam_m, adam_v = {}, {}, {}
        for key, arr in arrays.items():
            group, _, name = key.partition("/")
            if group == "param":
                params[name] = arr
            elif group == "adam_m":
                adam_m[name] = arr
            elif group == "adam_v":
                adam_v[name] = arr
            else:
                raise CheckpointError(f"{path}: unexpected array group {group!r}")
        return cls(
            config=ModelConfig.from_dict(meta["config"]),
            masking=bool(meta["masking"]),
            step=int(meta["step"]),
            params=params,
            adam_m=adam_m,
            adam_v=adam_v,
            adam_step=int(meta["adam_step"]),
            meta=dict(meta.get("meta", {})),
        )


# -- training ----------------------------------------------------------------


def train(
    dataset: Sequence[SlideSample],
    config: ModelConfig,
    masking: bool = True,
    epochs: int = 10,
    lr: float = 1e-3,
    resume: ModelCheckpoint | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[ModelCheckpoint, list[dict]]:
    """Fit on `dataset` (one slide per step, Adam) and return (checkpoint, history).

    The shuffle order and initialization derive from config.seed, so two
    calls with identical inputs produce identical checkpoints. `resume`
    continues the step counter and optimizer moments of an earlier run.
    Raises TrainingDivergedError the moment the loss stops being finite.
    """
    if not dataset:
        raise ValueError("training needs at least one slide")
    for sample in dataset:
        sample.validate(config)
    if epochs < 1:
        raise ValueError("epochs must be >= 1")

    if resume is not None:
        if resume.config.to_dict() != config.to_dict():
            raise CheckpointError("resume checkpoint was built with a different config")
        if resume.masking != masking:
            raise CheckpointError(
                f"resume checkpoint has masking={resume.masking}, requested {masking}"
            )
        model, adam = resume.restore(lr=lr)
        adam.lr = lr
        step = resume.step
    else:
        model = HierarchicalViT(config, masking)
        from .optim import Adam

        adam = Adam(list(model.parameters().values()), lr=lr)
        step = 0

    params = list(model.parameters().values())
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, step, 0x5ADE]))
    history: list[dict] = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = np.empty(len(dataset))
        for pos, idx in enumerate(order):
            sample = dataset[int(idx)]
            zero_grad(params)
            loss = mse_loss(model.forward(sample), sample.label)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value!r} at step {step} (slide {sample.slide_id!r})"
                )
            backward(loss)
            adam.step()
            step += 1
            losses[pos] = value
        record = {"epoch": epoch, "mean_loss": float(losses.mean()), "step": step}
        history.append(record)
        if log is not None:
            log(f"epoch {epoch}: mean_loss={record['mean_loss']:.6f} step={step}")
    ckpt = ModelCheckpoint.capture(model, adam, step)
    return ckpt, history
