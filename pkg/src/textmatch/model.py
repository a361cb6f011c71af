"""Sequence-pair matcher built from stacked encode/align/fuse blocks.

Both sequences flow through the same parameters; only the final scoring
network is unshared. Blocks are joined by connections that concatenate the
original embeddings with the (scaled) sum of the two previous block outputs,
so every alignment step sees point-wise, previously-aligned, and contextual
features side by side. Each of those wiring choices, plus the alignment,
fusion, scoring and topology alternatives, is switchable from the config so
ablations are plain config edits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import (
    MaskError,
    Parameter,
    RngTree,
    Tensor,
    abs_,
    add,
    concat,
    conv1d_same,
    dropout,
    gelu,
    he_init,
    masked_max,
    matmul,
    mul,
    softmax_masked,
    sub,
    swap_last2,
)

_GELU_GAIN = math.sqrt(2.0)
INV_SQRT2 = 1.0 / math.sqrt(2.0)

ALIGNMENT_PROJECTIONS = ("identity", "feedforward")
PREDICTION_VARIANTS = ("standard", "symmetric", "simplified")
FUSION_VARIANTS = ("full", "simple")
CONNECTION_VARIANTS = ("augmented", "vanilla_residual", "none")
BLOCK_TOPOLOGIES = ("stacked", "parallel")

OCCLUSION_FEATURES = ("embedding", "residual", "encoder_output")


@dataclass
class ModelConfig:
    """Architecture hyperparameters and ablation switches."""

    num_blocks: int = 2
    enc_layers: int = 2
    hidden_size: int = 150
    kernel_size: int = 3
    embed_dim: int = 300
    keep_prob: float = 0.8
    num_classes: int = 2
    alignment_projection: str = "feedforward"
    prediction_variant: str = "standard"
    fusion_variant: str = "full"
    connection_variant: str = "augmented"
    block_topology: str = "stacked"

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.enc_layers < 1:
            raise ValueError(f"enc_layers must be >= 1, got {self.enc_layers}")
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        for name, value, choices in (
            ("alignment_projection", self.alignment_projection, ALIGNMENT_PROJECTIONS),
            ("prediction_variant", self.prediction_variant, PREDICTION_VARIANTS),
            ("fusion_variant", self.fusion_variant, FUSION_VARIANTS),
            ("connection_variant", self.connection_variant, CONNECTION_VARIANTS),
            ("block_topology", self.block_topology, BLOCK_TOPOLOGIES),
        ):
            if value not in choices:
                raise ValueError(f"{name} must be one of {choices}, got {value!r}")

    def block_input_dim(self, n: int) -> int:
        """Width of block n's input sequence (1-based block index)."""
        if self.block_topology == "parallel" or n == 1:
            return self.embed_dim
        if self.connection_variant == "vanilla_residual":
            return self.hidden_size
        return self.embed_dim + self.hidden_size

    def align_input_dim(self, n: int) -> int:
        """Width of the features the alignment and fusion layers see."""
        if self.connection_variant == "none":
            return self.hidden_size
        return self.block_input_dim(n) + self.hidden_size

    def feature_slices(self, n: int) -> dict[str, tuple[int, int]]:
        """Layout of the three feature groups inside block n's align input."""
        h, e = self.hidden_size, self.embed_dim
        if self.connection_variant == "none":
            return {"encoder_output": (0, h)}
        if self.block_topology == "parallel" or n == 1:
            return {"embedding": (0, e), "encoder_output": (e, e + h)}
        if self.connection_variant == "vanilla_residual":
            return {"residual": (0, h), "encoder_output": (h, 2 * h)}
        return {"embedding": (0, e), "residual": (e, e + h), "encoder_output": (e + h, e + 2 * h)}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class FeedForward:
    """Dropout -> weight-normalized dense layer -> optional GeLU."""

    def __init__(self, name, din, dout, rng: RngTree, keep_prob, dtype, activation=True):
        gain = _GELU_GAIN if activation else 1.0
        w0 = he_init((din, dout), fan_in=din, gain=gain, rng=rng.generator(name + ".w"), dtype=dtype)
        self.w = Parameter(name + ".w", w0, weight_normed=True)
        self.b = Parameter(name + ".b", np.zeros(dout, dtype=dtype))
        self.keep_prob = keep_prob
        self.activation = activation
        self._drop_rng = rng.generator(name + ".drop")

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = dropout(x, self.keep_prob, training, self._drop_rng)
        y = add(matmul(x, self.w.effective()), self.b.effective())
        return gelu(y) if self.activation else y

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class ConvLayer:
    """Dropout -> same-padded 1-d convolution -> GeLU."""

    def __init__(self, name, kernel, din, dout, rng: RngTree, keep_prob, dtype):
        w0 = he_init((kernel, din, dout), fan_in=kernel * din, gain=_GELU_GAIN,
                     rng=rng.generator(name + ".w"), dtype=dtype)
        self.w = Parameter(name + ".w", w0, weight_normed=True)
        self.b = Parameter(name + ".b", np.zeros(dout, dtype=dtype))
        self.keep_prob = keep_prob
        self._drop_rng = rng.generator(name + ".drop")

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = dropout(x, self.keep_prob, training, self._drop_rng)
        return gelu(conv1d_same(x, self.w.effective(), self.b.effective()))

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class Encoder:
    """Multi-layer convolutional context encoder.

    Padded positions are zeroed after every layer so pad values never leak
    into valid positions past the receptive field, and stay zero for the
    following concatenations.
    """

    def __init__(self, name, din, config: ModelConfig, rng: RngTree, dtype):
        h = config.hidden_size
        self.layers = [
            ConvLayer(f"{name}.conv{i}", config.kernel_size, din if i == 0 else h, h,
                      rng, config.keep_prob, dtype)
            for i in range(config.enc_layers)
        ]

    def __call__(self, x: Tensor, mask3: np.ndarray, training: bool) -> Tensor:
        for layer in self.layers:
            x = mul(layer(x, training), mask3)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class Alignment:
    """Attention between the two sequences over projected features.

    Similarity is the dot product of (optionally projected) features; each
    position's aligned vector is the similarity-weighted sum of the other
    sequence's raw input features.
    """

    def __init__(self, name, din, config: ModelConfig, rng: RngTree, dtype):
        if config.alignment_projection == "feedforward":
            self.proj: FeedForward | None = FeedForward(
                name + ".proj", din, config.hidden_size, rng, config.keep_prob, dtype)
        else:
            self.proj = None

    def __call__(self, fa, fb, mask_a, mask_b, training):
        pa = self.proj(fa, training) if self.proj is not None else fa
        pb = self.proj(fb, training) if self.proj is not None else fb
        e = matmul(pa, swap_last2(pb))                      # [B, La, Lb]
        wa = softmax_masked(e, mask_b[:, None, :])          # rows over Lb
        a_aligned = matmul(wa, fb)
        wb = softmax_masked(swap_last2(e), mask_a[:, None, :])  # rows over La
        b_aligned = matmul(wb, fa)
        return a_aligned, b_aligned, e, wa, wb

    def parameters(self) -> list[Parameter]:
        return self.proj.parameters() if self.proj is not None else []


class Fusion:
    """Position-wise comparison of local vs aligned features.

    The full variant runs three single-layer networks over the pairings
    [a; a'], [a; a - a'] and [a; a * a'] and merges them with a fourth;
    the simple variant keeps only the first.
    """

    def __init__(self, name, din, config: ModelConfig, rng: RngTree, dtype):
        h = config.hidden_size
        kp = config.keep_prob
        self.simple = config.fusion_variant == "simple"
        self.g1 = FeedForward(name + ".g1", 2 * din, h, rng, kp, dtype)
        if not self.simple:
            self.g2 = FeedForward(name + ".g2", 2 * din, h, rng, kp, dtype)
            self.g3 = FeedForward(name + ".g3", 2 * din, h, rng, kp, dtype)
            self.g = FeedForward(name + ".g", 3 * h, h, rng, kp, dtype)

    @staticmethod
    def branch_inputs(a: Tensor, a_aligned: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return (
            concat([a, a_aligned]),
            concat([a, sub(a, a_aligned)]),
            concat([a, mul(a, a_aligned)]),
        )

    def __call__(self, a: Tensor, a_aligned: Tensor, training: bool) -> Tensor:
        if a.shape != a_aligned.shape:
            raise ValueError(f"fusion inputs disagree: {a.shape} vs {a_aligned.shape}")
        if self.simple:
            return self.g1(concat([a, a_aligned]), training)
        i1, i2, i3 = self.branch_inputs(a, a_aligned)
        merged = concat([self.g1(i1, training), self.g2(i2, training), self.g3(i3, training)])
        return self.g(merged, training)

    def parameters(self) -> list[Parameter]:
        params = self.g1.parameters()
        if not self.simple:
            params = params + self.g2.parameters() + self.g3.parameters() + self.g.parameters()
        return params


def prediction_features(v1: Tensor, v2: Tensor, variant: str) -> Tensor:
    """Feature vector fed to the scoring network, per prediction variant."""
    if variant == "standard":
        return concat([v1, v2, sub(v1, v2), mul(v1, v2)])
    if variant == "symmetric":
        return concat([v1, v2, abs_(sub(v1, v2)), mul(v1, v2)])
    if variant == "simplified":
        return concat([v1, v2])
    raise ValueError(f"unknown prediction variant {variant!r}")


class Prediction:
    """Two-layer scoring network over the pooled pair representation."""

    def __init__(self, name, config: ModelConfig, rng: RngTree, dtype):
        h = config.hidden_size
        din = 2 * h if config.prediction_variant == "simplified" else 4 * h
        self.variant = config.prediction_variant
        self.hidden = FeedForward(name + ".hidden", din, h, rng, config.keep_prob, dtype)
        self.out = FeedForward(name + ".out", h, config.num_classes, rng,
                               config.keep_prob, dtype, activation=False)

    def __call__(self, v1: Tensor, v2: Tensor, training: bool) -> Tensor:
        feats = prediction_features(v1, v2, self.variant)
        return self.out(self.hidden(feats, training), training)

    def parameters(self) -> list[Parameter]:
        return self.hidden.parameters() + self.out.parameters()


class Block:
    def __init__(self, index: int, config: ModelConfig, rng: RngTree, dtype):
        name = f"block{index}"
        din = config.block_input_dim(index)
        fdim = config.align_input_dim(index)
        self.encoder = Encoder(name + ".enc", din, config, rng, dtype)
        self.alignment = Alignment(name + ".align", fdim, config, rng, dtype)
        self.fusion = Fusion(name + ".fuse", fdim, config, rng, dtype)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.alignment.parameters() + self.fusion.parameters()


@dataclass
class BlockTrace:
    """Values captured inside one block of a traced forward pass."""

    input_a: np.ndarray
    input_b: np.ndarray
    align_input_a: np.ndarray
    align_input_b: np.ndarray
    scores: np.ndarray          # raw similarity e [B, La, Lb]
    attn_a2b: np.ndarray        # row-normalized over Lb
    attn_b2a: np.ndarray        # row-normalized over La (transposed scores)
    output_a: np.ndarray
    output_b: np.ndarray


@dataclass
class ForwardTrace:
    blocks: list[BlockTrace] = field(default_factory=list)
    v1: np.ndarray | None = None
    v2: np.ndarray | None = None


@dataclass(frozen=True)
class Occlusion:
    """Zero one feature group in one block's align/fuse input (1-based block)."""

    block: int
    feature: str

    def __post_init__(self):
        if self.feature not in OCCLUSION_FEATURES:
            raise ValueError(f"feature must be one of {OCCLUSION_FEATURES}, got {self.feature!r}")
        if self.block < 1:
            raise ValueError(f"block index must be >= 1, got {self.block}")


class TextMatcher:
    """The full pair model: embed, N blocks, pooling, scoring.

    ``embeddings`` is a frozen [V, embed_dim] lookup table; row 0 is the
    shared pad/OOV vector and must be zero. All randomness (init, dropout)
    derives from ``seed``.
    """

    def __init__(self, config: ModelConfig, embeddings, seed: int = 0, dtype=np.float32):
        config.validate()
        matrix = np.asarray(getattr(embeddings, "matrix", embeddings), dtype=dtype)
        if matrix.ndim != 2 or matrix.shape[1] != config.embed_dim:
            raise ValueError(f"embedding table shape {matrix.shape} does not match embed_dim {config.embed_dim}")
        self.config = config
        self.dtype = dtype
        self.seed = int(seed)
        self.embeddings = matrix
        rng = RngTree(seed)
        self.blocks = [Block(n, config, rng, dtype) for n in range(1, config.num_blocks + 1)]
        self.prediction = Prediction("predict", config, rng, dtype)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = [p for b in self.blocks for p in b.parameters()]
        return params + self.prediction.parameters()

    def count_params(self) -> int:
        """Trainable scalar count; the frozen embedding table is excluded."""
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for p in self.parameters():
            if p.weight_normed:
                out[p.name + ".v"] = p.v.data
                out[p.name + ".g"] = p.g.data
            else:
                out[p.name] = p.v.data
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        unexpected = set(arrays) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for p in self.parameters():
            entries = [(p.v, p.name + ".v"), (p.g, p.name + ".g")] if p.weight_normed else [(p.v, p.name)]
            for t, key in entries:
                arr = np.asarray(arrays[key], dtype=self.dtype)
                if arr.shape != t.shape:
                    raise ValueError(f"shape mismatch for {key}: {arr.shape} vs {t.shape}")
                t.data = arr.copy()

    # -- forward ------------------------------------------------------------

    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.embeddings.shape[0]:
            raise IndexError(f"token index {ids.max()} out of range for vocab {self.embeddings.shape[0]}")
        return Tensor(self.embeddings[ids])

    def _connect(self, n, x1, o_prev, o_prev2):
        if self.config.block_topology == "parallel" or n == 1:
            return x1
        if self.config.connection_variant == "vanilla_residual":
            return o_prev if n == 2 else add(o_prev, o_prev2)
        residual = o_prev if n == 2 else mul(add(o_prev, o_prev2), self.dtype(INV_SQRT2))
        return concat([x1, residual])

    def _occlusion_mask(self, occlusions, n: int, width: int) -> np.ndarray | None:
        keep = None
        for spec in occlusions:
            if spec.block != n:
                continue
            span = self.config.feature_slices(n).get(spec.feature)
            if span is None:
                continue  # feature not present in this block: no-op
            if keep is None:
                keep = np.ones(width, dtype=self.dtype)
            keep[span[0]:span[1]] = 0.0
        return keep

    def forward(
        self,
        ids_a,
        ids_b,
        mask_a,
        mask_b,
        training: bool = False,
        trace: bool = False,
        occlusion: Occlusion | None = None,
        fusion_probe=None,
    ):
        """Score a batch of pairs.

        Returns logits [B, C], plus a :class:`ForwardTrace` when ``trace``
        is set. ``fusion_probe(block_index, features, aligned)`` replaces
        every fusion layer when given; it must return a [B, L, hidden]
        tensor. ``occlusion`` zeroes one feature group in one block.
        """
        cfg = self.config
        mask_a = np.asarray(mask_a, dtype=bool)
        mask_b = np.asarray(mask_b, dtype=bool)
        if not (mask_a.any(axis=-1).all() and mask_b.any(axis=-1).all()):
            raise MaskError("every sequence needs at least one valid position")
        m3a = mask_a[:, :, None].astype(self.dtype)
        m3b = mask_b[:, :, None].astype(self.dtype)
        x1a, x1b = self.embed(ids_a), self.embed(ids_b)
        if occlusion is not None and occlusion.block > cfg.num_blocks:
            raise ValueError(f"occlusion block {occlusion.block} exceeds num_blocks {cfg.num_blocks}")

        tr = ForwardTrace() if trace else None
        oa_prev = oa_prev2 = ob_prev = ob_prev2 = None
        osum_a = osum_b = None
        for n, block in enumerate(self.blocks, start=1):
            xa = self._connect(n, x1a, oa_prev, oa_prev2)
            xb = self._connect(n, x1b, ob_prev, ob_prev2)
            enc_a = block.encoder(xa, m3a, training)
            enc_b = block.encoder(xb, m3b, training)
            if cfg.connection_variant == "none":
                fa, fb = enc_a, enc_b
            else:
                fa, fb = concat([xa, enc_a]), concat([xb, enc_b])
            keep = self._occlusion_mask(occlusion, n, fa.shape[-1])
            if keep is not None:
                fa, fb = mul(fa, keep), mul(fb, keep)
            a_al, b_al, e, wa, wb = block.alignment(fa, fb, mask_a, mask_b, training)
            if fusion_probe is not None:
                oa, ob = fusion_probe(n, fa, a_al), fusion_probe(n, fb, b_al)
            else:
                oa = block.fusion(fa, a_al, training)
                ob = block.fusion(fb, b_al, training)
            oa, ob = mul(oa, m3a), mul(ob, m3b)
            if tr is not None:
                tr.blocks.append(BlockTrace(
                    input_a=xa.data.copy(), input_b=xb.data.copy(),
                    align_input_a=fa.data.copy(), align_input_b=fb.data.copy(),
                    scores=e.data.copy(), attn_a2b=wa.data.copy(), attn_b2a=wb.data.copy(),
                    output_a=oa.data.copy(), output_b=ob.data.copy(),
                ))
            if cfg.block_topology == "parallel":
                osum_a = oa if osum_a is None else add(osum_a, oa)
                osum_b = ob if osum_b is None else add(osum_b, ob)
            else:
                oa_prev2, oa_prev = oa_prev, oa
                ob_prev2, ob_prev = ob_prev, ob

        final_a = osum_a if cfg.block_topology == "parallel" else oa_prev
        final_b = osum_b if cfg.block_topology == "parallel" else ob_prev
        v1 = masked_max(final_a, mask_a)
        v2 = masked_max(final_b, mask_b)
        logits = self.prediction(v1, v2, training)
        if tr is not None:
            tr.v1, tr.v2 = v1.data.copy(), v2.data.copy()
            return logits, tr
        return logits

    def forward_batch(self, batch, **kwargs):
        return self.forward(batch.ids_a, batch.ids_b, batch.mask_a, batch.mask_b, **kwargs)
