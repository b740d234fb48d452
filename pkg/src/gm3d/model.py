"""Transformer autoencoder with a per-token complexity head.

The same parameter tree is instantiated three times during training: a
trainable student, a momentum (EMA) teacher whose complexity scores drive
mask selection, and a frozen knowledge teacher whose encoder features act
as distillation targets. A parameter tree is a flat ordered dict of named
``Value`` leaves; freezing a tree turns every forward over it into a pure
numpy evaluation (no graph is built).

Token layout convention everywhere: the decoder sequence is visible tokens
first, then one shared mask token per masked patch, each group in ascending
original patch index.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Value, cat
from .geometry import PatchSet
from .masking import MaskPartition

__all__ = [
    "ModelConfig",
    "TriModelState",
    "GcScores",
    "StudentOutputs",
    "init_params",
    "copy_tree",
    "freeze_tree",
    "inference_view",
    "tree_digest",
    "embed_patches",
    "pos_embed",
    "encode",
    "decode",
    "gc_head",
    "recon_head",
    "ema_update",
    "student_forward",
    "teacher_scores",
    "encoder_features",
]

ParamTree = dict[str, Value]

_LN_EPS = 1e-5
_INIT_STD = 0.02
# the complexity head starts 10x wider than the trunk: its mask-token inputs
# are tiny at initialization and its ranking gradient is orders of magnitude
# smaller than the reconstruction gradient, so a trunk-scale init leaves the
# scores degenerate for most of a desk-scale run
_GC_HEAD_STD = 0.2


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale architecture knobs."""

    embed_dim: int = 96
    encoder_depth: int = 3
    decoder_depth: int = 1
    heads: int = 4
    mlp_ratio: int = 4
    n_patches: int = 16
    patch_size: int = 8
    mask_ratio: float = 0.6

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie strictly between 0 and 1")


@dataclass
class TriModelState:
    """Student, EMA teacher, and frozen knowledge teacher parameter trees."""

    student: ParamTree
    teacher: ParamTree
    knowledge_teacher: ParamTree
    ema_momentum: float = 0.999


@dataclass(frozen=True)
class GcScores:
    """Per-token complexity scores with their provenance."""

    values: np.ndarray
    source: str  # "teacher_full" | "student_tokens"


@dataclass
class StudentOutputs:
    """Everything a training step needs from one student forward pass."""

    gc_scores: Value  # (N,) in [visible..., masked...] order
    decoder_tokens: Value  # (N, embed_dim) in original patch order
    recon: Value  # (n_masked, K, 3), center-relative
    gc_provenance: str = field(default="student_tokens")


def _block_param_names(prefix: str, dim: int, mlp_ratio: int):
    hidden = dim * mlp_ratio
    return [
        (f"{prefix}.ln1.g", (dim,), "ones"),
        (f"{prefix}.ln1.b", (dim,), "zeros"),
        (f"{prefix}.attn.wq", (dim, dim), "normal"),
        (f"{prefix}.attn.bq", (dim,), "zeros"),
        (f"{prefix}.attn.wk", (dim, dim), "normal"),
        (f"{prefix}.attn.bk", (dim,), "zeros"),
        (f"{prefix}.attn.wv", (dim, dim), "normal"),
        (f"{prefix}.attn.bv", (dim,), "zeros"),
        (f"{prefix}.attn.wo", (dim, dim), "normal"),
        (f"{prefix}.attn.bo", (dim,), "zeros"),
        (f"{prefix}.ln2.g", (dim,), "ones"),
        (f"{prefix}.ln2.b", (dim,), "zeros"),
        (f"{prefix}.mlp.fc1.w", (dim, hidden), "normal"),
        (f"{prefix}.mlp.fc1.b", (hidden,), "zeros"),
        (f"{prefix}.mlp.fc2.w", (hidden, dim), "normal"),
        (f"{prefix}.mlp.fc2.b", (dim,), "zeros"),
    ]


def _param_spec(cfg: ModelConfig):
    d = cfg.embed_dim
    spec = [
        ("embed.fc1.w", (3, d), "normal"),
        ("embed.fc1.b", (d,), "zeros"),
        ("embed.fc2.w", (d, d), "normal"),
        ("embed.fc2.b", (d,), "zeros"),
        ("pos.fc1.w", (3, d), "normal"),
        ("pos.fc1.b", (d,), "zeros"),
        ("pos.fc2.w", (d, d), "normal"),
        ("pos.fc2.b", (d,), "zeros"),
    ]
    for i in range(cfg.encoder_depth):
        spec += _block_param_names(f"enc.{i}", d, cfg.mlp_ratio)
    for i in range(cfg.decoder_depth):
        spec += _block_param_names(f"dec.{i}", d, cfg.mlp_ratio)
    spec += [
        ("mask_token", (d,), "normal"),
        ("gc.fc1.w", (d, d), "normal_wide"),
        ("gc.fc1.b", (d,), "zeros"),
        ("gc.fc2.w", (d, 1), "normal_wide"),
        ("gc.fc2.b", (1,), "zeros"),
        ("recon.w", (d, 3 * cfg.patch_size), "normal"),
        ("recon.b", (3 * cfg.patch_size,), "zeros"),
    ]
    return spec


def init_params(
    cfg: ModelConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    requires_grad: bool = True,
) -> ParamTree:
    """Fresh parameter tree in canonical key order."""
    tree: ParamTree = {}
    for name, shape, kind in _param_spec(cfg):
        if kind == "normal":
            data = rng.normal(0.0, _INIT_STD, size=shape)
        elif kind == "normal_wide":
            data = rng.normal(0.0, _GC_HEAD_STD, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tree[name] = Value(data.astype(dtype), requires_grad=requires_grad)
    return tree


def copy_tree(tree: ParamTree, requires_grad: bool) -> ParamTree:
    return {k: Value(v.data.copy(), requires_grad=requires_grad) for k, v in tree.items()}


def freeze_tree(tree: ParamTree) -> ParamTree:
    for v in tree.values():
        v.requires_grad = False
    return tree


def inference_view(tree: ParamTree) -> ParamTree:
    """Gradient-free view sharing the underlying arrays (no copy)."""
    return {k: Value(v.data) for k, v in tree.items()}


def tree_digest(tree: ParamTree) -> str:
    h = hashlib.sha256()
    for name, v in tree.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(v.data).tobytes())
    return h.hexdigest()


def _as_value(x, dtype) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=dtype))


def _mlp2(x: Value, p: ParamTree, prefix: str) -> Value:
    h = (x @ p[f"{prefix}.fc1.w"] + p[f"{prefix}.fc1.b"]).gelu()
    return h @ p[f"{prefix}.fc2.w"] + p[f"{prefix}.fc2.b"]


def embed_patches(patches, params: ParamTree) -> Value:
    """Per-point two-layer MLP followed by a max-pool over each patch.

    patches: (N, K, 3) center-relative coordinates. Returns (N, embed_dim)
    tokens, invariant to point order within a patch.
    """
    dtype = params["embed.fc1.w"].data.dtype
    x = _as_value(patches, dtype)
    n, k, _ = x.data.shape
    h = _mlp2(x.reshape((n * k, 3)), params, "embed")
    d = h.data.shape[-1]
    return h.reshape((n, k, d)).max(axis=1)


def pos_embed(centers, params: ParamTree) -> Value:
    """Two-layer MLP on raw 3D center coordinates: (T, 3) -> (T, embed_dim)."""
    dtype = params["pos.fc1.w"].data.dtype
    return _mlp2(_as_value(centers, dtype), params, "pos")


def _attention(x: Value, p: ParamTree, prefix: str, heads: int) -> Value:
    t, d = x.data.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(v: Value) -> Value:
        return v.reshape((t, heads, dh)).transpose((1, 0, 2))  # (H, T, dh)

    q = split(x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
    k = split(x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"])
    v = split(x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"])
    attn = ((q @ k.transpose((0, 2, 1))) * scale).softmax(axis=-1)
    out = (attn @ v).transpose((1, 0, 2)).reshape((t, d))
    return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def _transformer_block(x: Value, p: ParamTree, prefix: str, heads: int) -> Value:
    h = x.layer_norm(_LN_EPS) * p[f"{prefix}.ln1.g"] + p[f"{prefix}.ln1.b"]
    x = x + _attention(h, p, f"{prefix}.attn", heads)
    h = x.layer_norm(_LN_EPS) * p[f"{prefix}.ln2.g"] + p[f"{prefix}.ln2.b"]
    return x + _mlp2(h, p, f"{prefix}.mlp")


def encode(tokens: Value, centers, params: ParamTree, cfg: ModelConfig) -> Value:
    """Add positional embeddings of the centers, then run the encoder blocks."""
    x = tokens + pos_embed(centers, params)
    for i in range(cfg.encoder_depth):
        x = _transformer_block(x, params, f"enc.{i}", cfg.heads)
    return x


def _decoder_input(
    z_visible: Value, visible_centers, masked_centers, params: ParamTree
) -> Value:
    """[latent visible tokens, repeated mask token] + positions of all centers."""
    dtype = params["mask_token"].data.dtype
    n_masked = len(masked_centers)
    if n_masked > 0:
        tiled = params["mask_token"].reshape((1, -1)) + Value(
            np.zeros((n_masked, params["mask_token"].data.shape[0]), dtype=dtype)
        )
        seq = cat([z_visible, tiled], axis=0)
        centers = np.concatenate([np.asarray(visible_centers), np.asarray(masked_centers)])
    else:
        seq = z_visible
        centers = np.asarray(visible_centers)
    return seq + pos_embed(centers, params)


def _decoder_blocks(x: Value, params: ParamTree, cfg: ModelConfig) -> Value:
    for i in range(cfg.decoder_depth):
        x = _transformer_block(x, params, f"dec.{i}", cfg.heads)
    return x


def decode(
    z_visible: Value,
    visible_centers,
    masked_centers,
    params: ParamTree,
    cfg: ModelConfig,
) -> Value:
    """Full decoder pass; output has one token per patch, visible group first."""
    x = _decoder_input(z_visible, visible_centers, masked_centers, params)
    return _decoder_blocks(x, params, cfg)


def gc_head(tokens: Value, params: ParamTree) -> Value:
    """Tokenwise two-layer MLP producing one complexity score per token.

    Callers feed decoder-contextualized tokens: scoring raw mask-token rows
    against raw encoder outputs puts the teacher and student on disjoint
    input manifolds whose drift destroys score transfer (measured: the two
    paths' rankings end a long training run anti-correlated).
    """
    out = _mlp2(tokens, params, "gc")
    return out.reshape((tokens.data.shape[0],))


def recon_head(masked_tokens: Value, params: ParamTree, cfg: ModelConfig) -> Value:
    """Linear map from decoder tokens at masked positions to K points each."""
    flat = masked_tokens @ params["recon.w"] + params["recon.b"]
    return flat.reshape((masked_tokens.data.shape[0], cfg.patch_size, 3))


def ema_update(state: TriModelState, momentum: float | None = None) -> None:
    """teacher <- mu * teacher + (1 - mu) * student, parameter-wise.

    The knowledge teacher is untouched. Raises on any structural mismatch
    between the student and teacher trees.
    """
    mu = state.ema_momentum if momentum is None else momentum
    if state.student.keys() != state.teacher.keys():
        raise ValueError("student and teacher parameter trees have different keys")
    for name, s in state.student.items():
        t = state.teacher[name]
        if t.data.shape != s.data.shape:
            raise ValueError(f"shape mismatch for parameter '{name}'")
        # t + (1-mu)(s-t) == mu*t + (1-mu)*s, but is exact when s == t
        t.data = t.data + (1.0 - mu) * (s.data - t.data)


def student_forward(
    ps: PatchSet, part: MaskPartition, params: ParamTree, cfg: ModelConfig
) -> StudentOutputs:
    """Masked forward pass producing scores, decoder features, reconstructions.

    `ps` must already be center-relative. Complexity scores are read off the
    decoder-processed token sequence, one per patch, visible group first.
    """
    vis, mas = part.visible, part.masked
    tokens_v = embed_patches(ps.patches[vis], params)
    z_v = encode(tokens_v, ps.centers[vis], params, cfg)

    dec_in = _decoder_input(z_v, ps.centers[vis], ps.centers[mas], params)
    x = _decoder_blocks(dec_in, params, cfg)
    gc_scores = gc_head(x, params)
    n = part.n_patches
    n_vis = part.n_visible
    assert x.data.shape[0] == n

    recon = recon_head(x.take(np.arange(n_vis, n)), params, cfg)

    # restore original patch order for feature-space comparisons
    perm = np.concatenate([vis, mas])
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    decoder_tokens = x.take(inv)

    return StudentOutputs(gc_scores=gc_scores, decoder_tokens=decoder_tokens, recon=recon)


def teacher_scores(ps: PatchSet, params: ParamTree, cfg: ModelConfig) -> GcScores:
    """Complexity scores over the complete patch set, inference mode.

    The full encoder sequence runs through the decoder blocks before scoring,
    mirroring the student's score path so the shared head sees one input
    domain in both roles.
    """
    view = inference_view(params)
    tokens = embed_patches(ps.patches, view)
    z = encode(tokens, ps.centers, view, cfg)
    ctx = _decoder_blocks(z + pos_embed(ps.centers, view), view, cfg)
    return GcScores(values=gc_head(ctx, view).data.copy(), source="teacher_full")


def encoder_features(ps: PatchSet, params: ParamTree, cfg: ModelConfig) -> np.ndarray:
    """Encoder output over the complete patch set, inference mode: (N, D)."""
    view = inference_view(params)
    tokens = embed_patches(ps.patches, view)
    return encode(tokens, ps.centers, view, cfg).data.copy()
