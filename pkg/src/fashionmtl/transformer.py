"""Pre-norm transformer building blocks for the text and vision streams.

Layers follow the residual recipe
    z' = MHSA(LN(z)) + z
    z  = MLP(LN(z')) + z'
with learned positional embeddings and quick-gelu MLPs. The language stream
always runs under a causal mask; padding is masked out of the key columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class TextConfig:
    width: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 124
    max_seq_len: int = 20

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class VisionConfig:
    width: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    image_size: int = 24
    patch_size: int = 8
    channels: int = 3

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ShapeError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2 + 1  # patches + class token


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class TextParams:
    token_emb: Tensor
    pos_emb: Tensor
    layers: list = field(default_factory=list)


@dataclass
class VisionParams:
    patch_w: Tensor
    patch_b: Tensor
    class_tok: Tensor
    pos_emb: Tensor
    layers: list = field(default_factory=list)


PROJ_STD = 0.02
POS_STD = 0.01


def init_layer(rng: np.random.Generator, width: int, mlp_ratio: int) -> LayerParams:
    """N(0, 0.02) projections, zero biases, unit LN gains."""
    d, h = width, width * mlp_ratio

    def w(rows, cols):
        return ad.param(rng.normal(0.0, PROJ_STD, size=(rows, cols)))

    return LayerParams(
        ln1_g=ad.param(np.ones(d)), ln1_b=ad.param(np.zeros(d)),
        wq=w(d, d), bq=ad.param(np.zeros(d)),
        wk=w(d, d), bk=ad.param(np.zeros(d)),
        wv=w(d, d), bv=ad.param(np.zeros(d)),
        wo=w(d, d), bo=ad.param(np.zeros(d)),
        ln2_g=ad.param(np.ones(d)), ln2_b=ad.param(np.zeros(d)),
        w1=w(d, h), b1=ad.param(np.zeros(h)),
        w2=w(h, d), b2=ad.param(np.zeros(d)),
    )


def init_text_params(rng: np.random.Generator, cfg: TextConfig) -> TextParams:
    return TextParams(
        token_emb=ad.param(rng.normal(0.0, PROJ_STD, size=(cfg.vocab_size, cfg.width))),
        pos_emb=ad.param(rng.normal(0.0, POS_STD, size=(cfg.max_seq_len, cfg.width))),
        layers=[init_layer(rng, cfg.width, cfg.mlp_ratio) for _ in range(cfg.layers)],
    )


def init_vision_params(rng: np.random.Generator, cfg: VisionConfig) -> VisionParams:
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    return VisionParams(
        patch_w=ad.param(rng.normal(0.0, PROJ_STD, size=(patch_dim, cfg.width))),
        patch_b=ad.param(np.zeros(cfg.width)),
        class_tok=ad.param(rng.normal(0.0, PROJ_STD, size=(cfg.width,))),
        pos_emb=ad.param(rng.normal(0.0, POS_STD, size=(cfg.num_tokens, cfg.width))),
        layers=[init_layer(rng, cfg.width, cfg.mlp_ratio) for _ in range(cfg.layers)],
    )


def embed_text(params: TextParams, cfg: TextConfig, tokens: np.ndarray) -> Tensor:
    """Token + positional embedding for an id matrix of shape (B, N)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (B, N), got {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ShapeError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ShapeError(f"token id outside [0, {cfg.vocab_size})")
    emb = ad.embedding(params.token_emb, tokens)
    return ad.add(emb, params.pos_emb[: tokens.shape[1]])


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), row-major patch order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def embed_image(params: VisionParams, cfg: VisionConfig, images: np.ndarray) -> Tensor:
    """Patch projection + class token + positional embedding, shape (B, N, D)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"images must be (B, H, W, C), got {images.shape}")
    b, h, w, c = images.shape
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {cfg.patch_size}")
    patches = patchify(images, cfg.patch_size)
    proj = ad.affine(Tensor(patches), params.patch_w, params.patch_b)
    cls = ad.broadcast_to(ad.reshape(params.class_tok, (1, 1, cfg.width)), (b, 1, cfg.width))
    seq = ad.concat([cls, proj], axis=1)
    return ad.add(seq, params.pos_emb)


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: strict upper triangle is -inf."""
    if n < 1:
        raise ShapeError(f"mask length must be >= 1, got {n}")
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def pad_key_mask(tokens: np.ndarray, pad_id: int) -> np.ndarray:
    """(B, 1, 1, N) additive mask hiding pad key columns from attention."""
    pads = np.asarray(tokens) == pad_id
    return np.where(pads, -np.inf, 0.0)[:, None, None, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention over (B, N, D) queries and (B, M, D) keys/values.

    ``mask`` is an additive array broadcastable to (B, heads, N, M).
    """
    d_head = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d_head))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-1] != k.shape[1] or mask.shape[-2] not in (1, q.shape[1]):
            raise ShapeError(
                f"mask shape {mask.shape} incompatible with attention ({q.shape[1]}, {k.shape[1]})")
        logits = ad.add(logits, Tensor(mask))
    weights = ad.softmax(logits, axis=-1)
    return _merge_heads(ad.matmul(weights, vh))


def mhsa(z: Tensor, p: LayerParams, heads: int, mask=None) -> Tensor:
    """Multi-head self-attention term of a layer (residual added by caller)."""
    q = ad.affine(z, p.wq, p.bq)
    k = ad.affine(z, p.wk, p.bk)
    v = ad.affine(z, p.wv, p.bv)
    att = attention(q, k, v, heads, mask)
    return ad.affine(att, p.wo, p.bo)


def mlp_block(z: Tensor, p: LayerParams) -> Tensor:
    """linear -> quick-gelu -> linear (the MLP term of a layer)."""
    h = ad.quick_gelu(ad.affine(z, p.w1, p.b1))
    return ad.affine(h, p.w2, p.b2)


def layer_param_names() -> tuple:
    return ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
