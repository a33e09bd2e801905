"""Per-task bottleneck adapters, cross-attention adapters, and the gated layer sum.

Each transformer layer gains two optional parallel branches on top of its MLP:
a task-selected bottleneck adapter and a gated cross-attention adapter that
reads the other stream. The layer output is the exact four-term sum

    z = MLP(LN(z')) + z' + z_task + eps * z_cross,   eps in {0, 1}.

Cross-attention keys/values carry no positional term of their own: the memory
sequence already encodes position from its source stream, so the branch is
invariant to permuting memory rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .transformer import attention

TASKS = ("xmr", "tgir", "scr", "fic")
STREAMS = ("text", "vision")

TSA_INIT_SCALE = 0.1  # up-projection starts at zero, so the branch starts near zero


@dataclass
class AdaptMlpParams:
    """LN -> down (D -> d_b) -> quick-gelu -> up (d_b -> D), times a learnable scale."""

    ln_g: Tensor
    ln_b: Tensor
    down_w: Tensor
    down_b: Tensor
    up_w: Tensor
    up_b: Tensor
    scale: Tensor

    @property
    def width(self) -> int:
        return self.down_w.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.down_w.shape[1]


@dataclass
class XaaParams:
    """Cross-attention (queries from this stream, keys/values from the other) + AdaptMLP."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int
    adapt: AdaptMlpParams


def init_adapt_mlp(rng: np.random.Generator, width: int, bottleneck: int,
                   up_std: float = 0.0) -> AdaptMlpParams:
    """Task adapters start with a zero up-projection (exact near-backbone start);
    cross adapters pass a nonzero ``up_std`` so their channel is open from
    iteration zero."""
    if bottleneck < 1:
        raise ShapeError(f"bottleneck must be >= 1, got {bottleneck}")
    up = rng.normal(0.0, up_std, size=(bottleneck, width)) if up_std else np.zeros(
        (bottleneck, width))
    return AdaptMlpParams(
        ln_g=ad.param(np.ones(width)),
        ln_b=ad.param(np.zeros(width)),
        down_w=ad.param(rng.normal(0.0, 0.02, size=(width, bottleneck))),
        down_b=ad.param(np.zeros(bottleneck)),
        up_w=ad.param(up),
        up_b=ad.param(np.zeros(width)),
        scale=ad.param(np.asarray(TSA_INIT_SCALE)),
    )


def init_xaa(rng: np.random.Generator, width: int, other_width: int, heads: int,
             bottleneck: int) -> XaaParams:
    if width % heads:
        raise ShapeError(f"attention width {width} not divisible by heads {heads}")

    def w(rows, cols):
        return ad.param(rng.normal(0.0, 0.02, size=(rows, cols)))

    return XaaParams(
        wq=w(width, width), bq=ad.param(np.zeros(width)),
        wk=w(other_width, width), bk=ad.param(np.zeros(width)),
        wv=w(other_width, width), bv=ad.param(np.zeros(width)),
        wo=w(width, width), bo=ad.param(np.zeros(width)),
        heads=heads,
        adapt=init_adapt_mlp(rng, width, bottleneck, up_std=0.02),
    )


def adapt_mlp(x: Tensor, p: AdaptMlpParams) -> Tensor:
    h = ad.layer_norm(x, p.ln_g, p.ln_b)
    h = ad.quick_gelu(ad.affine(h, p.down_w, p.down_b))
    h = ad.affine(h, p.up_w, p.up_b)
    return ad.mul(h, p.scale)


class AdapterBank:
    """Holds per-(task, stream, layer) task adapters and per-(stream, layer) cross adapters.

    Cross adapters are shared across tasks; the adapter living in stream s
    attends to the other stream's hidden state.
    """

    def __init__(self, rng: np.random.Generator, widths: dict, heads: dict, layers: int,
                 bottleneck: int, use_tsa: bool, use_xaa: bool, tasks=TASKS):
        self.tasks = tuple(tasks)
        self.layers = layers
        self.use_tsa = use_tsa
        self.use_xaa = use_xaa
        self.tsa = {}
        self.xaa = {}
        if use_tsa:
            for task in self.tasks:
                for stream in STREAMS:
                    for layer in range(layers):
                        self.tsa[(task, stream, layer)] = init_adapt_mlp(
                            rng, widths[stream], bottleneck)
        if use_xaa:
            for stream in STREAMS:
                other = "vision" if stream == "text" else "text"
                for layer in range(layers):
                    self.xaa[(stream, layer)] = init_xaa(
                        rng, widths[stream], widths[other], heads[stream], bottleneck)

    def tsa_params(self, task: str, stream: str, layer: int) -> AdaptMlpParams:
        key = (task, stream, layer)
        if key not in self.tsa:
            raise KeyError(f"no task adapter for task={task!r} stream={stream!r} layer={layer}")
        return self.tsa[key]

    def xaa_params(self, stream: str, layer: int) -> XaaParams:
        return self.xaa[(stream, layer)]


def tsa_forward(bank: AdapterBank, z_prime: Tensor, task: str, layer: int,
                stream: str) -> Tensor:
    """Scaled bottleneck branch for one task at one layer of one stream."""
    return adapt_mlp(z_prime, bank.tsa_params(task, stream, layer))


def xaa_forward(z_prime: Tensor, memory: Tensor, p: XaaParams, key_mask=None) -> Tensor:
    """Cross-attend z' (B, N, D_cur) to memory (B, M, D_other), then AdaptMLP.

    ``key_mask`` is an optional additive mask over memory columns, e.g. to
    hide text padding.
    """
    if memory.shape[1] == 0:
        raise ShapeError("cross-attention memory is empty")
    q = ad.affine(z_prime, p.wq, p.bq)
    k = ad.affine(memory, p.wk, p.bk)
    v = ad.affine(memory, p.wv, p.bv)
    att = attention(q, k, v, p.heads, key_mask)
    att = ad.affine(att, p.wo, p.bo)
    return adapt_mlp(att, p.adapt)


def layer_combine(mlp_out: Tensor, z_prime: Tensor, z_tsa, z_xaa, eps: int) -> Tensor:
    """Exact four-term layer output; eps gates the cross branch on or off."""
    if eps not in (0, 1):
        raise ValueError(f"eps must be 0 or 1, got {eps}")
    for t in (z_tsa, z_xaa):
        if t is not None and t.shape != z_prime.shape:
            raise ShapeError(f"adapter branch shape {t.shape} != layer shape {z_prime.shape}")
    out = ad.add(mlp_out, z_prime)
    if z_tsa is not None:
        out = ad.add(out, z_tsa)
    if eps == 1 and z_xaa is not None:
        out = ad.add(out, z_xaa)
    return out


def adapt_mlp_param_count(width: int, bottleneck: int) -> int:
    """2*width (LN) + down with bias + up with bias + scale."""
    return 2 * width + width * bottleneck + bottleneck + bottleneck * width + width + 1


def xaa_param_count(width: int, other_width: int, bottleneck: int) -> int:
    proj = 2 * width * width + 2 * other_width * width + 4 * width
    return proj + adapt_mlp_param_count(width, bottleneck)
