"""The unified two-stream model and its operational modes.

One backbone (text + vision transformer streams) serves four tasks through
three modes:

* contrastive - single-stream encoding with the task's adapters, cross
  attention off; pooled, L2-normalized embeddings compared by dot product.
* fusion - both streams run in lockstep with bidirectional cross attention;
  the fused representation is the sum of the two pooled vectors.
* generative - the vision stream encodes layer-wise memories, the text stream
  decodes causally with image-to-text cross attention (teacher forcing in
  training, greedy decoding at inference).

Pooling takes the end-sentinel position of the text stream and the class
token of the vision stream, both from the final layer. Cross attention at
layer l always reads the other stream's post-attention hidden state at the
same layer.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .adapters import TASKS, AdapterBank, layer_combine, tsa_forward, xaa_forward
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"FMTL\x01"

TAU_INIT = 0.07
LOG_TAU_MIN = float(np.log(1e-3))
LOG_TAU_MAX = float(np.log(10.0))


class ModeError(ValueError):
    """Invalid task/mode combination."""


def similarity(u, v) -> float:
    """Dot product of two unit-norm pooled embeddings, in [-1, 1]."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u)
    v = v.data if isinstance(v, Tensor) else np.asarray(v)
    for name, vec in (("u", u), ("v", v)):
        if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
            raise ModeError(f"{name} is not L2-normalized (norm {np.linalg.norm(vec):.6f})")
    return float(u @ v)


class FrozenModelError(RuntimeError):
    """Gradient application attempted on a frozen model."""


@dataclass(frozen=True)
class ModelConfig:
    text: tf.TextConfig = field(default_factory=tf.TextConfig)
    vision: tf.VisionConfig = field(default_factory=tf.VisionConfig)
    bottleneck: int = 8
    num_classes: int = 12
    use_tsa: bool = True
    use_xaa: bool = True
    pad_id: int = 0
    sos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.text.layers != self.vision.layers:
            raise ShapeError("text and vision streams must have the same layer count")
        if self.text.width != self.vision.width:
            raise ShapeError("streams must share one width (pooled embeddings are summed)")

    @property
    def supported_tasks(self) -> tuple:
        return TASKS if self.use_xaa else ("xmr", "tgir", "scr")


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "text": vars(cfg.text).copy(),
        "vision": vars(cfg.vision).copy(),
        "bottleneck": cfg.bottleneck,
        "num_classes": cfg.num_classes,
        "use_tsa": cfg.use_tsa,
        "use_xaa": cfg.use_xaa,
        "pad_id": cfg.pad_id,
        "sos_id": cfg.sos_id,
        "eos_id": cfg.eos_id,
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    text = tf.TextConfig(**d.pop("text"))
    vision = tf.VisionConfig(**d.pop("vision"))
    return ModelConfig(text=text, vision=vision, **d)


class VLModel:
    """All parameters plus the mode-aware forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.text_params = tf.init_text_params(rng, cfg.text)
        self.vision_params = tf.init_vision_params(rng, cfg.vision)
        self.bank = AdapterBank(
            rng,
            widths={"text": cfg.text.width, "vision": cfg.vision.width},
            heads={"text": cfg.text.heads, "vision": cfg.vision.heads},
            layers=cfg.text.layers,
            bottleneck=cfg.bottleneck,
            use_tsa=cfg.use_tsa,
            use_xaa=cfg.use_xaa,
        )
        self.scr_w = ad.param(rng.normal(0.0, 0.02, size=(cfg.text.width, cfg.num_classes)))
        self.scr_b = ad.param(np.zeros(cfg.num_classes))
        self.log_tau = {
            "xmr": ad.param(np.asarray(np.log(TAU_INIT))),
            "tgir": ad.param(np.asarray(np.log(TAU_INIT))),
        }
        self._params = self._build_registry()

    # -- parameter bookkeeping ------------------------------------------------

    def _build_registry(self) -> dict:
        reg = {}
        reg["text.token_emb"] = self.text_params.token_emb
        reg["text.pos_emb"] = self.text_params.pos_emb
        for li, lp in enumerate(self.text_params.layers):
            for name in tf.layer_param_names():
                reg[f"text.layer{li}.{name}"] = getattr(lp, name)
        reg["vision.patch_w"] = self.vision_params.patch_w
        reg["vision.patch_b"] = self.vision_params.patch_b
        reg["vision.class_tok"] = self.vision_params.class_tok
        reg["vision.pos_emb"] = self.vision_params.pos_emb
        for li, lp in enumerate(self.vision_params.layers):
            for name in tf.layer_param_names():
                reg[f"vision.layer{li}.{name}"] = getattr(lp, name)
        adapt_fields = ("ln_g", "ln_b", "down_w", "down_b", "up_w", "up_b", "scale")
        for (task, stream, layer), p in self.bank.tsa.items():
            for name in adapt_fields:
                reg[f"tsa.{task}.{stream}.{layer}.{name}"] = getattr(p, name)
        for (stream, layer), p in self.bank.xaa.items():
            for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
                reg[f"xaa.{stream}.{layer}.{name}"] = getattr(p, name)
            for name in adapt_fields:
                reg[f"xaa.{stream}.{layer}.adapt.{name}"] = getattr(p.adapt, name)
        reg["head.scr_w"] = self.scr_w
        reg["head.scr_b"] = self.scr_b
        reg["tau.xmr"] = self.log_tau["xmr"]
        reg["tau.tgir"] = self.log_tau["tgir"]
        return reg

    def named_parameters(self) -> dict:
        return self._params

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def backbone_param_names(self) -> list:
        return [n for n in self._params if n.startswith(("text.", "vision."))]

    def shared_param_names(self) -> list:
        """Parameters every task trains: backbone plus cross adapters."""
        return [n for n in self._params if n.startswith(("text.", "vision.", "xaa."))]

    def task_of_param(self, name: str):
        """Owning task for task-specific parameters, else None (shared)."""
        if name.startswith("tsa."):
            return name.split(".")[1]
        if name.startswith("head.scr"):
            return "scr"
        if name.startswith("tau."):
            return name.split(".")[1]
        return None

    def freeze(self) -> "VLModel":
        self.frozen = True
        for p in self._params.values():
            p.requires_grad = False
        return self

    def assert_trainable(self):
        if self.frozen:
            raise FrozenModelError("model is frozen; gradient application rejected")

    def clamp_temperatures(self):
        for t in self.log_tau.values():
            np.clip(t.data, LOG_TAU_MIN, LOG_TAU_MAX, out=t.data)

    def tau(self, task: str) -> Tensor:
        return ad.exp(self.log_tau[task])

    def copy_backbone_from(self, other: "VLModel"):
        for name in self.backbone_param_names():
            self._params[name].data[...] = other._params[name].data

    # -- stream engines ---------------------------------------------------------

    def _text_masks(self, tokens: np.ndarray, causal: bool = True):
        n = tokens.shape[1]
        key_mask = tf.pad_key_mask(tokens, self.cfg.pad_id)
        mask = key_mask
        if causal:
            mask = tf.causal_mask(n) + key_mask
        return mask, key_mask

    def _eos_positions(self, tokens: np.ndarray) -> np.ndarray:
        hits = tokens == self.cfg.eos_id
        if not hits.any(axis=1).all():
            raise ShapeError("every token row must contain the end sentinel")
        return hits.argmax(axis=1)

    def _tsa_branch(self, z_prime, task, layer, stream):
        if not self.cfg.use_tsa:
            return None
        return tsa_forward(self.bank, z_prime, task, layer, stream)

    def _run_single(self, stream: str, x: Tensor, task: str, mask=None,
                    memories=None, memory_mask=None, eps: int = 0, collect: bool = False):
        """One stream, optional per-layer cross memories; returns (final, z_primes)."""
        cfg = self.cfg.text if stream == "text" else self.cfg.vision
        params = self.text_params if stream == "text" else self.vision_params
        z_primes = []
        for li, lp in enumerate(params.layers):
            attn = tf.mhsa(ad.layer_norm(x, lp.ln1_g, lp.ln1_b), lp, cfg.heads, mask)
            z_prime = ad.add(attn, x)
            if collect:
                z_primes.append(z_prime)
            mlp_out = tf.mlp_block(ad.layer_norm(z_prime, lp.ln2_g, lp.ln2_b), lp)
            z_tsa = self._tsa_branch(z_prime, task, li, stream)
            z_xaa = None
            if eps == 1 and memories is not None:
                z_xaa = xaa_forward(z_prime, memories[li], self.bank.xaa_params(stream, li),
                                    memory_mask)
            x = layer_combine(mlp_out, z_prime, z_tsa, z_xaa, eps if z_xaa is not None else 0)
        return x, z_primes

    def _lockstep(self, x_text: Tensor, x_vis: Tensor, task: str, text_mask, text_key_mask,
                  eps: int):
        """Both streams advance together; cross attention reads the other side's z'."""
        for li in range(self.cfg.text.layers):
            lt = self.text_params.layers[li]
            lv = self.vision_params.layers[li]
            zp_t = ad.add(tf.mhsa(ad.layer_norm(x_text, lt.ln1_g, lt.ln1_b), lt,
                                  self.cfg.text.heads, text_mask), x_text)
            zp_v = ad.add(tf.mhsa(ad.layer_norm(x_vis, lv.ln1_g, lv.ln1_b), lv,
                                  self.cfg.vision.heads, None), x_vis)
            xaa_t = xaa_v = None
            if eps == 1:
                xaa_t = xaa_forward(zp_t, zp_v, self.bank.xaa_params("text", li), None)
                xaa_v = xaa_forward(zp_v, zp_t, self.bank.xaa_params("vision", li),
                                    text_key_mask)
            mlp_t = tf.mlp_block(ad.layer_norm(zp_t, lt.ln2_g, lt.ln2_b), lt)
            mlp_v = tf.mlp_block(ad.layer_norm(zp_v, lv.ln2_g, lv.ln2_b), lv)
            x_text = layer_combine(mlp_t, zp_t, self._tsa_branch(zp_t, task, li, "text"),
                                   xaa_t, eps if xaa_t is not None else 0)
            x_vis = layer_combine(mlp_v, zp_v, self._tsa_branch(zp_v, task, li, "vision"),
                                  xaa_v, eps if xaa_v is not None else 0)
        return x_text, x_vis

    # -- operational modes --------------------------------------------------------

    def encode_contrastive(self, task: str, images=None, tokens=None) -> Tensor:
        """Pooled, L2-normalized single-stream embedding; cross attention off."""
        if task not in ("xmr", "tgir"):
            raise ModeError(f"contrastive mode serves xmr and tgir targets, not {task!r}")
        if (images is None) == (tokens is None):
            raise ModeError("pass exactly one of images or tokens")
        if tokens is not None:
            if task != "xmr":
                raise ModeError("contrastive text encoding is an xmr operation")
            tokens = np.asarray(tokens)
            mask, _ = self._text_masks(tokens)
            x = tf.embed_text(self.text_params, self.cfg.text, tokens)
            final, _ = self._run_single("text", x, task, mask=mask)
            pooled = ad.gather_positions(final, self._eos_positions(tokens))
        else:
            x = tf.embed_image(self.vision_params, self.cfg.vision, images)
            final, _ = self._run_single("vision", x, task)
            pooled = ad.gather_positions(final, np.zeros(final.shape[0], dtype=np.intp))
        return ad.l2_normalize(pooled)

    def encode_fusion(self, images, tokens, task: str, normalize: bool, eps=None) -> Tensor:
        """Sum of the two cross-attended pooled vectors; normalized for retrieval queries."""
        if task not in ("scr", "tgir"):
            raise ModeError(f"fusion mode serves scr and tgir queries, not {task!r}")
        tokens = np.asarray(tokens)
        if tokens.shape[1] == 0:
            raise ModeError("fusion mode needs a non-empty caption")
        if eps is None:
            eps = 1 if self.cfg.use_xaa else 0
        mask, key_mask = self._text_masks(tokens)
        x_t = tf.embed_text(self.text_params, self.cfg.text, tokens)
        x_v = tf.embed_image(self.vision_params, self.cfg.vision, images)
        z_t, z_v = self._lockstep(x_t, x_v, task, mask, key_mask, eps)
        pooled_t = ad.gather_positions(z_t, self._eos_positions(tokens))
        pooled_v = ad.gather_positions(z_v, np.zeros(z_v.shape[0], dtype=np.intp))
        fused = ad.add(pooled_v, pooled_t)
        return ad.l2_normalize(fused) if normalize else fused

    def scr_logits(self, images, tokens) -> Tensor:
        fused = self.encode_fusion(images, tokens, "scr", normalize=False)
        return ad.affine(fused, self.scr_w, self.scr_b)

    def tgir_pair(self, ref_images, mod_tokens, target_images):
        """(normalized fused query, contrastive target embedding)."""
        query = self.encode_fusion(ref_images, mod_tokens, "tgir", normalize=True)
        target = self.encode_contrastive("tgir", images=target_images)
        return query, target

    def _encode_vision_memory(self, images, task: str):
        x = tf.embed_image(self.vision_params, self.cfg.vision, images)
        _, z_primes = self._run_single("vision", x, task, collect=True)
        return z_primes

    def fic_logits(self, images, prefix_tokens, eps=None) -> Tensor:
        """Per-position next-token logits (B, A, V) under teacher forcing."""
        if not self.cfg.use_xaa and eps is None:
            raise ModeError("generative mode needs cross attention (use_xaa)")
        prefix_tokens = np.asarray(prefix_tokens)
        if prefix_tokens.shape[1] > self.cfg.text.max_seq_len:
            raise ShapeError("prefix exceeds max text length")
        if not (prefix_tokens[:, 0] == self.cfg.sos_id).all():
            raise ModeError("prefix must begin with the start sentinel")
        if eps is None:
            eps = 1
        memories = self._encode_vision_memory(images, "fic")
        mask, _ = self._text_masks(prefix_tokens)
        x = tf.embed_text(self.text_params, self.cfg.text, prefix_tokens)
        final, _ = self._run_single("text", x, "fic", mask=mask,
                                    memories=memories, eps=eps)
        return ad.matmul(final, ad.transpose(self.text_params.token_emb))

    def generate_caption(self, image, max_len: int) -> list:
        """Greedy decoding from the start sentinel; ties break to the lowest id."""
        if max_len > self.cfg.text.max_seq_len:
            raise ShapeError("max_len exceeds max text length")
        images = np.asarray(image)[None, ...]
        memories = self._encode_vision_memory(images, "fic")
        eps = 1 if self.cfg.use_xaa else 0
        out = [self.cfg.sos_id]
        while len(out) < max_len:
            prefix = np.asarray([out])
            mask, _ = self._text_masks(prefix)
            x = tf.embed_text(self.text_params, self.cfg.text, prefix)
            final, _ = self._run_single("text", x, "fic", mask=mask,
                                        memories=memories, eps=eps)
            logits = final.data[0, -1] @ self.text_params.token_emb.data.T
            nxt = int(np.argmax(logits))
            out.append(nxt)
            if nxt == self.cfg.eos_id:
                break
        return out

    # -- checkpointing --------------------------------------------------------------

    def save(self, path: str):
        header = {
            "format_version": 1,
            "config": model_config_to_dict(self.cfg),
            "frozen": self.frozen,
            "params": [[name, list(p.data.shape)] for name, p in self._params.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for _, p in self._params.items():
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "VLModel":
        with open(path, "rb") as fh:
            data = fh.read()
        buf = io.BytesIO(data)
        if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (hlen,) = struct.unpack("<I", buf.read(4))
        header = json.loads(buf.read(hlen))
        model = cls(model_config_from_dict(header["config"]), seed=0)
        for name, shape in header["params"]:
            p = model._params[name]
            if list(p.data.shape) != shape:
                raise ShapeError(f"checkpoint shape {shape} != model shape for '{name}'")
            raw = buf.read(p.data.size * 8)
            p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.data.shape)
        if header["frozen"]:
            model.freeze()
        return model
