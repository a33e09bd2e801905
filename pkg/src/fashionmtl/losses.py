"""Task objectives, distillation objectives, and their combined form.

All losses return scalar tape tensors. Distillation terms treat the teacher
as the target distribution, KL(teacher || student), and always consume the
teacher side as raw data so no gradient can reach teacher parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class LossError(ValueError):
    """Degenerate batch or invalid loss inputs."""


@dataclass
class LossValue:
    total: Tensor
    task: str
    task_loss: float
    distill_loss: float


def _as_const(x) -> np.ndarray:
    """Detach: accept Tensor or array, return plain data."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def info_nce(sim: Tensor, tau) -> Tensor:
    """Mean over rows of -log softmax(sim/tau) at the diagonal."""
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    tau_t = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    if float(tau_t.data) <= 0:
        raise LossError(f"temperature must be positive, got {float(tau_t.data)}")
    logits = ad.div(sim, tau_t)
    logp = ad.log_softmax(logits, axis=-1)
    diag = ad.gather_positions(logp, np.arange(sim.shape[0]))
    return ad.scale(diag.mean(), -1.0)


def xmr_loss(image_embs: Tensor, text_embs: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over S = E_img E_txt^T (both retrieval directions)."""
    if image_embs.shape[0] < 2:
        raise LossError("contrastive batch needs at least 2 pairs")
    if image_embs.shape != text_embs.shape:
        raise ShapeError(f"embedding shapes differ: {image_embs.shape} vs {text_embs.shape}")
    sim = ad.matmul(image_embs, ad.transpose(text_embs))
    fwd = info_nce(sim, tau)
    bwd = info_nce(ad.transpose(sim), tau)
    return ad.scale(ad.add(fwd, bwd), 0.5)


def scr_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy, mean over the batch."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and labels.max() >= logits.shape[-1]:
        raise LossError(f"label {labels.max()} out of range for {logits.shape[-1]} classes")
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.gather_positions(logp, labels)
    return ad.scale(picked.mean(), -1.0)


def tgir_loss(query_embs: Tensor, target_embs: Tensor, tau) -> Tensor:
    """One-directional InfoNCE, fused queries against target images."""
    if query_embs.shape[0] < 2:
        raise LossError("contrastive batch needs at least 2 triplets")
    sim = ad.matmul(query_embs, ad.transpose(target_embs))
    return info_nce(sim, tau)


def fic_loss(logits: Tensor, targets, target_mask) -> Tensor:
    """Mean NLL of the gold next token over non-pad positions.

    logits (B, A, V); targets (B, A) gold ids; target_mask (B, A) 1 where the
    position counts toward the loss.
    """
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(target_mask, dtype=np.float64)
    if logits.shape[:2] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not align with targets {targets.shape}")
    b, a, v = logits.shape
    logp = ad.log_softmax(logits, axis=-1)
    flat = ad.reshape(logp, (b * a, v))
    picked = ad.reshape(ad.gather_positions(flat, targets.reshape(-1)), (b, a))
    total = float(mask.sum())
    if total == 0:
        raise LossError("no unmasked target positions")
    weighted = ad.mul(picked, Tensor(mask))
    return ad.scale(weighted.sum(), -1.0 / total)


def kl_rows(student_logits: Tensor, teacher_logits) -> Tensor:
    """Mean over rows of KL(softmax(teacher_row) || softmax(student_row))."""
    t = _as_const(teacher_logits)
    if t.shape != student_logits.shape:
        raise ShapeError(f"teacher shape {t.shape} != student shape {student_logits.shape}")
    t2 = t.reshape(-1, t.shape[-1])
    tp = np.exp(t2 - t2.max(axis=-1, keepdims=True))
    tp /= tp.sum(axis=-1, keepdims=True)
    # teacher entropy term is a constant; only the cross term carries gradient
    ent = float(np.mean(np.sum(np.where(tp > 0, tp * np.log(np.maximum(tp, 1e-300)), 0.0),
                               axis=-1)))
    s_logp = ad.log_softmax(student_logits, axis=-1)
    s2 = ad.reshape(s_logp, t2.shape)
    cross = ad.scale(ad.mul(s2, Tensor(tp)).sum(), 1.0 / t2.shape[0])
    return ad.add(ad.scale(cross, -1.0), ent)


def distill_xmr(sim_student: Tensor, tau_student, sim_teacher, tau_teacher) -> Tensor:
    """Row KL plus column KL over the two similarity matrices, averaged."""
    st = _as_const(sim_teacher)
    if st.shape != sim_student.shape:
        raise ShapeError(f"teacher sims {st.shape} != student sims {sim_student.shape}")
    s_logits = ad.div(sim_student, tau_student if isinstance(tau_student, Tensor)
                      else Tensor(float(tau_student)))
    t_logits = st / float(_as_const(tau_teacher))
    rows = kl_rows(s_logits, t_logits)
    cols = kl_rows(ad.transpose(s_logits), t_logits.T)
    return ad.scale(ad.add(rows, cols), 0.5)


def distill_tgir(sim_student: Tensor, tau_student, sim_teacher, tau_teacher) -> Tensor:
    """Row-only KL: each fused query's distribution over target images."""
    st = _as_const(sim_teacher)
    if st.shape != sim_student.shape:
        raise ShapeError(f"teacher sims {st.shape} != student sims {sim_student.shape}")
    s_logits = ad.div(sim_student, tau_student if isinstance(tau_student, Tensor)
                      else Tensor(float(tau_student)))
    return kl_rows(s_logits, st / float(_as_const(tau_teacher)))


def distill_scr(student_logits: Tensor, teacher_logits) -> Tensor:
    """Per-sample class-distribution KL, batch mean."""
    return kl_rows(student_logits, teacher_logits)


def distill_fic(student_logits: Tensor, teacher_logits, target_mask) -> Tensor:
    """Per-position vocabulary KL, mean over non-pad positions."""
    t = _as_const(teacher_logits)
    if t.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {t.shape} != student logits {student_logits.shape}")
    mask = np.asarray(target_mask, dtype=np.float64)
    b, a, v = t.shape
    keep = mask.reshape(-1) > 0
    if not keep.any():
        raise LossError("no unmasked target positions")
    s_flat = ad.reshape(student_logits, (b * a, v))
    idx = np.nonzero(keep)[0]
    s_kept = ad.take_slice(s_flat, idx)
    t_kept = t.reshape(b * a, v)[idx]
    return kl_rows(s_kept, t_kept)


def combined_loss(task: str, batch, model, teacher=None, distill: bool = False) -> LossValue:
    """Task loss plus, when enabled, the matching distillation term.

    ``batch`` is a TaskBatch from the data module; ``teacher`` a frozen model
    of identical architecture. Teacher passes run off-tape.
    """
    from .training import teacher_forward  # late import; training owns batch plumbing

    if distill and teacher is None:
        raise LossError(f"distillation enabled for {task!r} but no teacher given")

    if task == "xmr":
        img = model.encode_contrastive("xmr", images=batch.images)
        txt = model.encode_contrastive("xmr", tokens=batch.tokens)
        sim = ad.matmul(img, ad.transpose(txt))
        tau = model.tau("xmr")
        task_term = ad.scale(ad.add(info_nce(sim, tau), info_nce(ad.transpose(sim), tau)), 0.5)
        if distill:
            t_sim, t_tau = teacher_forward(teacher, "xmr", batch)
            d_term = distill_xmr(sim, tau, t_sim, t_tau)
    elif task == "tgir":
        query, target = model.tgir_pair(batch.ref_images, batch.tokens, batch.target_images)
        sim = ad.matmul(query, ad.transpose(target))
        tau = model.tau("tgir")
        task_term = info_nce(sim, tau)
        if distill:
            t_sim, t_tau = teacher_forward(teacher, "tgir", batch)
            d_term = distill_tgir(sim, tau, t_sim, t_tau)
    elif task == "scr":
        logits = model.scr_logits(batch.images, batch.tokens)
        task_term = scr_loss(logits, batch.labels)
        if distill:
            t_logits, _ = teacher_forward(teacher, "scr", batch)
            d_term = distill_scr(logits, t_logits)
    elif task == "fic":
        logits = model.fic_logits(batch.images, batch.prefix)
        task_term = fic_loss(logits, batch.targets, batch.target_mask)
        if distill:
            t_logits, _ = teacher_forward(teacher, "fic", batch)
            d_term = distill_fic(logits, t_logits, batch.target_mask)
    else:
        raise LossError(f"unknown task {task!r}")

    if distill:
        total = ad.add(task_term, d_term)
        return LossValue(total, task, float(task_term.data), float(d_term.data))
    return LossValue(task_term, task, float(task_term.data), 0.0)
