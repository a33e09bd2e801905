"""Evaluation: retrieval recall, classification, caption metrics, summaries,
and closed-form parameter accounting.

Retrieval ties break toward the lower candidate id so rankings are
reproducible. Caption metrics are the common definitions with the smoothing
choices documented on each function.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .adapters import adapt_mlp_param_count, xaa_param_count


class MetricError(ValueError):
    """Bad metric inputs: empty pools, zero references, k out of range."""


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


@dataclass
class RankingResult:
    ranks: np.ndarray          # 1-based rank of the ground truth per query
    protocol: str
    pool_sizes: np.ndarray     # candidate count per query

    def recall_at(self, k: int) -> float:
        if k < 1 or k > int(self.pool_sizes.max()):
            raise MetricError(f"k={k} outside pool sizes (max {int(self.pool_sizes.max())})")
        return float(np.mean(self.ranks <= k))


def _rank_with_ties(scores: np.ndarray, true_pos: int, cand_ids: np.ndarray) -> int:
    s_true = scores[true_pos]
    higher = int(np.sum(scores > s_true))
    tied_lower_id = int(np.sum((scores == s_true) & (cand_ids < cand_ids[true_pos])))
    return 1 + higher + tied_lower_id


def retrieval_ranks(query_embs: np.ndarray, pool_embs: np.ndarray, gt_idx,
                    pool_ids=None, protocol: str = "full", query_cats=None,
                    pool_cats=None, rng=None, sample_size: int = 100) -> RankingResult:
    """Rank ground truth per query by descending dot-product similarity.

    ``full`` ranks against the whole pool. ``random100`` ranks against up to
    ``sample_size - 1`` same-category negatives plus the ground truth; when
    fewer negatives exist the pool shrinks to what is available (recorded in
    ``pool_sizes``), never padded with repeats.
    """
    if len(pool_embs) == 0:
        raise MetricError("empty candidate pool")
    gt_idx = np.asarray(gt_idx, dtype=np.intp)
    pool_ids = np.arange(len(pool_embs)) if pool_ids is None else np.asarray(pool_ids)
    scores = np.asarray(query_embs) @ np.asarray(pool_embs).T
    ranks, sizes = [], []
    if protocol == "full":
        for q in range(len(gt_idx)):
            ranks.append(_rank_with_ties(scores[q], int(gt_idx[q]), pool_ids))
            sizes.append(len(pool_embs))
    elif protocol == "random100":
        if pool_cats is None or rng is None:
            raise MetricError("random100 needs pool categories and an rng")
        pool_cats = np.asarray(pool_cats)
        for q in range(len(gt_idx)):
            g = int(gt_idx[q])
            negs = np.nonzero((pool_cats == pool_cats[g]) & (np.arange(len(pool_embs)) != g))[0]
            if len(negs) > sample_size - 1:
                negs = rng.choice(negs, size=sample_size - 1, replace=False)
            cand = np.concatenate([negs, [g]])
            ranks.append(_rank_with_ties(scores[q][cand], len(cand) - 1, pool_ids[cand]))
            sizes.append(len(cand))
    else:
        raise MetricError(f"unknown protocol {protocol!r}")
    return RankingResult(np.asarray(ranks), protocol, np.asarray(sizes))


def eval_retrieval(query_embs, pool_embs, gt_idx, k_list=(1, 5, 10), **kwargs) -> dict:
    result = retrieval_ranks(query_embs, pool_embs, gt_idx, **kwargs)
    return {f"r@{k}": result.recall_at(k) for k in k_list}


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def classification_metrics(preds, labels, num_classes: int) -> tuple:
    """(accuracy, macro F1). Classes absent from preds and labels score F1 = 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise MetricError(f"preds {preds.shape} and labels {labels.shape} differ")
    if labels.size and (labels.max() >= num_classes or labels.min() < 0):
        raise MetricError("label out of range")
    acc = float(np.mean(preds == labels))
    f1s = []
    for c in range(num_classes):
        tp = float(np.sum((preds == c) & (labels == c)))
        fp = float(np.sum((preds == c) & (labels != c)))
        fn = float(np.sum((preds != c) & (labels == c)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return acc, float(np.mean(f1s))


# ---------------------------------------------------------------------------
# caption metrics
# ---------------------------------------------------------------------------


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu4(hypothesis, references, eps: float = 1e-9) -> float:
    """Geometric mean of clipped 1..4-gram precisions with brevity penalty.

    Zero clipped counts are smoothed to ``eps``; the brevity penalty uses the
    reference length closest to the hypothesis length.
    """
    hyp = list(hypothesis)
    refs = [list(r) for r in references]
    if not hyp:
        return 0.0
    if not refs:
        raise MetricError("bleu4 needs at least one reference")
    log_p = 0.0
    for n in range(1, 5):
        counts = _ngrams(hyp, n)
        guess = max(0, len(hyp) - n + 1)
        max_ref = Counter()
        for r in refs:
            for ng, c in _ngrams(r, n).items():
                max_ref[ng] = max(max_ref[ng], c)
        correct = sum(min(c, max_ref[ng]) for ng, c in counts.items())
        p = correct / guess if guess and correct else eps
        log_p += np.log(p)
    ref_len = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
    bp = 1.0 if len(hyp) >= ref_len else float(np.exp(1.0 - ref_len / len(hyp)))
    return float(bp * np.exp(log_p / 4.0))


def _lcs_len(a, b) -> int:
    la, lb = len(a), len(b)
    dp = np.zeros((la + 1, lb + 1), dtype=np.int64)
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            if a[i - 1] == b[j - 1]:
                dp[i, j] = dp[i - 1, j - 1] + 1
            else:
                dp[i, j] = max(dp[i - 1, j], dp[i, j - 1])
    return int(dp[la, lb])


def rouge_l(hypothesis, reference) -> float:
    """LCS-based F-measure with beta = 1."""
    hyp, ref = list(hypothesis), list(reference)
    if not hyp or not ref:
        return 0.0
    lcs = _lcs_len(hyp, ref)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(hyp), lcs / len(ref)
    return float(2 * prec * rec / (prec + rec))


def cider(hypotheses, references) -> float:
    """tf-idf n-gram cosine (n = 1..4), averaged over n and items, times 10.

    The idf corpus is the evaluation reference set itself: one document per
    reference; df is floored at 1.
    """
    if len(hypotheses) != len(references):
        raise MetricError("hypotheses and references must align")
    n_docs = len(references)
    if n_docs == 0:
        raise MetricError("cider needs a non-empty reference corpus")
    df = [Counter() for _ in range(4)]
    for ref in references:
        r = list(ref)
        for n in range(1, 5):
            for ng in set(_ngrams(r, n)):
                df[n - 1][ng] += 1

    def tfidf(seq, n):
        vec = {}
        for ng, c in _ngrams(list(seq), n).items():
            vec[ng] = c * np.log(n_docs / max(1.0, df[n - 1][ng]))
        norm = float(np.sqrt(sum(v * v for v in vec.values())))
        return vec, norm

    scores = []
    for hyp, ref in zip(hypotheses, references):
        per_n = []
        for n in range(1, 5):
            vh, nh = tfidf(hyp, n)
            vr, nr = tfidf(ref, n)
            if nh == 0.0 or nr == 0.0:
                per_n.append(0.0)
                continue
            dot = sum(v * vr.get(ng, 0.0) for ng, v in vh.items())
            per_n.append(dot / (nh * nr))
        scores.append(10.0 * float(np.mean(per_n)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


@dataclass
class MetricSummary:
    per_task_mu: dict
    per_task_delta: dict
    overall_mu: float
    overall_delta: float
    raw: dict


def task_mu(metrics: dict) -> float:
    """Mean over a task's metric set, in sorted metric-name order."""
    if not metrics:
        raise MetricError("empty metric set")
    return float(np.mean([metrics[k] for k in sorted(metrics)]))


def summarize(raw_metrics: dict, reference: dict) -> MetricSummary:
    """Per-task mu plus relative delta against a reference summary."""
    mus = {task: task_mu(m) for task, m in raw_metrics.items()}
    deltas = {}
    for task, mu in mus.items():
        if task not in reference:
            continue
        ref_mu = reference[task] if np.isscalar(reference[task]) else task_mu(reference[task])
        if ref_mu == 0:
            raise MetricError(f"reference mu is zero for task {task!r}")
        deltas[task] = (mu - ref_mu) / ref_mu
    overall_mu = float(np.mean([mus[t] for t in sorted(mus)]))
    overall_delta = float(np.mean([deltas[t] for t in sorted(deltas)])) if deltas else 0.0
    return MetricSummary(mus, deltas, overall_mu, overall_delta, raw_metrics)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountConfig:
    text_width: int
    vision_width: int
    layers: int
    heads_text: int
    heads_vision: int
    mlp_ratio: int
    vocab_size: int
    max_seq_len: int
    image_size: int
    patch_size: int
    channels: int
    bottleneck: int
    num_classes: int
    use_tsa: bool = True
    use_xaa: bool = True


def count_config_from_model(cfg) -> CountConfig:
    return CountConfig(
        text_width=cfg.text.width, vision_width=cfg.vision.width,
        layers=cfg.text.layers, heads_text=cfg.text.heads, heads_vision=cfg.vision.heads,
        mlp_ratio=cfg.text.mlp_ratio, vocab_size=cfg.text.vocab_size,
        max_seq_len=cfg.text.max_seq_len, image_size=cfg.vision.image_size,
        patch_size=cfg.vision.patch_size, channels=cfg.vision.channels,
        bottleneck=cfg.bottleneck, num_classes=cfg.num_classes,
        use_tsa=cfg.use_tsa, use_xaa=cfg.use_xaa)


def clip_scale_config(bottleneck: int = 64) -> CountConfig:
    """The 12x512 text / 12x768 vision geometry used for the scaling check."""
    return CountConfig(
        text_width=512, vision_width=768, layers=12, heads_text=8, heads_vision=12,
        mlp_ratio=4, vocab_size=49408, max_seq_len=77, image_size=224, patch_size=16,
        channels=3, bottleneck=bottleneck, num_classes=48)


def _layer_count(width: int, ratio: int) -> int:
    hidden = ratio * width
    return (2 * 2 * width                      # two LayerNorms
            + 4 * (width * width + width)      # q, k, v, o projections with bias
            + width * hidden + hidden          # MLP in
            + hidden * width + width)          # MLP out


def _text_stream_count(cc: CountConfig) -> int:
    return (cc.vocab_size * cc.text_width + cc.max_seq_len * cc.text_width
            + cc.layers * _layer_count(cc.text_width, cc.mlp_ratio))


def _vision_stream_count(cc: CountConfig) -> int:
    patch_dim = cc.patch_size * cc.patch_size * cc.channels
    tokens = (cc.image_size // cc.patch_size) ** 2 + 1
    return (patch_dim * cc.vision_width + cc.vision_width   # patch projection + bias
            + cc.vision_width                               # class token
            + tokens * cc.vision_width
            + cc.layers * _layer_count(cc.vision_width, cc.mlp_ratio))


def _tsa_per_task(cc: CountConfig) -> int:
    return cc.layers * (adapt_mlp_param_count(cc.text_width, cc.bottleneck)
                        + adapt_mlp_param_count(cc.vision_width, cc.bottleneck))


def _xaa_text_side(cc: CountConfig) -> int:
    return cc.layers * xaa_param_count(cc.text_width, cc.vision_width, cc.bottleneck)


def _xaa_total(cc: CountConfig) -> int:
    return (_xaa_text_side(cc)
            + cc.layers * xaa_param_count(cc.vision_width, cc.text_width, cc.bottleneck))


def _heads_count(cc: CountConfig) -> int:
    # SCR classifier + two temperatures; the caption head is tied to the
    # token embedding and adds nothing
    return cc.text_width * cc.num_classes + cc.num_classes + 2


@dataclass
class ParamAccount:
    mode: str
    components: dict
    total: int
    stl_set_total: int
    mtl_total: int
    saving: float


def param_account(cc: CountConfig, mode: str = "mtl") -> ParamAccount:
    """Closed-form parameter totals for one multi-task model vs four single-task models.

    The single-task set is four plain backbones plus: one temperature each for
    the two retrieval models, the classifier head, and a text-side cross
    attention bank for the captioning model (a two-stream backbone cannot
    caption without it).
    """
    if mode not in ("mtl", "stl_set"):
        raise MetricError(f"unknown accounting mode {mode!r}")
    text, vision = _text_stream_count(cc), _vision_stream_count(cc)
    mtl_components = {
        "text_stream": text,
        "vision_stream": vision,
        "tsa_total": 4 * _tsa_per_task(cc) if cc.use_tsa else 0,
        "xaa_total": _xaa_total(cc) if cc.use_xaa else 0,
        "heads": _heads_count(cc),
    }
    mtl_total = sum(mtl_components.values())
    stl_components = {
        "backbones": 4 * (text + vision),
        "fic_xaa": _xaa_text_side(cc),
        "scr_head": cc.text_width * cc.num_classes + cc.num_classes,
        "temperatures": 2,
    }
    stl_total = sum(stl_components.values())
    saving = 1.0 - mtl_total / stl_total
    components = mtl_components if mode == "mtl" else stl_components
    total = mtl_total if mode == "mtl" else stl_total
    return ParamAccount(mode, components, total, stl_total, mtl_total, saving)
