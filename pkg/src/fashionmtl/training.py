"""Heterogeneous multi-task training: task sampling, teacher distillation,
and the gradient-manipulation baselines (validation-driven scaling and
equal-projection aggregation with a four-slot gradient buffer).

One task is sampled per iteration; its batch gradient either steps the
optimizer directly, is rescaled by the task's validation shortfall, or is
buffered until all tasks are present and merged with closed-form weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dat
from . import metrics as met
from .autodiff import Tape
from .data import TASKS, VOCAB, Catalog, TaskDatasets, fic_batch_from_records, make_batch
from .losses import combined_loss
from .model import ModelConfig, VLModel, model_config_to_dict
from .optim import LrSchedule, OptimState, adamw_apply, param_checksum, zero_grads
from .report import RunReport

STRATEGIES = ("size_proportional", "uniform", "round_robin")
GRAD_METHODS = ("none", "ias", "imtlg")


class TrainingError(RuntimeError):
    """Divergence, missing teachers, or misconfigured runs."""


# ---------------------------------------------------------------------------
# task sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    strategy: str
    sizes: dict
    seed: int


class TaskSampler:
    """Draws one task id per iteration under the configured strategy."""

    def __init__(self, cfg: SamplerConfig, tasks=TASKS):
        if cfg.strategy not in STRATEGIES:
            raise TrainingError(f"unknown strategy {cfg.strategy!r}")
        self.cfg = cfg
        self.tasks = tuple(tasks)
        if not self.tasks:
            raise TrainingError("empty task set")
        for t in self.tasks:
            if cfg.sizes.get(t, 0) <= 0:
                raise TrainingError(f"task {t!r} has no data")
        self._rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5A3)))
        self._rr_index = 0

    def probabilities(self) -> dict:
        if self.cfg.strategy == "size_proportional":
            total = sum(self.cfg.sizes[t] for t in self.tasks)
            return {t: self.cfg.sizes[t] / total for t in self.tasks}
        return {t: 1.0 / len(self.tasks) for t in self.tasks}

    def sample(self) -> str:
        if self.cfg.strategy == "round_robin":
            task = self.tasks[self._rr_index % len(self.tasks)]
            self._rr_index += 1
            return task
        probs = self.probabilities()
        p = np.asarray([probs[t] for t in self.tasks])
        return self.tasks[int(self._rng.choice(len(self.tasks), p=p))]

    def state(self) -> dict:
        return {"rng": self._rng.bit_generator.state, "rr_index": self._rr_index}

    def set_state(self, state: dict):
        self._rng.bit_generator.state = state["rng"]
        self._rr_index = state["rr_index"]


# ---------------------------------------------------------------------------
# training configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 16
    val_every: int = 100
    lr_backbone: float = 3e-4
    lr_adapters: float = 3e-3
    warmup_frac: float = 1.0 / 9.0
    warmup_factor: float = 0.25
    milestone_fracs: tuple = (5.0 / 9.0, 8.0 / 9.0)
    decay: float = 0.1
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    # single-task budgets follow the paper's 30k/6k-of-90k split at 1/30 scale
    teacher_iterations: dict = field(default_factory=lambda: {
        "xmr": 900, "tgir": 200, "scr": 700, "fic": 900})

    def schedules(self, iterations: int) -> tuple:
        warmup = int(round(self.warmup_frac * iterations))
        milestones = tuple(int(round(f * iterations)) for f in self.milestone_fracs)
        mk = lambda base: LrSchedule(base=base, warmup_iters=warmup,
                                     warmup_factor=self.warmup_factor,
                                     milestones=milestones, decay=self.decay)
        return mk(self.lr_backbone), mk(self.lr_adapters)


def _lr_map(model: VLModel, bb_rate: float, ad_rate: float) -> dict:
    backbone = set(model.backbone_param_names())
    return {name: (bb_rate if name in backbone else ad_rate)
            for name in model.named_parameters()}


# ---------------------------------------------------------------------------
# teacher forwards for distillation (always off-graph: teachers are frozen)
# ---------------------------------------------------------------------------


def teacher_forward(teacher: VLModel, task: str, batch):
    """Teacher similarities or logits for the student's batch, plus its temperature."""
    if task == "xmr":
        img = teacher.encode_contrastive("xmr", images=batch.images)
        txt = teacher.encode_contrastive("xmr", tokens=batch.tokens)
        tau = float(np.exp(teacher.log_tau["xmr"].data))
        return img.data @ txt.data.T, tau
    if task == "tgir":
        q, t = teacher.tgir_pair(batch.ref_images, batch.tokens, batch.target_images)
        tau = float(np.exp(teacher.log_tau["tgir"].data))
        return q.data @ t.data.T, tau
    if task == "scr":
        return teacher.scr_logits(batch.images, batch.tokens).data, 1.0
    if task == "fic":
        return teacher.fic_logits(batch.images, batch.prefix).data, 1.0
    raise TrainingError(f"unknown task {task!r}")


@dataclass
class TeacherBundle:
    """Frozen single-task models keyed by task, with stable checksums."""

    models: dict
    val_refs: dict   # task -> final validation metric (reference for scaling/deltas)

    def __post_init__(self):
        for task, m in self.models.items():
            if not m.frozen:
                raise TrainingError(f"teacher for {task!r} is not frozen")

    def checksums(self) -> dict:
        return {t: param_checksum(m.named_parameters()) for t, m in sorted(self.models.items())}


# ---------------------------------------------------------------------------
# validation and final evaluation
# ---------------------------------------------------------------------------


def _encode_pairs(model: VLModel, records, catalog: Catalog):
    images = catalog.images([r.pid for r in records])
    tokens = dat.pad_token_matrix([r.words for r in records], model.cfg.text.max_seq_len)
    img = model.encode_contrastive("xmr", images=images).data
    txt = model.encode_contrastive("xmr", tokens=tokens).data
    return img, txt


def _tgir_embeddings(model: VLModel, triplets, catalog: Catalog):
    """Fused queries, the candidate image pool (all split products), gt indices."""
    pool_pids = sorted({t.target_pid for t in triplets} | {t.ref_pid for t in triplets})
    pool = model.encode_contrastive("tgir", images=catalog.images(pool_pids)).data
    pid_pos = {pid: i for i, pid in enumerate(pool_pids)}
    tokens = dat.pad_token_matrix([t.words for t in triplets], model.cfg.text.max_seq_len)
    queries = model.encode_fusion(catalog.images([t.ref_pid for t in triplets]), tokens,
                                  "tgir", normalize=True).data
    gt = np.asarray([pid_pos[t.target_pid] for t in triplets])
    return queries, pool, gt, np.asarray(pool_pids)


def validate_task(model: VLModel, task: str, val_sets: TaskDatasets, catalog: Catalog) -> float:
    """Cheap scalar used for curves, best-checkpoint selection, and scaling."""
    recs = val_sets.records[task]
    if task == "xmr":
        img, txt = _encode_pairs(model, recs, catalog)
        sims = img @ txt.T
        gt = np.arange(len(recs))
        r1_i2t = float(np.mean(np.argmax(sims, axis=1) == gt))
        r1_t2i = float(np.mean(np.argmax(sims.T, axis=1) == gt))
        return 0.5 * (r1_i2t + r1_t2i)
    if task == "tgir":
        queries, pool, gt, pool_pids = _tgir_embeddings(model, recs, catalog)
        result = met.retrieval_ranks(queries, pool, gt, pool_ids=pool_pids)
        return result.recall_at(min(10, len(pool)))
    if task == "scr":
        images = catalog.images([r.pid for r in recs])
        tokens = dat.pad_token_matrix([r.words for r in recs], model.cfg.text.max_seq_len)
        preds = np.argmax(model.scr_logits(images, tokens).data, axis=1)
        return float(np.mean(preds == np.asarray([r.label for r in recs])))
    if task == "fic":
        batch = fic_batch_from_records(recs, catalog, model.cfg.text.max_seq_len)
        logits = model.fic_logits(batch.images, batch.prefix).data
        preds = np.argmax(logits, axis=-1)
        mask = batch.target_mask > 0
        return float(np.mean(preds[mask] == batch.targets[mask]))
    raise TrainingError(f"unknown task {task!r}")


def caption_grammar_rate(model: VLModel, records, catalog: Catalog, max_len: int = 16) -> float:
    ok = 0
    for r in records:
        ids = model.generate_caption(catalog.image(r.pid), max_len)
        ok += dat.is_grammatical(VOCAB.strip_sentinels(ids))
    return ok / len(records)


def final_metrics(model: VLModel, eval_sets: TaskDatasets, catalog: Catalog,
                  tasks=None) -> dict:
    """Per-task metric tables on one split (full-protocol retrieval)."""
    tasks = model.cfg.supported_tasks if tasks is None else tasks
    out = {}
    for task in tasks:
        recs = eval_sets.records[task]
        if task == "xmr":
            img, txt = _encode_pairs(model, recs, catalog)
            gt = np.arange(len(recs))
            ks = [k for k in (1, 5, 10) if k <= len(recs)]
            i2t = met.eval_retrieval(img, txt, gt, k_list=ks)
            t2i = met.eval_retrieval(txt, img, gt, k_list=ks)
            out[task] = {f"i2t_{k}": v for k, v in i2t.items()}
            out[task].update({f"t2i_{k}": v for k, v in t2i.items()})
        elif task == "tgir":
            # mu set uses the coarser recalls; r@1 on toy pools is seed noise
            queries, pool, gt, pool_pids = _tgir_embeddings(model, recs, catalog)
            ks = [k for k in (5, 10) if k <= len(pool)]
            out[task] = met.eval_retrieval(queries, pool, gt, pool_ids=pool_pids, k_list=ks)
        elif task == "scr":
            images = catalog.images([r.pid for r in recs])
            tokens = dat.pad_token_matrix([r.words for r in recs], model.cfg.text.max_seq_len)
            preds = np.argmax(model.scr_logits(images, tokens).data, axis=1)
            acc, f1 = met.classification_metrics(
                preds, np.asarray([r.label for r in recs]), model.cfg.num_classes)
            out[task] = {"accuracy": acc, "macro_f1": f1}
        elif task == "fic":
            hyps, refs = [], []
            for r in recs:
                ids = model.generate_caption(catalog.image(r.pid), model.cfg.text.max_seq_len)
                hyps.append(VOCAB.strip_sentinels(ids))
                refs.append(list(r.words))
            # cider10 rescales the 0..10 score so the mu mean is not a pure
            # cider readout; the cider op itself keeps its standard scale
            out[task] = {
                "bleu4": float(np.mean([met.bleu4(h, [f]) for h, f in zip(hyps, refs)])),
                "rouge_l": float(np.mean([met.rouge_l(h, f) for h, f in zip(hyps, refs)])),
                "cider10": met.cider(hyps, refs) / 10.0,
            }
    return out


# ---------------------------------------------------------------------------
# gradient manipulation
# ---------------------------------------------------------------------------


def ias_scale(val_latest: dict, teacher_refs: dict, lo: float = 0.25, hi: float = 4.0) -> dict:
    """Shortfall-vs-teacher gradient scales, clamped then renormalized to mean 1.

    scale ~ (teacher - current) / teacher: tasks lagging their single-task
    teacher get proportionally larger gradients.
    """
    raw = {}
    for task, cur in val_latest.items():
        ref = teacher_refs.get(task)
        if ref is None:
            raise TrainingError(f"missing teacher reference metric for {task!r}")
        shortfall = (ref - cur) / ref if ref > 0 else 0.0
        raw[task] = float(np.clip(shortfall, lo, hi))
    mean = float(np.mean(list(raw.values())))
    return {t: v / mean for t, v in raw.items()}


def imtlg_alpha(task_grads) -> np.ndarray:
    """Closed-form weights: the weighted gradient sum has equal projections
    onto every task's unit gradient, with the weights summing to one.

    With u_t = g_t / |g_t| and alpha_1 eliminated via sum(alpha) = 1, the
    constraints g^T (u_1 - u_t) = 0 reduce to the (T-1)-dim linear system
    (D U^T)^T beta = U g_1 where D rows are g_1 - g_t and U rows u_1 - u_t.
    Falls back to equal weights when the system is singular.
    """
    grads = [np.asarray(g, dtype=np.float64).reshape(-1) for g in task_grads]
    if len(grads) < 2:
        raise TrainingError("need at least two task gradients")
    norms = [np.linalg.norm(g) for g in grads]
    if min(norms) <= 1e-12:
        raise TrainingError("near-zero task gradient")
    G = np.stack(grads)
    U = G / np.asarray(norms)[:, None]
    D = G[0:1] - G[1:]
    Ud = U[0:1] - U[1:]
    try:
        rest = np.linalg.solve((D @ Ud.T).T, Ud @ G[0])
    except np.linalg.LinAlgError:
        n = len(grads)
        return np.full(n, 1.0 / n)
    return np.concatenate([[1.0 - rest.sum()], rest])


class GradientBuffer:
    """Per-task gradient slots over the full parameter set; applies only when full."""

    def __init__(self, tasks):
        self.tasks = tuple(tasks)
        self.slots = {}

    def add(self, task: str, grads: dict):
        self.slots[task] = grads

    def full(self) -> bool:
        return all(t in self.slots for t in self.tasks)

    def clear(self):
        self.slots = {}

    def state_arrays(self) -> dict:
        return {f"{t}::{n}": g for t, grads in self.slots.items() for n, g in grads.items()}

    def load_state_arrays(self, arrays: dict):
        self.clear()
        for key, g in arrays.items():
            task, name = key.split("::", 1)
            self.slots.setdefault(task, {})[name] = g


def imtlg_merge(buffer: GradientBuffer, model: VLModel, tol: float = 1e-8) -> dict:
    """Shared parameters get the equal-projection combination; task-specific
    parameters keep their own task's raw gradient."""
    if not buffer.full():
        raise TrainingError("gradient buffer is not full")
    shared_names = model.shared_param_names()
    flats = []
    for task in buffer.tasks:
        grads = buffer.slots[task]
        flats.append(np.concatenate([grads[n].reshape(-1) for n in shared_names]))
    alpha = imtlg_alpha(flats)
    combined = np.zeros_like(flats[0])
    for a, g in zip(alpha, flats):
        combined += a * g
    # the defining property must hold on the actually-applied update
    projections = [float(combined @ (g / np.linalg.norm(g))) for g in flats]
    if max(projections) - min(projections) > tol * max(1.0, max(map(abs, projections))):
        raise TrainingError(f"equal-projection property violated: {projections}")
    merged = {}
    offset = 0
    for name in shared_names:
        size = model.named_parameters()[name].data.size
        merged[name] = combined[offset:offset + size].reshape(
            model.named_parameters()[name].data.shape)
        offset += size
    for name in model.named_parameters():
        owner = model.task_of_param(name)
        if owner is not None and owner in buffer.slots:
            merged[name] = buffer.slots[owner][name]
    return merged


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _run_iteration(model, task, batch, teacher, distill):
    with Tape() as tape:
        loss = combined_loss(task, batch, model, teacher=teacher, distill=distill)
        if not np.isfinite(loss.total.data):
            raise TrainingError(f"non-finite loss for task {task!r}")
        tape.backward(loss.total)
    return loss


def train_teacher(task: str, model_cfg: ModelConfig, catalog: Catalog,
                  train_sets: TaskDatasets, val_sets: TaskDatasets,
                  tcfg: TrainConfig, seed: int, iterations: int | None = None):
    """Single-task training; returns the best-validation checkpoint, frozen."""
    if task not in model_cfg.supported_tasks:
        raise TrainingError(f"task {task!r} unsupported by this architecture")
    iterations = tcfg.teacher_iterations[task] if iterations is None else iterations
    model = VLModel(model_cfg, seed=int(np.random.SeedSequence((seed, 0x11)).generate_state(1)[0]))
    params = model.named_parameters()
    opt = OptimState(betas=tcfg.betas, eps=tcfg.adam_eps, weight_decay=tcfg.weight_decay)
    bb_sched, ad_sched = tcfg.schedules(iterations)
    batch_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x22)))
    report = RunReport(kind="teacher", seed=seed, task=task,
                       config={"model": model_config_to_dict(model_cfg),
                               "train": _train_config_dict(tcfg),
                               "iterations": iterations})
    t0 = time.monotonic()
    best_metric, best_params = -np.inf, None
    curve = []

    def snapshot(it):
        nonlocal best_metric, best_params
        value = validate_task(model, task, val_sets, catalog)
        curve.append((it, value))
        if value > best_metric:
            best_metric = value
            best_params = {n: p.data.copy() for n, p in params.items()}

    snapshot(0)
    for it in range(iterations):
        model.assert_trainable()
        zero_grads(params)
        batch = make_batch(task, train_sets, catalog, batch_rng, tcfg.batch_size,
                           model_cfg.text.max_seq_len)
        try:
            loss = _run_iteration(model, task, batch, None, False)
        except TrainingError as e:
            raise TrainingError(f"{e} at iteration {it}") from e
        report.loss_records.append((it, task, loss.task_loss, 0.0))
        lr = _lr_map(model, bb_sched(it), ad_sched(it))
        adamw_apply(params, {n: p.grad for n, p in params.items()}, opt, lr)
        model.clamp_temperatures()
        if (it + 1) % tcfg.val_every == 0 or it + 1 == iterations:
            snapshot(it + 1)

    for n, p in params.items():
        p.data[...] = best_params[n]
    model.freeze()
    report.val_curves[task] = curve
    report.extras["best_val"] = best_metric
    report.final_metrics = final_metrics(model, val_sets, catalog, tasks=(task,))
    report.param_account = vars(met.param_account(met.count_config_from_model(model_cfg)))
    report.param_account["components"] = dict(report.param_account["components"])
    report.wall_clock_sec = time.monotonic() - t0
    return model, report


def train_mtl(model_cfg: ModelConfig, catalog: Catalog, train_sets: TaskDatasets,
              val_sets: TaskDatasets, tcfg: TrainConfig, seed: int,
              strategy: str = "size_proportional", grad_method: str = "none",
              distill: bool = False, teachers: TeacherBundle | None = None,
              stop_at: int | None = None, resume: "TrainState | None" = None):
    """The multi-task loop. Returns (model, report, TrainState).

    ``stop_at`` halts early and the returned TrainState resumes to a
    bit-identical trajectory. Distillation requires a TeacherBundle; the
    validation-scaling method additionally needs the bundle's reference
    metrics.
    """
    if grad_method not in GRAD_METHODS:
        raise TrainingError(f"unknown grad method {grad_method!r}")
    if distill and teachers is None:
        raise TrainingError("distillation requested without teachers")
    if grad_method == "ias" and (teachers is None or not teachers.val_refs):
        raise TrainingError("validation scaling needs teacher reference metrics")
    tasks = model_cfg.supported_tasks
    sizes = {t: len(train_sets.records[t]) for t in tasks}

    if resume is not None:
        model, opt, sampler, batch_rng = resume.model, resume.opt, resume.sampler, resume.batch_rng
        start = resume.iteration
        report = resume.report
        curves = resume.curves
        buffer = resume.buffer
        scales = resume.scales
    else:
        model = VLModel(model_cfg, seed=int(np.random.SeedSequence((seed, 0x33)).generate_state(1)[0]))
        opt = OptimState(betas=tcfg.betas, eps=tcfg.adam_eps, weight_decay=tcfg.weight_decay)
        sampler = TaskSampler(SamplerConfig(strategy, sizes, seed), tasks)
        batch_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x44)))
        start = 0
        report = RunReport(kind="mtl", seed=seed, strategy=strategy, grad_method=grad_method,
                           distill=distill,
                           config={"model": model_config_to_dict(model_cfg),
                                   "train": _train_config_dict(tcfg),
                                   "sizes": sizes})
        curves = {t: [] for t in tasks}
        buffer = GradientBuffer(tasks)
        scales = {t: 1.0 for t in tasks}

    params = model.named_parameters()
    bb_sched, ad_sched = tcfg.schedules(tcfg.iterations)
    t0 = time.monotonic()

    def snapshot(it):
        nonlocal scales
        latest = {}
        for t in tasks:
            value = validate_task(model, t, val_sets, catalog)
            curves[t].append((it, value))
            latest[t] = value
        if grad_method == "ias":
            scales = ias_scale(latest, teachers.val_refs)

    if start == 0:
        snapshot(0)
    end = tcfg.iterations if stop_at is None else min(stop_at, tcfg.iterations)
    for it in range(start, end):
        model.assert_trainable()
        zero_grads(params)
        if grad_method == "imtlg":
            task = tasks[it % len(tasks)]   # buffer fills with one slot per task
        else:
            task = sampler.sample()
        batch = make_batch(task, train_sets, catalog, batch_rng, tcfg.batch_size,
                           model_cfg.text.max_seq_len)
        teacher = teachers.models[task] if distill else None
        try:
            loss = _run_iteration(model, task, batch, teacher, distill)
        except TrainingError as e:
            raise TrainingError(f"{e} at iteration {it}") from e
        report.loss_records.append((it, task, loss.task_loss, loss.distill_loss))
        lr = _lr_map(model, bb_sched(it), ad_sched(it))
        if grad_method == "imtlg":
            buffer.add(task, {n: p.grad_array() for n, p in params.items()})
            if buffer.full():
                merged = imtlg_merge(buffer, model)
                adamw_apply(params, merged, opt, lr)
                model.clamp_temperatures()
                buffer.clear()
        else:
            grads = {n: p.grad for n, p in params.items()}
            if grad_method == "ias":
                s = scales[task]
                grads = {n: (None if g is None else g * s) for n, g in grads.items()}
            adamw_apply(params, grads, opt, lr)
            model.clamp_temperatures()
        if (it + 1) % tcfg.val_every == 0 or it + 1 == tcfg.iterations:
            snapshot(it + 1)

    state = TrainState(iteration=end, model=model, opt=opt, sampler=sampler,
                       batch_rng=batch_rng, report=report, curves=curves,
                       buffer=buffer, scales=scales)
    if end == tcfg.iterations:
        report.val_curves = curves
        report.param_account = vars(met.param_account(met.count_config_from_model(model_cfg)))
        report.param_account["components"] = dict(report.param_account["components"])
        report.wall_clock_sec = time.monotonic() - t0
    return model, report, state


@dataclass
class TrainState:
    """Everything needed to resume a multi-task run bit-identically."""

    iteration: int
    model: VLModel
    opt: OptimState
    sampler: TaskSampler
    batch_rng: np.random.Generator
    report: RunReport
    curves: dict
    buffer: GradientBuffer
    scales: dict


def _train_config_dict(tcfg: TrainConfig) -> dict:
    d = dict(vars(tcfg))
    d["betas"] = list(tcfg.betas)
    d["milestone_fracs"] = list(tcfg.milestone_fracs)
    d["teacher_iterations"] = dict(tcfg.teacher_iterations)
    return d


# ---------------------------------------------------------------------------
# study drivers
# ---------------------------------------------------------------------------

ABLATION_GROUPS = {
    "I": ("stl", "stl_tsa", "stl_xaa", "stl_tsa_xaa"),
    "II": ("mtl", "mtl_tsa", "mtl_xaa", "mtl_tsa_xaa"),
    "III": ("mtd", "mtd_uniform", "mtd_round_robin", "ias", "mtd_ias", "imtlg", "mtd_imtlg"),
    "IV": ("mtd_bottleneck8", "mtd_bottleneck16", "mtd_bottleneck32"),
}

_ROW_FLAGS = {
    "mtl": dict(use_tsa=False, use_xaa=False),
    "mtl_tsa": dict(use_tsa=True, use_xaa=False),
    "mtl_xaa": dict(use_tsa=False, use_xaa=True),
    "mtl_tsa_xaa": dict(use_tsa=True, use_xaa=True),
}

_ROW_STRATEGY = {"mtd_uniform": "uniform", "mtd_round_robin": "round_robin"}
_ROW_GRAD = {"ias": "ias", "mtd_ias": "ias", "imtlg": "imtlg", "mtd_imtlg": "imtlg"}
_ROW_DISTILL = {"mtd", "mtd_uniform", "mtd_round_robin", "mtd_ias", "mtd_imtlg",
                "mtd_bottleneck8", "mtd_bottleneck16", "mtd_bottleneck32"}


@dataclass
class StudyData:
    catalog: Catalog
    train_sets: TaskDatasets
    val_sets: TaskDatasets
    test_sets: TaskDatasets


def build_study_data(seed: int, n_products: int = 600, sizes: dict | None = None) -> StudyData:
    sizes = {"xmr": 2000, "tgir": 200, "scr": 2000, "fic": 2000} if sizes is None else sizes
    catalog = dat.gen_catalog(seed, n_products)
    return StudyData(
        catalog=catalog,
        train_sets=dat.build_task_datasets(catalog, sizes, "train"),
        val_sets=dat.build_task_datasets(catalog, dat.eval_sizes(catalog, "val"), "val",
                                         allow_fewer_triplets=True),
        test_sets=dat.build_task_datasets(catalog, dat.eval_sizes(catalog, "test"), "test",
                                          allow_fewer_triplets=True),
    )


def train_teacher_bundle(model_cfg: ModelConfig, study: StudyData, tcfg: TrainConfig,
                         seed: int) -> tuple:
    """Four single-task teachers plus their reports."""
    models, refs, reports = {}, {}, {}
    for task in model_cfg.supported_tasks:
        m, rep = train_teacher(task, model_cfg, study.catalog, study.train_sets,
                               study.val_sets, tcfg, seed)
        models[task] = m
        refs[task] = rep.extras["best_val"]
        reports[task] = rep
    return TeacherBundle(models, refs), reports


def teacher_reference_metrics(teachers: TeacherBundle, study: StudyData,
                              split_sets: TaskDatasets) -> dict:
    """Per-task metric tables of the single-task models, the delta baseline."""
    refs = {}
    for task, m in teachers.models.items():
        refs.update(final_metrics(m, split_sets, study.catalog, tasks=(task,)))
    return refs


def run_mtl_row(tag: str, base_cfg: ModelConfig, study: StudyData, tcfg: TrainConfig,
                seed: int, teachers: TeacherBundle | None):
    """One Table-style row: resolve flags, train, evaluate on the test split."""
    cfg = replace(base_cfg, **_ROW_FLAGS.get(tag, dict(use_tsa=True, use_xaa=True)))
    if tag.startswith("mtd_bottleneck"):
        cfg = replace(cfg, bottleneck=int(tag.rsplit("bottleneck", 1)[1]))
    strategy = _ROW_STRATEGY.get(tag, "size_proportional")
    grad_method = _ROW_GRAD.get(tag, "none")
    distill = tag in _ROW_DISTILL
    model, rep, _ = train_mtl(cfg, study.catalog, study.train_sets, study.val_sets, tcfg,
                              seed, strategy=strategy, grad_method=grad_method,
                              distill=distill, teachers=teachers)
    rep.final_metrics = final_metrics(model, study.test_sets, study.catalog)
    rep.extras["tag"] = tag
    return model, rep


def run_ablation(group: str, base_cfg: ModelConfig, study: StudyData, tcfg: TrainConfig,
                 seed: int, teachers: TeacherBundle | None = None,
                 reference: dict | None = None) -> list:
    """Execute one ablation group and emit Table-shaped rows.

    Group I retrains single-task models per row and uses its own first row
    (plus the cross-attention row for captioning) as the delta baseline.
    Groups II-IV need `teachers` (the single-task reference set); rows with
    distillation reuse them as teachers.
    """
    if group not in ABLATION_GROUPS:
        raise TrainingError(f"unknown ablation group {group!r}")
    rows = []
    stl_ref_cc = met.count_config_from_model(
        ModelConfig(text=base_cfg.text, vision=base_cfg.vision, bottleneck=base_cfg.bottleneck,
                    num_classes=base_cfg.num_classes, use_tsa=False, use_xaa=False))
    stl_ref_total = met.param_account(stl_ref_cc, "stl_set").stl_set_total

    if group == "I":
        reference = None
        for tag in ABLATION_GROUPS["I"]:
            flags = {"stl": dict(use_tsa=False, use_xaa=False),
                     "stl_tsa": dict(use_tsa=True, use_xaa=False),
                     "stl_xaa": dict(use_tsa=False, use_xaa=True),
                     "stl_tsa_xaa": dict(use_tsa=True, use_xaa=True)}[tag]
            cfg = replace(base_cfg, **flags)
            metrics_by_task = {}
            for task in cfg.supported_tasks:
                m, rep = train_teacher(task, cfg, study.catalog, study.train_sets,
                                       study.val_sets, tcfg, seed)
                metrics_by_task.update(final_metrics(m, study.test_sets, study.catalog,
                                                     tasks=(task,)))
            if reference is None:
                reference = dict(metrics_by_task)
            if tag == "stl_xaa" and "fic" in metrics_by_task and "fic" not in reference:
                reference["fic"] = metrics_by_task["fic"]
            summary = met.summarize(metrics_by_task, reference)
            total = met.param_account(met.count_config_from_model(cfg), "stl_set").stl_set_total
            rows.append(_row_dict(tag, summary, (total - stl_ref_total) / stl_ref_total))
        return rows

    if teachers is None or reference is None:
        raise TrainingError(f"group {group} needs teachers and reference metrics")
    for tag in ABLATION_GROUPS[group]:
        _, rep = run_mtl_row(tag, base_cfg, study, tcfg, seed,
                             teachers if (tag in _ROW_DISTILL or _ROW_GRAD.get(tag) == "ias")
                             else None)
        summary = met.summarize(rep.final_metrics, reference)
        cc = met.count_config_from_model(model_config_from_report(rep))
        total = met.param_account(cc, "mtl").mtl_total
        rows.append(_row_dict(tag, summary, (total - stl_ref_total) / stl_ref_total))
    return rows


def model_config_from_report(rep: RunReport) -> ModelConfig:
    from .model import model_config_from_dict

    return model_config_from_dict(rep.config["model"])


def _row_dict(tag: str, summary: met.MetricSummary, param_delta: float) -> dict:
    row = {"tag": tag, "params_vs_stl_pct": 100.0 * param_delta,
           "overall_mu": summary.overall_mu, "overall_delta_pct": 100.0 * summary.overall_delta}
    for task in sorted(summary.per_task_mu):
        row[f"{task}_mu"] = summary.per_task_mu[task]
        if task in summary.per_task_delta:
            row[f"{task}_delta_pct"] = 100.0 * summary.per_task_delta[task]
    return row


DIRECTIONAL_ROWS = ("mtl", "mtl_tsa_xaa", "mtd", "mtd_uniform", "mtd_round_robin")


def directional_study(model_cfg: ModelConfig, tcfg: TrainConfig, seeds=(0, 1, 2),
                      n_products: int = 864, sizes: dict | None = None) -> dict:
    """The sign-level transfer replication: per seed, train teachers, the five
    strategy rows, and report per-row average deltas vs the teacher baseline."""
    per_row = {tag: [] for tag in DIRECTIONAL_ROWS}
    teacher_floor, teacher_grammar = [], []
    for seed in seeds:
        study = build_study_data(seed, n_products=n_products, sizes=sizes)
        teachers, teacher_reports = train_teacher_bundle(model_cfg, study, tcfg, seed)
        reference = teacher_reference_metrics(teachers, study, study.test_sets)
        teacher_floor.append({t: teachers.val_refs[t] for t in teachers.val_refs})
        if "fic" in teachers.models:
            teacher_grammar.append(caption_grammar_rate(
                teachers.models["fic"], study.val_sets.records["fic"], study.catalog))
        for tag in DIRECTIONAL_ROWS:
            needs_teachers = tag in _ROW_DISTILL
            _, rep = run_mtl_row(tag, model_cfg, study, tcfg, seed,
                                 teachers if needs_teachers else None)
            summary = met.summarize(rep.final_metrics, reference)
            per_row[tag].append(summary.overall_delta)
    mean_delta = {tag: float(np.mean(vals)) for tag, vals in per_row.items()}
    return {"per_seed_delta": per_row, "mean_delta": mean_delta,
            "teacher_val": teacher_floor, "teacher_grammar": teacher_grammar}
