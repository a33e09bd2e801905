"""Training engine: sampler statistics, gradient manipulation rules,
task isolation, distillation hygiene, and resume determinism."""

import numpy as np
import pytest

from fashionmtl import data as dat
from fashionmtl import training as tr
from fashionmtl.autodiff import Tape
from fashionmtl.losses import combined_loss
from fashionmtl.model import ModelConfig, VLModel
from fashionmtl.optim import param_checksum, zero_grads
from fashionmtl.training import (GradientBuffer, SamplerConfig, TaskSampler, TrainConfig,
                                 TrainingError, ias_scale, imtlg_alpha, imtlg_merge)
from fashionmtl.transformer import TextConfig, VisionConfig


def small_cfg(**kw):
    base = dict(text=TextConfig(width=16, layers=2, heads=2, vocab_size=124, max_seq_len=20),
                vision=VisionConfig(width=16, layers=2, heads=2), bottleneck=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def study():
    return tr.build_study_data(0, n_products=200,
                               sizes={"xmr": 400, "tgir": 80, "scr": 400, "fic": 400})


class TestSampler:
    def test_size_proportional_frequencies(self):
        sizes = {"xmr": 2000, "tgir": 200, "scr": 2000, "fic": 2000}
        sampler = TaskSampler(SamplerConfig("size_proportional", sizes, 7))
        draws = [sampler.sample() for _ in range(100_000)]
        freq = draws.count("tgir") / len(draws)
        assert abs(freq - 200 / 6200) < 0.005

    def test_uniform_frequencies(self):
        sizes = {t: 10 for t in dat.TASKS}
        sampler = TaskSampler(SamplerConfig("uniform", sizes, 3))
        draws = [sampler.sample() for _ in range(100_000)]
        for t in dat.TASKS:
            assert abs(draws.count(t) / len(draws) - 0.25) < 0.005

    def test_round_robin_cycles(self):
        sampler = TaskSampler(SamplerConfig("round_robin", {t: 1 for t in dat.TASKS}, 0))
        assert [sampler.sample() for _ in range(8)] == list(dat.TASKS) * 2

    def test_empty_task_rejected(self):
        with pytest.raises(TrainingError):
            TaskSampler(SamplerConfig("uniform", {"xmr": 0, "tgir": 1, "scr": 1, "fic": 1}, 0))

    def test_unknown_strategy(self):
        with pytest.raises(TrainingError):
            TaskSampler(SamplerConfig("fancy", {t: 1 for t in dat.TASKS}, 0))


class TestIasScale:
    REFS = {t: 0.8 for t in dat.TASKS}

    def test_parity_gives_all_ones(self):
        scales = ias_scale({t: 0.8 for t in dat.TASKS}, self.REFS)
        for v in scales.values():
            assert abs(v - 1.0) < 1e-12

    def test_lagging_task_gets_largest_scale(self):
        latest = {t: 0.8 for t in dat.TASKS}
        latest["tgir"] = 0.4
        scales = ias_scale(latest, self.REFS)
        assert scales["tgir"] == max(scales.values())
        assert scales["tgir"] > scales["xmr"]

    def test_clamp_bounds_respected(self):
        latest = {"xmr": -5.0, "tgir": 0.8, "scr": 0.8, "fic": 0.8}
        raw_scales = ias_scale(latest, self.REFS)
        lo, hi = 0.25, 4.0
        mean = np.mean([np.clip((0.8 - v) / 0.8, lo, hi) for v in latest.values()])
        for t, v in raw_scales.items():
            assert lo / mean - 1e-12 <= v <= hi / mean + 1e-12

    def test_missing_reference(self):
        with pytest.raises(TrainingError):
            ias_scale({"xmr": 0.5}, {})


class TestImtlg:
    def test_symmetric_hand_case(self):
        alpha = imtlg_alpha([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert np.allclose(alpha, [0.5, 0.5])

    def test_two_by_two_hand_case(self):
        alpha = imtlg_alpha([np.array([2.0, 0.0]), np.array([0.0, 1.0])])
        assert np.allclose(alpha, [1 / 3, 2 / 3])
        g = alpha[0] * np.array([2.0, 0.0]) + alpha[1] * np.array([0.0, 1.0])
        assert np.allclose(g, [2 / 3, 2 / 3])

    def test_equal_projection_property_random(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            grads = [rng.normal(size=50) for _ in range(4)]
            alpha = imtlg_alpha(grads)
            assert abs(alpha.sum() - 1.0) < 1e-12
            g = sum(a * v for a, v in zip(alpha, grads))
            projs = [g @ (v / np.linalg.norm(v)) for v in grads]
            assert max(projs) - min(projs) < 1e-8

    def test_near_zero_gradient_rejected(self):
        with pytest.raises(TrainingError):
            imtlg_alpha([np.zeros(4), np.ones(4)])

    def test_identical_gradients_fall_back_to_equal_weights(self):
        g = np.array([1.0, 2.0])
        alpha = imtlg_alpha([g, g.copy(), g.copy(), g.copy()])
        assert abs(alpha.sum() - 1.0) < 1e-12
        combined = sum(a * v for a, v in zip(alpha, [g] * 4))
        assert np.allclose(combined, g)

    def test_buffer_refuses_partial_apply(self, study):
        model = VLModel(small_cfg(), seed=0)
        buf = GradientBuffer(dat.TASKS)
        buf.add("xmr", {n: np.zeros_like(p.data) for n, p in model.named_parameters().items()})
        assert not buf.full()
        with pytest.raises(TrainingError):
            imtlg_merge(buf, model)

    def test_identical_slots_equal_single_task_update(self, study):
        model = VLModel(small_cfg(), seed=1)
        params = model.named_parameters()
        rng = np.random.default_rng(3)
        grads = {n: rng.normal(size=p.data.shape) for n, p in params.items()}
        buf = GradientBuffer(dat.TASKS)
        for t in dat.TASKS:
            buf.add(t, {n: g.copy() for n, g in grads.items()})
        merged = imtlg_merge(buf, model)
        for name in model.shared_param_names():
            assert np.allclose(merged[name], grads[name], atol=1e-12)

    def test_buffer_cleared_after_window(self, study):
        cfg = small_cfg()
        tcfg = TrainConfig(iterations=8, val_every=100, batch_size=4,
                           warmup_frac=0.0, milestone_fracs=())
        _, _, state = tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets,
                                   tcfg, seed=3, grad_method="imtlg")
        assert state.buffer.slots == {}  # 8 iterations = 2 complete windows
        assert state.opt.step_count == 2


class TestTaskIsolation:
    def test_other_task_adapters_get_zero_gradient(self, study):
        cfg = small_cfg()
        model = VLModel(cfg, seed=5)
        params = model.named_parameters()
        zero_grads(params)
        batch = dat.make_batch("scr", study.train_sets, study.catalog,
                               np.random.default_rng(0), 6, cfg.text.max_seq_len)
        with Tape() as tape:
            loss = combined_loss("scr", batch, model)
            tape.backward(loss.total)
        for name, p in params.items():
            owner = model.task_of_param(name)
            if owner is not None and owner != "scr":
                assert p.grad is None, name
        some_scr = [n for n in params if n.startswith("tsa.scr.")]
        assert any(params[n].grad is not None for n in some_scr)

    def test_xaa_gets_gradient_in_fusion_but_not_contrastive(self, study):
        cfg = small_cfg()
        model = VLModel(cfg, seed=6)
        params = model.named_parameters()
        rng = np.random.default_rng(1)

        zero_grads(params)
        batch = dat.make_batch("xmr", study.train_sets, study.catalog, rng, 6,
                               cfg.text.max_seq_len)
        with Tape() as tape:
            tape.backward(combined_loss("xmr", batch, model).total)
        assert all(params[n].grad is None for n in params if n.startswith("xaa."))

        zero_grads(params)
        batch = dat.make_batch("scr", study.train_sets, study.catalog, rng, 6,
                               cfg.text.max_seq_len)
        with Tape() as tape:
            tape.backward(combined_loss("scr", batch, model).total)
        touched = [n for n in params if n.startswith("xaa.") and params[n].grad is not None
                   and np.any(params[n].grad)]
        assert touched


class TestTeacherTraining:
    def test_xmr_teacher_improves_and_freezes(self, study):
        cfg = small_cfg()
        tcfg = TrainConfig(val_every=50, batch_size=8)
        model, report = tr.train_teacher("xmr", cfg, study.catalog, study.train_sets,
                                         study.val_sets, tcfg, seed=0, iterations=300)
        curve = report.val_curves["xmr"]
        assert curve[0][0] == 0
        assert report.extras["best_val"] > curve[0][1]
        assert model.frozen
        with pytest.raises(Exception):
            model.assert_trainable()

    def test_same_seed_same_checksum(self, study):
        cfg = small_cfg()
        tcfg = TrainConfig(val_every=25, batch_size=6)
        sums = []
        for _ in range(2):
            model, _ = tr.train_teacher("scr", cfg, study.catalog, study.train_sets,
                                        study.val_sets, tcfg, seed=9, iterations=40)
            sums.append(param_checksum(model.named_parameters()))
        assert sums[0] == sums[1]


class TestMtlTraining:
    def test_distillation_keeps_teachers_untouched(self, study):
        cfg = small_cfg()
        tcfg = TrainConfig(iterations=30, val_every=15, batch_size=6,
                           teacher_iterations={t: 20 for t in dat.TASKS})
        teachers, _ = tr.train_teacher_bundle(cfg, study, tcfg, seed=1)
        before = teachers.checksums()
        _, report, _ = tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets,
                                    tcfg, seed=1, distill=True, teachers=teachers)
        assert teachers.checksums() == before
        assert any(rec[3] > 0 for rec in report.loss_records)  # distill term active

    def test_missing_teachers_rejected(self, study):
        cfg = small_cfg()
        tcfg = TrainConfig(iterations=5)
        with pytest.raises(TrainingError):
            tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets, tcfg,
                         seed=0, distill=True)
        with pytest.raises(TrainingError):
            tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets, tcfg,
                         seed=0, grad_method="ias")

    def test_stop_and_resume_bit_identical(self, study):
        cfg = small_cfg()
        tcfg = TrainConfig(iterations=40, val_every=20, batch_size=6)

        model_full, _, _ = tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets,
                                        tcfg, seed=4)
        _, _, state = tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets,
                                   tcfg, seed=4, stop_at=17)
        model_res, _, _ = tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets,
                                       tcfg, seed=4, resume=state)
        assert (param_checksum(model_full.named_parameters())
                == param_checksum(model_res.named_parameters()))

    def test_report_reproducibility(self, study):
        cfg = small_cfg()
        tcfg = TrainConfig(iterations=25, val_every=25, batch_size=6)
        outs = []
        for _ in range(2):
            model, report, _ = tr.train_mtl(cfg, study.catalog, study.train_sets,
                                            study.val_sets, tcfg, seed=8)
            report.final_metrics = tr.final_metrics(model, study.test_sets, study.catalog)
            outs.append(report.to_canonical_json())
        assert outs[0] == outs[1]

    def test_vanilla_architecture_skips_captioning(self, study):
        cfg = small_cfg(use_tsa=False, use_xaa=False)
        tcfg = TrainConfig(iterations=9, val_every=9, batch_size=6)
        model, report, _ = tr.train_mtl(cfg, study.catalog, study.train_sets, study.val_sets,
                                        tcfg, seed=2)
        assert set(report.val_curves) == {"xmr", "tgir", "scr"}
        assert {rec[1] for rec in report.loss_records} <= {"xmr", "tgir", "scr"}


class TestTgirSmoke:
    def test_identity_query_ranks_own_image_after_short_training(self, study):
        # an empty-delta modifier plus the reference image should score the
        # reference's own target embedding above a random other image
        cfg = small_cfg()
        tcfg = TrainConfig(val_every=100, batch_size=8)
        model, _ = tr.train_teacher("tgir", cfg, study.catalog, study.train_sets,
                                    study.val_sets, tcfg, seed=0, iterations=200)
        val_products = study.catalog.products_in("val")
        ref, other = val_products[0], val_products[1]
        empty_mod = np.asarray([[1, 2]])  # SOS EOS: no modification
        query = model.encode_fusion(study.catalog.images([ref.pid]), empty_mod,
                                    "tgir", normalize=True).data
        targets = model.encode_contrastive(
            "tgir", images=study.catalog.images([ref.pid, other.pid])).data
        sims = (query @ targets.T)[0]
        assert sims[0] > sims[1]


class TestAblationStructure:
    def test_group_row_counts(self):
        assert len(tr.ABLATION_GROUPS["I"]) == 4
        assert len(tr.ABLATION_GROUPS["II"]) == 4
        assert len(tr.ABLATION_GROUPS["III"]) == 7
        assert len(tr.ABLATION_GROUPS["IV"]) == 3

    def test_group_iv_sweeps_toy_bottlenecks(self):
        assert tr.ABLATION_GROUPS["IV"] == ("mtd_bottleneck8", "mtd_bottleneck16",
                                            "mtd_bottleneck32")

    def test_unknown_group(self, study):
        with pytest.raises(TrainingError):
            tr.run_ablation("V", small_cfg(), study, TrainConfig(iterations=1), 0)
