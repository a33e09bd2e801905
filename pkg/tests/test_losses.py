"""Task and distillation objectives: hand values, invariances, gradient checks."""

import numpy as np
import pytest

from fashionmtl import autodiff as ad
from fashionmtl import losses as ls
from fashionmtl.autodiff import ShapeError, Tape, Tensor, grad_check, param


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestInfoNce:
    def test_saturated_diagonal_is_zero(self):
        loss = ls.info_nce(Tensor(100.0 * np.eye(2)), 1.0)
        assert float(loss.data) < 1e-40

    def test_identity_hand_value(self):
        # rows [1,0]: -log(e / (e + 1)) = log(1 + e^-1)
        loss = ls.info_nce(Tensor(np.eye(2)), 1.0)
        assert abs(float(loss.data) - 0.3132616875182229) < 1e-12

    def test_permutation_invariance(self):
        s = rnd(5, 5, seed=1)
        perm = [3, 0, 4, 1, 2]
        a = float(ls.info_nce(Tensor(s), 0.5).data)
        b = float(ls.info_nce(Tensor(s[np.ix_(perm, perm)]), 0.5).data)
        assert abs(a - b) < 1e-12

    def test_bad_temperature(self):
        with pytest.raises(ls.LossError):
            ls.info_nce(Tensor(np.eye(2)), 0.0)

    def test_nonsquare_rejected(self):
        with pytest.raises(ShapeError):
            ls.info_nce(Tensor(np.zeros((2, 3))), 1.0)


class TestXmrLoss:
    def test_symmetric_matrix_equals_one_direction(self):
        e = rnd(4, 3, seed=2)
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        loss = ls.xmr_loss(Tensor(e), Tensor(e.copy()), 0.3)
        one = ls.info_nce(Tensor(e @ e.T), 0.3)
        assert abs(float(loss.data) - float(one.data)) < 1e-12

    def test_role_swap_invariance(self):
        a, b = rnd(4, 3, seed=3), rnd(4, 3, seed=4)
        assert abs(float(ls.xmr_loss(Tensor(a), Tensor(b), 0.5).data)
                   - float(ls.xmr_loss(Tensor(b), Tensor(a), 0.5).data)) < 1e-12

    def test_temperature_gradient_matches_fd(self):
        a, b = rnd(4, 3, seed=5), rnd(4, 3, seed=6)

        def f(tau):
            return ls.xmr_loss(Tensor(a), Tensor(b), tau)

        assert grad_check(f, Tensor(np.asarray(0.4)), h=1e-6) < 1e-5

    def test_degenerate_batch(self):
        with pytest.raises(ls.LossError):
            ls.xmr_loss(Tensor(rnd(1, 3)), Tensor(rnd(1, 3)), 1.0)


class TestScrLoss:
    def test_uniform_logits_log_c(self):
        loss = ls.scr_loss(Tensor(np.zeros((3, 12))), [0, 5, 11])
        assert abs(float(loss.data) - np.log(12)) < 1e-12

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 2] = 100.0
        assert float(ls.scr_loss(Tensor(logits), [1, 2]).data) < 1e-12

    def test_shift_invariance(self):
        logits = rnd(3, 6, seed=7)
        a = float(ls.scr_loss(Tensor(logits), [1, 0, 5]).data)
        b = float(ls.scr_loss(Tensor(logits + 3.0), [1, 0, 5]).data)
        assert abs(a - b) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(ls.LossError):
            ls.scr_loss(Tensor(np.zeros((1, 4))), [4])


class TestTgirLoss:
    def test_equals_info_nce_exactly(self):
        q, t = rnd(4, 3, seed=8), rnd(4, 3, seed=9)
        a = float(ls.tgir_loss(Tensor(q), Tensor(t), 0.7).data)
        b = float(ls.info_nce(Tensor(q @ t.T), 0.7).data)
        assert a == b

    def test_dominant_diagonal_near_zero(self):
        s = 50.0 * np.eye(3) + rnd(3, 3, seed=10)
        assert float(ls.info_nce(Tensor(s), 1.0).data) < 1e-15


class TestFicLoss:
    def test_uniform_logits_log_v(self):
        logits = Tensor(np.zeros((2, 3, 120)))
        targets = np.array([[4, 5, 2], [6, 2, 0]])
        mask = (targets != 0).astype(float)
        loss = ls.fic_loss(logits, targets, mask)
        assert abs(float(loss.data) - np.log(120)) < 1e-12

    def test_perfect_logits_near_zero(self):
        targets = np.array([[4, 5, 2]])
        logits = np.zeros((1, 3, 10))
        for i, t in enumerate(targets[0]):
            logits[0, i, t] = 200.0
        loss = ls.fic_loss(Tensor(logits), targets, np.ones((1, 3)))
        assert float(loss.data) < 1e-12

    def test_padding_does_not_change_loss(self):
        logits = rnd(1, 3, 8, seed=11)
        targets = np.array([[4, 5, 2]])
        padded_logits = np.concatenate([logits, rnd(1, 2, 8, seed=12)], axis=1)
        padded_targets = np.array([[4, 5, 2, 0, 0]])
        a = float(ls.fic_loss(Tensor(logits), targets, np.ones((1, 3))).data)
        b = float(ls.fic_loss(Tensor(padded_logits), padded_targets,
                              np.array([[1.0, 1, 1, 0, 0]])).data)
        assert abs(a - b) < 1e-10

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ls.fic_loss(Tensor(np.zeros((1, 3, 8))), np.zeros((1, 4), dtype=int),
                        np.ones((1, 4)))


class TestKlRows:
    def test_identical_is_zero(self):
        x = rnd(4, 6, seed=13)
        assert abs(float(ls.kl_rows(Tensor(x), x.copy()).data)) < 1e-12

    def test_nonnegative(self):
        for seed in range(5):
            s, t = rnd(3, 5, seed=seed), rnd(3, 5, seed=seed + 50)
            assert float(ls.kl_rows(Tensor(s), t).data) >= 0.0

    def test_hand_value(self):
        # teacher p = (0.75, 0.25), student uniform
        teacher = np.log(np.array([[0.75, 0.25]]))
        student = Tensor(np.zeros((1, 2)))
        kl = float(ls.kl_rows(student, teacher).data)
        assert abs(kl - 0.13081203594113697) < 1e-10

    def test_teacher_receives_no_gradient(self):
        with Tape() as tape:
            student = param(rnd(3, 4, seed=14))
            teacher = param(rnd(3, 4, seed=15))
            tape.backward(ls.kl_rows(student, teacher))
        assert student.grad is not None
        assert teacher.grad is None


class TestDistillation:
    def test_xmr_zero_when_student_equals_teacher(self):
        s = rnd(4, 4, seed=16)
        loss = ls.distill_xmr(Tensor(s), 0.2, s.copy(), 0.2)
        assert abs(float(loss.data)) < 1e-12

    def test_xmr_transpose_symmetry(self):
        s, t = rnd(4, 4, seed=17), rnd(4, 4, seed=18)
        a = float(ls.distill_xmr(Tensor(s), 0.5, t, 0.5).data)
        b = float(ls.distill_xmr(Tensor(s.T), 0.5, t.T, 0.5).data)
        assert abs(a - b) < 1e-12

    def test_tgir_rows_only_hand_case(self):
        s, t = rnd(2, 2, seed=19), rnd(2, 2, seed=20)
        via_rows = float(ls.kl_rows(ad.div(Tensor(s), Tensor(0.3)), t / 0.4).data)
        assert abs(float(ls.distill_tgir(Tensor(s), 0.3, t, 0.4).data) - via_rows) < 1e-12

    def test_scr_two_class_hand_case(self):
        student = Tensor(np.zeros((1, 2)))
        teacher = np.log(np.array([[0.75, 0.25]]))
        assert abs(float(ls.distill_scr(student, teacher).data)
                   - 0.13081203594113697) < 1e-10

    def test_fic_masks_pad_positions(self):
        s = rnd(1, 4, 6, seed=21)
        t = rnd(1, 4, 6, seed=22)
        mask = np.array([[1.0, 1.0, 0.0, 0.0]])
        a = float(ls.distill_fic(Tensor(s), t, mask).data)
        b = float(ls.distill_fic(Tensor(s[:, :2]), t[:, :2], mask[:, :2]).data)
        assert abs(a - b) < 1e-12

    def test_all_distill_terms_nonnegative(self):
        for seed in range(4):
            s, t = rnd(3, 3, seed=seed), rnd(3, 3, seed=seed + 30)
            assert float(ls.distill_xmr(Tensor(s), 0.3, t, 0.3).data) >= 0
            assert float(ls.distill_tgir(Tensor(s), 0.3, t, 0.3).data) >= 0
            sl, tl = rnd(3, 7, seed=seed), rnd(3, 7, seed=seed + 60)
            assert float(ls.distill_scr(Tensor(sl), tl).data) >= 0

    def test_gradient_checks(self):
        t = rnd(3, 3, seed=23)
        assert grad_check(lambda s: ls.distill_xmr(s, 0.5, t, 0.5),
                          Tensor(rnd(3, 3, seed=24)), h=1e-6) < 1e-5
        tl = rnd(2, 3, 5, seed=25)
        mask = np.ones((2, 3))
        assert grad_check(lambda s: ls.distill_fic(s, tl, mask),
                          Tensor(rnd(2, 3, 5, seed=26)), h=1e-6) < 1e-5


class TestCombinedLoss:
    def _setup(self):
        from fashionmtl import data as dat
        from fashionmtl import training as tr
        from fashionmtl.model import ModelConfig, VLModel

        cfg = ModelConfig()
        study = tr.build_study_data(5, n_products=80)
        model = VLModel(cfg, seed=1)
        teacher = VLModel(cfg, seed=2).freeze()
        return cfg, study, model, teacher, dat

    def test_distill_off_equals_task_loss(self):
        cfg, study, model, teacher, dat = self._setup()
        rng = np.random.default_rng(0)
        batch = dat.make_batch("scr", study.train_sets, study.catalog, rng, 6,
                               cfg.text.max_seq_len)
        plain = ls.combined_loss("scr", batch, model)
        assert plain.distill_loss == 0.0
        assert float(plain.total.data) == plain.task_loss

    def test_student_equals_teacher_gives_zero_distill(self):
        cfg, study, model, teacher, dat = self._setup()
        twin = ls  # alias to keep line budget
        from fashionmtl.model import VLModel
        from fashionmtl.training import TeacherBundle

        same = VLModel(cfg, seed=1)  # identical init to the student
        same.freeze()
        rng = np.random.default_rng(1)
        for task in ("xmr", "scr", "fic", "tgir"):
            batch = dat.make_batch(task, study.train_sets, study.catalog, rng, 6,
                                   cfg.text.max_seq_len)
            out = twin.combined_loss(task, batch, model, teacher=same, distill=True)
            assert abs(out.distill_loss) < 1e-10, task

    def test_missing_teacher_raises(self):
        cfg, study, model, teacher, dat = self._setup()
        rng = np.random.default_rng(2)
        batch = dat.make_batch("xmr", study.train_sets, study.catalog, rng, 6,
                               cfg.text.max_seq_len)
        with pytest.raises(ls.LossError):
            ls.combined_loss("xmr", batch, model, teacher=None, distill=True)

    def test_components_finite_and_nonnegative_fuzz(self):
        cfg, study, model, teacher, dat = self._setup()
        rng = np.random.default_rng(3)
        for i in range(12):
            task = ("xmr", "tgir", "scr", "fic")[i % 4]
            batch = dat.make_batch(task, study.train_sets, study.catalog, rng, 5,
                                   cfg.text.max_seq_len)
            out = ls.combined_loss(task, batch, model, teacher=teacher, distill=True)
            assert np.isfinite(out.task_loss) and out.task_loss >= 0
            assert np.isfinite(out.distill_loss) and out.distill_loss >= 0
