"""Objective functions: frozen hand values, identities, gradient flow."""

import numpy as np
import pytest

import zscr.autodiff as ad
from zscr.autodiff import Tape, backward, grad_check, tensor
from zscr.losses import (
    LossBatch,
    clip_weights,
    discriminator_loss,
    generator_loss,
    margin_regularizer,
    triplet_loss,
)
from zscr.model import Dims, init_params

TOY = Dims(d_t=3, d_i=4, d_c=3, d_z=2, g_hidden1=5, g_hidden2=5, disc_hidden=4)


def toy_model(seed=0, bias_lift=True):
    m = init_params(TOY, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for name in m.names():
        arr = rng.normal(0.0, 0.5, size=m.tensors[name].shape).astype(np.float32)
        if bias_lift and name.split(".")[-1].startswith("b"):
            arr = np.abs(arr) * 0.5 + 0.1
        m.tensors[name] = tensor(arr)
    return m


def toy_batch(seed=0, b=3):
    rng = np.random.default_rng(seed)
    return LossBatch(
        i_r=tensor(np.abs(rng.normal(size=(b, TOY.d_i))).astype(np.float32)),
        phi_tr=tensor(rng.normal(size=(b, TOY.d_t)).astype(np.float32)),
        i_w=tensor(np.abs(rng.normal(size=(b, TOY.d_i))).astype(np.float32)),
        phi_tw=tensor(rng.normal(size=(b, TOY.d_t)).astype(np.float32)),
    )


def softplus(x):
    return np.log1p(np.exp(-abs(x))) + max(x, 0.0)


class TestTripletLoss:
    def _loss_for_scores(self, v_p, v_n):
        """Triplet loss on vectors constructed to realize given cosine scores."""
        # pivot along e1; positive/negative rotated in the e1-e2 plane
        m = toy_model()
        m.tensors["csem.w"] = tensor(np.eye(TOY.d_i, TOY.d_c, dtype=np.float32))
        m.tensors["csem.b"] = tensor(np.zeros(TOY.d_c, np.float32))
        pivot = np.zeros((1, TOY.d_c), np.float32)
        pivot[0, 0] = 1.0

        def vec(cos_val):
            v = np.zeros((1, TOY.d_i), np.float32)
            v[0, 0] = cos_val
            v[0, 1] = np.sqrt(max(0.0, 1.0 - cos_val * cos_val))
            return v

        loss, bd = triplet_loss(m, tensor(vec(v_p)), tensor(vec(v_n)), tensor(pivot))
        return loss.item(), bd

    def test_equal_scores_give_log2(self):
        loss, bd = self._loss_for_scores(0.4, 0.4)
        assert loss == pytest.approx(np.log(2.0), abs=1e-6)
        assert bd.v_p == pytest.approx(0.4, abs=1e-6)
        assert bd.v_n == pytest.approx(0.4, abs=1e-6)

    def test_hand_value(self):
        loss, _ = self._loss_for_scores(0.9, 0.1)
        assert loss == pytest.approx(softplus(0.1 - 0.9), abs=1e-6)
        assert loss == pytest.approx(0.3711, abs=1e-4)

    def test_saturation_decreases_monotonically(self):
        gaps = [self._loss_for_scores(v_p, 0.0)[0] for v_p in (0.2, 0.5, 0.8, 0.99)]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < np.log(2.0)

    def test_strictly_monotone_in_scores(self):
        base, _ = self._loss_for_scores(0.6, 0.3)
        up_p, _ = self._loss_for_scores(0.65, 0.3)
        up_n, _ = self._loss_for_scores(0.6, 0.35)
        assert up_p < base < up_n

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            v_p, v_n = rng.uniform(-1, 1, 2)
            loss, _ = self._loss_for_scores(v_p, v_n)
            assert loss >= 0.0

    def test_gradients_reach_csem_only(self):
        m = toy_model()
        batch = toy_batch()
        tape = Tape()
        watched = m.watched(tape, "csem")
        loss, _ = triplet_loss(m, batch.i_r, batch.i_w, tensor(np.random.default_rng(2).normal(size=(3, TOY.d_c)).astype(np.float32)), watched)
        backward(loss)
        g = tape.grad(watched["csem.w"]).data
        assert np.abs(g).max() > 0

    def test_gradcheck(self):
        m = toy_model()
        batch = toy_batch()
        pivot = tensor(np.random.default_rng(3).normal(size=(3, TOY.d_c)).astype(np.float32))

        def f(ps):
            t = dict(m.tensors)
            t.update(zip(m.names("csem"), ps))
            loss, _ = triplet_loss(m, batch.i_r, batch.i_w, pivot, t)
            return loss

        assert grad_check(f, [m.tensors[n] for n in m.names("csem")]) < 1e-2


class TestMarginRegularizer:
    def test_hand_value(self):
        # d_p = 1, |i_w - i|_1 = 3, lambda = 2 -> reg = 1 - (3 - 2) = 0
        i = tensor([[0.0, 0.0]])
        i_r = tensor([[1.0, 0.0]])
        i_w = tensor([[1.5, 1.5]])
        reg, d_p, d_n = margin_regularizer(i, i_r, i_w, 2.0)
        assert d_p == pytest.approx(1.0)
        assert d_n == pytest.approx(1.0)
        assert reg.item() == pytest.approx(0.0, abs=1e-6)

    def test_exactly_at_margin(self):
        i = tensor([[0.5, 0.5]])
        i_w = tensor([[1.5, 1.5]])  # |i_w - i|_1 = 2 = lambda
        reg, _, _ = margin_regularizer(i, i, i_w, 2.0)
        assert reg.item() == pytest.approx(0.0, abs=1e-6)

    def test_collapse_onto_wrong_is_penalized(self):
        i_w = tensor([[1.0, 2.0]])
        i_r = tensor([[0.0, 0.0]])
        reg, _, _ = margin_regularizer(i_w, i_r, i_w, 2.0)
        assert reg.item() == pytest.approx(3.0 + 2.0, rel=1e-6)
        assert reg.item() > 0

    def test_identity_on_random_inputs(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            d = int(rng.integers(2, 8))
            i = rng.normal(size=d).astype(np.float32)
            i_r = rng.normal(size=d).astype(np.float32)
            i_w = rng.normal(size=d).astype(np.float32)
            lam = float(rng.uniform(0, 3))
            reg, _, _ = margin_regularizer(tensor(i), tensor(i_r), tensor(i_w), lam)
            want = np.abs(i_r - i).sum(dtype=np.float64) - np.abs(i_w - i).sum(dtype=np.float64) + lam
            assert reg.item() == pytest.approx(want, abs=1e-6 * max(1.0, abs(want)))

    def test_without_wrong_term(self):
        i = tensor([[0.0, 0.0]])
        i_r = tensor([[1.0, 2.0]])
        reg, d_p, d_n = margin_regularizer(i, i_r, None, 2.0)
        assert reg.item() == pytest.approx(3.0, rel=1e-6)
        assert d_n == 0.0

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        i_r = tensor(rng.normal(size=(2, 4)).astype(np.float32))
        i_w = tensor(rng.normal(size=(2, 4)).astype(np.float32))

        def f(ps):
            reg, _, _ = margin_regularizer(ps[0], i_r, i_w, 2.0)
            return reg

        assert grad_check(f, [tensor(rng.normal(size=(2, 4)).astype(np.float32))]) < 1e-2


class TestDiscriminatorLoss:
    def test_hand_example(self):
        """Single sample with critic scores 0.2 (fake), 0.4 (wrong), 1.0 (real)."""
        m = toy_model()
        scores = {"fake": 0.2, "wrong": 0.4, "real": 1.0}
        calls = []

        class Spy:
            def __init__(self, model):
                self.model = model

            def __getattr__(self, name):
                return getattr(self.model, name)

            def discriminate(self, img, phi, tensors=None):
                val = [scores["fake"], scores["real"], scores["wrong"]][len(calls)]
                calls.append(val)
                return tensor(np.full(1, val, np.float32))

        batch = toy_batch(b=1)
        loss, bd = discriminator_loss(Spy(m), batch, np.random.default_rng(0))
        assert loss.item() == pytest.approx(-0.7, abs=1e-6)
        assert bd.l_d == pytest.approx(-0.7, abs=1e-6)

    def test_constant_critic_gives_zero(self):
        m = toy_model()
        for name in m.names("disc"):
            m.tensors[name] = tensor(np.zeros(m.tensors[name].shape, np.float32))
        batch = toy_batch()
        loss, _ = discriminator_loss(m, batch, np.random.default_rng(0))
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_real_score_dominates_direction(self):
        """Raising D(real) with other scores fixed lowers the loss."""
        m = toy_model()
        batch = toy_batch()
        base, _ = discriminator_loss(m, batch, np.random.default_rng(3))
        # shift the output bias: raises every score equally; fake+wrong and
        # 2x real cancel, so the loss is invariant -> check the real path
        # directly instead via the formula
        s_f, s_w, s_r = 0.2, 0.4, 1.0
        val = 0.5 * (s_f - s_r) + 0.5 * (s_w - s_r)
        assert val == pytest.approx(-0.7)
        assert 0.5 * (s_f - (s_r + 10)) + 0.5 * (s_w - (s_r + 10)) < val

    def test_no_wrong_class_reduces_to_plain_form(self):
        m = toy_model()
        batch = toy_batch(seed=9, b=2)

        smuggled = {}

        class Spy:
            def __getattr__(self, name):
                return getattr(m, name)

            def discriminate(self, img, phi, tensors=None):
                out = m.discriminate(img, phi, tensors)
                smuggled.setdefault("scores", []).append(out.data.mean())
                return out

        loss, _ = discriminator_loss(Spy(), batch, np.random.default_rng(5), no_wrong_class=True)
        s_fake, s_real = smuggled["scores"][0], smuggled["scores"][1]
        assert len(smuggled["scores"]) == 2  # wrong-class pass skipped
        assert loss.item() == pytest.approx(s_fake - s_real, abs=1e-6)

    def test_gradcheck(self):
        m = toy_model()
        batch = toy_batch(seed=11, b=2)
        draws = {}

        class Frozen:
            def __init__(self):
                self.i = 0

            def standard_normal(self, shape=None):
                key = self.i
                if key not in draws:
                    draws[key] = np.random.default_rng(50 + key).standard_normal(shape)
                self.i += 1
                return draws[key]

        def f(ps):
            t = dict(m.tensors)
            t.update(zip(m.names("disc"), ps))
            loss, _ = discriminator_loss(m, batch, Frozen(), t)
            return loss

        assert grad_check(f, [m.tensors[n] for n in m.names("disc")]) < 1e-2


class TestGeneratorLoss:
    def test_regularizers_off_is_pure_adversarial(self):
        m = toy_model()
        batch = toy_batch(seed=13, b=2)
        rng = np.random.default_rng(17)
        loss, bd = generator_loss(m, batch, rng, alpha=0.5, beta=2.0, lam=2.0, no_reg=True)
        # reg dropped: total = adv + alpha*(div_r + div_w)
        assert bd.reg == 0.0
        assert bd.l_g_total == pytest.approx(bd.l_g_adv + 0.5 * (bd.div_r + bd.div_w), abs=1e-5)

    def test_hand_value_with_spied_parts(self):
        """D(fake) = 0.2 and zero divergences/reg give total -0.2."""
        m = toy_model()
        for name in m.names("te"):
            m.tensors[name] = tensor(np.zeros(m.tensors[name].shape, np.float32))

        class Spy:
            def __getattr__(self, name):
                return getattr(m, name)

            def discriminate(self, img, phi, tensors=None):
                return tensor(np.full(img.shape[0], 0.2, np.float32))

        batch = toy_batch(seed=19, b=2)
        loss, bd = generator_loss(Spy(), batch, np.random.default_rng(23), 0.5, 2.0, 2.0, no_reg=True)
        # zero TEweights -> mu=0, sigma=1 -> KL terms are exactly 0
        assert bd.div_r == 0.0 and bd.div_w == 0.0
        assert loss.item() == pytest.approx(-0.2, abs=1e-6)

    def test_composition_identity(self):
        m = toy_model()
        for seed in range(5):
            batch = toy_batch(seed=seed, b=3)
            alpha, beta, lam = 0.5, 2.0, 2.0
            loss, bd = generator_loss(m, batch, np.random.default_rng(seed), alpha, beta, lam)
            want = bd.l_g_adv + alpha * (bd.div_r + bd.div_w) + beta * bd.reg
            assert bd.l_g_total == pytest.approx(want, abs=1e-5)
            assert loss.item() == pytest.approx(want, abs=1e-5)

    def test_no_wrong_class_drops_wrong_terms(self):
        m = toy_model()
        batch = toy_batch(seed=3, b=2)
        loss, bd = generator_loss(m, batch, np.random.default_rng(29), 0.5, 2.0, 2.0, no_wrong_class=True)
        assert bd.div_w == 0.0
        assert bd.d_n == 0.0  # margin reduces to the pull term

    def test_gradients_reach_generator_and_encoder(self):
        m = toy_model()
        batch = toy_batch(seed=5, b=2)
        tape = Tape()
        watched = m.watched(tape, "gen", "te")
        loss, _ = generator_loss(m, batch, np.random.default_rng(31), 0.5, 2.0, 2.0, watched)
        backward(loss)
        for name in ("gen.w1", "gen.w3", "te.w"):
            assert np.abs(tape.grad(watched[name]).data).max() > 0

    def test_joint_mode_adds_triplet_and_reaches_csem(self):
        # wider common space: a 3-unit ReLU layer can legitimately zero out
        dims = Dims(d_t=3, d_i=4, d_c=8, d_z=2, g_hidden1=5, g_hidden2=5, disc_hidden=4)
        m = init_params(dims, np.random.default_rng(0))
        rng = np.random.default_rng(100)
        for name in m.names():
            m.tensors[name] = tensor(rng.normal(0.0, 0.5, size=m.tensors[name].shape).astype(np.float32))
        batch = toy_batch(seed=6, b=2)
        tape = Tape()
        watched = m.watched(tape, "gen", "te", "csem")
        loss, bd = generator_loss(
            m, batch, np.random.default_rng(37), 0.5, 2.0, 2.0, watched, with_triplet=True
        )
        backward(loss)
        assert bd.l_t > 0
        assert np.abs(tape.grad(watched["csem.w"]).data).max() > 0
        assert loss.item() == pytest.approx(
            bd.l_g_adv + 0.5 * (bd.div_r + bd.div_w) + 2.0 * bd.reg + bd.l_t, abs=1e-5
        )


class TestClipWeights:
    def test_clip_bound(self):
        m = toy_model()
        clip_weights(m, 0.01)
        for name in m.names("disc"):
            assert np.abs(m.tensors[name].data).max() <= 0.01

    def test_hand_value(self):
        m = toy_model()
        m.tensors["disc.w1"] = tensor(np.full(m.tensors["disc.w1"].shape, 0.5, np.float32))
        clip_weights(m, 0.01)
        np.testing.assert_array_equal(
            m.tensors["disc.w1"].data, np.full(m.tensors["disc.w1"].shape, 0.01, np.float32)
        )

    def test_idempotent_and_no_op_within_bound(self):
        m = toy_model()
        small = {n: (np.random.default_rng(1).uniform(-0.01, 0.01, m.tensors[n].shape)).astype(np.float32) for n in m.names("disc")}
        for n, arr in small.items():
            m.tensors[n] = tensor(arr)
        clip_weights(m, 0.01)
        for n, arr in small.items():
            np.testing.assert_array_equal(m.tensors[n].data, arr)
        before = {n: m.tensors[n].data.copy() for n in m.names("disc")}
        clip_weights(m, 0.01)
        for n in m.names("disc"):
            np.testing.assert_array_equal(m.tensors[n].data, before[n])

    def test_other_blocks_untouched(self):
        m = toy_model()
        before = {n: m.tensors[n].data.copy() for n in m.names("gen", "te", "csem")}
        clip_weights(m, 0.01)
        for n, arr in before.items():
            np.testing.assert_array_equal(m.tensors[n].data, arr)
