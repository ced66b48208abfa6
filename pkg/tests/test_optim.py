import numpy as np
import pytest

from relpe.optim import (HALF_MAX, AdamOptimizer, LambOptimizer, LrSchedule,
                         NonFiniteGradientError, PrecisionPolicy,
                         adam_step, default_exclusion, lamb_step, lr_at_step,
                         make_optimizer, round_half, training_step)
from relpe.tensor import Tensor


class TestRoundHalf:
    def test_matches_float16_cast_on_random_values(self):
        rng = np.random.default_rng(0)
        for scale in (1e-6, 1e-3, 1.0, 1e2, 6e4):
            x = rng.normal(0.0, scale, 2000)
            got = round_half(x)
            with np.errstate(over="ignore"):
                expected = np.float16(x).astype(np.float64)
            np.testing.assert_array_equal(got, expected)

    def test_matches_float16_cast_on_subnormals(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1.0, 1.0, 2000) * 2.0 ** -14
        np.testing.assert_array_equal(round_half(x),
                                      np.float16(x).astype(np.float64))

    def test_tie_to_even(self):
        # ulp is 2 in [2048, 4096): 2049 ties down to 2048, 2051 ties up to 2052
        assert round_half(2049.0) == 2048.0
        assert round_half(2051.0) == 2052.0

    def test_overflow_to_infinity(self):
        assert round_half(65520.0) == np.inf
        assert round_half(-65520.0) == -np.inf
        assert round_half(HALF_MAX) == HALF_MAX
        assert round_half(1e300) == np.inf

    def test_nan_and_infinity_pass_through(self):
        assert np.isnan(round_half(np.nan))
        assert round_half(np.inf) == np.inf
        assert round_half(-np.inf) == -np.inf

    def test_signed_zero_and_tiny_values(self):
        assert round_half(0.0) == 0.0
        assert np.signbit(round_half(-0.0))
        assert round_half(2.0 ** -25) == 0.0          # half of smallest subnormal
        assert round_half(1.5 * 2.0 ** -25) == 2.0 ** -24

    def test_idempotent(self):
        x = np.random.default_rng(2).normal(0.0, 10.0, 500)
        once = round_half(x)
        np.testing.assert_array_equal(round_half(once), once)

    def test_scalar_in_scalar_out(self):
        out = round_half(1.0001)
        assert isinstance(out, float)
        assert out == np.float64(np.float16(1.0001))


class TestExclusionList:
    @pytest.mark.parametrize("name", ["embed.ln.gamma", "layer0.ln2.beta",
                                      "mlm.output_bias", "layer1.ffn.b1",
                                      "layer0.attn.bo", "pooler.b"])
    def test_excluded(self, name):
        assert default_exclusion(name)

    @pytest.mark.parametrize("name", ["embed.token", "layer0.attn.wq",
                                      "relpos.bank_k", "relpos.bank_v",
                                      "mlm.dense.w", "abspos.table"])
    def test_included(self, name):
        assert not default_exclusion(name)


class TestLrSchedule:
    def test_validation(self):
        with pytest.raises(ValueError):
            LrSchedule(kind="cosine")
        with pytest.raises(ValueError):
            LrSchedule(warmup_steps=0, total_steps=10)
        with pytest.raises(ValueError):
            LrSchedule(warmup_steps=10, total_steps=10)

    def test_linear_warmup(self):
        s = LrSchedule(lr_max=2.0, warmup_steps=10, total_steps=100)
        assert lr_at_step(s, 0) == 0.0
        assert lr_at_step(s, 5) == pytest.approx(1.0)
        assert lr_at_step(s, 10) == pytest.approx(2.0)

    def test_linear_decay(self):
        s = LrSchedule(lr_max=2.0, warmup_steps=10, total_steps=100)
        assert lr_at_step(s, 55) == pytest.approx(1.0)
        assert lr_at_step(s, 100) == 0.0
        assert lr_at_step(s, 101) == 0.0

    def test_poly_decay(self):
        s = LrSchedule(kind="linear_warmup_poly_decay", lr_max=1.0,
                       warmup_steps=10, total_steps=110, poly_power=2.0)
        assert lr_at_step(s, 60) == pytest.approx(0.25)

    def test_poly_power_one_equals_linear(self):
        lin = LrSchedule(lr_max=1.0, warmup_steps=10, total_steps=100)
        poly = LrSchedule(kind="linear_warmup_poly_decay", lr_max=1.0,
                          warmup_steps=10, total_steps=100, poly_power=1.0)
        for t in range(0, 105, 7):
            assert lr_at_step(lin, t) == pytest.approx(lr_at_step(poly, t))

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at_step(LrSchedule(), -1)


def reference_moment_updates(grads, beta1, beta2, eps):
    """Brute-force Adam moment recursion for one parameter over many steps."""
    m = np.zeros_like(grads[0])
    v = np.zeros_like(grads[0])
    rs = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        rs.append(m_hat / (np.sqrt(v_hat) + eps))
    return rs


class TestOptimizers:
    def test_lamb_first_step_hand_computed(self):
        # unit weights, unit gradient: u = 1/(1+eps) in every coordinate and
        # the trust ratio ||w||/||u|| = 1+eps cancels it, so w' = 1 - lr exactly
        p = Tensor(np.ones(4), requires_grad=True)
        p.grad = np.ones(4)
        opt = LambOptimizer(weight_decay=0.0, eps=1e-6)
        opt.step({"w": p}, lr=0.1)
        np.testing.assert_allclose(p.data, 0.9, rtol=1e-14)

    def test_trust_ratio_rescales_adam_update(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(0.0, 2.0, 6)
        g = rng.normal(size=6)

        adam_p = Tensor(w0.copy(), requires_grad=True)
        adam_p.grad = g.copy()
        AdamOptimizer(weight_decay=0.01).step({"w": adam_p}, lr=0.1)
        adam_update = w0 - adam_p.data

        lamb_p = Tensor(w0.copy(), requires_grad=True)
        lamb_p.grad = g.copy()
        LambOptimizer(weight_decay=0.01).step({"w": lamb_p}, lr=0.1)
        lamb_update = w0 - lamb_p.data

        u = adam_update / 0.1
        trust = np.linalg.norm(w0) / np.linalg.norm(u)
        np.testing.assert_allclose(lamb_update, trust * adam_update, atol=1e-12)

    def test_moment_recursion_matches_brute_force(self):
        rng = np.random.default_rng(4)
        grads = [rng.normal(size=5) for _ in range(10)]
        p = Tensor(np.zeros(5), requires_grad=True)
        opt = AdamOptimizer(weight_decay=0.0, eps=1e-6)
        w = np.zeros(5)
        for r in reference_moment_updates(grads, 0.9, 0.999, 1e-6):
            w = w - 0.01 * r
        for g in grads:
            opt.step({"w": p}, lr=0.01, grads={"w": g})
        np.testing.assert_allclose(p.data, w, atol=1e-14)

    def test_trust_ratio_is_one_for_zero_norms(self):
        # fresh zero weights: w_norm = 0, so the update falls back to plain Adam
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.ones(3)
        q = Tensor(np.zeros(3), requires_grad=True)
        q.grad = np.ones(3)
        LambOptimizer(weight_decay=0.0).step({"w": p}, lr=0.1)
        AdamOptimizer(weight_decay=0.0).step({"w": q}, lr=0.1)
        np.testing.assert_array_equal(p.data, q.data)

    def test_exclusion_skips_decay_and_trust(self):
        gamma = Tensor(np.full(4, 2.0), requires_grad=True)
        gamma.grad = np.zeros(4)
        w = Tensor(np.full(4, 2.0), requires_grad=True)
        w.grad = np.zeros(4)
        opt = LambOptimizer(weight_decay=0.5)
        opt.step({"ln.gamma": gamma, "dense.w": w}, lr=0.1)
        np.testing.assert_array_equal(gamma.data, 2.0)      # no decay applied
        assert np.all(w.data < 2.0)                          # decayed

    def test_exclusion_list_can_be_disabled(self):
        gamma = Tensor(np.full(4, 2.0), requires_grad=True)
        gamma.grad = np.zeros(4)
        opt = LambOptimizer(weight_decay=0.5, use_exclusion_list=False)
        opt.step({"ln.gamma": gamma}, lr=0.1)
        assert np.all(gamma.data < 2.0)

    def test_step_counter_advances_once_per_call(self):
        p = Tensor(np.ones(2), requires_grad=True)
        q = Tensor(np.ones(2), requires_grad=True)
        opt = AdamOptimizer()
        p.grad = np.ones(2)
        q.grad = np.ones(2)
        opt.step({"p": p, "q": q}, lr=0.01)
        assert opt.state.step == 1

    def test_nonfinite_gradient_raises(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NonFiniteGradientError, match="'w'"):
            AdamOptimizer().step({"w": p}, lr=0.01)

    def test_make_optimizer(self):
        assert isinstance(make_optimizer("lamb"), LambOptimizer)
        assert isinstance(make_optimizer("adam"), AdamOptimizer)
        with pytest.raises(ValueError):
            make_optimizer("sgd")

    @pytest.mark.parametrize("kind,stepper", [("adam", adam_step),
                                              ("lamb", lamb_step)])
    def test_quadratic_convergence(self, kind, stepper):
        target = np.array([1.5, -2.0, 0.5, 3.0])
        p = Tensor(np.zeros(4), requires_grad=True)
        opt = make_optimizer(kind, weight_decay=0.0)
        # decay the rate so the layer-wise update (proportional to ||w|| for
        # trust scaling) stops oscillating around the optimum
        for t in range(400):
            p.zero_grad()
            ((p - Tensor(target)) ** 2.0).sum().backward()
            stepper(opt, {"w": p}, lr=0.05 * (1.0 - t / 400.0))
        np.testing.assert_allclose(p.data, target, atol=5e-3)


class TestPrecisionPolicy:
    def test_mode_validation(self):
        with pytest.raises(ValueError):
            PrecisionPolicy(mode="bf16")

    @pytest.mark.parametrize("scale", [0.5, 3.0, 1000.0])
    def test_loss_scale_must_be_power_of_two(self, scale):
        with pytest.raises(ValueError):
            PrecisionPolicy(mode="mixed_emulated", loss_scale=scale)

    def quadratic(self, p, target):
        def loss_fn():
            loss = ((p - Tensor(target)) ** 2.0).sum()
            return loss, {"loss": loss.item()}
        return loss_fn

    def test_full_mode_matches_manual_step(self):
        target = np.array([1.0, 2.0])
        p = Tensor(np.zeros(2), requires_grad=True)
        q = Tensor(np.zeros(2), requires_grad=True)
        policy = PrecisionPolicy(mode="full")
        metrics, skipped = training_step(policy, self.quadratic(p, target),
                                         {"w": p}, AdamOptimizer(weight_decay=0.0),
                                         lr=0.1)
        assert not skipped and metrics["loss"] == pytest.approx(5.0)
        q.grad = 2.0 * (q.data - target)
        AdamOptimizer(weight_decay=0.0).step({"w": q}, lr=0.1)
        np.testing.assert_array_equal(p.data, q.data)

    def test_mixed_mode_rounds_working_weights(self):
        p = Tensor(np.array([1.0001, 2.0]), requires_grad=True)
        seen = {}

        def loss_fn():
            seen["working"] = p.data.copy()
            loss = (p * p).sum()
            return loss, {"loss": loss.item()}

        policy = PrecisionPolicy(mode="mixed_emulated", loss_scale=64.0)
        training_step(policy, loss_fn, {"w": p}, AdamOptimizer(weight_decay=0.0),
                      lr=0.0)
        np.testing.assert_array_equal(seen["working"],
                                      round_half([1.0001, 2.0]))
        # masters restored at full precision (lr=0 means no update)
        np.testing.assert_array_equal(p.data, [1.0001, 2.0])

    def test_mixed_mode_close_to_full_on_well_scaled_problem(self):
        target = np.array([0.5, -0.25, 0.75])
        full = Tensor(np.zeros(3), requires_grad=True)
        mixed = Tensor(np.zeros(3), requires_grad=True)
        opt_f = AdamOptimizer(weight_decay=0.0)
        opt_m = AdamOptimizer(weight_decay=0.0)
        for _ in range(50):
            training_step(PrecisionPolicy(mode="full"),
                          self.quadratic(full, target), {"w": full}, opt_f, lr=0.02)
            training_step(PrecisionPolicy(mode="mixed_emulated", loss_scale=1024.0),
                          self.quadratic(mixed, target), {"w": mixed}, opt_m,
                          lr=0.02)
        np.testing.assert_allclose(mixed.data, full.data, atol=0.02)

    def test_overflow_skips_update_and_moments(self):
        p = Tensor(np.array([300.0]), requires_grad=True)  # 300^2 overflows binary16
        opt = AdamOptimizer(weight_decay=0.0)
        policy = PrecisionPolicy(mode="mixed_emulated", loss_scale=1024.0)
        metrics, skipped = training_step(policy, self.quadratic(p, np.zeros(1)),
                                         {"w": p}, opt, lr=0.1)
        assert skipped
        np.testing.assert_array_equal(p.data, [300.0])
        assert opt.state.step == 0 and opt.state.m == {}

    def test_overflow_raises_when_skip_disabled(self):
        p = Tensor(np.array([300.0]), requires_grad=True)
        policy = PrecisionPolicy(mode="mixed_emulated", loss_scale=1024.0,
                                 skip_on_overflow=False)
        with pytest.raises(NonFiniteGradientError):
            training_step(policy, self.quadratic(p, np.zeros(1)), {"w": p},
                          AdamOptimizer(), lr=0.1)

    def test_gradients_are_unscaled_before_update(self):
        # one step of mixed precision on a linear loss: the update must not
        # depend on the loss scale
        results = []
        for scale in (1.0, 4096.0):
            p = Tensor(np.array([1.0]), requires_grad=True)

            def loss_fn():
                loss = (p * 3.0).sum()
                return loss, {}

            training_step(PrecisionPolicy(mode="mixed_emulated", loss_scale=scale),
                          loss_fn, {"w": p}, AdamOptimizer(weight_decay=0.0),
                          lr=0.01)
            results.append(p.data.copy())
        np.testing.assert_allclose(results[0], results[1], atol=1e-12)
