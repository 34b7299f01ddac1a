import numpy as np
import pytest

from rdlt import attacks, engine
from rdlt.attacks import AttackSpec, clamp_linf
from rdlt.data import synth_spirals
from rdlt.engine import EngineConfig
from rdlt.layers import Batch, Network


def rng_for(tag):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([0xA77A, tag])))


def toy_model(tag=0, n_in=2, classes=3):
    rng = rng_for(tag)
    return Network(
        [
            engine.init_factorized_linear(16, n_in, 2, "tanh", rng),
            engine.init_factorized_linear(classes, 16, 3, "identity", rng),
        ]
    )


def toy_batch(tag=1, n_in=2, classes=3, b=24):
    rng = rng_for(tag)
    return Batch(rng.standard_normal((n_in, b)), rng.integers(0, classes, b))


def trained_spiral_model(seed):
    train_set = synth_spirals(3, 60, 0.1, seed=40)
    rng = rng_for(1000 + seed)
    net = Network(
        [
            engine.init_factorized_linear(32, 2, 2, "relu", rng),
            engine.init_factorized_linear(3, 32, 3, "identity", rng),
        ]
    )
    cfg = EngineConfig(seed=seed, reg_strength=0.0).validate()
    engine.train(net, train_set, cfg, epochs=15, batch_size=60)
    return net


class TestClamp:
    def test_inside_ball_untouched(self):
        x0 = np.zeros((2, 1))
        x = np.array([[0.05], [-0.03]])
        assert np.array_equal(clamp_linf(x0, x, 0.1), x)

    def test_zero_radius_returns_center(self):
        x0 = rng_for(2).standard_normal((3, 4))
        x = x0 + rng_for(3).standard_normal((3, 4))
        assert np.array_equal(clamp_linf(x0, x, 0.0), x0)

    def test_elementwise_projection(self):
        x0 = np.zeros((2, 1))
        x = np.array([[0.3], [-0.3]])
        assert np.allclose(clamp_linf(x0, x, 0.1), [[0.1], [-0.1]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            clamp_linf(np.zeros((2, 1)), np.zeros((3, 1)), 0.1)


class TestAttackSpec:
    def test_defaults_per_kind(self):
        fgsm = AttackSpec(kind="fgsm_l2", epsilon=0.2)
        assert fgsm.alpha == 0.2 and fgsm.iterations == 1
        jit = AttackSpec(kind="jitter", epsilon=0.2)
        assert jit.alpha == 0.2 and jit.iterations == 5 and jit.jitter_noise == 0.1
        mix = AttackSpec(kind="mixup", epsilon=0.2)
        assert mix.alpha == 1.0 and mix.iterations == 5 and mix.mixup_beta == 1e-3

    def test_validation(self):
        with pytest.raises(ValueError):
            AttackSpec(kind="pgd", epsilon=0.1)
        with pytest.raises(ValueError):
            AttackSpec(kind="fgsm_l2", epsilon=-0.1)
        with pytest.raises(ValueError):
            AttackSpec(kind="fgsm_l1", epsilon=0.1, data_std=np.array([1.0, 0.0]))


class TestFgsm:
    def test_l2_hand_example(self):
        # gradient (1, -2): infinity norm 2, step alpha * grad / 2
        grad = np.array([[1.0], [-2.0]])
        step = attacks._normalized_step(grad, 0.1)
        assert np.allclose(step, [[0.05], [-0.1]], atol=1e-15)

    def test_l1_hand_example(self):
        spec = AttackSpec(kind="fgsm_l1", epsilon=0.1, data_std=np.array([2.0, 4.0]))
        # single linear layer so the input gradient is analytic
        net = Network(
            [
                engine.init_factorized_linear(2, 2, 2, "identity", rng_for(4)),
            ]
        )
        batch = Batch(np.array([[0.3], [0.4]]), np.array([0]))
        adv = attacks.fgsm(net, batch, spec)
        from rdlt.layers import cross_entropy

        _, caches = net.forward_with_cache(batch.inputs)
        logits = net.forward(batch.inputs)
        _, grad_logits = cross_entropy(logits, batch.labels)
        _, grad = net.backward_from(caches, grad_logits)
        expected = batch.inputs + np.clip(
            0.1 * np.sign(grad) / np.array([[2.0], [4.0]]), -0.1, 0.1
        )
        assert np.allclose(adv.inputs, expected, atol=1e-12)

    def test_zero_epsilon_bitwise(self):
        net = toy_model()
        batch = toy_batch()
        for kind in ("fgsm_l2", "fgsm_l1"):
            spec = AttackSpec(kind=kind, epsilon=0.0, data_std=np.ones(2))
            adv = attacks.fgsm(net, batch, spec)
            assert np.array_equal(adv.inputs, batch.inputs)

    def test_missing_std_rejected(self):
        with pytest.raises(ValueError, match="data_std"):
            attacks.fgsm(toy_model(), toy_batch(), AttackSpec(kind="fgsm_l1", epsilon=0.1))

    def test_zero_gradient_inputs_unperturbed(self):
        # constant logits: zero coefficients kill the input gradient
        rng = rng_for(5)
        net = Network([engine.init_factorized_linear(3, 2, 2, "identity", rng)])
        net.layers[0].s = np.zeros_like(net.layers[0].s)
        batch = toy_batch(6)
        adv = attacks.fgsm(net, batch, AttackSpec(kind="fgsm_l2", epsilon=0.5))
        assert np.array_equal(adv.inputs, batch.inputs)

    def test_budget_contract_on_random_inputs(self):
        net = toy_model(7)
        rng = rng_for(8)
        for kind in ("fgsm_l2", "fgsm_l1"):
            spec = AttackSpec(kind=kind, epsilon=0.17, data_std=np.array([0.5, 1.5]))
            batch = Batch(rng.standard_normal((2, 500)), rng.integers(0, 3, 500))
            adv = attacks.run_attack(net, batch, spec, seed=1)
            assert np.abs(adv.inputs - batch.inputs).max() <= 0.17 + 1e-12


class TestJitter:
    def test_zero_noise_zero_epsilon_identity(self):
        spec = AttackSpec(kind="jitter", epsilon=0.0, jitter_noise=0.0)
        batch = toy_batch(9)
        adv = attacks.jitter(toy_model(9), batch, spec, rng_for(10))
        assert np.array_equal(adv.inputs, batch.inputs)

    def test_budget_contract(self):
        spec = AttackSpec(kind="jitter", epsilon=0.12)
        batch = toy_batch(11, b=200)
        adv = attacks.jitter(toy_model(11), batch, spec, rng_for(12))
        assert np.abs(adv.inputs - batch.inputs).max() <= 0.12 + 1e-12

    def test_attack_reduces_accuracy_on_trained_model(self):
        val = synth_spirals(3, 60, 0.1, seed=41, split="validation")
        spec = AttackSpec(kind="jitter", epsilon=0.1)
        drops = []
        for seed in range(5):
            net = trained_spiral_model(seed)
            clean = 100 * np.mean(net.predict(val.inputs) == val.labels)
            adv = attacks.evaluate_under_attack(net, val, spec, seed=seed)
            drops.append(adv - clean)
        assert np.median(drops) <= 0.0

    def test_determinism(self):
        spec = AttackSpec(kind="jitter", epsilon=0.1)
        net = toy_model(13)
        batch = toy_batch(14)
        a = attacks.run_attack(net, batch, spec, seed=3)
        b = attacks.run_attack(net, batch, spec, seed=3)
        assert np.array_equal(a.inputs, b.inputs)
        c = attacks.run_attack(net, batch, spec, seed=4)
        assert not np.array_equal(a.inputs, c.inputs)


class TestMixup:
    def test_forced_full_weight_keeps_input(self, monkeypatch):
        monkeypatch.setattr(attacks, "_sample_lambda", lambda rng, beta, size: np.ones(size))
        spec = AttackSpec(kind="mixup", epsilon=0.3)
        batch = toy_batch(15)
        adv = attacks.mixup(toy_model(15), batch, spec, rng_for(16))
        assert np.allclose(adv.inputs, batch.inputs, atol=1e-15)

    def test_zero_epsilon_identity(self):
        spec = AttackSpec(kind="mixup", epsilon=0.0)
        batch = toy_batch(17)
        adv = attacks.mixup(toy_model(17), batch, spec, rng_for(18))
        assert np.array_equal(adv.inputs, batch.inputs)

    def test_budget_contract(self):
        spec = AttackSpec(kind="mixup", epsilon=0.21)
        batch = toy_batch(19, b=100)
        adv = attacks.mixup(toy_model(19), batch, spec, rng_for(20))
        assert np.abs(adv.inputs - batch.inputs).max() <= 0.21 + 1e-12

    def test_interpolation_weights_bimodal(self):
        lam = attacks._sample_lambda(rng_for(21), 1e-3, 4000)
        assert np.all(np.isfinite(lam))
        extreme = np.mean((lam < 0.01) | (lam > 0.99))
        assert extreme >= 0.95

    def test_kl_flag_changes_attack(self):
        batch = toy_batch(22)
        net = toy_model(22)
        with_kl = attacks.mixup(net, batch, AttackSpec(kind="mixup", epsilon=0.3), rng_for(23))
        without = attacks.mixup(
            net, batch, AttackSpec(kind="mixup", epsilon=0.3, mixup_use_kl=False), rng_for(23)
        )
        assert not np.array_equal(with_kl.inputs, without.inputs)


class TestEvaluation:
    def test_zero_epsilon_equals_clean_accuracy(self):
        net = toy_model(24)
        val = synth_spirals(3, 30, 0.1, seed=42)
        clean = 100 * np.mean(net.predict(val.inputs) == val.labels)
        spec = AttackSpec(kind="fgsm_l2", epsilon=0.0)
        assert attacks.evaluate_under_attack(net, val, spec, seed=0) == pytest.approx(clean)

    def test_constant_classifier_on_one_class_data(self):
        rng = rng_for(25)
        net = Network([engine.init_factorized_linear(3, 2, 2, "identity", rng)])
        net.layers[0].s = np.zeros_like(net.layers[0].s)
        net.layers[0].bias = np.array([5.0, 0.0, 0.0])  # always predicts class 0
        from rdlt.data import Dataset

        data = Dataset(inputs=rng.standard_normal((2, 40)), labels=np.zeros(40, dtype=int))
        for eps in (0.0, 0.3, 1.0):
            spec = AttackSpec(kind="fgsm_l2", epsilon=eps)
            assert attacks.evaluate_under_attack(net, data, spec, seed=0) == 100.0

    def test_accuracy_trend_non_increasing_in_epsilon(self):
        val = synth_spirals(3, 60, 0.1, seed=41, split="validation")
        grid = [0.05, 0.1, 0.3]
        means = []
        for eps in grid:
            spec = AttackSpec(kind="fgsm_l2", epsilon=eps)
            accs = [
                attacks.evaluate_under_attack(trained_spiral_model(seed), val, spec, seed=seed)
                for seed in range(5)
            ]
            means.append(np.mean(accs))
        assert means[0] >= means[1] >= means[2]

    def test_blackbox_source_equals_target_is_whitebox(self):
        net = trained_spiral_model(11)
        val = synth_spirals(3, 40, 0.1, seed=43)
        spec = AttackSpec(kind="fgsm_l2", epsilon=0.1)
        white = attacks.evaluate_under_attack(net, val, spec, seed=2)
        transfer = attacks.blackbox_transfer(net, net, val, spec, seed=2)
        assert white == transfer

    def test_blackbox_zero_epsilon_is_target_clean(self):
        source = trained_spiral_model(12)
        target = trained_spiral_model(13)
        val = synth_spirals(3, 40, 0.1, seed=44)
        spec = AttackSpec(kind="fgsm_l2", epsilon=0.0)
        clean = 100 * np.mean(target.predict(val.inputs) == val.labels)
        assert attacks.blackbox_transfer(source, target, val, spec, seed=0) == pytest.approx(clean)

    def test_blackbox_transfer_weaker_than_whitebox(self):
        val = synth_spirals(3, 60, 0.1, seed=41, split="validation")
        spec = AttackSpec(kind="fgsm_l2", epsilon=0.1)
        gaps = []
        for seed in range(5):
            source = trained_spiral_model(20 + seed)
            target = trained_spiral_model(40 + seed)
            white = attacks.evaluate_under_attack(target, val, spec, seed=seed)
            transfer = attacks.blackbox_transfer(source, target, val, spec, seed=seed)
            gaps.append(transfer - white)
        assert np.median(gaps) >= 0.0

    def test_shape_mismatch_rejected(self):
        source = toy_model(26, n_in=2)
        target = toy_model(27, n_in=3)
        val = synth_spirals(3, 10, 0.1, seed=45)
        with pytest.raises(ValueError):
            attacks.blackbox_transfer(source, target, val, AttackSpec(kind="fgsm_l2", epsilon=0.1))
