import math

import numpy as np
import pytest

from ecloss import nn
from ecloss.errors import DivergenceError, DomainError, ParseError
from ecloss.loss import LossConfig, mutual_information
from ecloss.nn import Conv, Dense, Flatten, MaxPool, NetworkSpec, ReLU
from ecloss.templates import TemplateParams, build_full_set, default_set, subsample_even


def small_tset(h, w, count=30, tau=0.5, radius=3.0):
    full = build_full_set(TemplateParams(h, w, tau=tau, radius=radius))
    return subsample_even(full, min(count, len(full)), seed=0)


def two_layer():
    """conv(3x3, 1->2) - relu (target) - flatten - dense(128 -> 3) on 8x8 input."""
    return NetworkSpec((Conv(3, 1, 2, 1, 1), ReLU(), Flatten(), Dense(128, 3)), (1, 8, 8), 0)


ARCHS = {
    "conv_dense": two_layer(),
    "strided_conv": NetworkSpec((Conv(3, 1, 3, 2, 1), ReLU(), Flatten(), Dense(48, 2)), (1, 8, 8), 0),
    "unpadded_conv_pool": NetworkSpec(
        (Conv(3, 2, 3, 1, 0), ReLU(), MaxPool(2, 2), Flatten(), Dense(27, 2)), (2, 8, 8), 0),
    "conv_pool_conv": NetworkSpec(
        (Conv(3, 1, 2, 1, 1), ReLU(), MaxPool(2, 2), Conv(3, 2, 3, 1, 1), ReLU(), Flatten(), Dense(48, 4)),
        (1, 8, 8), 3),
}


def fd_probe(spec, params, images, labels, tset, config, idx, h=1e-6):
    out = []
    for i in idx:
        p = params.copy()
        p[i] += h
        fp = nn.backward(spec, p, images, labels, tset, config)[0]
        p[i] -= 2 * h
        fm = nn.backward(spec, p, images, labels, tset, config)[0]
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def setup(spec, seed=0, b=4):
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, seed) * 3
    params += rng.normal(scale=0.05, size=params.shape)  # nonzero biases
    images = rng.normal(size=(b, *spec.input_shape))
    labels = rng.integers(0, spec.n_classes, size=b)
    c, h, w = spec.target_shape
    return params, images, labels, small_tset(h, w)


class TestSpec:
    def test_reference_shapes(self):
        spec = nn.reference_spec()
        assert spec.target_shape == (16, 14, 14)
        assert spec.n_classes == 10
        assert spec.n_params == (72 + 8) + (1152 + 16) + (2304 + 16) + (31360 + 10)

    def test_describe_round_trip(self):
        spec = nn.reference_spec(channels=8, n_classes=4)
        assert NetworkSpec.parse(spec.describe()) == spec

    def test_bad_chain(self):
        with pytest.raises(DomainError):
            NetworkSpec((Conv(3, 2, 2, 1, 1), ReLU(), Flatten(), Dense(128, 3)), (1, 8, 8), 0)
        with pytest.raises(DomainError):
            NetworkSpec((Conv(3, 1, 2, 1, 1), Flatten(), Dense(128, 3)), (1, 8, 8), 0)
        with pytest.raises(DomainError):
            NetworkSpec((Conv(3, 1, 2, 1, 1), ReLU(), Flatten(), Dense(100, 3)), (1, 8, 8), 0)


class TestForward:
    def test_zero_weights(self):
        spec = nn.reference_spec(channels=4, n_classes=3, image_size=16)
        x = np.random.default_rng(0).normal(size=(2, 1, 16, 16))
        logits, feats = nn.forward(spec, np.zeros(spec.n_params), x)
        assert np.all(logits == 0) and np.all(feats == 0)

    def test_hand_computed_1x1(self):
        spec = NetworkSpec((Conv(1, 1, 1, 1, 0), ReLU(), Flatten(), Dense(4, 2)), (1, 2, 2), 0)
        params = np.zeros(spec.n_params)
        params[0], params[1] = 2.0, 0.5  # weight, bias
        x = np.array([[[[1.0, -2.0], [3.0, 0.0]]]])
        _, feats = nn.forward(spec, params, x)
        np.testing.assert_array_equal(feats[0, 0], [[2.5, 0.0], [6.5, 0.5]])

    def test_batch_independence(self):
        spec = nn.reference_spec(channels=4, n_classes=3, image_size=16)
        params = nn.init_params(spec, 1)
        x = np.random.default_rng(1).normal(size=(5, 1, 16, 16))
        logits, feats = nn.forward(spec, params, x)
        for i in range(5):
            li, fi = nn.forward(spec, params, x[i:i + 1])
            np.testing.assert_allclose(logits[i], li[0], rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(feats[i], fi[0], rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        spec = two_layer()
        with pytest.raises(DomainError):
            nn.forward(spec, np.zeros(spec.n_params), np.zeros((1, 1, 9, 9)))
        with pytest.raises(DomainError):
            nn.forward(spec, np.zeros(spec.n_params + 1), np.zeros((1, 1, 8, 8)))


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = nn.softmax_cross_entropy(np.zeros((3, 7)), [0, 3, 6])
        assert loss == pytest.approx(math.log(7), rel=1e-15)

    def test_large_margin(self):
        z = np.zeros((2, 4))
        z[0, 1] = z[1, 2] = 1e3
        assert nn.softmax_cross_entropy(z, [1, 2])[0] == pytest.approx(0.0, abs=1e-300)

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 5))
        y = np.array([0, 4, 2, 2])
        _, g = nn.softmax_cross_entropy(z, y)
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += 1e-6
            zm[idx] -= 1e-6
            fd[idx] = (nn.softmax_cross_entropy(zp, y)[0] - nn.softmax_cross_entropy(zm, y)[0]) / 2e-6
        assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-5

    def test_bad_labels(self):
        with pytest.raises(DomainError):
            nn.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


class TestBackward:
    @pytest.mark.parametrize("name", sorted(ARCHS))
    def test_every_layer_type_vs_finite_differences(self, name):
        spec = ARCHS[name]
        params, images, labels, tset = setup(spec)
        config = LossConfig(alpha=1.0, beta=0.5)
        _, g = nn.backward(spec, params, images, labels, tset, config)
        idx = list(range(spec.n_params))
        fd = fd_probe(spec, params, images, labels, tset, config, idx)
        assert np.abs(g[idx] - fd).max() / np.abs(fd).max() < 1e-5

    def test_two_layer_20_params(self):
        spec = two_layer()
        params, images, labels, tset = setup(spec, seed=4)
        config = LossConfig(alpha=1.0, beta=2.0)
        _, g = nn.backward(spec, params, images, labels, tset, config)
        idx = np.random.default_rng(5).choice(spec.n_params, size=20, replace=False)
        fd = fd_probe(spec, params, images, labels, tset, config, idx)
        rel = np.abs(g[idx] - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-3

    def test_beta_zero_is_pure_classification(self):
        spec = ARCHS["conv_pool_conv"]
        params, images, labels, tset = setup(spec)
        r0 = nn.loss_and_grad(spec, params, images, labels, tset, LossConfig(beta=0.0))
        other = small_tset(*spec.target_shape[1:], count=5, tau=3.0)
        r1 = nn.loss_and_grad(spec, params, images, labels, other, LossConfig(beta=0.0))
        assert r0.total == r0.cls_loss
        assert np.array_equal(r0.grad, r1.grad)
        idx = list(range(0, spec.n_params, 7))
        fd = fd_probe(spec, params, images, labels, tset, LossConfig(beta=0.0), idx)
        assert np.abs(r0.grad[idx] - fd).max() / np.abs(fd).max() < 1e-5

    def test_alpha_zero_leaves_dense_untouched(self):
        spec = ARCHS["conv_pool_conv"]
        params, images, labels, tset = setup(spec)
        r = nn.loss_and_grad(spec, params, images, labels, tset, LossConfig(alpha=0.0, beta=1.0))
        n_dense, wsl, _, bsl = spec.param_layout()[-1]
        assert isinstance(spec.layers[n_dense], Dense)
        assert np.all(r.grad[wsl] == 0) and np.all(r.grad[bsl] == 0)
        assert np.any(r.grad[:wsl.start] != 0)
        assert r.total == pytest.approx(-r.mi)

    def test_logged_mi_matches_module(self):
        spec = two_layer()
        params, images, labels, tset = setup(spec)
        r = nn.loss_and_grad(spec, params, images, labels, tset, LossConfig(beta=1e-3))
        _, feats = nn.forward(spec, params, images)
        assert r.mi == mutual_information(feats, tset).mi


def toy_problem(n=64, seed=0):
    """Two classes: bright left half versus bright right half, plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.normal(scale=0.1, size=(n, 1, 8, 8))
    images[labels == 0, :, :, :4] += 1.0
    images[labels == 1, :, :, 4:] += 1.0
    return images, labels


TOY = NetworkSpec((Conv(3, 1, 4, 1, 1), ReLU(), MaxPool(2, 2), Flatten(), Dense(64, 2)), (1, 8, 8), 0)


class TestTrain:
    def test_zero_epochs(self):
        state = nn.TrainerState(nn.init_params(TOY, 0), batch_size=16)
        new, log = nn.train(TOY, toy_problem(), state, 0, small_tset(8, 8))
        assert log == [] and np.array_equal(new.parameters, state.parameters) and new.step == 0

    def test_separable_toy_converges(self):
        state = nn.TrainerState(nn.init_params(TOY, 0), learning_rate=0.1, batch_size=16, rng_seed=3)
        new, log = nn.train(TOY, toy_problem(), state, 50, small_tset(8, 8))
        assert len(log) == 200 and new.step == 200
        assert np.mean([row[1] for row in log[-4:]]) < 0.1

    def test_deterministic(self):
        def run():
            state = nn.TrainerState(nn.init_params(TOY, 2), batch_size=10, rng_seed=2,
                                    loss_config=LossConfig(beta=0.1))
            return nn.train(TOY, toy_problem(30), state, 3, small_tset(8, 8))

        (a, la), (b, lb) = run(), run()
        assert np.array_equal(a.parameters, b.parameters) and la == lb

    def test_resume_matches_single_run(self):
        tset = small_tset(8, 8)
        data = toy_problem(30)
        s0 = nn.TrainerState(nn.init_params(TOY, 1), batch_size=8, rng_seed=1)
        full, log_full = nn.train(TOY, data, s0, 4, tset)
        half, log_a = nn.train(TOY, data, s0, 2, tset)
        rest, log_b = nn.train(TOY, data, half, 2, tset)
        assert np.array_equal(full.parameters, rest.parameters)
        assert log_full == log_a + log_b

    def test_log_columns(self):
        state = nn.TrainerState(nn.init_params(TOY, 0), batch_size=16, loss_config=LossConfig(beta=0.25))
        _, log = nn.train(TOY, toy_problem(32), state, 1, small_tset(8, 8))
        assert [row[0] for row in log] == [0, 1]
        for step, cls, mi, total, beta in log:
            assert beta == 0.25 and total == pytest.approx(cls - 0.25 * mi, rel=1e-15)

    def test_auto_beta_changes_beta(self):
        state = nn.TrainerState(nn.init_params(TOY, 0), batch_size=8,
                                loss_config=LossConfig(beta=1e-5, beta_schedule="auto", beta_window=4))
        new, log = nn.train(TOY, toy_problem(32), state, 3, small_tset(8, 8))
        assert log[0][4] == 1e-5
        assert new.loss_config.beta != 1e-5
        assert len({row[4] for row in log}) > 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self):
        images, labels = toy_problem(16)
        images[3, 0, 0, 0] = np.inf
        state = nn.TrainerState(nn.init_params(TOY, 0), batch_size=16)
        with pytest.raises(DivergenceError) as exc:
            nn.train(TOY, (images, labels), state, 1, small_tset(8, 8))
        assert exc.value.step == 0

    def test_ecloss_raises_held_out_mi(self):
        tset = small_tset(8, 8, tau=1.0)
        images, labels = toy_problem(64)
        state = nn.TrainerState(nn.init_params(TOY, 0), batch_size=16, loss_config=LossConfig(beta=1.0))
        before = mutual_information(nn.forward(TOY, state.parameters, images[:16])[1], tset).mi
        new, _ = nn.train(TOY, (images[16:], labels[16:]), state, 10, tset)
        after = mutual_information(nn.forward(TOY, new.parameters, images[:16])[1], tset).mi
        assert after > before


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = nn.reference_spec(channels=4, n_classes=3, image_size=16)
        params = nn.init_params(spec, 7) * np.pi
        nn.save_checkpoint(tmp_path / "a.ecnn", spec, params)
        spec2, params2 = nn.load_checkpoint(tmp_path / "a.ecnn")
        assert spec2 == spec
        assert params2.tobytes() == params.tobytes()
        nn.save_checkpoint(tmp_path / "b.ecnn", spec2, params2)
        assert (tmp_path / "a.ecnn").read_bytes() == (tmp_path / "b.ecnn").read_bytes()

    def test_errors(self, tmp_path):
        spec = two_layer()
        path = tmp_path / "c.ecnn"
        nn.save_checkpoint(path, spec, np.zeros(spec.n_params))
        data = path.read_bytes()
        (tmp_path / "h.ecnn").write_bytes(b"ECNN2" + data[5:])
        with pytest.raises(ParseError, match="header"):
            nn.load_checkpoint(tmp_path / "h.ecnn")
        (tmp_path / "t.ecnn").write_bytes(data[: len(data) // 2])
        with pytest.raises(ParseError, match="truncated"):
            nn.load_checkpoint(tmp_path / "t.ecnn")


def test_reference_net_with_default_templates():
    spec = nn.reference_spec()
    tset = default_set()
    assert spec.target_shape[1:] == tset.params.shape
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).uniform(size=(2, 1, 56, 56))
    r = nn.loss_and_grad(spec, params, x, np.array([0, 1]), tset, LossConfig())
    assert np.all(np.isfinite(r.grad)) and 0 <= r.mi <= math.log(400)
