import numpy as np
import pytest

from seraug import model_core as mc
from seraug.errors import DataError, NumericsError

from oracles import adamw_reference, finite_diff_grad, max_rel_error


def make_instance(rng, in_dim=6, hidden=4, n_classes=3, n_layers=3, max_frames=8):
    """Random model + input, resampled until no pre-activation hugs the ReLU kink."""
    for _ in range(50):
        model = mc.SerModel.init(rng, in_dim=in_dim, hidden=hidden,
                                 n_classes=n_classes, n_layers=n_layers)
        if model.fusion_logits is not None:
            model.fusion_logits += rng.normal(0, 0.5, size=n_layers)
        head = mc.DomainHead.init(rng, hidden=hidden)
        n_frames = int(rng.integers(2, max_frames + 1))
        shape = (n_layers or 1, n_frames, in_dim)
        x = rng.normal(0, 1, size=shape)
        _, trace = mc.forward(model, x)
        _, dtrace = mc.domain_forward(head, trace.e)
        if np.abs(trace.z).min() > 1e-3 and np.abs(dtrace.zd).min() > 1e-3:
            return model, head, x
    raise AssertionError("could not sample an instance away from ReLU kinks")


class TestFuseLayers:
    def test_single_layer_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 3))
        out = mc.fuse_layers(x, np.zeros(1))
        np.testing.assert_array_equal(out, x[0])

    def test_uniform_logits_average(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 5, 2))
        out = mc.fuse_layers(x, np.zeros(3))
        np.testing.assert_allclose(out, x.mean(axis=0), atol=1e-12)

    def test_log3_weights(self):
        # softmax(ln 3, 0) = (3/4, 1/4)
        a = np.full((2, 3), 2.0)
        b = np.full((2, 3), -2.0)
        out = mc.fuse_layers(np.stack([a, b]), np.array([np.log(3.0), 0.0]))
        np.testing.assert_allclose(out, 0.75 * a + 0.25 * b, atol=1e-12)

    def test_none_logits_take_last_layer(self):
        x = np.random.default_rng(2).normal(size=(4, 3, 2))
        np.testing.assert_array_equal(mc.fuse_layers(x, None), x[-1])

    def test_layer_mismatch_raises(self):
        x = np.zeros((2, 3, 4))
        with pytest.raises(ValueError):
            mc.fuse_layers(x, np.zeros(3))

    def test_weights_positive_and_normalized(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            w = mc.softmax(rng.normal(0, 5, size=6))
            assert (w > 0).all()
            assert abs(w.sum() - 1.0) < 1e-12


class TestForward:
    def test_identity_weights_mean_pool(self):
        model = mc.SerModel(None, np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
        x = np.array([[[1.0, 3.0], [3.0, 5.0]]])
        logits, trace = mc.forward(model, x)
        np.testing.assert_allclose(trace.e, [2.0, 4.0])
        np.testing.assert_allclose(logits, [2.0, 4.0])

    def test_all_zero(self):
        model = mc.SerModel(None, np.zeros((3, 2)), np.zeros(3), np.zeros((4, 3)), np.zeros(4))
        logits, _ = mc.forward(model, np.zeros((1, 5, 2)))
        np.testing.assert_array_equal(logits, np.zeros(4))

    def test_negative_preactivations_clamp(self):
        model = mc.SerModel(None, np.eye(2), np.full(2, -100.0), np.ones((2, 2)), np.zeros(2))
        _, trace = mc.forward(model, np.ones((1, 3, 2)))
        np.testing.assert_array_equal(trace.e, np.zeros(2))

    def test_frame_permutation_invariance(self):
        rng = np.random.default_rng(7)
        model, _, x = make_instance(rng)
        logits, _ = mc.forward(model, x)
        perm = rng.permutation(x.shape[1])
        logits_p, _ = mc.forward(model, x[:, perm, :])
        np.testing.assert_allclose(logits_p, logits, atol=1e-12)

    def test_dim_mismatch_raises(self):
        model = mc.SerModel(None, np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            mc.forward(model, np.zeros((1, 2, 5)))


class TestLosses:
    def test_uniform_cross_entropy(self):
        loss, _ = mc.cross_entropy(np.zeros(4), 1)
        assert loss == pytest.approx(np.log(4), abs=1e-12)

    def test_large_logit_stability(self):
        loss, grad = mc.cross_entropy(np.array([1000.0, 0.0, 0.0, 0.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(grad).all()

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            logits = rng.normal(0, 3, size=5)
            _, grad = mc.cross_entropy(logits, int(rng.integers(5)))
            assert abs(grad.sum()) < 1e-12

    def test_bce_at_zero(self):
        loss, grad = mc.bce_logit(0.0, 1)
        assert loss == pytest.approx(np.log(2), abs=1e-12)
        assert grad == pytest.approx(-0.5)
        loss0, grad0 = mc.bce_logit(0.0, 0)
        assert loss0 == pytest.approx(np.log(2), abs=1e-12)
        assert grad0 == pytest.approx(0.5)

    def test_bce_saturation(self):
        loss, grad = mc.bce_logit(-800.0, 0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert -1.0 < grad < 1.0

    def test_bce_gradient_bounded(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            _, grad = mc.bce_logit(float(rng.normal(0, 10)), int(rng.integers(2)))
            assert -1.0 < grad < 1.0


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(123)
        for _ in range(10):
            model, _, x = make_instance(rng)
            label = int(rng.integers(model.n_classes))

            logits, trace = mc.forward(model, x)
            _, dlogits = mc.cross_entropy(logits, label)
            grads = mc.backward(model, trace, dlogits)

            def loss():
                lg, _ = mc.forward(model, x)
                return mc.cross_entropy(lg, label)[0]

            for name, param in model.params().items():
                fd = finite_diff_grad(loss, param)
                assert max_rel_error(grads[name], fd) < 1e-4, name

    def test_domain_path_with_reversal_matches_fd(self):
        rng = np.random.default_rng(321)
        lam = 0.7
        for _ in range(5):
            model, head, x = make_instance(rng)
            y = int(rng.integers(2))

            _, trace = mc.forward(model, x)
            logit, dtrace = mc.domain_forward(head, trace.e)
            _, dlogit = mc.bce_logit(logit, y)
            head_grads, de = mc.domain_backward(head, dtrace, dlogit)
            fuser_grads = mc.backward_from_embedding(model, trace, de)
            reversed_grads = {k: mc.grad_reverse(g, lam) for k, g in fuser_grads.items()}

            def loss():
                _, tr = mc.forward(model, x)
                lg, _ = mc.domain_forward(head, tr.e)
                return mc.bce_logit(lg, y)[0]

            for name, param in head.params().items():
                fd = finite_diff_grad(loss, param)
                assert max_rel_error(head_grads[name], fd) < 1e-4, name
            for name, param in model.fuser_params().items():
                fd = finite_diff_grad(loss, param)
                assert max_rel_error(reversed_grads[name], -lam * fd) < 1e-4, name

    def test_zero_dlogits_zero_grads(self):
        rng = np.random.default_rng(5)
        model, _, x = make_instance(rng)
        _, trace = mc.forward(model, x)
        grads = mc.backward(model, trace, np.zeros(model.n_classes))
        for g in grads.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_last_layer_mode_emits_no_fusion_grad(self):
        rng = np.random.default_rng(6)
        model = mc.SerModel.init(rng, in_dim=4, hidden=3, n_classes=2, n_layers=None)
        x = rng.normal(size=(2, 5, 4))
        logits, trace = mc.forward(model, x)
        _, dlogits = mc.cross_entropy(logits, 0)
        grads = mc.backward(model, trace, dlogits)
        assert "fusion_logits" not in grads
        assert set(grads) == {"W1", "b1", "W2", "b2"}


class TestGradReverse:
    def test_negates_and_scales(self):
        np.testing.assert_array_equal(
            mc.grad_reverse(np.array([2.0, -3.0]), 1.0), np.array([-2.0, 3.0])
        )

    def test_lambda_zero(self):
        np.testing.assert_array_equal(
            mc.grad_reverse(np.array([5.0, -1.0]), 0.0), np.zeros(2)
        )

    def test_forward_is_identity(self):
        layer = mc.GradientReversal(lam=2.5)
        x = np.array([1.0, -2.0])
        assert layer.forward(x) is x
        np.testing.assert_array_equal(layer.backward(np.array([1.0, 1.0])), [-2.5, -2.5])


class TestAdamW:
    def test_single_step_reference_value(self):
        opt = mc.AdamW()
        params = {"w": np.array([1.0])}
        opt.step(params, {"w": np.array([1.0])})
        assert params["w"][0] == pytest.approx(0.998998, abs=5e-7)

    def test_zero_grad_zero_decay_fixed_point(self):
        opt = mc.AdamW(weight_decay=0.0)
        params = {"w": np.array([3.0, -2.0])}
        for _ in range(25):
            opt.step(params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [3.0, -2.0])

    def test_ten_step_trace_matches_reference(self):
        rng = np.random.default_rng(99)
        theta0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(10)]
        expected = adamw_reference(theta0, grads)

        opt = mc.AdamW()
        params = {"w": theta0.copy()}
        for step, g in enumerate(grads):
            opt.step(params, {"w": g})
            np.testing.assert_allclose(params["w"], expected[step], atol=1e-10)

    def test_non_finite_gradient_names_parameter(self):
        opt = mc.AdamW()
        with pytest.raises(NumericsError, match="W_bad"):
            opt.step({"W_bad": np.ones(2)}, {"W_bad": np.array([1.0, np.nan])})


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        model = mc.SerModel.init(rng, in_dim=6, hidden=4, n_classes=3, n_layers=2)
        head = mc.DomainHead.init(rng, hidden=4)
        path = tmp_path / "model.ckpt"
        mc.save_checkpoint(path, model, head, meta={"strategy": "adversarial", "epoch": 7})

        loaded, loaded_head, header = mc.load_checkpoint(path)
        for name, arr in model.params().items():
            np.testing.assert_array_equal(loaded.params()[name], arr)
        for name, arr in head.params().items():
            np.testing.assert_array_equal(loaded_head.params()[name], arr)
        assert header["epoch"] == 7
        assert header["n_layers"] == 2

    def test_round_trip_without_head(self, tmp_path):
        rng = np.random.default_rng(18)
        model = mc.SerModel.init(rng, in_dim=5, hidden=3, n_classes=4)
        path = tmp_path / "m.ckpt"
        mc.save_checkpoint(path, model)
        loaded, head, _ = mc.load_checkpoint(path)
        assert head is None
        assert loaded.fusion_logits is None
        np.testing.assert_array_equal(loaded.W1, model.W1)

    def test_dim_validation(self, tmp_path):
        rng = np.random.default_rng(19)
        model = mc.SerModel.init(rng, in_dim=5, hidden=3, n_classes=4)
        path = tmp_path / "m.ckpt"
        mc.save_checkpoint(path, model)
        with pytest.raises(DataError, match="in_dim"):
            mc.load_checkpoint(path, expect_dims={"in_dim": 768})

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(20)
        model = mc.SerModel.init(rng, in_dim=5, hidden=3, n_classes=4)
        path = tmp_path / "m.ckpt"
        mc.save_checkpoint(path, model)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(DataError, match="truncated"):
            mc.load_checkpoint(path)
