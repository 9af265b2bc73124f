"""Architecture tests: config arithmetic, gating semantics, mode equivalence,
parameter initialization, checkpoint round-trips."""

import numpy as np
import pytest

from mlfn import autodiff as ad
from mlfn import tensor as T
from mlfn.errors import CheckpointError, ContractError, ShapeError
from mlfn.model import (MLFNConfig, MLFNModel, factor_signature, init_params,
                        load_checkpoint, model_forward, save_checkpoint)


def toy(**kw):
    return MLFNConfig.toy(**kw)


def checksum(model):
    import hashlib
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].value.tobytes())
    return h.hexdigest()


class TestConfig:
    def test_toy_signature_dim(self):
        assert toy().signature_dim == 16

    def test_reid_preset_signature_dim(self):
        assert MLFNConfig.paper_reid().signature_dim == 512

    def test_cifar_preset_signature_dim(self):
        assert MLFNConfig.paper_cifar().signature_dim == 288

    def test_signature_dim_invariant_to_channel_doubling(self):
        cfg = MLFNConfig.paper_reid()
        doubled = cfg.replace(
            channels=tuple(2 * c for c in cfg.channels),
            stem_channels=2 * cfg.stem_channels)
        assert doubled.signature_dim == cfg.signature_dim == 512

    def test_bad_mode_rejected(self):
        with pytest.raises(ContractError):
            toy(mode="vgg")

    def test_mismatched_schedule_lengths_rejected(self):
        with pytest.raises(ContractError):
            toy(channels=(8, 16, 32))

    def test_digest_stable_and_sensitive(self):
        a, b = toy(), toy()
        assert a.digest() == b.digest()
        assert toy(seed=1).digest() != a.digest()
        assert toy(mode="resnext").digest() != a.digest()


class TestInit:
    def test_same_seed_identical_params(self):
        assert checksum(init_params(toy(), 7)) == checksum(init_params(toy(), 7))

    def test_different_seed_differs(self):
        assert checksum(init_params(toy(), 7)) != checksum(init_params(toy(), 8))

    def test_bn_gamma_ones_beta_zeros(self):
        model = init_params(toy(), 0)
        for name, p in model.params.items():
            if name.endswith(".gamma"):
                np.testing.assert_array_equal(p.value, np.ones_like(p.value))
            if name.endswith(".beta"):
                np.testing.assert_array_equal(p.value, np.zeros_like(p.value))

    def test_shared_names_share_values_across_modes(self):
        a = init_params(toy(), 3)
        b = init_params(toy(mode="resnext"), 3)
        shared = set(a.params) & set(b.params)
        assert "stem.conv.w" in shared and "head.t_s.w" in shared
        for name in shared:
            np.testing.assert_array_equal(a.params[name].value, b.params[name].value)

    def test_toy_parameter_count_closed_form(self):
        cfg = toy()
        model = init_params(cfg, 0)

        def conv_p(i, o, k):
            return i * o * k * k + o

        def bn_p(c):
            return 2 * c

        def fm_p(i, o, m):
            return (conv_p(i, m, 1) + bn_p(m) + conv_p(m, m, 3) + bn_p(m)
                    + conv_p(m, o, 1) + bn_p(o))

        total = conv_p(3, 8, 3) + bn_p(8)  # stem
        ins = (cfg.stem_channels,) + cfg.channels[:-1]
        for n in range(4):
            i, o = ins[n], cfg.channels[n]
            m = max(2, o // 4)
            total += 4 * fm_p(i, o, m)
            h1, h2 = cfg.fsm_hidden[n]
            total += (i * h1 + h1) + bn_p(h1) + (h1 * h2 + h2) + bn_p(h2) \
                + (h2 * 4 + 4)
            if i != o or cfg.strides[n] != 1:
                total += conv_p(i, o, 1) + bn_p(o)
        d, k, c = cfg.fusion_dim, cfg.signature_dim, cfg.channels[-1]
        total += (c * d + d) + (k * d + d) + (d * cfg.n_classes + cfg.n_classes)

        assert sum(p.value.size for p in model.params.values()) == total

    def test_resnet_mode_parameter_match_is_best_rounding(self):
        cfg = toy(mode="resnet")
        for n in range(cfg.n_blocks):
            i = cfg.stem_channels if n == 0 else cfg.channels[n - 1]
            o = cfg.channels[n]
            m = max(2, o // 4)
            c = i + o + 6
            target = cfg.factor_counts[n] * (9 * m * m + c * m + 3 * o)
            b = cfg.resnet_width(n)

            def params_for(width):
                return 9 * width * width + c * width + 3 * o

            best = min(range(max(1, b - 1), b + 2),
                       key=lambda w: abs(params_for(w) - target))
            assert params_for(b) == params_for(best)


class TestFSMForward:
    def test_zeroed_final_layer_gives_half(self):
        model = init_params(toy(), 0)
        model.params["block1.fsm.fc3.w"].value[...] = 0.0
        model.params["block1.fsm.fc3.b"].value[...] = 0.0
        x = np.random.default_rng(0).normal(size=(4, 8, 32, 16)).astype(np.float32)
        s = model.fsm_forward(ad.Tape(), 1, ad.Variable(x), training=False)
        np.testing.assert_array_equal(s.value, np.full((4, 4), 0.5, np.float32))

    def test_large_final_bias_saturates_towards_one(self):
        model = init_params(toy(), 0)
        model.params["block1.fsm.fc3.b"].value[...] = 50.0
        model.params["block1.fsm.fc3.w"].value[...] = 0.0
        x = np.random.default_rng(1).normal(size=(2, 8, 32, 16)).astype(np.float32)
        s = model.fsm_forward(ad.Tape(), 1, ad.Variable(x), training=False)
        assert np.all(s.value > 0.999999)
        assert np.all(s.value < 1.0)

    def test_matches_kernel_composition(self):
        model = init_params(toy(dtype="float64"), 5)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 8, 32, 16))
        s = model.fsm_forward(ad.Tape(), 1, ad.Variable(x), training=False)

        p = {k: v.value for k, v in model.params.items()}
        st = model.states
        h = T.global_avg_pool(x)
        h = T.linear(h, p["block1.fsm.fc1.w"], p["block1.fsm.fc1.b"])
        h = T.batch_norm(h, p["block1.fsm.bn1.gamma"], p["block1.fsm.bn1.beta"],
                         st["block1.fsm.bn1"].copy(), training=False)
        h = T.activation(h, "relu")
        h = T.linear(h, p["block1.fsm.fc2.w"], p["block1.fsm.fc2.b"])
        h = T.batch_norm(h, p["block1.fsm.bn2.gamma"], p["block1.fsm.bn2.beta"],
                         st["block1.fsm.bn2"].copy(), training=False)
        h = T.activation(h, "relu")
        h = T.linear(h, p["block1.fsm.fc3.w"], p["block1.fsm.fc3.b"])
        expected = T.activation(h, "sigmoid")
        np.testing.assert_allclose(s.value, expected, atol=1e-10)


class TestBlockForward:
    def test_zero_gates_give_shortcut_exactly(self):
        model = init_params(toy(), 0)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 8, 32, 16)).astype(np.float32)
        y, s = model.block_forward(ad.Tape(), 1, ad.Variable(x), training=False,
                                   gate_override=np.zeros(4, np.float32))
        # block 1 keeps shape, so the shortcut is the identity
        np.testing.assert_array_equal(y.value, x)
        np.testing.assert_array_equal(s.value, np.zeros((2, 4), np.float32))

    def test_one_hot_gate_adds_single_factor_path(self):
        model = init_params(toy(dtype="float64"), 1)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 8, 32, 16))

        p = {k: v.value for k, v in model.params.items()}

        def fm(i):
            h = x
            for j, (kern, pad) in enumerate([((1, 1), (0, 0)), ((3, 3), (1, 1)),
                                             ((1, 1), (0, 0))], start=1):
                w = p[f"block1.fm{i}.conv{j}.w"]
                spec = T.ConvSpec(w.shape[1], w.shape[0], kern, (1, 1), pad)
                h = T.conv2d(h, w, p[f"block1.fm{i}.conv{j}.b"], spec)
                h = T.batch_norm(h, p[f"block1.fm{i}.bn{j}.gamma"],
                                 p[f"block1.fm{i}.bn{j}.beta"],
                                 model.states[f"block1.fm{i}.bn{j}"].copy(),
                                 training=False)
                if j < 3:
                    h = T.activation(h, "relu")
            return h

        for i in range(1, 5):
            onehot = np.zeros(4)
            onehot[i - 1] = 1.0
            y, _ = model.block_forward(ad.Tape(), 1, ad.Variable(x),
                                       training=False, gate_override=onehot)
            np.testing.assert_allclose(y.value, fm(i) + x, atol=1e-10)

    def test_gate_additivity(self):
        model = init_params(toy(dtype="float64"), 2)
        x = np.random.default_rng(5).normal(size=(2, 8, 32, 16))

        def run(g):
            y, _ = model.block_forward(ad.Tape(), 1, ad.Variable(x),
                                       training=False,
                                       gate_override=np.asarray(g, np.float64))
            return y.value

        base = run([0, 0, 0, 0])
        parts = sum(run(np.eye(4)[i]) - base for i in range(4))
        np.testing.assert_allclose(run([1, 1, 1, 1]) - base, parts, atol=1e-9)


class TestFactorSignature:
    def test_concatenates_in_block_order(self):
        a = ad.Variable(np.array([[0.1, 0.2]]))
        b = ad.Variable(np.array([[0.3]]))
        sig = factor_signature(ad.Tape(), [a, b])
        np.testing.assert_array_equal(sig.value, [[0.1, 0.2, 0.3]])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            factor_signature(ad.Tape(), [])


class TestModelForward:
    def test_output_shapes(self):
        model = init_params(toy(), 0)
        x = np.random.default_rng(6).normal(size=(3, 3, 32, 16)).astype(np.float32)
        logits, fused, sig, y_n = model_forward(model, x)
        assert logits.value.shape == (3, 32)
        assert fused.value.shape == (3, 64)
        assert sig.value.shape == (3, 16)
        assert y_n.value.shape == (3, 64, 8, 4)

    def test_signature_strictly_inside_unit_interval(self):
        model = init_params(toy(), 1)
        x = np.random.default_rng(7).normal(size=(4, 3, 32, 16)).astype(np.float32)
        _, _, sig, _ = model_forward(model, x)
        assert np.all(sig.value > 0.0) and np.all(sig.value < 1.0)

    def test_wrong_input_shape_rejected(self):
        model = init_params(toy(), 0)
        with pytest.raises(ShapeError):
            model_forward(model, np.zeros((2, 3, 16, 16), np.float32))

    def test_fusion_midpoint_formula(self):
        model = init_params(toy(dtype="float64"), 3)
        x = np.random.default_rng(8).normal(size=(2, 3, 32, 16))
        tape = ad.Tape()
        res = model.forward(tape, x, training=False)
        p = {k: v.value for k, v in model.params.items()}
        pooled = T.global_avg_pool(res.final_map.value)
        phi_y = T.linear(pooled, p["head.t_y.w"], p["head.t_y.b"])
        phi_s = T.linear(res.signature.value, p["head.t_s.w"], p["head.t_s.b"])
        np.testing.assert_allclose(res.fused.value, 0.5 * (phi_y + phi_s),
                                   atol=1e-12)

    def test_fusion_symmetric_in_projected_features(self):
        # averaging is commutative: swapping the two projection outputs
        # leaves the fused vector unchanged
        a = np.random.default_rng(9).normal(size=(5, 7))
        b = np.random.default_rng(10).normal(size=(5, 7))
        np.testing.assert_array_equal(0.5 * (a + b), 0.5 * (b + a))

    def test_nofusion_classifier_ignores_signature_path(self):
        model = init_params(toy(mode="nofusion"), 4)
        assert "head.t_s.w" not in model.params
        x = np.random.default_rng(11).normal(size=(2, 3, 32, 16)).astype(np.float32)
        logits, fused, sig, _ = model_forward(model, x)
        p = {k: v.value for k, v in model.params.items()}
        # signature still reported, classifier reads the pooled projection only
        assert sig.value.shape == (2, 16)
        np.testing.assert_array_equal(
            logits.value,
            T.linear(fused.value, p["head.cls.w"], p["head.cls.b"]))

    def test_resnext_mode_has_no_fsm_params_and_unit_gates(self):
        model = init_params(toy(mode="resnext"), 5)
        assert not any(".fsm." in k for k in model.params)
        x = np.random.default_rng(12).normal(size=(2, 3, 32, 16)).astype(np.float32)
        _, _, sig, _ = model_forward(model, x)
        np.testing.assert_array_equal(sig.value, np.ones((2, 16), np.float32))

    def test_resnet_mode_runs_and_reports_unit_gates(self):
        model = init_params(toy(mode="resnet"), 6)
        assert not any(".fm" in k for k in model.params)
        x = np.random.default_rng(13).normal(size=(2, 3, 32, 16)).astype(np.float32)
        logits, _, sig, _ = model_forward(model, x)
        assert logits.value.shape == (2, 32)
        np.testing.assert_array_equal(sig.value, np.ones((2, 16), np.float32))

    def test_all_ones_override_equals_resnext_mode_exactly(self):
        seed = 9
        a = init_params(toy(), seed)
        b = init_params(toy(mode="resnext"), seed)
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 32, 16)).astype(np.float32)
        override = {n: np.ones(4, np.float32) for n in range(1, 5)}
        ra = a.forward(ad.Tape(), x, training=False, gate_override=override)
        rb = b.forward(ad.Tape(), x, training=False)
        np.testing.assert_array_equal(ra.final_map.value, rb.final_map.value)
        np.testing.assert_array_equal(ra.logits.value, rb.logits.value)


class TestGateGradients:
    def test_zero_gate_blocks_parameter_updates_exactly(self):
        model = init_params(toy(dtype="float64"), 0)
        rng = np.random.default_rng(15)
        x = rng.normal(size=(2, 3, 32, 16))
        labels = np.array([0, 1])
        gates = np.array([0.0, 0.7, 0.3, 0.9])
        tape = ad.Tape()
        res = model.forward(tape, x, training=True, gate_override={2: gates})
        loss = ad.softmax_cross_entropy(tape, res.logits, labels)
        ad.backward(tape, loss)
        for name, p in model.params.items():
            if name.startswith("block2.fm1."):
                assert np.all(p.value == p.value)  # sanity
                np.testing.assert_array_equal(p.grad, np.zeros_like(p.grad))
        # a gated-on sibling in the same block does receive updates
        assert np.any(model.params["block2.fm2.conv1.w"].grad != 0.0)

    def test_probe_loss_gradient_linear_in_gate(self):
        model = init_params(toy(dtype="float64"), 1)
        rng = np.random.default_rng(16)
        x = rng.normal(size=(2, 3, 32, 16))
        probe = rng.normal(size=(2, 16, 16, 8))

        def grad_at(gval):
            model.zero_grads()
            tape = ad.Tape()
            res = model.forward(tape, x, training=True,
                                gate_override={2: np.array([gval, 0.5, 0.5, 0.5])})
            loss = ad.dot_all(tape, res.block_outputs[1],
                              ad.Variable(probe))
            ad.backward(tape, loss)
            return model.params["block2.fm1.conv2.w"].grad.copy()

        g1 = grad_at(1.0)
        for alpha in (0.25, 0.5, 0.75):
            ga = grad_at(alpha)
            denom = np.maximum(np.abs(alpha * g1), 1e-300)
            ratio_err = np.max(np.abs(ga - alpha * g1) / denom)
            assert ratio_err <= 1e-10


class TestCheckpoint:
    def test_roundtrip_into_differently_seeded_model(self, tmp_path):
        cfg = toy()
        src = init_params(cfg, 0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, src, extra={"iteration": np.asarray(17.0, np.float32)})
        dst = init_params(cfg, 99)
        extra = load_checkpoint(path, dst)
        assert checksum(src) == checksum(dst)
        assert float(extra["iteration"]) == 17.0
        for name in src.states:
            np.testing.assert_array_equal(src.states[name].mean,
                                          dst.states[name].mean)

    def test_config_digest_mismatch_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, init_params(toy(), 0))
        other = init_params(toy(fusion_dim=32), 0)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, other)

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, init_params(toy(), 0))
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, init_params(toy(), 0))

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, init_params(toy(), 0))
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path, init_params(toy(), 0))

    def test_save_is_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, init_params(toy(), 0))
        save_checkpoint(p2, init_params(toy(), 0))
        assert p1.read_bytes() == p2.read_bytes()
