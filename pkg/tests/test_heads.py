"""Projection heads: GELU, init, backprop, AdamW, and checkpoints."""
import json
import struct

import numpy as np
import pytest
from scipy.special import erf

from instasim.bundle import make_bundle
from instasim.errors import FormatError, InvalidInput, ShapeError
from instasim.heads import (
    AdamWState,
    DualHead,
    EmbeddingItem,
    adamw_init,
    adamw_step,
    apply_head,
    clone_head,
    forward,
    gelu,
    gelu_grad,
    head_params,
    identity_dual_head,
    init_dual_head,
    load_head,
    mlp_backward,
    mlp_forward,
    save_head,
    zero_grads,
)


class TestGelu:
    def test_exact_gaussian_cdf_form(self, rng):
        x = rng.normal(size=200) * 3
        np.testing.assert_allclose(gelu(x), 0.5 * x * (1.0 + erf(x / np.sqrt(2.0))), atol=0)

    def test_limits(self):
        assert gelu(np.array([0.0]))[0] == 0.0
        assert abs(gelu(np.array([10.0]))[0] - 10.0) < 1e-12
        assert abs(gelu(np.array([-10.0]))[0]) < 1e-12

    def test_grad_matches_fd(self, rng):
        x = rng.normal(size=50)
        h = 1e-6
        fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(gelu_grad(x), fd, atol=1e-9)


class TestInit:
    def test_uniform_fan_in_bounds(self):
        head = init_dual_head(in_dim=64, hidden_dim=32, seed=1)
        k1 = 1.0 / np.sqrt(64)
        k2 = 1.0 / np.sqrt(32)
        for mlp in (head.cls_head, head.patch_head):
            assert np.abs(mlp.W1).max() < k1
            assert np.abs(mlp.b1).max() < k1
            assert np.abs(mlp.W2).max() < k2
            assert np.abs(mlp.b2).max() < k2
        # with 64*32 draws the empirical max should approach the bound
        assert np.abs(head.cls_head.W1).max() > 0.8 * k1

    def test_deterministic_per_seed(self):
        a = init_dual_head(8, hidden_dim=4, seed=7)
        b = init_dual_head(8, hidden_dim=4, seed=7)
        c = init_dual_head(8, hidden_dim=4, seed=8)
        for name, arr in head_params(a).items():
            np.testing.assert_array_equal(arr, head_params(b)[name])
        assert any(
            not np.array_equal(arr, head_params(c)[name])
            for name, arr in head_params(a).items()
        )

    def test_cls_and_patch_heads_are_independent_draws(self):
        head = init_dual_head(16, hidden_dim=8, seed=0)
        assert not np.array_equal(head.cls_head.W1, head.patch_head.W1)

    def test_default_out_dim_matches_input(self):
        head = init_dual_head(24, hidden_dim=6)
        assert head.out_dim == 24
        head2 = init_dual_head(24, hidden_dim=6, out_dim=10)
        assert head2.out_dim == 10

    def test_rejects_bad_args(self):
        with pytest.raises(InvalidInput):
            init_dual_head(8, activation="relu")
        with pytest.raises(InvalidInput):
            init_dual_head(0)


class TestMlpForwardBackward:
    def test_identity_head_reproduces_input(self, rng):
        head = identity_dual_head(6)
        X = rng.normal(size=(5, 6))
        Y, _ = mlp_forward(head.cls_head, X, head.activation)
        np.testing.assert_array_equal(Y, X)
        c, Z = forward(head, EmbeddingItem("a", cls=X[0], patches=X))
        np.testing.assert_array_equal(c, X[0])
        np.testing.assert_array_equal(Z, X)

    def test_single_vector_round_trips_shape(self, rng):
        head = init_dual_head(5, hidden_dim=4, out_dim=3, seed=2)
        y, _ = mlp_forward(head.cls_head, rng.normal(size=5), head.activation)
        assert y.shape == (3,)
        Y, _ = mlp_forward(head.cls_head, rng.normal(size=(7, 5)), head.activation)
        assert Y.shape == (7, 3)

    def test_backward_matches_fd(self, rng):
        head = init_dual_head(4, hidden_dim=5, out_dim=3, seed=3)
        mlp = head.patch_head
        X = rng.normal(size=(4, 4))
        dY = rng.normal(size=(4, 3))
        Y, cache = mlp_forward(mlp, X, head.activation)
        dX, grads = mlp_backward(mlp, cache, dY, head.activation)

        def objective():
            out, _ = mlp_forward(mlp, X, head.activation)
            return float((out * dY).sum())

        h = 1e-7
        for arr, grad in (
            (X, dX),
            (mlp.W1, grads["W1"]),
            (mlp.b1, grads["b1"]),
            (mlp.W2, grads["W2"]),
            (mlp.b2, grads["b2"]),
        ):
            flat = arr.reshape(-1)
            fd = np.zeros_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = objective()
                flat[k] = orig - h
                fm = objective()
                flat[k] = orig
                fd[k] = (fp - fm) / (2 * h)
            np.testing.assert_allclose(grad.reshape(-1), fd, rtol=1e-5, atol=1e-8)

    def test_shape_mismatch_rejected(self, rng):
        head = init_dual_head(4, hidden_dim=3, seed=0)
        with pytest.raises(ShapeError):
            mlp_forward(head.cls_head, rng.normal(size=(2, 5)), head.activation)


class TestAdamW:
    def test_first_step_closed_form(self, rng):
        # bias correction makes m_hat = g and v_hat = g^2 on step one, so
        # the update is exactly -lr * g / (|g| + eps)
        head = init_dual_head(3, hidden_dim=2, seed=4)
        before = {k: v.copy() for k, v in head_params(head).items()}
        grads = {k: rng.normal(size=v.shape) for k, v in before.items()}
        state = adamw_init(head)
        adamw_step(head, grads, state, lr=0.01)
        for name, p in head_params(head).items():
            g = grads[name]
            expected = before[name] - 0.01 * g / (np.abs(g) + 1e-8)
            np.testing.assert_allclose(p, expected, atol=1e-14)
        assert state.step == 1

    def test_weight_decay_is_decoupled(self, rng):
        head = init_dual_head(3, hidden_dim=2, seed=4)
        before = {k: v.copy() for k, v in head_params(head).items()}
        grads = {k: rng.normal(size=v.shape) for k, v in before.items()}
        twin = clone_head(head)
        adamw_step(head, grads, adamw_init(head), lr=0.01, weight_decay=0.0)
        adamw_step(twin, grads, adamw_init(twin), lr=0.01, weight_decay=0.1)
        for name in before:
            diff = head_params(head)[name] - head_params(twin)[name]
            np.testing.assert_allclose(diff, 0.01 * 0.1 * before[name], atol=1e-14)

    def test_zero_lr_is_noop(self, rng):
        head = init_dual_head(3, hidden_dim=2, seed=5)
        before = {k: v.copy() for k, v in head_params(head).items()}
        grads = {k: rng.normal(size=v.shape) for k, v in before.items()}
        adamw_step(head, grads, adamw_init(head), lr=0.0)
        for name, p in head_params(head).items():
            np.testing.assert_array_equal(p, before[name])

    def test_non_finite_parameters_rejected(self):
        head = init_dual_head(2, hidden_dim=2, seed=0)
        grads = zero_grads(head)
        grads["cls.W1"][:] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(InvalidInput):
            adamw_step(head, grads, adamw_init(head), lr=1.0)

    def test_descends_a_quadratic(self):
        # minimizing ||W1||^2 via its gradient should shrink the norm
        head = init_dual_head(4, hidden_dim=4, seed=6)
        state = adamw_init(head)
        start = float(np.abs(head.cls_head.W1).sum())
        for _ in range(50):
            grads = zero_grads(head)
            grads["cls.W1"] = 2.0 * head.cls_head.W1
            adamw_step(head, grads, state, lr=0.01)
        assert float(np.abs(head.cls_head.W1).sum()) < start


class TestCheckpoints:
    def test_round_trip_is_float32_quantized(self, tmp_path, rng):
        head = init_dual_head(6, hidden_dim=5, out_dim=4, seed=9)
        path = tmp_path / "head.ckpt"
        save_head(path, head, seed=9, config_hash="ab" * 32)
        loaded, header = load_head(path)
        assert header["config_hash"] == "ab" * 32
        assert header["seed"] == 9
        assert (loaded.in_dim, loaded.hidden_dim, loaded.out_dim) == (6, 5, 4)
        assert loaded.activation == "gelu"
        for name, arr in head_params(head).items():
            expected = arr.astype(np.float32).astype(np.float64)
            np.testing.assert_array_equal(head_params(loaded)[name], expected)
            assert head_params(loaded)[name].dtype == np.float64

    def test_save_load_save_is_stable(self, tmp_path):
        head = init_dual_head(4, hidden_dim=3, seed=1)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_head(p1, head)
        loaded, _ = load_head(p1)
        save_head(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_kind_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        raw = json.dumps({"kind": "other"}).encode()
        path.write_bytes(struct.pack("<I", len(raw)) + raw)
        with pytest.raises(FormatError):
            load_head(path)

    def test_future_version_rejected(self, tmp_path):
        head = init_dual_head(3, hidden_dim=2, seed=0)
        path = tmp_path / "v2.ckpt"
        save_head(path, head)
        blob = bytearray(path.read_bytes())
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(bytes(blob[4 : 4 + hlen]))
        header["format_version"] = 2
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(struct.pack("<I", len(raw)) + raw + bytes(blob[4 + hlen :]))
        with pytest.raises(FormatError):
            load_head(path)

    def test_truncated_payload_rejected(self, tmp_path):
        head = init_dual_head(3, hidden_dim=2, seed=0)
        path = tmp_path / "trunc.ckpt"
        save_head(path, head)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            load_head(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        head = init_dual_head(3, hidden_dim=2, seed=0)
        path = tmp_path / "extra.ckpt"
        save_head(path, head)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(FormatError):
            load_head(path)

    def test_garbage_header_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(struct.pack("<I", 8) + b"notjson!")
        with pytest.raises(FormatError):
            load_head(path)

    def test_short_file_rejected(self, tmp_path):
        path = tmp_path / "tiny.ckpt"
        path.write_bytes(b"\x01")
        with pytest.raises(FormatError):
            load_head(path)


class TestApplyHead:
    def test_identity_head_preserves_values(self, rng):
        vecs = {f"img{i}": rng.normal(size=(1, 8)).astype(np.float32) for i in range(4)}
        bundle = make_bundle("CLS", 8, vecs)
        out = apply_head(identity_dual_head(8), bundle)
        assert out.token_kind == "CLS"
        for image_id, arr in vecs.items():
            np.testing.assert_array_equal(out.items[image_id], arr)

    def test_patch_bundle_uses_patch_head(self, rng):
        head = init_dual_head(8, hidden_dim=4, out_dim=6, seed=11)
        mats = {f"img{i}": rng.normal(size=(3, 8)).astype(np.float32) for i in range(3)}
        bundle = make_bundle("PATCH", 8, mats)
        out = apply_head(head, bundle)
        assert out.dim == 6
        for image_id, arr in mats.items():
            expected, _ = mlp_forward(head.patch_head, arr.astype(np.float64), "gelu")
            np.testing.assert_array_equal(
                out.items[image_id], expected.astype(np.float32)
            )
            assert out.items[image_id].dtype == np.float32

    def test_dim_mismatch_rejected(self, rng):
        head = init_dual_head(4, hidden_dim=2, seed=0)
        bundle = make_bundle("CLS", 8, {"a": rng.normal(size=(1, 8)).astype(np.float32)})
        with pytest.raises(ShapeError):
            apply_head(head, bundle)
