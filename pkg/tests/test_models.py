"""Network component tests: codec, motion coder, U-Net, MFA, residual predictor."""

import numpy as np
import pytest

import semvid.nnkit as nk
from semvid.metrics import psnr
from semvid.models import (
    MfaModule,
    MotionCoder,
    NetNoisePredictor,
    ResidualPredictor,
    SemanticCodec,
    UNetLite,
    zigzag_order,
)
from semvid.nnkit import ParamStore, Tensor


def make_codec(h=32, w=32, keep=48, dtype=np.float64):
    store = ParamStore(dtype=dtype)
    return SemanticCodec(h, w, keep, store), store


class TestZigzag:
    def test_permutation(self):
        z = zigzag_order()
        assert sorted(z.tolist()) == list(range(64))

    def test_starts_dc_then_first_diagonal(self):
        z = zigzag_order()
        assert z[0] == 0 and set(z[1:3].tolist()) == {1, 8}


class TestSemanticCodec:
    def test_constant_frame_round_trip_psnr(self):
        codec, _ = make_codec()
        x = np.full((3, 32, 32), 128, dtype=np.uint8)
        x_hat = codec.decode(codec.encode(x))
        assert psnr(np.asarray(x, dtype=float), x_hat) > 30.0

    def test_textured_frame_round_trip(self):
        codec, _ = make_codec()
        rng = np.random.default_rng(0)
        # smooth content: truncation keeps most energy
        yy, xx = np.mgrid[0:32, 0:32]
        x = (127 + 100 * np.sin(xx / 5.0) * np.cos(yy / 7.0)).astype(np.uint8)
        x = np.stack([x, x, x])
        x_hat = codec.decode(codec.encode(x))
        assert psnr(np.asarray(x, dtype=float), x_hat) > 30.0

    def test_unit_power_per_complex_symbol(self):
        codec, _ = make_codec()
        rng = np.random.default_rng(1)
        x = rng.integers(0, 256, (3, 32, 32)).astype(np.uint8)
        f = codec.encode(x)
        assert np.sum(f**2) / (codec.length / 2) == pytest.approx(1.0, abs=1e-6)

    def test_length_even_and_bounded(self):
        codec, _ = make_codec()
        assert codec.length % 2 == 0
        assert codec.length <= 2 * 32 * 32 * 3

    def test_bad_dims_rejected(self):
        store = ParamStore()
        with pytest.raises(ValueError):
            SemanticCodec(30, 32, 8, store)
        with pytest.raises(ValueError):
            SemanticCodec(32, 32, 0, ParamStore())

    def test_decode_wrong_length_rejected(self):
        codec, _ = make_codec()
        with pytest.raises(ValueError):
            codec.decode(np.zeros(codec.length + 2))

    def test_block_round_trip(self):
        codec, _ = make_codec()
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 32, 32))
        np.testing.assert_array_equal(codec.from_blocks(codec.to_blocks(x)), x)


class TestMotionCoder:
    def test_untrained_prediction_is_reference(self):
        store = ParamStore(dtype=np.float64)
        coder = MotionCoder(16, store)
        rng = np.random.default_rng(0)
        f_in, f_ref = rng.normal(size=16), rng.normal(size=16)
        np.testing.assert_allclose(coder.predict(f_in, f_ref).data, f_ref,
                                   rtol=1e-12, atol=1e-12)

    def test_untrained_residual_is_motion_difference(self):
        store = ParamStore(dtype=np.float64)
        coder = MotionCoder(16, store)
        rng = np.random.default_rng(1)
        f_in, f_ref = rng.normal(size=16), rng.normal(size=16)
        f_bar = coder.predict(f_in, f_ref)
        np.testing.assert_allclose(coder.residual(f_in, f_bar).data,
                                   f_in - f_ref, rtol=1e-12, atol=1e-12)

    def test_gradients_flow_to_all_params(self):
        store = ParamStore(dtype=np.float64)
        coder = MotionCoder(16, store)
        rng = np.random.default_rng(2)
        out = coder.predict(rng.normal(size=16), rng.normal(size=16))
        nk.mean(nk.square(out)).backward()
        # output head is zero-init, so its input-path weights get gradients
        # once the loss touches the head output; the head weight itself
        # receives a gradient from the (nonzero) hidden activations
        assert store["motion.cmp_head_w"].grad is not None


class TestUNetLite:
    def test_shape_preserving_and_zero_init(self):
        store = ParamStore(dtype=np.float64)
        net = UNetLite(16, store, widths=(4, 8))
        rng = np.random.default_rng(0)
        z = rng.normal(size=16)
        for t in (1, 10, 500):
            out = net.forward(z, t)
            assert out.data.shape == (16,)
            np.testing.assert_array_equal(out.data, 0.0)  # zero-init head

    def test_deterministic(self):
        store = ParamStore(dtype=np.float64)
        net = UNetLite(16, store, widths=(4, 8))
        # give the head nonzero weights so the output is informative
        store["unet.out_w"].data = np.full((1, 4, 5), 0.1)
        z = np.random.default_rng(1).normal(size=16)
        np.testing.assert_array_equal(net.forward(z, 7).data,
                                      net.forward(z, 7).data)

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError):
            UNetLite(15, ParamStore())


class TestMfaModule:
    def test_gamma_zero_identity(self):
        store = ParamStore(dtype=np.float64)
        mfa = MfaModule(16, store, gamma=0.0)
        rng = np.random.default_rng(0)
        cur = rng.normal(size=16)
        out = mfa.fuse(cur, [rng.normal(size=16)])
        np.testing.assert_array_equal(out.data, cur)

    def test_attention_rows_sum_to_one(self):
        store = ParamStore(dtype=np.float64)
        rng = np.random.default_rng(1)
        for crossed in (False, True):
            mfa = MfaModule(16, ParamStore(dtype=np.float64), crossed=crossed)
            rows = mfa.attention_rows(rng.normal(size=16),
                                      [rng.normal(size=16)] * 2)
            assert np.all(rows >= 0)
            np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-9)

    def test_empty_previous_rejected(self):
        mfa = MfaModule(16, ParamStore())
        with pytest.raises(ValueError):
            mfa.fuse(np.zeros(16), [])

    def test_padding_path(self):
        # length not divisible by token size exercises the pad/crop path
        store = ParamStore(dtype=np.float64)
        mfa = MfaModule(18, store, d_tok=4, gamma=0.0)
        cur = np.random.default_rng(2).normal(size=18)
        out = mfa.fuse(cur, [np.ones(18)])
        np.testing.assert_array_equal(out.data, cur)


class TestResidualPredictor:
    def test_shape_preserving_with_and_without_context(self):
        store = ParamStore(dtype=np.float64)
        net = ResidualPredictor(16, store, widths=(4, 8))
        rng = np.random.default_rng(0)
        z = rng.normal(size=16)
        assert net.forward(z, 3, []).data.shape == (16,)
        assert net.forward(z, 3, [rng.normal(size=16)]).data.shape == (16,)

    def test_full_network_finite_difference(self):
        """Gradient of a scalar loss through MFA + U-Net matches FD."""
        store = ParamStore(dtype=np.float64)
        net = ResidualPredictor(8, store, widths=(3, 6), d_tok=4, gamma=0.3)
        # nonzero head so gradients reach every layer
        store["residual.unet.out_w"].data = np.random.default_rng(1).normal(
            0, 0.3, (1, 3, 5))
        rng = np.random.default_rng(2)
        z = rng.normal(size=8)
        ctx = [rng.normal(size=8)]

        def loss_value():
            return float(nk.mean(nk.square(net.forward(z, 4, ctx))).data)

        for s in store.params.values():
            s.grad = None
        nk.mean(nk.square(net.forward(z, 4, ctx))).backward()

        h = 1e-5
        worst = 0.0
        for name, p in store.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            idxs = range(flat.size) if flat.size <= 20 else \
                np.random.default_rng(3).choice(flat.size, 20, replace=False)
            for j in idxs:
                orig = flat[j]
                flat[j] = orig + h
                up = loss_value()
                flat[j] = orig - h
                dn = loss_value()
                flat[j] = orig
                num = (up - dn) / (2 * h)
                ana = grad.reshape(-1)[j]
                scale = max(abs(num), abs(ana), 1e-3)
                worst = max(worst, abs(num - ana) / scale)
        assert worst < 1e-4, f"residual-predictor FD mismatch {worst:.3e}"


class TestNetNoisePredictor:
    def test_context_window_truncation(self):
        store = ParamStore(dtype=np.float64)
        net = ResidualPredictor(16, store, widths=(4, 8))
        pred = NetNoisePredictor(net, window=2)
        rng = np.random.default_rng(0)
        ctx = [rng.normal(size=16) for _ in range(5)]
        out_full = pred.predict(rng.normal(size=16), 3, context=ctx)
        assert out_full.shape == (16,)
