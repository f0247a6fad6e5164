import numpy as np
import pytest

from mdrnet import engine, network
from mdrnet.engine import Tensor, grad_check
from mdrnet.network import (
    DESCRIPTOR_DIM,
    NetworkError,
    convlstm_step,
    discriminate,
    encode_slice,
    generate_descriptor,
    init_params,
    load_descriptors,
    load_records,
    save_descriptors,
    save_records,
)

from conftest import make_tiny_encoder, make_tiny_lstm, scalar_convlstm_step


def zero_params(param_obj):
    for _, t in param_obj.tensors():
        t.data = np.zeros_like(t.data)


class TestEncodeSlice:
    def test_zero_slice_zero_biases_gives_zero(self):
        gen, _ = init_params(0, 4)
        with engine.no_grad():
            out = encode_slice(gen.encoder, Tensor(np.zeros((1, 30, 30))))
        assert out.shape == (256, 2, 2)
        assert not out.data.any()

    def test_output_shape(self, rng):
        gen, _ = init_params(1, 4)
        with engine.no_grad():
            out = encode_slice(gen.encoder, Tensor(rng.uniform(0, 1, (1, 30, 30))))
        assert out.shape == (256, 2, 2)

    def test_different_slices_differ(self, rng):
        gen, _ = init_params(2, 4)
        for _ in range(3):
            a = rng.uniform(0, 1, (1, 30, 30))
            b = rng.uniform(0, 1, (1, 30, 30))
            with engine.no_grad():
                fa = encode_slice(gen.encoder, Tensor(a)).data
                fb = encode_slice(gen.encoder, Tensor(b)).data
            assert not np.array_equal(fa, fb)

    def test_wrong_shape_rejected(self):
        gen, _ = init_params(0, 4)
        with pytest.raises(engine.EngineError):
            encode_slice(gen.encoder, Tensor(np.zeros((2, 30, 30))))


class TestConvLstmStep:
    def test_zero_everything_gives_half_gates(self, rng):
        p = make_tiny_lstm(rng)
        zero_params(p)
        x = Tensor(rng.normal(size=(1, 4, 2, 2)))
        zeros = Tensor(np.zeros((1, 4, 2, 2)))
        with engine.no_grad():
            h, c = convlstm_step(p, x, zeros, zeros)
        assert not c.data.any()
        assert not h.data.any()

    def test_zero_weights_closed_form(self, rng):
        p = make_tiny_lstm(rng)
        zero_params(p)
        c_prev = rng.normal(size=(1, 4, 2, 2))
        x = Tensor(rng.normal(size=(1, 4, 2, 2)))
        with engine.no_grad():
            h, c = convlstm_step(p, x, Tensor(np.zeros((1, 4, 2, 2))), Tensor(c_prev))
        assert np.array_equal(c.data, 0.5 * c_prev)
        assert np.array_equal(h.data, 0.5 * np.tanh(0.5 * c_prev))

    def test_matches_scalar_reference(self, rng):
        for _ in range(10):
            p = make_tiny_lstm(rng)
            x = rng.normal(size=(4, 2, 2))
            h0 = rng.normal(size=(4, 2, 2))
            c0 = rng.normal(size=(4, 2, 2))
            with engine.no_grad():
                h, c = convlstm_step(p, Tensor(x[None]), Tensor(h0[None]), Tensor(c0[None]))
            h_ref, c_ref = scalar_convlstm_step(p, x, h0, c0)
            denom = max(np.abs(h_ref).max(), np.abs(c_ref).max(), 1.0)
            assert np.abs(h.data[0] - h_ref).max() / denom < 1e-10
            assert np.abs(c.data[0] - c_ref).max() / denom < 1e-10

    def test_gate_ranges_and_state_bounds(self, rng):
        p = make_tiny_lstm(rng, scale=3.0)
        x = Tensor(rng.normal(size=(1, 4, 2, 2)) * 5)
        h = Tensor(np.zeros((1, 4, 2, 2)))
        c = Tensor(np.zeros((1, 4, 2, 2)))
        with engine.no_grad():
            for _ in range(20):
                c_prev = c.data.copy()
                h, c = convlstm_step(p, x, h, c)
                assert (np.abs(c.data) <= np.abs(c_prev) + 1.0 + 1e-12).all()
                # strict in exact arithmetic; sigmoid/tanh saturate to 1.0 in float
                assert (np.abs(h.data) <= 1.0).all()


class TestGenerateDescriptor:
    def test_zero_input_zero_params_gives_zero(self):
        gen, _ = init_params(0, 4)
        zero_params(gen.encoder)
        zero_params(gen.lstm)
        desc = generate_descriptor(gen, np.zeros((9, 30, 30)))
        assert desc.shape == (DESCRIPTOR_DIM,)
        assert not desc.any()

    def test_deterministic(self, rng):
        gen, _ = init_params(5, 4)
        mdr = rng.uniform(0, 1, (9, 30, 30))
        d1 = generate_descriptor(gen, mdr)
        d2 = generate_descriptor(gen, mdr)
        assert np.array_equal(d1, d2)

    def test_slice_order_matters(self, rng):
        gen, _ = init_params(6, 4)
        mdr = rng.uniform(0, 1, (9, 30, 30))
        d1 = generate_descriptor(gen, mdr)
        d2 = generate_descriptor(gen, mdr[::-1].copy())
        assert not np.array_equal(d1, d2)

    def test_wrong_shape_rejected(self):
        gen, _ = init_params(0, 4)
        with pytest.raises(NetworkError):
            generate_descriptor(gen, np.zeros((9, 30)))

    def test_hidden_readout_differs(self, rng):
        gen, _ = init_params(7, 4)
        mdr = rng.uniform(0, 1, (9, 30, 30))
        assert not np.array_equal(
            generate_descriptor(gen, mdr, readout="cell"),
            generate_descriptor(gen, mdr, readout="hidden"),
        )


class TestDiscriminate:
    def test_zero_params_uniform_softmax(self):
        _, dis = init_params(0, 4)
        for _, t in dis.tensors():
            t.data = np.zeros_like(t.data)
        with engine.no_grad():
            logits = discriminate(dis, np.zeros(DESCRIPTOR_DIM))
        assert logits.shape == (5,)
        assert np.allclose(engine.softmax(logits.data), 0.2)

    def test_output_width_is_n_plus_one(self):
        for n in (2, 4, 10):
            _, dis = init_params(1, n)
            assert dis.n_outputs == n + 1

    def test_matches_matvec_chain(self, rng):
        _, dis = init_params(3, 4)
        x = rng.normal(size=DESCRIPTOR_DIM)
        expected = x
        for i, (w, b) in enumerate(dis.layers):
            expected = w.data @ expected + b.data
            if i < len(dis.layers) - 1:
                expected = np.where(expected >= 0, expected, 0.2 * expected)
        with engine.no_grad():
            got = discriminate(dis, x).data
        assert np.allclose(got, expected, atol=1e-12)

    def test_dimension_mismatch(self):
        _, dis = init_params(0, 4)
        with pytest.raises(NetworkError):
            discriminate(dis, np.zeros(100))


class TestInitParams:
    def test_deterministic(self):
        g1, d1 = init_params(11, 4)
        g2, d2 = init_params(11, 4)
        for (n1, t1), (n2, t2) in zip(
            g1.tensors() + d1.tensors(), g2.tensors() + d2.tensors()
        ):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)

    def test_forget_bias_ones_other_biases_zero(self):
        gen, dis = init_params(0, 4)
        assert np.array_equal(gen.lstm.b_f.data, np.ones(256))
        for t in (gen.lstm.b_i, gen.lstm.b_c, gen.lstm.b_o):
            assert not t.data.any()
        for _, b in gen.encoder.layers:
            assert not b.data.any()
        for _, b in dis.layers:
            assert not b.data.any()

    def test_weight_sample_means_near_zero(self):
        gen, dis = init_params(21, 4)
        for name, t in gen.tensors() + dis.tensors():
            if name.endswith(".b") or ".b_" in name:
                continue
            fan_in = t.data.shape[1] * (
                t.data.shape[2] * t.data.shape[3] if t.data.ndim == 4 else 1
            )
            s = np.sqrt(1.0 / fan_in)
            if t.data.ndim == 3:  # peephole tensors use channel fan-in
                s = np.sqrt(1.0 / t.data.shape[0])
            bound = 3.0 * s / np.sqrt(t.data.size)
            assert abs(t.data.mean()) < bound, name
            assert np.abs(t.data).max() <= s


class TestEndToEndGradient:
    def test_downsized_discriminate_of_descriptor(self, rng):
        enc = make_tiny_encoder(rng, channels=(2, 4), scale=0.4)
        lstm = make_tiny_lstm(rng, channels=4, scale=0.4)
        w1 = rng.normal(size=(5, 16)) * 0.4
        b1 = np.zeros(5)
        w2 = rng.normal(size=(3, 5)) * 0.4
        b2 = np.zeros(3)
        mdr = rng.uniform(0, 1, (1, 3, 6, 6))

        enc_arrays = [a for w, b in enc.layers for a in (w.data, b.data)]
        lstm_names = [n.split(".")[-1] for n, _ in lstm.tensors()]
        lstm_arrays = [t.data for _, t in lstm.tensors()]

        def f(ts):
            it = iter(ts)
            layers = [(next(it), next(it)) for _ in enc.layers]
            lp = network.ConvLstmParams(**dict(zip(lstm_names, [next(it) for _ in lstm_arrays])))
            wa, ba, wb, bb = next(it), next(it), next(it), next(it)
            x = next(it)
            b, t, hh, ww = x.shape
            feats = engine.reshape(x, (b * t, 1, hh, ww))
            for w, bias in layers:
                feats = engine.leaky_rectifier(engine.conv2d(feats, w, bias, stride=2), 0.2)
            _, ch, fh, fw = feats.shape
            feats = engine.reshape(feats, (b, t, ch, fh, fw))
            z = network.run_convlstm(lp, feats)
            h = engine.leaky_rectifier(engine.fully_connected(z, wa, ba), 0.2)
            logits = engine.fully_connected(h, wb, bb)
            return engine.softmax_cross_entropy(logits, np.array([1]))

        inputs = enc_arrays + lstm_arrays + [w1, b1, w2, b2, mdr]
        report = grad_check(f, inputs, tolerance=1e-4)
        assert report.passed, report


class TestCheckpointRecords:
    def test_round_trip(self, rng):
        records = {
            "a.w": rng.normal(size=(3, 4)),
            "/opt/a.w.m": rng.normal(size=(3, 4)),
            "/meta/scalar": np.float64(7.0),
        }
        loaded = load_records(save_records(records))
        assert list(loaded) == list(records)
        for k in records:
            assert np.array_equal(np.asarray(records[k]), loaded[k])

    def test_magic_enforced(self):
        with pytest.raises(NetworkError):
            load_records(b"NOTMAGIC" + bytes(16))


class TestDescriptorFiles:
    def test_round_trip(self, rng):
        ids = ["a_0001", "b_0002"]
        vecs = rng.normal(size=(2, DESCRIPTOR_DIM))
        got_ids, got_vecs = load_descriptors(save_descriptors(ids, vecs))
        assert got_ids == ids
        assert np.array_equal(got_vecs, vecs)  # 17 significant digits is exact

    def test_header(self):
        data = save_descriptors(["x"], np.zeros((1, DESCRIPTOR_DIM)))
        assert data.decode().splitlines()[0] == f"DDSD n=1 dim={DESCRIPTOR_DIM}"

    def test_dimension_enforced(self):
        with pytest.raises(NetworkError):
            save_descriptors(["x"], np.zeros((1, 100)))
