import numpy as np
import pytest

from ssdiff.denoiser import (
    AdamW,
    EvalPanel,
    Mlp,
    MlpDenoiser,
    OracleDenoiser,
    decode_checkpoint,
    encode_checkpoint,
    finite_difference_check,
    gaussian_blobs,
    load_checkpoint,
    loss_and_grads,
    sample_timesteps_batch,
    save_checkpoint,
    timestep_embedding,
    train,
    train_iter,
)
from ssdiff.errors import FormatError, ParameterError, ShapeError, TrainingError
from ssdiff.linops import materialize_dense
from ssdiff.schedules import make_resolution_schedule


@pytest.fixture(scope="module")
def model(request):
    from ssdiff.process import DiffusionProcess
    from ssdiff.schedules import linear_beta_schedule

    ns = linear_beta_schedule(50)
    p = DiffusionProcess(ns, make_resolution_schedule("equal", 1.0, [4, 8], 50), 1)
    return p, MlpDenoiser.create(p.resolution, 1, hidden=16, seed=3, zero_output=False)


class TestOracle:
    def test_target_is_cumulative_mean(self, two_level, rng):
        x0 = rng.uniform(-1, 1, two_level.shape(0))
        o = OracleDenoiser(x0, two_level)
        for t in (1, two_level.resolution.transitions[0] + 1, two_level.T):
            D = materialize_dense(two_level.cumulative_op(t - 1))
            want = D @ x0.ravel() / two_level.noise.a[t - 1]
            np.testing.assert_allclose(o.predict(np.zeros(two_level.shape(t)), t).ravel(), want, atol=1e-12)

    def test_broadcasts_batch(self, two_level, rng):
        o = OracleDenoiser(rng.standard_normal(two_level.shape(0)), two_level)
        out = o.predict(np.zeros((5,) + two_level.shape(3)), 3)
        assert out.shape == (5,) + two_level.shape(2)
        np.testing.assert_array_equal(out[0], out[4])


class TestMlp:
    def test_embedding(self):
        e = timestep_embedding(np.array([0, 7]), 8)
        assert e.shape == (2, 8)
        np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
        assert timestep_embedding(3).shape == (32,)
        with pytest.raises(ParameterError):
            timestep_embedding(1, 7)

    def test_zero_output_init(self, two_level):
        m = MlpDenoiser.create(two_level.resolution, 1, hidden=8)
        out = m.predict(np.ones((2,) + two_level.shape(5)), 5)
        np.testing.assert_array_equal(out, 0.0)

    def test_one_net_per_pair(self, two_level):
        m = MlpDenoiser.create(two_level.resolution, 1, hidden=8)
        assert set(m.nets) == {(8, 8), (4, 8), (4, 4)}
        net = m.nets[(4, 8)]
        assert (net.n_in, net.hidden, net.n_out) == (16 + 32, 8, 64)
        assert m.parameter_count == sum(v.size for n in m.nets.values() for v in n.params.values())

    def test_backward_matches_numeric(self):
        rng = np.random.default_rng(0)
        net = Mlp.init(5, 7, 3, rng, zero_output=False)
        X = rng.standard_normal((4, 5))
        G = rng.standard_normal((4, 3))
        out, cache = net.forward(X)
        grads = net.backward(cache, G)
        h = 1e-6
        for name, arr in net.params.items():
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = np.sum(net.forward(X)[0] * G)
            arr[idx] = old - h
            dn = np.sum(net.forward(X)[0] * G)
            arr[idx] = old
            assert grads[name][idx] == pytest.approx((up - dn) / (2 * h), rel=1e-6, abs=1e-8)

    def test_mixed_pair_batch_rejected(self, model):
        p, m = model
        t = p.resolution.transitions[0]
        with pytest.raises(ParameterError):
            m.forward(np.zeros((2, 1, 4, 4)), np.array([t, t + 1]))

    def test_wrong_shape(self, model):
        _, m = model
        with pytest.raises(ShapeError):
            m.predict(np.zeros((1, 1, 4, 4)), 1)


class TestCheckpoint:
    def test_round_trip(self, model, tmp_path):
        p, m = model
        save_checkpoint(tmp_path / "m.ssdw", m)
        back = load_checkpoint(tmp_path / "m.ssdw", p.resolution, 1)
        x = np.random.default_rng(0).standard_normal((3,) + p.shape(10))
        np.testing.assert_allclose(back.predict(x, 10), m.predict(x, 10), atol=1e-4)
        for k in m.nets:
            for n, v in m.nets[k].params.items():
                np.testing.assert_array_equal(back.nets[k].params[n], v.astype(np.float32))

    def test_layout(self):
        buf = encode_checkpoint({"ab": np.array([[1.0, 2.0]])})
        assert buf[:4] == b"SSDW" and buf[4:8] == b"\x01\x00\x00\x00"
        assert buf[8:12] == b"\x02\x00\x00\x00" and buf[12:14] == b"ab" and buf[14] == 2
        np.testing.assert_array_equal(decode_checkpoint(buf)["ab"], [[1.0, 2.0]])

    @pytest.mark.parametrize("cut", [3, 6, 13, 20])
    def test_truncated(self, cut):
        buf = encode_checkpoint({"ab": np.ones((2, 3))})
        with pytest.raises(FormatError):
            decode_checkpoint(buf[:cut])

    def test_bad_version(self):
        buf = bytearray(encode_checkpoint({}))
        buf[4] = 9
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(buf))

    def test_missing_or_mismatched(self, model, tmp_path):
        p, m = model
        path = tmp_path / "m.ssdw"
        path.write_bytes(encode_checkpoint({}))
        with pytest.raises(FormatError):
            load_checkpoint(path, p.resolution, 1)
        save_checkpoint(path, m)
        with pytest.raises(FormatError):
            load_checkpoint(path, p.resolution, 3)


class TestTraining:
    def test_timestep_batches_share_a_pair(self, two_level):
        rs = two_level.resolution
        rng = np.random.default_rng(0)
        for _ in range(200):
            ts = sample_timesteps_batch(rs, 8, rng)
            assert len(ts) == 8
            assert len({(rs.r(t), rs.r(t - 1)) for t in ts}) == 1
        with pytest.raises(ParameterError):
            sample_timesteps_batch(rs, 0, rng)

    def test_loss_by_hand(self, model):
        p, m = model
        x0 = gaussian_blobs(2, channels=1, seed=4)
        ts = [5, 5]
        eps = np.random.default_rng(1).standard_normal((2,) + p.shape(5))
        loss, _, key = loss_and_grads(m, p, x0, ts, eps)
        a, s, ab = p.noise.a[5], p.noise.sigma[5], p.noise.alpha_bar[5]
        x_t = a * p.resize_chain(5).apply(x0) + s * eps
        err = m.predict(x_t, 5) - p.resize_chain(4).apply(x0)
        w = min(ab / (1 - ab), 5.0)
        assert key == (8, 8)
        assert loss == pytest.approx(w * np.mean(np.sum(err.reshape(2, -1) ** 2, axis=1)), rel=1e-12)

    @pytest.mark.parametrize("which", ["scalar", "transition", "coarse"])
    def test_finite_differences(self, model, which):
        p, m = model
        t0 = p.resolution.transitions[0]
        t = {"scalar": 3, "transition": t0, "coarse": p.T}[which]
        x0 = gaussian_blobs(4, channels=1, seed=2)
        eps = np.random.default_rng(2).standard_normal((4,) + p.shape(t))
        assert finite_difference_check(m, p, x0, [t] * 4, eps, n_params=12) <= 1e-4

    def test_adamw_first_step(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = AdamW(lr=0.1, weight_decay=0.5)
        opt.step(params, {"w": np.array([3.0, -0.5])})
        # first bias-corrected step is sign(g) * lr, plus decoupled decay
        np.testing.assert_allclose(params["w"], [1.0 - 0.1 - 0.05, -2.0 + 0.1 + 0.1], atol=1e-7)

    def test_nonfinite_raises(self, model):
        p, m = model
        bad = gaussian_blobs(2, channels=1)
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError):
            train_iter(m, p, bad, np.random.default_rng(0), AdamW())

    def test_blobs_in_range(self):
        x = gaussian_blobs(10, 3, 8, seed=1)
        assert x.shape == (10, 3, 8, 8) and x.min() >= -1 and x.max() <= 1
        np.testing.assert_array_equal(x, gaussian_blobs(10, 3, 8, seed=1))

    def test_short_run_reduces_panel_loss(self, two_level):
        data = gaussian_blobs(16, channels=1, seed=0)
        panel = EvalPanel.build(two_level, data, n_groups=16)
        res = train(two_level, data, 300, batch=8, lr=1e-3, hidden=32, eval_at=(1, 300), panel=panel)
        assert len(res.losses) == 300
        assert res.eval_losses[300] < res.eval_losses[1]
        again = train(two_level, data, 5, batch=8, lr=1e-3, hidden=32)
        first = train(two_level, data, 5, batch=8, lr=1e-3, hidden=32)
        assert again.losses == first.losses
