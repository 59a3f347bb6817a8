import numpy as np
import pytest

from ssdiff.denoiser import OracleDenoiser
from ssdiff.errors import ChainError, ParameterError, ShapeError
from ssdiff.process import EXACT, ISOTROPIC_APPROX
from ssdiff.sampler import AUX_STREAM, EPS_STREAM, ChainRng, sample_batch, sample_chain


class _Broken:
    """Oracle that fails, or returns a bad shape, at one step."""

    def __init__(self, p, fail_at, shape=None):
        self.inner = OracleDenoiser(np.zeros(p.shape(0)), p)
        self.fail_at, self.shape = fail_at, shape

    def predict(self, x_t, t):
        if t == self.fail_at:
            if self.shape:
                return np.zeros(self.shape)
            raise ShapeError("boom")
        return self.inner.predict(x_t, t)


def test_rng_is_counter_based():
    a = ChainRng(5, 2).normal(10, EPS_STREAM, 4)
    np.testing.assert_array_equal(a, ChainRng(5, 2).normal(10, EPS_STREAM, 4))
    assert not np.array_equal(a, ChainRng(5, 2).normal(10, AUX_STREAM, 4))
    assert not np.array_equal(a, ChainRng(5, 3).normal(10, EPS_STREAM, 4))
    assert not np.array_equal(a, ChainRng(6, 2).normal(10, EPS_STREAM, 4))


@pytest.mark.parametrize("mode", [EXACT, ISOTROPIC_APPROX])
def test_oracle_reconstructs(three_level, rng, mode):
    x0 = rng.uniform(-1, 1, three_level.shape(0))
    out, _ = sample_chain(three_level, OracleDenoiser(x0, three_level), ChainRng(0), mode)
    assert np.max(np.abs(out - x0)) <= 1e-5


def test_deterministic_per_seed(two_level):
    from ssdiff.denoiser import MlpDenoiser

    m = MlpDenoiser.create(two_level.resolution, 1, hidden=8, zero_output=False)
    a, _ = sample_chain(two_level, m, ChainRng(3))
    b, _ = sample_chain(two_level, m, ChainRng(3))
    c, _ = sample_chain(two_level, m, ChainRng(4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_batch_of_one_matches_chain(two_level):
    from ssdiff.denoiser import MlpDenoiser

    m = MlpDenoiser.create(two_level.resolution, 1, hidden=8, zero_output=False)
    single, _ = sample_chain(two_level, m, ChainRng(9, 0))
    (batched,), _ = sample_batch(two_level, m, 1, 9)
    np.testing.assert_array_equal(single, batched)


def test_batch_chains_match_solo_runs(two_level):
    from ssdiff.denoiser import MlpDenoiser

    m = MlpDenoiser.create(two_level.resolution, 1, hidden=8, zero_output=False)
    xs, _ = sample_batch(two_level, m, 3, 11)
    for i, x in enumerate(xs):
        solo, _ = sample_chain(two_level, m, ChainRng(11, i))
        np.testing.assert_allclose(x, solo, atol=1e-6)


def test_trajectory_records_stride_and_transitions(three_level, rng):
    x0 = rng.uniform(-1, 1, three_level.shape(0))
    _, traj = sample_chain(three_level, OracleDenoiser(x0, three_level), ChainRng(0), record=True, stride=25)
    ts = [s.t for s in traj.steps]
    assert ts == sorted(ts, reverse=True)
    for t in (100, 75, 50, 25, 1, *three_level.resolution.transitions):
        assert t in ts
    for t, r in traj.resolutions():
        assert r == three_level.resolution.r(t)


def test_no_trajectory_by_default(two_level, rng):
    _, traj = sample_chain(two_level, OracleDenoiser(rng.standard_normal((1, 8, 8)), two_level), ChainRng(0))
    assert traj is None


def test_denoiser_error_becomes_chain_error(two_level):
    with pytest.raises(ChainError) as info:
        sample_chain(two_level, _Broken(two_level, 30), ChainRng(0))
    assert info.value.t == 30


def test_wrong_prediction_shape(two_level):
    t = two_level.resolution.transitions[0]
    with pytest.raises(ChainError) as info:
        sample_chain(two_level, _Broken(two_level, t, shape=(1, 1, 2, 2)), ChainRng(0))
    assert info.value.t == t


@pytest.mark.parametrize("kwargs", [{"mode": "fast"}, {"stride": 0}])
def test_bad_arguments(two_level, rng, kwargs):
    d = OracleDenoiser(rng.standard_normal((1, 8, 8)), two_level)
    with pytest.raises(ParameterError):
        sample_chain(two_level, d, ChainRng(0), **kwargs)
    with pytest.raises(ParameterError):
        sample_batch(two_level, d, 0, 0)
