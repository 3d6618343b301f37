import numpy as np
import pytest

from vpfp_lab.noise import GaussianIncrements, NoiseStreamSpec


def _draws(spec, n, steps, chunk=None):
    it = GaussianIncrements(spec, n, chunk)
    return np.array([it.next() for _ in range(steps)])


def test_chunking_does_not_change_values():
    spec = NoiseStreamSpec(123, 4)
    a = _draws(spec, 5, 37, chunk=1)
    b = _draws(spec, 5, 37, chunk=8)
    c = _draws(spec, 5, 37)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_particle_stream_is_independent_of_n():
    spec = NoiseStreamSpec(9)
    small = _draws(spec, 3, 20)
    big = _draws(spec, 11, 20)
    np.testing.assert_array_equal(small, big[:, :3])
    np.testing.assert_array_equal(small[:, 1], spec.particle_generator(1).standard_normal(20))


def test_streams_differ_across_replicas_and_purposes():
    s = NoiseStreamSpec(1)
    a = s.particle_generator(0).standard_normal(4)
    assert not np.array_equal(a, s.replica(1).particle_generator(0).standard_normal(4))
    assert not np.array_equal(a, s.initial_generator().standard_normal(4))
    assert not np.array_equal(s.aux_generator(0).standard_normal(4),
                              s.aux_generator(1).standard_normal(4))


def test_step_counter_and_validation():
    it = GaussianIncrements(NoiseStreamSpec(0), 2)
    next(it)
    it.next()
    assert it.step == 2
    with pytest.raises(ValueError):
        NoiseStreamSpec(-1)
    with pytest.raises(ValueError):
        NoiseStreamSpec(0, -2)
    with pytest.raises(ValueError):
        GaussianIncrements(NoiseStreamSpec(0), 0)
