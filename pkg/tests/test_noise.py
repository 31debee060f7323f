import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cef.noise import (
    INF,
    ensemble_noise,
    format_rho,
    generate_gp_sequence,
    generate_sequence,
    ou_step,
    parse_rho,
    sample_initial,
    standard_normal,
    stream_key,
)

LN10 = math.log(10)


def test_parse_and_format_rho():
    assert parse_rho("inf") is INF and parse_rho(" INF ") is INF and parse_rho(float("inf")) is INF
    assert parse_rho(0) == 0.0 and parse_rho("2.5") == 2.5
    assert format_rho(INF) == "inf" and format_rho(1.5) == 1.5
    for bad in (-1, float("nan"), True, "-inf"):
        with pytest.raises(ValueError):
            parse_rho(bad)


def test_stream_key_ranges():
    assert not np.array_equal(stream_key(1, 2, 3, 4), stream_key(1, 2, 4, 3))
    with pytest.raises(ValueError):
        stream_key(0, -1)
    with pytest.raises(ValueError):
        stream_key(0, 0, index=1 << 20)


def test_sample_initial_deterministic():
    a = sample_initial(3, (2, 4, 8), 99)
    assert np.array_equal(a, sample_initial(3, (2, 4, 8), 99))
    assert not np.array_equal(a, sample_initial(3, (2, 4, 8), 98))
    assert not np.array_equal(a, sample_initial(3, (2, 4, 8), 99, block=1))


def test_members_uncorrelated():
    a = sample_initial(1, 100_000, 5)
    b = sample_initial(2, 100_000, 5)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_initial_moments():
    z = sample_initial(0, 1_000_000, 11)
    assert abs(z.mean()) < 0.004 and abs(z.var() - 1) < 0.005


def test_prefix_consistency():
    # entry offset is the counter: a longer draw extends a shorter one
    short = standard_normal(10, 4, 2, 3)
    long = standard_normal(1000, 4, 2, 3)
    assert np.array_equal(short, long[:10])


def test_ou_step_examples(rng):
    z, nu = rng.normal(size=(2, 50))
    assert np.array_equal(ou_step(z, 1.0, 0.0, nu), z)
    assert np.array_equal(ou_step(z, 1.0, INF, nu), nu)
    out = ou_step(z, 1.0, LN10, nu)
    assert np.allclose(out, 0.1 * z + math.sqrt(0.99) * nu, rtol=1e-14)
    assert math.sqrt(0.99) == pytest.approx(0.99498743710662, rel=1e-12)
    with pytest.raises(ValueError):
        ou_step(z, 1.0, -0.5, nu)
    with pytest.raises(ValueError):
        ou_step(z, 0.0, 1.0, nu)
    with pytest.raises(ValueError):
        ou_step(z, 1.0, 1.0, nu[:3])


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_ou_step_preserves_unit_variance(rho, dt):
    a = math.exp(-rho * dt)
    b = math.sqrt(-math.expm1(-2 * rho * dt))
    assert a * a + b * b == pytest.approx(1.0, abs=1e-14)


def test_sequence_rho_zero_constant():
    seq = generate_sequence([1, 2, 5], 0.0, 0, 3, (2, 3))
    assert all(np.array_equal(seq.fields[0], f) for f in seq.fields)
    assert np.array_equal(seq.fields[0], sample_initial(0, (2, 3), 3))


def test_sequence_rejects_bad_times():
    for times in ([1, 1], [2, 1], []):
        with pytest.raises(ValueError):
            generate_sequence(times, 1.0, 0, 0, (2,))


def test_sequence_lag_correlations():
    # one member with many entries is equivalent to many scalar members
    seq = generate_sequence([1, 2, 4], LN10, 0, 21, (100_000,))
    f = seq.fields
    assert abs(np.corrcoef(f[0], f[1])[0, 1] - 0.1) < 0.02
    assert abs(np.corrcoef(f[1], f[2])[0, 1] - 0.01) < 0.02
    for row in f:
        assert abs(row.var() - 1) < 0.02


def test_member_order_independence():
    times = [0.5, 1.0, 3.0]
    fwd = ensemble_noise(times, 0.7, range(6), 8, (3, 4))
    rev = ensemble_noise(times, 0.7, range(5, -1, -1), 8, (3, 4))[::-1]
    assert np.array_equal(fwd, rev)
    one = generate_sequence(times, 0.7, 4, 8, (3, 4)).fields
    assert np.array_equal(fwd[4], one)


def test_gp_sequence_properties():
    times = [0.0, 0.1, 0.2, 1.0]
    seq = generate_gp_sequence(times, 0.5, 0, 1, (200_000,))
    for row in seq.fields:
        assert abs(row.var() - 1) < 0.02
    r01 = np.corrcoef(seq.fields[0], seq.fields[1])[0, 1]
    assert abs(r01 - math.exp(-0.5 * (0.1 / 0.5) ** 2)) < 0.02
    assert abs(np.corrcoef(seq.fields[0], seq.fields[3])[0, 1] - math.exp(-2)) < 0.02
