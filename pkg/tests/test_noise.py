import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ergoflow.noise import (
    GridError,
    NoisePath,
    dump_rows,
    reversed_view,
    rotated_view,
    shifted_view,
    to_steps,
)

DT = 1e-3


def test_reads_are_bit_identical():
    p = NoisePath(42, DT)
    a = p.increments(0, 5)
    b = NoisePath(42, DT).increments(0, 5)
    assert a.tobytes() == b.tobytes() == p.increments(0, 5).tobytes()


def test_seeds_are_separated():
    assert NoisePath(42, DT).increments(0, 1)[0] != NoisePath(43, DT).increments(0, 1)[0]


def test_sides_are_independent_streams():
    p = NoisePath(7, DT)
    assert not np.array_equal(p.side(1, 0, 100), p.side(-1, 0, 100))


def test_extension_keeps_existing_increments():
    p = NoisePath(42, DT)
    first = p.increments(0, 1000).copy()
    p.extend(t_plus=2.0)
    assert p.increments(0, 2000)[:1000].tobytes() == first.tobytes()
    assert p.horizon_plus == pytest.approx(2.0)


def test_random_access_matches_sequential():
    p = NoisePath(5, DT)
    whole = p.increments(-300, 300)
    parts = np.concatenate([p.increments(-300, -17), p.increments(-17, 120), p.increments(120, 300)])
    assert whole.tobytes() == parts.tobytes()


def test_batch_columns_equal_single_seed_paths():
    seeds = np.array([3, 11, 12])
    batch = NoisePath(seeds, DT).increments(-50, 50)
    for k, s in enumerate(seeds):
        assert batch[:, k].tobytes() == NoisePath(int(s), DT).increments(-50, 50).tobytes()


def test_variance_of_a_million_increments():
    x = NoisePath(2024, DT).side(1, 0, 1_000_000)
    assert abs(x.var() / DT - 1) < 0.01
    assert abs(x.mean()) < 5 * np.sqrt(DT / len(x))


def test_weighted_sums_independent_across_seed_blocks():
    # KS p-values of disjoint 1000-seed blocks must themselves look uniform
    from scipy import stats

    n = 2000
    w = np.exp(-DT * np.arange(n))[:, None]
    sd = np.sqrt(DT * np.sum(w**2))
    pvals = []
    for b in range(30):
        s = (w * NoisePath(np.arange(b * 1000, (b + 1) * 1000), DT).increments(0, n)).sum(axis=0)
        pvals.append(stats.kstest(s, stats.norm(scale=sd).cdf).pvalue)
    assert stats.kstest(pvals, "uniform").pvalue > 0.01


def test_two_sided_gluing():
    p = NoisePath(9, DT)
    assert np.all(p.b(0) == 0)
    # d(-1) = -db_minus[0], so b(-dt) = db_minus[0]
    assert p.increments(-1, 0)[0] == -p.side(-1, 0, 1)[0]
    assert p.b(-1) == pytest.approx(p.side(-1, 0, 1)[0])
    assert p.b(3) == pytest.approx(p.side(1, 0, 3).sum())


def test_zero_path():
    assert not NoisePath.zeros(DT).increments(-10, 10).any()


@pytest.mark.parametrize("t", [0.0005, 1.0000001, 1 / 3])
def test_off_grid_times_rejected(t):
    with pytest.raises(GridError):
        to_steps(t, DT)


def test_snapped_times_accepted():
    assert to_steps(0.1 + 0.2, 0.1) == 3


def test_reversed_three_increments():
    p = NoisePath(1, DT)
    a, b, c = p.increments(0, 3)
    np.testing.assert_array_equal(reversed_view(p, 3 * DT).increments(0, 3), [-c, -b, -a])


def test_reversed_sum_is_minus_b_T():
    p = NoisePath(1, DT)
    assert reversed_view(p, 1.0).increments(0, 1000).sum() == pytest.approx(-p.b(1000), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**62), n=st.integers(1, 400))
def test_double_reversal_is_identity(seed, n):
    p = NoisePath(seed, DT)
    T = n * DT
    rr = reversed_view(reversed_view(p, T), T)
    assert rr.increments(0, n).tobytes() == p.increments(0, n).tobytes()


def test_reversed_view_rejects_off_grid():
    with pytest.raises(GridError):
        reversed_view(NoisePath(1, DT), 0.0015)


def test_shift_by_zero_is_identity():
    p = NoisePath(4, DT)
    assert shifted_view(p, 0.0).increments(-20, 20).tobytes() == p.increments(-20, 20).tobytes()


def test_shift_by_dt_drops_one():
    p = NoisePath(4, DT)
    np.testing.assert_array_equal(shifted_view(p, DT).increments(0, 10), p.increments(1, 11))


def test_shift_across_the_seam():
    p = NoisePath(4, DT)
    v = shifted_view(p, -DT)
    assert v.increments(0, 1)[0] == -p.side(-1, 0, 1)[0]
    np.testing.assert_array_equal(v.increments(1, 5), p.side(1, 0, 4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**62), s=st.integers(-500, 500), t=st.integers(-500, 500))
def test_shifts_compose(seed, s, t):
    p = NoisePath(seed, DT)
    a = shifted_view(shifted_view(p, s * DT), t * DT).increments(-5, 5)
    b = shifted_view(p, (s + t) * DT).increments(-5, 5)
    assert a.tobytes() == b.tobytes()


def test_rotation():
    p = NoisePath(8, DT)
    r = rotated_view(p)
    assert rotated_view(r).increments(-30, 30).tobytes() == p.increments(-30, 30).tobytes()
    assert r.b(1) == pytest.approx(p.b(-1))
    # positive side of the rotation is the reflected, negated negative side
    np.testing.assert_array_equal(r.increments(0, 10), p.side(-1, 0, 10))
    np.testing.assert_array_equal(r.increments(-10, 0), -p.side(1, 0, 10)[::-1])


def test_views_do_not_touch_the_base():
    p = NoisePath(8, DT)
    before = p.increments(-100, 100).copy()
    v = reversed_view(shifted_view(rotated_view(p), 0.05), 0.1)
    v.increments(0, 100)
    assert p.increments(-100, 100).tobytes() == before.tobytes()


def test_dump_rows_are_csv_ready():
    rows = list(dump_rows(NoisePath(42, DT), 3))
    assert [r[:2] for r in rows] == [(0, "+"), (1, "+"), (2, "+"), (0, "-"), (1, "-"), (2, "-")]
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    back = list(csv.reader(io.StringIO(buf.getvalue())))
    assert float(back[0][2]) == rows[0][2]
