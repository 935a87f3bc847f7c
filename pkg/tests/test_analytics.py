import itertools
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from helpers import make_corridor
from vslmarl.analytics import (EmpiricalDistribution, SpeedField, attribution_summary, limit_grids,
                               mismatch_matrix, sample_observations, speed_field,
                               time_space_export, virtual_vehicle, vsl_encounter_series,
                               wasserstein_distance)
from vslmarl.corridor import Measurement

DAY0 = 1713744000.0  # 2024-04-22 00:00 UTC


def rec(tick, gid, attribution, final=70, obs=None):
    return {"tick": tick, "gantry_id": gid, "observation": obs, "policy_action": final,
            "after_sm": final, "after_mslc": final, "final": final, "attribution": attribution,
            "interpolated": False}


def day_records(day, counts, t0=8 * 3600):
    out = []
    k = 0
    for cat, n in counts.items():
        for _ in range(n):
            out.append(rec(DAY0 + 86400 * day + t0 + 30 * k, f"G{k % 3 + 1}", cat))
            k += 1
    return out


# attribution -------------------------------------------------------------------

def test_attribution_simple_percentages():
    s = attribution_summary(day_records(0, {"Policy": 8, "MSLC": 2}))
    assert s.mean["Policy"] == 80.0 and s.mean["MSLC"] == 20.0
    assert s.mean["SM"] == 0.0 and s.mean["DB"] == 0.0
    assert all(v == 0.0 for v in s.std.values())  # single day


def test_attribution_three_day_oracle():
    recs = (day_records(0, {"Policy": 8, "MSLC": 2}) + day_records(1, {"Policy": 6, "SM": 2, "DB": 2})
            + day_records(2, {"Policy": 10}))
    s = attribution_summary(recs)
    assert s.mean["Policy"] == pytest.approx(80.0)
    assert s.std["Policy"] == pytest.approx(math.sqrt(800 / 3))
    for cat in ("SM", "MSLC", "DB"):
        assert s.mean[cat] == pytest.approx(20 / 3)
        assert s.std[cat] == pytest.approx(math.sqrt(800 / 9))
    for day in s.per_day.values():
        assert abs(sum(day.values()) - 100.0) <= 0.1
    assert s.n_decisions == 30


def test_attribution_filters():
    c = make_corridor(3, maxima=[70, 55, 70])
    recs = [rec(DAY0 + 7 * 3600, "G1", "Policy"), rec(DAY0 + 7 * 3600, "G2", "MSLC"),
            rec(DAY0 + 12 * 3600, "G3", "SM")]
    s = attribution_summary(recs, c, exclude_custom=True)
    assert s.mean["Policy"] == 50.0 and s.mean["SM"] == 50.0 and s.mean["MSLC"] == 0.0
    s = attribution_summary(recs, c, direction="decreasing", peak_hours=True)
    assert s.n_decisions == 2 and s.filters["peak_hours"] == (6.0, 9.0)
    # local clock shifted by -5 h moves the 12:00 UTC record into 07:00
    s = attribution_summary(recs, c, peak_hours=(6, 9), utc_offset_hours=-5)
    assert s.n_decisions == 1 and s.mean["SM"] == 100.0


def test_attribution_empty_marker():
    c = make_corridor(3)
    s = attribution_summary(day_records(0, {"Policy": 3}), c, direction="increasing")
    assert s.empty and s.mean == {}


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 4), st.sampled_from(["Policy", "SM", "MSLC", "DB"])),
                min_size=1, max_size=60))
def test_attribution_days_sum_to_100(items):
    recs = [rec(DAY0 + 86400 * d + i, "G1", cat) for i, (d, cat) in enumerate(items)]
    s = attribution_summary(recs)
    for day in s.per_day.values():
        assert abs(sum(day.values()) - 100.0) <= 0.1
    assert abs(sum(s.mean.values()) - 100.0) <= 0.1


# Wasserstein -------------------------------------------------------------------

def w2_brute(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    n = len(a)
    best = min(sum(float(np.sum((a[i] - b[p[i]]) ** 2)) for i in range(n))
               for p in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def w2_replicated(a, b):
    """Unequal sizes via replication to a common size, then brute force."""
    n, m = len(a), len(b)
    L = n * m // math.gcd(n, m)
    return w2_brute(np.repeat(a, L // n, axis=0), np.repeat(b, L // m, axis=0))


def test_w2_identity_and_point_masses():
    a = np.random.default_rng(0).uniform(size=(20, 5))
    assert wasserstein_distance(a, a) == 0.0
    assert wasserstein_distance([[0.0]], [[1.0]]) == pytest.approx(1.0)
    assert wasserstein_distance(np.zeros(4), np.ones(4)) == pytest.approx(1.0)


def test_w2_matches_brute_force():
    rng = np.random.default_rng(1)
    for n in range(1, 9):
        for _ in range(3):
            a, b = rng.uniform(size=(n, 2)), rng.uniform(size=(n, 2))
            assert wasserstein_distance(a, b) == pytest.approx(w2_brute(a, b), abs=1e-12)


def test_w2_unequal_sizes_lp():
    rng = np.random.default_rng(2)
    for n, m in [(2, 3), (3, 2), (2, 4), (1, 5)]:
        a, b = rng.uniform(size=(n, 2)), rng.uniform(size=(m, 2))
        assert wasserstein_distance(a, b) == pytest.approx(w2_replicated(a, b), abs=1e-7)


def test_w2_dimension_mismatch():
    with pytest.raises(ValueError):
        wasserstein_distance(np.zeros((3, 2)), np.zeros((3, 5)))
    with pytest.raises(ValueError):
        wasserstein_distance(np.zeros((0, 2)), np.zeros((3, 2)))


def test_empirical_distribution_validation():
    with pytest.raises(ValueError):
        EmpiricalDistribution(np.zeros((0, 5)))
    with pytest.raises(ValueError):
        EmpiricalDistribution(np.full((2, 5), 1.5))
    assert EmpiricalDistribution(np.zeros(5)).samples.shape == (1, 5)


point_sets = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).uniform(size=(12, 5)))


@settings(max_examples=40, deadline=None)
@given(point_sets, point_sets, point_sets)
def test_w2_metric_axioms(a, b, c):
    ab, ba = wasserstein_distance(a, b), wasserstein_distance(b, a)
    assert ab >= 0
    assert abs(ab - ba) <= 1e-9
    assert wasserstein_distance(a, c) <= ab + wasserstein_distance(b, c) + 1e-9


@settings(max_examples=30, deadline=None)
@given(point_sets, point_sets, st.floats(0.01, 100))
def test_w2_scaling(a, b, c):
    assert wasserstein_distance(c * a, c * b) == pytest.approx(c * wasserstein_distance(a, b), rel=1e-9)


def test_mismatch_matrix_composition():
    rng = np.random.default_rng(3)
    ds = [rng.uniform(size=(15, 5)) for _ in range(3)]
    m = mismatch_matrix(ds)
    for i, j in itertools.product(range(3), repeat=2):
        expected = 0.0 if i == j else wasserstein_distance(ds[i], ds[j])
        assert m[i, j] == pytest.approx(expected, abs=1e-12)
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_allclose(mismatch_matrix(ds, n_jobs=2), m)
    assert np.all(mismatch_matrix([ds[0], ds[0]]) == 0)
    with pytest.raises(ValueError):
        mismatch_matrix(ds[:1])


def test_sample_observations_skips_failsafe():
    recs = [rec(0, "G1", "Policy", obs=[0.5] * 5), rec(0, "G2", "FailSafe")]
    d = sample_observations(recs, 4, np.random.default_rng(0))
    assert d.samples.shape == (4, 5) and np.all(d.samples == 0.5)
    with pytest.raises(ValueError):
        sample_observations([rec(0, "G2", "FailSafe")], 4, np.random.default_rng(0))


# virtual vehicle -------------------------------------------------------------------

def field(speeds_by_mp, n_bins=40, direction="increasing", bin_s=30.0):
    mps = np.array(sorted(speeds_by_mp))
    row = [speeds_by_mp[m] for m in mps]
    return SpeedField(np.arange(n_bins) * bin_s, mps, np.tile(row, (n_bins, 1)), direction, bin_s)


def test_uniform_sixty_one_mile_per_minute():
    f = field({m: 60.0 for m in np.arange(0, 10.5, 0.5)})
    traj = virtual_vehicle(f, 0.0, 1.0)
    assert traj[2][1] == pytest.approx(2.0) and traj[2][0] == 60.0
    assert traj[-1][1] == pytest.approx(10.0)
    assert traj[-1][0] == pytest.approx(9 * 60.0)


def test_zero_field_uses_floor():
    f = field({0.0: 0.0, 5.0: 0.0}, n_bins=10)
    traj = virtual_vehicle(f, 0.0, 0.0)
    xs = [x for _, x, _ in traj]
    assert np.allclose(np.diff(xs), 2.0 * 30 / 3600)
    assert len(traj) == 10  # runs until the recording ends


def test_two_region_crossing_time():
    speeds = {m: (60.0 if m <= 2.0 else 30.0) for m in np.arange(0, 5.5, 0.5)}
    traj = virtual_vehicle(field(speeds), 0.0, 0.0)
    t_exit, x_exit, _ = traj[-1]
    assert x_exit == pytest.approx(5.0)
    assert t_exit == pytest.approx((2.5 / 60 + 2.5 / 30) * 3600)


def test_partial_last_step_and_decreasing_direction():
    f = field({m: 60.0 for m in (50.0, 51.0, 52.0)}, direction="decreasing")
    traj = virtual_vehicle(f, 15.0, 51.8)
    xs = [x for _, x, _ in traj]
    assert all(b < a for a, b in zip(xs, xs[1:]))
    assert xs[-1] == pytest.approx(50.0)
    assert traj[-1][0] == pytest.approx(15.0 + 1.8 * 60.0)


def test_vehicle_start_outside_rejected():
    f = field({0.0: 60.0, 1.0: 60.0}, n_bins=4)
    with pytest.raises(ValueError):
        virtual_vehicle(f, 0.0, 2.0)
    with pytest.raises(ValueError):
        virtual_vehicle(f, 500.0, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000))
def test_vehicle_positions_strictly_monotone(seed):
    rng = np.random.default_rng(seed)
    mps = np.arange(0, 5.5, 0.5)
    f = SpeedField(np.arange(30) * 30.0, mps, rng.uniform(0, 75, (30, len(mps))), "increasing")
    xs = [x for _, x, _ in virtual_vehicle(f, 0.0, float(rng.uniform(0, 4)))]
    assert all(b > a for a, b in zip(xs, xs[1:]))


def test_speed_field_from_measurements():
    c = make_corridor(2)  # sensors at 59.9 and 60.4
    meas = [Measurement("S1", 30.0, 50.0, 0.1), Measurement("S2", 30.0, 70.0, 0.0),
            Measurement("S1", 40.0, 30.0, 0.1), Measurement("S1", 90.0, 20.0, 0.1),
            Measurement("S2", 90.0, 60.0, 0.0)]
    f = speed_field(meas, c)
    assert f.times.tolist() == [30.0, 60.0, 90.0]  # contiguous: empty bin filled forward
    assert f.mileposts.tolist() == [59.9, 60.4]
    assert f.speeds[0].tolist() == [40.0, 70.0]
    assert f.speeds[1].tolist() == [40.0, 70.0]
    assert f.speeds[2].tolist() == [20.0, 60.0]


# encounter series ------------------------------------------------------------------

def toy_log():
    recs = [rec(0.0, g, "Policy", 70) for g in ("G1", "G2", "G3")]
    recs += [rec(60.0, "G1", "Policy", 50), rec(60.0, "G2", "Policy", 60), rec(60.0, "G3", "Policy", 70)]
    return recs


def test_encounter_hand_trace():
    c = make_corridor(3)  # G1 at 60.0 (downstream), G2 60.5, G3 61.0
    traj = [(0.0, 61.2, 60.0), (30.0, 60.7, 60.0), (60.0, 60.2, 60.0), (90.0, 59.7, 60.0)]
    series = vsl_encounter_series(traj, toy_log(), c)
    assert [lim for _, _, lim in series] == [70, 70, 50, None]
    assert [v for _, v, _ in series] == [60.0] * 4


def test_encounter_constant_limits():
    c = make_corridor(3)
    recs = [rec(t, g, "Policy", 70) for t in (0.0, 30.0, 60.0) for g in ("G1", "G2", "G3")]
    traj = [(t, 61.0 - t / 60, 60.0) for t in (0.0, 30.0, 60.0)]
    assert [lim for _, _, lim in vsl_encounter_series(traj, recs, c)] == [70, 70, 70]


# time-space export -----------------------------------------------------------------

def test_grids_mask_and_shape(tmp_path):
    c = make_corridor(3)
    recs = [rec(t, g, "Policy", 70) for t in (0.0, 30.0) for g in ("G1", "G2", "G3")]
    full, masked = limit_grids(recs, c)
    assert full.shape == (2, 3)
    pd.testing.assert_frame_equal(full, masked)
    recs[4] = dict(recs[4], attribution="MSLC", final=50)
    full, masked = limit_grids(recs, c)
    assert masked.isna().sum().sum() == 1
    assert math.isnan(masked.loc[30.0, "G2"]) and full.loc[30.0, "G2"] == 50
    paths = time_space_export(tmp_path, c, recs)
    lines = paths["limits_policy_only"].read_text().splitlines()
    assert lines[0] == "tick,G1,G2,G3"  # columns by milepost
    assert lines[2] == "30.0,70,,70"


def test_export_requires_input(tmp_path):
    with pytest.raises(ValueError):
        time_space_export(tmp_path, make_corridor(2))
