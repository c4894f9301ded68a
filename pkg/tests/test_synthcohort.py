import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohorts import truth_latents
from spdyn import odenet
from spdyn.latentode import propagate
from spdyn.synthcohort import CohortSpec, construct_names, gen_cohort, oracle_latents


@pytest.fixture(scope="module")
def cohort():
    return gen_cohort(CohortSpec(), seed=0)


def by_respondent(obs):
    out = {}
    for rec in obs:
        out.setdefault(rec.respondent, []).append(rec)
    return out


def test_same_seed_identical():
    spec = CohortSpec(n_respondents=20)
    a, b = gen_cohort(spec, 9), gen_cohort(spec, 9)
    for ra, rb in zip(a[0], b[0]):
        assert ra.respondent == rb.respondent and ra.time == rb.time
        for x, y in ((ra.p, rb.p), (ra.e, rb.e)):
            assert (x is None and y is None) or np.array_equal(x, y)
    assert np.array_equal(a[3].b0, b[3].b0) and np.array_equal(a[3].b1, b[3].b1)
    assert a[1].keys() == b[1].keys()


def test_different_seed_differs():
    spec = CohortSpec(n_respondents=5)
    assert not np.array_equal(gen_cohort(spec, 1)[3].b0, gen_cohort(spec, 2)[3].b0)


def test_item_ranges(cohort):
    obs = cohort[0]
    p = np.array([r.p for r in obs if r.p is not None])
    e = np.array([r.e for r in obs if r.e is not None])
    assert p.shape[1] == 28 and e.shape[1] == 58
    assert p.min() >= 0 and p.max() <= 3 and e.min() >= 0 and e.max() <= 7
    assert p.max() == 3 and e.max() == 7  # truncation is reached


def test_mean_observation_count(cohort):
    counts = [len(v) for v in by_respondent(cohort[0]).values()]
    assert len(counts) == 181
    assert abs(np.mean(counts) - 11.2) <= 0.1 * 11.2
    assert min(counts) >= 2 and max(counts) <= 23


def test_sp2_eligible_have_two_of_each_after_split(cohort):
    obs, _, _, truth = cohort
    groups = by_respondent(obs)
    assert truth.sp2_eligible.sum() == 120
    for rid in np.flatnonzero(truth.sp2_eligible):
        after = [r for r in groups[rid] if r.time > truth.split_time]
        assert sum(r.p is not None for r in after) >= 2
        assert sum(r.e is not None for r in after) >= 2
    for rid in np.flatnonzero(~truth.sp2_eligible):
        assert all(r.time <= truth.split_time for r in groups[rid])


def test_every_record_has_a_modality(cohort):
    assert all(r.p is not None or r.e is not None for r in cohort[0])


def test_times_strictly_increasing(cohort):
    for recs in by_respondent(cohort[0]).values():
        t = np.array([r.time for r in recs])
        assert np.all(np.diff(t) > 0) and t[0] >= 0


def test_battery_availability(cohort):
    _, b0, b1, truth = cohort
    assert len(b0) == 120
    assert set(b1) <= set(b0)
    assert all(truth.sp2_eligible[i] for i in b1)
    assert all(v.shape == (45,) for v in b0.values())


def test_zero_effects_keep_parameters():
    spec = CohortSpec(n_respondents=30, planted_b0={}, planted_b1={})
    truth = gen_cohort(spec, 4)[3]
    for rid, p in truth.params.items():
        if "sp2" in p:
            assert np.array_equal(p["sp1"].etas, p["sp2"].etas)


def test_planted_b1_moves_eta2_only():
    truth = gen_cohort(CohortSpec(n_respondents=30), 4)[3]
    diffs = np.array([p["sp2"].etas - p["sp1"].etas for p in truth.params.values() if "sp2" in p])
    assert np.all(diffs[:, [0, 2, 3]] == 0) and np.any(diffs[:, 1] != 0)


def test_planted_b0_enters_eta2_sp1():
    spec = CohortSpec(n_respondents=300, planted_b0={7: 0.4}, planted_b1={})
    truth = gen_cohort(spec, 5)[3]
    eta2 = np.array([truth.params[i]["sp1"].eta2 for i in range(300)])
    assert np.corrcoef(eta2, truth.b0[:, 7])[0, 1] > 0.6


def test_zero_missingness_all_admissible():
    obs, _, _, truth = gen_cohort(CohortSpec(n_respondents=50, missing_rate=0.0), 6)
    assert all(r.p is not None and r.e is not None for r in obs)
    data = odenet.prepare_cohort(truth_latents(obs, truth))
    assert len(data.respondents) == 50
    assert data.pairs.shape[0] == int(truth.sp2_eligible.sum())


@settings(max_examples=15)
@given(st.integers(0, 2 ** 31 - 1))
def test_oracle_matches_propagate(seed):
    obs, _, _, truth = gen_cohort(CohortSpec(n_respondents=3), seed)
    for rid, recs in by_respondent(obs).items():
        times = np.array([r.time for r in recs])
        zp, ze = oracle_latents(truth, rid, times)
        for sp, mask in (("sp1", times <= 7.0), ("sp2", times > 7.0)):
            if not mask.any():
                continue
            traj = propagate(truth.params[rid][sp], truth.resets[rid][sp], times[mask])
            np.testing.assert_allclose(zp[mask], traj.zp, rtol=0, atol=1e-12)
        # zE at an observed E time is the stored reset value
        sched = {**dict(zip(truth.resets[rid]["sp1"].times, truth.resets[rid]["sp1"].values))}
        if "sp2" in truth.resets[rid]:
            sched.update(zip(truth.resets[rid]["sp2"].times, truth.resets[rid]["sp2"].values))
        for k, r in enumerate(recs):
            if r.e is not None:
                assert ze[k] == sched[r.time]


def test_zero_dynamics_constant_trajectory():
    spec = CohortSpec(n_respondents=5, eta_low=(0, 0, 0, 0), eta_high=(0, 0, 0, 0),
                      planted_b0={}, planted_b1={})
    obs, _, _, truth = gen_cohort(spec, 2)
    for rid, recs in by_respondent(obs).items():
        times = np.array([r.time for r in recs])
        zp, _ = oracle_latents(truth, rid, times)
        assert np.all(zp == truth.params[rid]["sp1"].ic_p)


def test_spec_validation():
    with pytest.raises(ValueError):
        CohortSpec(obs_min=1)
    with pytest.raises(ValueError):
        CohortSpec(missing_rate=1.0)


def test_construct_names():
    assert construct_names(3) == ["c00", "c01", "c02"]
