"""Synthetic cohorts with known latent dynamics, batteries and planted effects.

Each respondent gets quarterly-ish observation times (jittered grid, one unit
= three months), true ODE parameters per sub-period, exogenous stressor
levels at every observed E time (these are the resets), and Poisson item
counts emitted from the latent values through a monotone softplus map and
truncated to the item range.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .latentode import ResetSchedule, SubPeriodParams, expm2, propagate


@dataclass
class ObservationRecord:
    respondent: int
    time: float
    p: np.ndarray | None = None
    e: np.ndarray | None = None


@dataclass
class CohortSpec:
    n_respondents: int = 181
    sp2_fraction: float = 120 / 181
    obs_mean: float = 11.2
    obs_sd: float = 6.1
    obs_min: int = 2
    obs_max: int = 23
    p_items: int = 28
    e_items: int = 58
    p_max: int = 3
    e_max: int = 7
    split_time: float = 7.0
    time_jitter: float = 0.2
    # uniform ranges for (eta1, eta2, eta3, eta4) before battery effects
    eta_low: tuple = (-0.6, -0.5, -0.15, -0.05)
    eta_high: tuple = (-0.45, 1.2, -0.02, 0.05)
    eta_change_sd: float = 0.0  # random sub-period change on top of planted B1 effects
    ic_p_mean: float = 0.0
    ic_p_sd: float = 0.5
    stress_level_mean: float = 0.0
    stress_level_sd: float = 1.0
    # observed stressor level = ODE prediction + N(0, sd) shock at each E observation
    stress_innovation_sd: float = 0.15
    latent_noise_sd: float = 0.0
    p_emission_scale: float = 1.5
    e_emission_scale: float = 2.0
    n_constructs: int = 45
    battery_retest_corr: float = 0.7
    b0_fraction: float = 120 / 181
    b1_fraction: float = 53 / 80  # among respondents with B0 and sp2 data
    # construct index -> additive effect on eta2 per standardized unit
    planted_b0: dict = field(default_factory=lambda: {0: 0.15, 1: -0.15, 2: 0.12, 3: -0.12, 4: 0.1})
    # construct index -> effect of the B1 innovation (change since B0) on eta2 in sp2
    planted_b1: dict = field(default_factory=lambda: {5: 0.2})
    missing_rate: float = 0.05

    def __post_init__(self):
        if self.n_respondents < 1 or self.obs_min < 2 or self.obs_max < self.obs_min:
            raise ValueError("invalid observation counts")
        if not 0 <= self.sp2_fraction <= 1 or not 0 <= self.missing_rate < 1:
            raise ValueError("fractions must lie in [0, 1]")
        self.planted_b0 = {int(k): float(v) for k, v in self.planted_b0.items()}
        self.planted_b1 = {int(k): float(v) for k, v in self.planted_b1.items()}


@dataclass
class Emission:
    slope: np.ndarray
    offset: np.ndarray
    scale: np.ndarray
    max_count: int

    def rates(self, z):
        a = self.slope * z + self.offset
        return self.scale * np.logaddexp(0.0, a)


@dataclass
class GroundTruth:
    params: dict  # respondent -> {"sp1": SubPeriodParams, "sp2": SubPeriodParams}
    resets: dict  # respondent -> {"sp1": ResetSchedule, "sp2": ResetSchedule}
    b0: np.ndarray  # (n, constructs), complete; availability is separate
    b1: np.ndarray
    b0_available: np.ndarray
    b1_available: np.ndarray
    sp2_eligible: np.ndarray
    planted_b0: dict
    planted_b1: dict
    emission_p: Emission
    emission_e: Emission
    split_time: float

    def subperiod_of(self, t):
        return "sp1" if t <= self.split_time else "sp2"


def construct_names(n):
    return [f"c{j:02d}" for j in range(n)]


def _choose_times(spec, rng, count, eligible):
    grid_sp1 = np.arange(0, int(spec.split_time))  # strictly inside sp1 after jitter
    if not eligible:
        count = min(count, grid_sp1.size)
        ks = rng.choice(grid_sp1, size=count, replace=False)
    else:
        grid_sp2 = np.arange(int(spec.split_time) + 1, spec.obs_max)
        count = max(count, 4)
        first = rng.choice(grid_sp1, size=2, replace=False)
        second = rng.choice(grid_sp2, size=2, replace=False)
        rest_pool = np.setdiff1d(np.arange(spec.obs_max), np.concatenate([first, second]))
        rest = rng.choice(rest_pool, size=min(count - 4, rest_pool.size), replace=False)
        ks = np.concatenate([first, second, rest])
    ks = np.sort(ks).astype(float)
    jitter = rng.uniform(-spec.time_jitter, spec.time_jitter, size=ks.size)
    jitter[ks == 0] = np.abs(jitter[ks == 0])
    return ks + jitter


def _counts(spec, rng, eligible):
    n = eligible.size
    raw = np.rint(rng.normal(spec.obs_mean, spec.obs_sd, size=n))
    counts = np.clip(raw, spec.obs_min, spec.obs_max).astype(int)
    cap1 = int(spec.split_time)
    counts[~eligible] = np.minimum(counts[~eligible], cap1)
    n_el = int(eligible.sum())
    if n_el:
        # raise eligible respondents' mean so the cohort mean stays on target
        target = (spec.obs_mean * n - counts[~eligible].sum()) / n_el
        raw2 = np.rint(rng.normal(target, spec.obs_sd, size=n_el))
        counts[eligible] = np.clip(raw2, 4, spec.obs_max).astype(int)
    return counts


def _missing_masks(spec, rng, times, split):
    """Per-time presence of P and E with at least two of each per sub-period.

    Only one modality is ever dropped at a time point, so every sampled time
    remains an observation.
    """
    present = rng.uniform(size=(times.size, 2)) >= spec.missing_rate
    both = ~present.any(axis=1)
    present[both, rng.integers(0, 2, size=int(both.sum()))] = True
    for in_sp in (times <= split, times > split):
        idx = np.flatnonzero(in_sp)
        if idx.size == 0:
            continue
        for col in range(2):
            # restore the earliest dropped entries until two remain
            for i in idx:
                if present[idx, col].sum() >= 2:
                    break
                present[i, col] = True
    return present[:, 0], present[:, 1]


def _emission(rng, items, max_count, scale):
    return Emission(slope=rng.uniform(0.8, 1.6, items), offset=rng.uniform(-1.5, 0.0, items),
                    scale=scale * rng.uniform(0.7, 1.3, items), max_count=max_count)


def _emit(rng, emission, z):
    lam = emission.rates(z)
    return np.minimum(rng.poisson(lam), emission.max_count).astype(np.int64)


def _simulate(params, times, has_e, rng, shock_sd, end=None):
    """Advance the true system through ``times``; E observations reset zE to
    the predicted value plus a shock.  Returns zP and (post-reset) zE at the
    times, the reset schedule and the state at ``end`` (if given)."""
    A = params.system_matrix
    state = np.array([params.ic_p, params.ic_e])
    now = params.t0
    zp, ze, rt, rv = [], [], [], []
    for t, observed_e in zip(times, has_e):
        state = expm2(A, t - now) @ state
        now = t
        if observed_e:
            state[1] += rng.normal(0.0, shock_sd)
            rt.append(t)
            rv.append(state[1])
        zp.append(state[0])
        ze.append(state[1])
    if end is not None:
        state = expm2(A, end - now) @ state
    return np.array(zp), np.array(ze), ResetSchedule(rt, rv), state


def gen_cohort(spec: CohortSpec, seed: int):
    """Return ``(observations, b0, b1, truth)``.

    ``b0``/``b1`` map respondent id -> construct vector for respondents whose
    battery was observed.  Respondent ids are 0..n-1.
    """
    root = np.random.SeedSequence(seed)
    glob_seq, resp_seq = root.spawn(2)
    grng = np.random.default_rng(glob_seq)
    n, v = spec.n_respondents, spec.n_constructs

    n_sp2 = int(round(spec.sp2_fraction * n))
    eligible = np.zeros(n, dtype=bool)
    eligible[grng.choice(n, size=n_sp2, replace=False)] = True
    counts = _counts(spec, grng, eligible)

    b0 = grng.standard_normal((n, v))
    rho = spec.battery_retest_corr
    innovation = grng.standard_normal((n, v))
    b1 = rho * b0 + np.sqrt(1 - rho ** 2) * innovation
    n_b0 = int(round(spec.b0_fraction * n))
    b0_avail = np.zeros(n, dtype=bool)
    b0_avail[grng.choice(n, size=n_b0, replace=False)] = True
    pool = np.flatnonzero(b0_avail & eligible)
    b1_avail = np.zeros(n, dtype=bool)
    if pool.size:
        b1_avail[grng.choice(pool, size=int(round(spec.b1_fraction * pool.size)), replace=False)] = True

    emission_p = _emission(grng, spec.p_items, spec.p_max, spec.p_emission_scale)
    emission_e = _emission(grng, spec.e_items, spec.e_max, spec.e_emission_scale)

    low, high = np.array(spec.eta_low), np.array(spec.eta_high)
    observations = []
    params, resets = {}, {}
    for i, seq in enumerate(resp_seq.spawn(n)):
        rng = np.random.default_rng(seq)
        eta_sp1 = rng.uniform(low, high)
        eta_sp1[1] += sum(eff * b0[i, j] for j, eff in spec.planted_b0.items())
        eta_sp2 = eta_sp1.copy()
        eta_sp2[1] += sum(eff * innovation[i, j] for j, eff in spec.planted_b1.items())
        if spec.eta_change_sd > 0:
            eta_sp2 += rng.normal(0.0, spec.eta_change_sd, size=4)
        eta_sp1 = np.clip(eta_sp1, -2.0, 2.0)
        eta_sp2 = np.clip(eta_sp2, -2.0, 2.0)

        times = _choose_times(spec, rng, int(counts[i]), bool(eligible[i]))
        has_p, has_e = _missing_masks(spec, rng, times, spec.split_time)
        ic_p = rng.normal(spec.ic_p_mean, spec.ic_p_sd)
        ic_e = rng.normal(spec.stress_level_mean, spec.stress_level_sd)

        in1 = times <= spec.split_time
        p1 = SubPeriodParams(*eta_sp1, ic_p, ic_e, t0=0.0)
        end1 = spec.split_time if eligible[i] else None
        zp1, ze1, r1, state = _simulate(p1, times[in1], has_e[in1], rng,
                                        spec.stress_innovation_sd, end1)
        params[i] = {"sp1": p1}
        resets[i] = {"sp1": r1}
        zp, stress = list(zp1), list(ze1)
        if eligible[i]:
            # truth is continuous across the split
            p2 = SubPeriodParams(*eta_sp2, state[0], state[1], t0=spec.split_time)
            in2 = ~in1
            zp2, ze2, r2, _ = _simulate(p2, times[in2], has_e[in2], rng,
                                        spec.stress_innovation_sd)
            params[i]["sp2"] = p2
            resets[i]["sp2"] = r2
            zp += list(zp2)
            stress += list(ze2)
        zp = np.array(zp)

        for k, t in enumerate(times):
            rec = ObservationRecord(i, float(t))
            if has_p[k]:
                zk = zp[k] + (rng.normal(0.0, spec.latent_noise_sd) if spec.latent_noise_sd > 0 else 0.0)
                rec.p = _emit(rng, emission_p, zk)
            if has_e[k]:
                rec.e = _emit(rng, emission_e, stress[k])
            observations.append(rec)

    b0_map = {i: b0[i].copy() for i in range(n) if b0_avail[i]}
    b1_map = {i: b1[i].copy() for i in range(n) if b1_avail[i]}
    truth = GroundTruth(params, resets, b0, b1, b0_avail, b1_avail, eligible,
                        dict(spec.planted_b0), dict(spec.planted_b1), emission_p, emission_e,
                        spec.split_time)
    return observations, b0_map, b1_map, truth


def oracle_latents(truth: GroundTruth, respondent: int, times):
    """True ``(zP, zE)`` at ``times``; at a reset time zE is the post-reset (emitted) value."""
    times = np.asarray(times, dtype=np.float64)
    zp = np.empty(times.size)
    ze = np.empty(times.size)
    for sp in ("sp1", "sp2"):
        if sp not in truth.params[respondent]:
            continue
        mask = (times <= truth.split_time) if sp == "sp1" else (times > truth.split_time)
        if not mask.any():
            continue
        sched = truth.resets[respondent][sp]
        traj = propagate(truth.params[respondent][sp], sched, times[mask])
        ze_sp = traj.ze.copy()
        lookup = dict(zip(sched.times.tolist(), sched.values.tolist()))
        for k, t in enumerate(times[mask]):
            if t in lookup:
                ze_sp[k] = lookup[t]
        zp[mask] = traj.zp
        ze[mask] = ze_sp
    return zp, ze
