"""Parameter network mapping sub-period summary statistics to ODE parameters.

One small net is shared by both sub-periods.  Its six outputs per sub-period
are (eta1, eta2, eta3, eta4, ic_p, ic_e).  Training minimizes

    sum of squared trajectory residuals (both sub-periods)
    + lam_sp    * sum_i sum_s (eta_s,sp1 - eta_s,sp2)^2   (respondents with both)
    + lam_odep  * sum of squared etas
    + lam_odenet * sum of squared network weights

with the VAE latents held fixed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from . import diffcore as dc
from .errors import ContractError, InsufficientDataError, NonFiniteLossError
from .latentode import EventBatch, ResetSchedule, SubPeriodParams, pack_sequences

log = logging.getLogger(__name__)

STAT_NAMES = [f"{m}_{s}" for m in ("P", "E")
              for s in ("first", "last", "diff", "integral", "mean", "span", "count")]
SUBPERIODS = ("sp1", "sp2")


@dataclass
class LatentSeries:
    """Posterior means of one respondent, per modality, sorted by time."""
    p_times: np.ndarray
    p_mu: np.ndarray
    e_times: np.ndarray
    e_mu: np.ndarray

    def __post_init__(self):
        for name in ("p_times", "p_mu", "e_times", "e_mu"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        for t, mu in ((self.p_times, self.p_mu), (self.e_times, self.e_mu)):
            if t.shape != mu.shape:
                raise ContractError("times and means differ in length")
            if np.any(np.diff(t) <= 0):
                raise ContractError("latent series times must be strictly increasing")

    def window(self, lo, hi, include_lo=True):
        def sel(t):
            return ((t >= lo) if include_lo else (t > lo)) & (t <= hi)
        mp, me = sel(self.p_times), sel(self.e_times)
        return LatentSeries(self.p_times[mp], self.p_mu[mp], self.e_times[me], self.e_mu[me])

    def targets(self):
        out = [(t, "P", m) for t, m in zip(self.p_times, self.p_mu)]
        out += [(t, "E", m) for t, m in zip(self.e_times, self.e_mu)]
        return out

    def resets(self):
        return ResetSchedule(self.e_times, self.e_mu)


def _modality_stats(times, mu):
    if times.size < 2:
        raise InsufficientDataError(f"need at least two observations, got {times.size}")
    integral = float(np.sum(np.diff(times) * (mu[1:] + mu[:-1]) / 2.0))
    return [mu[0], mu[-1], mu[-1] - mu[0], integral, mu.mean(), times[-1] - times[0], times.size]


def summary_stats(series: LatentSeries) -> np.ndarray:
    """14 statistics: for P then E, first/last/diff/trapezoid integral/mean/time span/count."""
    return np.array(_modality_stats(series.p_times, series.p_mu)
                    + _modality_stats(series.e_times, series.e_mu), dtype=np.float64)


@dataclass
class OdenetModel:
    net: dc.DenseNet
    scale: np.ndarray  # divide raw statistics by this

    @classmethod
    def create(cls, scale, hidden=12, init_scale=1e-3, seed=0, n_inputs=14):
        rng = np.random.default_rng(seed)
        net = dc.DenseNet.init([n_inputs, hidden, 6], ["relu", "identity"], rng, scale=init_scale)
        for layer in net.layers:
            layer.bias = rng.uniform(-init_scale, init_scale, layer.bias.shape)
        return cls(net, np.asarray(scale, dtype=np.float64))

    def copy(self):
        return OdenetModel(self.net.copy(), self.scale.copy())

    def outputs(self, stats, params=None):
        x = np.atleast_2d(np.asarray(stats, dtype=np.float64)) / self.scale
        return self.net.forward(x, params)


def input_scale(stats_rows) -> np.ndarray:
    """Per-feature cohort standard deviation (1 where a feature is constant)."""
    sd = np.std(np.asarray(stats_rows, dtype=np.float64), axis=0)
    return np.where(sd > 0, sd, 1.0)


def odenet_forward(model: OdenetModel, stats_sp1, stats_sp2=None, t0_sp1=0.0, t0_sp2=7.0):
    rows = [stats_sp1] if stats_sp2 is None else [stats_sp1, stats_sp2]
    out = np.asarray(model.outputs(np.vstack(rows)))
    sp1 = SubPeriodParams.from_vector(out[0], t0=t0_sp1)
    sp2 = None if stats_sp2 is None else SubPeriodParams.from_vector(out[1], t0=t0_sp2)
    return sp1, sp2


# --------------------------------------------------------------------------
# cohort preparation

@dataclass
class CohortData:
    """Flattened respondent-sub-period rows ready for training.

    Row ``k`` belongs to respondent ``row_respondent[k]`` and sub-period
    ``row_sp[k]``; ``pairs`` lists (row_sp1, row_sp2) per respondent with both.
    """
    respondents: list
    row_respondent: np.ndarray
    row_sp: list
    t0: np.ndarray
    stats: np.ndarray
    events: EventBatch
    pairs: np.ndarray
    rows_of: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    @property
    def n_rows(self):
        return len(self.row_sp)


def prepare_cohort(latents: dict, split_time=7.0) -> CohortData:
    """``latents`` maps respondent id -> :class:`LatentSeries` over the whole study.

    Sub-period 1 covers [0, split], sub-period 2 (split, end].  A sub-period
    needs two P and two E observations; respondents without an admissible
    first sub-period are excluded.
    """
    rows, resp, sps, t0s, seqs, excluded = [], [], [], [], [], []
    rows_of = {}
    pairs = []
    for rid in sorted(latents):
        series = latents[rid]
        start = min(series.p_times.min(initial=np.inf), series.e_times.min(initial=np.inf))
        lo1 = min(0.0, start)
        w1 = series.window(lo1, split_time)
        w2 = series.window(split_time, np.inf, include_lo=False)
        try:
            s1 = summary_stats(w1)
        except InsufficientDataError as exc:
            excluded.append((rid, "sp1", str(exc)))
            continue
        mine = {}
        for sp, w, s, t0 in (("sp1", w1, s1, lo1), ("sp2", w2, None, split_time)):
            if s is None:
                try:
                    s = summary_stats(w)
                except InsufficientDataError as exc:
                    if w.p_times.size or w.e_times.size:
                        excluded.append((rid, sp, str(exc)))
                    continue
            mine[sp] = len(sps)
            rows.append(s)
            resp.append(rid)
            sps.append(sp)
            t0s.append(t0)
            seqs.append((t0, w.resets(), w.targets()))
        rows_of[rid] = mine
        if "sp2" in mine:
            pairs.append((mine["sp1"], mine["sp2"]))
    if not rows:
        raise InsufficientDataError("no respondent has an admissible first sub-period")
    return CohortData(
        respondents=sorted(rows_of), row_respondent=np.array(resp), row_sp=sps,
        t0=np.array(t0s), stats=np.vstack(rows), events=pack_sequences(seqs),
        pairs=np.array(pairs, dtype=int).reshape(-1, 2), rows_of=rows_of, excluded=excluded)


# --------------------------------------------------------------------------
# loss

@dataclass
class OdeHyper:
    lam_sp: float = 0.4
    lam_odep: float = 1e-3
    lam_odenet: float = 1e-4
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 1
    hidden: int = 12
    init_scale: float = 1e-3

    def __post_init__(self):
        for name in ("lam_sp", "lam_odep", "lam_odenet", "lr", "init_scale"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ContractError("epochs >= 0, batch_size >= 1 and hidden >= 1 required")


def _penalties(theta, pair_idx, lam_sp, lam_odep):
    etas = dc.getitem(theta, (slice(None), slice(0, 4)))
    total = dc.mul(dc.vsum(dc.square(etas)), lam_odep)
    if len(pair_idx):
        d = dc.sub(dc.getitem(etas, pair_idx[:, 0]), dc.getitem(etas, pair_idx[:, 1]))
        total = dc.add(total, dc.mul(dc.vsum(dc.square(d)), lam_sp))
    return total


def coupling_sq_diff(theta, pairs) -> np.ndarray:
    """Per-respondent sum_s (eta_s,sp1 - eta_s,sp2)^2."""
    theta = np.asarray(theta)
    if len(pairs) == 0:
        return np.zeros(0)
    return np.sum((theta[pairs[:, 0], :4] - theta[pairs[:, 1], :4]) ** 2, axis=1)


def _check_finite(losses, data, rows, epoch=None):
    if np.all(np.isfinite(losses)):
        return
    bad = sorted({int(data.row_respondent[r]) for r in np.asarray(rows)[~np.isfinite(losses)]})
    where = f" at epoch {epoch}" if epoch is not None else ""
    raise NonFiniteLossError(f"ODE loss became non-finite{where} for respondent(s) {bad[:10]}")


def loss_terms(model: OdenetModel, data: CohortData, lam_sp, lam_odep, lam_odenet):
    theta = np.asarray(model.outputs(data.stats))
    res, _ = _backend.ode_loss_grad(theta, data.events)
    _check_finite(res, data, np.arange(data.n_rows))
    coupling = float(np.sum(coupling_sq_diff(theta, data.pairs)))
    return {
        "residual": float(np.sum(res)),
        "coupling": lam_sp * coupling,
        "eta": lam_odep * float(np.sum(theta[:, :4] ** 2)),
        "weights": lam_odenet * float(model.net.weight_sq_sum()),
    }


def loss_ode(model: OdenetModel, data: CohortData, lam_sp=0.4, lam_odep=1e-3, lam_odenet=1e-4):
    return sum(loss_terms(model, data, lam_sp, lam_odep, lam_odenet).values())


def _batch_loss_grad(model, data, rows, lam_sp, lam_odep, weight_factor, backend=None):
    """Loss and flat net gradient restricted to ``rows`` (whole respondents)."""
    rows = np.asarray(rows)
    tape = dc.Tape()
    leaves = model.net.leaves(tape)
    theta = model.outputs(data.stats[rows], leaves)
    sub = data.events.subset(rows)
    res, g_theta = _backend.ode_loss_grad(np.array(theta.value), sub, backend)
    _check_finite(res, data, rows)
    local = {r: k for k, r in enumerate(rows.tolist())}
    pair_idx = np.array([(local[a], local[b]) for a, b in data.pairs if a in local],
                        dtype=int).reshape(-1, 2)
    # residual enters through its exact gradient as a linear surrogate
    total = dc.vsum(dc.mul(theta, g_theta))
    total = dc.add(total, _penalties(theta, pair_idx, lam_sp, lam_odep))
    total = dc.add(total, dc.mul(model.net.weight_sq_sum(leaves), weight_factor))
    grads = tape.gradient(total, [v for pair in leaves for v in pair])
    value = float(np.sum(res)) + float(total.value) - float(np.sum(theta.value * g_theta))
    return value, np.concatenate([g.ravel() for g in grads])


def loss_ode_grad(model, data, lam_sp=0.4, lam_odep=1e-3, lam_odenet=1e-4, backend=None):
    """Full Loss_ODE and its gradient w.r.t. the flat network parameters."""
    return _batch_loss_grad(model, data, np.arange(data.n_rows), lam_sp, lam_odep,
                            lam_odenet, backend)


# --------------------------------------------------------------------------
# training

@dataclass
class RespondentDynamics:
    respondent: int
    sp1: SubPeriodParams
    sp2: SubPeriodParams | None
    split_time: float


@dataclass
class DynamicsFit:
    dynamics: dict  # respondent id -> RespondentDynamics
    loss_history: np.ndarray
    hyper: OdeHyper
    seed: int
    model: OdenetModel

    def eta_table(self, sp: str) -> dict:
        out = {}
        for rid, d in self.dynamics.items():
            p = d.sp1 if sp == "sp1" else d.sp2
            if p is not None:
                out[rid] = p.etas
        return out


def _extract(model, data, split_time):
    theta = np.asarray(model.outputs(data.stats))
    dyn = {}
    for rid in data.respondents:
        rows = data.rows_of[rid]
        sp1 = SubPeriodParams.from_vector(theta[rows["sp1"]], t0=data.t0[rows["sp1"]])
        sp2 = None
        if "sp2" in rows:
            sp2 = SubPeriodParams.from_vector(theta[rows["sp2"]], t0=data.t0[rows["sp2"]])
        dyn[rid] = RespondentDynamics(rid, sp1, sp2, split_time)
    return dyn


def train_dynamics(data: CohortData, hyper: OdeHyper = None, seed=0, split_time=7.0,
                   model: OdenetModel | None = None) -> DynamicsFit:
    """Adam on mini-batches of whole respondents (shuffled per epoch with ``seed``).

    The network-weight penalty is spread over the batches so one epoch applies
    it once.  The loss history holds the full Loss_ODE after every epoch.
    """
    hyper = hyper or OdeHyper()
    if model is None:
        model = OdenetModel.create(input_scale(data.stats), hidden=hyper.hidden,
                                   init_scale=hyper.init_scale, seed=seed)
    else:
        model = model.copy()
    rng = np.random.default_rng(seed)
    flat = model.net.get_flat()
    state = dc.AdamState.fresh(flat.size, lr=hyper.lr)
    resp = np.array(data.respondents)
    n_resp = len(resp)
    history = []
    for epoch in range(hyper.epochs):
        order = resp[rng.permutation(n_resp)]
        for start in range(0, n_resp, hyper.batch_size):
            chunk = order[start:start + hyper.batch_size]
            rows = sorted(r for rid in chunk for r in data.rows_of[rid].values())
            factor = hyper.lam_odenet * len(chunk) / n_resp
            try:
                _, grad = _batch_loss_grad(model, data, rows, hyper.lam_sp, hyper.lam_odep, factor)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"epoch {epoch}: {exc}") from exc
            flat, state = dc.adam_step(state, flat, grad)
            model.net.set_flat(flat)
        total = loss_ode(model, data, hyper.lam_sp, hyper.lam_odep, hyper.lam_odenet)
        history.append(total)
        log.debug("ODEnet epoch %d loss %.5f", epoch, total)
    return DynamicsFit(_extract(model, data, split_time), np.array(history), hyper, seed, model)
