"""Coupled linear latent ODE with exogenous resets of the stressor component.

The state is ``(zP, zE)`` with

    dzP/dt = eta1 * zP + eta2 * zE
    dzE/dt = eta4 * zP + eta3 * zE

i.e. system matrix ``[[eta1, eta2], [eta4, eta3]]``.  Between events the state
is advanced exactly with a closed-form 2x2 matrix exponential; at every reset
time ``zE`` jumps to the observed value while ``zP`` stays continuous.
Residuals at a reset time are taken against the pre-reset value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from . import diffcore as dc
from .errors import ContractError

# The series branch of the c/s functions is used when |q^2 t^2| is below this.
# Measured on the dimensionless product so that reverse-mode gradients never
# go through sinh(qt)/q with q close to zero.
SERIES_THRESHOLD = 1e-2
SERIES_TERMS = 5
_C_COEF = [1.0 / factorial(2 * k) for k in range(SERIES_TERMS)]
_S_COEF = [1.0 / factorial(2 * k + 1) for k in range(SERIES_TERMS)]

PARAM_NAMES = ("eta1", "eta2", "eta3", "eta4", "ic_p", "ic_e")


@dataclass
class SubPeriodParams:
    eta1: float
    eta2: float
    eta3: float
    eta4: float
    ic_p: float
    ic_e: float
    t0: float = 0.0  # time at which the initial conditions hold

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_vector())):
            raise ContractError(f"non-finite sub-period parameters: {self.as_vector()}")

    @classmethod
    def from_vector(cls, theta, t0=0.0):
        theta = [float(v) for v in theta]
        if len(theta) != 6:
            raise ContractError("need 6 values (eta1..eta4, ic_p, ic_e)")
        return cls(*theta, t0=float(t0))

    def as_vector(self) -> np.ndarray:
        return np.array([self.eta1, self.eta2, self.eta3, self.eta4, self.ic_p, self.ic_e])

    @property
    def etas(self) -> np.ndarray:
        return np.array([self.eta1, self.eta2, self.eta3, self.eta4])

    @property
    def system_matrix(self) -> np.ndarray:
        return np.array([[self.eta1, self.eta2], [self.eta4, self.eta3]])


@dataclass
class ResetSchedule:
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.times.shape != self.values.shape:
            raise ContractError("reset times and values differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("reset times must be strictly increasing")

    def __len__(self):
        return len(self.times)


@dataclass
class LatentTrajectory:
    times: np.ndarray
    zp: np.ndarray
    ze: np.ndarray
    pre_reset: np.ndarray  # True where a reset happens at exactly that time


# --------------------------------------------------------------------------
# matrix exponential

def _poly(w, coefs):
    out = coefs[-1]
    for c in reversed(coefs[:-1]):
        out = dc.add(dc.mul(out, w), c)
    return out


def cs_functions(u, t):
    """Return ``(c, s)`` with c = cosh(t*sqrt(u)), s = sinh(t*sqrt(u))/sqrt(u).

    For u < 0 these are cos/sin of ``t*sqrt(-u)``; near zero a Taylor series
    in ``u*t^2`` is used.  ``u`` may be a tape variable; ``t`` is data.
    """
    t = np.asarray(t, dtype=np.float64)
    uv = np.asarray(dc._val(u), dtype=np.float64)
    small = np.abs(uv * t * t) < SERIES_THRESHOLD
    pos = ~small & (uv > 0)
    negv = ~small & (uv < 0)

    w = dc.mul(u, t * t)
    c_ser = _poly(w, _C_COEF)
    s_ser = dc.mul(_poly(w, _S_COEF), t)
    if np.all(small):
        return c_ser, s_ser

    # each branch is evaluated at a harmless argument where it is not selected
    r_pos = dc.sqrt(dc.where(pos, u, 1.0))
    c_hyp = dc.cosh(dc.mul(r_pos, t))
    s_hyp = dc.div(dc.sinh(dc.mul(r_pos, t)), r_pos)
    r_neg = dc.sqrt(dc.where(negv, dc.neg(u), 1.0))
    c_trig = dc.cos(dc.mul(r_neg, t))
    s_trig = dc.div(dc.sin(dc.mul(r_neg, t)), r_neg)

    c = dc.where(small, c_ser, dc.where(pos, c_hyp, c_trig))
    s = dc.where(small, s_ser, dc.where(pos, s_hyp, s_trig))
    return c, s


def expm2_entries(a, b, c, d, t):
    """Entries (e11, e12, e21, e22) of exp(t * [[a, b], [c, d]]), elementwise over arrays."""
    m = dc.mul(dc.add(a, d), 0.5)
    h = dc.mul(dc.sub(a, d), 0.5)
    u = dc.add(dc.square(h), dc.mul(b, c))
    cc, ss = cs_functions(u, t)
    em = dc.exp(dc.mul(m, t))
    sh = dc.mul(ss, h)
    e11 = dc.mul(em, dc.add(cc, sh))
    e22 = dc.mul(em, dc.sub(cc, sh))
    e12 = dc.mul(em, dc.mul(ss, b))
    e21 = dc.mul(em, dc.mul(ss, c))
    return e11, e12, e21, e22


def expm2(A, t) -> np.ndarray:
    """exp(t*A) for a 2x2 matrix ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (2, 2):
        raise ContractError(f"expm2 needs a 2x2 matrix, got {A.shape}")
    e11, e12, e21, e22 = expm2_entries(A[0, 0], A[0, 1], A[1, 0], A[1, 1], float(t))
    return np.array([[e11, e12], [e21, e22]], dtype=np.float64)


# --------------------------------------------------------------------------
# propagation

def propagate(params: SubPeriodParams, resets: ResetSchedule | None, eval_times) -> LatentTrajectory:
    eval_times = np.asarray(eval_times, dtype=np.float64).reshape(-1)
    resets = resets if resets is not None else ResetSchedule()
    if np.any(np.diff(eval_times) < 0):
        raise ContractError("evaluation times must be sorted")
    if eval_times.size and eval_times[0] < params.t0:
        raise ContractError(f"evaluation time {eval_times[0]} precedes sub-period start {params.t0}")
    if len(resets) and resets.times[0] < params.t0:
        raise ContractError(f"reset time {resets.times[0]} precedes sub-period start {params.t0}")

    A = params.system_matrix
    # evaluations sort before resets at equal times -> pre-reset values
    events = [(t, 0, i) for i, t in enumerate(eval_times)]
    events += [(t, 1, j) for j, t in enumerate(resets.times)]
    events.sort()
    reset_times = set(resets.times.tolist())

    state = np.array([params.ic_p, params.ic_e])
    now = params.t0
    zp = np.empty(eval_times.size)
    ze = np.empty(eval_times.size)
    for t, kind, idx in events:
        if t > now:
            state = expm2(A, t - now) @ state
            now = t
        if kind == 0:
            zp[idx], ze[idx] = state
        else:
            state[1] = resets.values[idx]
    flags = np.array([t in reset_times for t in eval_times], dtype=bool)
    return LatentTrajectory(eval_times, zp, ze, flags)


# --------------------------------------------------------------------------
# packed event sequences for residual evaluation

@dataclass
class EventBatch:
    """Padded event slots for K sequences.

    Slot ``l`` of sequence ``k``: advance by ``dt[k, l]``, add the P residual
    if ``p_flag``, add the E residual (pre-reset) if ``e_flag``, then reset
    ``zE`` to ``r_val`` if ``r_flag``.  Padding slots have dt=0 and no flags.
    """
    dt: np.ndarray
    p_val: np.ndarray
    p_flag: np.ndarray
    e_val: np.ndarray
    e_flag: np.ndarray
    r_val: np.ndarray
    r_flag: np.ndarray

    @property
    def size(self):
        return self.dt.shape[0]

    @property
    def length(self):
        return self.dt.shape[1]

    def subset(self, rows) -> "EventBatch":
        rows = np.asarray(rows)
        return EventBatch(*(np.ascontiguousarray(getattr(self, f)[rows]) for f in _FIELDS))

    @classmethod
    def concatenate(cls, batches) -> "EventBatch":
        L = max(b.length for b in batches)
        parts = {f: [] for f in _FIELDS}
        for b in batches:
            for f in _FIELDS:
                arr = getattr(b, f)
                pad = np.zeros((arr.shape[0], L - arr.shape[1]), dtype=arr.dtype)
                parts[f].append(np.hstack([arr, pad]))
        return cls(*(np.ascontiguousarray(np.vstack(parts[f])) for f in _FIELDS))


_FIELDS = ("dt", "p_val", "p_flag", "e_val", "e_flag", "r_val", "r_flag")


def _sequence_slots(t0, resets: ResetSchedule, targets):
    """Group targets and resets into time-ordered slots."""
    items = []
    for time, modality, mu in targets:
        if modality not in ("P", "E"):
            raise ContractError(f"target modality must be 'P' or 'E', got {modality!r}")
        items.append((float(time), 0 if modality == "P" else 1, float(mu)))
    for time, val in zip(resets.times, resets.values):
        items.append((float(time), 2, float(val)))
    items.sort(key=lambda x: (x[0], x[1]))
    if items and items[0][0] < t0:
        raise ContractError(f"event at t={items[0][0]} precedes sub-period start {t0}")

    slots = []
    now = t0
    for time, kind, val in items:
        # open a new slot on a time change or if this kind is already taken
        if not slots or time != slots[-1]["time"] or slots[-1][kind] is not None \
                or any(slots[-1][k] is not None for k in range(kind + 1, 3)):
            slots.append({"time": time, "dt": time - now, 0: None, 1: None, 2: None})
            now = time
        slots[-1][kind] = val
    return slots


def pack_sequences(sequences) -> EventBatch:
    """Pack ``(t0, resets, targets)`` triples into a padded :class:`EventBatch`.

    ``targets`` is a list of ``(time, modality, mu)`` with modality 'P' or 'E'.
    """
    all_slots = [_sequence_slots(t0, resets if resets is not None else ResetSchedule(), targets)
                 for t0, resets, targets in sequences]
    K = len(all_slots)
    L = max([len(s) for s in all_slots] + [1])
    arrays = {f: np.zeros((K, L)) for f in _FIELDS}
    for k, slots in enumerate(all_slots):
        for l, slot in enumerate(slots):
            arrays["dt"][k, l] = slot["dt"]
            for kind, vname, fname in ((0, "p_val", "p_flag"), (1, "e_val", "e_flag"),
                                       (2, "r_val", "r_flag")):
                if slot[kind] is not None:
                    arrays[vname][k, l] = slot[kind]
                    arrays[fname][k, l] = 1.0
    return EventBatch(*(arrays[f] for f in _FIELDS))


def residual_batch(theta, batch: EventBatch):
    """Per-sequence sum of squared residuals; ``theta`` is (K, 6), array or tape variable."""
    eta1, eta2, eta3, eta4 = (dc.getitem(theta, (slice(None), j)) for j in range(4))
    zp = dc.getitem(theta, (slice(None), 4))
    ze = dc.getitem(theta, (slice(None), 5))
    loss = np.zeros(batch.size)
    for l in range(batch.length):
        dt = batch.dt[:, l]
        if np.any(dt != 0.0):
            e11, e12, e21, e22 = expm2_entries(eta1, eta2, eta4, eta3, dt)
            zp, ze = (dc.add(dc.mul(e11, zp), dc.mul(e12, ze)),
                      dc.add(dc.mul(e21, zp), dc.mul(e22, ze)))
        pf, ef, rf = batch.p_flag[:, l], batch.e_flag[:, l], batch.r_flag[:, l]
        if np.any(pf):
            loss = dc.add(loss, dc.mul(pf, dc.square(dc.sub(zp, batch.p_val[:, l]))))
        if np.any(ef):
            loss = dc.add(loss, dc.mul(ef, dc.square(dc.sub(ze, batch.e_val[:, l]))))
        if np.any(rf):
            ze = dc.where(rf > 0, batch.r_val[:, l], ze)
    return loss


def residual_loss_grad_tape(theta, batch: EventBatch):
    """Losses (K,) and gradients (K, 6) by reverse-mode differentiation."""
    theta = np.asarray(theta, dtype=np.float64)
    tape = dc.Tape()
    th = tape.var(theta)
    losses = residual_batch(th, batch)
    if not isinstance(losses, dc.Var):  # no slot ever touched the parameters
        return np.asarray(losses, dtype=np.float64), np.zeros_like(theta)
    (g,) = tape.gradient(dc.vsum(losses), [th])
    return losses.value.copy(), g


def _single(params, resets, latent_targets):
    resets = resets if resets is not None else ResetSchedule()
    return pack_sequences([(params.t0, resets, latent_targets)])


def ode_fit_residual(params: SubPeriodParams, resets, latent_targets) -> float:
    batch = _single(params, resets, latent_targets)
    losses = residual_batch(params.as_vector()[None, :], batch)
    return float(np.asarray(losses)[0])


def eta_gradient(params: SubPeriodParams, resets, latent_targets) -> np.ndarray:
    """Gradient of :func:`ode_fit_residual` w.r.t. (eta1..eta4, ic_p, ic_e)."""
    batch = _single(params, resets, latent_targets)
    _, g = residual_loss_grad_tape(params.as_vector()[None, :], batch)
    return g[0]
