"""Text formats for observations, batteries, models, latents, dynamics and selections.

All floats are written with ``repr`` so a write/read cycle is lossless and
reruns produce byte-identical files.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ParseError, ValidationError
from .latentode import SubPeriodParams
from .odenet import DynamicsFit, OdenetModel, RespondentDynamics
from .synthcohort import ObservationRecord
from .vae import ITEM_COUNT, MAX_COUNT, VaeModel

log = logging.getLogger(__name__)

MODEL_VERSION = 1
MAX_ITEMS = max(ITEM_COUNT.values())
OBS_HEADER = ["respondent", "time", "modality"] + [f"i{j:02d}" for j in range(1, MAX_ITEMS + 1)]


def _f(x) -> str:
    return repr(float(x))


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows, comments=()):
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    lines += [",".join(r) for r in rows]
    return "\n".join(lines) + "\n"


def _read_rows(path):
    """Yield (line_number, fields) skipping blank and '#' lines; first row is the header."""
    with open(path, newline="") as fh:
        for lineno, fields in enumerate(csv.reader(fh), start=1):
            if not fields or (fields[0].startswith("#")):
                continue
            yield lineno, [f.strip() for f in fields]


def _comments(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("# ") and "=" in line:
                k, v = line[2:].strip().split("=", 1)
                out[k.strip()] = v.strip()
    return out


def _number(text, lineno, column, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise ParseError(f"column {column!r} is not a valid number: {text!r}", line=lineno) from None


# --------------------------------------------------------------------------
# observations

def write_observations(path, observations):
    rows = []
    for o in sorted(observations, key=lambda o: (o.respondent, o.time)):
        for mod, x in (("P", o.p), ("E", o.e)):
            if x is None:
                continue
            items = [str(int(v)) for v in x] + [""] * (MAX_ITEMS - len(x))
            rows.append([str(o.respondent), _f(o.time), mod] + items)
    atomic_write(path, _csv_text(OBS_HEADER, rows))


def ingest_observations(path) -> list[ObservationRecord]:
    """Parse and validate an observation file (one row per respondent, time and modality)."""
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ValidationError(f"{path}: no observations") from None
    if header[:3] != OBS_HEADER[:3]:
        raise ParseError("header must start with respondent,time,modality", line=lineno)
    items = header[3:]
    merged: dict = {}
    last_time: dict = {}
    for lineno, f in rows:
        if len(f) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(f)}", line=lineno)
        rid = _number(f[0], lineno, "respondent", int)
        t = _number(f[1], lineno, "time")
        mod = f[2]
        if mod not in ITEM_COUNT:
            raise ParseError(f"modality must be P or E, got {mod!r}", line=lineno)
        if not np.isfinite(t):
            raise ValidationError(f"line {lineno}: time must be finite")
        k = ITEM_COUNT[mod]
        values = f[3:]
        if any(v != "" for v in values[k:]):
            raise ValidationError(f"line {lineno}: {mod} rows use only the first {k} item columns")
        x = np.empty(k)
        for j in range(k):
            if values[j] == "":
                raise ValidationError(f"line {lineno}: item {items[j]} is empty")
            v = _number(values[j], lineno, items[j])
            if v != round(v) or not 0 <= v <= MAX_COUNT[mod]:
                raise ValidationError(
                    f"line {lineno}: item {items[j]} = {values[j]} outside {mod} range "
                    f"0..{MAX_COUNT[mod]}")
            x[j] = v
        prev = last_time.get((rid, mod))
        if prev is not None and t <= prev:
            raise ValidationError(
                f"line {lineno}: times of respondent {rid} ({mod}) must increase")
        last_time[(rid, mod)] = t
        rec = merged.setdefault((rid, t), ObservationRecord(rid, t))
        setattr(rec, mod.lower(), x)
    if not merged:
        raise ValidationError(f"{path}: no observations")
    out = [merged[k] for k in sorted(merged)]
    n_resp = len({o.respondent for o in out})
    log.info("read %d observations of %d respondents (%.1f per respondent)",
             len(out), n_resp, len(out) / n_resp)
    return out


# --------------------------------------------------------------------------
# batteries

def write_battery(path, battery: dict, names):
    rows = [[str(rid)] + [_f(v) for v in battery[rid]] for rid in sorted(battery)]
    atomic_write(path, _csv_text(["respondent"] + list(names), rows))


def read_battery(path):
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ValidationError(f"{path}: empty battery file") from None
    if header[0] != "respondent":
        raise ParseError("first column must be respondent", line=lineno)
    out = {}
    for lineno, f in rows:
        if len(f) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(f)}", line=lineno)
        rid = _number(f[0], lineno, "respondent", int)
        vals = np.array([_number(v, lineno, c) for v, c in zip(f[1:], header[1:])])
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"line {lineno}: battery values must be finite")
        out[rid] = vals
    return out, header[1:]


# --------------------------------------------------------------------------
# models

def _net_to_dict(net: dc.DenseNet):
    return [{"activation": layer.activation, "weight": layer.weight.tolist(),
             "bias": layer.bias.tolist()} for layer in net.layers]


def _net_from_dict(layers):
    return dc.DenseNet([dc.Layer(np.array(d["weight"], dtype=np.float64).reshape(
        len(d["bias"]), -1), np.array(d["bias"], dtype=np.float64), d["activation"])
        for d in layers])


def _dump(path, obj):
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _load(path, kind):
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("format") != kind:
        raise ValidationError(f"{path}: not a {kind} file")
    if obj.get("version") != MODEL_VERSION:
        raise ValidationError(f"{path}: unsupported version {obj.get('version')}")
    return obj


def save_vae(path, model: VaeModel):
    _dump(path, {"format": "spdyn-vae", "version": MODEL_VERSION, "modality": model.modality,
                 "item_count": model.item_count, "latent_dim": model.latent_dim,
                 "max_count": model.max_count, "seed": model.seed,
                 "encoder": _net_to_dict(model.encoder), "decoder": _net_to_dict(model.decoder)})


def load_vae(path) -> VaeModel:
    o = _load(path, "spdyn-vae")
    return VaeModel(_net_from_dict(o["encoder"]), _net_from_dict(o["decoder"]), o["modality"],
                    o["item_count"], o["latent_dim"], o["max_count"], o["seed"])


def save_odenet(path, model: OdenetModel):
    _dump(path, {"format": "spdyn-odenet", "version": MODEL_VERSION,
                 "scale": model.scale.tolist(), "net": _net_to_dict(model.net)})


def load_odenet(path) -> OdenetModel:
    o = _load(path, "spdyn-odenet")
    return OdenetModel(_net_from_dict(o["net"]), np.array(o["scale"], dtype=np.float64))


# --------------------------------------------------------------------------
# latents and dynamics

LATENT_HEADER = ["respondent", "time", "modality", "mu", "log_sigma"]


def write_latents(path, rows):
    """``rows``: iterable of (respondent, time, modality, mu, log_sigma)."""
    body = [[str(r), _f(t), m, _f(mu), _f(ls)] for r, t, m, mu, ls in sorted(rows)]
    atomic_write(path, _csv_text(LATENT_HEADER, body))


def read_latents(path):
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ValidationError(f"{path}: empty latent file") from None
    if header != LATENT_HEADER:
        raise ParseError("unexpected latent header", line=lineno)
    out = []
    for lineno, f in rows:
        if len(f) != 5:
            raise ParseError("expected 5 fields", line=lineno)
        out.append((_number(f[0], lineno, "respondent", int), _number(f[1], lineno, "time"),
                    f[2], _number(f[3], lineno, "mu"), _number(f[4], lineno, "log_sigma")))
    return out


DYN_HEADER = ["respondent", "subperiod", "t0", "eta1", "eta2", "eta3", "eta4", "ic_p", "ic_e"]


def write_dynamics(path, fit: DynamicsFit, split_time):
    h = fit.hyper
    comments = [f"{k}={getattr(h, k)!r}" for k in
                ("lam_sp", "lam_odep", "lam_odenet", "lr", "epochs", "batch_size", "hidden")]
    comments += [f"seed={fit.seed}", f"split_time={float(split_time)!r}"]
    rows = []
    for rid in sorted(fit.dynamics):
        d = fit.dynamics[rid]
        for sp, p in (("sp1", d.sp1), ("sp2", d.sp2)):
            if p is not None:
                rows.append([str(rid), sp, _f(p.t0)] + [_f(v) for v in p.as_vector()])
    atomic_write(path, _csv_text(DYN_HEADER, rows, comments))


def read_dynamics(path):
    """Returns (respondent -> RespondentDynamics, header key/values)."""
    meta = _comments(path)
    split = float(meta.get("split_time", 7.0))
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ValidationError(f"{path}: empty dynamics file") from None
    if header != DYN_HEADER:
        raise ParseError("unexpected dynamics header", line=lineno)
    per = {}
    for lineno, f in rows:
        if len(f) != len(DYN_HEADER):
            raise ParseError(f"expected {len(DYN_HEADER)} fields", line=lineno)
        rid = _number(f[0], lineno, "respondent", int)
        vals = [_number(v, lineno, c) for v, c in zip(f[2:], DYN_HEADER[2:])]
        per.setdefault(rid, {})[f[1]] = SubPeriodParams.from_vector(vals[1:], t0=vals[0])
    out = {}
    for rid, sps in per.items():
        if "sp1" not in sps:
            raise ValidationError(f"respondent {rid} has no sp1 parameters")
        out[rid] = RespondentDynamics(rid, sps["sp1"], sps.get("sp2"), split)
    return out, meta


def write_history(path, values, name="loss"):
    atomic_write(path, _csv_text(["epoch", name],
                                 [[str(i), _f(v)] for i, v in enumerate(values)]))


# --------------------------------------------------------------------------
# selection

SEL_HEADER = ["column", "battery", "vif", "weight", "coef"]


def write_selection(path, report):
    rows = [[c, t, _f(v), _f(w), _f(b)] for c, t, v, w, b in report.rows()]
    atomic_write(path, _csv_text(SEL_HEADER, rows))


def selection_summary(report):
    return {"stage": report.stage, "lambda": float(report.lam), "seed": int(report.seed),
            "resamples": int(report.n_resamples), "folds": int(report.folds),
            "m": float(report.m), "rows": report.n_rows,
            "selected_vif_ge_0.5": [c for c, v in zip(report.columns, report.vif) if v >= 0.5]}


def read_selection(path):
    rows = _read_rows(path)
    _, header = next(rows)
    if header != SEL_HEADER:
        raise ParseError(f"{path}: unexpected selection header", line=1)
    return [(f[0], f[1], float(f[2]), float(f[3]), float(f[4])) for _, f in rows]


def write_json(path, obj):
    _dump(path, obj)
