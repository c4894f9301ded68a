"""Command-line pipeline: simulate -> train-vae -> fit-dynamics -> select -> report.

Every stage reads its inputs from files and writes its outputs into
``out_dir``; ``manifest.json`` records checksums, seeds and timings.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, formats, lasso2, odenet, report, synthcohort, vae
from .errors import DependencyError, NumericalError, SpdynError, ValidationError

log = logging.getLogger("spdyn")

SECTION = "pipeline"
STAGES = ("simulate", "train-vae", "fit-dynamics", "select", "report")
PATH_KEYS = ("out_dir", "observations", "battery_b0", "battery_b1")


@dataclass
class PipelineConfig:
    out_dir: str = "spdyn_out"
    observations: str = ""  # default: <out_dir>/observations.csv
    battery_b0: str = ""
    battery_b1: str = ""
    sim_seed: int = 1
    vae_seed: int = 2
    ode_seed: int = 3
    lasso_seed: int = 4
    sim_n_respondents: int = 181
    split_time: float = 7.0
    vae_lambda: float = 1e-3
    vae_epochs: int = 1000
    vae_lr: float = 3e-3
    vae_hidden: int = 16
    vae_latent_dim: int = 1
    ode_lam_sp: float = 0.4
    ode_lam_odep: float = 1e-3
    ode_lam_odenet: float = 1e-4
    ode_epochs: int = 100
    ode_lr: float = 1e-3
    ode_batch_size: int = 1
    ode_hidden: int = 12
    lasso_folds: int = 6
    lasso_m: float = 0.8
    lasso_resamples: int = 1000
    autoregressive: bool = True
    report_respondents: int = 4
    report_grid_step: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name not in ("split_time",) and v < 0:
                raise ValidationError(f"{f.name} must be >= 0, got {v}")
        if self.vae_latent_dim != 1:
            raise ValidationError("vae_latent_dim must be 1: the ODE couples one scalar per modality")
        if not 0 < self.lasso_m <= 1:
            raise ValidationError("lasso_m must lie in (0, 1]")
        if self.lasso_folds < 2 or self.lasso_resamples < 1:
            raise ValidationError("lasso_folds >= 2 and lasso_resamples >= 1 required")
        if self.report_grid_step <= 0 or self.ode_batch_size < 1:
            raise ValidationError("report_grid_step > 0 and ode_batch_size >= 1 required")

    # paths -------------------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def input_path(self, key, default_name):
        v = getattr(self, key)
        return Path(v) if v else self.out / default_name

    def config_hash(self):
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in PATH_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def seeds(self):
        return {k: getattr(self, k) for k in ("sim_seed", "vae_seed", "ode_seed", "lasso_seed")}


def _convert(name, text):
    types = {f.name: f.type for f in fields(PipelineConfig)}
    if name not in types:
        raise ValidationError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            v = float(text)
            if not np.isfinite(v):
                raise ValueError
            return v
        if kind == "bool":
            states = configparser.ConfigParser.BOOLEAN_STATES
            if text.lower() not in states:
                raise ValueError
            return states[text.lower()]
    except ValueError:
        raise ValidationError(f"config key {name!r}: cannot read {text!r} as {kind}") from None
    return text


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Read the ``[pipeline]`` section of a key = value file, then apply overrides."""
    values = {}
    if path is not None:
        if not Path(path).exists():
            raise DependencyError(f"config file {path} not found")
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ValidationError(f"{path}: {exc}") from None
        extra = [s for s in cp.sections() if s != SECTION]
        if extra:
            raise ValidationError(f"{path}: unknown section(s) {extra}")
        if cp.has_section(SECTION):
            for k, v in cp.items(SECTION):
                values[k] = _convert(k, v)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = _convert(k.strip(), v.strip())
    return PipelineConfig(**values)


# --------------------------------------------------------------------------
# manifest

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def update_manifest(cfg: PipelineConfig, stage, written, seconds):
    path = cfg.out / "manifest.json"
    manifest = {}
    if path.exists():
        with open(path) as fh:
            manifest = json.load(fh)
    stages = manifest.get("stages", {})
    rel = sorted(str(Path(p).relative_to(cfg.out)) for p in written)
    stages[stage] = {"seconds": round(seconds, 3), "files": rel, "config_hash": cfg.config_hash()}
    files = manifest.get("files", {})
    for r in rel:
        files[r] = _sha256(cfg.out / r)
    manifest = {"software_version": __version__, "config_hash": cfg.config_hash(),
                "config": dataclasses.asdict(cfg), "seeds": cfg.seeds(),
                "stages": stages, "files": dict(sorted(files.items()))}
    formats.write_json(path, manifest)


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise DependencyError(f"missing input {p}; run the stage that produces it first")


def _seed_pair(seed):
    a, b = np.random.SeedSequence(seed).spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


# --------------------------------------------------------------------------
# stages

def stage_simulate(cfg: PipelineConfig):
    spec = synthcohort.CohortSpec(n_respondents=cfg.sim_n_respondents, split_time=cfg.split_time)
    obs, b0, b1, truth = synthcohort.gen_cohort(spec, cfg.sim_seed)
    names = synthcohort.construct_names(spec.n_constructs)
    out = cfg.out
    written = [out / "observations.csv", out / "battery_b0.csv", out / "battery_b1.csv",
               out / "truth.csv", out / "planted.json"]
    formats.write_observations(written[0], obs)
    formats.write_battery(written[1], b0, names)
    formats.write_battery(written[2], b1, names)
    rows = []
    for rid in sorted(truth.params):
        for sp, p in sorted(truth.params[rid].items()):
            rows.append([str(rid), sp, formats._f(p.t0)] + [formats._f(v) for v in p.as_vector()])
    formats.atomic_write(written[3], formats._csv_text(formats.DYN_HEADER, rows))
    formats.write_json(written[4], {
        "target": "eta2", "planted_b0": {names[k]: v for k, v in truth.planted_b0.items()},
        "planted_b1": {names[k]: v for k, v in truth.planted_b1.items()},
        "sp2_eligible": int(truth.sp2_eligible.sum())})
    log.info("simulated %d observations of %d respondents", len(obs), spec.n_respondents)
    return written


def stage_train_vae(cfg: PipelineConfig):
    obs_path = cfg.input_path("observations", "observations.csv")
    _require(obs_path)
    obs = formats.ingest_observations(obs_path)
    out = cfg.out
    latents, written = [], []
    for k, mod in enumerate("PE"):
        rows = [o for o in obs if getattr(o, mod.lower()) is not None]
        if not rows:
            raise ValidationError(f"no {mod} observations")
        X = np.array([getattr(o, mod.lower()) for o in rows])
        init_seed, train_seed = _seed_pair(cfg.vae_seed + k)
        model = vae.VaeModel.create(mod, hidden=cfg.vae_hidden, latent_dim=cfg.vae_latent_dim,
                                    seed=init_seed)
        fit, hist = vae.train_vae(model, X, epochs=cfg.vae_epochs, lr=cfg.vae_lr,
                                  lam_vae=cfg.vae_lambda, seed=train_seed)
        mu, ls = vae.encode_batch(fit, X)
        latents += [(o.respondent, o.time, mod, m, s) for o, m, s in zip(rows, mu[:, 0], ls[:, 0])]
        paths = (out / f"vae_{mod}.json", out / f"vae_{mod}_history.csv")
        formats.save_vae(paths[0], fit)
        formats.write_history(paths[1], hist)
        written += paths
        log.info("%s VAE: %d rows, final loss %.4f", mod, X.shape[0],
                 hist[-1] if hist.size else float("nan"))
    formats.write_latents(out / "latents.csv", latents)
    return written + [out / "latents.csv"]


def latent_series(rows):
    per = {}
    for rid, t, mod, mu, _ in rows:
        per.setdefault(rid, {"P": [], "E": []})[mod].append((t, mu))
    out = {}
    for rid, d in per.items():
        p, e = sorted(d["P"]), sorted(d["E"])
        out[rid] = odenet.LatentSeries([x[0] for x in p], [x[1] for x in p],
                                       [x[0] for x in e], [x[1] for x in e])
    return out


def stage_fit_dynamics(cfg: PipelineConfig):
    lat_path = cfg.out / "latents.csv"
    _require(lat_path)
    data = odenet.prepare_cohort(latent_series(formats.read_latents(lat_path)), cfg.split_time)
    for rid, sp, why in data.excluded:
        log.info("respondent %s %s excluded: %s", rid, sp, why)
    hyper = odenet.OdeHyper(lam_sp=cfg.ode_lam_sp, lam_odep=cfg.ode_lam_odep,
                            lam_odenet=cfg.ode_lam_odenet, lr=cfg.ode_lr, epochs=cfg.ode_epochs,
                            batch_size=cfg.ode_batch_size, hidden=cfg.ode_hidden)
    fit = odenet.train_dynamics(data, hyper, seed=cfg.ode_seed, split_time=cfg.split_time)
    out = cfg.out
    written = [out / "odenet.json", out / "dynamics.csv", out / "dynamics_history.csv"]
    formats.save_odenet(written[0], fit.model)
    formats.write_dynamics(written[1], fit, cfg.split_time)
    formats.write_history(written[2], fit.loss_history)
    log.info("fitted dynamics for %d respondents", len(fit.dynamics))
    return written


def stage_select(cfg: PipelineConfig):
    dyn_path = cfg.out / "dynamics.csv"
    b0_path = cfg.input_path("battery_b0", "battery_b0.csv")
    b1_path = cfg.input_path("battery_b1", "battery_b1.csv")
    _require(dyn_path, b0_path, b1_path)
    dyn, _ = formats.read_dynamics(dyn_path)
    b0, names0 = formats.read_battery(b0_path)
    b1, names1 = formats.read_battery(b1_path)
    if names0 != names1:
        raise ValidationError("B0 and B1 must list the same constructs")
    y1 = {r: d.sp1.eta2 for r, d in dyn.items()}
    y2 = {r: d.sp2.eta2 for r, d in dyn.items() if d.sp2 is not None}
    b0 = {r: v for r, v in b0.items() if r in y1}
    b1 = {r: v for r, v in b1.items() if r in y2 and r in b0}
    log.info("selection rows: %d for sp1, %d for sp2", len(b0), len(b1))
    kw = dict(seed=cfg.lasso_seed, folds=cfg.lasso_folds, m=cfg.lasso_m,
              R=cfg.lasso_resamples, names=names0)
    rep1, rep2 = lasso2.two_stage_select(b0, b1, y1, y2, autoregressive=False, **kw)
    reports = [rep1, rep2]
    if cfg.autoregressive:
        reports.append(lasso2.two_stage_select(b0, b1, y1, y2, autoregressive=True, **kw)[1])
    out = cfg.out
    written = []
    for rep in reports:
        p = out / f"selection_{rep.stage}.csv"
        formats.write_selection(p, rep)
        written.append(p)
    formats.write_json(out / "selection.json", [formats.selection_summary(r) for r in reports])
    return written + [out / "selection.json"]


def stage_report(cfg: PipelineConfig):
    out = cfg.out
    dyn_path, lat_path, sel1 = out / "dynamics.csv", out / "latents.csv", out / "selection_sp1.csv"
    _require(dyn_path, lat_path, sel1)
    dyn, meta = formats.read_dynamics(dyn_path)
    latents = formats.read_latents(lat_path)
    selections = {}
    for stage in report.HEAT_ROWS:
        p = out / f"selection_{stage}.csv"
        if p.exists():
            selections[stage] = formats.read_selection(p)
    paired = [r for r in sorted(dyn) if dyn[r].sp2 is not None]
    shown = (paired or sorted(dyn))[: cfg.report_respondents]
    rdir = out / "report"
    rows = [r for rid in sorted(dyn)
            for r in report.trajectory_rows(dyn[rid], latents, cfg.report_grid_step)]
    lam = float(meta["lam_sp"]) if "lam_sp" in meta else None
    written = [rdir / "trajectories.csv", rdir / "trajectories.svg"]
    report.write_trajectories(written[0], rows, lam)
    split = next(iter(dyn.values())).split_time
    formats.atomic_write(written[1], report.trajectory_svg(
        [r for r in rows if r[0] in set(shown)], split))
    constructs, table = report.heatmap_table(selections)
    written += [rdir / "vif_heatmap.csv", rdir / "vif_heatmap.svg"]
    report.write_heatmap(written[2], constructs, table)
    formats.atomic_write(written[3], report.heatmap_svg(constructs, table))
    return written


RUNNERS = {"simulate": stage_simulate, "train-vae": stage_train_vae,
           "fit-dynamics": stage_fit_dynamics, "select": stage_select, "report": stage_report}


def run_stage(stage, cfg: PipelineConfig):
    if stage not in RUNNERS:
        raise ValidationError(f"unknown stage {stage!r}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    t = time.perf_counter()
    written = RUNNERS[stage](cfg)
    seconds = time.perf_counter() - t
    update_manifest(cfg, stage, written, seconds)
    log.info("%s finished in %.1fs (%d files)", stage, seconds, len(written))
    return written


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="key = value file with a [pipeline] section")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="spdyn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"spdyn {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES + ("run",):
        sub.add_parser(name, parents=[common],
                       help="all stages in order" if name == "run" else f"run the {name} stage")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        for stage in (STAGES if args.stage == "run" else (args.stage,)):
            run_stage(stage, cfg)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except SpdynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
