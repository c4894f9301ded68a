"""Figure data: per-respondent trajectory tables, VIF heat-map table, plain SVG renderings."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .formats import _csv_text, _f, atomic_write
from .latentode import ResetSchedule, propagate

P_COLOR = "#1f5fa8"
E_COLOR = "#c0392b"
HEAT_ROWS = ("sp1", "sp2", "sp2-ar")


def _series(latents, rid, modality):
    pts = sorted((t, mu) for r, t, m, mu, _ in latents if r == rid and m == modality)
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


def _in_window(t, sp, t0, split):
    return (t >= t0) & (t <= split) if sp == "sp1" else t > split


def trajectory_rows(dyn, latents, grid_step=0.05):
    """Rows (respondent, subperiod, kind, time, zp, ze) for one respondent.

    ``kind`` is ``curve`` for the ODE solution on a regular grid, ``obs_P`` or
    ``obs_E`` for posterior means (placed in the matching column).
    """
    rid = dyn.respondent
    tp, mp = _series(latents, rid, "P")
    te, me = _series(latents, rid, "E")
    split = dyn.split_time
    rows = []
    for sp, params in (("sp1", dyn.sp1), ("sp2", dyn.sp2)):
        if params is None:
            continue
        t0 = params.t0
        ip, ie = _in_window(tp, sp, t0, split), _in_window(te, sp, t0, split)
        if sp == "sp1":
            end = split
        else:
            end = max(tp[ip].max(initial=t0), te[ie].max(initial=t0), t0 + grid_step)
        n = int(np.ceil((end - t0) / grid_step - 1e-9)) + 1
        grid = np.linspace(t0, end, n)
        traj = propagate(params, ResetSchedule(te[ie], me[ie]), grid)
        rows += [(rid, sp, "curve", t, zp, ze) for t, zp, ze in zip(grid, traj.zp, traj.ze)]
        rows += [(rid, sp, "obs_P", t, m, None) for t, m in zip(tp[ip], mp[ip])]
        rows += [(rid, sp, "obs_E", t, None, m) for t, m in zip(te[ie], me[ie])]
    return rows


def _cell(v):
    return "" if v is None else _f(v)


def write_trajectories(path, rows, lam_sp=None):
    header = ["respondent", "subperiod", "kind", "time", "zp", "ze"]
    body = [[str(r), sp, k, _f(t), _cell(zp), _cell(ze)] for r, sp, k, t, zp, ze in rows]
    comments = [] if lam_sp is None else [f"lam_sp={float(lam_sp)!r}"]
    atomic_write(path, _csv_text(header, body, comments))


def heatmap_table(selections: dict):
    """``selections`` maps stage -> rows (column, battery, vif, weight, coef).

    Row sp1 takes the B0 VIFs; sp2 rows take the B1 VIFs.  Columns are constructs.
    """
    base = [c.split(":", 1)[1] for c, tag, *_ in selections["sp1"] if tag == "B0"]
    table = []
    for stage in HEAT_ROWS:
        if stage not in selections:
            continue
        tag = "B0" if stage == "sp1" else "B1"
        vif = {c.split(":", 1)[1]: v for c, t, v, *_ in selections[stage] if t == tag}
        table.append((stage, [vif.get(c, 0.0) for c in base]))
    return base, table


def write_heatmap(path, constructs, table):
    body = [[stage] + [_f(v) for v in vals] for stage, vals in table]
    atomic_write(path, _csv_text(["row"] + list(constructs), body))


# --------------------------------------------------------------------------
# SVG

def _n(x):
    return f"{x:.2f}"


def _svg(width, height, parts):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>']
                     + parts + ["</svg>"]) + "\n"


def trajectory_svg(rows, split_time, panel_w=420, panel_h=160):
    by_resp = {}
    for r in rows:
        by_resp.setdefault(r[0], []).append(r)
    parts = []
    pad = 30
    for k, rid in enumerate(sorted(by_resp)):
        rr = by_resp[rid]
        ts = [r[3] for r in rr]
        vs = [v for r in rr for v in (r[4], r[5]) if v is not None]
        t_lo, t_hi = min(ts), max(ts)
        v_lo, v_hi = min(vs), max(vs)
        if v_hi - v_lo < 1e-9:
            v_lo, v_hi = v_lo - 1.0, v_hi + 1.0
        if t_hi - t_lo < 1e-9:
            t_hi = t_lo + 1.0
        y0 = k * panel_h

        def sx(t):
            return pad + (t - t_lo) / (t_hi - t_lo) * (panel_w - 2 * pad)

        def sy(v):
            return y0 + panel_h - pad + (v - v_lo) / (v_hi - v_lo) * (2 * pad - panel_h)

        parts.append(f'<text x="{pad}" y="{_n(y0 + 14)}">respondent {rid}</text>')
        parts.append(f'<rect x="{pad}" y="{_n(y0 + pad / 2)}" width="{panel_w - 2 * pad}" '
                     f'height="{_n(panel_h - 1.5 * pad)}" fill="none" stroke="#999"/>')
        if t_lo <= split_time <= t_hi:
            parts.append(f'<line x1="{_n(sx(split_time))}" y1="{_n(y0 + pad / 2)}" '
                         f'x2="{_n(sx(split_time))}" y2="{_n(y0 + panel_h - pad)}" '
                         'stroke="#666" stroke-dasharray="4 3"/>')
        for sp in ("sp1", "sp2"):
            curve = [r for r in rr if r[1] == sp and r[2] == "curve"]
            for col, color in ((4, P_COLOR), (5, E_COLOR)):
                if curve:
                    pts = " ".join(f"{_n(sx(r[3]))},{_n(sy(r[col]))}" for r in curve)
                    parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}"/>')
        for r in rr:
            if r[2] == "obs_P":
                parts.append(f'<circle cx="{_n(sx(r[3]))}" cy="{_n(sy(r[4]))}" r="2.5" '
                             f'fill="{P_COLOR}"/>')
            elif r[2] == "obs_E":
                parts.append(f'<circle cx="{_n(sx(r[3]))}" cy="{_n(sy(r[5]))}" r="2.5" '
                             f'fill="{E_COLOR}"/>')
    return _svg(panel_w, max(1, len(by_resp)) * panel_h, parts)


def heatmap_svg(constructs, table, cell=14):
    left, top = 50, 40
    parts = []
    for j, c in enumerate(constructs):
        x = left + j * cell + cell / 2
        parts.append(f'<text x="{_n(x)}" y="{top - 4}" font-size="7" '
                     f'transform="rotate(-60 {_n(x)} {top - 4})">{c}</text>')
    for i, (stage, vals) in enumerate(table):
        y = top + i * cell
        parts.append(f'<text x="4" y="{_n(y + cell * 0.75)}">{stage}</text>')
        for j, v in enumerate(vals):
            g = int(round(255 * (1.0 - v)))
            parts.append(f'<rect x="{left + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb({g},{g},{g})" stroke="#ddd"/>')
    width = left + len(constructs) * cell + 10
    return _svg(width, top + len(table) * cell + 10, parts)


def export_report(dynamics: dict, latents, selections: dict, out_dir, respondents=None,
                  grid_step=0.05, lam_sp=None):
    """Write trajectory and heat-map tables plus SVG renderings; returns the paths written."""
    out = Path(out_dir)
    ids = sorted(dynamics) if respondents is None else list(respondents)
    split = next(iter(dynamics.values())).split_time if dynamics else 7.0
    rows = [r for rid in ids for r in trajectory_rows(dynamics[rid], latents, grid_step)]
    paths = [out / "trajectories.csv", out / "trajectories.svg"]
    write_trajectories(paths[0], rows, lam_sp)
    atomic_write(paths[1], trajectory_svg(rows, split))
    if selections:
        constructs, table = heatmap_table(selections)
        paths += [out / "vif_heatmap.csv", out / "vif_heatmap.svg"]
        write_heatmap(paths[2], constructs, table)
        atomic_write(paths[3], heatmap_svg(constructs, table))
    return paths
