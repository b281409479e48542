"""Run configuration, presets, VTK/CSV output and the command-line driver."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .constitutive import Dipole, DipoleConfig, ModelParams
from .diagnostics import LEDGER_FIELDS, StepLedger, phase_mass, step_ledger, total_energy
from .errors import ConfigError, NumericalFailure, PicardNonconvergence
from .mesh import Mesh, build_rectangle_mesh, refine
from .spaces import SpaceSet
from .stepper import MODES, PicardSettings, State, Stepper, initial_state

log = logging.getLogger("ferrosim")


# -- configuration ------------------------------------------------------------

def _row(y, n, x0, x1):
    return "; ".join(f"{x!r}, {y!r}" for x in np.linspace(x0, x1, n).tolist())


PRESETS: Dict[str, Dict[str, str]] = {
    "rosensweig": {
        "mode": "full",
        "epsilon": "0.01", "gamma": "0.0002", "lambda": "0.05", "relaxation_time": "0.0001",
        "mu0": "1.0", "chi0": "0.5", "nu_w": "1.0", "nu_f": "2.0", "r": "0.1",
        "gravity": "0.0, -30000.0", "dt": "0.0005", "t_final": "2.0",
        "mesh.nx": "10", "mesh.ny": "6", "mesh.refine_levels": "4",
        "mesh.rect": "0.0, 1.0, 0.0, 0.6", "pool_depth": "0.2",
        "dipoles.positions": "-0.5, -15.0; 0.0, -15.0; 0.5, -15.0; 1.0, -15.0; 1.5, -15.0",
        "dipoles.direction": "0.0, 1.0", "dipoles.alpha_max": "6000.0",
        "dipoles.t_ramp": "1.6", "dipoles.hold": "true",
    },
}
PRESETS["hedgehog"] = dict(
    PRESETS["rosensweig"],
    **{
        "chi0": "0.9", "epsilon": "0.005", "lambda": "0.025", "pool_depth": "0.11",
        "dt": "0.00025", "t_final": "6.0",
        "mesh.nx": "15", "mesh.ny": "9", "mesh.refine_levels": "6",
        "dipoles.positions": "; ".join(_row(y, 14, 0.3, 0.7) for y in (-0.5, -0.75, -1.0)),
        "dipoles.alpha_max": "4.3", "dipoles.t_ramp": "4.2",
    },
)

_PARAM_KEYS = {
    "epsilon": "epsilon", "eta": "eta", "gamma": "gamma", "lambda": "lam",
    "relaxation_time": "relaxation_time", "mu0": "mu0", "chi0": "chi0", "nu_w": "nu_w",
    "nu_f": "nu_f", "r": "r", "gravity": "gravity", "dt": "dt", "t_final": "t_final",
}
KNOWN_KEYS = set(_PARAM_KEYS) | {
    "preset", "mode", "steps", "upwind", "pool_depth",
    "mesh.nx", "mesh.ny", "mesh.refine_levels", "mesh.rect",
    "dipoles.positions", "dipoles.direction", "dipoles.alpha_max", "dipoles.t_ramp",
    "dipoles.hold",
    "picard.tol", "picard.max_iter", "picard.abs_floor", "picard.halve_dt",
    "picard.max_halvings",
    "output.dir", "output.snapshot_every", "output.ledger",
}
REQUIRED_KEYS = ("mesh.nx", "mesh.ny", "dt", "t_final")


@dataclass(frozen=True)
class RunConfig:
    mode: str
    nx: int
    ny: int
    refine_levels: int
    rect: tuple
    params: ModelParams
    dipoles: DipoleConfig
    pool_depth: float = 0.2
    steps: Optional[int] = None
    picard: PicardSettings = field(default_factory=PicardSettings)
    output_dir: str = "output"
    snapshot_every: int = 0
    ledger_name: str = "ledger.csv"
    upwind: bool = False
    preset: Optional[str] = None

    @property
    def n_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return max(1, int(round(self.params.t_final / self.params.dt)))

    def build_mesh(self) -> Mesh:
        return refine(build_rectangle_mesh(self.nx, self.ny, self.rect), self.refine_levels)


def _floats(text: str, key: str, n: int | None = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"expected numbers, got {text!r}", key) from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {len(vals)}", key)
    return vals


def _float(text: str, key: str) -> float:
    return _floats(text, key, 1)[0]


def _int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}", key) from None


def _bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}", key)


def read_pairs(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key (line {lineno})", key)
        out[key] = value
    return out


def config_from_pairs(pairs: Dict[str, str]) -> RunConfig:
    """Build a RunConfig; explicit keys override the named preset's keys."""
    preset = pairs.get("preset")
    merged: Dict[str, str] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}",
                              "preset")
        merged.update(PRESETS[preset])
    merged.update(pairs)
    for key in merged:
        if key not in KNOWN_KEYS:
            raise ConfigError("unknown key", key)
    for key in REQUIRED_KEYS:
        if key not in merged:
            raise ConfigError("missing required key", key)

    kw = {}
    for key, attr in _PARAM_KEYS.items():
        if key in merged:
            kw[attr] = _floats(merged[key], key, 2) if key == "gravity" else _float(merged[key], key)
    mode = merged.get("mode", "full")
    if mode not in MODES:
        raise ConfigError(f"expected one of {MODES}, got {mode!r}", "mode")
    params = ModelParams(**kw)
    params.validate(mode)

    direction = _floats(merged.get("dipoles.direction", "0, 1"), "dipoles.direction", 2)
    alpha = _float(merged.get("dipoles.alpha_max", "0"), "dipoles.alpha_max")
    positions = []
    for chunk in merged.get("dipoles.positions", "").split(";"):
        if chunk.strip():
            positions.append(_floats(chunk, "dipoles.positions", 2))
    dipoles = DipoleConfig(
        tuple(Dipole(p, direction, alpha) for p in positions),
        t_ramp=_float(merged.get("dipoles.t_ramp", "1"), "dipoles.t_ramp"),
        hold=_bool(merged.get("dipoles.hold", "true"), "dipoles.hold"),
    )

    picard_kw = {}
    for key, conv in (("picard.tol", _float), ("picard.max_iter", _int),
                      ("picard.abs_floor", _float), ("picard.halve_dt", _bool),
                      ("picard.max_halvings", _int)):
        if key in merged:
            picard_kw[key.split(".", 1)[1]] = conv(merged[key], key)
    picard = PicardSettings(**picard_kw)

    nx = _int(merged["mesh.nx"], "mesh.nx")
    ny = _int(merged["mesh.ny"], "mesh.ny")
    if nx < 1 or ny < 1:
        raise ConfigError("cell counts must be positive", "mesh.nx" if nx < 1 else "mesh.ny")
    levels = _int(merged.get("mesh.refine_levels", "0"), "mesh.refine_levels")
    if levels < 0:
        raise ConfigError("must be nonnegative", "mesh.refine_levels")
    rect = _floats(merged.get("mesh.rect", "0, 1, 0, 1"), "mesh.rect", 4)
    if not (rect[1] > rect[0] and rect[3] > rect[2]):
        raise ConfigError("rectangle must have positive width and height", "mesh.rect")
    steps = None
    if "steps" in merged:
        steps = _int(merged["steps"], "steps")
        if steps < 1:
            raise ConfigError("must be at least 1", "steps")
    every = _int(merged.get("output.snapshot_every", "0"), "output.snapshot_every")
    if every < 0:
        raise ConfigError("must be nonnegative", "output.snapshot_every")
    return RunConfig(
        mode=mode, nx=nx, ny=ny, refine_levels=levels, rect=rect, params=params,
        dipoles=dipoles, pool_depth=_float(merged.get("pool_depth", "0.2"), "pool_depth"),
        steps=steps, picard=picard, output_dir=merged.get("output.dir", "output"),
        snapshot_every=every, ledger_name=merged.get("output.ledger", "ledger.csv"),
        upwind=_bool(merged.get("upwind", "false"), "upwind"), preset=preset,
    )


def parse_config(text: str) -> RunConfig:
    return config_from_pairs(read_pairs(text))


def serialize_config(cfg: RunConfig) -> str:
    """Explicit key = value text that parses back to an identical RunConfig."""
    p = cfg.params
    d = cfg.dipoles
    direction = d.dipoles[0].direction if d.dipoles else (0.0, 1.0)
    alpha = d.dipoles[0].alpha_max if d.dipoles else 0.0
    if any(x.direction != direction or x.alpha_max != alpha for x in d.dipoles):
        raise ConfigError("dipoles with differing direction or intensity cannot be serialized",
                          "dipoles")
    lines = []
    if cfg.preset:
        lines.append(f"preset = {cfg.preset}")
    items = [
        ("mode", cfg.mode),
        ("epsilon", repr(p.epsilon)), ("eta", repr(p.eta)), ("gamma", repr(p.gamma)),
        ("lambda", repr(p.lam)), ("relaxation_time", repr(p.relaxation_time)),
        ("mu0", repr(p.mu0)), ("chi0", repr(p.chi0)), ("nu_w", repr(p.nu_w)),
        ("nu_f", repr(p.nu_f)), ("r", repr(p.r)),
        ("gravity", ", ".join(repr(g) for g in p.gravity)),
        ("dt", repr(p.dt)), ("t_final", repr(p.t_final)),
        ("mesh.nx", str(cfg.nx)), ("mesh.ny", str(cfg.ny)),
        ("mesh.refine_levels", str(cfg.refine_levels)),
        ("mesh.rect", ", ".join(repr(float(v)) for v in cfg.rect)),
        ("pool_depth", repr(cfg.pool_depth)),
        ("dipoles.positions", "; ".join(f"{x.position[0]!r}, {x.position[1]!r}"
                                        for x in d.dipoles)),
        ("dipoles.direction", ", ".join(repr(float(v)) for v in direction)),
        ("dipoles.alpha_max", repr(float(alpha))), ("dipoles.t_ramp", repr(d.t_ramp)),
        ("dipoles.hold", "true" if d.hold else "false"),
        ("picard.tol", repr(cfg.picard.tol)), ("picard.max_iter", str(cfg.picard.max_iter)),
        ("picard.abs_floor", repr(cfg.picard.abs_floor)),
        ("picard.halve_dt", "true" if cfg.picard.halve_dt else "false"),
        ("picard.max_halvings", str(cfg.picard.max_halvings)),
        ("output.dir", cfg.output_dir), ("output.snapshot_every", str(cfg.snapshot_every)),
        ("output.ledger", cfg.ledger_name), ("upwind", "true" if cfg.upwind else "false"),
    ]
    if cfg.steps is not None:
        items.append(("steps", str(cfg.steps)))
    lines += [f"{k} = {v}" for k, v in items]
    return "\n".join(lines) + "\n"


# -- output -------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldSnapshot:
    mesh: Mesh
    t: float
    point_data: Dict[str, np.ndarray]
    cell_data: Dict[str, np.ndarray]

    def __post_init__(self):
        for name, arr in self.point_data.items():
            if len(arr) != self.mesh.n_vertices:
                raise ValueError(f"point array {name!r} has {len(arr)} entries, "
                                 f"mesh has {self.mesh.n_vertices} vertices")
        for name, arr in self.cell_data.items():
            if len(arr) != self.mesh.n_cells:
                raise ValueError(f"cell array {name!r} has {len(arr)} entries, "
                                 f"mesh has {self.mesh.n_cells} cells")


def snapshot_from_state(sp: SpaceSet, state: State) -> FieldSnapshot:
    """Vertex values of the continuous fields and cell averages of the discontinuous ones."""
    nv = sp.mesh.n_vertices
    U = state.U.reshape(2, -1)[:, :nv].T
    point = {"phi": state.phi[:nv], "psi": state.psi[:nv], "U": U,
             "U_magnitude": np.hypot(U[:, 0], U[:, 1])}
    if state.Phi is not None:
        point["Phi"] = state.Phi[:nv]
    M = state.M.reshape(2, -1, 3).mean(axis=2).T
    cell = {"M": M, "P": state.P.reshape(-1, 3).mean(axis=1)}
    return FieldSnapshot(sp.mesh, state.t, point, cell)


def _vtk_arrays(lines, data):
    for name, arr in data.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend("%.17g" % v for v in arr)
        else:
            lines.append(f"VECTORS {name} double")
            lines.extend("%.17g %.17g 0" % (a, b) for a, b in arr[:, :2])


def write_snapshot(snap: FieldSnapshot, path) -> Path:
    """Legacy VTK (ASCII, version 3.0) unstructured grid of triangles."""
    m = snap.mesh
    lines = ["# vtk DataFile Version 3.0", f"ferrosim snapshot t=%.17g" % snap.t, "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {m.n_vertices} double"]
    lines.extend("%.17g %.17g 0" % (x, y) for x, y in m.vertices)
    lines.append(f"CELLS {m.n_cells} {4 * m.n_cells}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in m.cells)
    lines.append(f"CELL_TYPES {m.n_cells}")
    lines.extend(["5"] * m.n_cells)
    if snap.point_data:
        lines.append(f"POINT_DATA {m.n_vertices}")
        _vtk_arrays(lines, snap.point_data)
    if snap.cell_data:
        lines.append(f"CELL_DATA {m.n_cells}")
        _vtk_arrays(lines, snap.cell_data)
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_ledger(rows, path) -> Path:
    """CSV energy ledger with 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_FIELDS)
        for r in rows:
            d = r.row() if isinstance(r, StepLedger) else r
            w.writerow([str(int(d["step"]))] + ["%.17g" % d[k] for k in LEDGER_FIELDS[1:]])
    return path


def read_ledger(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LEDGER_FIELDS:
            raise ValueError(f"{path}: unexpected ledger header {reader.fieldnames}")
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in reader]


# -- driver -------------------------------------------------------------------------

LEDGER_SLACK = 1e-8  # relative to the initial energy
LEDGER_FLOOR = 1e-14  # absolute slack for runs that start at zero energy


@dataclass
class RunResult:
    status: int
    message: str
    ledger: List[StepLedger]
    state: Optional[State]
    initial: Optional[State]
    reports: list
    masses: List[float]
    spaces: Optional[SpaceSet] = None


def ledger_threshold(E0: float) -> float:
    return -(LEDGER_SLACK * abs(E0) + LEDGER_FLOOR)


def run_experiment(cfg: RunConfig, write: bool = True, callback=None,
                   phi0=None) -> RunResult:
    """Time loop with ledger checks; status 0 on success, nonzero on any failure."""
    threads = os.environ.get("FERROSIM_THREADS")
    if threads is not None:
        try:
            if int(threads) < 1:
                raise ValueError
        except ValueError:
            raise ConfigError(f"must be a positive integer, got {threads!r}",
                              "FERROSIM_THREADS") from None
        # assembly is sequential and deterministic; the cap is always honored
    mesh = cfg.build_mesh()
    sp = SpaceSet(mesh)
    stepper = Stepper(sp, cfg.params, cfg.dipoles, cfg.mode, cfg.picard, cfg.upwind)
    state = initial_state(sp, cfg.params, cfg.dipoles, cfg.mode, phi0=phi0,
                          depth=cfg.pool_depth)
    initial = state
    E0 = total_energy(sp, state, cfg.params, cfg.mode).total
    threshold = ledger_threshold(E0)
    out = Path(cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    ledger: List[StepLedger] = []
    reports = []
    masses = [phase_mass(sp, state.phi)]
    status, message = 0, "ok"

    def snap(k, st):
        if write and cfg.snapshot_every and k % cfg.snapshot_every == 0:
            write_snapshot(snapshot_from_state(sp, st), out / f"snapshot_{k:06d}.vtk")

    snap(0, state)
    t_start = time.perf_counter()
    for k in range(1, cfg.n_steps + 1):
        try:
            new, subs = stepper.advance_adaptive(state)
        except PicardNonconvergence as exc:
            status, message = 3, f"step {k}: {exc}"
            if exc.report is not None:
                reports.append(exc.report)
            break
        except NumericalFailure as exc:
            status, message = 4, f"step {k}: {exc}"
            break
        reports.extend(r for _, r, _ in subs)
        row = _composite_ledger(sp, cfg, state, subs, k)
        ledger.append(row)
        masses.append(phase_mass(sp, new.phi))
        state = new
        snap(k, state)
        if callback is not None:
            callback(k, state, row, subs)
        if row.residual < threshold:
            status, message = 2, (f"step {k}: energy ledger residual {row.residual:.3e} "
                                  f"below {threshold:.3e}")
            break
        if k % 50 == 0:
            log.info("step %d t=%.4g E=%.6g picard=%d (%.1fs)", k, state.t, row.E,
                     subs[-1][1].iterations, time.perf_counter() - t_start)
    if write:
        write_ledger(ledger, out / cfg.ledger_name)
        (out / "config.txt").write_text(serialize_config(cfg))
    return RunResult(status, message, ledger, state, initial, reports, masses, sp)


def _composite_ledger(sp, cfg: RunConfig, prev: State, subs, k: int) -> StepLedger:
    """Ledger row of one step; sub-steps from dt halving are summed."""
    rows, cur = [], prev
    for dt, _, st in subs:
        rows.append(step_ledger(sp, cur, st, cfg.params, cfg.dipoles, cfg.mode, k,
                                cfg.upwind, dt=dt))
        cur = st
    if len(rows) == 1:
        return rows[0]
    dt = cfg.params.dt
    wsum = lambda attr: sum(d * getattr(r, attr) for (d, _, _), r in zip(subs, rows)) / dt  # noqa: E731
    return StepLedger(k, rows[-1].t, rows[-1].energy, sum(r.D_n for r in rows), wsum("D_p"),
                      wsum("F"), sum(r.residual for r in rows))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ferrosim",
                                 description="Two-phase ferrofluid finite element simulator")
    ap.add_argument("--config", type=Path, help="key = value configuration file")
    ap.add_argument("--preset", choices=sorted(PRESETS), help="built-in parameter set")
    ap.add_argument("--output-dir", help="directory for snapshots and the ledger")
    ap.add_argument("--mode", choices=MODES)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--refine-levels", type=int)
    ap.add_argument("--snapshot-every", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args) -> RunConfig:
    pairs: Dict[str, str] = {}
    if args.preset:
        pairs["preset"] = args.preset
    if args.config:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}", "config") from None
        file_pairs = read_pairs(text)
        if "preset" in file_pairs and args.preset:
            file_pairs.pop("preset")
        pairs.update(file_pairs)
    for flag, key in (("output_dir", "output.dir"), ("mode", "mode"), ("steps", "steps"),
                      ("refine_levels", "mesh.refine_levels"),
                      ("snapshot_every", "output.snapshot_every")):
        val = getattr(args, flag)
        if val is not None:
            pairs[key] = str(val)
    return config_from_pairs(pairs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    if result.status:
        print(f"run failed: {result.message}", file=sys.stderr)
        rep = result.reports[-1] if result.reports else None
        if rep is not None:
            print(f"last Picard report: iterations={rep.iterations} "
                  f"increments={['%.3e' % v for v in rep.increments]}", file=sys.stderr)
    else:
        last = result.ledger[-1] if result.ledger else None
        print(f"completed {len(result.ledger)} steps; "
              + (f"final t={last.t:.6g}, E={last.E:.6g}" if last else "no steps"))
    return result.status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
