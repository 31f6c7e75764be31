"""Command-line front end: ``chargefield {fit,extract,metrics,slice,analyze}``.

Every command writes into an output directory together with a
``manifest.json``. Exit codes: 0 success, 64 usage, 1 I/O or parse error,
2 divergence, 3 failed precondition.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import socket
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .field import ChargeSet, set_threads
from .isosurface import GridAllocationError, default_grid, evaluate_grid, marching_cubes, slice_field
from .mesh import (
    MeshError,
    NotWatertightError,
    SpatialIndex,
    Transform,
    load_mesh,
    normalize_to_unit_cube,
    sample_surface,
    save_obj,
)
from .metrics import evaluate_pair
from .optim import DivergenceError, FitConfig, fit
from .spectral import SpectralGuardError, charge_stats, numeric_spectrum

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("chargefield")

EXIT_OK, EXIT_IO, EXIT_DIVERGED, EXIT_PRECONDITION, EXIT_USAGE = 0, 1, 2, 3, 64


class UsageError(Exception):
    pass


class PreconditionError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a number > 0, got {text}")
    return v


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker threads, 0 = all cores (default: $EISR_THREADS or 0)")
    g.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS,
                   help="require bit-reproducible outputs")
    g.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                   help="overwrite an existing run directory")
    g.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON file with option defaults")
    return p


GLOBAL_DEFAULTS = {"seed": 0, "threads": None, "deterministic": False, "force": False, "config": None}


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="chargefield", parents=[common],
                     description="Fit Gaussian charges to a mesh and extract the iso-surface.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common], help="optimise charges against a watertight mesh")
    p.add_argument("--input", required=True, help="OBJ or PLY mesh")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--charges", type=int, default=1000, help="number of charges K")
    p.add_argument("--steps", type=int, default=60_000)
    p.add_argument("--lr-start", type=_positive_float, default=1e-3)
    p.add_argument("--lr-end", type=_positive_float, default=1e-7)
    p.add_argument("--lambda-cr", type=float, default=2e-2, help="charge-restriction weight")
    p.add_argument("--tau", type=_positive_float, default=1.0, help="iso-value")
    p.add_argument("--batch", type=_positive_int, default=16_000)
    p.add_argument("--surface-pool", type=_positive_int, default=250_000)
    p.add_argument("--interior-pool", type=_positive_int, default=10_000)
    p.add_argument("--checkpoint-every", type=int, default=10_000, help="0 disables checkpoints")
    p.add_argument("--log-every", type=_positive_int, default=100)

    p = sub.add_parser("extract", parents=[common], help="marching cubes on the fitted field")
    p.add_argument("--charges", required=True, help="charges.json")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--tau", type=float, default=None, help="iso-value (default: stored in the charge file)")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--unnormalize", action="store_true",
                   help="map the mesh back to input coordinates with the stored transform")
    p.add_argument("--transform", default=None, help="transform.json (default: next to --charges)")

    p = sub.add_parser("metrics", parents=[common], help="compare a predicted mesh with ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--points", type=_positive_int, default=100_000)
    p.add_argument("--iou-resolution", type=int, default=128)
    p.add_argument("--no-iou", action="store_true")

    p = sub.add_parser("slice", parents=[common], help="planar cross-section image of the field")
    p.add_argument("--charges", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--extent", type=_positive_float, default=1.1)
    p.add_argument("--tau", type=float, default=None)

    p = sub.add_parser("analyze", parents=[common], help="charge statistics and single-charge spectrum")
    p.add_argument("--charges", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--mesh", default=None, help="normalised target mesh for charge-to-surface distances")
    p.add_argument("--surface-samples", type=_positive_int, default=100_000)
    p.add_argument("--spectrum", action="store_true", help="spectral profile of the largest-Q charge")
    p.add_argument("--spectrum-resolution", type=int, default=64)
    p.add_argument("--spectrum-extent", type=_positive_float, default=2.0)
    return parser


# -- config files --------------------------------------------------------------


def load_config(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(raw)
    return tomllib.loads(raw.decode("utf-8"))


def _config_defaults(cfg: dict, command: str, known: set) -> dict:
    """Flatten top-level keys plus the ``[command]`` table; other command tables are ignored."""
    commands = {"fit", "extract", "metrics", "slice", "analyze"}
    out = {}
    for key, value in cfg.items():
        if key in commands:
            continue
        out[key.replace("-", "_")] = value
    section = cfg.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section [{command}] must be a table")
    for key, value in section.items():
        out[key.replace("-", "_")] = value
    unknown = sorted(set(out) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    return out


def parse_args(argv) -> argparse.Namespace:
    argv = list(argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    command = next((a for a in argv if a in COMMANDS), None)
    defaults = {}
    if config_path and command:
        try:
            cfg = load_config(config_path)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[command]
        known = {a.dest for a in sub._actions if a.dest != "help"}
        defaults = _config_defaults(cfg, command, known)
        defaults.pop("config", None)
        # required options may come from the file
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for key, value in defaults.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    return args


# -- run directories -----------------------------------------------------------


class Run:
    def __init__(self, args, out_dir):
        self.args = args
        self.dir = Path(out_dir)
        self.t0 = time.perf_counter()
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.notes: list = []

    def prepare(self):
        manifest = self.dir / "manifest.json"
        if manifest.exists() and not self.args.force:
            raise UsageError(f"{self.dir} already holds a run; pass --force to overwrite")
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str, key: str | None = None) -> Path:
        p = self.dir / name
        self.outputs[key or name] = str(p)
        return p

    def write_manifest(self, status: str = "ok"):
        config = {k: v for k, v in sorted(vars(self.args).items())}
        doc = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.args.seed,
            "deterministic": bool(self.args.deterministic),
            "threads": self.args.threads_used,
            "version": __version__,
            "status": status,
            "wall_clock": time.perf_counter() - self.t0,
            "notes": self.notes,
            "host": {
                "hostname": socket.gethostname(),
                "platform": platform.platform(),
                "python": platform.python_version(),
                "numpy": np.__version__,
                "cpu_count": os.cpu_count(),
            },
        }
        (self.dir / "manifest.json").write_text(json.dumps(doc, indent=2, default=str) + "\n", encoding="utf-8")


def _load_charges(path) -> ChargeSet:
    try:
        return ChargeSet.load(path)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed charge file ({exc})") from None


# -- commands ------------------------------------------------------------------


def cmd_fit(args, run: Run) -> int:
    if args.charges < 1:
        raise UsageError("--charges must be >= 1")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    try:
        config = FitConfig(
            num_charges=args.charges, steps=args.steps, lr_start=args.lr_start, lr_end=args.lr_end,
            lambda_cr=args.lambda_cr, tau=args.tau, surface_pool=args.surface_pool, batch=args.batch,
            interior_pool=args.interior_pool, seed=args.seed, log_every=args.log_every,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run.inputs["mesh"] = str(args.input)
    mesh = load_mesh(args.input)
    if not mesh.is_watertight():
        raise PreconditionError(f"{args.input} is not watertight ({mesh.boundary_edge_count()} boundary edges); "
                                "interior sampling needs a closed surface")
    run.prepare()
    target, transform = normalize_to_unit_cube(mesh)
    run.path("transform.json").write_text(json.dumps(transform.to_dict(), indent=2) + "\n")

    def progress(rec):
        print(f"step {rec['step']:>7d}  loss {rec['loss']:.6e}  l_bc {rec['l_bc']:.6e}  "
              f"l_cr {rec['l_cr']:.6e}  lr {rec['lr']:.3e}", file=sys.stderr, flush=True)

    ckpt = run.path("checkpoints") if args.checkpoint_every > 0 else None
    try:
        charges, report = fit(target, config, progress, checkpoint_dir=ckpt,
                              checkpoint_every=args.checkpoint_every)
    except DivergenceError as exc:
        (run.dir / "divergence.json").write_text(json.dumps(exc.snapshot, indent=2, default=float))
        run.outputs["divergence.json"] = str(run.dir / "divergence.json")
        run.write_manifest(status="diverged")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    charges.save(run.path("charges.json"))
    run.path("report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    run.write_manifest()
    return EXIT_OK


def cmd_extract(args, run: Run) -> int:
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    run.inputs["charges"] = str(args.charges)
    charges = _load_charges(args.charges)
    tau = charges.iso_value if args.tau is None else args.tau
    transform = None
    if args.unnormalize:
        tpath = Path(args.transform) if args.transform else Path(args.charges).with_name("transform.json")
        run.inputs["transform"] = str(tpath)
        transform = Transform.from_dict(json.loads(tpath.read_text(encoding="utf-8")))
    run.prepare()
    origin, spacing, dims = default_grid(args.resolution)
    try:
        grid = evaluate_grid(charges, origin, spacing, dims)
    except GridAllocationError as exc:
        raise PreconditionError(str(exc)) from None
    mesh = marching_cubes(grid, tau)
    if not len(mesh.faces):
        msg = f"iso-value {tau:g} is outside the sampled range [{grid.values.min():g}, {grid.values.max():g}]; mesh is empty"
        log.warning(msg)
        run.notes.append(msg)
    elif transform is not None:
        mesh = mesh.transformed(transform.inverse())
    save_obj(mesh, run.path("mesh.obj"))
    run.notes.append(f"tau={tau!r} resolution={args.resolution} faces={len(mesh.faces)}")
    run.write_manifest()
    return EXIT_OK


def cmd_metrics(args, run: Run) -> int:
    run.inputs.update(pred=str(args.pred), gt=str(args.gt))
    pred = load_mesh(args.pred)
    gt = load_mesh(args.gt)
    iou_res = None if args.no_iou else args.iou_resolution
    if iou_res is not None:
        if iou_res < 8:
            raise UsageError("--iou-resolution must be >= 8")
        for name, m in (("ground truth", gt), ("prediction", pred)):
            if not len(m.faces):
                raise PreconditionError(f"{name} mesh is empty")
            if not m.is_watertight():
                raise PreconditionError(
                    f"{name} mesh has {m.boundary_edge_count()} boundary edges, so its inside is undefined "
                    "and IoU cannot be computed; pass --no-iou to skip it"
                )
    run.prepare()
    report = evaluate_pair(pred, gt, points=args.points, iou_resolution=iou_res, seed=args.seed)
    run.path("metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    line = report.to_tsv()
    run.path("metrics.tsv").write_text(line + "\n", encoding="utf-8")
    print(line)
    run.write_manifest()
    return EXIT_OK


def cmd_slice(args, run: Run) -> int:
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    run.inputs["charges"] = str(args.charges)
    charges = _load_charges(args.charges)
    run.prepare()
    img = slice_field(charges, args.axis, args.offset, args.resolution, args.extent, tau=args.tau)
    img.write(run.path("slice.pgm"), run.path("slice.json"))
    run.write_manifest()
    return EXIT_OK


def cmd_analyze(args, run: Run) -> int:
    run.inputs["charges"] = str(args.charges)
    charges = _load_charges(args.charges)
    index = None
    if args.mesh:
        run.inputs["mesh"] = str(args.mesh)
        mesh = load_mesh(args.mesh)
        index = SpatialIndex(sample_surface(mesh, args.surface_samples, seed=args.seed).positions)
    else:
        run.notes.append("no --mesh given; charge-to-surface distances omitted")
    stats = charge_stats(charges, index)
    profile = None
    if args.spectrum:
        idx = int(np.argmax(charges.q))
        single = ChargeSet(charges.locations[idx:idx + 1], charges.log_q[idx:idx + 1],
                           charges.log_sigma[idx:idx + 1], charges.permittivity, charges.iso_value)
        if len(charges) > 1:
            run.notes.append(f"spectrum computed for charge {idx} (largest Q) in isolation; "
                             f"the other {len(charges) - 1} charges were ignored")
        try:
            profile = numeric_spectrum(single, args.spectrum_resolution, args.spectrum_extent)
        except SpectralGuardError as exc:
            raise PreconditionError(str(exc)) from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        profile.charge_index = idx
    run.prepare()
    run.path("stats.json").write_text(stats.to_json() + "\n", encoding="utf-8")
    run.path("stats.csv").write_text(stats.to_csv(), encoding="utf-8")
    if profile is not None:
        run.path("spectrum.json").write_text(profile.to_json() + "\n", encoding="utf-8")
    run.write_manifest()
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "extract": cmd_extract, "metrics": cmd_metrics,
            "slice": cmd_slice, "analyze": cmd_analyze}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        if args.threads is not None and args.threads < 0:
            raise UsageError("--threads must be >= 0")
        # kernel reductions are blocked and ordered, so results do not depend on the thread count
        args.threads_used = set_threads(args.threads)
        run = Run(args, args.out)
        return COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NotWatertightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (OSError, MeshError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
