"""Command-line interface: ``atlasforge synth | fit | extract | eval``.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure, 3 empty
reconstructed domain. Set ``ATLASFORGE_LOG`` to error, warn, info or debug.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from atlasforge import io
from atlasforge.errors import AtlasError, EmptyDomain, NumericalError
from atlasforge.geom import SURFACE_DEFAULTS, SURFACE_KINDS, Normalization, normalization_of, synth_surface
from atlasforge.infer import InferenceConfig, estimate_label_frequency, extract_mesh, extract_point_cloud
from atlasforge.losses import LossWeights
from atlasforge.metrics import evaluate
from atlasforge.train import TrainConfig, TrainingAborted, fit, write_history_csv

log = logging.getLogger("atlasforge")

EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_EMPTY = 3

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
               "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Every knob of a fit/extract/eval run, as flat keys of a JSON config file."""

    target: str | None = None
    out: str | None = None
    seed: int = 0
    charts: int = 3
    uv_samples_total: int = 5000
    iterations: int = 2000
    lr: float = 1e-3
    lr_decay: float = 0.1
    lambda_rec: float = 1.0
    lambda_occ: float = 1.0
    lambda_dist: float = 1e-5
    eps: float = 1e-4
    hidden: int = 128
    octaves: int = 6
    eta: float = 0.40
    tau: float = 0.5
    probe_samples: int = 5000
    grid_res: int = 64
    max_refill_rounds: int = 10
    eval_size: int = 2500
    checkpoint_every: int = 0

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise CliError(f"config {path} must hold a flat JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise CliError(f"unknown config keys in {path}: {', '.join(unknown)}")
        return cls(**raw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            charts=self.charts, uv_samples_total=self.uv_samples_total,
            iterations=self.iterations, lr=self.lr, lr_decay=self.lr_decay,
            weights=LossWeights(self.lambda_rec, self.lambda_occ, self.lambda_dist),
            eps=self.eps, seed=self.seed, hidden=self.hidden, octaves=self.octaves,
        )

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(eta=self.eta, tau=self.tau, probe_samples=self.probe_samples,
                               grid_res=self.grid_res, max_refill_rounds=self.max_refill_rounds)


# flag name -> RunConfig field
_OVERRIDES = {
    "seed": "seed", "charts": "charts", "iterations": "iterations",
    "lambda_dist": "lambda_dist", "eta": "eta", "tau": "tau", "grid_res": "grid_res",
    "eval_size": "eval_size", "out": "out", "target": "target",
    "uv_samples": "uv_samples_total", "hidden": "hidden", "lr": "lr",
    "checkpoint_every": "checkpoint_every",
}


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _write(path, writer, *payload) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        writer(path, *payload)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from exc


def _read_points(path) -> np.ndarray:
    try:
        return io.read_points(path)
    except OSError as exc:
        raise CliError(f"cannot read point cloud {path}: {exc.strerror}") from exc


def _load_checkpoint(path):
    try:
        return io.load_atlas(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def cmd_synth(args) -> int:
    params = {}
    for item in args.param or []:
        key, _, value = item.partition("=")
        try:
            params[key] = float(value)
        except ValueError as exc:
            raise CliError(f"bad --param {item!r}; expected name=value") from exc
    cloud = synth_surface(args.kind, args.n, np.random.default_rng(args.seed), **params)
    _write(args.out_path, io.write_points, cloud)
    log.info("wrote %d points to %s", len(cloud), args.out_path)
    return 0


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    if not cfg.target:
        raise CliError("no target point cloud given (config key 'target' or --target)")
    out = Path(cfg.out or "fit_out")
    raw = _read_points(cfg.target)
    norm = normalization_of(raw)
    target = norm.apply(raw)
    tcfg = cfg.train_config()
    icfg = cfg.inference_config()
    meta = {"config": asdict(cfg), "normalization": norm.to_dict()}
    ckpt = out / "atlas.ckpt"

    def checkpoint(step, atlas, report):
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _write(ckpt, io.save_atlas, atlas, {**meta, "step": step + 1})

    try:
        atlas, history = fit(target, tcfg, callback=checkpoint)
    except TrainingAborted as exc:
        _write(ckpt, io.save_atlas, exc.atlas, {**meta, "step": len(exc.history), "aborted": True})
        _write(out / "history.csv", write_history_csv, exc.history)
        raise CliError(f"training aborted: {exc}; last good checkpoint kept at {ckpt}",
                       EXIT_NUMERICAL) from exc
    atlas.tau = icfg.tau
    atlas.set_label_frequency(
        estimate_label_frequency(atlas, icfg, np.random.default_rng([cfg.seed, 1])))
    final = history[-1]
    summary = {
        "config": asdict(cfg),
        "normalization": norm.to_dict(),
        "label_frequency": atlas.label_frequency,
        "final": {"L_rec": final.rec, "L_occ": final.occ, "L_dist": final.dist,
                  "total": final.total},
        "steps": len(history),
    }
    _write(ckpt, io.save_atlas, atlas, {**meta, "step": len(history)})
    _write(out / "history.csv", write_history_csv, history)
    _write(out / "run.json", lambda p, s: Path(p).write_text(s),
           json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"fit done: {len(history)} steps, L_rec={final.rec:.4e}, c={atlas.label_frequency:.4f}"
          f" -> {ckpt}")
    return 0


def _apply_inference_overrides(atlas, meta, args) -> RunConfig:
    base = RunConfig(**meta["config"]) if "config" in meta else RunConfig()
    for flag in ("eta", "tau", "grid_res", "eval_size", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(base, flag, value)
    atlas.tau = base.tau
    return base


def cmd_extract(args) -> int:
    atlas, meta = _load_checkpoint(args.checkpoint)
    cfg = _apply_inference_overrides(atlas, meta, args)
    norm = Normalization.from_dict(meta["normalization"]) if "normalization" in meta \
        else Normalization.identity()
    rng = np.random.default_rng(cfg.seed)
    if args.grid_res is not None and args.n is None:
        mesh = extract_mesh(atlas, cfg.grid_res)
        mesh = type(mesh)(norm.invert(mesh.vertices), mesh.triangles, mesh.chart_id)
        _write(args.out, io.write_obj, mesh)
        print(f"wrote mesh with {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles"
              f" to {args.out}")
        return 0
    n = args.n if args.n is not None else cfg.eval_size
    ext = extract_point_cloud(atlas, n, cfg.inference_config(), rng)
    _write(args.out, io.write_points, norm.invert(ext.points))
    if args.provenance:
        _write(args.provenance, io.write_provenance, ext.chart, ext.uv)
    print(f"wrote {len(ext.points)} points to {args.out} "
          f"(occupancy rate {ext.occupancy_rate:.4f}, {ext.rounds} refill rounds)")
    return 0


def cmd_eval(args) -> int:
    atlas, meta = _load_checkpoint(args.checkpoint)
    cfg = _apply_inference_overrides(atlas, meta, args)
    norm = Normalization.from_dict(meta["normalization"]) if "normalization" in meta \
        else Normalization.identity()
    target = norm.apply(_read_points(args.target))
    report = evaluate(atlas, target, np.random.default_rng(cfg.seed), size=cfg.eval_size,
                      cfg=cfg.inference_config())
    if args.out:
        _write(args.out, lambda p, s: Path(p).write_text(s), report.to_json())
    print(report.summary())
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: machine parallelism)")
    common.add_argument("--seed", type=int, default=None)

    parser = _Parser(prog="atlasforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    kinds = ", ".join(f"{k} ({', '.join(f'{p}={v:g}' for p, v in SURFACE_DEFAULTS[k].items())})"
                      for k in SURFACE_KINDS)
    p = sub.add_parser("synth", parents=[common], help="sample a synthetic surface",
                       description=f"Sample an analytic surface and unit-ball normalize it. "
                                   f"Kinds and default parameters: {kinds}.")
    p.add_argument("kind", choices=SURFACE_KINDS)
    p.add_argument("n", type=int)
    p.add_argument("out_path")
    p.add_argument("--param", action="append", metavar="NAME=VALUE",
                   help="override a surface parameter")
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("fit", parents=[common], help="fit an atlas to a point cloud")
    p.add_argument("--config", help="flat JSON config; flags override its values")
    p.add_argument("--target")
    p.add_argument("--out", help="output directory")
    p.add_argument("--charts", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lambda-dist", dest="lambda_dist", type=float)
    p.add_argument("--uv-samples", dest="uv_samples", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", parents=[common], help="extract a point cloud or mesh")
    p.add_argument("checkpoint")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--n", type=int, help="exact point count (XYZ output)")
    group.add_argument("--grid-res", dest="grid_res", type=int, help="UV grid size (OBJ output)")
    p.add_argument("--out", required=True)
    p.add_argument("--provenance", help="CSV of chart, u, v per extracted point")
    p.add_argument("--eta", type=float)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", parents=[common], help="evaluate against a target cloud")
    p.add_argument("checkpoint")
    p.add_argument("target")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.add_argument("--grid-res", dest="grid_res", type=int)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_eval)
    return parser


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("ATLASFORGE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except CliError as exc:
        print(f"atlasforge: {exc}", file=sys.stderr)
        return exc.code
    except EmptyDomain as exc:
        print(f"atlasforge: empty domain: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except NumericalError as exc:
        print(f"atlasforge: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (AtlasError, KeyError, TypeError) as exc:
        print(f"atlasforge: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
