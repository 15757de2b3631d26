"""Command-line entry point: ``kirchhoffnet <subcommand> [options]``.

Exit codes: 0 success, 1 other package error, 2 configuration/parse error,
3 numeric divergence, 4 failed gradient check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .config import (bundled_config, bundled_config_names, build_data, build_model, load_config,
                     resolve_config, run_experiment, TASK_LOSS, train_config)
from .devices import NONLINEAR_KINDS
from .errors import ConfigError, KirchhoffError, NumericError, ParseError
from .integrator import hw_scale
from .model import load_checkpoint
from .topology import fc_topo, ne_topo, proj_topo
from .training import evaluate

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-4

log = logging.getLogger("kirchhoffnet")


def _add_common(p: argparse.ArgumentParser, config_required: bool = False):
    src = p.add_mutually_exclusive_group(required=config_required)
    src.add_argument("--config", help="experiment config (JSON)")
    src.add_argument("--preset", choices=bundled_config_names(), help="use a bundled config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="override the output directory")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. net.steps=20 (repeatable)")


def _resolve(args) -> dict:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"out_dir={json.dumps(args.out_dir)}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.preset:
        return resolve_config(bundled_config(args.preset), overrides)
    if args.config:
        return load_config(args.config, overrides)
    raise ConfigError("--config", "a config file or --preset is required")


def _checkpoint_path(args, cfg) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg["out_dir"]) / "checkpoint.json"


def _write_rows(path: Path, header, rows) -> Path:
    lines = [",".join(header)]
    lines += [",".join(repr(float(x)) for x in row) for row in rows]
    return atomic_write_text(path, "\n".join(lines) + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_topo(args) -> int:
    if args.kind == "fc":
        topo = fc_topo(args.nodes, args.repeat)
    elif args.kind == "ne":
        topo = ne_topo(args.c, args.w, args.h, args.k, args.repeat)
    else:
        topo = proj_topo(args.c, args.w, args.h, args.k, args.n_proj, args.repeat, args.repeat_proj)
    if args.ground_repeat:
        topo = topo.with_ground_edges(range(topo.num_nodes), args.ground_repeat)
    text = topo.to_text()
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote {args.out}: {topo.num_nodes} nodes, {topo.num_edges} edges", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)

    def progress(row):
        metric = "" if row["test_metric"] is None else f" test={row['test_metric']:.6g}"
        print(f"epoch {row['epoch']:>5} loss={row['train_loss']:.6g}{metric} "
              f"lr={row['lr']:.3g} t={row['wall_clock_s']:.1f}s", flush=True)

    result, *_ = run_experiment(cfg, progress=None if args.quiet else progress)
    out = Path(cfg["out_dir"])
    print(f"best test metric: {result.best_metric}")
    print(f"artifacts: {out / 'checkpoint.json'}, {out / 'metrics.csv'}, {out / 'config.resolved.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    net = load_checkpoint(_checkpoint_path(args, cfg))
    _, test, target = build_data(cfg)
    tc = train_config(cfg)
    metric = evaluate(net, TASK_LOSS[cfg["task"]], test, target, eval_seed=cfg["seed"] + 1,
                      eval_samples=tc.eval_samples)
    names = {"regression": "test_l2", "classification": "test_accuracy",
             "generation": "test_nll", "density": "kl_estimate"}
    doc = {names[cfg["task"]]: metric}
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "eval.json", json.dumps(doc, indent=2) + "\n")
    print(f"{names[cfg['task']]} = {metric:.10g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _resolve(args) if (args.config or args.preset) else None
    seed = args.seed if args.seed is not None else (cfg["seed"] if cfg else 0)
    out = Path(args.out_dir or (cfg["out_dir"] if cfg else "."))
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    net = load_checkpoint(ckpt)
    X = net.sample(args.n, seed)
    out.mkdir(parents=True, exist_ok=True)
    path = _write_rows(out / "samples.csv", [f"x{i}" for i in range(X.shape[1])], X)
    print(f"wrote {len(X)} samples to {path}")
    return EXIT_OK


def density_grid(net, grid: int = 200, lim: float = 4.0, batch: int = 4096):
    """Midpoint grid over ``[-lim, lim]^2``: returns ``(points, log q, mass)``."""
    h = 2 * lim / grid
    centers = -lim + h * (np.arange(grid) + 0.5)
    xx, yy = np.meshgrid(centers, centers, indexing="ij")
    P = np.column_stack([xx.ravel(), yy.ravel()])
    logq = np.concatenate([net.logdensity(P[i:i + batch]) for i in range(0, len(P), batch)])
    return P, logq, float(np.sum(np.exp(logq)) * h * h)


def cmd_density(args) -> int:
    cfg = _resolve(args) if (args.config or args.preset) else None
    out = Path(args.out_dir or (cfg["out_dir"] if cfg else "."))
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    net = load_checkpoint(ckpt)
    if len(net.input_nodes) != 2:
        raise ConfigError("checkpoint", "density grids need a 2-D flow network")
    P, logq, mass = density_grid(net, args.grid, args.lim)
    out.mkdir(parents=True, exist_ok=True)
    path = _write_rows(out / "density_grid.csv", ["x0", "x1", "logq"], np.column_stack([P, logq]))
    print(f"wrote {len(P)} grid points to {path}")
    print(f"quadrature mass over [-{args.lim:g}, {args.lim:g}]^2: {mass:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    reports = run_gradcheck(kinds=args.kinds, n_nets=args.nets, seed=args.seed or 0, eps=args.eps)
    ok = True
    for r in reports:
        passed = r.max_rel_error < args.tol
        ok &= passed
        print(f"{r.kind:<8} max_rel_error={r.max_rel_error:.3e} checked={r.checked} "
              f"excluded={r.excluded} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_scale(args) -> int:
    horizon = args.horizon
    if horizon is None:
        if args.config or args.preset:
            net_cfg = _resolve(args)["net"]
            horizon = net_cfg["D"] * net_cfg["T"]
        else:
            horizon = 1.0
    plan = hw_scale(horizon, args.a)
    text = plan.table() + "\n"
    sys.stdout.write(text)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(args.out_dir) / "scale.txt", text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kirchhoffnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log gradient clipping and other events")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("topo", help="print a layer topology as edge-list text")
    p.add_argument("--kind", choices=("fc", "ne", "proj"), default="fc")
    p.add_argument("--nodes", type=int, default=3)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--ground-repeat", type=int, default=0)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--w", type=int, default=28)
    p.add_argument("--h", type=int, default=28)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n-proj", type=int, default=10)
    p.add_argument("--repeat-proj", type=int, default=1)
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_topo)

    p = sub.add_parser("train", help="train a network from a config")
    _add_common(p)
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's test data")
    _add_common(p)
    p.add_argument("--checkpoint", help="defaults to <out_dir>/checkpoint.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a trained flow")
    _add_common(p)
    p.add_argument("--checkpoint", help="defaults to <out_dir>/checkpoint.json")
    p.add_argument("-n", type=int, default=1000, help="number of samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("density", help="evaluate log q on a 2-D grid and report its mass")
    _add_common(p)
    p.add_argument("--checkpoint", help="defaults to <out_dir>/checkpoint.json")
    p.add_argument("--grid", type=int, default=200, help="grid points per axis")
    p.add_argument("--lim", type=float, default=4.0, help="grid covers [-lim, lim]^2")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("gradcheck", help="compare adjoint gradients with finite differences")
    p.add_argument("--kinds", nargs="+", default=[k.value for k in NONLINEAR_KINDS])
    p.add_argument("--nets", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scale", help="hardware capacitance and inference time for a scale factor")
    _add_common(p)
    p.add_argument("--a", type=float, required=True, help="scale factor")
    p.add_argument("--horizon", type=float, help="software horizon D*T (default from config, else 1)")
    p.set_defaults(func=cmd_scale)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KirchhoffError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
