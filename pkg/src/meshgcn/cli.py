"""Command-line entry point: ``meshgcn <subcommand> ...``.

Exit codes: 0 success, 1 I/O failure, 2 validation failure, 3 numerical
failure. Every subcommand accepts ``--config FILE`` holding flat
``key = value`` lines (``#`` comments); explicit flags override the file.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import presets
from .evaluation import NORMALIZERS, ced, icp_align, interocular_distance, nme, write_ced
from .mesh import Mesh, MeshParseError, MeshValidationError, read_obj, write_obj, write_sparse
from .model import CheckpointError, DecoderConfig, decoder_forward, read_checkpoint
from .sampling import (
    DEFAULT_BOUNDARY_WEIGHT,
    build_hierarchy,
    decimate,
    downsampling_matrix,
    load_hierarchy,
    parse_lambda_strategy,
    save_hierarchy,
    upsampling_matrix,
)
from .train import NumericalError, TrainConfig, generate_synthetic, train

logger = logging.getLogger("meshgcn")

EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 1, 2, 3


class ValidationError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _existing_path(text: str) -> Path:
    p = Path(text)
    if not p.exists():
        raise ValidationError(f"path does not exist: {p}")
    return p


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; keys are normalized to flag destinations."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_decimate(args) -> int:
    mesh = read_obj(_existing_path(args.input))
    if not 3 <= args.target < mesh.n_vertices:
        raise ValidationError(f"--target must lie in [3, {mesh.n_vertices}), got {args.target}")
    coarse, kept = decimate(mesh, args.target, args.boundary_weight)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(coarse, out / "mesh.obj")
    np.savetxt(out / "kept.txt", kept, fmt="%d")
    write_sparse(downsampling_matrix(kept, mesh.n_vertices), out / "down.txt")
    write_sparse(upsampling_matrix(mesh, coarse, kept), out / "up.txt")
    print(f"vertices {mesh.n_vertices} -> {coarse.n_vertices} (target {args.target}), "
          f"faces {mesh.n_faces} -> {coarse.n_faces}")
    return 0


def cmd_hierarchy(args) -> int:
    mesh = read_obj(_existing_path(args.input))
    targets = list(args.targets)
    if not targets:
        raise ValidationError("--targets needs at least one vertex count")
    if any(b >= a for a, b in zip([mesh.n_vertices] + targets, targets)) or min(targets) < 3:
        raise ValidationError(f"targets must decrease strictly from {mesh.n_vertices} and stay >= 3")
    parse_lambda_strategy(args.lambda_max)
    h = build_hierarchy(mesh, targets, args.boundary_weight, args.lambda_max)
    save_hierarchy(h, args.out)
    for k, lv in enumerate(h.levels):
        print(f"level {k}: {lv.n_vertices} vertices, {lv.mesh.n_faces} faces, "
              f"lambda_max {lv.lambda_max:.6g}")
    return 0


def _decoder_config(args, n_levels: int) -> DecoderConfig:
    channels = tuple(args.block_channels)
    if len(channels) != n_levels:
        raise ValidationError(f"--block-channels has {len(channels)} entries for "
                              f"{n_levels} hierarchy levels")
    return DecoderConfig(latent_dim=args.latent_dim, cheb_order=args.cheb_order,
                         block_channels=channels, head_channels=tuple(args.head_channels),
                         leaky_slope=args.leaky_slope, lambda_strategy=args.lambda_max,
                         seed=args.seed, norm=args.norm)


def cmd_train_toy(args) -> int:
    if args.alpha < 0:
        raise ValidationError("--alpha must be >= 0")
    if args.cheb_order < 1:
        raise ValidationError("--cheb-order must be >= 1")
    if not 0 < args.leaky_slope < 1:
        raise ValidationError("--leaky-slope must lie in (0, 1)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.hierarchy:
        h = load_hierarchy(_existing_path(args.hierarchy))
        if Path(args.hierarchy).resolve() != (out / "hierarchy").resolve():
            shutil.copytree(args.hierarchy, out / "hierarchy", dirs_exist_ok=True)
    else:
        h = presets.toy_hierarchy(args.lambda_max)
        save_hierarchy(h, out / "hierarchy")
    dcfg = _decoder_config(args, len(h.levels))
    data = generate_synthetic(h.levels[0].mesh, args.latent_dim, args.samples, seed=args.seed)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       decay_every=args.decay_every, alpha=args.alpha, seed=args.seed)
    with open(out / "config.txt", "w") as fh:
        for key, value in sorted(vars(args).items()):
            if key in ("func", "config"):
                continue
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")
    result = train(h, data, dcfg, tcfg, out_dir=out)
    first, last = result.history[0]["l1"], result.history[-1]["l1"]
    print(f"epochs {len(result.history)}: l1 {first:.6g} -> {last:.6g} "
          f"({100 * last / first:.2f}% of epoch 1)")
    return 0


def _read_points(path: Path) -> np.ndarray:
    if path.suffix == ".obj":
        return read_obj(path).vertices
    pts = np.loadtxt(path, ndmin=2)
    if pts.shape[1] != 3:
        raise ValidationError(f"{path}: expected 3 columns")
    return pts


def cmd_infer(args) -> int:
    h = load_hierarchy(_existing_path(args.hierarchy))
    params = read_checkpoint(_existing_path(args.checkpoint), h)
    z = np.loadtxt(_existing_path(args.latent), ndmin=2)
    if z.shape[1] != params.config.latent_dim:
        raise ValidationError(f"latent rows have {z.shape[1]} entries, "
                              f"checkpoint expects {params.config.latent_dim}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = decoder_forward(z, h, params)
    faces = h.levels[0].mesh.faces
    for i, verts in enumerate(pred):
        write_obj(Mesh(verts, faces), out / f"mesh_{i:04d}.obj")
    print(f"wrote {len(pred)} meshes with {pred.shape[1]} vertices to {out}")
    return 0


POINT_SUFFIXES = (".obj", ".txt", ".xyz")


def _index_dir(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix in POINT_SUFFIXES}


def cmd_eval(args) -> int:
    pred_dir, gt_dir = _existing_path(args.pred), _existing_path(args.gt)
    preds, gts = _index_dir(pred_dir), _index_dir(gt_dir)
    if not gts or set(preds) != set(gts):
        missing = sorted(set(preds) ^ set(gts))
        raise ValidationError(f"prediction and ground-truth ids do not pair up: {missing[:5]}")
    eyes = None
    if args.normalizer == "interocular":
        if not args.eye_indices or len(args.eye_indices) != 2:
            raise ValidationError("--normalizer interocular needs --eye-indices LEFT,RIGHT")
        eyes = args.eye_indices
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    with open(out / "report.csv", "w") as fh:
        fh.write("sample_id,nme,d,aligned\n")
        for sid in sorted(gts):
            p, g = _read_points(preds[sid]), _read_points(gts[sid])
            if p.shape != g.shape:
                raise ValidationError(f"{sid}: {p.shape[0]} predicted vs {g.shape[0]} true points")
            if args.icp:
                p = icp_align(p, g).aligned
            if eyes is not None:
                d = interocular_distance(g, eyes[0], eyes[1])
                if d <= 0:
                    raise ValidationError(f"{sid}: eye landmarks coincide")
            else:
                d = NORMALIZERS[args.normalizer](g)
            e = nme(p, g, d)
            errors.append(e)
            fh.write(f"{sid},{e!r},{d!r},{str(bool(args.icp)).lower()}\n")
    if args.ced is not None:
        write_ced(ced(errors, cutoff=args.ced), out / "ced.csv")
    print(f"{len(errors)} samples, mean NME {np.mean(errors):.6g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="meshgcn", description=__doc__.split("\n")[0],
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.add_argument("--config", default=None, help="key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("decimate", cmd_decimate, "quadric-error decimation of one OBJ mesh")
    p.add_argument("--in", dest="input", required=True, help="input OBJ mesh")
    p.add_argument("--target", type=int, required=True, help="target vertex count")
    p.add_argument("--boundary-weight", type=float, default=DEFAULT_BOUNDARY_WEIGHT,
                   help="weight of boundary-preserving quadrics")
    p.add_argument("--out", required=True, help="output directory")

    p = add("hierarchy", cmd_hierarchy, "build a multi-level mesh hierarchy")
    p.add_argument("--in", dest="input", required=True, help="input OBJ mesh")
    p.add_argument("--targets", type=_int_list, required=True,
                   help="comma-separated, strictly decreasing vertex counts")
    p.add_argument("--boundary-weight", type=float, default=DEFAULT_BOUNDARY_WEIGHT,
                   help="weight of boundary-preserving quadrics")
    p.add_argument("--lambda-max", default="power", help="'power' or 'fixed:<value>'")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-toy", cmd_train_toy, "train the decoder on synthetic deformed meshes")
    toy = presets.TOY
    p.add_argument("--hierarchy", default=None,
                   help="hierarchy directory (default: built-in 642/162/42 sphere)")
    p.add_argument("--latent-dim", type=int, default=toy["latent_dim"], help="latent size")
    p.add_argument("--samples", type=int, default=toy["samples"], help="training samples")
    p.add_argument("--epochs", type=int, default=toy["epochs"], help="training epochs")
    p.add_argument("--batch-size", type=int, default=toy["batch_size"], help="mini-batch size")
    p.add_argument("--lr", type=float, default=toy["lr"], help="initial Adam learning rate")
    p.add_argument("--decay-every", type=int, default=toy["decay_every"],
                   help="halve the learning rate every this many epochs")
    p.add_argument("--alpha", type=float, default=toy["alpha"], help="smooth-loss weight")
    p.add_argument("--cheb-order", type=int, default=toy["cheb_order"], help="Chebyshev order K")
    p.add_argument("--block-channels", type=_int_list, default=toy["block_channels"],
                   help="residual block widths, coarsest level first")
    p.add_argument("--head-channels", type=_int_list, default=toy["head_channels"],
                   help="widths of the two output convolutions")
    p.add_argument("--leaky-slope", type=float, default=toy["leaky_slope"],
                   help="negative slope of the leaky activation")
    p.add_argument("--norm", choices=("instance", "batch"), default="instance",
                   help="normalization layer ('batch' is a diagnostic)")
    p.add_argument("--lambda-max", default="power", help="'power' or 'fixed:<value>'")
    p.add_argument("--seed", type=int, default=0, help="seed for init, data and shuffling")
    p.add_argument("--out", required=True, help="output directory")

    p = add("infer", cmd_infer, "decode latent vectors to OBJ meshes")
    p.add_argument("--checkpoint", required=True, help="model.ckpt from train-toy")
    p.add_argument("--hierarchy", required=True, help="hierarchy directory the model used")
    p.add_argument("--latent", required=True, help="text file, one latent vector per row")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "NME report (and CED curve) for paired point sets")
    p.add_argument("--pred", required=True, help="directory of predicted .obj/.txt/.xyz files")
    p.add_argument("--gt", required=True, help="directory of ground-truth files, same ids")
    p.add_argument("--normalizer", choices=("bbox", "diagonal", "interocular"), default="bbox",
                   help="normalization factor computed from the ground truth")
    p.add_argument("--eye-indices", type=_int_list, default=None,
                   help="LEFT,RIGHT point indices of the outer eye corners")
    p.add_argument("--icp", action="store_true", help="rigidly align predictions first")
    p.add_argument("--ced", type=float, default=None, metavar="CUTOFF",
                   help="also write ced.csv up to this NME cutoff")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _config_path(argv) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv``, taking defaults from ``--config`` when one is given."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    values = read_config_file(_existing_path(path))
    subparser = choices[command]
    # keys may name either the flag (``in``) or its destination (``input``)
    actions = {}
    for a in subparser._actions:
        if a.dest in ("help", "config"):
            continue
        actions[a.dest] = a
        for opt in a.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = a
    defaults = {}
    for key, value in values.items():
        if key not in actions:
            raise ValidationError(f"unknown config key {key!r} for {command}")
        action = actions[key]
        key = action.dest
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                defaults[key] = action.type(value)
            else:
                defaults[key] = value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ValidationError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise ValidationError(f"config key {key!r} must be one of {sorted(action.choices)}")
        action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _thread_limit():
    try:
        n = int(os.environ.get("MESHGCN_THREADS", "0"))
    except ValueError:
        n = 0
    if n > 0:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=n)
    return contextlib.nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except ValidationError as exc:
        print(f"meshgcn: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_VALIDATION
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NumericalError as exc:
        print(f"meshgcn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, MeshParseError, MeshValidationError, CheckpointError,
            KeyError, ValueError) as exc:
        print(f"meshgcn: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"meshgcn: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
