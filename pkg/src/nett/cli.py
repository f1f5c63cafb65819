"""Command line interface.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
"""

import argparse
import hashlib
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import NonconvexFamily, QuadraticFamily, RateFunction, rate_experiment
from .grid import Image, Sinogram, read_grid, relative_error, write_grid, write_pgm
from .net import TrainConfig, TrainingDiverged, load_network, save_network, train, unet, write_loss_csv
from .operators import (
    FbpConfig,
    FbpWeightedOperator,
    PatOperator,
    equispaced_subset,
    estimate_normal_norm,
    fbp_reconstruct,
    read_geometry,
    write_geometry,
)
from .phantoms import (
    BlobPhantomSpec,
    EllipsePhantomSpec,
    add_noise,
    build_training_set,
    gen_blob_phantom,
    gen_ellipse_phantom,
    load_training_set,
    save_training_set,
)
from .regularizers import NetworkRegularizer
from .rng import SeededRng, derive_seed
from .solver import AlphaRule, NettProblem, SolveConfig, SolverDiverged, nett_minimize, write_trace_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Training run settings read from a ``key=value`` file.

    Unknown keys are rejected.  Defaults reproduce the desk-scale setup.
    """

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    loss: str = "mse"
    net_seed: int = 0
    channels: str = "8,16"
    bottleneck_channels: int = 16
    skip_connections: bool = True
    slope: float = 0.1

    @classmethod
    def from_file(cls, path):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            if key not in types:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                if kind is bool:
                    if raw.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(raw)
                    values[key] = raw.lower() in ("true", "1")
                else:
                    values[key] = kind(raw)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from None
        return cls(**values)

    def train_config(self):
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum,
                           self.seed, self.loss)

    def network(self, input_shape):
        chans = tuple(int(c) for c in self.channels.split(","))
        return unet(input_shape, chans, self.bottleneck_channels, self.slope,
                    self.skip_connections, self.net_seed)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _write_manifest(out_dir, command, args, config_text=""):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    argv = " ".join(f"--{k}={v}" for k, v in sorted(vars(args).items()) if k not in ("func", "command"))
    lines = [
        f"command={command}",
        f"args={argv}",
        f"config_sha256={hashlib.sha256(config_text.encode()).hexdigest()}",
        f"nett={__version__}",
        f"numpy={np.__version__}",
        f"scipy={scipy.__version__}",
        f"python={platform.python_version()}",
    ]
    (out_dir / f"manifest_{command}.txt").write_text("\n".join(lines) + "\n")


def _read(path, kind):
    try:
        grid = read_grid(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    if not isinstance(grid, kind):
        raise UsageError(f"{path}: expected {kind.__name__.lower()} file")
    return grid.values


def _geometry(path):
    try:
        return read_geometry(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None


# commands -----------------------------------------------------------------


def _out_file(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_phantom(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.n):
        seed = derive_seed(args.seed, k)
        if args.kind == "ellipse":
            img = gen_ellipse_phantom(EllipsePhantomSpec(grid_n=args.grid_n, seed=seed))
        else:
            img = gen_blob_phantom(BlobPhantomSpec(grid_n=args.grid_n, seed=seed))
        write_grid(out / f"{args.kind}_{k:04d}.nett", Image(img))
        write_pgm(out / f"{args.kind}_{k:04d}.pgm", img)
    _write_manifest(out, "phantom", args)


def cmd_geometry(args):
    subset = None if args.sensors == args.full_sensors else equispaced_subset(args.full_sensors, args.sensors)
    op = PatOperator(args.grid_n, args.full_sensors, args.radii, args.r_max, subset)
    write_geometry(_out_file(args.out), op)


def cmd_forward(args):
    op = _geometry(args.geom)
    x = _read(args.input, Image)
    y = op.apply(x)
    if args.noise:
        y, _ = add_noise(y, args.noise, SeededRng(args.seed))
    write_grid(_out_file(args.out), Sinogram(y))


def cmd_fbp(args):
    op = _geometry(args.geom)
    y = _read(args.input, Sinogram)
    x = fbp_reconstruct(op, FbpConfig(args.filter), y)
    write_grid(_out_file(args.out), Image(x))
    write_pgm(Path(args.out).with_suffix(".pgm"), x)


def cmd_dataset(args):
    op = _geometry(args.geom)
    data = build_training_set(op, FbpConfig(args.filter), args.n_half, args.seed)
    save_training_set(args.out, data)


def cmd_train(args):
    config_text = Path(args.config).read_text() if args.config else ""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    try:
        data = load_training_set(args.data)
    except FileNotFoundError:
        raise UsageError(f"no training set manifest in {args.data}") from None
    net = cfg.network(data.inputs.shape[1:])
    net, curve = train(net, data, cfg.train_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_network(out, net)
    write_loss_csv(out.with_suffix(".loss.csv"), curve)
    _write_manifest(out.parent, "train", args, config_text)


def cmd_reconstruct(args):
    op = _geometry(args.geom)
    y = _read(args.data, Sinogram)
    net = load_network(args.net)
    reg = NetworkRegularizer(net, p=args.p)
    if args.metric == "fbp":
        fwd = FbpWeightedOperator(op)
        step = args.step if args.step is not None else 0.4
    else:
        fwd = op
        step = args.step if args.step is not None else 0.4 / estimate_normal_norm(op)
    snaps = _int_list(args.snapshot) if args.snapshot else []
    iters = max([args.iters] + snaps)
    result = nett_minimize(
        NettProblem(fwd, y, reg, args.alpha),
        SolveConfig(step_sizes=step, max_iter=iters, snapshots=tuple(snaps)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, x in sorted(result.snapshots.items()):
        write_grid(out / f"x_{k}.nett", Image(x))
        write_pgm(out / f"x_{k}.pgm", x)
    write_grid(out / "x_final.nett", Image(result.x))
    write_trace_csv(out / "trace.csv", result)
    if args.truth:
        z = _read(args.truth, Image)
        lines = ["iterate,relative_error"]
        lines.append(f"fbp,{float(relative_error(z, fbp_reconstruct(op, FbpConfig(), y)))!r}")
        for k, x in sorted(result.snapshots.items()):
            lines.append(f"x_{k},{float(relative_error(z, x))!r}")
        lines.append(f"x_final,{float(relative_error(z, result.x))!r}")
        (out / "errors.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, "reconstruct", args)


def cmd_rates(args):
    deltas = _float_list(args.deltas)
    if args.family == "quad":
        family = QuadraticFamily(seed=args.seed)
    else:
        family = NonconvexFamily(c=args.c, seed=args.seed)
    if args.rule == "prop":
        rule = AlphaRule("proportional_delta", c=args.alpha_c)
    else:
        rule = AlphaRule("rate_matched", c=args.alpha_c, rate_function=RateFunction("sqrt"))
    report = rate_experiment(family, rule, deltas, args.measure, tolerance=args.tolerance)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out)
    print(f"fitted_slope={report.fitted_slope:.4f} expected={report.expected_slope} "
          f"{'pass' if report.passed else 'fail'}")


def cmd_gradcheck(args):
    net = load_network(args.net)
    rng = SeededRng(args.seed)
    reg = NetworkRegularizer(net)
    x = rng.normal(net.input_shape)
    g = reg.gradient(x)
    eps = 1e-5
    worst = 0.0
    for _ in range(args.trials):
        h = rng.unit_vector(net.input_shape)
        fd = (reg.value(x + eps * h) - reg.value(x - eps * h)) / (2 * eps)
        an = float(np.sum(g * h))
        worst = max(worst, abs(fd - an) / (1 + abs(an)))
    ok = worst <= 1e-4
    print(f"trials={args.trials} max_rel_error={worst:.3e} {'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    p = _Parser(prog="nett", description="Network Tikhonov regularization toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate random phantoms")
    s.add_argument("--kind", choices=("ellipse", "blobs"), default="ellipse")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=1, help="number of phantoms")
    s.add_argument("--grid-n", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("geometry", help="write a circular-means geometry file")
    s.add_argument("--grid-n", type=int, default=64)
    s.add_argument("--full-sensors", type=int, default=64)
    s.add_argument("--sensors", type=int, default=15)
    s.add_argument("--radii", type=int, default=256)
    s.add_argument("--r-max", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_geometry)

    s = sub.add_parser("forward", help="apply the forward operator")
    s.add_argument("--geom", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", type=float, default=0.0, help="relative noise level")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("fbp", help="filtered backprojection")
    s.add_argument("--geom", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--filter", choices=("derivative2", "ram-lak-style"), default="derivative2")
    s.set_defaults(func=cmd_fbp)

    s = sub.add_parser("dataset", help="build an artifact-detector training set")
    s.add_argument("--geom", required=True)
    s.add_argument("--n-half", type=int, default=100)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--filter", choices=("derivative2", "ram-lak-style"), default="derivative2")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train the encoder-decoder")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="minimize the NETT functional")
    s.add_argument("--geom", required=True)
    s.add_argument("--net", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--alpha", type=float, default=0.1)
    s.add_argument("--step", type=float)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--snapshot", default="10,15,50")
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--metric", choices=("fbp", "euclidean"), default="fbp")
    s.add_argument("--truth", help="phantom for relative errors")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("rates", help="convergence-rate experiment")
    s.add_argument("--family", choices=("quad", "nclq"), default="quad")
    s.add_argument("--rule", choices=("prop", "matched"), default="prop")
    s.add_argument("--deltas", default="1e-1,1e-2,1e-3,1e-4,1e-5")
    s.add_argument("--measure", choices=("bregman", "norm", "norm_q"), default="bregman")
    s.add_argument("--alpha-c", type=float, default=1.0)
    s.add_argument("--c", type=float, default=0.1, help="tanh mixing constant (nclq)")
    s.add_argument("--tolerance", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rates)

    s = sub.add_parser("gradcheck", help="finite-difference check of the regularizer gradient")
    s.add_argument("--net", required=True)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except (SolverDiverged, TrainingDiverged, FloatingPointError) as exc:
        print(f"nett: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"nett: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
