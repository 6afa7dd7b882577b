"""Command-line entry point: ``convexp {fig1,fig4,verify,train,invertcheck}``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
Every command writes its resolved configuration to ``<out>/config.json``;
``--config`` loads such a file (explicit flags still win).
"""
import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import datasets as ds
from . import dense
from . import exponential as ex
from . import linop
from . import serialization
from . import verify as verify_mod

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("convexp")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def write_pgm(path, M):
    """Binary 8-bit PGM, min-max normalized (a constant image is mid-grey)."""
    M = np.asarray(M, dtype=np.float64)
    lo, hi = float(M.min()), float(M.max())
    if hi > lo:
        img = np.round(255 * (M - lo) / (hi - lo))
    else:
        img = np.full(M.shape, 128.0)
    h, w = M.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def _write(out, name, text):
    path = Path(out) / name
    path.write_text(text)
    return path


def _resolved(args):
    cfg = {k: v for k, v in vars(args).items()
           if k not in ("func", "config", "dump_config")}
    return cfg


# ---------------------------------------------------------------------------
# commands


def fig1_kernel(seed, zero=False):
    if zero:
        return torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(1, 1, 3, 3, generator=g, dtype=torch.float64)
    op, _ = linop.spectral_normalize(linop.Conv2dOperator(w), 0.9,
                                     linop.PowerIterState((1, 5, 5), seed=seed), 200)
    return op.weight


def cmd_fig1(args):
    shape = (1, 5, 5)
    kernel = fig1_kernel(args.seed, args.zero_kernel)
    op = linop.Conv2dOperator(kernel)
    M = dense.build_equivalent_matrix(op, shape)
    E = dense.dense_expm(M)
    # implicit exponential applied to every basis vector, compared column by column
    basis = torch.eye(M.shape[0], dtype=torch.float64).reshape((-1,) + shape)
    implicit = ex.expv(op, basis, ex.ExpConfig.terms(args.terms), event_ndim=3)
    implicit = implicit.reshape(M.shape[0], -1).numpy().T
    err = float(np.abs(implicit - E).max())
    out = Path(args.out)
    _write(out, "fig1_M.csv", dense.matrix_to_csv(M))
    _write(out, "fig1_expM.csv", dense.matrix_to_csv(E))
    write_pgm(out / "fig1_M.pgm", M)
    write_pgm(out / "fig1_expM.pgm", E)
    center = float(kernel[0, 0, 1, 1])
    _write(out, "fig1_report.csv",
           "quantity,value\n"
           f"max_abs_error,{err!r}\n"
           f"trace_M,{float(np.trace(M))!r}\n"
           f"kernel_center,{center!r}\n"
           f"logdet_expM,{float(dense.logdet_via_lu(E))!r}\n")
    print(f"fig1: max |expv - dense_expm| = {err:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if err < args.tolerance else EXIT_FAIL


def fig4_rows(norms, max_terms, seed, shape=(2, 6, 6)):
    """Rows ``(norm, i, bound, measured)``; ``measured`` uses an operator whose
    exact spectral norm is ``norm``."""
    rows = []
    for k, norm in enumerate(norms):
        if norm <= 0:
            raise UsageError(f"norms must be positive, got {norm}")
        g = torch.Generator().manual_seed(seed + k)
        w = torch.randn(shape[0], shape[0], 3, 3, generator=g, dtype=torch.float64)
        op = linop.Conv2dOperator(w)
        sigma = float(np.linalg.norm(dense.build_equivalent_matrix(op, shape), 2))
        op = op.scaled(norm / sigma)
        x = torch.randn(shape, generator=g, dtype=torch.float64)
        for i, actual, bound in ex.convergence_report(op, x, max_terms, norm=norm):
            rows.append((norm, i, bound, actual))
    return rows


def cmd_fig4(args):
    rows = fig4_rows(args.norms, args.max_terms, args.seed)
    text = "norm,i,bound,measured\n" + "".join(
        f"{n!r},{i},{b!r},{m!r}\n" for n, i, b, m in rows)
    _write(args.out, "fig4.csv", text)
    bad = [(n, i) for n, i, b, m in rows if m > b * (1 + 1e-9)]
    for norm in args.norms:
        peak = max((r for r in rows if r[0] == norm and r[1] > 0), key=lambda r: r[2])
        print(f"fig4: norm {norm:g}: bound peaks at i={peak[1]}")
    if bad:
        print(f"fig4: measured term norm exceeds bound at {bad[:5]}")
        return EXIT_FAIL
    print("fig4: measured <= bound on every row")
    return EXIT_OK


def cmd_verify(args):
    results = verify_mod.run(args.scope, args.seed)
    _write(args.out, "verify_report.csv", verify_mod.to_csv(results))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"failure: module={r.suite} property={r.property} seed={r.seed} "
              f"worst={r.worst!r}", file=sys.stderr)
    print(f"verify: {len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train(args):
    from .models import GRAPH_MODELS, build_model, event_shape_for
    from .training import TrainingDiverged, metrics_to_csv, train

    spec = ds.get_spec(args.dataset, seed=args.seed)
    if args.dataset == "moons2d" and args.model in GRAPH_MODELS:
        raise UsageError(f"{args.model} needs a graph dataset, not moons2d")
    if args.dataset != "moons2d" and args.model == "convsylvester2d":
        raise UsageError("convsylvester2d is only defined for moons2d")
    shape = event_shape_for(args.model, args.dataset, getattr(spec, "num_nodes", None))
    kw = {} if args.model == "convsylvester2d" else {"precision": args.precision}
    model = build_model(args.model, shape, terms=args.terms, seed=args.seed, **kw)
    out = Path(args.out)
    model_path = out / "model.cexp"
    meta = {"dataset": args.dataset, "seed": args.seed}

    def checkpoint(m):
        was = m.training
        serialization.save(m.eval(), model_path, meta)
        m.train(was)

    try:
        res = train(model, spec, args.iters, batch=args.batch, lr=args.lr, seed=args.seed,
                    val_every=args.val_every, checkpoint=checkpoint)
    except TrainingDiverged as err:
        print(f"train: {err}; last checkpoint kept at {model_path}", file=sys.stderr)
        return EXIT_FAIL
    checkpoint(model)
    _write(out, "metrics.csv", metrics_to_csv(res.metrics))
    _write(out, "final.csv", f"dataset,model,seed,iters,final_nll\n{args.dataset},"
                             f"{args.model},{args.seed},{args.iters},{res.final_val_nll!r}\n")
    print(f"train: final per-node NLL {res.final_val_nll:.4f} nats; model at {model_path}")
    return EXIT_OK


def cmd_invertcheck(args):
    from .sylvester import FixedPointWarning, SylvesterLayer
    from .training import draw

    try:
        model = serialization.load(args.model_file)
    except serialization.ModelFormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    hdr, _ = serialization.parse_header(Path(args.model_file).read_bytes())
    # by default the series runs to convergence; --terms reproduces a fixed truncation
    model.set_exp_config(ex.VERIFY if args.terms is None else ex.ExpConfig.terms(args.terms))
    meta = hdr.get("meta", {})
    rng = np.random.default_rng(args.seed)
    if "dataset" in meta:
        x = draw(ds.get_spec(meta["dataset"]), args.samples, rng, model.event_shape)
    else:
        x = torch.from_numpy(rng.standard_normal((args.samples,) + model.event_shape))
    z = torch.from_numpy(rng.standard_normal((args.samples,) + model.event_shape))
    sylv = [m for m in model.modules() if isinstance(m, SylvesterLayer)]
    iters = []
    nonconv = 0
    with torch.no_grad(), warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FixedPointWarning)
        back_x = model.inverse(model(x)[0])
        iters += [m.last_inverse.iters for m in sylv]
        back_z = model(model.inverse(z))[0]
        iters += [m.last_inverse.iters for m in sylv]
        nonconv = sum(issubclass(w.category, FixedPointWarning) for w in caught)
    err_x = float((back_x - x).abs().max())
    err_z = float((back_z - z).abs().max())
    max_iters = max(iters, default=0)
    _write(args.out, "invertcheck.csv",
           "quantity,value\n"
           f"max_error_data,{err_x!r}\nmax_error_latent,{err_z!r}\n"
           f"max_fixed_point_iters,{max_iters}\nnonconverged,{nonconv}\n")
    print(f"invertcheck: max error {max(err_x, err_z):.3e} (data {err_x:.3e}, latent "
          f"{err_z:.3e}); max fixed-point iterations {max_iters}")
    ok = max(err_x, err_z) < args.tolerance and nonconv == 0
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--config", help="load a resolved-config JSON file")
    common.add_argument("--dump-config", metavar="PATH",
                        help="write the resolved config to PATH and exit")

    p = argparse.ArgumentParser(prog="convexp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f1 = sub.add_parser("fig1", parents=[common], help="equivalent matrix and its exponential")
    f1.add_argument("--terms", type=int, default=20)
    f1.add_argument("--tolerance", type=float, default=1e-6)
    f1.add_argument("--zero-kernel", action="store_true")
    f1.set_defaults(func=cmd_fig1)

    f4 = sub.add_parser("fig4", parents=[common], help="series term bound vs measured terms")
    f4.add_argument("--norms", type=float, nargs="+", default=[0.5, 0.9, 2.0, 3.0])
    f4.add_argument("--max-terms", "--terms", dest="max_terms", type=int, default=20)
    f4.set_defaults(func=cmd_fig4)

    v = sub.add_parser("verify", parents=[common], help="run the invariant suites")
    v.add_argument("--scope", choices=verify_mod.SCOPES, default="all")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", parents=[common], help="maximum-likelihood training")
    t.add_argument("--dataset", choices=sorted(ds.DATASETS), default="mog4")
    t.add_argument("--model", choices=("coupling", "graphflow", "graphflow+exp",
                                       "convsylvester2d"), default="graphflow+exp")
    t.add_argument("--iters", type=int, default=10_000)
    t.add_argument("--batch", type=int, default=256)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--terms", type=int, default=6)
    t.add_argument("--val-every", type=int, default=500)
    t.add_argument("--precision", choices=("float64", "float32"), default="float32")
    t.set_defaults(func=cmd_train)

    ic = sub.add_parser("invertcheck", parents=[common], help="round-trip a saved model")
    ic.add_argument("model_file")
    ic.add_argument("--samples", type=int, default=256)
    ic.add_argument("--tolerance", type=float, default=1e-3)
    ic.add_argument("--terms", type=int, default=None)
    ic.set_defaults(func=cmd_invertcheck)
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as err:
            raise OSError(f"cannot read config {args.config}: {err}") from err
        except json.JSONDecodeError as err:
            parser.error(f"config {args.config} is not valid JSON: {err}")
        if loaded.get("command", args.command) != args.command:
            parser.error(f"config is for {loaded['command']!r}, not {args.command!r}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(loaded) - known - {"command"}
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        # explicit flags override the file: re-parse with the file as defaults
        sub.set_defaults(**{k: v for k, v in loaded.items() if k != "command"})
        args = parser.parse_args(argv)
    for name in ("iters", "batch", "samples", "terms"):
        value = getattr(args, name, 1)
        if value is not None and (value < 0 or (name != "iters" and value == 0)):
            parser.error(f"--{name} out of range")
    return args


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    cfg = _resolved(args)
    try:
        if args.dump_config:
            Path(args.dump_config).write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
            return EXIT_OK
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
