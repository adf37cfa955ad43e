"""``oodforge`` command line: data generation, training, evaluation and figures.

Every command writes its primary outputs plus ``<output>.manifest.json``
naming the inputs, the resolved configuration and the package version.  The
manifest's timestamp sits on its own line so two reruns differ only there.

Exit status: 0 success, 1 usage error, 2 data error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    PRESETS,
    BoxSpec,
    DataError,
    Dataset,
    gaussian_noise,
    make_preset,
    read_dataset,
    write_dataset,
)
from .detect import (
    DetectorConfig,
    confidence_grid,
    score,
    tune_odin,
    write_grid_csv,
    write_pgm,
)
from .metrics import evaluate_detection, pr_curve, roc_curve, write_curve_csv
from .nets import (
    LatentPrior,
    generator_sample,
    load_checkpoint,
    save_checkpoint,
    saliency_map,
    toy_classifier_spec,
    toy_discriminator_spec,
    toy_generator_spec,
)
from .training import (
    BETA_GRID,
    FIG5_HIDDEN,
    TOY_GAN_HIDDEN,
    NumericalError,
    TrainConfig,
    beta_sweep,
    fig5_config,
    toy_gan_config,
    train_classifier,
    train_gan,
    train_joint,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# name -> (config factory, hidden width)
CLASSIFIER_PRESETS = {
    "toy": (TrainConfig, 500),
    "fig5": (fig5_config, FIG5_HIDDEN),
    "appendixA": (TrainConfig.appendix_a, 500),
}
GAN_PRESETS = {
    "appendixA-toy-gan": (TrainConfig, 500),
    "toy-gan": (toy_gan_config, TOY_GAN_HIDDEN),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# -- manifests and helpers --------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(primary, argv, config: dict, inputs: dict, outputs: dict,
                   wall_clock: float | None = None) -> Path:
    path = Path(f"{primary}.manifest.json")
    body = {
        "command": list(argv),
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
    }
    text = json.dumps(body, indent=2, sort_keys=True)
    # the non-reproducible fields share one line
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    extra = "" if wall_clock is None else f', "wall_clock_s": {wall_clock:.3f}'
    text = text[:-2] + f',\n  "timestamp": "{stamp}"{extra}\n}}\n'
    _atomic_write(path, text)
    return path


def _config(factory, args) -> TrainConfig:
    """Preset defaults, overridden by whichever flags were given."""
    over = {}
    for flag, field_name in (("beta", "beta"), ("epochs", "epochs"), ("lr", "lr"),
                             ("batch", "batch_size"), ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            over[field_name] = val
    return factory(**over)


def _read(path, origin=None) -> Dataset:
    try:
        return read_dataset(path, origin=origin)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


def _train_flags(p: argparse.ArgumentParser, presets) -> None:
    p.add_argument("--preset", choices=sorted(presets), default=next(iter(presets)))
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=int, help="hidden width (default from the preset)")


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args, argv) -> int:
    if args.noise:
        if args.dim is None:
            raise UsageError("gen-data --noise needs --dim")
        ds = gaussian_noise(args.n, args.dim, args.seed)
        config = {"noise": True, "dim": args.dim, "n": args.n, "seed": args.seed}
    else:
        if args.preset is None:
            raise UsageError("gen-data needs --preset or --noise")
        ds = make_preset(args.preset, args.n, args.seed)
        config = {"preset": args.preset, "n": args.n, "seed": args.seed}
    write_dataset(args.out, ds)
    write_manifest(args.out, argv, config, {}, {"dataset": args.out})
    return EXIT_OK


def cmd_train(args, argv) -> int:
    factory, hidden = CLASSIFIER_PRESETS[args.preset]
    cfg = replace(_config(factory, args), loss_kind=args.loss)
    if args.loss != "xent" and not args.ood:
        raise UsageError(f"--loss {args.loss} requires --ood")
    in_data = _read(args.in_path, "in")
    out_data = _read(args.ood, "out") if args.ood and args.loss != "xent" else None
    rep = train_classifier(cfg, in_data, out_data, hidden=args.hidden or hidden)
    save_checkpoint(rep.params["classifier"], args.out_ckpt)
    outputs = {"checkpoint": args.out_ckpt}
    if args.report:
        Path(args.report).write_text(rep.to_json(), encoding="utf-8")
        outputs["report"] = args.report
    config = {**asdict(cfg), "hidden": args.hidden or hidden, "preset": args.preset}
    write_manifest(args.out_ckpt, argv, config, {"in": args.in_path, "ood": args.ood}, outputs,
                   rep.wall_clock)
    return EXIT_OK


def _gan_specs(args, hidden, dims, with_clf, k):
    prior = LatentPrior(args.prior_dim)
    g = toy_generator_spec(prior.dim, hidden, dims)
    d = toy_discriminator_spec(dims, hidden)
    c = toy_classifier_spec(k, hidden, dims) if with_clf else None
    return prior, g, d, c


def cmd_train_joint(args, argv) -> int:
    factory, hidden = GAN_PRESETS[args.preset]
    hidden = args.hidden or hidden
    cfg = replace(_config(factory, args), loss_kind="joint", pt_weight=args.pt_weight,
                  generator_surrogate=args.surrogate, beta_generator=args.beta_generator)
    in_data = _read(args.in_path, "in")
    init = load_checkpoint(args.init_classifier) if args.init_classifier else None
    k = int(in_data.labels.max()) + 1 if in_data.labels is not None else 0
    prior, g, d, c = _gan_specs(args, hidden, in_data.dims, True, k)
    if init is not None:
        c = init.spec
    rep = train_joint(cfg, in_data, c, g, d, prior, init_classifier=init,
                      update_classifier=not args.freeze_classifier)
    outputs = {}
    for role, path in zip(("classifier", "generator", "discriminator"), args.out_ckpt):
        save_checkpoint(rep.params[role], path)
        outputs[role] = path
    if args.report:
        Path(args.report).write_text(rep.to_json(), encoding="utf-8")
        outputs["report"] = args.report
    config = {**asdict(cfg), "hidden": hidden, "prior_dim": args.prior_dim, "preset": args.preset,
              "freeze_classifier": args.freeze_classifier}
    write_manifest(args.out_ckpt[0], argv, config,
                   {"in": args.in_path, "init_classifier": args.init_classifier}, outputs, rep.wall_clock)
    return EXIT_OK


def cmd_train_gan(args, argv) -> int:
    factory, hidden = GAN_PRESETS[args.preset]
    hidden = args.hidden or hidden
    cfg = replace(_config(factory, args), generator_surrogate=args.surrogate)
    in_data = _read(args.in_path, "in")
    prior, g, d, _ = _gan_specs(args, hidden, in_data.dims, False, 0)
    rep = train_gan(cfg, in_data, g, d, prior)
    outputs = {}
    for role, path in zip(("generator", "discriminator"), args.out_ckpt):
        save_checkpoint(rep.params[role], path)
        outputs[role] = path
    if args.report:
        Path(args.report).write_text(rep.to_json(), encoding="utf-8")
        outputs["report"] = args.report
    config = {**asdict(cfg), "hidden": hidden, "prior_dim": args.prior_dim, "preset": args.preset}
    write_manifest(args.out_ckpt[0], argv, config, {"in": args.in_path}, outputs, rep.wall_clock)
    return EXIT_OK


def cmd_sample(args, argv) -> int:
    params = load_checkpoint(args.ckpt)
    if params.role != "generator":
        raise DataError(f"{args.ckpt}: expected a generator checkpoint, got {params.role}")
    x = generator_sample(params, LatentPrior(params.spec.input_dim), args.n, args.seed)
    write_dataset(args.out, Dataset(x, None, "generated"))
    write_manifest(args.out, argv, {"n": args.n, "seed": args.seed}, {"ckpt": args.ckpt},
                   {"dataset": args.out})
    return EXIT_OK


def _classifier(path):
    params = load_checkpoint(path)
    if params.role != "classifier":
        raise DataError(f"{path}: expected a classifier checkpoint, got {params.role}")
    return params


def cmd_eval(args, argv) -> int:
    theta = _classifier(args.ckpt)
    config = DetectorConfig(args.detector, args.T, args.eps)
    in_data, out_data = _read(args.in_path, "in"), _read(args.ood, "out")
    inputs = {"ckpt": args.ckpt, "in": args.in_path, "ood": args.ood}
    if args.tune:
        if args.detector != "odin":
            raise UsageError("--tune applies to --detector odin")
        if not (args.val_in and args.val_ood):
            raise UsageError("--tune needs --val-in and --val-ood")
        config, _ = tune_odin(theta, _read(args.val_in, "in").inputs, _read(args.val_ood, "out").inputs)
        inputs.update(val_in=args.val_in, val_ood=args.val_ood)
    if config.kind == "kplus1" and in_data.labels is not None:
        k = int(in_data.labels.max()) + 1
        if theta.spec.output_dim != k + 1:
            raise DataError(f"kplus1 detector needs {k + 1} outputs for {k} classes, "
                            f"checkpoint has {theta.spec.output_dim}")
    try:
        s_in, s_out = score(theta, in_data.inputs, config), score(theta, out_data.inputs, config)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    report = evaluate_detection(s_in, s_out)
    _atomic_write(Path(args.report), report.to_json())
    stem = args.curves or str(Path(args.report).with_suffix(""))
    roc_path, pr_in_path, pr_out_path = f"{stem}.roc.csv", f"{stem}.pr_in.csv", f"{stem}.pr_out.csv"
    write_curve_csv(roc_path, ("threshold", "fpr", "tpr"), *roc_curve(s_in, s_out))
    write_curve_csv(pr_in_path, ("threshold", "recall", "precision"), *pr_curve(s_in, s_out, "in"))
    write_curve_csv(pr_out_path, ("threshold", "recall", "precision"), *pr_curve(s_in, s_out, "out"))
    write_manifest(args.report, argv, asdict(config), inputs,
                   {"report": args.report, "roc": roc_path, "pr_in": pr_in_path, "pr_out": pr_out_path})
    return EXIT_OK


def _box(values) -> BoxSpec:
    if len(values) == 1:
        return BoxSpec.square(values[0])
    if len(values) == 4:
        return BoxSpec((values[0], values[2]), (values[1], values[3]))
    raise UsageError("--box takes HALF or XLO XHI YLO YHI")


def cmd_map(args, argv) -> int:
    theta = _classifier(args.ckpt)
    box = _box(args.box)
    grid = confidence_grid(theta, box, args.resolution)
    pgm, csv_path = f"{args.out}.pgm", f"{args.out}.csv"
    write_pgm(pgm, grid, theta.spec.output_dim)
    write_grid_csv(csv_path, grid, box)
    write_manifest(pgm, argv, {"box": [list(box.lower), list(box.upper)], "resolution": args.resolution},
                   {"ckpt": args.ckpt}, {"pgm": pgm, "csv": csv_path})
    return EXIT_OK


def histogram(scores, k: int, bins: int = 20):
    """Counts of max-softmax scores over ``bins`` equal bins spanning [1/K, 1]."""
    edges = np.linspace(1.0 / k, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(scores, edges[0], edges[-1]), bins=edges)
    return edges, counts


def cmd_histogram(args, argv) -> int:
    theta = _classifier(args.ckpt)
    k = theta.spec.output_dim
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for path in args.data:
        ds = _read(path)
        s = score(theta, ds.inputs, DetectorConfig("baseline"))
        edges, counts = histogram(s, k, args.bins)
        target = out_dir / f"{Path(path).stem}.hist.csv"
        with open(target, "w", encoding="utf-8") as fh:
            fh.write("lo,hi,count,fraction\n")
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)},{float(c / max(len(s), 1))!r}\n")
        outputs[Path(path).stem] = target
    write_manifest(out_dir / "histogram", argv, {"bins": args.bins, "k": k},
                   {"ckpt": args.ckpt, **{f"data{i}": p for i, p in enumerate(args.data)}}, outputs)
    return EXIT_OK


def cmd_saliency(args, argv) -> int:
    theta = _classifier(args.ckpt)
    ds = _read(args.data)
    sal = saliency_map(theta, ds.inputs, guided=args.guided)
    d = ds.dims
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(",".join([f"x{i}" for i in range(d)] + [f"g{i}" for i in range(d)]) + "\n")
        for x, g in zip(ds.inputs, sal):
            fh.write(",".join(repr(float(v)) for v in (*x, *g)) + "\n")
    write_manifest(args.out, argv, {"guided": args.guided}, {"ckpt": args.ckpt, "data": args.data},
                   {"saliency": args.out})
    return EXIT_OK


def _grid(text: str):
    if text == "default":
        return list(BETA_GRID)
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--grid must be 'default' or comma-separated numbers, got {text!r}") from None


def cmd_sweep(args, argv) -> int:
    factory, hidden = CLASSIFIER_PRESETS[args.preset]
    cfg = replace(_config(factory, args), loss_kind="confidence")
    grid = _grid(args.grid)
    if not grid:
        raise UsageError("--grid is empty")
    result = beta_sweep(grid, cfg, _read(args.in_path, "in"), _read(args.ood, "out"),
                        _read(args.val_in, "in"), _read(args.val_ood, "out"),
                        hidden=args.hidden or hidden)
    _atomic_write(Path(args.report), result.to_json())
    write_manifest(args.report, argv, {**asdict(cfg), "grid": grid, "hidden": args.hidden or hidden},
                   {"in": args.in_path, "ood": args.ood, "val_in": args.val_in, "val_ood": args.val_ood},
                   {"report": args.report})
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oodforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"oodforge {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="sample a preset or Gaussian noise to CSV")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--noise", action="store_true", help="clipped Normal(0.5, 1) noise")
    p.add_argument("--dim", type=int)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier (xent, confidence or kplus1)")
    p.add_argument("--loss", choices=("xent", "confidence", "kplus1"), default="xent")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--ood")
    _train_flags(p, CLASSIFIER_PRESETS)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-joint", help="alternating classifier / generator / discriminator training")
    p.add_argument("--in", dest="in_path", required=True)
    _train_flags(p, GAN_PRESETS)
    p.add_argument("--beta-generator", type=float, help="KL weight on the generator side only")
    p.add_argument("--prior-dim", type=int, default=100)
    p.add_argument("--pt-weight", type=float)
    p.add_argument("--surrogate", action="store_true", help="generator minimises -log D(G(z))")
    p.add_argument("--init-classifier", help="start from this classifier checkpoint")
    p.add_argument("--freeze-classifier", action="store_true")
    p.add_argument("--out-ckpt", nargs=3, required=True, metavar=("CLF", "GEN", "DISC"))
    p.add_argument("--report")
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("train-gan", help="original GAN (no classifier)")
    p.add_argument("--in", dest="in_path", required=True)
    _train_flags(p, GAN_PRESETS)
    p.add_argument("--prior-dim", type=int, default=100)
    p.add_argument("--surrogate", action="store_true")
    p.add_argument("--out-ckpt", nargs=2, required=True, metavar=("GEN", "DISC"))
    p.add_argument("--report")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("sample", help="draw generator samples to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="detection metrics plus ROC / PR curves")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--detector", choices=("baseline", "odin", "kplus1"), default="baseline")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--tune", action="store_true",
                   help="choose ODIN T and eps on --val-in/--val-ood before evaluating")
    p.add_argument("--val-in")
    p.add_argument("--val-ood")
    p.add_argument("--report", required=True)
    p.add_argument("--curves", help="path stem for curve CSVs (default: report stem)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="max-softmax grid as PGM and CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--box", type=float, nargs="+", default=[50.0])
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("histogram", help="max-softmax histograms, one CSV per dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("saliency", help="input gradients of the top-1 log-probability")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--guided", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("sweep", help="pick beta by validation detection error")
    p.add_argument("--grid", default="default", help="'default' (0, 0.1, ..., 2) or comma list")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--val-in", required=True)
    p.add_argument("--val-ood", required=True)
    _train_flags(p, CLASSIFIER_PRESETS)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        return args.func(args, argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"oodforge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"oodforge: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
