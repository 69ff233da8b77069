"""Command-line interface: ``cheapnet {analyze,transform,train,eval,sweep}``.

Training options come from three layers, later ones winning: built-in
defaults, a flat JSON ``--config`` file, then explicit command-line flags.

Exit codes: 0 success, 2 configuration error, 3 numeric failure during a run.
"""
import argparse
import json
import os
import sys

from . import __version__
from .cost import network_cost
from .data import load_cifar10, load_data, parse_data_spec, split_train_val
from .distill import LossConfig
from .graph import ArchError, load_arch, serialize, substitute_conv, with_classes, with_input
from .model import instantiate
from .train import TrainConfig, evaluate, load_checkpoint, load_into, run, save_checkpoint

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
SPLIT_SEED = 0

# Flat config keys and their defaults.  Keys map onto TrainConfig / LossConfig
# fields or onto run-level options handled here.
DEFAULTS = {
    "arch": None,
    "kind": None,
    "groups": None,
    "scheme": "od",
    "branches": 4,
    "temperature": 4.0,
    "at_weight": 1.0,
    "stop_gradient": True,
    "epochs": 60,
    "batch_size": 64,
    "base_lr": 0.1,
    "lr_drop_factor": 10.0,
    "drop_points": [0.5, 0.75],
    "weight_decay": 2e-4,
    "momentum": 0.9,
    "seed": 0,
    "augment": False,
    "val_frac": 0.1,
    "deterministic": False,
    "data": "synth:classes=4,per_class=500,hw=8,difficulty=2.0",
    "out": "run",
    "teacher": None,
    "teacher_arch": None,
}
_LOSS_KEYS = ("scheme", "temperature", "at_weight", "branches", "stop_gradient")
_TRAIN_KEYS = ("epochs", "batch_size", "base_lr", "lr_drop_factor", "drop_points", "weight_decay",
               "momentum", "seed", "augment", "val_frac")


class ConfigError(Exception):
    pass


# -- helpers ---------------------------------------------------------------
def _load(arch_ref):
    try:
        return load_arch(arch_ref)
    except ArchError as exc:
        where = f" at {exc.path}" if exc.path else ""
        raise ConfigError(f"{arch_ref}: {exc}{where}") from None


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fit_to_data(arch, dataset):
    """Adapt a descriptor's input shape and class count to a dataset."""
    c, h, w = dataset.shape
    return with_classes(with_input(arch, c, h, w), dataset.classes)


def _datasets(spec, val_frac):
    kind, opts = parse_data_spec(spec)
    full = load_cifar10(opts["directory"]) if kind == "cifar10" else load_data(spec)
    return split_train_val(full, val_frac, SPLIT_SEED)


# -- analyze -----------------------------------------------------------------
def cmd_analyze(args):
    arch = _load(args.arch)
    ref = _load(args.compare) if args.compare else None
    report = network_cost(arch, reference=ref)
    doc = report.to_dict()
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(report.table(per_layer=args.per_layer))
    if args.out:
        _write_json(args.out, doc)
    return 0


# -- transform ---------------------------------------------------------------
def cmd_transform(args):
    arch = _load(args.arch)
    try:
        out = substitute_conv(arch, args.kind, groups=args.groups, keep_stem=not args.replace_stem)
    except (ArchError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    before, after = network_cost(arch), network_cost(out, reference=arch)
    print(before.table())
    print(after.table())
    with open(args.out, "w") as fh:
        fh.write(serialize(out))
    return 0


# -- train -------------------------------------------------------------------
def resolve_config(config_path, overrides):
    """Merge defaults, a JSON config file and non-None overrides into one flat dict."""
    cfg = dict(DEFAULTS)
    if config_path:
        try:
            with open(config_path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{config_path}: unknown config keys {sorted(unknown)}")
        cfg.update(doc)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg["arch"] is None:
        raise ConfigError("no architecture given (--arch or 'arch' in the config file)")
    return cfg


def train_config(flat):
    try:
        loss = LossConfig(**{k: flat[k] for k in _LOSS_KEYS})
        return TrainConfig(loss=loss, **{k: flat[k] for k in _TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from None


def _student_arch(flat, dataset):
    arch = _load(flat["arch"])
    if flat["kind"]:
        try:
            arch = substitute_conv(arch, flat["kind"], groups=flat["groups"])
        except (ArchError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    return _fit_to_data(arch, dataset)


def _frozen_teacher(flat, dataset):
    if flat["scheme"] not in ("dk", "at"):
        return None
    if not flat["teacher"]:
        raise ConfigError(f"scheme {flat['scheme']!r} needs a pre-trained teacher: pass --teacher CHECKPOINT "
                          "(e.g. student0.ckpt from a scratch run of the standard network)")
    if not os.path.isfile(flat["teacher"]):
        raise ConfigError(f"teacher checkpoint not found: {flat['teacher']}")
    arch = _fit_to_data(_load(flat["teacher_arch"] or flat["arch"]), dataset)
    net = instantiate(arch)
    try:
        load_into(net, load_checkpoint(flat["teacher"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"teacher checkpoint does not match its architecture: {exc}") from None
    return net.eval()


def cmd_train(args):
    overrides = {k: getattr(args, k) for k in DEFAULTS if hasattr(args, k)}
    flat = resolve_config(args.config, overrides)
    cfg = train_config(flat)
    try:
        train_set, val_set = _datasets(flat["data"], cfg.val_frac)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None
    arch = _student_arch(flat, train_set)
    teacher = _frozen_teacher(flat, train_set)
    os.makedirs(flat["out"], exist_ok=True)

    def log(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:>3}  lr {row['lr']:.4g}  loss {row['loss']:.4f}", flush=True)

    result, students, head = run(arch, train_set, val_set, cfg, teacher=teacher,
                                 deterministic=flat["deterministic"], log=log)
    out = flat["out"]
    result.metrics.write(os.path.join(out, "metrics.csv"))
    for name, state in result.checkpoints.items():
        save_checkpoint(os.path.join(out, f"{name}.ckpt"), state)
    with open(os.path.join(out, "arch.json"), "w") as fh:
        fh.write(serialize(arch))
    cost = network_cost(arch)
    summary = {
        "arch": arch.name,
        "scheme": cfg.loss.scheme,
        "selected_student": result.best,
        "selected_val_err": result.best_val_err,
        "final_val_errors": result.metrics.final_val_errors(),
        "teacher_val_err": result.teacher_val_err,
        "epochs": cfg.epochs,
        "cost": {"params": cost.params, "flops": cost.flops},
        "config": {k: flat[k] for k in sorted(flat)},
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"selected student {result.best}: val error {result.best_val_err:.2f}%")
    return 0


# -- eval --------------------------------------------------------------------
def cmd_eval(args):
    try:
        train_set, val_set = _datasets(args.data, args.val_frac)
        if args.split == "test":
            kind, opts = parse_data_spec(args.data)
            if kind != "cifar10":
                raise ConfigError("--split test is only available for cifar10 data")
            target = load_cifar10(opts["directory"], "test").with_stats_from(train_set)
        else:
            target = val_set if args.split == "val" else train_set
    except (OSError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None
    arch = _fit_to_data(_load(args.arch), train_set)
    try:
        state = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    try:
        net = load_into(instantiate(arch), state)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match architecture {arch.name}: {exc}") from None
    err = evaluate(net, target)
    print(f"{err:.2f}")
    return 0


# -- sweep -------------------------------------------------------------------
def cmd_sweep(args):
    from .ablation import sweep

    flat = resolve_config(args.config, {k: getattr(args, k) for k in DEFAULTS if hasattr(args, k)})
    cfg = train_config(dict(flat, scheme="od"))
    try:
        train_set, val_set = _datasets(flat["data"], cfg.val_frac)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None
    arch = _student_arch(flat, train_set)
    os.makedirs(flat["out"], exist_ok=True)
    grid = sweep(arch, train_set, val_set, cfg, args.temperatures, args.branch_counts,
                 out_dir=flat["out"], deterministic=flat["deterministic"])
    grid_path = os.path.join(flat["out"], "grid.csv")
    grid.write(grid_path)
    print(f"wrote {len(grid.rows)} rows to {grid_path}")
    return 0


# -- parser -----------------------------------------------------------------
def _add_train_flags(p):
    p.add_argument("--config", help="flat JSON config file; flags given here override it")
    p.add_argument("--arch", help="architecture file or preset name")
    p.add_argument("--kind", choices=("group", "depthwise", "shift"), help="substitute cheap convolutions")
    p.add_argument("--groups", type=int, help="group count for --kind group")
    p.add_argument("--scheme", choices=("scratch", "dk", "at", "od"))
    p.add_argument("--branches", type=int, help="number of student branches for od")
    p.add_argument("--temperature", type=float)
    p.add_argument("--at-weight", dest="at_weight", type=float)
    p.add_argument("--no-stop-grad", dest="stop_gradient", action="store_const", const=False,
                   help="let the KL term back-propagate into the online teacher")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--lr", dest="base_lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--augment", action="store_const", const=True, help="random flip + pad-and-crop")
    p.add_argument("--deterministic", action="store_const", const=True,
                   help="single-threaded BLAS for bit-reproducible metrics")
    p.add_argument("--data", help="cifar10:<dir> or synth:key=value,... (seed, classes, per_class, hw, difficulty)")
    p.add_argument("-o", "--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="cheapnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter and FLOP report for an architecture")
    p.add_argument("arch", help="architecture file or preset name")
    p.add_argument("--compare", help="reference architecture for compression / speedup rates")
    p.add_argument("--per-layer", action="store_true", help="list every layer")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    p.add_argument("-o", "--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("transform", help="replace standard convolutions with cheap ones")
    p.add_argument("arch", help="architecture file or preset name")
    p.add_argument("--kind", required=True, choices=("group", "depthwise", "shift"))
    p.add_argument("--groups", type=int)
    p.add_argument("--replace-stem", action="store_true", help="also rewrite the input convolution")
    p.add_argument("-o", "--out", required=True, help="output architecture file")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="train with scratch / dk / at / od")
    _add_train_flags(p)
    p.add_argument("--teacher", help="checkpoint of a pre-trained teacher (dk, at)")
    p.add_argument("--teacher-arch", dest="teacher_arch", help="teacher architecture (defaults to --arch)")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 error of a checkpoint")
    p.add_argument("--arch", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=DEFAULTS["data"])
    p.add_argument("--split", choices=("val", "train", "test"), default="val")
    p.add_argument("--val-frac", dest="val_frac", type=float, default=DEFAULTS["val_frac"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="online-distillation grid over temperature and branch count")
    _add_train_flags(p)
    p.add_argument("--temperatures", type=float, nargs="+", default=[1.0, 4.0, 10.0])
    p.add_argument("--branch-counts", dest="branch_counts", type=int, nargs="+", default=[1, 2, 4])
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cheapnet: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"cheapnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
