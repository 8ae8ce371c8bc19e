"""Command-line entry point: ``wsseg <command> [flags]``.

Exit codes: 0 success, 1 invalid input (bad flags, files, values), 2 runtime or
numeric failure (divergence, solver breakdown). Errors go to stderr as ``error: ...``.
On success the path of the main output is printed on stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import data_io
from .baselines import cloud_features, kmeans, ncut
from .core import TrainConfig, ValidationError, parse_value
from .data_io import BudgetSplit, MaskScheme, SyntheticSpec
from .encoder import EncoderParams, forward, init_params
from .graph import knn_weights
from .metrics import aggregate, best_permutation_miou, per_class_mean
from .propagate import SolverError, propagate
from .trainer import (Ablation, TrainingError, budget_experiment, evaluate, grad_study,
                      graph_params, label_amount_sweep, save_run, train)

ABLATION_KEYS = ("mil", "siamese", "smooth")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; here that is an input error
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file; flags below override it")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        value = getattr(defaults, f.name)
        shown = ",".join(map(str, value)) if isinstance(value, tuple) else value
        p.add_argument(_flag(f.name), dest=f.name, default=None, metavar=type(value).__name__.upper(),
                       help=f"(default: {shown})")


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads; results do not depend on it (default: available CPUs)")
    if out_required:
        p.add_argument("--out", required=True, help="output directory (created; must be empty)")


def split_config_text(text: str):
    """Separate ablation switches (as written into run directories) from config keys."""
    keep, ablation = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        key = line.split("=", 1)[0].strip() if "=" in line else ""
        if key in ABLATION_KEYS:
            ablation[key] = parse_value(bool, line.split("=", 1)[1].strip(), f"config line {lineno}")
            keep.append("")
        else:
            keep.append(raw)
    return "\n".join(keep), ablation


def load_config(args) -> tuple:
    """(TrainConfig, ablation dict from the file) with command-line overrides applied."""
    cfg, ablation = TrainConfig(), {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ValidationError(f"config file {path} not found")
        text, ablation = split_config_text(path.read_text(encoding="utf-8"))
        cfg = TrainConfig.from_text(text)
    changes = {}
    for f in dataclasses.fields(TrainConfig):
        raw = getattr(args, f.name, None)
        if raw is not None and f.name != "seed":
            changes[f.name] = parse_value(type(getattr(cfg, f.name)), raw, _flag(f.name))
    changes["seed"] = args.seed
    return cfg.replace(**changes), ablation


def _ablation(args, from_file: dict) -> Ablation:
    if args.method == "ours":
        return Ablation.all()
    if args.method == "baseline":
        return Ablation()
    picked = {k: from_file.get(k, False) for k in ABLATION_KEYS}
    for k in ABLATION_KEYS:
        if getattr(args, k):
            picked[k] = True
    return Ablation(**picked)


def _floats(text: str, what: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _write_csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(repr(float(r[h])) if isinstance(r[h], float) else str(r[h]) for h in header))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> Path:
    spec = SyntheticSpec(args.family, args.points, args.shapes, args.jitter, args.seed, args.color)
    out = data_io.ensure_empty_dir(args.out)
    data_io.save_dataset(data_io.generate_synthetic(spec), out)
    return out


def cmd_train(args) -> Path:
    cfg, from_file = load_config(args)
    ablation = _ablation(args, from_file)
    clouds = data_io.load_dataset(args.data)
    test = data_io.load_dataset(args.test) if args.test else clouds
    masks = data_io.sample_masks(clouds, MaskScheme.parse(args.scheme), args.seed)
    out = data_io.ensure_empty_dir(args.out)
    init = EncoderParams.load(args.init) if args.init else None
    record = train(list(zip(clouds, masks)), cfg, ablation, args.threads, init=init)
    use_prop = args.propagate if args.propagate is not None else ablation == Ablation.all()
    record.evaluation = evaluate(record.params, test, cfg, use_propagation=use_prop)
    save_run(record, out)
    return out


def cmd_eval(args) -> Path:
    cfg, _ = load_config(args)
    params = EncoderParams.load(args.checkpoint)
    clouds = data_io.load_dataset(args.data)
    out = data_io.ensure_empty_dir(args.out)
    ev = evaluate(params, clouds, cfg, use_propagation=args.propagate,
                  absent_class_policy=args.absent_class_policy)
    pred_dir = out / "predictions"
    pred_dir.mkdir()
    for i, (c, pred) in enumerate(zip(clouds, ev.predictions)):
        data_io.save_cloud(c, pred_dir / f"pred_{i:04d}.txt", labels=pred)
    data_io.write_metrics(out / "metrics.json", ev.metrics())
    return out / "metrics.json"


def cmd_propagate(args) -> Path:
    cfg, _ = load_config(args)
    cloud = data_io.load_cloud(args.cloud)
    if args.logits:
        z = data_io.load_logits(args.logits)
    elif args.checkpoint:
        z = forward(EncoderParams.load(args.checkpoint), cloud)
    else:
        raise ValidationError("propagate needs --logits or --checkpoint")
    result = propagate(z, knn_weights(cloud, graph_params(cfg)), cfg.gamma, args.tol)
    out = data_io.ensure_empty_dir(args.out)
    data_io.save_logits(result.refined, out / "refined_logits.txt")
    data_io.save_cloud(cloud, out / "predictions.txt", labels=result.predicted)
    data_io.write_metrics(out / "solver.json", {"residual": result.residual, "ridge": result.ridge,
                                                "method": result.method})
    return out / "refined_logits.txt"


def cmd_baseline(args) -> Path:
    cfg, _ = load_config(args)
    clouds = data_io.load_dataset(args.data)
    out = data_io.ensure_empty_dir(args.out)
    reports = []
    for i, c in enumerate(clouds):
        if args.method == "kmeans":
            assign = kmeans(cloud_features(c), c.num_classes, data_io.make_rng(args.seed, i)).assignment
        else:
            g = knn_weights(c, graph_params(cfg))
            assign = ncut(g, c.num_classes, data_io.make_rng(args.seed, i), cloud_features(c)).assignment
        rep = best_permutation_miou(assign, c.labels, c.num_classes)
        reports.append(rep)
        data_io.save_cloud(c, out / f"pred_{i:04d}.txt", labels=rep.permutation[assign])
    cat_avg, samp_avg = aggregate(zip([c.category for c in clouds], reports))
    data_io.write_metrics(out / "metrics.json", {
        "cat_avg": cat_avg, "samp_avg": samp_avg, "per_class": per_class_mean(reports),
        "method": args.method, "num_samples": len(clouds)})
    return out / "metrics.json"


def cmd_gradstudy(args) -> Path:
    clouds = data_io.load_dataset(args.data)
    grid = [int(v) for v in _floats(args.grid, "--grid")]
    params = (EncoderParams.load(args.checkpoint) if args.checkpoint else
              init_params(args.seed, clouds[0].num_features, clouds[0].num_classes))
    res = grad_study(clouds, params, grid, args.draws, args.seed)
    out = data_io.ensure_empty_dir(args.out)
    rows = [{"n": int(n), "variance": float(v)} for n, v in zip(res.grid, res.variances)]
    _write_csv(out / "gradstudy.csv", ["n", "variance"], rows)
    data_io.write_metrics(out / "fit.json", {"slope": res.slope, "intercept": res.intercept,
                                             "slope_se": res.slope_se, "population": res.population})
    print(f"slope {res.slope:.4f} +/- {res.slope_se:.4f}")
    return out / "gradstudy.csv"


def cmd_budget(args) -> Path:
    cfg, from_file = load_config(args)
    clouds = data_io.load_dataset(args.data)
    test = data_io.load_dataset(args.test) if args.test else clouds
    splits = [BudgetSplit.parse(s) for s in args.splits.split(",") if s.strip()]
    rows = budget_experiment(clouds, test, args.budget, splits, cfg,
                             _ablation(args, from_file), args.threads)
    out = data_io.ensure_empty_dir(args.out)
    _write_csv(out / "budget.csv",
               ["sample_fraction", "point_fraction", "labelled_points", "cat_avg", "samp_avg"], rows)
    return out / "budget.csv"


def cmd_sweep(args) -> Path:
    cfg, _ = load_config(args)
    clouds = data_io.load_dataset(args.data)
    test = data_io.load_dataset(args.test) if args.test else clouds
    rows = label_amount_sweep(clouds, test, _floats(args.fractions, "--fractions"), cfg, args.threads)
    out = data_io.ensure_empty_dir(args.out)
    _write_csv(out / "sweep.csv", ["fraction", "cat_avg", "samp_avg"], rows)
    return out / "sweep.csv"


def _add_method(p, with_switches: bool = True) -> None:
    p.add_argument("--method", choices=("baseline", "ours", "custom"), default="custom",
                   help="baseline = seg loss only; ours = all losses; custom = the switches below "
                        "(default: custom)")
    if with_switches:
        for k in ABLATION_KEYS:
            p.add_argument(f"--{k}", action="store_true", help=f"add the {k} loss in stage 2")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wsseg", description="Weakly supervised point cloud segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic part-labelled dataset")
    p.add_argument("--family", choices=sorted(data_io.FAMILIES), default="barbell")
    p.add_argument("--shapes", type=int, default=32, help="(default: 32)")
    p.add_argument("--points", type=int, default=256, help="(default: 256)")
    p.add_argument("--jitter", type=float, default=0.0, help="(default: 0)")
    p.add_argument("--color", action="store_true", help="add per-part rgb")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an encoder and write a run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--test", help="dataset scored into metrics.json (default: the training data)")
    p.add_argument("--scheme", default="10%", help="1pt, full, 10%% or a fraction (default: 10%%)")
    p.add_argument("--init", help="checkpoint to start from")
    prop = p.add_mutually_exclusive_group()
    prop.add_argument("--propagate", dest="propagate", action="store_true", default=None,
                      help="score with label propagation (default: only for --method ours)")
    prop.add_argument("--no-propagate", dest="propagate", action="store_false")
    _add_method(p)
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--propagate", action="store_true")
    p.add_argument("--absent-class-policy", choices=("exclude", "score_one"), default="exclude")
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("propagate", help="refine one cloud's logits along its k-NN graph")
    p.add_argument("--cloud", required=True)
    p.add_argument("--logits", help="logits file (N K header); or use --checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--tol", type=float, default=1e-8, help="(default: 1e-8)")
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("baseline", help="unsupervised clustering scored by best-permutation mIoU")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("kmeans", "ncut"), default="kmeans")
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradstudy", help="variance of the masked gradient against label count")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="8,16,32,64,128", help="(default: 8,16,32,64,128)")
    p.add_argument("--draws", type=int, default=30, help="(default: 30)")
    p.add_argument("--checkpoint", help="encoder to study (default: random init from --seed)")
    _add_common(p)
    p.set_defaults(func=cmd_gradstudy)

    p = sub.add_parser("budget", help="fixed label budget split between samples and points")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--budget", type=float, default=0.1, help="(default: 0.1)")
    p.add_argument("--splits", default="0.1:1.0,0.5:0.2,1.0:0.1",
                   help="comma-separated x:y pairs (default: 0.1:1.0,0.5:0.2,1.0:0.1)")
    _add_method(p)
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("sweep", help="baseline mIoU over labelled fractions")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--fractions", default="0.01,0.1,1.0", help="(default: 0.01,0.1,1.0)")
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "threads", 1) < 1:
            raise ValidationError("--threads must be >= 1")
        path = args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, SolverError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
