"""Command-line entry point: ``emtcycle {simulate,train,evaluate,compensate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The default seed can be set with the ``EMTCYCLE_SEED`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .compensator import EnsembleModel, fit_finetune, predict_array, scalar_sigma, train_ensemble
from .cyclegan import LossWeights, TrainConfig
from .distortion import DistortionEnvSpec, generate_dataset, make_environment
from .errors import DataError, EmtError, NumericError
from .evaluation import (FINETUNE_REFERENCES, STAGES, AblationConfig, AnnConfig, EvalReport,
                         ablation_run, compensated_z_by_index, consistency_metric, evaluate,
                         finetune_reference, report_metadata, sigma_pred, split_roles,
                         write_report)
from .geometry import GroundTruthGrid, N_CHANNELS, ROLES, dataset_rmse, load_datasets, save_datasets
from .neuralnet import TrainSchedule
from .presets import default_grid, table1_datasets

log = logging.getLogger("emtcycle")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "EMTCYCLE_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# --- simulate ----------------------------------------------------------------------

def _specs_from_json(path, seed):
    """Environments from a spec file: one spec object, a list of them, or
    ``{"grid": {...}, "environments": [...]}``. Each entry may carry
    ``seed`` and ``role``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    grid = default_grid()
    if isinstance(doc, dict) and "environments" in doc:
        if "grid" in doc:
            grid = GroundTruthGrid.from_json(doc["grid"])
        entries = doc["environments"]
    else:
        entries = doc if isinstance(doc, list) else [doc]
    out = []
    for k, e in enumerate(entries):
        e = dict(e)
        role = e.pop("role", "evaluation")
        env_seed = int(e.pop("seed", seed + k))
        if role not in ROLES:
            raise DataError(f"{path}: environment {k}: unknown role {role!r}")
        out.append((DistortionEnvSpec.from_json(e), env_seed, role))
    return grid, out


def cmd_simulate(args) -> int:
    if args.preset:
        datasets = table1_datasets(args.seed)
    else:
        grid, specs = _specs_from_json(args.spec, args.seed)
        datasets = [generate_dataset(make_environment(spec, s), grid, role, args.seed)
                    for spec, s, role in specs]
    path = save_datasets(datasets, args.out)
    for d in datasets:
        rmse, std = dataset_rmse(d, args.pairing)
        print(f"{d.env_id:<16} {d.role:<10} rmse {rmse:.3f} mm  std {std:.3f} mm")
    log.info("wrote %s", path)
    return EXIT_OK


# --- train -------------------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    sched = TrainSchedule(base_lr=args.lr, total_epochs=args.epochs,
                          decay_start_epoch=min(args.decay_start, args.epochs),
                          batch_size=args.batch_size)
    weights = LossWeights(args.lambda_adv, args.lambda_cycle, args.lambda_comp,
                          args.lambda_quality)
    return TrainConfig(mode=args.mode.replace("-", "_"), weights=weights, schedule=sched,
                       seed=args.seed)


def cmd_train(args) -> int:
    datasets = load_datasets(args.data)
    train, val, _ = split_roles(datasets)
    config = _train_config(args)
    ens = train_ensemble(config, train, val, args.members, parallel=args.jobs > 1,
                         jobs=args.jobs)
    for m in ens.members:
        last = m.loss_trace[-1] if m.loss_trace else {}
        log.info("member seed %d final losses: %s", m.seed,
                 {k: round(v, 5) for k, v in last.items() if isinstance(v, float)})
    if args.fine_tune:
        ens.finetune = fit_finetune(ens, finetune_reference(train, config, args.finetune_ref))
    ens.save(args.out)
    print(f"wrote {args.out} ({len(ens.members)} members, mode {ens.mode}, "
          f"fine-tune {'on' if ens.finetune is not None else 'off'})")
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------------

def _failure_code(report: EvalReport) -> int:
    failed = [r for r in report.rows if r.status != "ok"]
    if not failed:
        return EXIT_OK
    numeric = {c.__name__ for c in _subclasses(NumericError)}
    return EXIT_NUMERIC if any(r.note.split(":")[0] in numeric for r in failed) else EXIT_DATA


def _subclasses(cls):
    out = {cls}
    for c in cls.__subclasses__():
        out |= _subclasses(c)
    return out


def cmd_evaluate(args) -> int:
    datasets = load_datasets(args.data)
    _, _, evals = split_roles(datasets)
    if not evals:
        raise DataError("no evaluation-role datasets")
    model = EnsembleModel.load(args.model) if args.model else None
    if args.ablation:
        base = model.members[0].config if model else TrainConfig(seed=args.seed)
        if args.epochs is not None:
            base = replace(base, schedule=replace(base.schedule, total_epochs=args.epochs,
                                                  decay_start_epoch=min(
                                                      base.schedule.decay_start_epoch,
                                                      args.epochs)))
        master = AblationConfig(train=base, ann=AnnConfig(schedule=base.schedule, seed=base.seed,
                                                          member_count=args.members),
                                member_count=args.members, finetune_ref=args.finetune_ref)
        models = {"cyclegan": model} if model else {}
        report = ablation_run(master, datasets, models, parallel=args.jobs > 1, jobs=args.jobs)
        cons_model = models.get("cyclegan")
    else:
        if args.stage != "raw" and model is None:
            raise DataError(f"--stage {args.stage} needs --model")
        cfg = {"stage": args.stage, "pairing": args.pairing,
               "model": None if model is None else model.to_json()}
        report = EvalReport(metadata=report_metadata(cfg, datasets))
        report.metadata.pop("config")
        report.rows = evaluate(model, evals, args.stage, args.pairing)
        report.sigma_pred[args.stage] = sigma_pred(model, evals, args.stage)
        report.metrics["consistency_raw"] = consistency_metric(None, evals)
        cons_model = model
        if model is not None:
            report.metrics["consistency_cyclegan"] = consistency_metric(model, evals)
    svg = None
    if args.svg and cons_model is not None:
        z = compensated_z_by_index(cons_model, evals)
        svg = {d.env_id: (np.arange(z.shape[1]), z[k]) for k, d in enumerate(evals)}
    paths = write_report(report, args.out, csv_series=args.csv, svg_points=svg)
    sys.stdout.write(report.text_table())
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    return _failure_code(report)


# --- compensate --------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def cmd_compensate(args, stdin=None, stdout=None, stderr=None) -> int:
    stdin, stdout, stderr = stdin or sys.stdin, stdout or sys.stdout, stderr or sys.stderr
    model = EnsembleModel.load(args.model)
    for lineno, line in enumerate(stdin, 1):
        text = line.strip()
        if not text:
            continue
        try:
            v = np.array([float(t) for t in text.split(",")])
            if v.shape != (N_CHANNELS,) or not np.all(np.isfinite(v)):
                raise ValueError(f"expected {N_CHANNELS} finite numbers")
        except ValueError as exc:
            print(f"line {lineno}: {exc}", file=stderr, flush=True)
            continue
        mean, sigma = predict_array(model, v, finetune=args.fine_tune)
        row = list(mean[0]) + [sigma[0, 2], scalar_sigma(sigma[0])]
        stdout.write(",".join(_fmt(x) for x in row) + "\n")
        stdout.flush()
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="emtcycle", formatter_class=fmt,
                description="Simulate, train and evaluate EM-tracking error compensation.",
                epilog="exit codes: 0 ok, 1 usage, 2 data, 3 numeric")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="-v for progress, -vv for per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate synthetic datasets", formatter_class=fmt)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=["table1"], help="bundled nine-scenario preset")
    src.add_argument("--spec", help="environment spec JSON")
    s.add_argument("--out", required=True, help="output directory (datasets.csv, grid.json)")
    s.add_argument("--seed", type=int, default=seed, help=f"dataset seed (env {SEED_ENV})")
    s.add_argument("--pairing", choices=["all_pairs", "axis_neighbors"], default="all_pairs",
                   help="point pairs used for the printed RMSE")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a compensation ensemble", formatter_class=fmt)
    t.add_argument("--data", required=True, help="directory written by simulate")
    t.add_argument("--out", required=True, help="ensemble JSON path")
    t.add_argument("--mode", choices=["cyclegan", "vanilla-gan"], default="cyclegan",
                   help="vanilla-gan drops the cycle loss and the reverse generator")
    t.add_argument("--members", type=int, default=10, help="ensemble size")
    t.add_argument("--epochs", type=int, default=200, help="training epochs")
    t.add_argument("--decay-start", type=int, default=100,
                   help="epoch at which the learning rate starts its linear decay to 0")
    t.add_argument("--lr", type=float, default=0.0005, help="Adam learning rate")
    t.add_argument("--batch-size", type=int, default=16, help="C-arm points per step")
    w = LossWeights()
    t.add_argument("--lambda-adv", type=float, default=w.adv, help="adversarial weight")
    t.add_argument("--lambda-cycle", type=float, default=w.cycle, help="cycle weight")
    t.add_argument("--lambda-comp", type=float, default=w.comp, help="distance weight")
    t.add_argument("--lambda-quality", type=float, default=w.quality, help="quality weight")
    t.add_argument("--fine-tune", action=argparse.BooleanOptionalAction, default=True,
                   help="fit the linear correction after training")
    t.add_argument("--finetune-ref", choices=FINETUNE_REFERENCES, default="carm",
                   help="data the linear correction is fitted on")
    t.add_argument("--seed", type=int, default=seed, help=f"base seed (env {SEED_ENV})")
    t.add_argument("--jobs", type=int, default=1, help="worker processes for members")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="error tables and ablation", formatter_class=fmt)
    e.add_argument("--data", required=True, help="directory written by simulate")
    e.add_argument("--model", help="ensemble JSON (optional for --stage raw)")
    e.add_argument("--stage", choices=STAGES, default="cyclegan_ft", help="compensation stage")
    e.add_argument("--ablation", action="store_true",
                   help="run all five arms; missing models are trained")
    e.add_argument("--members", type=int, default=10, help="ensemble size for trained arms")
    e.add_argument("--epochs", type=int, default=None,
                   help="override training epochs for ablation arms")
    e.add_argument("--finetune-ref", choices=FINETUNE_REFERENCES, default="carm",
                   help="data the linear correction is fitted on when missing")
    e.add_argument("--pairing", choices=["all_pairs", "axis_neighbors"], default="all_pairs",
                   help="point pairs entering the error statistics")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--csv", action="store_true", help="also write report rows as CSV")
    e.add_argument("--svg", action="store_true", help="consistency scatter (needs matplotlib)")
    e.add_argument("--seed", type=int, default=seed, help=f"base seed (env {SEED_ENV})")
    e.add_argument("--jobs", type=int, default=1, help="worker processes for members")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compensate", formatter_class=fmt,
                       help="stream filter: x,y,z,q,phi_x,phi_y,phi_z per line in, "
                            "compensated point plus sigma_z,sigma_mean out")
    c.add_argument("--model", required=True, help="ensemble JSON")
    c.add_argument("--fine-tune", action=argparse.BooleanOptionalAction, default=False,
                   help="apply the stored linear correction (moves x,y too)")
    c.set_defaults(func=cmd_compensate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EmtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
