"""Command-line surface: data generation, training, evaluation, ablation, reporting.

Failures exit nonzero with one machine-parseable stderr line per error class:

    ERROR <ClassName>: <message>

Exit codes: ConfigError 2, MissingInputError 3, DataError 4, TrainingError 5,
EvalError 6.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import data as dat
from . import metrics as met
from . import training as tr
from .config import ConfigError, load_config
from .model import VLModel
from .report import RunReport, write_curve_panels, write_merged_metrics_csv


class MissingInputError(FileNotFoundError):
    pass


class EvalError(ValueError):
    pass


_EXIT_CODES = {
    "ConfigError": 2,
    "MissingInputError": 3,
    "DataError": 4,
    "TrainingError": 5,
    "EvalError": 6,
}


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _load_study(cfg, data_dir: str) -> tr.StudyData:
    _require(os.path.join(data_dir, "catalog.json"), "catalog")
    catalog = dat.load_catalog(data_dir)
    return tr.StudyData(
        catalog=catalog,
        train_sets=dat.load_datasets(data_dir, "train"),
        val_sets=dat.load_datasets(data_dir, "val"),
        test_sets=dat.load_datasets(data_dir, "test"),
    )


def _load_teachers(teachers_dir: str, cfg) -> tr.TeacherBundle:
    _require(teachers_dir, "teachers directory")
    models, refs = {}, {}
    for task in dat.TASKS:
        ckpt = os.path.join(teachers_dir, f"teacher_{task}.ckpt")
        rep_dir = os.path.join(teachers_dir, f"teacher_{task}")
        _require(ckpt, f"teacher checkpoint for {task}")
        _require(os.path.join(rep_dir, "report.json"), f"teacher report for {task}")
        models[task] = VLModel.load(ckpt)
        refs[task] = RunReport.load(rep_dir).extras["best_val"]
    return tr.TeacherBundle(models, refs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    catalog = dat.gen_catalog(cfg.seed, cfg.data["n_products"])
    dat.save_catalog(catalog, args.out)
    for split, sizes in (("train", cfg.data["sizes"]),
                         ("val", dat.eval_sizes(catalog, "val")),
                         ("test", dat.eval_sizes(catalog, "test"))):
        sets = dat.build_task_datasets(catalog, sizes, split,
                                       allow_fewer_triplets=split != "train")
        dat.save_datasets(sets, args.out)
    print(f"wrote catalog ({cfg.data['n_products']} products) and task files to {args.out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    if args.task not in dat.TASKS:
        raise ConfigError(f"unknown task {args.task!r}")
    study = _load_study(cfg, args.data_dir)
    model, report = tr.train_teacher(args.task, cfg.model_config(), study.catalog,
                                     study.train_sets, study.val_sets, cfg.train_config(),
                                     cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    model.save(os.path.join(args.out, f"teacher_{args.task}.ckpt"))
    report.save(os.path.join(args.out, f"teacher_{args.task}"))
    print(f"teacher[{args.task}] best val {report.extras['best_val']:.4f} -> {args.out}")
    return 0


def cmd_train_mtl(args) -> int:
    cfg = load_config(args.config)
    teachers = None
    if cfg.distill or cfg.grad_method == "ias":
        if not args.teachers_dir:
            raise tr.TrainingError(
                "distillation or validation scaling requested without --teachers-dir")
        teachers = _load_teachers(args.teachers_dir, cfg)
    study = _load_study(cfg, args.data_dir)
    model, report, _ = tr.train_mtl(cfg.model_config(), study.catalog, study.train_sets,
                                    study.val_sets, cfg.train_config(), cfg.seed,
                                    strategy=cfg.strategy, grad_method=cfg.grad_method,
                                    distill=cfg.distill, teachers=teachers)
    report.final_metrics = tr.final_metrics(model, study.test_sets, study.catalog)
    os.makedirs(args.out, exist_ok=True)
    model.save(os.path.join(args.out, "model.ckpt"))
    report.save(args.out)
    print(f"mtl[{cfg.strategy}/{cfg.grad_method}/distill={cfg.distill}] -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    study = _load_study(cfg, args.data_dir)
    model = VLModel.load(_require(args.checkpoint, "checkpoint"))
    tasks = args.tasks.split(",") if args.tasks else list(model.cfg.supported_tasks)
    for t in tasks:
        if t not in dat.TASKS:
            raise EvalError(f"unknown task {t!r}")
        if t not in model.cfg.supported_tasks:
            raise EvalError(f"task {t!r} unsupported by this checkpoint")
    sets = study.test_sets if args.split == "test" else study.val_sets
    rows = []
    metrics = tr.final_metrics(model, sets, study.catalog, tasks=tuple(tasks))
    for task, m in sorted(metrics.items()):
        for name, val in sorted(m.items()):
            rows.append({"task": task, "protocol": "full", "metric": name, "value": val})
    if args.protocol in ("random100", "both"):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x100)))
        rows += _random100_rows(model, sets, study.catalog, tasks, rng)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["task", "protocol", "metric", "value"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['task']:5s} {r['protocol']:10s} {r['metric']:12s} {r['value']:.4f}")
    return 0


def _random100_rows(model, sets, catalog, tasks, rng) -> list:
    rows = []
    cats = {p.pid: p.category for p in catalog.products}

    def recalls(result, prefix=""):
        ks = [k for k in (1, 5, 10) if k <= int(result.pool_sizes.min())]
        return [{"protocol": "random100", "metric": f"{prefix}r@{k}",
                 "value": result.recall_at(k)} for k in ks]

    if "xmr" in tasks:
        recs = sets.records["xmr"]
        img, txt = tr._encode_pairs(model, recs, catalog)
        rec_cats = [cats[r.pid] for r in recs]
        gt = np.arange(len(recs))
        for name, q, pool in (("i2t_", img, txt), ("t2i_", txt, img)):
            res = met.retrieval_ranks(q, pool, gt, protocol="random100",
                                      pool_cats=rec_cats, rng=rng)
            rows += [dict(r, task="xmr") for r in recalls(res, name)]
    if "tgir" in tasks:
        recs = sets.records["tgir"]
        queries, pool, gt, pool_pids = tr._tgir_embeddings(model, recs, catalog)
        res = met.retrieval_ranks(queries, pool, gt, pool_ids=pool_pids,
                                  protocol="random100",
                                  pool_cats=[cats[p] for p in pool_pids], rng=rng)
        rows += [dict(r, task="tgir") for r in recalls(res)]
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    study = _load_study(cfg, args.data_dir)
    teachers = reference = None
    if args.group != "I":
        if not args.teachers_dir:
            raise tr.TrainingError(f"ablation group {args.group} needs --teachers-dir")
        teachers = _load_teachers(args.teachers_dir, cfg)
        reference = tr.teacher_reference_metrics(teachers, study, study.test_sets)
    rows = tr.run_ablation(args.group, cfg.model_config(), study, cfg.train_config(),
                           cfg.seed, teachers=teachers, reference=reference)
    os.makedirs(args.out, exist_ok=True)
    cols = sorted({k for row in rows for k in row}, key=lambda c: (c != "tag", c))
    with open(os.path.join(args.out, f"ablation_{args.group}.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    with open(os.path.join(args.out, f"ablation_{args.group}.json"), "w") as fh:
        json.dump(rows, fh, sort_keys=True, indent=1)
    for row in rows:
        print(f"{row['tag']:18s} params {row['params_vs_stl_pct']:+7.2f}% "
              f"delta {row['overall_delta_pct']:+6.2f}%")
    return 0


def cmd_report(args) -> int:
    reports = {}
    for run_dir in args.run_dirs:
        _require(os.path.join(run_dir, "report.json"), "run report")
        reports[os.path.basename(os.path.normpath(run_dir))] = RunReport.load(run_dir)
    os.makedirs(args.out, exist_ok=True)
    write_merged_metrics_csv(reports, os.path.join(args.out, "metrics.csv"))
    panels = write_curve_panels(reports, args.out)
    print(f"wrote metrics.csv and {len(panels)} curve panels to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fashionmtl",
                                description="adapter-based multi-task V+L training lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic catalog and task files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train one frozen single-task teacher")
    t.add_argument("--task", required=True, choices=dat.TASKS)
    t.add_argument("--config", required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train_teacher)

    m = sub.add_parser("train-mtl", help="train the multi-task model")
    m.add_argument("--config", required=True)
    m.add_argument("--data-dir", required=True)
    m.add_argument("--teachers-dir")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_train_mtl)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", help="comma-separated subset, default: all supported")
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--protocol", choices=("full", "random100", "both"), default="full")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run one ablation group")
    a.add_argument("--group", required=True, choices=tuple(tr.ABLATION_GROUPS))
    a.add_argument("--config", required=True)
    a.add_argument("--data-dir", required=True)
    a.add_argument("--teachers-dir")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("report", help="merge finished runs into CSV + SVG curve panels")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, MissingInputError, dat.DataError, tr.TrainingError, EvalError) as e:
        name = type(e).__name__
        print(f"ERROR {name}: {e}", file=sys.stderr)
        return _EXIT_CODES.get(name, 1)


if __name__ == "__main__":
    sys.exit(main())
