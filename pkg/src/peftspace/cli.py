"""``peftspace`` command line: pretrain, discover, compare, report."""
from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import config as cfgmod
from . import designspace as ds
from . import experiment as ex
from .errors import CheckpointError, ConfigError, InputError, PeftSpaceError
from .tasks import default_suite, generate

TABLE_FILES = {"Grouping": "grouping", "Allocation": "allocation", "TunableGroups": "tunable_groups",
               "Comparison": "comparison"}


def _table_file(stage):
    return TABLE_FILES.get(stage, "strategy_" + stage.replace("_", ""))


def _common(parser):
    parser.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--workers", type=int, help="trial worker processes (default: CPU count)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--surrogate", action="store_true", help="score spaces with the planted surrogate")
    parser.add_argument("--no-timestamp", action="store_true", help="omit wall-clock fields for byte-stable output")
    parser.add_argument("--budget-fraction", type=float,
                        help="trainable budget as a fraction of encoder parameters (BitFit-only gets a fifth)")
    parser.add_argument("--checkpoint", help="pretrained checkpoint (default: OUT/checkpoint.bin)")


def build_parser():
    parser = argparse.ArgumentParser(prog="peftspace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("pretrain", "build and pretrain the backbone, write the checkpoint"),
                       ("discover", "run the four-stage greedy design-space discovery"),
                       ("compare", "compare the preset spaces over seeded runs")]:
        _common(sub.add_parser(name, help=text))
    rep = sub.add_parser("report", help="re-render tables from a trial log")
    rep.add_argument("log", help="trials.log written by discover or compare")
    rep.add_argument("--out", help="write tables/ and report.txt here instead of printing")
    return parser


def resolve_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out is not None:
        changes["out"] = args.out
    if args.checkpoint is not None:
        changes["checkpoint"] = args.checkpoint
    if args.surrogate:
        changes["surrogate"] = True
    if args.no_timestamp:
        changes["timestamp"] = False
    if args.budget_fraction is not None:
        changes["budget_fraction"] = args.budget_fraction
        changes["bitfit_budget_fraction"] = args.budget_fraction / 5
    if args.seed is not None:
        changes["backbone"] = dataclasses.replace(cfg.backbone, seed=args.seed)
    return cfg.replace(**changes)


def _workers(cfg):
    return cfg.workers or os.cpu_count() or 1


def _write(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror or exc}") from None


def _prepare_out(cfg):
    _write(Path(cfg.out) / "config.effective", cfg.emit())


def _load_checkpoint(cfg):
    path = cfg.checkpoint_path
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found; run `peftspace pretrain` first", field="path")
    return bb.load_checkpoint(path)


def _datasets(cfg):
    t = cfg.tasks
    return [generate(s) for s in default_suite(t.train_size, t.val_size, seed=t.seed, chain_seed=cfg.backbone.seed)]


def _training_scorer(cfg, epochs):
    ft = cfg.finetune
    return ex.TrainingScorer(_load_checkpoint(cfg), _datasets(cfg), epochs, timestamp=cfg.timestamp,
                             learning_rate=ft.learning_rate, head_learning_rate=ft.head_learning_rate,
                             weight_decay=ft.weight_decay, warmup_ratio=ft.warmup_ratio, batch_size=ft.batch_size)


def _emit_tables(out, tables):
    for stage, text in tables.items():
        _write(Path(out) / "tables" / f"{_table_file(stage)}.txt", text)
    _write(Path(out) / "report.txt", "\n".join(tables.values()))


def _stamp(cfg, doc):
    if cfg.timestamp:
        doc["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return doc


def _write_log(path, records):
    lines = [json.dumps(r.to_record()) for r in records]
    _write(path, "".join(line + "\n" for line in lines))


def cmd_pretrain(cfg):
    _prepare_out(cfg)
    model = bb.build(cfg.backbone)
    p = cfg.pretrain
    corpus = bb.make_corpus(cfg.backbone, p.num_sequences)
    bb.pretrain(model, corpus, epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, mask_rate=p.mask_rate,
                optimizer=p.optimizer, momentum=p.momentum, clip_norm=p.clip_norm)
    bb.save_checkpoint(model, cfg.checkpoint_path)
    losses = ", ".join(f"{x:.4f}" for x in model.pretrain_losses)
    print(f"wrote {cfg.checkpoint_path} ({bb.param_count(cfg.backbone)} encoder parameters; "
          f"epoch losses: {losses or 'none'})")


def cmd_discover(cfg):
    _prepare_out(cfg)
    d = cfg.discovery
    options = ex.DiscoveryOptions(d.n_models, d.group_count, d.tunable_menu, d.strategy_menu)
    target = None
    if cfg.surrogate:
        # surrogate scoring never touches the backbone, so no checkpoint is needed
        if d.surrogate_target is not None:
            target = ds.DesignSpace.from_dict(d.surrogate_target)
        else:
            target = ex.planted_target(cfg.seed, d.group_count, d.tunable_menu, d.strategy_menu,
                                       cfg.budget_fraction)
        names = [s.name for s in default_suite(cfg.tasks.train_size, cfg.tasks.val_size)]
        scorer = ex.SurrogateScorer(target, names, cfg.backbone, sigma=d.surrogate_sigma, seed=cfg.seed)
    else:
        scorer = _training_scorer(cfg, d.epochs)
    records = []
    report = ex.run_discovery(scorer, cfg.backbone, options, seed=cfg.seed, workers=_workers(cfg),
                              budget_fraction=cfg.budget_fraction, target=target, on_records=records.extend)
    out = Path(cfg.out)
    _write_log(out / "trials.log", records)
    _emit_tables(out, ex.render_stage_tables(records))
    _write(out / "report.json", json.dumps(_stamp(cfg, report.to_dict()), indent=2) + "\n")
    print(f"final space: {json.dumps(report.final_space.to_dict())}")
    if target is not None:
        print(f"planted target recovered: {report.recovered}")


def compare_spaces(cfg):
    rho = cfg.budget_fraction
    presets = {
        "Adapter-only": ds.single_strategy_space("A", rho),
        "Prefix-only": ds.single_strategy_space("P", rho),
        "BitFit-only": ds.single_strategy_space("B", cfg.bitfit_budget_fraction),
        "LoRA-only": ds.single_strategy_space("L", rho),
        "S4-base": ds.preset_s4("base", rho),
        "S4-3b": ds.preset_s4("threeB", rho),
        "random-S0": ds.DesignSpace(budget_fraction=rho, label="S0"),
    }
    return [(name, presets[name]) for name in cfg.compare.methods]


def cmd_compare(cfg):
    _prepare_out(cfg)
    scorer = _training_scorer(cfg, cfg.compare.epochs)
    records = ex.compare_methods(compare_spaces(cfg), scorer, cfg.backbone, cfg.compare.n_runs, seed=cfg.seed,
                                 workers=_workers(cfg))
    out = Path(cfg.out)
    _write_log(out / "trials.log", records)
    _emit_tables(out, {"Comparison": ex.render_comparison_table(records)})
    tasks, runs, _, pvalues = ex.comparison_summary(records)
    doc = {"methods": [n for n, _ in compare_spaces(cfg)],
           "infeasible": [n for n, cols in runs.items() if cols is None],
           "significance": {c: {"best": b, "second": s, "p": p} for c, (b, s, p) in pvalues.items()}}
    _write(out / "report.json", json.dumps(_stamp(cfg, doc), indent=2) + "\n")
    print(ex.render_comparison_table(records), end="")


def read_log(path):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read trial log {path}: {exc.strerror or exc}") from None
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(ex.TrialResult.from_record(json.loads(line)))
        except (json.JSONDecodeError, InputError, TypeError, ValueError, AttributeError) as exc:
            raise InputError(f"{path}: line {number} is not a valid trial record ({exc})") from None
    if not records:
        raise InputError(f"{path}: trial log is empty; nothing to tabulate")
    return records


def render_log(records):
    tables = ex.render_stage_tables(records)
    if any(r.stage == "Comparison" for r in records):
        tables["Comparison"] = ex.render_comparison_table([r for r in records if r.stage == "Comparison"])
    return tables


def cmd_report(log, out=None):
    tables = render_log(read_log(log))
    if out:
        _emit_tables(out, tables)
    else:
        print("\n".join(tables.values()), end="")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.log, args.out)
            return 0
        cfg = resolve_config(args)
        {"pretrain": cmd_pretrain, "discover": cmd_discover, "compare": cmd_compare}[args.command](cfg)
        return 0
    except PeftSpaceError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # anything unexpected is an internal invariant violation
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
