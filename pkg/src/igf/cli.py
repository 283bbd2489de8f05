"""Command-line entry point: ``igf <subcommand> --config PATH [--set key=value ...]``.

Exit codes: 0 success, 1 verification failure, 2 invalid configuration,
3 missing artifact, 4 any other package error. Failures print one JSON line
on stderr: ``{"error": <code>, "exit": <n>, "field": <path|null>, "artifact": <name|null>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from .config import load_config
from .errors import IGFError, IncompatibleSnapshotError, InvalidConfigError, MissingArtifactError
from .filtration import iigf_finetune, igf_finetune, standard_finetune
from .learner import SecondaryLearner
from .suite import (
    BASE_FILE,
    EXPERIMENTS,
    LEARNER_FILE,
    Workspace,
    find_reports,
    run_all,
    run_experiment,
    verify_report,
)

logger = logging.getLogger("igf")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_MISSING, EXIT_OTHER = 0, 1, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config path; VALUE is parsed as JSON when possible")
    common.add_argument("--out", default="out", help="workspace directory for artifacts and reports")
    common.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    common.add_argument("--threads", type=int, help="parallel fine-tuning runs (same as --set max_parallel_runs=N)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="igf", description="Information gain filtration experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the tokenizer and the base model")
    sub.add_parser("ig-dataset", parents=[common], help="measure the IG dataset with the base model")
    tl = sub.add_parser("train-learner", parents=[common], help="train the secondary learner")
    tl.add_argument("--kind", choices=["conv", "linear_onehot", "linear_embed", "token_average"])
    ft = sub.add_parser("finetune", parents=[common], help="one fine-tuning run")
    ft.add_argument("--method", required=True, choices=["standard", "igf", "iigf"])
    ft.add_argument("--schedule", choices=["shifting", "constant"], default="shifting",
                    help="threshold schedule for --method igf")
    ex = sub.add_parser("experiment", parents=[common], help="run a named experiment or 'all'")
    ex.add_argument("name", choices=sorted(EXPERIMENTS) + ["all"])
    ve = sub.add_parser("verify", help="check report checksums and recompute summaries")
    ve.add_argument("path", help="a report directory or a directory containing reports")
    ve.add_argument("--config", help="accepted for uniformity; reports carry their own config")
    ve.add_argument("-v", "--verbose", action="store_true")
    el = sub.add_parser("export-learner", parents=[common], help="copy the trained learner to a portable file")
    el.add_argument("--to", required=True, help="destination learner file")
    return p


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"max_parallel_runs={args.threads}")
    return load_config(args.config, overrides)


def _cmd_pretrain(args) -> int:
    ws = Workspace(_config(args), args.out)
    ws.base
    print(json.dumps({"tokenizer": str(ws.root / "tokenizer.json"), "base": str(ws.root / BASE_FILE),
                      "fingerprint": ws.base.fingerprint}))
    return EXIT_OK


def _cmd_ig_dataset(args) -> int:
    ws = Workspace(_config(args), args.out, strict=True)
    ws.base
    ws.strict = False
    d = ws.ig_dataset
    print(json.dumps({"ig_dataset": str(ws.root / "ig_dataset.jsonl"), "n": len(d), "fingerprint": d.fingerprint}))
    return EXIT_OK


def _cmd_train_learner(args) -> int:
    ws = Workspace(_config(args), args.out, strict=True)
    ws.ig_dataset
    path = ws.root / LEARNER_FILE
    if args.kind:
        learner = ws.train_learner(kind=args.kind)
        path = ws.root / f"learner_{args.kind}.igfl"
    else:
        ws.strict = False
        learner = ws.learner
    learner.save(path)
    print(json.dumps({"learner": str(path), "kind": learner.config.kind, "n_params": learner.n_params}))
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cfg = _config(args)
    ws = Workspace(cfg, args.out, strict=True)
    fc = cfg.finetune_config(rng_seed=cfg.seed)
    if args.method == "standard":
        _, rec = standard_finetune(ws.base, ws.stream, ws.test_set, fc)
        name = "standard"
    elif args.method == "igf":
        schedule = cfg.shifting_schedule if args.schedule == "shifting" else cfg.constant_schedule
        _, rec = igf_finetune(ws.base, ws.learner, ws.stream, ws.test_set, schedule, fc)
        name = f"igf_{args.schedule}"
    else:
        _, rec = iigf_finetune(ws.base, ws.pool, ws.objective, ws.test_set, cfg.iterated_schedule,
                               cfg.learner_config(), fc, n_workers=cfg.ig.n_workers)
        name = "iigf"
    runs = ws.root / "runs"
    runs.mkdir(exist_ok=True)
    stem = runs / f"{name}_seed{cfg.seed}"
    rec.save(stem.with_suffix(".json"))
    rec.write_trajectory_csv(stem.with_suffix(".csv"))
    print(json.dumps({"run": str(stem.with_suffix(".json")), "final_perplexity": rec.final_perplexity}))
    return EXIT_OK


def _cmd_experiment(args) -> int:
    ws = Workspace(_config(args), args.out)
    dirs = run_all(ws) if args.name == "all" else [run_experiment(ws, args.name)]
    for d in dirs:
        summary = json.loads((d / "report.json").read_text())["summary"]
        print(json.dumps({"report": str(d), "summary": summary}, sort_keys=True))
    return EXIT_OK


def _cmd_verify(args) -> int:
    reports = find_reports(args.path)
    if not reports:
        raise MissingArtifactError(f"no report.json under {args.path}", str(args.path))
    failed = False
    for d in reports:
        problems = verify_report(d)
        print(json.dumps({"report": str(d), "ok": not problems, "problems": problems}))
        failed |= bool(problems)
    return EXIT_VERIFY if failed else EXIT_OK


def _cmd_export_learner(args) -> int:
    ws = Workspace(_config(args), args.out, strict=True)
    src = ws.root / LEARNER_FILE
    learner = SecondaryLearner.load(ws._need(LEARNER_FILE))
    if learner.base_model_fingerprint != ws.base.fingerprint:
        raise IncompatibleSnapshotError("the learner was trained against a different base model")
    dest = Path(args.to)
    dest.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dest)
    print(json.dumps({"learner": str(dest), "kind": learner.config.kind,
                      "base_model_fingerprint": learner.base_model_fingerprint}))
    return EXIT_OK


COMMANDS = {
    "pretrain": _cmd_pretrain,
    "ig-dataset": _cmd_ig_dataset,
    "train-learner": _cmd_train_learner,
    "finetune": _cmd_finetune,
    "experiment": _cmd_experiment,
    "verify": _cmd_verify,
    "export-learner": _cmd_export_learner,
}


def _error_line(err: Exception, code: int) -> str:
    return json.dumps({
        "error": getattr(err, "code", type(err).__name__),
        "exit": code,
        "field": getattr(err, "field_path", None),
        "artifact": getattr(err, "artifact", None),
        "message": str(err),
    })


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except IGFError as err:
        if isinstance(err, InvalidConfigError):
            code = EXIT_CONFIG
        elif isinstance(err, MissingArtifactError):
            code = EXIT_MISSING
        else:
            code = EXIT_OTHER
        print(_error_line(err, code), file=sys.stderr)
        return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
