"""Command-line entry point: ``tcts {gen,train,eval,score,ablate-teacher-gt}``.

Exit codes: 0 success, 2 config error, 3 data contract error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from . import checkpoint
from .errors import (ConfigError, DataContract, DegenerateCaption, EmptyText,
                     IncompatibleCheckpoint, MissingReferences, NonFinite)
from .harness import (Corpus, ExperimentConfig, evaluate, evaluation_csv, load_checkpoint,
                      run_teacher_as_gt_ablation, save_checkpoint, train_student_rl,
                      train_student_xe, train_teacher, versions)
from .metrics import score_all
from .synthgen import GenConfig, gen_dataset, read_jsonl, write_jsonl
from .textcore import tokenize

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tcts")


def _write_sidecar(path, payload: dict) -> None:
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump({**payload, "versions": versions()}, fh, indent=2, sort_keys=True)


def _load(path, corpus: Corpus):
    try:
        return load_checkpoint(path, corpus)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_gen(args) -> None:
    config = ExperimentConfig.from_json(args.config)
    records = gen_dataset(GenConfig(config.num_records, config.seed, config.attr_vocab_size))
    write_jsonl(records, args.out)
    log.info("wrote %d records to %s", len(records), args.out)


def cmd_train(args) -> None:
    config = ExperimentConfig.from_json(args.config)
    config.require_paths()
    corpus = Corpus.from_config(config)
    teacher = _load(config.teacher_ckpt, corpus) if config.teacher_ckpt else None
    if config.mode == "teacher":
        params, report = train_teacher(config, corpus)
    elif config.mode in ("xe", "tcts-xe"):
        params, report = train_student_xe(config, teacher, corpus)
    else:
        student = _load(config.ckpt_in, corpus)
        params, report = train_student_rl(config, student, teacher, corpus)
    if config.ckpt_out:
        save_checkpoint(config.ckpt_out, params, corpus, config)
    if config.report:
        report.write(config.report)
    if report.test is not None:
        log.info("test %s", report.test.as_row())


def cmd_eval(args) -> None:
    try:
        _, header = checkpoint.load(args.ckpt)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.ckpt}: {exc}") from None
    try:
        records = read_jsonl(args.data)
    except (OSError, ValueError, TypeError) as exc:
        raise DataContract(f"cannot read dataset {args.data}: {exc}") from None
    corpus = Corpus(records, header.get("min_count", 5), header.get("max_len", 16))
    params = load_checkpoint(args.ckpt, corpus)
    records, _, reports, mean = evaluate(params, corpus, args.split)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(evaluation_csv(records, reports))
    _write_sidecar(args.report, {"split": args.split, "mean": mean.as_row(),
                                 "config_hash": header.get("config_hash")})
    print(json.dumps(mean.as_row()))


def _read_refs(path) -> list[tuple[str, list[list[str]]]]:
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(ln for ln in fh if ln.strip()):
                obj = json.loads(line)
                refs = obj["refs"] if isinstance(obj, dict) else obj
                key = obj.get("id", i) if isinstance(obj, dict) else i
                out.append((str(key), [tokenize(r) for r in refs]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataContract(f"cannot read references {path}: {exc}") from None
    return out


def cmd_score(args) -> None:
    try:
        with open(args.cand, encoding="utf-8") as fh:
            cands = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise DataContract(f"cannot read candidates {args.cand}: {exc}") from None
    while cands and not cands[-1].strip():
        cands.pop()
    refs = _read_refs(args.refs)
    if len(cands) != len(refs):
        raise DataContract(f"{len(cands)} candidates but {len(refs)} reference sets")
    reports, mean = score_all([tokenize(c) for c in cands], [r for _, r in refs])
    with open(args.report, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider"])
        for (key, _), rep in zip(refs, reports):
            writer.writerow([key, *rep.bleu, rep.rouge_l, rep.cider])
    _write_sidecar(args.report, {"mean": mean.as_row()})
    print(json.dumps(mean.as_row()))


def cmd_ablate(args) -> None:
    config = ExperimentConfig.from_json(args.config)
    if not config.teacher_ckpt or not config.ckpt_in:
        raise ConfigError("ablate-teacher-gt needs teacher_ckpt and an XE-stage ckpt_in")
    corpus = Corpus.from_config(config)
    teacher = _load(config.teacher_ckpt, corpus)
    student = _load(config.ckpt_in, corpus)
    result = run_teacher_as_gt_ablation(config, student, teacher, corpus)
    table = result["table"]
    if config.report and table:
        with open(config.report, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(table)
        _write_sidecar(config.report, {
            "config_hash": config.hash(),
            "teachercap_test": result["teachercap"].sidecar()["test"],
            "onegt_test": result["onegt"].sidecar()["test"],
        })
    for name in ("teachercap", "onegt"):
        test = result[name].test
        print(name, json.dumps(None if test is None else test.as_row()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train in the mode named by the config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode a split and score it")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score candidate sentences against references")
    p.add_argument("--cand", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate-teacher-gt", help="SCST with teacher captions vs one reference")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataContract, IncompatibleCheckpoint, MissingReferences, EmptyText) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFinite, DegenerateCaption, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
