"""Command-line entry point: ``unipact <subcommand> ...``.

Every failure exits nonzero with one line on stderr of the form
``unipact-error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

ERROR_PREFIX = "unipact-error"
CONFIG_ECHO = "config.ini"
RUN_META = "run.json"
VOCAB_FILE = "vocab.txt"
CKPT_FILE = "model.ckpt"
LOSS_FILE = "loss.csv"
SCORES_FILE = "scores.csv"
REPORT_FILE = "report.json"
ABLATION_FILE = "ablation.json"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", 2)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dataset_hash(data_dir: Path) -> str:
    """Hash of the manifest plus every ECG file, in sorted order."""
    h = hashlib.sha256()
    files = [data_dir / "manifest.jsonl"] + sorted((data_dir / "ecg").glob("*.upct"))
    for p in files:
        h.update(p.relative_to(data_dir).as_posix().encode("utf-8") + b"\0")
        h.update(sha256_file(p).encode("ascii"))
    return h.hexdigest()


def write_run_dir(out: Path, cfg, command: str, artifacts, inputs=None) -> None:
    """Echo the config and record seed, version and artifact hashes."""
    from . import __version__
    from .config import dumps

    (out / CONFIG_ECHO).write_text(dumps(cfg), encoding="utf-8")
    meta = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "seed_source": cfg.seed_source,
        "threads": cfg.run.threads,
        "inputs": dict(inputs or {}),
        "artifacts": {str(Path(a).relative_to(out).as_posix()): sha256_file(a) for a in artifacts},
    }
    (out / RUN_META).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


# -- shared loading ---------------------------------------------------------------------


def _config(args):
    from .config import SEED_ENV, load, RunConfig

    cfg = load(args.config) if args.config else RunConfig()
    if not args.config and os.environ.get(SEED_ENV, "") != "":
        from .config import loads, dumps

        cfg = loads(dumps(cfg))
    if cfg.seed_source != "config":
        print(f"seed {cfg.seed} taken from {cfg.seed_source}", file=sys.stderr)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vocab(path):
    from .tokenizer import Vocab

    p = Path(path)
    if not p.is_file():
        raise CliError("input", f"vocabulary file not found: {p}")
    return Vocab.load(p)


def _cohort(data_dir):
    from .synth import load_cohort

    d = Path(data_dir)
    if not (d / "manifest.jsonl").is_file():
        raise CliError("input", f"no manifest.jsonl in dataset directory {d}")
    return load_cohort(d)


def _experiment(cfg, data_dir, vocab_path):
    from .experiments import prepare_data

    vocab = _vocab(vocab_path)
    patients = _cohort(data_dir)
    s = cfg.split
    try:
        return prepare_data(cfg.cohort, s.n_train, s.n_test, s.n_val, cfg.style, vocab, patients)
    except ValueError as e:
        raise CliError("config", str(e)) from None


def _load_model(path, vocab_path):
    from .fusion import CheckpointError, load_checkpoint

    try:
        model, meta = load_checkpoint(path)
    except (OSError, CheckpointError) as e:
        raise CliError("checkpoint", str(e)) from None
    want = meta.get("vocab_sha256")
    have = sha256_file(vocab_path)
    if want is not None and want != have:
        raise CliError("mismatch", f"checkpoint {path} was trained with a different vocabulary than {vocab_path}")
    vocab = _vocab(vocab_path)
    if model.cfg.decoder.vocab_size != len(vocab):
        raise CliError("mismatch", f"checkpoint vocab size {model.cfg.decoder.vocab_size} != {len(vocab)} tokens in "
                                   f"{vocab_path}")
    return model, meta


def _categories(text):
    from .synth import CATEGORIES

    if not text:
        return None
    cats = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in cats if c not in CATEGORIES]
    if bad:
        raise CliError("usage", f"unknown categories: {', '.join(bad)}")
    return cats


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synth import generate_cohort, serialize_cohort

    cfg = _config(args)
    out = _out_dir(args.out)
    manifest = serialize_cohort(generate_cohort(cfg.cohort), out)
    write_run_dir(out, cfg, "gen-data", [manifest])
    print(f"wrote {cfg.cohort.n_patients} patients to {out}")
    return 0


def cmd_build_vocab(args) -> int:
    from .dataset import corpus_texts
    from .tokenizer import build_vocab

    cfg = _config(args)
    patients = _cohort(args.data)
    vocab = build_vocab(corpus_texts(patients, cfg.cohort.tasks(), cfg.style), max_size=args.max_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    print(f"wrote {len(vocab)} tokens to {out}")
    return 0


def _validator(val_s, data):
    from .metrics import overall_auroc
    from .training import score_samples

    def val(m):
        return overall_auroc(score_samples(m, val_s, data.vocab), data.category_map)
    return val


def cmd_train(args) -> int:
    from .experiments import (MODES, decoder_state, model_from_backbone, new_model, samples_for)
    from .dataset import randomize_answers, split_by_category
    from .fusion import save_checkpoint
    from .training import StageOrderError, train_stage, write_loss_csv
    import numpy as np

    cfg = _config(args)
    data = _experiment(cfg, args.data, args.vocab)
    out = _out_dir(args.out)
    stage = args.stage
    scfg = cfg.stage(stage)
    categories = _categories(args.categories)
    mode = args.mode
    init_meta = {}
    if stage == 2 and not args.init:
        raise CliError("stage-order", "stage 2 requires --init pointing at a stage-1 checkpoint")
    if args.init:
        init, init_meta = _load_model(args.init, args.vocab)
        if stage == 2:
            if 1 not in init.stages:
                raise CliError("stage-order", f"--init {args.init} has not completed stage 1 (stages {init.stages})")
            model = init
            mode = mode or init_meta.get("mode", "full")
            if init_meta.get("mode", mode) != mode:
                raise CliError("mismatch", f"--mode {mode} differs from the stage-1 checkpoint's {init_meta['mode']}")
            categories = categories if categories is not None else init_meta.get("categories")
        elif stage == 1:
            model = model_from_backbone(decoder_state(init), cfg.model, data.vocab, cfg.seed)
        else:
            raise CliError("stage-order", "stage 0 starts from a fresh decoder and takes no --init")
    else:
        model = new_model(cfg.model, data.vocab, cfg.seed)
    mode = mode or "full"

    val_s = []
    if stage == 0:
        rng = np.random.default_rng([cfg.seed, 17])
        train_s = randomize_answers(samples_for(data, data.train, MODES["full"], with_answers=False), data.vocab, rng)
    else:
        train_s = samples_for(data, data.train, MODES[mode], categories)
        val_s = samples_for(data, data.val, MODES[mode], categories, with_answers=False)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    try:
        result = train_stage(model, split_by_category(train_s, data.bank), data.vocab, scfg, seed=cfg.seed,
                             val=_validator(val_s, data) if val_s else None, log=log)
    except StageOrderError as e:
        raise CliError("stage-order", str(e)) from None
    ckpt = out / CKPT_FILE
    extra = {"mode": mode, "categories": categories, "vocab_sha256": sha256_file(args.vocab)}
    save_checkpoint(ckpt, model, extra)
    loss = out / LOSS_FILE
    write_loss_csv(loss, result.losses)
    inputs = {"dataset": _dataset_hash(Path(args.data)), "vocab": sha256_file(args.vocab)}
    if args.init:
        inputs["init"] = sha256_file(args.init)
    write_run_dir(out, cfg, f"train --stage {stage}", [ckpt, loss], inputs)
    tail = f", best validation {result.best_val:.4f} at step {result.best_step}" if result.best_step > 0 else ""
    print(f"stage {stage} ({mode}) finished after {result.steps} steps{tail}; checkpoint {ckpt}")
    return 0


def _parse_models(specs, ckpt) -> dict:
    models = {}
    for spec in specs or []:
        key, sep, path = spec.partition("=")
        if not sep or not key or not path:
            raise CliError("usage", f"--model expects key=path, got {spec!r}")
        models[key] = path
    if ckpt and "full" not in models:
        models["full"] = ckpt
    return models


def _run_eval(args, plan=None) -> int:
    from .experiments import MODES, MissingModelError, evaluate_model, run_ablation
    from .metrics import write_report, write_scores

    cfg = _config(args)
    data = _experiment(cfg, args.data, args.vocab)
    out = _out_dir(args.out)
    artifacts = []
    inputs = {"dataset": _dataset_hash(Path(args.data)), "vocab": sha256_file(args.vocab)}
    n_boot = cfg.eval.n_boot
    if plan is None:
        if not args.ckpt:
            raise CliError("usage", "eval needs --ckpt (or --ablate with --model key=path)")
        model, meta = _load_model(args.ckpt, args.vocab)
        inputs["checkpoint"] = sha256_file(args.ckpt)
        mode = args.mode or meta.get("mode", "full")
        rows, rep = evaluate_model(model, data, MODES[mode], meta.get("categories"), n_boot=n_boot,
                                   seed=cfg.eval.boot_seed)
        rep.meta = {"mode": mode, "n_test": len(data.test), "seed": cfg.seed}
        write_scores(out / SCORES_FILE, rows)
        write_report(out / REPORT_FILE, rep)
        artifacts += [out / SCORES_FILE, out / REPORT_FILE]
        print(rep.table())
    else:
        paths = _parse_models(args.model, args.ckpt)
        models = {}
        for key, path in sorted(paths.items()):
            models[key], _ = _load_model(path, args.vocab)
            inputs[f"model:{key}"] = sha256_file(path)
        try:
            table = run_ablation(plan, models, data, n_boot=0, seed=cfg.eval.boot_seed)
        except MissingModelError as e:
            raise CliError("missing-checkpoint", e.args[0]) from None
        (out / ABLATION_FILE).write_text(table.to_json(), encoding="utf-8")
        artifacts.append(out / ABLATION_FILE)
        print(table.format())
    write_run_dir(out, cfg, "eval" if plan is None else f"ablate {plan}", artifacts, inputs)
    return 0


def cmd_eval(args) -> int:
    return _run_eval(args, args.ablate)


def cmd_ablate(args) -> int:
    return _run_eval(args, args.plan)


def cmd_predict(args) -> int:
    from .dataset import Sample, QaItem, QuestionBank
    from .ecg_encoder import patchify
    from .ecg_io import EcgFormatError, read_ecg
    from .prompting import AblationMask, EhrRecord, render_prompt
    from .synth import patient_from_json
    from .training import score_samples

    cfg = _config(args)
    model, meta = _load_model(args.ckpt, args.vocab)
    vocab = _vocab(args.vocab)
    if args.record is not None:
        try:
            rec = EhrRecord.from_dict(json.loads(args.record))
        except (ValueError, TypeError) as e:
            raise CliError("record", f"malformed EHR record: {e}") from None
        ecg = None
        if args.ecg and not args.no_ecg:
            try:
                ecg = read_ecg(args.ecg)
            except (OSError, EcgFormatError) as e:
                raise CliError("record", str(e)) from None
        sid = "inline"
    elif args.line is not None:
        try:
            p = patient_from_json(args.line, Path(args.root) if args.root else None)
        except (ValueError, KeyError, TypeError, OSError) as e:
            raise CliError("record", f"malformed manifest line: {e}") from None
        rec, ecg, sid = p.ehr, (None if args.no_ecg else p.ecg.samples), p.pid
    else:
        raise CliError("usage", "predict needs --record JSON or --line MANIFEST_LINE")
    if ecg is None and not args.no_ecg and meta.get("mode", "full") != "ehr":
        raise CliError("record", "no ECG given; pass --ecg FILE or --no-ecg")

    mask = AblationMask(include_ecg=not args.no_ecg)
    bank = QuestionBank(cfg.cohort.tasks(), vocab)
    task_ids = args.task or [t.task_id for t in bank.tasks]
    unknown = [t for t in task_ids if t not in bank.ids]
    if unknown:
        raise CliError("usage", f"unknown task ids: {', '.join(unknown)}")
    from .tokenizer import encode

    prefix = cfg.style.record_prefix(rec, mask)
    sample = Sample(sid, tuple(encode(prefix, vocab)), [QaItem(t, bank.ids[t]) for t in task_ids], ecg)
    print(f"prompt: {render_prompt(rec, mask, cfg.style.registry).text}")
    print(f"ecg_rows: {0 if ecg is None else len(patchify(ecg, model.cfg.encoder))}")
    for row in score_samples(model, [sample], vocab):
        answer = "Yes" if row.score >= 0.5 else "No"
        print(f"{row.subtask_id}\tanswer={answer}\tscore={row.score:.4f}")
    return 0


def cmd_report(args) -> int:
    from .metrics import AblationRow, AblationTable

    for path in args.paths:
        p = Path(path)
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise CliError("input", f"cannot read report {p}: {e}") from None
        if "plan" in d:
            rows = [AblationRow(r["name"], r["category_means"], r["overall"]) for r in d["rows"]]
            print(AblationTable(d["plan"], rows).format())
        elif "overall_auroc" in d:
            print(f"{p}")
            print(f"{'category':<14} {'mean AUROC':>10} {'robust':>7}")
            for c, v in d["category_means"].items():
                print(f"{c:<14} {v:>10.4f} {d['robust_counts'].get(c, 0):>7d}")
            print(f"{'overall':<14} {d['overall_auroc']:>10.4f} {d['robust_total']:>7d}")
        else:
            raise CliError("input", f"{p} is neither an evaluation report nor an ablation table")
    return 0


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="unipact", description="Prognostic question answering over synthetic ECG and EHR cohorts.")
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, for reproducibility)")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True, vocab=True):
        p.add_argument("--config", help="key=value config file with [section] headers")
        if data:
            p.add_argument("--data", required=True, help="dataset directory written by gen-data")
        if vocab:
            p.add_argument("--vocab", required=True, help="vocabulary file written by build-vocab")

    p = sub.add_parser("gen-data", help="generate and serialize a synthetic cohort")
    common(p, data=False, vocab=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="build the word-level vocabulary of a dataset")
    common(p, vocab=False)
    p.add_argument("--out", required=True, help="output vocabulary file")
    p.add_argument("--max-size", type=int, default=4096)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(0, 1, 2), required=True,
                   help="0 = decoder pretraining, 1 = projector alignment, 2 = LoRA fine-tuning")
    p.add_argument("--init", help="checkpoint to start from (stage 0 output for stage 1; stage 1 output for stage 2)")
    p.add_argument("--mode", choices=("full", "ecg", "ehr"), help="input modalities (default full)")
    p.add_argument("--categories", help="comma-separated task categories (default all)")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help="score the test split" if name == "eval" else "alias of eval --ablate")
        common(p)
        if name == "ablate":
            p.add_argument("plan", choices=("A", "B", "C"))
        else:
            p.add_argument("--ablate", choices=("A", "B", "C"))
        p.add_argument("--ckpt", help="checkpoint to evaluate (the full model for ablation plans)")
        p.add_argument("--model", action="append", metavar="KEY=PATH",
                       help="ablation model: ecg, ehr, full or single:<category>")
        p.add_argument("--mode", choices=("full", "ecg", "ehr"), help="override the checkpoint's input setting")
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("predict", help="answer prognostic questions for one patient")
    common(p, data=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--record", help="inline EHR record as JSON")
    p.add_argument("--ecg", help="ECG file (UPCT) for --record")
    p.add_argument("--line", help="one manifest line")
    p.add_argument("--root", help="dataset directory that --line's ECG path is relative to")
    p.add_argument("--task", action="append", help="task id (repeatable; default all)")
    p.add_argument("--no-ecg", action="store_true", help="drop the ECG segment (zero ECG rows)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="print tables from report or ablation JSON files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_report)
    return ap


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("usage", "--threads must be at least 1", 2)
        _limit_threads(args.threads)
        return args.func(args)
    except CliError as e:
        print(f"{ERROR_PREFIX}: {e.kind}: {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # any other failure still gets one parsable line
        from .config import ConfigError

        kind = "config" if isinstance(e, ConfigError) else type(e).__name__
        msg = str(e).replace("\n", " ")
        print(f"{ERROR_PREFIX}: {kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
