"""Experiment orchestration: data preparation, staged training, ablation plans."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import (PromptStyle, QuestionBank, Sample, corpus_texts, make_samples, randomize_answers,
                      split_by_category)
from .fusion import FusionModel, ModelConfig, generate
from .metrics import AblationRow, AblationTable, EvalReport, evaluate_scores, overall_auroc, table_row
from .prompting import FULL_MASK, AblationMask
from .synth import CATEGORIES, CohortConfig, Patient, generate_cohort
from .tokenizer import Vocab, build_vocab
from .training import StageConfig, score_samples, train_stage

MODES = {
    "full": AblationMask(),
    "ecg": AblationMask(include_ehr=False),
    "ehr": AblationMask(include_ecg=False),
}

# test-time feature removal rows, in table order
FEATURE_ABLATIONS = (
    ("w/o demographics", AblationMask(include_demographics=False)),
    ("w/o biometrics", AblationMask(include_biometrics=False)),
    ("w/o vitals", AblationMask(include_vitals=False)),
    ("w/o ECG", AblationMask(include_ecg=False)),
    ("w/o EHR", AblationMask(include_ehr=False)),
    ("full model", AblationMask()),
)


class MissingModelError(KeyError):
    pass


@dataclass
class Schedule:
    """Stage hyperparameters for one model; stage 0 builds the shared backbone."""

    pretrain: StageConfig = field(default_factory=lambda: StageConfig(
        stage=0, lr=1e-3, epochs=2.0, batch_size=16, questions_per_row=6))
    stage1: StageConfig = field(default_factory=lambda: StageConfig(
        stage=1, lr=1e-3, epochs=0.5, batch_size=16, questions_per_row=8))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(
        stage=2, lr=2e-3, epochs=2.0, batch_size=16, questions_per_row=8, eval_every=450))


@dataclass
class ExperimentData:
    train: list
    val: list
    test: list
    vocab: Vocab
    bank: QuestionBank
    style: PromptStyle
    cohort_cfg: CohortConfig

    @property
    def category_map(self) -> dict:
        return {t.task_id: t.category for t in self.bank.tasks}

    def task_ids(self, categories: Optional[Sequence[str]] = None) -> list:
        return [t.task_id for t in self.bank.tasks if categories is None or t.category in categories]


def prepare_data(cohort_cfg: CohortConfig, n_train: int, n_test: int, n_val: int = 200,
                 style: PromptStyle = PromptStyle(), vocab: Optional[Vocab] = None,
                 patients: Optional[Sequence[Patient]] = None) -> ExperimentData:
    """Split a cohort into train/val/test (in patient order) and build the vocabulary.

    The vocabulary covers the text of every patient: it is label-free and
    guarantees no numeric literal falls back to UNK at test time.
    """
    if patients is None:
        patients = generate_cohort(replace(cohort_cfg, n_patients=n_train + n_test))
    patients = list(patients)
    if len(patients) < n_train + n_test:
        raise ValueError(f"cohort has {len(patients)} patients, need {n_train + n_test}")
    if not 0 <= n_val < n_train:
        raise ValueError("n_val must be smaller than n_train")
    tasks = cohort_cfg.tasks()
    if vocab is None:
        vocab = build_vocab(corpus_texts(patients, tasks, style))
    bank = QuestionBank(tasks, vocab)
    fit = patients[:n_train - n_val]
    val = patients[n_train - n_val:n_train]
    test = patients[n_train:n_train + n_test]
    return ExperimentData(fit, val, test, vocab, bank, style, cohort_cfg)


def new_model(model_cfg: ModelConfig, vocab: Vocab, seed: int) -> FusionModel:
    dec = replace(model_cfg.decoder, vocab_size=len(vocab))
    return FusionModel(replace(model_cfg, decoder=dec), seed=seed)


def pretrain_backbone(data: ExperimentData, model_cfg: ModelConfig, cfg: StageConfig, seed: int = 0,
                      log: Optional[Callable[[str], None]] = None) -> tuple:
    """Stage 0: next-token training of the decoder on label-free prompt text.

    Answers in this text are fair coin flips, so the decoder learns the
    answer format without seeing any outcome.  Returns (model, result).
    """
    model = new_model(model_cfg, data.vocab, seed)
    rng = np.random.default_rng([seed, 17])
    samples = make_samples(data.train, data.bank, data.vocab, with_answers=False, style=data.style)
    samples = randomize_answers(samples, data.vocab, rng)
    datasets = split_by_category(samples, data.bank)
    result = train_stage(model, datasets, data.vocab, cfg, seed=seed, log=log)
    return model, result


def decoder_state(model: FusionModel) -> dict:
    return {n: p.data.copy() for n, p in model.decoder.named_parameters()}


def model_from_backbone(backbone: dict, model_cfg: ModelConfig, vocab: Vocab, seed: int) -> FusionModel:
    """Fresh encoder and projector (seeded) around a copy of a pretrained decoder."""
    model = new_model(model_cfg, vocab, seed)
    for name, p in model.decoder.named_parameters():
        if name not in backbone or backbone[name].shape != p.shape:
            raise ValueError(f"backbone is missing or mis-shaped at {name}")
        p.data = backbone[name].copy()
    model.stages = [0]
    return model


def samples_for(data: ExperimentData, patients, mask: AblationMask, categories=None, with_answers=True) -> list:
    return make_samples(patients, data.bank, data.vocab, mask, data.task_ids(categories), with_answers, data.style)


def evaluate_model(model: FusionModel, data: ExperimentData, mask: AblationMask = FULL_MASK,
                   categories: Optional[Sequence[str]] = None, patients=None, n_boot: int = 1000,
                   seed: int = 0, with_ci: bool = True) -> tuple:
    """Score ``patients`` (default: test split) -> (score rows, EvalReport)."""
    patients = data.test if patients is None else patients
    samples = samples_for(data, patients, mask, categories, with_answers=False)
    rows = score_samples(model, samples, data.vocab)
    rep = evaluate_scores(rows, data.category_map, n_boot=n_boot, seed=seed, with_ci=with_ci)
    return rows, rep


def train_model(backbone: dict, data: ExperimentData, model_cfg: ModelConfig, schedule: Schedule,
                mode: str = "full", categories: Optional[Sequence[str]] = None, seed: int = 0,
                log: Optional[Callable[[str], None]] = None) -> tuple:
    """Stage 1 then stage 2 on one modality setting and task subset -> (model, [results])."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {sorted(MODES)}, got {mode!r}")
    mask = MODES[mode]
    model = model_from_backbone(backbone, model_cfg, data.vocab, seed)
    train_s = samples_for(data, data.train, mask, categories)
    val_s = samples_for(data, data.val, mask, categories, with_answers=False)
    datasets = split_by_category(train_s, data.bank)

    def val(m):
        return overall_auroc(score_samples(m, val_s, data.vocab), data.category_map)

    results = []
    for cfg in (schedule.stage1, schedule.stage2):
        results.append(train_stage(model, datasets, data.vocab, cfg, seed=seed, val=val if data.val else None,
                                   log=log))
    return model, results


def run_ablation(plan: str, models: dict, data: ExperimentData, n_boot: int = 0, seed: int = 0) -> AblationTable:
    """Evaluate the model set a plan needs on the test split.

    * ``A``: models ``ecg``, ``ehr`` and ``full``, each with its own inputs.
    * ``B``: single-category models ``single:<category>`` and ``full``.
    * ``C``: model ``full`` with one input component removed at test time.
    """
    plan = plan.upper()
    with_ci = n_boot > 0

    def need(key):
        if key not in models:
            raise MissingModelError(f"plan {plan} needs a model for cell {key!r}")
        return models[key]

    def report(model, mask, cats=None) -> EvalReport:
        return evaluate_model(model, data, mask, cats, n_boot=max(n_boot, 1), seed=seed, with_ci=with_ci)[1]

    rows = []
    if plan == "A":
        for key, name in (("ecg", "ECG-only"), ("ehr", "EHR-only"), ("full", "multimodal")):
            rows.append(table_row(name, report(need(key), MODES[key])))
    elif plan == "B":
        means = {}
        for cat in CATEGORIES:
            rep = report(need(f"single:{cat}"), FULL_MASK, [cat])
            means[cat] = rep.category_means[cat]
        rows.append(AblationRow("single-task", means, float(np.mean(list(means.values())))))
        rows.append(table_row("multi-task", report(need("full"), FULL_MASK)))
    elif plan == "C":
        full = need("full")
        for name, mask in FEATURE_ABLATIONS:
            rows.append(table_row(name, report(full, mask)))
    else:
        raise ValueError(f"unknown ablation plan {plan!r}; expected A, B or C")
    return AblationTable(plan, rows)


@dataclass
class OverfitResult:
    steps: int
    final_loss: float
    correct: int
    n: int
    seconds: float


def overfit_run(n: int = 32, max_steps: int = 500, target_loss: float = 0.05, seed: int = 0,
                model_cfg: ModelConfig = ModelConfig(), log: Optional[Callable[[str], None]] = None) -> OverfitResult:
    """Memorise ``n`` single-question samples through the staged pipeline.

    A short stage 0 on the same patients stands in for the pretrained
    backbone; stage 2 then runs until the trailing loss drops below
    ``target_loss`` or ``max_steps`` is reached.  Answers are checked by
    greedy decoding.
    """
    t0 = time.time()
    cohort = CohortConfig(n_patients=n, seed=seed)
    data = prepare_data(cohort, n, 0, n_val=0)
    pre = StageConfig(stage=0, lr=1e-3, epochs=40.0, batch_size=8, max_steps=150, questions_per_row=4)
    backbone, _ = pretrain_backbone(data, model_cfg, pre, seed=seed)
    model = model_from_backbone(decoder_state(backbone), model_cfg, data.vocab, seed)
    full = samples_for(data, data.train, FULL_MASK)
    # one question per patient, cycling through the tasks
    samples = [Sample(s.sample_id, s.prompt_ids, [s.items[i % len(s.items)]], s.ecg) for i, s in enumerate(full)]
    train_stage(model, samples, data.vocab, StageConfig(stage=1, lr=1e-3, epochs=1.0, batch_size=8), seed=seed)
    cfg = StageConfig(stage=2, lr=3e-3, epochs=float(max_steps), batch_size=8, max_steps=max_steps,
                      target_loss=target_loss)
    res = train_stage(model, samples, data.vocab, cfg, seed=seed, log=log)
    correct = 0
    for s in samples:
        it = s.items[0]
        f = model.assemble(s.ecg, s.prompt_ids, it.question_ids)
        correct += generate(f, model, data.vocab) == ("Yes" if it.label else "No")
    final = float(np.mean([x[2] for x in res.losses[-10:]]))
    return OverfitResult(res.steps, final, correct, len(samples), time.time() - t0)


@dataclass
class ModalityRun:
    mode: str
    model: FusionModel
    report: EvalReport
    oracle: float
    seconds: float


def modality_experiment(data: ExperimentData, model_cfg: ModelConfig = ModelConfig(),
                        schedule: Schedule = Schedule(), modes: Sequence[str] = ("full", "ecg", "ehr"),
                        seed: int = 0, log: Optional[Callable[[str], None]] = None) -> tuple:
    """Pretrain one backbone, then train and test one model per input setting.

    Returns ``({mode: ModalityRun}, backbone_seconds)``; each run carries the
    Bayes-oracle AUROC of the test split restricted to the same modalities.
    """
    from .synth import oracle_overall

    t0 = time.time()
    backbone, _ = pretrain_backbone(data, model_cfg, schedule.pretrain, seed=seed, log=log)
    state = decoder_state(backbone)
    pre_s = time.time() - t0
    runs = {}
    for mode in modes:
        t1 = time.time()
        model, _ = train_model(state, data, model_cfg, schedule, mode, seed=seed, log=log)
        _, rep = evaluate_model(model, data, MODES[mode], with_ci=False)
        oracle = oracle_overall(data.test, data.cohort_cfg, [mode])
        runs[mode] = ModalityRun(mode, model, rep, oracle, time.time() - t1)
    return runs, pre_s
