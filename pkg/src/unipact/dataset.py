"""Turn cohorts into tokenised question-answering samples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .prompting import FULL_MASK, AblationMask, EhrRecord, TemplateRegistry, DEFAULT_REGISTRY, render_prompt, render_question
from .synth import CATEGORIES, Patient, Task
from .tokenizer import Vocab, encode

DEFAULT_ROLE = "You are a cardiology prognosis assistant."
DEFAULT_TASK_DESC = "Use the ECG and the health record to answer the question."


@dataclass(frozen=True)
class PromptStyle:
    role: str = DEFAULT_ROLE
    task_desc: str = DEFAULT_TASK_DESC
    registry: TemplateRegistry = DEFAULT_REGISTRY

    def prefix_text(self, patient: Patient, mask: AblationMask) -> str:
        return self.record_prefix(patient.ehr, mask)

    def record_prefix(self, rec: EhrRecord, mask: AblationMask) -> str:
        parts = [self.role.strip(), self.task_desc.strip(), render_prompt(rec, mask, self.registry).text]
        return " ".join(p for p in parts if p)


@dataclass(frozen=True)
class QaItem:
    task_id: str
    question_ids: tuple
    answer_id: Optional[int] = None  # None when only scoring
    label: Optional[int] = None


@dataclass
class Sample:
    """One patient context shared by one or more questions.

    ``prompt_ids`` covers role, task description and EHR prompt; each item
    appends its own question (and answer) after it.
    """

    sample_id: str
    prompt_ids: tuple
    items: list
    ecg: Optional[np.ndarray] = None  # raw (L, C) samples, or None for the w/o-ECG pathway
    meta: dict = field(default_factory=dict)


class QuestionBank:
    """Tokenised question text per task, computed once."""

    def __init__(self, tasks: Sequence[Task], vocab: Vocab):
        self.tasks = list(tasks)
        self.by_id = {t.task_id: t for t in self.tasks}
        self.ids = {t.task_id: tuple(encode(render_question(t.task_id, t.question), vocab)) for t in self.tasks}

    def category_of(self, task_id: str) -> str:
        return self.by_id[task_id].category


def answer_id(label: int, vocab: Vocab) -> int:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return vocab.yes_id if label == 1 else vocab.no_id


def make_samples(
    patients: Sequence[Patient],
    bank: QuestionBank,
    vocab: Vocab,
    mask: AblationMask = FULL_MASK,
    task_ids: Optional[Sequence[str]] = None,
    with_answers: bool = True,
    style: PromptStyle = PromptStyle(),
) -> list:
    """One sample per patient holding the questions for ``task_ids`` (default: all)."""
    task_ids = [t.task_id for t in bank.tasks] if task_ids is None else list(task_ids)
    out = []
    for p in patients:
        items = []
        for tid in task_ids:
            lab = int(p.labels[tid]) if tid in p.labels else None
            ans = answer_id(lab, vocab) if (with_answers and lab is not None) else None
            items.append(QaItem(tid, bank.ids[tid], ans, lab))
        ecg = p.ecg.samples if mask.include_ecg else None
        prompt_ids = tuple(encode(style.prefix_text(p, mask), vocab))
        out.append(Sample(p.pid, prompt_ids, items, ecg))
    return out


def split_by_category(samples: Sequence[Sample], bank: QuestionBank, categories: Iterable[str] = CATEGORIES) -> dict:
    """category -> samples restricted to that category's questions (empty categories dropped)."""
    out = {}
    for cat in categories:
        rows = []
        for s in samples:
            items = [it for it in s.items if bank.category_of(it.task_id) == cat]
            if items:
                rows.append(Sample(s.sample_id, s.prompt_ids, items, s.ecg, dict(s.meta)))
        if rows:
            out[cat] = rows
    return out


def randomize_answers(samples: Sequence[Sample], vocab: Vocab, rng: np.random.Generator) -> list:
    """Copies whose answers are fair coin flips, independent of any label."""
    out = []
    for s in samples:
        flips = rng.random(len(s.items)) < 0.5
        items = [QaItem(it.task_id, it.question_ids, vocab.yes_id if f else vocab.no_id, None)
                 for it, f in zip(s.items, flips)]
        out.append(Sample(s.sample_id, s.prompt_ids, items, None, dict(s.meta)))
    return out


def corpus_texts(patients: Sequence[Patient], tasks: Sequence[Task], style: PromptStyle = PromptStyle()) -> list:
    """Every string the models will read: prefixes, questions and the two answers."""
    texts = [style.prefix_text(p, FULL_MASK) for p in patients]
    texts += [render_question(t.task_id, t.question) for t in tasks]
    texts.append("Yes No")
    return texts
