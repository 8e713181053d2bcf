"""Structured EHR records rendered as natural-language prompt text.

Each field group (demographics, vitals, biometrics) is rendered by a sentence
template of the form ``<header>: <fragment>, <fragment>, ... .`` where every
fragment carries exactly one ``{field}`` placeholder.  Fragments whose field
is absent are dropped, so a partially observed record still yields a
well-formed sentence.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

DEMOGRAPHIC_FIELDS = ("age", "race", "sex")
BIOMETRIC_FIELDS = ("bmi", "weight", "height")
VITAL_FIELDS = ("temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp", "pain")
NUMERIC_FIELDS = ("age",) + BIOMETRIC_FIELDS + VITAL_FIELDS

GROUP_FIELDS = {
    "demographics": DEMOGRAPHIC_FIELDS,
    "vitals": VITAL_FIELDS,
    "biometrics": BIOMETRIC_FIELDS,
}
# rendering order follows the reference prompt: demographics, vitals, biometrics
GROUP_ORDER = ("demographics", "vitals", "biometrics")

DEFAULT_TEMPLATES = {
    "demographics": "The demographics information: {age} year-old, {race}, {sex}.",
    "vitals": (
        "The vital parameters: temperature {temperature}, heartrate {heartrate}, "
        "resprate {resprate}, o2sat {o2sat}, sbp {sbp}, dbp {dbp}, pain {pain}."
    ),
    "biometrics": "The biometrics information: bmi {bmi}, weight {weight}, height {height}.",
}

ANSWER_INSTRUCTION = "Answer strictly with Yes or No."

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


class TemplateError(ValueError):
    pass


@dataclass
class EhrRecord:
    """Typed EHR fields; every field is independently optional."""

    age: Optional[float] = None
    race: Optional[str] = None
    sex: Optional[str] = None
    bmi: Optional[float] = None
    weight: Optional[float] = None
    height: Optional[float] = None
    temperature: Optional[float] = None
    heartrate: Optional[float] = None
    resprate: Optional[float] = None
    o2sat: Optional[float] = None
    sbp: Optional[float] = None
    dbp: Optional[float] = None
    pain: Optional[float] = None

    def __post_init__(self):
        for name in NUMERIC_FIELDS:
            v = getattr(self, name)
            if v is None:
                continue
            v = float(v)
            if not math.isfinite(v):
                raise ValueError(f"EHR field {name!r} is not finite: {v}")
            setattr(self, name, v)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EhrRecord":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EHR fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AblationMask:
    include_demographics: bool = True
    include_biometrics: bool = True
    include_vitals: bool = True
    include_ecg: bool = True
    include_ehr: bool = True

    def __post_init__(self):
        # dropping the whole EHR implies dropping each of its groups
        if not self.include_ehr:
            object.__setattr__(self, "include_demographics", False)
            object.__setattr__(self, "include_biometrics", False)
            object.__setattr__(self, "include_vitals", False)

    def includes(self, group: str) -> bool:
        return getattr(self, f"include_{group}")


FULL_MASK = AblationMask()


@dataclass
class PromptText:
    text: str
    # group -> (start, end) byte offsets into text.encode("utf-8")
    group_spans: dict = field(default_factory=dict)


def format_value(v) -> str:
    """One-decimal fixed point for numbers, verbatim for categories."""
    if isinstance(v, str):
        return v
    # explicit formatting keeps output locale independent
    return "%.1f" % float(v)


@dataclass(frozen=True)
class _SentenceTemplate:
    header: str
    fragments: tuple  # (field, fragment text with placeholder)
    suffix: str

    def render(self, values: dict) -> Optional[str]:
        parts = [
            frag.replace("{%s}" % name, format_value(values[name]))
            for name, frag in self.fragments
            if values.get(name) is not None
        ]
        if not parts:
            return None
        return f"{self.header} {', '.join(parts)}{self.suffix}"


def _parse_template(group: str, template: str) -> _SentenceTemplate:
    header, sep, body = template.partition(":")
    if not sep:
        raise TemplateError(f"template for {group!r} has no ':' header separator")
    body = body.strip()
    suffix = ""
    if body.endswith("."):
        body, suffix = body[:-1], "."
    fragments = []
    for frag in body.split(","):
        frag = frag.strip()
        names = _PLACEHOLDER.findall(frag)
        if len(names) != 1:
            raise TemplateError(
                f"fragment {frag!r} in {group!r} must contain exactly one placeholder"
            )
        fragments.append((names[0], frag))
    allowed = set(GROUP_FIELDS[group])
    bad = [n for n, _ in fragments if n not in allowed]
    if bad:
        raise TemplateError(f"template for {group!r} uses unknown fields {bad}")
    return _SentenceTemplate(header.strip() + ":", tuple(fragments), suffix)


class TemplateRegistry:
    """Group sentence templates, loadable from a ``key=value`` text file."""

    def __init__(self, templates: Optional[dict] = None):
        templates = dict(DEFAULT_TEMPLATES if templates is None else templates)
        missing = set(GROUP_ORDER) - set(templates)
        if missing:
            raise TemplateError(f"missing templates for groups {sorted(missing)}")
        self.raw = {g: templates[g] for g in GROUP_ORDER}
        self._parsed = {g: _parse_template(g, t) for g, t in self.raw.items()}

    @classmethod
    def load(cls, path) -> "TemplateRegistry":
        templates = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise TemplateError(f"{path}:{lineno}: expected key=value")
            key = key.strip()
            if key not in GROUP_FIELDS:
                raise TemplateError(f"{path}:{lineno}: unknown group {key!r}")
            templates[key] = value.strip()
        return cls(templates)

    def dump(self, path) -> None:
        lines = [f"{g}={self.raw[g]}" for g in GROUP_ORDER]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def sentence(self, group: str, rec: EhrRecord) -> Optional[str]:
        return self._parsed[group].render(rec.to_dict())


DEFAULT_REGISTRY = TemplateRegistry()


def render_prompt(
    rec: EhrRecord, mask: AblationMask = FULL_MASK, registry: TemplateRegistry = DEFAULT_REGISTRY
) -> PromptText:
    sentences = []
    spans = {}
    offset = 0
    for group in GROUP_ORDER:
        if not mask.includes(group):
            continue
        s = registry.sentence(group, rec)
        if s is None:
            continue
        if sentences:
            offset += 1  # joining space
        n = len(s.encode("utf-8"))
        spans[group] = (offset, offset + n)
        offset += n
        sentences.append(s)
    return PromptText(" ".join(sentences), spans)


def render_question(task_id: str, question_text: str) -> str:
    q = question_text.strip().rstrip("?").rstrip()
    if not q:
        raise ValueError(f"empty question for task {task_id!r}")
    return f"{q}? {ANSWER_INSTRUCTION}"


def assemble_full_text(role: str, task_desc: str, prompt: PromptText, question: str) -> str:
    parts = [role.strip(), task_desc.strip(), prompt.text, question.strip()]
    return " ".join(p for p in parts if p)
