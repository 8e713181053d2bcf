"""AUROC, bootstrap intervals, category aggregation and the ablation tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import kernels

CATEGORY_ORDER = ("diagnosis", "deterioration", "icu", "mortality")
ROBUST_THRESHOLD = 0.8
MIN_CLASS_COUNT = 5


class DegenerateSetError(ValueError):
    pass


class UnmappedSubtaskError(KeyError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    y = y.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DegenerateSetError("AUROC needs at least one positive and one negative")
    return s, y, n_pos, y.size - n_pos


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC via average ranks (ties count one half)."""
    s, y, n_pos, n_neg = _check(scores, labels)
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_pairwise(scores, labels) -> float:
    """Exhaustive O(P*N) reference: fraction of positive/negative pairs ordered correctly."""
    s, y, n_pos, n_neg = _check(scores, labels)
    p = s[y][:, None]
    n = s[~y][None, :]
    wins = np.count_nonzero(p > n) + 0.5 * np.count_nonzero(p == n)
    return float(wins / (n_pos * n_neg))


def bootstrap_ci(scores, labels, n_boot: int = 1000, seed: int = 0, alpha: float = 0.05,
                 max_retries: int = 100) -> tuple:
    """Percentile bootstrap interval over sample-level resamples.

    Resamples that contain a single class are redrawn, at most
    ``max_retries`` rounds.
    """
    s, y, _, _ = _check(scores, labels)
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    values = bootstrap_distribution(s, y, n_boot, seed, max_retries)
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def bootstrap_distribution(scores, labels, n_boot: int, seed: int = 0, max_retries: int = 100) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    # tie groups by ascending score, shared by every resample
    uniq, group = np.unique(s, return_inverse=True)
    rng = np.random.default_rng(seed)
    n = s.size
    idx = rng.integers(0, n, size=(n_boot, n))
    out = kernels.bootstrap_aurocs(group.astype(np.int64), y.astype(np.uint8), len(uniq), idx)
    for _ in range(max_retries):
        bad = np.flatnonzero(np.isnan(out))
        if bad.size == 0:
            break
        idx = rng.integers(0, n, size=(bad.size, n))
        out[bad] = kernels.bootstrap_aurocs(group.astype(np.int64), y.astype(np.uint8), len(uniq), idx)
    if np.isnan(out).any():
        raise DegenerateSetError(f"bootstrap retry budget ({max_retries}) exhausted on single-class resamples")
    return out


@dataclass
class SubtaskResult:
    subtask_id: str
    category: str
    auroc: float
    ci_lo: float
    ci_hi: float
    n_pos: int
    n_neg: int

    @property
    def eligible(self) -> bool:
        return self.n_pos >= MIN_CLASS_COUNT and self.n_neg >= MIN_CLASS_COUNT

    @property
    def robust(self) -> bool:
        return self.eligible and self.ci_lo > ROBUST_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "subtask_id": self.subtask_id,
            "category": self.category,
            "auroc": self.auroc,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "robust": self.robust,
        }


@dataclass
class EvalReport:
    subtasks: list
    category_means: dict
    overall: float
    robust_counts: dict
    robust_total: int
    excluded: list
    bootstrap: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall_auroc": self.overall,
            "category_means": dict(self.category_means),
            "robust_counts": dict(self.robust_counts),
            "robust_total": self.robust_total,
            "excluded_from_robust": list(self.excluded),
            "bootstrap": dict(self.bootstrap),
            "subtasks": [r.to_dict() for r in self.subtasks],
            "meta": dict(self.meta),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        lines = [f"{'category':<14} {'mean AUROC':>10} {'robust':>7}"]
        for c, v in self.category_means.items():
            lines.append(f"{c:<14} {v:>10.4f} {self.robust_counts.get(c, 0):>7d}")
        lines.append(f"{'overall':<14} {self.overall:>10.4f} {self.robust_total:>7d}")
        return "\n".join(lines)


def _ordered_categories(cats) -> list:
    known = [c for c in CATEGORY_ORDER if c in cats]
    return known + sorted(c for c in cats if c not in CATEGORY_ORDER)


def aggregate(results: Sequence[SubtaskResult], category_map: dict, bootstrap: Optional[dict] = None) -> EvalReport:
    """Category means, macro-average overall, robust counts.

    ``category_map`` maps subtask id to category; an unmapped sub-task raises.
    """
    by_cat = {}
    for r in results:
        if r.subtask_id not in category_map:
            raise UnmappedSubtaskError(f"sub-task {r.subtask_id!r} has no category")
        by_cat.setdefault(category_map[r.subtask_id], []).append(r)
    if not by_cat:
        raise ValueError("no sub-task results to aggregate")
    cats = _ordered_categories(by_cat)
    ordered = []
    means = {}
    counts = {}
    for c in cats:
        rows = sorted(by_cat[c], key=lambda r: r.subtask_id)
        ordered += rows
        means[c] = float(np.mean([r.auroc for r in rows]))
        counts[c] = sum(r.robust for r in rows)
    overall = float(np.mean([means[c] for c in cats]))
    excluded = [r.subtask_id for r in ordered if not r.eligible]
    return EvalReport(ordered, means, overall, counts, sum(counts.values()), excluded, dict(bootstrap or {}))


def aggregate_values(category_values: dict) -> float:
    """Overall from ready category means (one synthetic sub-task per category)."""
    results = [SubtaskResult(c, c, float(v), float("nan"), float("nan"), 0, 0) for c, v in category_values.items()]
    return aggregate(results, {c: c for c in category_values}).overall


def relative_improvement(a: float, b: float, digits: Optional[int] = 1) -> float:
    """100 * (a - b) / b, rounded to ``digits`` decimals (None keeps full precision)."""
    if not b > 0:
        raise ValueError(f"baseline must be positive, got {b}")
    v = 100.0 * (a - b) / b
    return v if digits is None else round(v, digits)


def mean_sd(values: Sequence[float]) -> tuple:
    """Mean and sample SD (n-1) across category values, as in the ablation tables."""
    v = np.asarray(list(values), dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def evaluate_scores(rows: Sequence, category_map: dict, n_boot: int = 1000, seed: int = 0,
                    with_ci: bool = True) -> EvalReport:
    """Report from score rows (objects with subtask_id, score, label)."""
    per = {}
    for r in rows:
        per.setdefault(r.subtask_id, ([], []))
        per[r.subtask_id][0].append(r.score)
        per[r.subtask_id][1].append(r.label)
    results = []
    for k, tid in enumerate(sorted(per)):
        s, y = per[tid]
        y = np.asarray(y, dtype=np.int64)
        n_pos = int(y.sum())
        n_neg = int(y.size - n_pos)
        if n_pos == 0 or n_neg == 0:
            results.append(SubtaskResult(tid, category_map.get(tid, "?"), float("nan"), float("nan"), float("nan"),
                                         n_pos, n_neg))
            continue
        a = auroc(s, y)
        if with_ci:
            lo, hi = bootstrap_ci(s, y, n_boot, seed=seed + k)
        else:
            lo = hi = float("nan")
        results.append(SubtaskResult(tid, category_map.get(tid, "?"), a, lo, hi, n_pos, n_neg))
    valid = [r for r in results if not math.isnan(r.auroc)]
    rep = aggregate(valid, category_map, {"method": "percentile", "resamples": n_boot if with_ci else 0,
                                          "seed": seed, "level": 0.95})
    rep.excluded += [r.subtask_id for r in results if math.isnan(r.auroc)]
    return rep


def overall_auroc(rows: Sequence, category_map: dict) -> float:
    return evaluate_scores(rows, category_map, with_ci=False).overall


# -- files ------------------------------------------------------------------------

SCORE_HEADER = ("subtask_id", "sample_id", "score", "label")


def write_scores(path, rows: Sequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in rows:
            w.writerow([r.subtask_id, r.sample_id, f"{r.score:.17g}", "" if r.label is None else int(r.label)])


def read_scores(path) -> list:
    from .training import ScoreRow

    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != SCORE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SCORE_HEADER)}, got {','.join(header)}")
        for line in reader:
            tid, sid, score, label = line
            out.append(ScoreRow(tid, sid, float(score), int(label) if label != "" else None))
    return out


def write_report(path, report: EvalReport) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


# -- ablation tables ----------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    category_means: dict
    overall: float

    @property
    def mean_sd(self) -> tuple:
        return mean_sd(self.category_means.values())

    def to_dict(self) -> dict:
        m, sd = self.mean_sd
        return {"name": self.name, "category_means": dict(self.category_means), "overall": self.overall,
                "mean": m, "sd": sd}


@dataclass
class AblationTable:
    plan: str
    rows: list

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"plan": self.plan, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def format(self) -> str:
        cats = _ordered_categories({c for r in self.rows for c in r.category_means})
        head = f"{'configuration':<22}" + "".join(f"{c:>14}" for c in cats) + f"{'mean+-sd':>18}"
        lines = [f"plan {self.plan}", head]
        for r in self.rows:
            m, sd = r.mean_sd
            cells = "".join(f"{100 * r.category_means[c]:>14.2f}" if c in r.category_means else f"{'-':>14}"
                            for c in cats)
            lines.append(f"{r.name:<22}{cells}{f'{100 * m:.2f}+-{100 * sd:.2f}':>18}")
        return "\n".join(lines)


def table_row(name: str, report: EvalReport) -> AblationRow:
    return AblationRow(name, dict(report.category_means), report.overall)
