"""Seeded synthetic cohorts with planted cross-modal signal.

Every patient carries four standard-normal latents: ``ecg`` (waveform
morphology), ``vitals``, ``demographics`` and ``biometrics``.  Observed
fields are noisy functions of exactly one latent each, and each task label
is drawn from a logistic model over the latents, then flipped with
probability ``label_noise``.  Because labels depend on latents rather than on
observed features, :func:`bayes_oracle_auroc` gives an exact ceiling for any
subset of modalities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ecg_io import N_LEADS, EcgSignal, read_ecg, write_ecg
from .prompting import EhrRecord

CATEGORIES = ("diagnosis", "deterioration", "icu", "mortality")
LATENTS = ("ecg", "vitals", "demographics", "biometrics")
MODALITY_ALIASES = {
    "ehr": ("vitals", "demographics", "biometrics"),
    "all": LATENTS,
    "full": LATENTS,
}

_DIAGNOSES = (
    "atrial fibrillation",
    "heart failure",
    "acute myocardial infarction",
    "unstable angina",
    "pulmonary embolism",
    "acute kidney injury",
    "sepsis",
    "pneumonia",
    "hypertensive crisis",
    "ventricular tachycardia",
    "cardiomyopathy",
    "aortic stenosis",
)
_DETERIORATION = (
    "severe hypoxemia",
    "cardiac arrest",
    "mechanical ventilation",
    "vasopressor support",
    "inotropic support",
    "ECMO support",
)
_ICU = ("ICU admission within 24 hours", "ICU admission within 7 days")
_MORTALITY = ("1 day", "7 days", "28 days", "90 days", "180 days", "365 days", "hospital stay")


@dataclass(frozen=True)
class Task:
    task_id: str
    category: str
    question: str


def default_tasks(n_diagnosis: int = 12) -> list:
    """12 diagnosis, 6 deterioration, 2 ICU and 7 mortality sub-tasks."""
    if not 1 <= n_diagnosis <= len(_DIAGNOSES):
        raise ValueError(f"n_diagnosis must be in [1, {len(_DIAGNOSES)}]")
    tasks = []
    for i, name in enumerate(_DIAGNOSES[:n_diagnosis]):
        tasks.append(Task(f"diag_{i:02d}", "diagnosis", f"Will the patient be diagnosed with {name}"))
    for i, name in enumerate(_DETERIORATION):
        tasks.append(Task(f"det_{i:02d}", "deterioration", f"Will the patient experience {name}"))
    for i, name in enumerate(_ICU):
        tasks.append(Task(f"icu_{i:02d}", "icu", f"Will the patient require {name}"))
    for i, name in enumerate(_MORTALITY):
        when = f"within {name}" if name[0].isdigit() else f"during the {name}"
        tasks.append(Task(f"mort_{i:02d}", "mortality", f"Will the patient die {when}"))
    return tasks


@dataclass
class CohortConfig:
    n_patients: int = 2500
    seed: int = 42
    beta_ecg: float = 1.0
    beta_vitals: float = 1.0
    beta_demo: float = 0.5
    beta_bio: float = 0.5
    # per-task multiplicative jitter on the betas, uniform in [1-h, 1+h]
    task_heterogeneity: float = 0.25
    label_noise: float = 0.1
    missing_rate: float = 0.02
    sample_rate: float = 100.0
    duration: float = 10.0
    n_leads: int = N_LEADS
    n_diagnosis: int = 12
    # optional per-category overrides: category -> {latent: beta}
    category_betas: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("beta_ecg", "beta_vitals", "beta_demo", "beta_bio", "task_heterogeneity"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must be in [0, 0.5), got {self.label_noise}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        if self.n_patients < 0:
            raise ValueError("n_patients must be non-negative")
        if self.n_leads != N_LEADS:
            raise ValueError(f"only {N_LEADS}-lead ECGs are supported")
        for cat, d in self.category_betas.items():
            if cat not in CATEGORIES:
                raise ValueError(f"unknown category {cat!r} in category_betas")
            for k in d:
                if k not in LATENTS:
                    raise ValueError(f"unknown latent {k!r} in category_betas[{cat!r}]")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration))

    def tasks(self) -> list:
        return default_tasks(self.n_diagnosis)

    def task_betas(self) -> dict:
        """task_id -> {latent: beta}, deterministic in the seed."""
        base = {
            "ecg": self.beta_ecg,
            "vitals": self.beta_vitals,
            "demographics": self.beta_demo,
            "biometrics": self.beta_bio,
        }
        rng = np.random.default_rng([self.seed, 7])
        h = self.task_heterogeneity
        out = {}
        for t in self.tasks():
            b = dict(base)
            b.update(self.category_betas.get(t.category, {}))
            jitter = rng.uniform(1.0 - h, 1.0 + h, size=len(LATENTS))
            out[t.task_id] = {k: float(b[k] * j) for k, j in zip(LATENTS, jitter)}
        return out


@dataclass
class Patient:
    pid: str
    ehr: EhrRecord
    ecg: EcgSignal
    latents: dict
    labels: dict

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Patient)
            and self.pid == other.pid
            and self.ehr == other.ehr
            and self.latents == other.latents
            and self.labels == other.labels
            and self.ecg.sample_rate == other.ecg.sample_rate
            and np.array_equal(self.ecg.samples, other.ecg.samples)
        )


RACES = ("white", "black African American", "Hispanic Latino", "Asian", "other")
_RACE_P = (0.55, 0.2, 0.12, 0.08, 0.05)

# (mean, sd, loading on the vitals latent, lo, hi, resolution)
_VITAL_MODEL = {
    "temperature": (37.0, 0.6, 0.85, 35.0, 41.0, 0.1),
    "heartrate": (84.0, 14.0, 0.3, 40.0, 180.0, 1.0),
    "resprate": (18.0, 3.5, 0.85, 8.0, 40.0, 1.0),
    "o2sat": (96.0, 2.2, -0.85, 80.0, 100.0, 1.0),
    "sbp": (132.0, 18.0, -0.8, 70.0, 220.0, 1.0),
    "dbp": (76.0, 11.0, -0.8, 40.0, 130.0, 1.0),
    "pain": (4.0, 2.4, 0.8, 0.0, 10.0, 1.0),
}
VITAL_RANGES = {k: (v[3], v[4]) for k, v in _VITAL_MODEL.items()}

# Gaussian beat components: (offset s, width s, amplitude); T offset scales with RR.
_WAVES = {
    "P": (-0.20, 0.025, 0.12),
    "Q": (-0.035, 0.010, -0.12),
    "R": (0.0, 0.013, 1.0),
    "S": (0.035, 0.012, -0.25),
    "T": (0.30, 0.055, 0.35),
}
# per-lead polarity/gain: I II III aVR aVL aVF V1 V2 V3 V4 V5 V6
_LEAD_GAIN = {
    "P": np.array([0.6, 1.0, 0.4, -0.8, 0.2, 0.7, 0.3, 0.5, 0.5, 0.6, 0.6, 0.5]),
    "Q": np.array([0.5, 0.8, 0.4, -0.5, 0.3, 0.6, 0.0, 0.2, 0.4, 0.6, 0.8, 0.8]),
    "R": np.array([0.9, 1.3, 0.5, -1.0, 0.5, 0.8, 0.35, 0.7, 1.0, 1.4, 1.3, 1.0]),
    "S": np.array([0.3, 0.5, 0.4, 0.2, 0.4, 0.4, 1.6, 1.5, 1.0, 0.6, 0.3, 0.2]),
    "T": np.array([0.7, 1.0, 0.4, -0.8, 0.4, 0.7, 0.3, 0.9, 1.0, 1.0, 0.9, 0.7]),
}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _round_to(x: float, res: float) -> float:
    return round(round(x / res) * res, 1)


def synth_ecg(rng: np.random.Generator, heartrate: float, z_ecg: float, n: int, fs: float) -> np.ndarray:
    """Sinus-like beat train at ``heartrate`` with T-wave polarity set by ``z_ecg``.

    High ``z_ecg`` flattens then inverts the T wave; low ``z_ecg`` gives a tall
    upright T.  Returns float32 (n, 12) millivolts.
    """
    t = np.arange(n) / fs
    rr = 60.0 / heartrate
    beats = []
    b = rng.uniform(-rr, 0.0)
    while b < t[-1] + 0.5:
        beats.append(b)
        b += rr * (1.0 + 0.03 * rng.standard_normal())
    beats = np.asarray(beats)[:, None]
    t_amp = 1.0 - 2.0 * _sigmoid(1.2 * z_ecg)
    lead_jitter = 1.0 + 0.1 * rng.standard_normal(N_LEADS)
    sig = np.zeros((n, N_LEADS))
    for name, (off, width, amp) in _WAVES.items():
        if name == "T":
            off = off * np.sqrt(rr)
            amp = amp * t_amp
        train = np.exp(-0.5 * ((t[None, :] - beats - off) / width) ** 2).sum(axis=0)
        sig += amp * np.outer(train, _LEAD_GAIN[name])
    sig *= lead_jitter
    wander_f = rng.uniform(0.15, 0.4)
    wander = 0.05 * np.sin(2 * np.pi * wander_f * t + rng.uniform(0, 2 * np.pi))
    sig += wander[:, None] + 0.02 * rng.standard_normal(sig.shape)
    return sig.astype(np.float32)


def _patient(rng: np.random.Generator, pid: str, cfg: CohortConfig, tasks, betas) -> Patient:
    z = {k: float(rng.standard_normal()) for k in LATENTS}

    def noisy(z_lat, loading):
        return loading * z_lat + np.sqrt(1.0 - loading**2) * rng.standard_normal()

    # demographics
    age = float(np.clip(_round_to(62.0 + 15.0 * noisy(z["demographics"], 0.95), 1.0), 18.0, 95.0))
    sex = "male" if rng.random() < _sigmoid(0.4 * z["demographics"]) else "female"
    race = str(RACES[rng.choice(len(RACES), p=_RACE_P)])
    # biometrics
    height = 170.0 + (6.0 if sex == "male" else -6.0) + 7.0 * rng.standard_normal()
    height = float(np.clip(_round_to(height, 1.0), 145.0, 205.0))
    bmi_true = float(np.clip(27.5 + 5.0 * noisy(z["biometrics"], 0.95), 15.0, 55.0))
    weight = float(np.clip(_round_to(bmi_true * (height / 100.0) ** 2, 1.0), 35.0, 200.0))
    bmi = _round_to(weight / (height / 100.0) ** 2, 0.1)
    # vitals
    vit = {}
    for name, (mu, sd, load, lo, hi, res) in _VITAL_MODEL.items():
        vit[name] = float(np.clip(_round_to(mu + sd * noisy(z["vitals"], abs(load)) * np.sign(load), res), lo, hi))

    values = dict(age=age, race=race, sex=sex, bmi=bmi, weight=weight, height=height, **vit)
    drop = rng.random(len(values)) < cfg.missing_rate
    values = {k: (None if d else v) for (k, v), d in zip(values.items(), drop)}
    ehr = EhrRecord(**values)

    ecg = EcgSignal(synth_ecg(rng, vit["heartrate"], z["ecg"], cfg.n_samples, cfg.sample_rate), cfg.sample_rate)

    labels = {}
    u = rng.random((len(tasks), 2))
    for (t, (u_lab, u_flip)) in zip(tasks, u):
        logit = sum(betas[t.task_id][k] * z[k] for k in LATENTS)
        y = int(u_lab < _sigmoid(logit))
        if u_flip < cfg.label_noise:
            y = 1 - y
        labels[t.task_id] = y
    return Patient(pid, ehr, ecg, z, labels)


def generate_cohort(cfg: CohortConfig, start: int = 0) -> list:
    """Patients ``start .. start+n_patients-1``; each has an independent derived seed."""
    tasks = cfg.tasks()
    betas = cfg.task_betas()
    out = []
    for i in range(start, start + cfg.n_patients):
        rng = np.random.default_rng([cfg.seed, 1, i])
        out.append(_patient(rng, f"P{i:05d}", cfg, tasks, betas))
    return out


def resolve_modalities(subset: Sequence[str]) -> tuple:
    keys = set()
    for m in subset:
        if m in MODALITY_ALIASES:
            keys.update(MODALITY_ALIASES[m])
        elif m in LATENTS:
            keys.add(m)
        else:
            raise ValueError(f"unknown modality {m!r}")
    return tuple(k for k in LATENTS if k in keys)


def oracle_scores(cohort: Sequence[Patient], betas: dict, subset: Sequence[str]) -> np.ndarray:
    keep = resolve_modalities(subset)
    return np.array([sum(betas[k] * p.latents[k] for k in keep) for p in cohort], dtype=np.float64)


def bayes_oracle_auroc(cohort: Sequence[Patient], cfg: CohortConfig, task_id: str, subset: Sequence[str]) -> float:
    """AUROC of the true logit with latents outside ``subset`` zeroed."""
    from .metrics import auroc

    betas = cfg.task_betas()
    if task_id not in betas:
        raise KeyError(f"unknown task {task_id!r}")
    scores = oracle_scores(cohort, betas[task_id], subset)
    labels = np.array([p.labels[task_id] for p in cohort])
    return auroc(scores, labels)


def oracle_overall(cohort: Sequence[Patient], cfg: CohortConfig, subset: Sequence[str]) -> float:
    """Macro-average over categories of per-task oracle AUROCs."""
    per_cat = {c: [] for c in CATEGORIES}
    for t in cfg.tasks():
        per_cat[t.category].append(bayes_oracle_auroc(cohort, cfg, t.task_id, subset))
    return float(np.mean([np.mean(v) for v in per_cat.values() if v]))


# --- serialization -----------------------------------------------------------

MANIFEST = "manifest.jsonl"


def patient_to_json(p: Patient, ecg_relpath: str) -> str:
    row = {
        "id": p.pid,
        "ehr": p.ehr.to_dict(),
        "labels": p.labels,
        "latents": p.latents,
        "sample_rate": p.ecg.sample_rate,
        "ecg": ecg_relpath,
    }
    return json.dumps(row, ensure_ascii=False)


def serialize_cohort(cohort: Sequence[Patient], out_dir) -> Path:
    out_dir = Path(out_dir)
    ecg_dir = out_dir / "ecg"
    try:
        ecg_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for p in cohort:
            rel = f"ecg/{p.pid}.upct"
            write_ecg(out_dir / rel, p.ecg.samples)
            lines.append(patient_to_json(p, rel))
        manifest = out_dir / MANIFEST
        manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as e:
        raise OSError(f"failed writing cohort to {out_dir}: {e}") from e
    return manifest


def patient_from_json(line: str, root: Optional[Path] = None) -> Patient:
    row = json.loads(line)
    ecg_path = Path(row["ecg"])
    if root is not None and not ecg_path.is_absolute():
        ecg_path = root / ecg_path
    samples = read_ecg(ecg_path)
    return Patient(
        row["id"],
        EhrRecord.from_dict(row["ehr"]),
        EcgSignal(samples, row.get("sample_rate", 100.0)),
        dict(row["latents"]),
        {k: int(v) for k, v in row["labels"].items()},
    )


def load_cohort(data_dir) -> list:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read manifest {manifest}: {e}") from e
    return [patient_from_json(line, data_dir) for line in text.splitlines() if line.strip()]
