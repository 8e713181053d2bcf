import json
from dataclasses import replace

import numpy as np
import pytest

from unipact.metrics import auroc
from unipact.prompting import EhrRecord
from unipact.synth import (
    CATEGORIES,
    LATENTS,
    VITAL_RANGES,
    CohortConfig,
    bayes_oracle_auroc,
    default_tasks,
    generate_cohort,
    load_cohort,
    oracle_overall,
    serialize_cohort,
)

# short recordings keep large cohorts cheap; labels and latents do not depend on length
FAST = CohortConfig(duration=0.5)


@pytest.fixture(scope="module")
def big():
    return generate_cohort(replace(FAST, n_patients=10_000))


def test_task_registry_counts():
    counts = {c: sum(t.category == c for t in default_tasks()) for c in CATEGORIES}
    assert counts == {"diagnosis": 12, "deterioration": 6, "icu": 2, "mortality": 7}
    assert len({t.task_id for t in default_tasks()}) == 27


def test_config_validation():
    with pytest.raises(ValueError):
        CohortConfig(label_noise=0.5)
    with pytest.raises(ValueError):
        CohortConfig(beta_ecg=float("inf"))
    with pytest.raises(ValueError):
        CohortConfig(category_betas={"oncology": {}})
    with pytest.raises(ValueError):
        CohortConfig(category_betas={"icu": {"genes": 1.0}})


def test_same_seed_same_bytes(tmp_path):
    cfg = replace(FAST, n_patients=20)
    serialize_cohort(generate_cohort(cfg), tmp_path / "a")
    serialize_cohort(generate_cohort(cfg), tmp_path / "b")
    for rel in ["manifest.jsonl"] + [f"ecg/P{i:05d}.upct" for i in range(20)]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_round_trip(tmp_path):
    cohort = generate_cohort(replace(FAST, n_patients=15))
    manifest = serialize_cohort(cohort, tmp_path)
    lines = manifest.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 15
    assert list(json.loads(lines[0])) == ["id", "ehr", "labels", "latents", "sample_rate", "ecg"]
    assert load_cohort(tmp_path) == cohort


def test_empty_cohort(tmp_path):
    manifest = serialize_cohort(generate_cohort(replace(FAST, n_patients=0)), tmp_path)
    assert manifest.read_text() == ""
    assert list((tmp_path / "ecg").iterdir()) == []


def test_prefix_stability():
    # patient i does not depend on cohort size
    a = generate_cohort(replace(FAST, n_patients=5))
    b = generate_cohort(replace(FAST, n_patients=8))
    assert a == b[:5]


def test_vitals_inside_ranges(big):
    for p in big[:2000]:
        for name, (lo, hi) in VITAL_RANGES.items():
            v = getattr(p.ehr, name)
            assert v is None or lo <= v <= hi


def test_heartrate_drives_beat_rate():
    cfg = replace(CohortConfig(), n_patients=60, missing_rate=0.0)
    hr, peaks = [], []
    for p in generate_cohort(cfg):
        lead = p.ecg.samples[:, 1]
        thr = 0.6 * lead.max()
        up = np.flatnonzero((lead[1:] > thr) & (lead[:-1] <= thr))
        hr.append(p.ehr.heartrate)
        peaks.append(len(up))
    assert np.corrcoef(hr, peaks)[0, 1] > 0.8


def test_noise_free_strong_signal_is_separable():
    cfg = replace(FAST, n_patients=3000, label_noise=0.0, beta_ecg=20.0, beta_vitals=20.0, beta_demo=20.0,
                  beta_bio=20.0, task_heterogeneity=0.0)
    cohort = generate_cohort(cfg)
    assert bayes_oracle_auroc(cohort, cfg, "mort_00", ["full"]) > 0.97


def test_zero_beta_modality_is_uninformative(big):
    cfg = replace(FAST, beta_ecg=0.0)
    cohort = generate_cohort(replace(cfg, n_patients=10_000))
    a = bayes_oracle_auroc(cohort, cfg, "diag_00", ["ecg"])
    assert a == 0.5  # every score is zero
    # a probe on the ECG latent itself finds nothing either
    lat = np.array([p.latents["ecg"] for p in cohort])
    y = np.array([p.labels["diag_00"] for p in cohort])
    assert abs(auroc(lat, y) - 0.5) < 0.03


def test_empty_subset_is_chance(big):
    assert bayes_oracle_auroc(big, FAST, "det_00", []) == 0.5


def test_unknown_task(big):
    with pytest.raises(KeyError):
        bayes_oracle_auroc(big[:10], FAST, "nope", ["ecg"])
    with pytest.raises(ValueError):
        bayes_oracle_auroc(big[:10], FAST, "det_00", ["genome"])


def test_full_dominates_subsets(big):
    for task in ("diag_00", "det_01", "icu_00", "mort_03"):
        full = bayes_oracle_auroc(big, FAST, task, ["full"])
        for subset in (["ecg"], ["vitals"], ["ehr"], ["ecg", "vitals"], ["demographics"]):
            assert full >= bayes_oracle_auroc(big, FAST, task, subset) - 0.01


def test_modality_complementarity(big):
    full = oracle_overall(big, FAST, ["full"])
    assert full >= oracle_overall(big, FAST, ["ecg"]) + 0.02
    assert full >= oracle_overall(big, FAST, ["ehr"]) + 0.02


def test_plant_monotonicity():
    values = []
    for beta in (0.0, 0.5, 1.0):
        cfg = replace(FAST, n_patients=10_000, beta_ecg=beta)
        values.append(oracle_overall(generate_cohort(cfg), cfg, ["ecg"]))
    assert values[0] <= values[1] <= values[2]


def test_labels_follow_logistic_rule(big):
    betas = FAST.task_betas()["mort_00"]
    logit = np.array([sum(betas[k] * p.latents[k] for k in LATENTS) for p in big])
    y = np.array([p.labels["mort_00"] for p in big])
    # expected positive rate under the rule, with flips at rate epsilon
    p1 = 1 / (1 + np.exp(-logit))
    want = (1 - FAST.label_noise) * p1 + FAST.label_noise * (1 - p1)
    assert abs(y.mean() - want.mean()) < 3 * np.sqrt(want.mean() * (1 - want.mean()) / len(y))


def test_records_are_valid(big):
    for p in big[:200]:
        assert isinstance(p.ehr, EhrRecord)
        assert p.ecg.samples.shape == (FAST.n_samples, 12)
        assert np.isfinite(p.ecg.samples).all()
