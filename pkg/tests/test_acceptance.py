"""One test per acceptance criterion; each records a PASS/FAIL line for the summary."""

import subprocess
import sys
import time

import numpy as np
import pytest

import conftest
from gradcheck import directional_probes
from test_cli import TINY
from test_tensor import OPS
from unipact import tensor as T
from unipact.experiments import (MODES, Schedule, decoder_state, modality_experiment, new_model, overfit_run,
                                 prepare_data, pretrain_backbone, run_ablation, samples_for, train_model)
from unipact.fusion import ModelConfig
from unipact.layers import Linear, LoraAdapter, LoraConfig
from unipact.metrics import aggregate_values, auroc, auroc_pairwise, relative_improvement
from unipact.synth import CATEGORIES, CohortConfig
from unipact.training import StageConfig, batch_loss, build_batch, train_stage, trainable_set


def record(n, title, ok, detail):
    conftest.ACCEPTANCE_LINES[n] = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(conftest.ACCEPTANCE_LINES[n])
    assert ok, detail


UNIPACT = {"diagnosis": 83.98, "deterioration": 91.17, "icu": 90.50, "mortality": 91.82}
MDS_ED = {"diagnosis": 82.56, "deterioration": 90.70, "icu": 90.63, "mortality": 91.68}
ECG_CHAT = {"diagnosis": 49.70, "deterioration": 57.54, "icu": 56.40, "mortality": 55.78}


def test_c01_aggregation():
    ours = round(aggregate_values(UNIPACT), 2)
    mds = round(aggregate_values(MDS_ED), 2)
    chat = round(aggregate_values(ECG_CHAT), 2)
    vs_chat = [relative_improvement(UNIPACT[c], ECG_CHAT[c]) for c in CATEGORIES] + [relative_improvement(ours, chat)]
    vs_mds = [relative_improvement(UNIPACT[c], MDS_ED[c]) for c in CATEGORIES] + [relative_improvement(ours, 88.90)]
    ok = (ours == 89.37 and 88.89 <= mds <= 88.90 and vs_chat == [69.0, 58.4, 60.5, 64.6, 62.9]
          and vs_mds == [1.7, 0.5, -0.1, 0.2, 0.5])
    record(1, "aggregation", ok, f"overall {ours}, MDS-ED {mds}, deltas {vs_chat} / {vs_mds}")


def test_c02_loss_masking():
    from test_training import SMALL, VOCAB, _samples
    from unipact.fusion import FusionModel

    m = FusionModel(SMALL, seed=1)
    m.add_lora(LoraConfig(r=2, alpha=4))
    for a in m.adapters():
        a.B.data[:] = np.random.default_rng(2).normal(0, 0.05, a.B.shape)
    params = trainable_set(m, StageConfig(stage=2))
    b = build_batch(_samples(6), VOCAB, m)

    def loss_and_grads():
        m.set_trainable(params)
        loss = batch_loss(m, b)
        T.backward(loss)
        return loss.item(), [p.grad.copy() for p in params]

    l0, g0 = loss_and_grads()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        b.targets[~b.answer_mask] = rng.integers(0, len(VOCAB), int((~b.answer_mask).sum()))
        l1, g1 = loss_and_grads()
        worst = max(worst, abs(l1 - l0), *(float(np.abs(x - y).max()) for x, y in zip(g0, g1)))
    record(2, "loss masking", worst == 0.0, f"max change in loss/gradients {worst!r}")


def test_c03_gradients():
    t0 = time.time()
    errs = [directional_probes(fn, arrays, n_probes=5, seed=i) for i, (_, fn, arrays) in enumerate(OPS)]
    errs = np.concatenate(errs)
    ok = errs.size >= 100 and errs.max() < 1e-3 and time.time() - t0 < 60
    record(3, "finite differences", ok, f"{errs.size} probes over {len(OPS)} ops, max rel err {errs.max():.2e}")


def test_c04_lora():
    rng = np.random.default_rng(0)
    lin = Linear(32, 24, rng, "c4")
    x = T.Tensor(rng.normal(size=(9, 32)))
    base = lin(x).data.copy()
    lin.add_adapter(LoraConfig(r=4, alpha=8), rng)
    neutral = lin(x).data.tobytes() == base.tobytes()
    lin.adapter.B.data = rng.normal(0, 0.1, lin.adapter.B.shape).astype(np.float32)
    lin.adapter.dropout = 0.0
    branch = lin(x).data
    merged = x.data @ lin.merged_weight().T + lin.bias.data
    rel = float(np.abs(branch - merged).max() / np.abs(merged).max())
    scale = LoraAdapter(256, 256, LoraConfig(r=128, alpha=256), rng).scaling
    ok = neutral and rel <= 1e-5 and scale == 2.0
    record(4, "LoRA contracts", ok, f"zero-init bitwise={neutral}, merge rel err {rel:.1e}, scaling {scale}")


def test_c05_stage_isolation():
    data = prepare_data(CohortConfig(n_patients=40), 32, 8, n_val=0)
    m = new_model(ModelConfig(), data.vocab, seed=0)
    samples = samples_for(data, data.train, MODES["full"])

    def bases():
        skip = {id(p) for p in m.adapter_parameters() + m.projector.parameters()}
        return {n: p.data.copy() for n, p in m.named_parameters() if id(p) not in skip}

    init = bases()
    for stage in (1, 2):
        train_stage(m, samples, data.vocab, StageConfig(stage=stage, lr=1e-2, epochs=1.0, batch_size=8,
                                                        questions_per_row=4))
        if stage == 1:
            s1 = bases()
    s2 = bases()
    iso1 = init.keys() == s1.keys() and all(np.array_equal(init[k], s1[k]) for k in init)
    iso2 = s1.keys() == s2.keys() and all(np.array_equal(s1[k], s2[k]) for k in s1)
    moved = any(np.abs(a.B.data).max() > 0 for a in m.adapters())
    record(5, "stage isolation", iso1 and iso2 and moved,
           f"{len(init)} base tensors bit-identical after stage 1: {iso1}, after stage 2: {iso2}")


def test_c06_auroc_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    t0 = time.time()
    for _ in range(200):
        n = int(rng.integers(2, 1001))
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        worst = max(worst, abs(auroc(s, y) - auroc_pairwise(s, y)))
    record(6, "AUROC oracle", worst <= 1e-12 and time.time() - t0 < 60, f"max |rank - pairwise| {worst:.1e}")


@pytest.fixture(scope="module")
def synergy():
    t0 = time.time()
    data = prepare_data(CohortConfig(), 2000, 500, 200)
    runs, pre_s = modality_experiment(data, seed=0)
    return data, runs, time.time() - t0


@pytest.mark.slow
def test_c07_synergy(synergy):
    _, runs, seconds = synergy
    full, ecg, ehr = (runs[k].report.overall for k in ("full", "ecg", "ehr"))
    gaps = {k: runs[k].oracle - runs[k].report.overall for k in runs}
    ok = (full - ecg >= 0.03 and full - ehr >= 0.03 and all(g <= 0.05 for g in gaps.values())
          and seconds < 30 * 60)
    detail = (f"full {full:.4f} ecg {ecg:.4f} ehr {ehr:.4f}; oracle gaps "
              + ", ".join(f"{k} {g:.4f}" for k, g in gaps.items()) + f"; {seconds / 60:.1f} min")
    record(7, "synergy", ok, detail)


@pytest.mark.slow
def test_c08_graceful_degradation(synergy):
    data, runs, _ = synergy
    t0 = time.time()
    table = run_ablation("C", {"full": runs["full"].model}, data)
    full = table.row("full model").overall
    wo = table.row("w/o vitals").overall
    ecg = runs["ecg"].report.overall
    ok = ecg - 0.02 <= wo < full
    record(8, "graceful degradation", ok,
           f"w/o vitals {wo:.4f}, full {full:.4f}, ECG-only {ecg:.4f} ({time.time() - t0:.0f} s)")


# Criterion 9 runs 15 models; a smaller cohort and a longer per-model schedule keep it inside 45 minutes.
MULTITASK_SPLIT = (900, 400, 150)
MULTITASK_SCHEDULE = Schedule(
    pretrain=StageConfig(stage=0, lr=1e-3, epochs=2.0, batch_size=16, questions_per_row=6),
    stage1=StageConfig(stage=1, lr=1e-3, epochs=1.0, batch_size=16, questions_per_row=8),
    stage2=StageConfig(stage=2, lr=2e-3, epochs=3.0, batch_size=16, questions_per_row=8, eval_every=100),
)


def multitask_seed(seed):
    n_train, n_test, n_val = MULTITASK_SPLIT
    data = prepare_data(CohortConfig(seed=seed), n_train, n_test, n_val)
    model_cfg = ModelConfig()
    backbone, _ = pretrain_backbone(data, model_cfg, MULTITASK_SCHEDULE.pretrain, seed=seed)
    state = decoder_state(backbone)
    models = {"full": train_model(state, data, model_cfg, MULTITASK_SCHEDULE, "full", seed=seed)[0]}
    for cat in CATEGORIES:
        models[f"single:{cat}"] = train_model(state, data, model_cfg, MULTITASK_SCHEDULE, "full", [cat],
                                              seed=seed)[0]
    return run_ablation("B", models, data)


@pytest.mark.slow
def test_c09_multitask():
    t0 = time.time()
    overall_ok, wins, parts = [], [], []
    for seed in (0, 1, 2):
        table = multitask_seed(seed)
        single, multi = table.row("single-task"), table.row("multi-task")
        better = sum(multi.category_means[c] > single.category_means[c] for c in CATEGORIES)
        overall_ok.append(multi.overall >= single.overall - 0.01)
        wins.append(better >= 2)
        parts.append(f"seed {seed}: multi {multi.overall:.4f} vs single {single.overall:.4f}, {better}/4 better")
    seconds = time.time() - t0
    ok = all(overall_ok) and sum(wins) >= 2 and seconds < 45 * 60
    record(9, "multi-task benefit", ok, "; ".join(parts) + f"; {seconds / 60:.1f} min")


def _cli(*args):
    p = subprocess.run([sys.executable, "-m", "unipact", *map(str, args)], capture_output=True, text=True)
    assert p.returncode == 0, p.stderr
    return p


def _pipeline(root, config):
    _cli("gen-data", "--config", config, "--out", root / "data")
    _cli("build-vocab", "--config", config, "--data", root / "data", "--out", root / "vocab.txt")
    common = ["--config", config, "--data", root / "data", "--vocab", root / "vocab.txt"]
    prev = None
    for stage in (0, 1, 2):
        init = ["--init", prev] if prev else []
        _cli("train", *common, "--stage", stage, *init, "--out", root / f"s{stage}")
        prev = root / f"s{stage}" / "model.ckpt"
    _cli("eval", *common, "--ckpt", prev, "--out", root / "eval")


def test_c10_determinism(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    (first / "run.ini").write_text(TINY)
    _pipeline(first, first / "run.ini")
    second.mkdir()
    _pipeline(second, first / "eval" / "config.ini")  # rerun from the echoed config
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file() and p.name != "run.ini")
    differ = [str(f) for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    # run.json records input hashes only; paths and times never enter it
    record(10, "determinism", not differ and len(files) > 10,
           f"{len(files)} files compared, {len(differ)} differ {differ[:3]}")


def test_c11_overfit():
    res = overfit_run(n=32, max_steps=500, target_loss=0.05, seed=0)
    ok = res.final_loss < 0.05 and res.correct == res.n == 32 and res.steps <= 500 and res.seconds < 120
    record(11, "overfit", ok, f"loss {res.final_loss:.4f} after {res.steps} steps, {res.correct}/{res.n} correct, "
                              f"{res.seconds:.0f} s")
