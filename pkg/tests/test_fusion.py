import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unipact import tensor as T
from unipact.dataset import QaItem, Sample
from unipact.ecg_encoder import EncoderConfig
from unipact.fusion import (
    CheckpointError,
    DecoderConfig,
    FusionModel,
    ModelConfig,
    answer_position,
    answer_score,
    forward_logits,
    generate,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    yes_no_probability,
)
from unipact.layers import LoraConfig
from unipact.tokenizer import SPECIALS, Vocab
from unipact.training import answer_logits, build_batch

VOCAB = Vocab(list(SPECIALS) + ["Yes", "No"] + [f"w{i}" for i in range(40)])
SMALL = ModelConfig(EncoderConfig(patch_len=25, d_ecg=16, n_heads=2, n_layers=1),
                    DecoderConfig(vocab_size=len(VOCAB), d_llm=32, n_layers=2, n_heads=4, max_len=64))


def _model(seed=0):
    return FusionModel(SMALL, seed=seed)


def _ecg(seed=0, n=100):
    return np.random.default_rng(seed).normal(0, 0.3, (n, 12)).astype(np.float32)


def test_assemble_layout():
    m = _model()
    f = m.assemble(_ecg(), [7, 8, 9], [10, 11], [VOCAB.yes_id])
    assert f.n_ecg == 4  # 100 samples / 25 per patch
    assert f.segments == ["ecg"] * 4 + ["prompt"] * 3 + ["question"] * 2 + ["answer"]
    assert f.embeddings.shape == (10, 32)
    assert answer_position(f) == 8
    # text rows are exactly the token embeddings
    np.testing.assert_array_equal(f.embeddings.data[4:7], m.decoder.tok_emb.data[[7, 8, 9]])


def test_assemble_without_ecg():
    f = _model().assemble(None, [7, 8], [10], [])
    assert f.n_ecg == 0 and len(f) == 3 and answer_position(f) == 2


def test_causality():
    m = _model()
    a = forward_logits(m.assemble(_ecg(), [7, 8, 9], [10, 11], [VOCAB.yes_id]), m).data
    b = forward_logits(m.assemble(_ecg(), [7, 8, 9], [10, 12], [VOCAB.no_id]), m).data
    np.testing.assert_array_equal(a[:8], b[:8])
    assert not np.allclose(a[8], b[8])


def test_ecg_changes_text_logits():
    m = _model()
    a = forward_logits(m.assemble(_ecg(0), [7, 8], [10], []), m).data
    b = forward_logits(m.assemble(_ecg(1), [7, 8], [10], []), m).data
    assert not np.allclose(a[-1], b[-1])


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_two_way_probability(zy, zn):
    p = float(yes_no_probability(zy, zn))
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(1.0 / (1.0 + np.exp(zn - zy)), rel=1e-12, abs=1e-300)
    assert p + float(yes_no_probability(zn, zy)) == pytest.approx(1.0, abs=1e-15)


def test_probability_extremes_are_finite():
    assert float(yes_no_probability(1e4, -1e4)) == 1.0
    assert float(yes_no_probability(-1e4, 1e4)) == 0.0


def test_answer_score_matches_greedy_token():
    checked = 0
    for seed in range(40):
        m = _model(seed)
        # lift both answer embeddings so Yes and No are the top-2 logits
        m.decoder.tok_emb.data[[VOCAB.yes_id, VOCAB.no_id]] *= 40.0
        f = m.assemble(_ecg(seed), [7, 8, 9], [10, 11 + seed % 5], [])
        logits = forward_logits(f, m).data[-1]
        if set(np.argsort(logits)[-2:]) != {VOCAB.yes_id, VOCAB.no_id}:
            continue
        greedy = generate(f, m, VOCAB, max_tokens=1)
        assert (answer_score(f, m, VOCAB) > 0.5) == (greedy == "Yes")
        checked += 1
    assert checked >= 5


def test_generate_is_greedy_and_bounded():
    m = _model()
    f = m.assemble(None, [7, 8, 9], [10], [])
    out = generate(f, m, VOCAB, max_tokens=3)
    assert 0 <= len(out.split()) <= 3
    first = int(np.argmax(forward_logits(f, m).data[-1]))
    if first not in VOCAB.special_ids:
        assert out.split()[0] == VOCAB.itos[first]
    assert generate(f, m, VOCAB, max_tokens=0) == ""


def test_packed_rows_match_standalone_sequences():
    m = _model(3)
    m.add_lora(LoraConfig(r=2, alpha=4), seed=1)
    for a in m.adapters():
        a.B.data[:] = np.random.default_rng(0).normal(0, 0.1, a.B.shape)
    ecg = _ecg(5)
    items = [QaItem("a", (10, 11), None, 1), QaItem("b", (12,), None, 0), QaItem("c", (13, 14, 15), None, 1)]
    batch = build_batch([Sample("p", (7, 8, 9), items, ecg)], VOCAB, m, teacher_forced=False)
    sel = np.zeros(batch.shape, dtype=bool)
    for r, p, *_ in batch.score_index:
        sel[r, p] = True
    packed = answer_logits(m, batch, None, sel).data
    for k, it in enumerate(items):
        solo = forward_logits(m.assemble(ecg, (7, 8, 9), it.question_ids), m).data[-1]
        np.testing.assert_allclose(packed[k], solo, rtol=1e-4, atol=1e-5)


def test_checkpoint_round_trip(tmp_path):
    m = _model(4)
    m.add_lora(LoraConfig(r=2, alpha=4))
    m.stages = [0, 1, 2]
    save_checkpoint(tmp_path / "m.ckpt", m, {"mode": "full"})
    m2, cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg["mode"] == "full" and m2.stages == [0, 1, 2] and m2.lora == m.lora
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    f = m.assemble(_ecg(), [7], [10], [])
    assert answer_score(f, m, VOCAB) == answer_score(m2.assemble(_ecg(), [7], [10], []), m2, VOCAB)
    save_checkpoint(tmp_path / "again.ckpt", m2, {"mode": "full"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, _model())
    blob = p.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(blob[:200])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short")


def test_max_len_enforced():
    m = _model()
    with pytest.raises(T.ShapeError):
        forward_logits(m.assemble(None, list(range(5, 45)) * 2, [10], []), m)
