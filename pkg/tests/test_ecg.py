import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import directional_probes
from unipact import tensor as T
from unipact.ecg_encoder import EcgEncoder, EncoderConfig, PatchError, lora_wrap_encoder, patchify, unpatchify
from unipact.ecg_io import EcgFormatError, EcgSignal, ecg_from_bytes, ecg_to_bytes, read_ecg, write_ecg
from unipact.layers import LoraConfig, LoraRankError

CFG = EncoderConfig()


def test_reference_patch_shape():
    x = np.random.default_rng(0).normal(size=(5000, 12))
    p = patchify(x, CFG)
    assert p.shape == (100, 600)
    assert np.array_equal(unpatchify(p, CFG), x.astype(np.float32))


def test_zero_signal_zero_patches():
    assert not patchify(np.zeros((1000, 12)), CFG).any()


def test_indivisible_length_names_both():
    with pytest.raises(PatchError, match="L=1001.*patch_len=50"):
        patchify(np.zeros((1001, 12)), CFG)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.sampled_from([1, 5, 10, 25]), st.integers(1, 12))
def test_shape_law(n_patches, patch_len, leads):
    cfg = EncoderConfig(patch_len=patch_len, n_leads=leads)
    x = np.arange(n_patches * patch_len * leads, dtype=np.float32).reshape(-1, leads)
    p = patchify(x, cfg)
    assert p.shape[0] * patch_len == x.shape[0]
    assert np.array_equal(unpatchify(p, cfg), x)


def test_encode_shape_and_determinism():
    enc = EcgEncoder(CFG, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5000, 12))
    a = enc.encode(x).tokens.data
    b = enc.encode(x.copy()).tokens.data
    assert a.shape == (100, CFG.d_ecg)
    assert a.tobytes() == b.tobytes()


def test_output_scale():
    enc = EcgEncoder(CFG, np.random.default_rng(0))
    out = enc.encode(np.random.default_rng(2).normal(size=(1000, 12))).tokens.data
    rms = float(np.sqrt((out ** 2).mean()))
    assert 0.1 <= rms <= 10


def test_nan_rejected():
    enc = EcgEncoder(CFG, np.random.default_rng(0))
    x = np.zeros((1000, 12))
    x[3, 4] = np.nan
    with pytest.raises(ValueError):
        enc.encode(x)


def test_diagonal_attention_locality():
    # with attention restricted to the diagonal, token i depends on patch i only
    cfg = EncoderConfig(n_heads=1, n_layers=2)
    enc = EcgEncoder(cfg, np.random.default_rng(0))
    x = enc.prepare([np.random.default_rng(3).normal(size=(500, 12))])

    def run(patches):
        n = patches.shape[1]
        h = T.add(enc.patch_embed(T.Tensor(patches)), T.take_rows(enc.pos, np.arange(n)[None]))
        for blk in enc.blocks:
            h = blk(h, mask=np.eye(n, dtype=bool))
        return enc.ln_f(h).data

    base = run(x)
    moved = x.copy()
    moved[0, 4] += 1.0
    out = run(moved)
    changed = np.flatnonzero(np.abs(out - base).max(axis=-1)[0] > 0)
    assert changed.tolist() == [4]


def test_adapter_count_and_neutrality():
    enc = EcgEncoder(CFG, np.random.default_rng(0))
    x = np.random.default_rng(4).normal(size=(500, 12))
    before = enc.encode(x).tokens.data.copy()
    adapters = lora_wrap_encoder(enc, LoraConfig(r=4, alpha=8), np.random.default_rng(1))
    assert len(adapters) == CFG.n_layers * 6
    assert enc.encode(x).tokens.data.tobytes() == before.tobytes()


def test_adapter_rank_too_large():
    enc = EcgEncoder(CFG, np.random.default_rng(0))
    with pytest.raises(LoraRankError):
        lora_wrap_encoder(enc, LoraConfig(r=CFG.d_ecg), np.random.default_rng(1))


def test_adapter_gradient_flow():
    enc = EcgEncoder(EncoderConfig(n_layers=1), np.random.default_rng(0))
    lora_wrap_encoder(enc, LoraConfig(r=4, alpha=8, dropout=0.0), np.random.default_rng(1))
    adapters = [p for _, p in enc.named_parameters() if "lora" in p.name]
    base = [p for _, p in enc.named_parameters() if "lora" not in p.name]
    for p in base:
        p.requires_grad = False
    out = enc.encode(np.random.default_rng(5).normal(size=(200, 12))).tokens
    T.backward(T.sum(T.mul(out, T.Tensor(np.random.default_rng(6).normal(size=out.shape)))))
    assert all(p.grad is None for p in base)
    assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in adapters)


def test_patch_embedding_gradient():
    enc_rng = np.random.default_rng(0)
    w, b = enc_rng.normal(size=(8, 30)), enc_rng.normal(size=8)
    x = enc_rng.normal(size=(1, 4, 30))
    assert directional_probes(lambda ts: T.linear(ts[0], ts[1], ts[2]), [x, w, b]).max() < 1e-3


def test_file_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(100, 12)).astype(np.float32)
    write_ecg(tmp_path / "a.upct", x)
    assert np.array_equal(read_ecg(tmp_path / "a.upct"), x)
    raw = (tmp_path / "a.upct").read_bytes()
    assert raw[:4] == b"UPCT" and len(raw) == 16 + 100 * 12 * 4


def test_file_errors():
    good = ecg_to_bytes(np.zeros((10, 12)))
    with pytest.raises(EcgFormatError):
        ecg_from_bytes(b"XXXX" + good[4:])
    with pytest.raises(EcgFormatError):
        ecg_from_bytes(good[:-4])
    with pytest.raises(EcgFormatError):
        ecg_from_bytes(good[:8])


def test_signal_container():
    s = EcgSignal(np.zeros((50, 12)), 100.0)
    assert (s.n_samples, s.n_leads) == (50, 12)
    with pytest.raises(ValueError):
        EcgSignal(np.zeros(5))
