import numpy as np
import pytest

from textcue.audio import AudioSignal
from textcue.corpus import SpeakerProfile, TokenVocabulary, render_utterance
from textcue.embed import (EmbeddingError, FilterbankAudioEmbedder, HashTextEmbedder,
                           PrecomputedProvider, Providers, embed_audio, embed_text,
                           load_precomputed, save_precomputed)


def test_text_determinism_and_order():
    e = HashTextEmbedder()
    a, b = embed_text("alpha beta", e), embed_text("alpha beta", e)
    assert np.array_equal(a.vector, b.vector)
    c = embed_text("beta alpha", e)
    assert np.allclose(a.vector, c.vector, atol=1e-12)
    assert not np.allclose(a.token_sequence, c.token_sequence)
    assert np.allclose(a.token_sequence, c.token_sequence[::-1])
    assert abs(np.linalg.norm(a.vector) - 1) < 1e-6


def test_text_tokens_nearly_orthogonal():
    e = HashTextEmbedder()
    v = TokenVocabulary()
    vecs = np.stack([e(t).vector for t in v.tokens])
    cos = vecs @ vecs.T
    off = cos[~np.eye(len(vecs), dtype=bool)]
    assert np.all(np.abs(off) < 0.5)


def test_empty_prompt_rejected():
    with pytest.raises(EmbeddingError):
        embed_text("   ", HashTextEmbedder())


def test_audio_silence_and_determinism():
    e = FilterbankAudioEmbedder()
    z = embed_audio(AudioSignal(np.zeros(8000), 8000), e)
    assert np.all(np.isfinite(z.vector)) and abs(np.linalg.norm(z.vector) - 1) < 1e-6
    x = AudioSignal(np.random.default_rng(0).standard_normal(8000) * 0.1, 8000)
    assert np.array_equal(e(x).vector, e(x).vector)
    assert e(x).frame_sequence.shape == (1 + (8000 - 256) // 128, 512)
    with pytest.raises(EmbeddingError):
        e(AudioSignal(np.zeros(100), 8000))


def test_shared_tokens_embed_closer_than_disjoint():
    v = TokenVocabulary()
    e = FilterbankAudioEmbedder()
    r = np.random.default_rng(0)
    within, across = [], []
    for i in range(32):
        toks = list(r.choice(v.tokens, 3, replace=False))
        other = list(r.choice([t for t in v.tokens if t not in toks], 3, replace=False))
        pa, pb = SpeakerProfile.from_id(f"a{i}"), SpeakerProfile.from_id(f"b{i}")
        a = e(render_utterance(toks, pa, 1.0, 8000, i, v)).vector
        b = e(render_utterance(toks, pb, 1.0, 8000, i + 100, v)).vector
        c = e(render_utterance(other, pb, 1.0, 8000, i + 200, v)).vector
        within.append(a @ b)
        across.append(a @ c)
    assert np.mean(within) > np.mean(across)


def test_call_order_does_not_matter():
    p1, p2 = Providers.stub(), Providers.stub()
    prompts = ["ba de", "fi go", "ku la"]
    first = [p1.text(p).vector for p in prompts]
    second = [p2.text(p).vector for p in reversed(prompts)][::-1]
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


def test_precomputed_provider(tmp_path):
    e = np.random.default_rng(0).standard_normal(512)
    prov = PrecomputedProvider({"a": e})
    assert np.allclose(prov("a").vector, e / np.linalg.norm(e))
    with pytest.raises(KeyError):
        prov("b")
    with pytest.raises(EmbeddingError):
        PrecomputedProvider({"a": np.zeros(512), "b": np.zeros(256)})
    save_precomputed({"a": e, "seq": np.ones((3, 512))}, tmp_path / "e.jsonl")
    loaded = load_precomputed(tmp_path / "e.jsonl")
    assert np.array_equal(loaded.lookup("a"), e)
    assert loaded("seq").token_sequence.shape == (3, 512)
    (tmp_path / "bad.jsonl").write_text('{"key": "a", "vector": [1, 2]}\n{"key": "b", "vector": [1]}\n')
    with pytest.raises(EmbeddingError):
        load_precomputed(tmp_path / "bad.jsonl")


def test_precomputed_hash_and_clip_lookup():
    import hashlib
    key = hashlib.sha256("hello there".encode()).hexdigest()
    prov = PrecomputedProvider({key: np.ones(4), "clip-1": np.ones((2, 4))})
    assert prov("hello there").vector.shape == (4,)
    sig = AudioSignal(np.zeros(10), 8000, meta={"clip_id": "clip-1"})
    assert prov(sig).frame_sequence.shape == (2, 4)
