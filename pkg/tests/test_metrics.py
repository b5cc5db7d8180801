import numpy as np
import pytest

from editlm.grammar import GrammarConfig, GrammarTables, Section, SynthSong
from editlm.lyrics import TextEntry
from editlm.metrics import (
    boundary_smoothness,
    edit_distance,
    edit_prediction_accuracy,
    feature_matrix,
    frechet_distance,
    reference_syllables,
    syllable_error_rate,
    transcribe_features,
)
from editlm.model import KIND_NONE, KIND_VOCAL
from editlm.sampling import Conditioning, score_continuation


def test_edit_distance_hand_cases():
    assert edit_distance([], []) == 0
    assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
    assert edit_distance([1, 2], [1, 3]) == 1
    assert edit_distance([1, 2, 3], [2, 3]) == 1
    assert edit_distance([], [1, 2]) == 2
    assert edit_distance([1, 2], []) == 2
    # kitten -> sitting as ids
    assert edit_distance([10, 8, 19, 19, 4, 13], [18, 8, 19, 19, 8, 13, 6]) == 3


def test_transcribe_features_recovers_syllables(tiny_grammar):
    tables = GrammarTables(tiny_grammar)
    style = tables.style_vector(5, "vocal")
    frames = np.concatenate(
        [
            np.repeat(tables.syllable[3:4] + style, 2, axis=0),
            np.zeros((2, tiny_grammar.feature_dim), dtype=np.float32),
            np.repeat(tables.syllable[7:8] + style, 3, axis=0),
            np.repeat(tables.syllable[3:4] + style, 1, axis=0),
        ]
    )
    assert transcribe_features(frames, tables, style) == [3, 7, 3]


def test_transcribe_features_survives_small_noise(tiny_grammar):
    tables = GrammarTables(tiny_grammar)
    style = tables.style_vector(5, "vocal")
    frames = np.repeat(tables.syllable[[3, 7, 11]] + style, 2, axis=0)
    rng = np.random.Generator(np.random.PCG64(0))
    noisy = frames + rng.normal(0, 0.01, frames.shape).astype(np.float32)
    assert transcribe_features(noisy, tables, style) == [3, 7, 11]


def test_transcription_matches_reference_on_corpus(tiny_corpus):
    tables = GrammarTables(tiny_corpus.config)
    for song in tiny_corpus.songs[:3]:
        style = tables.style_vector(song.style_seed, "vocal")
        assert transcribe_features(song.vocal_frames, tables, style) == reference_syllables(song)


def test_syllable_error_rate_requires_lyrics(tiny_grammar, tiny_tokenizer):
    frames = np.zeros((50, tiny_grammar.feature_dim), dtype=np.float32)
    song = SynthSong(
        song_id="inst-only", style_seed=0, frame_rate=25, sections=[Section("intro", 50)],
        vocal_frames=frames, accomp_frames=frames.copy(),
        syllable_alignment=np.full(50, -1, dtype=np.int32),
    )
    with pytest.raises(ValueError, match="no syllables"):
        syllable_error_rate(np.zeros((50, 4), dtype=np.int64), song, tiny_tokenizer, GrammarTables(tiny_grammar))


def test_syllable_error_rate_zero_on_faithful_tokens(tiny_corpus, tiny_tokenizer):
    # the trained tokenizer reconstructs well enough for exact transcription
    song = tiny_corpus.songs[0]
    tokens = tiny_tokenizer.tokenize(song.vocal_frames, song.accomp_frames)
    ser = syllable_error_rate(tokens, song, tiny_tokenizer, GrammarTables(tiny_corpus.config))
    assert 0.0 <= ser <= 1.5


def test_feature_matrix_layout():
    vocal = np.ones((3, 2), dtype=np.float32)
    accomp = np.zeros((3, 2), dtype=np.float32)
    m = feature_matrix(vocal, accomp)
    assert m.shape == (3, 4) and m.dtype == np.float64
    np.testing.assert_array_equal(m[:, :2], 0.0)
    np.testing.assert_array_equal(m[:, 2:], 1.0)


def test_frechet_identical_sets_is_zero(rng):
    x = rng.normal(0, 1, (300, 6))
    res = frechet_distance(x, x.copy())
    assert abs(res.value) < 1e-8
    assert not res.regularized


def test_frechet_mean_shift_hand_value(rng):
    x = rng.normal(0, 1, (400, 5))
    y = x.copy()
    y[:, 0] += 3.0  # identical covariance, mean shift of norm 3
    res = frechet_distance(x, y)
    assert res.value == pytest.approx(9.0, abs=1e-8)


def test_frechet_matches_eigenvalue_route(rng):
    x = rng.normal(0, 1, (500, 6)) * np.array([1, 2, 0.5, 1, 3, 1.5])
    y = rng.normal(0.3, 1.2, (450, 6))
    got = frechet_distance(x, y).value

    mu1, mu2 = x.mean(0), y.mean(0)
    s1 = np.cov(x, rowvar=False)
    s2 = np.cov(y, rowvar=False)
    ev = np.linalg.eigvals(s1 @ s2)
    tr_sqrt = float(np.sqrt(np.maximum(ev.real, 0.0)).sum())
    want = float((mu1 - mu2) @ (mu1 - mu2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    assert got == pytest.approx(want, rel=1e-9)


def test_frechet_validation(rng):
    x = rng.normal(0, 1, (10, 3))
    with pytest.raises(ValueError, match="frame sets"):
        frechet_distance(x, rng.normal(0, 1, (10, 4)))
    with pytest.raises(ValueError, match="frame sets"):
        frechet_distance(x[0], x)
    with pytest.raises(ValueError, match="at least 2"):
        frechet_distance(x[:1], x)


def test_boundary_smoothness_normalizes_score(tiny_model, rng):
    pre, post = rng.integers(0, 64, (5, 4)), rng.integers(0, 64, (8, 4))
    edit, continuation = rng.integers(0, 64, (4, 4)), post[:3]
    cond = Conditioning(
        style_tokens=rng.integers(0, 64, (4, 4)),
        entries=[TextEntry(tag_id=2, symbol_id=1, is_duration_token=False, sentence_index=1, position=None)],
    )
    total = score_continuation(tiny_model, pre, post, edit, continuation, cond)
    got = boundary_smoothness(tiny_model, pre, post, edit, continuation, cond)
    assert got == pytest.approx(total / (3 * 4), rel=1e-9)
    with pytest.raises(ValueError, match="at least one frame"):
        boundary_smoothness(tiny_model, pre, post, edit, post[:0], cond)


def test_edit_prediction_accuracy_pairs_spans(tiny_corpus, tiny_tokenizer, tiny_model):
    songs = tiny_corpus.songs[:3]
    acc_none, items_none = edit_prediction_accuracy(
        tiny_model, tiny_tokenizer, songs, tiny_corpus.config, seed=5, source_kind=KIND_NONE, prompt_seconds=1.0
    )
    acc_vocal, items_vocal = edit_prediction_accuracy(
        tiny_model, tiny_tokenizer, songs, tiny_corpus.config, seed=5, source_kind=KIND_VOCAL, prompt_seconds=1.0
    )
    assert len(items_none) == len(items_vocal) == 3
    assert [i.span for i in items_none] == [i.span for i in items_vocal]
    assert [i.total for i in items_none] == [i.total for i in items_vocal]
    assert 0.0 <= acc_none <= 1.0 and 0.0 <= acc_vocal <= 1.0
    assert acc_none == sum(i.correct for i in items_none) / sum(i.total for i in items_none)


def test_edit_prediction_accuracy_honors_spans(tiny_corpus, tiny_tokenizer, tiny_model):
    songs = tiny_corpus.songs[:2]
    spans = [(1, 1), (1, 1)]
    _, items = edit_prediction_accuracy(
        tiny_model, tiny_tokenizer, songs, tiny_corpus.config, seed=5, spans=spans, prompt_seconds=1.0
    )
    assert [i.span for i in items] == spans
