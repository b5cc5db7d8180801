import numpy as np
import pytest

from editlm.grammar import (
    GrammarConfig,
    GrammarTables,
    Section,
    SynthSong,
    align_syllables,
    generate_song,
    make_style_prompt,
    sample_sections,
    separate,
    validate_sections,
)


def _song(sections, config, style_seed=5, song_id="t"):
    return generate_song(song_id, style_seed, sections, config)


# ---------- alignment ----------


def test_alignment_even_spread():
    # 15 syllables over 30 frames: exactly 2 frames each
    sec = Section("verse", 30, [[1, 2, 3], [4, 5, 6], [7, 8, 9, 10, 11, 12, 13, 14, 15]])
    alignment, spans = align_syllables([sec])
    sylls = [s for sent in sec.sentences for s in sent]
    expected = np.repeat(sylls, 2)
    np.testing.assert_array_equal(alignment, expected)
    assert spans == [(0, 6), (6, 12), (12, 30)]


def test_alignment_uneven_floor_boundaries():
    # 3 syllables over 10 frames: floor boundaries 0,3,6,10 -> runs 3,3,4
    alignment, _ = align_syllables([Section("verse", 10, [[7, 8, 9]])])
    np.testing.assert_array_equal(alignment, [7, 7, 7, 8, 8, 8, 9, 9, 9, 9])


def test_alignment_nonlyric_is_silent():
    alignment, spans = align_syllables([Section("intro", 4), Section("verse", 4, [[1, 2]]), Section("outro", 3)])
    np.testing.assert_array_equal(alignment, [-1, -1, -1, -1, 1, 1, 2, 2, -1, -1, -1])
    assert spans == [(4, 8)]


def test_every_syllable_gets_a_frame():
    # more syllables than duration would allow is rejected upstream; at the
    # limit each gets exactly one frame
    alignment, _ = align_syllables([Section("verse", 3, [[4, 5, 6]])])
    np.testing.assert_array_equal(alignment, [4, 5, 6])


# ---------- sentence regions ----------


def test_sentence_regions_absorb_accomp_sections():
    cfg = GrammarConfig()
    sections = [
        Section("intro", 10),
        Section("verse", 20, [[1, 2], [3, 4]]),
        Section("inst", 5),
        Section("chorus", 10, [[5, 6, 7]]),
        Section("outro", 5),
    ]
    song = _song(sections, cfg)
    assert song.n_frames == 50
    assert song.sentence_spans() == [(10, 20), (20, 30), (35, 45)]
    # intro attaches to sentence 1, inst to sentence 3, outro trails into 3
    assert song.sentence_regions() == [(0, 20), (20, 30), (30, 50)]


def test_sentence_regions_partition_frames(tiny_corpus):
    for song in tiny_corpus.songs:
        regions = song.sentence_regions()
        assert regions[0][0] == 0
        assert regions[-1][1] == song.n_frames
        for (_, e0), (s1, _) in zip(regions, regions[1:]):
            assert e0 == s1


# ---------- feature construction ----------


def test_vocal_features_are_table_plus_style():
    cfg = GrammarConfig()
    tables = GrammarTables(cfg)
    song = _song([Section("verse", 6, [[3, 9]]), Section("outro", 2)], cfg, style_seed=11)
    style = tables.style_vector(11, "vocal")
    np.testing.assert_allclose(song.vocal_frames[0], tables.syllable[3] + style, rtol=1e-6)
    np.testing.assert_allclose(song.vocal_frames[3], tables.syllable[9] + style, rtol=1e-6)
    np.testing.assert_array_equal(song.vocal_frames[6], np.zeros(cfg.feature_dim))


def test_accomp_features_follow_chord_clock():
    cfg = GrammarConfig(chord_period=8, n_chords=4)
    tables = GrammarTables(cfg)
    song = _song([Section("intro", 40)], cfg, style_seed=2)
    style = tables.style_vector(2, "accomp")
    tag = 3  # TAG_INDEX["intro"]
    for t in (0, 7, 8, 31, 32):
        chord = (t // 8) % 4
        np.testing.assert_allclose(
            song.accomp_frames[t], tables.section[tag] + tables.chord[chord] + style, rtol=1e-6
        )


def test_tables_deterministic():
    cfg = GrammarConfig()
    a, b = GrammarTables(cfg), GrammarTables(cfg)
    np.testing.assert_array_equal(a.syllable, b.syllable)
    np.testing.assert_array_equal(a.chord, b.chord)
    other = GrammarTables(GrammarConfig(embed_seed=613))
    assert not np.array_equal(a.syllable, other.syllable)


def test_style_vector_varies_by_song_and_track():
    tables = GrammarTables(GrammarConfig())
    assert not np.array_equal(tables.style_vector(1, "vocal"), tables.style_vector(2, "vocal"))
    assert not np.array_equal(tables.style_vector(1, "vocal"), tables.style_vector(1, "accomp"))
    np.testing.assert_array_equal(tables.style_vector(1, "vocal"), tables.style_vector(1, "vocal"))


# ---------- validation ----------


def test_validate_rejects_bad_sections():
    cfg = GrammarConfig()
    with pytest.raises(ValueError, match="unknown tag"):
        validate_sections([Section("solo", 10)], cfg)
    with pytest.raises(ValueError, match="duration_frames"):
        validate_sections([Section("verse", 0, [[1]])], cfg)
    with pytest.raises(ValueError):
        validate_sections([], cfg)


# ---------- section plans ----------


def test_sampled_plans_never_repeat_syllables():
    cfg = GrammarConfig(min_song_seconds=4.0, max_song_seconds=8.0, lyric_seconds=(2.0, 3.0))
    for seed in range(40):
        rng = np.random.Generator(np.random.PCG64(seed))
        sections = sample_sections(rng, cfg)
        validate_sections(sections, cfg)
        sylls = []
        for sec in sections:
            if sec.is_lyric:
                sylls.extend(s for sent in sec.sentences for s in sent)
            else:
                sylls.append(-1)  # silence breaks adjacency
        for a, b in zip(sylls, sylls[1:]):
            assert not (a == b and a >= 0), f"seed {seed}: repeated syllable {a}"


def test_sampled_plans_have_lyrics_even_when_budget_is_tiny():
    cfg = GrammarConfig(min_song_seconds=0.2, max_song_seconds=0.4)
    for seed in range(10):
        rng = np.random.Generator(np.random.PCG64(seed))
        sections = sample_sections(rng, cfg)
        assert any(sec.is_lyric and sec.sentences for sec in sections)


# ---------- separation ----------


def test_separation_noise_level(tiny_grammar):
    sections = [Section("verse", 2000, [[i % 32, (i + 5) % 32] for i in range(0, 40, 2)])]
    song = _song(sections, tiny_grammar)
    sep = separate(song, tiny_grammar, rng_seed=9)
    noise = sep.vocal - song.vocal_frames
    sigma = float(noise.std())
    assert abs(sigma - 0.01) < 0.0005
    # sigma 0.01 against a unit-RMS signal is 40 dB
    assert abs(-20.0 * np.log10(sigma) - 40.0) < 0.5
    np.testing.assert_array_equal(sep.accomp, song.accomp_frames)


def test_separation_deterministic(tiny_grammar, tiny_corpus):
    song = tiny_corpus.songs[0]
    a = separate(song, tiny_grammar, rng_seed=4)
    b = separate(song, tiny_grammar, rng_seed=4)
    np.testing.assert_array_equal(a.vocal, b.vocal)
    c = separate(song, tiny_grammar, rng_seed=5)
    assert not np.array_equal(a.vocal, c.vocal)


# ---------- style prompts ----------


def test_style_prompt_comes_from_tail(tiny_corpus, tiny_tokenizer):
    song = tiny_corpus.songs[0]
    prompt = make_style_prompt(song, tiny_tokenizer, prompt_seconds=2.0)
    p = 2 * song.frame_rate
    assert prompt.tokens.shape == (p, tiny_tokenizer.k_streams)
    assert prompt.excerpt == (song.n_frames - p, song.n_frames)
    assert prompt.target_range == (0, song.n_frames - p)
    full = tiny_tokenizer.tokenize(song.vocal_frames, song.accomp_frames)
    np.testing.assert_array_equal(prompt.tokens, full[song.n_frames - p:])


def test_style_prompt_needs_enough_material(tiny_grammar, tiny_tokenizer):
    song = _song([Section("verse", 30, [[1, 2]])], tiny_grammar)
    with pytest.raises(ValueError):
        make_style_prompt(song, tiny_tokenizer, prompt_seconds=2.0)
