import numpy as np
import pytest

from editlm.blobio import BlobFormatError, read_container, write_container
from editlm.corpus import build_corpus, read_corpus, write_corpus
from editlm.grammar import GrammarConfig


def test_build_is_deterministic(tiny_grammar):
    a = build_corpus(3, 77, tiny_grammar)
    b = build_corpus(3, 77, tiny_grammar)
    for sa, sb in zip(a.songs, b.songs):
        assert sa.song_id == sb.song_id
        assert sa.style_seed == sb.style_seed
        np.testing.assert_array_equal(sa.vocal_frames, sb.vocal_frames)
        np.testing.assert_array_equal(sa.accomp_frames, sb.accomp_frames)
    c = build_corpus(3, 78, tiny_grammar)
    assert not np.array_equal(a.songs[0].vocal_frames, c.songs[0].vocal_frames)


def test_per_song_seeding_is_stable_under_corpus_growth(tiny_grammar):
    small = build_corpus(2, 55, tiny_grammar)
    big = build_corpus(4, 55, tiny_grammar)
    for sa, sb in zip(small.songs, big.songs):
        np.testing.assert_array_equal(sa.vocal_frames, sb.vocal_frames)


def test_roundtrip(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.edlm")
    write_corpus(path, tiny_corpus)
    loaded = read_corpus(path)
    assert loaded.seed == tiny_corpus.seed
    assert loaded.config == tiny_corpus.config
    assert len(loaded.songs) == len(tiny_corpus.songs)
    for sa, sb in zip(tiny_corpus.songs, loaded.songs):
        assert sa.song_id == sb.song_id
        assert sa.sections == sb.sections
        np.testing.assert_array_equal(sa.vocal_frames, sb.vocal_frames)
        np.testing.assert_array_equal(sa.accomp_frames, sb.accomp_frames)
        np.testing.assert_array_equal(sa.syllable_alignment, sb.syllable_alignment)


def test_rewrite_is_byte_identical(tmp_path, tiny_corpus):
    a, b = str(tmp_path / "a.edlm"), str(tmp_path / "b.edlm")
    write_corpus(a, tiny_corpus)
    write_corpus(b, read_corpus(a))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_read_rejects_wrong_kind(tmp_path):
    path = str(tmp_path / "x.edlm")
    write_container(path, {"kind": "tokens"}, [("tokens", np.zeros((2, 4), dtype=np.int64))])
    with pytest.raises(BlobFormatError, match="corpus"):
        read_corpus(path)


def test_read_rejects_duration_mismatch(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.edlm")
    write_corpus(path, tiny_corpus)
    manifest, blobs = read_container(path)
    manifest["songs"][0]["sections"][0]["duration_frames"] += 1
    del manifest["blobs"]
    write_container(path, manifest, sorted(blobs.items()))
    with pytest.raises(BlobFormatError, match="song record 0"):
        read_corpus(path)
