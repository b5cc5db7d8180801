import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from editlm.codec import (
    SEG_EDIT,
    SEG_POST,
    SEG_PRE,
    SEG_SEP,
    EditSpec,
    SpecialIds,
    context_frame_coords,
    context_rows,
    delay_apply,
    delay_invert,
    extract_context_frames,
    extract_context_tokens,
    inverse_rearrange,
    rearrange_for_edit,
)

SP = SpecialIds(64)


def test_special_ids_layout():
    assert (SP.sep, SP.pad, SP.eos, SP.vocab) == (64, 65, 66, 67)


def test_delay_hand_case_two_streams():
    grid = np.array([[1, 4], [2, 5], [3, 6]])
    out = delay_apply(grid, pad_id=99)
    np.testing.assert_array_equal(out, [[1, 99], [2, 4], [3, 5], [99, 6]])


def test_delay_single_stream_is_identity():
    grid = np.arange(5).reshape(5, 1)
    np.testing.assert_array_equal(delay_apply(grid, SP.pad), grid)


@settings(max_examples=60, deadline=None)
@given(
    t=st.integers(min_value=1, max_value=12),
    k=st.integers(min_value=1, max_value=4),
    data=st.data(),
)
def test_delay_roundtrip(t, k, data):
    grid = np.array(
        data.draw(st.lists(st.lists(st.integers(0, 63), min_size=k, max_size=k), min_size=t, max_size=t))
    )
    rows = delay_apply(grid, SP.pad)
    assert rows.shape == (t + k - 1, k)
    np.testing.assert_array_equal(delay_invert(rows, SP.pad), grid)


def test_delay_invert_flags_pad_inside_content():
    rows = delay_apply(np.arange(8).reshape(4, 2), SP.pad)
    rows[1, 0] = SP.pad
    with pytest.raises(ValueError, match="row 1, stream 0: PAD inside content"):
        delay_invert(rows, SP.pad)


def test_delay_invert_flags_content_in_corner():
    rows = delay_apply(np.arange(8).reshape(4, 2), SP.pad)
    rows[0, 1] = 7
    with pytest.raises(ValueError, match="row 0, stream 1: non-PAD in corner"):
        delay_invert(rows, SP.pad)


def test_delay_invert_rejects_too_few_rows():
    with pytest.raises(ValueError, match="cannot hold"):
        delay_invert(np.full((1, 3), SP.pad, dtype=np.int64), SP.pad)


def test_rearrange_hand_case():
    grid = np.arange(40).reshape(10, 4)
    spec = EditSpec.from_frames(4, 6, 10)
    out = rearrange_for_edit(grid, spec, SP)

    assert out.n_rows == 22  # 10 + 3*4
    segs = out.segment_map
    assert list(segs) == [SEG_PRE] * 7 + [SEG_SEP] + [SEG_POST] * 7 + [SEG_SEP] + [SEG_EDIT] * 5 + [SEG_SEP]
    np.testing.assert_array_equal(out.rows[:7], delay_apply(grid[:4], SP.pad))
    np.testing.assert_array_equal(out.rows[8:15], delay_apply(grid[6:], SP.pad))
    np.testing.assert_array_equal(out.rows[16:21], delay_apply(grid[4:6], SP.pad))
    assert (out.rows[7] == SP.sep).all() and (out.rows[15] == SP.sep).all() and (out.rows[21] == SP.sep).all()
    assert out.edit_block_start == 16
    assert out.edit_content_len == 2 and out.smoothing_frames == 0

    # loss mask covers exactly the 2*4 content entries of the edit block
    assert out.loss_mask.sum() == 8
    assert not out.loss_mask[:16].any() and not out.loss_mask[21].any()
    masked = out.rows[out.loss_mask]
    assert (masked < SP.sep).all()
    assert sorted(masked.tolist()) == sorted(grid[4:6].ravel().tolist())


def test_rearrange_frame_coords_track_the_layout():
    grid = np.arange(40).reshape(10, 4)
    spec = EditSpec.from_frames(4, 6, 10)
    out = rearrange_for_edit(grid, spec, SP)
    assert out.frame_coords.shape == (out.n_rows,)
    # pre counts from 0, post from 6, edit from 4; SEP rows continue the count
    np.testing.assert_array_equal(out.frame_coords[:8], np.arange(0, 8))
    np.testing.assert_array_equal(out.frame_coords[8:16], np.arange(6, 14))
    np.testing.assert_array_equal(out.frame_coords[16:], np.arange(4, 10))

    smoothed = rearrange_for_edit(grid, spec, SP, smoothing_frames=3)
    np.testing.assert_array_equal(
        smoothed.frame_coords[smoothed.edit_block_start:], np.arange(4, 4 + 5 + 4)
    )

    empty_pre = rearrange_for_edit(grid, EditSpec.from_frames(0, 10, 10), SP)
    assert empty_pre.frame_coords[0] == 0  # lone SEP of the empty pre
    np.testing.assert_array_equal(empty_pre.frame_coords[1:2], [10])


def test_context_frame_coords_matches_context_rows_length():
    pre = np.arange(12).reshape(3, 4)
    post = np.arange(20).reshape(5, 4)
    rows, _ = context_rows(pre, post, SP)
    coords = context_frame_coords(3, 7, 5, 4)
    assert coords.shape == (rows.shape[0],)
    np.testing.assert_array_equal(coords, list(range(0, 7)) + list(range(7, 16)))
    empty = np.empty((0, 4), dtype=np.int64)
    rows2, _ = context_rows(empty, post, SP)
    coords2 = context_frame_coords(0, 7, 5, 4)
    assert coords2.shape == (rows2.shape[0],)


def test_rearrange_smoothing_copies_following_frames():
    grid = np.arange(40).reshape(10, 4)
    spec = EditSpec.from_frames(4, 6, 10)
    out = rearrange_for_edit(grid, spec, SP, smoothing_frames=3)
    assert out.edit_content_len == 5 and out.smoothing_frames == 3
    np.testing.assert_array_equal(
        out.rows[out.edit_block_start:out.edit_block_start + 8], delay_apply(grid[4:9], SP.pad)
    )
    # the post segment itself is untouched
    np.testing.assert_array_equal(out.rows[8:15], delay_apply(grid[6:], SP.pad))
    assert out.loss_mask.sum() == 20
    np.testing.assert_array_equal(inverse_rearrange(out), grid)


def test_rearrange_smoothing_clips_to_available_frames():
    grid = np.arange(40).reshape(10, 4)
    out = rearrange_for_edit(grid, EditSpec.from_frames(4, 6, 10), SP, smoothing_frames=100)
    assert out.smoothing_frames == 4  # only 4 frames follow the edit
    out = rearrange_for_edit(grid, EditSpec.from_frames(8, 10, 10), SP, smoothing_frames=5)
    assert out.smoothing_frames == 0


def test_rearrange_empty_segments_keep_sep():
    grid = np.arange(40).reshape(10, 4)
    out = rearrange_for_edit(grid, EditSpec.from_frames(0, 10, 10), SP)
    assert (out.rows[0] == SP.sep).all() and (out.rows[1] == SP.sep).all()
    assert list(out.segment_map[:2]) == [SEG_SEP, SEG_SEP]
    assert out.n_rows == 2 + 13 + 1
    np.testing.assert_array_equal(inverse_rearrange(out), grid)


def test_rearrange_rejects_frame_count_mismatch():
    grid = np.arange(40).reshape(10, 4)
    with pytest.raises(ValueError, match="expects 12 frames"):
        rearrange_for_edit(grid, EditSpec.from_frames(4, 6, 12), SP)


@settings(max_examples=40, deadline=None)
@given(
    t=st.integers(min_value=1, max_value=14),
    k=st.integers(min_value=1, max_value=4),
    smoothing=st.sampled_from([0, 2]),
    data=st.data(),
)
def test_rearrange_roundtrip(t, k, smoothing, data):
    a = data.draw(st.integers(0, t - 1))
    b = data.draw(st.integers(a + 1, t))
    grid = data.draw(
        st.lists(st.lists(st.integers(0, 63), min_size=k, max_size=k), min_size=t, max_size=t).map(np.array)
    )
    out = rearrange_for_edit(grid, EditSpec.from_frames(a, b, t), SP, smoothing_frames=smoothing)
    np.testing.assert_array_equal(inverse_rearrange(out), grid)
    # mask entries are always real codes, never specials
    assert (out.rows[out.loss_mask] < SP.sep).all()


def test_inverse_rearrange_checks_sep_rows():
    grid = np.arange(40).reshape(10, 4)
    out = rearrange_for_edit(grid, EditSpec.from_frames(4, 6, 10), SP)
    out.rows[7, 2] = 0
    with pytest.raises(ValueError, match="expected SEP row at 7"):
        inverse_rearrange(out)


def test_context_rows_empty_pre():
    post = np.arange(6).reshape(3, 2)
    rows, labels = context_rows(np.empty((0, 2), dtype=np.int64), post, SpecialIds(8))
    assert (rows[0] == 8).all()
    assert list(labels) == [SEG_SEP, SEG_POST, SEG_POST, SEG_POST, SEG_POST, SEG_SEP]


def test_edit_spec_from_frames_validation():
    EditSpec.from_frames(0, 1, 1)
    for a, b in [(-1, 3), (3, 3), (4, 3), (0, 11)]:
        with pytest.raises(ValueError, match="frame span"):
            EditSpec.from_frames(a, b, 10)


def test_edit_spec_from_sentences(tiny_corpus):
    song = tiny_corpus.songs[0]
    regions = song.sentence_regions()
    n = song.n_sentences
    spec = EditSpec.from_sentences(song, 1, n)
    assert (spec.frame_start, spec.frame_end) == (regions[0][0], regions[-1][1])
    spec = EditSpec.from_sentences(song, 2, 2)
    assert (spec.frame_start, spec.frame_end) == regions[1]
    for first, last in [(0, 1), (1, n + 1), (2, 1)]:
        with pytest.raises(ValueError, match="sentence span"):
            EditSpec.from_sentences(song, first, last)


def test_extract_context_tokens_slices_and_copies():
    grid = np.arange(40).reshape(10, 4)
    pair = extract_context_tokens(grid, EditSpec.from_frames(4, 6, 10))
    np.testing.assert_array_equal(pair.pre, grid[:4])
    np.testing.assert_array_equal(pair.post, grid[6:])
    pair.pre[0, 0] = -1
    assert grid[0, 0] == 0


def test_extract_context_frames_matches_token_route(tiny_corpus, tiny_tokenizer):
    song = tiny_corpus.songs[0]
    tokens = tiny_tokenizer.tokenize(song.vocal_frames, song.accomp_frames)
    spec = EditSpec.from_sentences(song, 1, 1)
    by_tokens = extract_context_tokens(tokens, spec)
    by_frames = extract_context_frames(
        tiny_tokenizer, song.vocal_frames, song.accomp_frames, spec, overlap_seconds=1.0, frame_rate=song.frame_rate
    )
    np.testing.assert_array_equal(by_frames.pre, by_tokens.pre)
    np.testing.assert_array_equal(by_frames.post, by_tokens.post)
    assert not by_frames.degraded


def test_extract_context_frames_degrades_without_material(tiny_corpus, tiny_tokenizer):
    song = tiny_corpus.songs[0]
    t = song.n_frames
    spec = EditSpec.from_frames(2, t - 2, t)
    pair = extract_context_frames(
        tiny_tokenizer, song.vocal_frames, song.accomp_frames, spec,
        overlap_seconds=t / song.frame_rate, frame_rate=song.frame_rate,
    )
    assert pair.degraded
    assert pair.overlap_pre == 0 and pair.overlap_post == 0
    assert pair.pre.shape == (2, 4) and pair.post.shape == (2, 4)
