"""Delayed-pattern interleaving and edit rearrangement of token grids.

Streams are interleaved with a one-step-per-stream delay: stream k (0-based)
is shifted k frames back, and K-1 trailing rows complete the parallelogram,
so a [T, K] grid becomes [T+K-1, K] with PAD in the corners. For editing, the
grid splits at the edit span into three segments that are each delayed
independently and concatenated as

    [pre] SEP [post] SEP [edit] SEP

(empty segments keep their SEP but add no rows). With all segments non-empty
the result has exactly T + 3K rows. The loss mask marks the edit segment's
content entries; everything else is context the model conditions on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grammar import SynthSong


@dataclass(frozen=True)
class SpecialIds:
    """Reserved ids shared by all streams, placed directly above the codes."""

    codebook_size: int

    @property
    def sep(self) -> int:
        return self.codebook_size

    @property
    def pad(self) -> int:
        return self.codebook_size + 1

    @property
    def eos(self) -> int:
        return self.codebook_size + 2

    @property
    def vocab(self) -> int:
        return self.codebook_size + 3


def _delay_index(n_rows: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n_rows)[:, None] - np.arange(k)[None, :]
    valid = (idx >= 0) & (idx < n_rows - k + 1)
    return idx, valid


def delay_apply(grid: np.ndarray, pad_id: int) -> np.ndarray:
    """Shift stream k back k steps: out[t, k] = grid[t-k, k], PAD elsewhere."""
    t, k = grid.shape
    idx, valid = _delay_index(t + k - 1, k)
    out = np.full((t + k - 1, k), pad_id, dtype=np.int64)
    cols = np.broadcast_to(np.arange(k), idx.shape)
    out[valid] = grid[idx[valid], cols[valid]]
    return out


def delay_invert(rows: np.ndarray, pad_id: int) -> np.ndarray:
    """Undo delay_apply, validating PAD placement.

    PAD must appear exactly in the delay corners and nowhere inside the
    content diagonals; violations raise ValueError with the first offending
    position.
    """
    r, k = rows.shape
    t = r - k + 1
    if t < 0:
        raise ValueError(f"{r} rows cannot hold a {k}-stream delay pattern")
    idx, valid = _delay_index(r, k)
    is_pad = rows == pad_id
    bad = np.argwhere(valid == is_pad)  # content must be non-pad, corners pad
    if bad.size:
        row, col = bad[0]
        kind = "PAD inside content" if valid[row, col] else "non-PAD in corner"
        raise ValueError(f"invalid delay pattern at row {row}, stream {col}: {kind}")
    grid = np.empty((t, k), dtype=np.int64)
    for col in range(k):
        grid[:, col] = rows[col:col + t, col]
    return grid


@dataclass(frozen=True)
class EditSpec:
    """An edit target: a sentence span resolved to a half-open frame span."""

    first_sentence: int
    last_sentence: int
    frame_start: int
    frame_end: int
    n_frames: int

    @classmethod
    def from_sentences(cls, song: SynthSong, first: int, last: int) -> "EditSpec":
        n = song.n_sentences
        if not (1 <= first <= last <= n):
            raise ValueError(f"sentence span ({first}, {last}) invalid for {n} sentences")
        regions = song.sentence_regions()
        return cls(
            first_sentence=first,
            last_sentence=last,
            frame_start=regions[first - 1][0],
            frame_end=regions[last - 1][1],
            n_frames=song.n_frames,
        )

    @classmethod
    def from_frames(cls, start: int, end: int, n_frames: int) -> "EditSpec":
        spec = cls(0, 0, start, end, n_frames)
        spec.validate()
        return spec

    def validate(self) -> None:
        if not (0 <= self.frame_start < self.frame_end <= self.n_frames):
            raise ValueError(
                f"frame span [{self.frame_start}, {self.frame_end}) invalid for {self.n_frames} frames"
            )

    @property
    def edit_len(self) -> int:
        return self.frame_end - self.frame_start


SEG_PRE, SEG_POST, SEG_EDIT, SEG_SEP = 0, 1, 2, 3


def segment_frame_coords(start: int, n_frames: int, k: int) -> np.ndarray:
    """Base-frame coordinate of each row in one delayed segment plus its SEP row.

    Row r of a delayed block holds stream 0's frame start+r (later streams lag
    by their delay), so coordinates simply count up from the segment start;
    flush rows and the SEP continue the count past the content.
    """
    block = n_frames + k - 1 if n_frames > 0 else 0
    return np.arange(start, start + block + 1, dtype=np.int64)


def context_frame_coords(pre_len: int, post_start: int, post_len: int, k: int) -> np.ndarray:
    """Frame coordinates for the [pre] SEP [post] SEP block of context_rows."""
    return np.concatenate(
        [segment_frame_coords(0, pre_len, k), segment_frame_coords(post_start, post_len, k)]
    )


@dataclass
class RearrangedSequence:
    rows: np.ndarray  # [N, K] int64
    segment_map: np.ndarray  # [N] int8, SEG_* labels
    loss_mask: np.ndarray  # [N, K] bool, true on edit-segment content entries
    spec: EditSpec
    special: SpecialIds
    edit_block_start: int  # row index of the edit segment's first delayed row
    edit_content_len: int  # edit frames incl. any smoothing extension
    smoothing_frames: int
    frame_coords: Optional[np.ndarray] = None  # [N] int64 base-frame coordinate per row
    delay_applied: bool = True

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]


def context_rows(pre: np.ndarray, post: np.ndarray, special: SpecialIds) -> tuple[np.ndarray, np.ndarray]:
    """Delayed [pre] SEP [post] SEP context block shared by training and sampling."""
    k = pre.shape[1] if pre.size else post.shape[1]
    parts, labels = [], []
    for seg, label in ((pre, SEG_PRE), (post, SEG_POST)):
        if seg.shape[0] > 0:
            d = delay_apply(seg, special.pad)
            parts.append(d)
            labels.append(np.full(d.shape[0], label, dtype=np.int8))
        parts.append(np.full((1, k), special.sep, dtype=np.int64))
        labels.append(np.full(1, SEG_SEP, dtype=np.int8))
    return np.concatenate(parts, axis=0), np.concatenate(labels)


def rearrange_for_edit(
    grid: np.ndarray,
    spec: EditSpec,
    special: SpecialIds,
    smoothing_frames: int = 0,
) -> RearrangedSequence:
    """Rearrange a [T, K] grid into context segments plus the edit segment.

    smoothing_frames > 0 extends the edit segment's content with that many
    frames copied from the start of the following context (clipped to what
    exists); the post segment itself is unchanged. All streams of a frame
    move together, so accompaniment tokens inside the span are edited too.
    """
    t, k = grid.shape
    spec.validate()
    if spec.n_frames != t:
        raise ValueError(f"spec expects {spec.n_frames} frames, grid has {t}")
    a, b = spec.frame_start, spec.frame_end
    s_eff = min(max(0, smoothing_frames), t - b)
    pre, post = grid[:a], grid[b:]
    edit = grid[a:b + s_eff]  # smoothing copies the following context's head

    rows, labels = context_rows(pre, post, special)
    d_edit = delay_apply(edit, special.pad)
    edit_block_start = rows.shape[0]
    rows = np.concatenate([rows, d_edit, np.full((1, k), special.sep, dtype=np.int64)], axis=0)
    labels = np.concatenate([labels, np.full(d_edit.shape[0], SEG_EDIT, dtype=np.int8), np.full(1, SEG_SEP, dtype=np.int8)])

    mask = np.zeros(rows.shape, dtype=bool)
    _, valid = _delay_index(d_edit.shape[0], k)
    mask[edit_block_start:edit_block_start + d_edit.shape[0]] = valid

    coords = np.concatenate(
        [context_frame_coords(a, b, t - b, k), segment_frame_coords(a, edit.shape[0], k)]
    )

    return RearrangedSequence(
        rows=rows,
        segment_map=labels,
        loss_mask=mask,
        spec=spec,
        special=special,
        edit_block_start=edit_block_start,
        edit_content_len=edit.shape[0],
        smoothing_frames=s_eff,
        frame_coords=coords,
    )


def inverse_rearrange(reseq: RearrangedSequence) -> np.ndarray:
    """Recover the original [T, K] grid (smoothing extension dropped)."""
    spec, special = reseq.spec, reseq.special
    k = reseq.rows.shape[1]
    a, b, t = spec.frame_start, spec.frame_end, spec.n_frames
    lengths = [a, t - b, reseq.edit_content_len]
    cursor = 0
    segments = []
    for n in lengths:
        block = n + k - 1 if n > 0 else 0
        seg_rows = reseq.rows[cursor:cursor + block]
        if (reseq.rows[cursor + block] != special.sep).any():
            raise ValueError(f"expected SEP row at {cursor + block}")
        segments.append(delay_invert(seg_rows, special.pad) if n > 0 else np.empty((0, k), dtype=np.int64))
        cursor += block + 1
    if cursor != reseq.n_rows:
        raise ValueError(f"row count mismatch: consumed {cursor} of {reseq.n_rows}")
    pre, post, edit = segments
    return np.concatenate([pre, edit[:b - a], post], axis=0)


@dataclass
class ContextPair:
    pre: np.ndarray  # [A-1, K]
    post: np.ndarray  # [T-B, K]
    overlap_pre: int
    overlap_post: int
    degraded: bool = False


def extract_context_tokens(tokens: np.ndarray, spec: EditSpec) -> ContextPair:
    spec.validate()
    if spec.n_frames != tokens.shape[0]:
        raise ValueError(f"spec expects {spec.n_frames} frames, grid has {tokens.shape[0]}")
    return ContextPair(pre=tokens[:spec.frame_start].copy(), post=tokens[spec.frame_end:].copy(), overlap_pre=0, overlap_post=0)


def extract_context_frames(
    tokenizer,
    vocal: np.ndarray,
    accomp: np.ndarray,
    spec: EditSpec,
    overlap_seconds: float,
    frame_rate: int,
) -> ContextPair:
    """Tokenize contexts from frames with a tokenization overlap.

    Each side is tokenized with up to overlap_seconds of extra material toward
    the edit region, and the overlap's token rows are dropped afterwards. A
    side without enough material degrades to zero overlap and sets the
    degraded flag. With a frame-local tokenizer both paths match
    extract_context_tokens exactly; the overlap matters for tokenizers with
    receptive fields wider than one frame.
    """
    t = vocal.shape[0]
    spec.validate()
    if spec.n_frames != t:
        raise ValueError(f"spec expects {spec.n_frames} frames, tracks have {t}")
    want = int(round(overlap_seconds * frame_rate))
    a, b = spec.frame_start, spec.frame_end
    degraded = False

    ovl_pre = want if a + want <= t else 0
    ovl_post = want if b - want >= 0 else 0
    if a > 0 and ovl_pre < want:
        degraded = True
    if b < t and ovl_post < want:
        degraded = True

    if a > 0:
        pre_tok = tokenizer.tokenize(vocal[:a + ovl_pre], accomp[:a + ovl_pre])
        pre = pre_tok[:a] if ovl_pre else pre_tok
    else:
        k = tokenizer.k_streams
        pre, ovl_pre = np.empty((0, k), dtype=np.int64), 0
    if b < t:
        post_tok = tokenizer.tokenize(vocal[b - ovl_post:], accomp[b - ovl_post:])
        post = post_tok[ovl_post:]
    else:
        k = tokenizer.k_streams
        post, ovl_post = np.empty((0, k), dtype=np.int64), 0
    return ContextPair(pre=pre, post=post, overlap_pre=ovl_pre, overlap_post=ovl_post, degraded=degraded)
