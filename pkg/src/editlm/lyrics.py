"""Structure-guided lyric encoding.

Lyrics enter the model as a flat entry sequence in song order. Each sung
syllable becomes one entry carrying its symbol id and the structure tag of its
section; accompaniment-only sections become runs of duration tokens (one per
started frames_per_duration_token frames) carrying only the tag. Editing is
context-free on the lyric side: the edit view keeps exactly the edited
sentences plus the accompaniment-only tokens whose sections belong to the
edited sentence regions (a section between two sentences belongs to the
following sentence's region, so the whole-song view equals the full encoding).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .grammar import ACCOMP_TAGS, LYRIC_TAGS, TAG_INDEX, Section, SynthSong

FRAMES_PER_DURATION_TOKEN = 25


@dataclass(frozen=True)
class TextEntry:
    tag_id: int
    symbol_id: Optional[int]  # None for duration tokens
    is_duration_token: bool
    sentence_index: Optional[int]  # 1-based, lyric entries only
    position: Optional[int]  # insertion point (sentences before it), duration entries only


@dataclass
class TextTokenSeq:
    entries: list[TextEntry]
    n_sentences: int

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TextTokenSeq)
            and self.n_sentences == other.n_sentences
            and self.entries == other.entries
        )


@dataclass(frozen=True)
class SentenceRecord:
    index: int  # 1-based, contiguous
    tag: str
    syllables: tuple[int, ...]


@dataclass(frozen=True)
class NonvocalRecord:
    tag: str
    duration_frames: int
    position: int  # number of sentences preceding this section


def records_from_sections(sections: list[Section]) -> tuple[list[SentenceRecord], list[NonvocalRecord]]:
    """Flatten an ordered section list into sentence and non-vocal records."""
    sentences: list[SentenceRecord] = []
    nonvocal: list[NonvocalRecord] = []
    idx = 0
    for sec in sections:
        if sec.is_lyric:
            for sent in sec.sentences:
                idx += 1
                sentences.append(SentenceRecord(idx, sec.tag, tuple(sent)))
        else:
            nonvocal.append(NonvocalRecord(sec.tag, sec.duration_frames, idx))
    return sentences, nonvocal


def song_text_inputs(song: SynthSong) -> tuple[list[SentenceRecord], list[NonvocalRecord]]:
    return records_from_sections(song.sections)


def duration_token_count(duration_frames: int, frames_per_token: int = FRAMES_PER_DURATION_TOKEN) -> int:
    if duration_frames < 1:
        raise ValueError("duration_frames must be >= 1")
    return -(-duration_frames // frames_per_token)  # ceil division


def encode_lyrics(
    sentences: list[SentenceRecord],
    nonvocal_sections: list[NonvocalRecord],
    frames_per_token: int = FRAMES_PER_DURATION_TOKEN,
) -> TextTokenSeq:
    """Interleave syllable entries and duration-token runs in song order."""
    for i, sent in enumerate(sentences):
        if sent.index != i + 1:
            raise ValueError(f"sentence indices must be 1-based contiguous, got {sent.index} at slot {i}")
        if sent.tag not in LYRIC_TAGS:
            raise ValueError(f"sentence {sent.index}: tag {sent.tag!r} is not a lyric tag")
        if not sent.syllables:
            raise ValueError(f"sentence {sent.index}: empty syllable list")
    n = len(sentences)
    for sec in nonvocal_sections:
        if sec.tag not in ACCOMP_TAGS:
            raise ValueError(f"non-vocal section tag {sec.tag!r} is not accompaniment-only")
        if not 0 <= sec.position <= n:
            raise ValueError(f"non-vocal section position {sec.position} outside [0, {n}]")

    entries: list[TextEntry] = []

    def emit_nonvocal(position: int) -> None:
        for sec in nonvocal_sections:
            if sec.position == position:
                count = duration_token_count(sec.duration_frames, frames_per_token)
                for _ in range(count):
                    entries.append(TextEntry(TAG_INDEX[sec.tag], None, True, None, position))

    emit_nonvocal(0)
    for sent in sentences:
        for s in sent.syllables:
            entries.append(TextEntry(TAG_INDEX[sent.tag], int(s), False, sent.index, None))
        emit_nonvocal(sent.index)
    return TextTokenSeq(entries=entries, n_sentences=n)


def encode_song_lyrics(song: SynthSong, frames_per_token: int = FRAMES_PER_DURATION_TOKEN) -> TextTokenSeq:
    sentences, nonvocal = song_text_inputs(song)
    return encode_lyrics(sentences, nonvocal, frames_per_token)


def edit_view(full: TextTokenSeq, span: tuple[int, int]) -> TextTokenSeq:
    """Restrict an encoding to the edited sentence span.

    Keeps lyric entries of sentences first..last and duration tokens whose
    section falls inside the edited frame region: a section inserted at
    position p belongs to sentence p+1's region (trailing sections to the
    last sentence), matching the frame spans used for token rearrangement.
    """
    first, last = span
    n = full.n_sentences
    if not (1 <= first <= last <= n):
        raise ValueError(f"sentence span {span} invalid for {n} sentences")
    kept = []
    for e in full.entries:
        if e.is_duration_token:
            region = e.position + 1 if e.position < n else n
            if first <= region <= last:
                kept.append(e)
        elif first <= e.sentence_index <= last:
            kept.append(e)
    return TextTokenSeq(entries=kept, n_sentences=n)


def encode_sections(sections: list[Section], frames_per_token: int = FRAMES_PER_DURATION_TOKEN) -> TextTokenSeq:
    """Encode a bare section list (story rounds, external lyric files)."""
    sentences, nonvocal = records_from_sections(sections)
    return encode_lyrics(sentences, nonvocal, frames_per_token)
