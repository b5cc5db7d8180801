"""Synthetic two-track song domain.

A song is a sequence of tagged sections over a shared frame clock. Lyric
sections (verse/chorus/bridge) carry sentences of syllable ids aligned to
frames; accompaniment-only sections (intro/outro/inst) carry no lyrics. Frame
features are built from fixed seeded embedding tables, so the corpus is fully
deterministic given a config and the per-song style seed:

    vocal[t]  = syllable_table[syll(t)] + style_vec          (zero if no syllable)
    accomp[t] = section_table[tag(t)] + chord_table[(t // chord_period) % n_chords]
                + accomp_style_vec

The chord index runs on the absolute frame clock, not per section.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

# lyric-bearing tags first, accompaniment-only after; order is load-bearing
# (type-embedding rows and section table rows are indexed by this list)
LYRIC_TAGS = ("verse", "chorus", "bridge")
ACCOMP_TAGS = ("intro", "outro", "inst")
ALL_TAGS = LYRIC_TAGS + ACCOMP_TAGS
TAG_INDEX = {t: i for i, t in enumerate(ALL_TAGS)}


@dataclass
class GrammarConfig:
    frame_rate: int = 25
    feature_dim: int = 16
    syllable_vocab: int = 32
    n_chords: int = 4
    chord_period: int = 8
    embed_seed: int = 612
    table_std: float = 1.0
    style_std: float = 0.5
    noise_sigma: float = 0.01
    # section-plan sampling knobs (seconds)
    min_song_seconds: float = 30.0
    max_song_seconds: float = 60.0
    intro_seconds: tuple[float, float] = (2.0, 4.0)
    outro_seconds: tuple[float, float] = (2.0, 4.0)
    inst_seconds: tuple[float, float] = (2.0, 4.0)
    inst_prob: float = 0.3
    lyric_seconds: tuple[float, float] = (6.0, 12.0)
    sentences_per_section: tuple[int, int] = (1, 3)
    syllables_per_sentence: tuple[int, int] = (4, 8)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GrammarConfig":
        kwargs = {}
        for f_ in cls.__dataclass_fields__.values():
            if f_.name in d:
                v = d[f_.name]
                kwargs[f_.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class Section:
    tag: str
    duration_frames: int
    sentences: list[list[int]] = field(default_factory=list)

    @property
    def is_lyric(self) -> bool:
        return self.tag in LYRIC_TAGS


class GrammarTables:
    """Embedding tables drawn once from the config's embed seed."""

    def __init__(self, config: GrammarConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.embed_seed])))
        std = config.table_std
        self.syllable = rng.normal(0.0, std, (config.syllable_vocab, config.feature_dim)).astype(np.float32)
        self.section = rng.normal(0.0, std, (len(ALL_TAGS), config.feature_dim)).astype(np.float32)
        self.chord = rng.normal(0.0, std, (config.n_chords, config.feature_dim)).astype(np.float32)

    def style_vector(self, style_seed: int, track: str) -> np.ndarray:
        """Per-song style offset, derived (not tabulated) so any 64-bit seed works."""
        code = {"vocal": 1, "accomp": 2}[track]
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.config.embed_seed, int(style_seed), code]))
        )
        return rng.normal(0.0, self.config.style_std, self.config.feature_dim).astype(np.float32)


def validate_sections(sections: list[Section], config: GrammarConfig) -> None:
    if not sections:
        raise ValueError("song needs at least one section")
    for i, sec in enumerate(sections):
        if sec.tag not in TAG_INDEX:
            raise ValueError(f"section {i}: unknown tag {sec.tag!r}")
        if sec.duration_frames < 1:
            raise ValueError(f"section {i}: duration_frames must be >= 1")
        if sec.is_lyric:
            if not sec.sentences or any(len(s) == 0 for s in sec.sentences):
                raise ValueError(f"section {i} ({sec.tag}): lyric sections need non-empty sentences")
            n_syll = sum(len(s) for s in sec.sentences)
            if sec.duration_frames < n_syll:
                raise ValueError(
                    f"section {i} ({sec.tag}): {sec.duration_frames} frames cannot fit {n_syll} syllables"
                )
            for sent in sec.sentences:
                for s in sent:
                    if not 0 <= s < config.syllable_vocab:
                        raise ValueError(f"section {i}: syllable id {s} out of range")
        elif sec.sentences:
            raise ValueError(f"section {i} ({sec.tag}): accompaniment-only sections carry no sentences")


def align_syllables(sections: list[Section]) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Spread each lyric section's syllables evenly over its frames.

    Returns (per-frame syllable ids with -1 for none, per-sentence half-open
    frame spans in song order). Syllable j of n in a section of d frames covers
    frames [floor(j*d/n), floor((j+1)*d/n)), so every syllable gets >= 1 frame.
    """
    total = sum(sec.duration_frames for sec in sections)
    alignment = np.full(total, -1, dtype=np.int32)
    spans: list[tuple[int, int]] = []
    offset = 0
    for sec in sections:
        if sec.is_lyric:
            sylls = [s for sent in sec.sentences for s in sent]
            n = len(sylls)
            d = sec.duration_frames
            bounds = [offset + (j * d) // n for j in range(n + 1)]
            for j, s in enumerate(sylls):
                alignment[bounds[j]:bounds[j + 1]] = s
            k = 0
            for sent in sec.sentences:
                spans.append((bounds[k], bounds[k + len(sent)]))
                k += len(sent)
        offset += sec.duration_frames
    return alignment, spans


@dataclass
class SynthSong:
    song_id: str
    style_seed: int
    frame_rate: int
    sections: list[Section]
    vocal_frames: np.ndarray  # [T, D_f] float32
    accomp_frames: np.ndarray  # [T, D_f] float32
    syllable_alignment: np.ndarray  # [T] int32, -1 where no syllable

    @property
    def n_frames(self) -> int:
        return self.vocal_frames.shape[0]

    @property
    def n_sentences(self) -> int:
        return sum(len(sec.sentences) for sec in self.sections)

    def sentence_spans(self) -> list[tuple[int, int]]:
        _, spans = align_syllables(self.sections)
        return spans

    def sentence_regions(self) -> list[tuple[int, int]]:
        """Partition [0, T) into one region per sentence.

        Accompaniment material between sentences attaches to the FOLLOWING
        sentence's region (an intro belongs to sentence 1); trailing material
        attaches to the last region. Editing a sentence span then means
        editing the union of its regions, which makes a whole-song span cover
        every frame including intro and outro.
        """
        spans = self.sentence_spans()
        if not spans:
            raise ValueError(f"song {self.song_id} has no sentences")
        starts = [0] + [end for _, end in spans[:-1]]
        ends = [s for s in starts[1:]] + [self.n_frames]
        return list(zip(starts, ends))


def generate_song(
    song_id: str,
    style_seed: int,
    sections: list[Section],
    config: GrammarConfig,
    tables: Optional[GrammarTables] = None,
) -> SynthSong:
    validate_sections(sections, config)
    tables = tables or GrammarTables(config)
    alignment, _ = align_syllables(sections)
    total = alignment.shape[0]

    vocal_style = tables.style_vector(style_seed, "vocal")
    accomp_style = tables.style_vector(style_seed, "accomp")

    vocal = np.zeros((total, config.feature_dim), dtype=np.float32)
    sung = alignment >= 0
    vocal[sung] = tables.syllable[alignment[sung]] + vocal_style

    t = np.arange(total)
    chord_idx = (t // config.chord_period) % config.n_chords
    tag_per_frame = np.empty(total, dtype=np.int32)
    offset = 0
    for sec in sections:
        tag_per_frame[offset:offset + sec.duration_frames] = TAG_INDEX[sec.tag]
        offset += sec.duration_frames
    accomp = (tables.section[tag_per_frame] + tables.chord[chord_idx] + accomp_style).astype(np.float32)

    return SynthSong(
        song_id=song_id,
        style_seed=int(style_seed),
        frame_rate=config.frame_rate,
        sections=sections,
        vocal_frames=vocal,
        accomp_frames=accomp,
        syllable_alignment=alignment,
    )


@dataclass
class SeparationResult:
    vocal: np.ndarray  # noisy vocal track [T, D_f]
    accomp: np.ndarray  # bit-exact accompaniment [T, D_f]
    noise_sigma: float


def separate(song: SynthSong, config: GrammarConfig, rng_seed: int) -> SeparationResult:
    """Oracle source separation: exact accompaniment, vocal plus seeded noise.

    noise_sigma=0.01 against a unit-RMS vocal corresponds to 40 dB SNR.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(rng_seed)])))
    noise = rng.normal(0.0, config.noise_sigma, song.vocal_frames.shape).astype(np.float32)
    return SeparationResult(
        vocal=song.vocal_frames + noise,
        accomp=song.accomp_frames.copy(),
        noise_sigma=config.noise_sigma,
    )


@dataclass
class StylePrompt:
    tokens: np.ndarray  # [P, K] int64
    excerpt: tuple[int, int]  # half-open frame range the prompt was cut from
    target_range: tuple[int, int]  # disjoint range generation may target
    style_seed: int


def make_style_prompt(song: SynthSong, tokenizer, prompt_seconds: float) -> StylePrompt:
    """Cut a style prompt from the song's reserved tail region.

    The last prompt_seconds of the song are tokenized; the reported target
    range [0, T - P) never intersects the excerpt.
    """
    p = int(round(prompt_seconds * song.frame_rate))
    if p < 1:
        raise ValueError("prompt_seconds too small for one frame")
    if song.n_frames < p + song.frame_rate:
        raise ValueError(
            f"song {song.song_id}: length {song.n_frames} frames cannot reserve a "
            f"{p}-frame prompt plus 1 s of target material"
        )
    start = song.n_frames - p
    tokens = tokenizer.tokenize(song.vocal_frames[start:], song.accomp_frames[start:])
    return StylePrompt(
        tokens=tokens,
        excerpt=(start, song.n_frames),
        target_range=(0, start),
        style_seed=song.style_seed,
    )


def _frames(rng: np.random.Generator, seconds: tuple[float, float], rate: int) -> int:
    return max(1, int(round(rng.uniform(seconds[0], seconds[1]) * rate)))


def sample_sections(rng: np.random.Generator, config: GrammarConfig) -> list[Section]:
    """Draw a song plan: intro, alternating lyric blocks with optional inst, outro.

    Consecutive syllables never repeat (within and across sentences), which
    keeps run-length collapse of decoded frames unambiguous.
    """
    rate = config.frame_rate
    target = rng.uniform(config.min_song_seconds, config.max_song_seconds) * rate
    sections: list[Section] = [Section("intro", _frames(rng, config.intro_seconds, rate))]
    total = sections[0].duration_frames
    outro = _frames(rng, config.outro_seconds, rate)

    lyric_cycle = ("verse", "chorus", "verse", "chorus", "bridge")
    li = 0
    prev_syll = -1
    # at least one lyric block even when intro+outro exhaust the budget:
    # every song must have something to sing and something to edit
    while total + outro < target or li == 0:
        tag = lyric_cycle[li % len(lyric_cycle)]
        li += 1
        dur = _frames(rng, config.lyric_seconds, rate)
        n_sent = int(rng.integers(config.sentences_per_section[0], config.sentences_per_section[1] + 1))
        sentences = []
        for _ in range(n_sent):
            n_syll = int(rng.integers(config.syllables_per_sentence[0], config.syllables_per_sentence[1] + 1))
            sent = []
            for _ in range(n_syll):
                s = int(rng.integers(0, config.syllable_vocab))
                while s == prev_syll:
                    s = int(rng.integers(0, config.syllable_vocab))
                sent.append(s)
                prev_syll = s
            sentences.append(sent)
        n_total = sum(len(s) for s in sentences)
        dur = max(dur, n_total)
        sections.append(Section(tag, dur, sentences))
        total += dur
        if total + outro < target and rng.random() < config.inst_prob:
            d = _frames(rng, config.inst_seconds, rate)
            sections.append(Section("inst", d))
            total += d
            prev_syll = -1  # silence breaks adjacency
    sections.append(Section("outro", outro))
    return sections
