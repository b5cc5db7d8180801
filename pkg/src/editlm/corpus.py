"""Corpus construction and the self-describing corpus file.

A corpus file is a blob container whose manifest holds the grammar config,
the embedding-table seed, and per-song metadata (id, style seed, section
plans); frame matrices are stored as float32 blobs with explicit shapes.
Syllable alignment is recomputed from the section plans on read, so
read(write(corpus)) reproduces every song bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blobio
from .grammar import (
    GrammarConfig,
    GrammarTables,
    Section,
    SynthSong,
    align_syllables,
    generate_song,
    sample_sections,
)


@dataclass
class Corpus:
    config: GrammarConfig
    seed: int
    songs: list[SynthSong]

    def __len__(self) -> int:
        return len(self.songs)


def build_corpus(n_songs: int, seed: int, config: GrammarConfig) -> Corpus:
    """Generate n songs deterministically from one corpus seed."""
    if n_songs < 1:
        raise ValueError("n_songs must be >= 1")
    tables = GrammarTables(config)
    songs = []
    for i in range(n_songs):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), i])))
        style_seed = int(rng.integers(0, 2**62))
        sections = sample_sections(rng, config)
        songs.append(generate_song(f"song{i:05d}", style_seed, sections, config, tables))
    return Corpus(config=config, seed=int(seed), songs=songs)


def _sections_meta(sections: list[Section]) -> list[dict]:
    return [
        {"tag": s.tag, "duration_frames": int(s.duration_frames), "sentences": [[int(x) for x in sent] for sent in s.sentences]}
        for s in sections
    ]


def _sections_from_meta(meta: list[dict], where: str) -> list[Section]:
    out = []
    for j, m in enumerate(meta):
        try:
            out.append(Section(m["tag"], int(m["duration_frames"]), [list(map(int, s)) for s in m.get("sentences", [])]))
        except (KeyError, TypeError) as exc:
            raise blobio.BlobFormatError(f"{where}: bad section record {j}: {exc}") from exc
    return out


def write_corpus(path: str, corpus: Corpus) -> None:
    manifest = {
        "kind": "corpus",
        "grammar": corpus.config.to_dict(),
        "seed": corpus.seed,
        "songs": [
            {"song_id": s.song_id, "style_seed": s.style_seed, "sections": _sections_meta(s.sections)}
            for s in corpus.songs
        ],
    }
    blobs = []
    for i, s in enumerate(corpus.songs):
        blobs.append((f"song{i}/vocal", s.vocal_frames))
        blobs.append((f"song{i}/accomp", s.accomp_frames))
    blobio.write_container(path, manifest, blobs)


def read_corpus(path: str) -> Corpus:
    manifest, blobs = blobio.read_container(path)
    if manifest.get("kind") != "corpus":
        raise blobio.BlobFormatError(f"{path}: not a corpus file (kind={manifest.get('kind')!r})")
    config = GrammarConfig.from_dict(manifest["grammar"])
    songs = []
    for i, meta in enumerate(manifest["songs"]):
        where = f"{path}: song record {i}"
        sections = _sections_from_meta(meta["sections"], where)
        vocal = blobs.get(f"song{i}/vocal")
        accomp = blobs.get(f"song{i}/accomp")
        if vocal is None or accomp is None:
            raise blobio.BlobFormatError(f"{where}: missing frame blobs")
        alignment, _ = align_syllables(sections)
        if alignment.shape[0] != vocal.shape[0]:
            raise blobio.BlobFormatError(f"{where}: section durations sum {alignment.shape[0]} != frames {vocal.shape[0]}")
        songs.append(
            SynthSong(
                song_id=meta["song_id"],
                style_seed=int(meta["style_seed"]),
                frame_rate=config.frame_rate,
                sections=sections,
                vocal_frames=vocal.astype(np.float32, copy=False),
                accomp_frames=accomp.astype(np.float32, copy=False),
                syllable_alignment=alignment,
            )
        )
    return Corpus(config=config, seed=int(manifest["seed"]), songs=songs)
