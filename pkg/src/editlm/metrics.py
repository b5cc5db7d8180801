"""Evaluation: syllable error rate, feature-distribution distance, boundary
smoothness, and teacher-forced edit prediction accuracy.

Transcription exploits the synthetic grammar: a vocal feature frame is either
a syllable embedding plus the song's style vector or exactly zero, so nearest
neighbour against the syllable table (plus a zero silence candidate) followed
by run-length collapse recovers the sung syllable sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import torch

from .grammar import GrammarConfig, GrammarTables, SynthSong
from .lyrics import encode_song_lyrics
from .model import KIND_NONE, SongEditLM
from .sampling import Conditioning, score_continuation
from .tokenizer import Tokenizer
from .training import TrainConfig, build_sample, collate


# ============================================================
# Syllable error rate
# ============================================================


def transcribe_features(vocal: np.ndarray, tables: GrammarTables, style: np.ndarray) -> list[int]:
    """Per-frame nearest candidate (syllables plus silence), run-length collapsed."""
    n_syll = tables.syllable.shape[0]
    cands = np.concatenate(
        [tables.syllable + style[None, :], np.zeros((1, style.shape[0]), dtype=np.float32)]
    )  # row n_syll is silence
    d2 = ((vocal[:, None, :] - cands[None, :, :]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)  # ties resolve to the lowest index
    out: list[int] = []
    prev = -1
    for lab in labels:
        if lab != prev and lab != n_syll:
            out.append(int(lab))
        prev = lab
    return out


def transcribe_vocal(
    tokens: np.ndarray,
    tokenizer: Tokenizer,
    tables: GrammarTables,
    style_seed: int,
) -> list[int]:
    """Transcription of the vocal streams of a token grid."""
    _, vocal = tokenizer.decode_tokens(tokens)
    return transcribe_features(vocal, tables, tables.style_vector(style_seed, "vocal"))


def reference_syllables(song: SynthSong) -> list[int]:
    out: list[int] = []
    for sec in song.sections:
        if sec.is_lyric:
            for sent in sec.sentences:
                out.extend(int(s) for s in sent)
    return out


def edit_distance(a: list[int], b: list[int]) -> int:
    """Levenshtein distance over id sequences."""
    if not a:
        return len(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def syllable_error_rate(
    tokens: np.ndarray,
    song: SynthSong,
    tokenizer: Tokenizer,
    tables: GrammarTables,
) -> float:
    """Edit distance between transcribed and true syllables over true length."""
    ref = reference_syllables(song)
    if not ref:
        raise ValueError(f"song {song.song_id} has no syllables to score against")
    hyp = transcribe_vocal(tokens, tokenizer, tables, song.style_seed)
    return edit_distance(hyp, ref) / len(ref)


# ============================================================
# Feature-distribution distance
# ============================================================


@dataclass
class FrechetResult:
    value: float
    regularized: bool


def feature_matrix(vocal: np.ndarray, accomp: np.ndarray) -> np.ndarray:
    """Per-frame joint feature rows for distribution comparisons."""
    return np.concatenate([accomp, vocal], axis=1).astype(np.float64)


def frechet_distance(x: np.ndarray, y: np.ndarray, eps: float = 1e-6) -> FrechetResult:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) between frame sets.

    When the matrix square root fails to come back finite, eps*I is added to
    both covariances and the result is flagged as regularized.
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"need [N, D] frame sets with equal D, got {x.shape} and {y.shape}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("need at least 2 frames per set for a covariance")
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    mu1, mu2 = x.mean(0), y.mean(0)
    s1 = np.cov(x, rowvar=False)
    s2 = np.cov(y, rowvar=False)
    sq, _ = scipy.linalg.sqrtm(s1 @ s2, disp=False)
    regularized = False
    if not np.isfinite(sq).all():
        bump = eps * np.eye(x.shape[1])
        sq, _ = scipy.linalg.sqrtm((s1 + bump) @ (s2 + bump), disp=False)
        regularized = True
    if np.iscomplexobj(sq):
        sq = sq.real
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(sq))
    if -1e-6 < val < 0.0:
        val = 0.0
    return FrechetResult(value=val, regularized=regularized)


# ============================================================
# Boundary smoothness
# ============================================================


def boundary_smoothness(
    model: SongEditLM,
    pre: np.ndarray,
    post: np.ndarray,
    edit: np.ndarray,
    continuation: np.ndarray,
    cond: Conditioning,
) -> float:
    """Mean per-entry log-prob of the continuation frames right after the edit."""
    if continuation.shape[0] < 1:
        raise ValueError("continuation must have at least one frame")
    total = score_continuation(model, pre, post, edit, continuation, cond)
    return total / (continuation.shape[0] * model.config.k_streams)


# ============================================================
# Teacher-forced edit prediction accuracy
# ============================================================


@dataclass
class AccuracyItem:
    song_id: str
    span: tuple[int, int]
    correct: int
    total: int


def edit_prediction_accuracy(
    model: SongEditLM,
    tokenizer: Tokenizer,
    songs: list[SynthSong],
    grammar_config: GrammarConfig,
    seed: int,
    source_kind: int = KIND_NONE,
    prompt_seconds: float = 2.0,
    spans: Optional[list[tuple[int, int]]] = None,
) -> tuple[float, list[AccuracyItem]]:
    """Masked next-token accuracy over edit targets, one sampled span per song.

    Condition dropout and force-smoothing are disabled, so with a fixed seed
    the sampled spans are identical across calls and only source_kind varies;
    that makes paired comparisons between source conditions exact.
    """
    cfg = TrainConfig(cond_dropout=0.0, smoothing_prob=0.0, prompt_seconds=prompt_seconds)
    special = model.config.special
    items: list[AccuracyItem] = []
    correct = total = 0
    model.eval()
    with torch.no_grad():
        for i, song in enumerate(songs):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), i])))
            tokens = tokenizer.tokenize(song.vocal_frames, song.accomp_frames)
            sample = build_sample(
                song, tokens, encode_song_lyrics(song), tokenizer, grammar_config,
                cfg, special, rng,
                span=spans[i] if spans is not None else None,
                source_kind=source_kind,
            )
            batch = collate(model, [sample])
            logits = model.forward_batch(
                batch.prefix, batch.prefix_len, batch.rows, batch.rows_len,
                batch.memory, batch.memory_len, batch.frame_coords,
            )
            sel = logits[0][batch.mask[0]]
            tgt = batch.targets[0][batch.mask[0]]
            c = int((sel.argmax(-1) == tgt).sum())
            n = int(tgt.shape[0])
            items.append(AccuracyItem(song.song_id, sample.meta["span"], c, n))
            correct += c
            total += n
    return correct / max(total, 1), items
