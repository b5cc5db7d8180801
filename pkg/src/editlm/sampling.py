"""Autoregressive edit generation, candidate selection, and story mode.

Generation fills the third (edit) segment after priming the model on
[style][lyrics][pre] SEP [post] SEP. Rows are sampled one at a time with
classifier-free guidance; per stream, EOS is emitted only when it has the
strict argmax probability, otherwise EOS is removed and sampling draws from
the renormalized top-k. A frame terminates the edit when stream 0 emits EOS:
that fixes the content length, and the remaining rows are flushed
deterministically (still-pending streams keep sampling without EOS, finished
positions are PAD). The collected rows form an exact delay parallelogram, so
inverting the delay yields the [T_edit, K] grid with no special ids.

Candidate selection follows the rescoring rule: N candidates (the first pass
plus N-1 resyntheses of its final resynthesis_seconds), each scored by the
purely conditional teacher-forced log-likelihood of the first rescore_lambda
frames of the true following context appended after the candidate; the best
score wins, ties to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import blobio
from .codec import SpecialIds, context_frame_coords, context_rows, delay_apply, delay_invert
from .grammar import Section
from .lyrics import TextEntry, encode_sections
from .model import KIND_NONE, SongEditLM, cfg_logits


@dataclass
class SampleConfig:
    top_k: int = 32
    guidance: float = 1.5
    max_new_frames: int = 512
    n_candidates: int = 5
    resynthesis_seconds: float = 3.0
    rescore_lambda: int = 25

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Conditioning:
    style_tokens: Optional[np.ndarray] = None
    entries: Optional[list[TextEntry]] = None
    source_kind: int = KIND_NONE
    source_tokens: Optional[np.ndarray] = None


@dataclass
class EditResult:
    tokens: np.ndarray  # [T_edit, K]
    truncated: bool
    rows_generated: int


def sample_step(
    logits: torch.Tensor,
    special: SpecialIds,
    top_k: int,
    gen: torch.Generator,
    allow_eos: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Sample one id per stream from [K, V] logits.

    SEP and PAD are never sampled. Per stream: if EOS is allowed and holds the
    strict argmax, EOS is emitted; otherwise EOS is removed and the draw is
    over the top_k remaining ids, renormalized.
    """
    k, v = logits.shape
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        row = logits[i].clone()
        row[special.sep] = float("-inf")
        row[special.pad] = float("-inf")
        eos_ok = allow_eos is None or bool(allow_eos[i])
        if eos_ok:
            eos_logit = row[special.eos].clone()
            row[special.eos] = float("-inf")
            if eos_logit > row.max():
                out[i] = special.eos
                continue
        else:
            row[special.eos] = float("-inf")
        kk = min(top_k, int(torch.isfinite(row).sum()))
        vals, idx = torch.topk(row, kk)
        pick = torch.multinomial(torch.softmax(vals, dim=0), 1, generator=gen)
        out[i] = int(idx[pick])
    return out


def _context_coords(pre: np.ndarray, post: np.ndarray, cond: Conditioning, k: int) -> np.ndarray:
    """Frame coordinates of the [pre] SEP [post] SEP block.

    The post segment always reaches the song's end, so with a source grid
    present its start is the grid length minus the post length; without one
    the coordinates only meet a single-row memory and any placement works.
    """
    a = pre.shape[0]
    post_start = a
    if cond.source_tokens is not None:
        post_start = max(a, cond.source_tokens.shape[0] - post.shape[0])
    return context_frame_coords(a, post_start, post.shape[0], k)


def _prime_state(
    model: SongEditLM,
    pre: np.ndarray,
    post: np.ndarray,
    cond: Conditioning,
    guidance: float,
    capacity_rows: int,
) -> tuple[dict, torch.Tensor, np.ndarray]:
    """Prime conditional (and, under guidance, unconditional) branches together."""
    special = model.config.special
    ctx, _ = context_rows(pre, post, special)
    coords = _context_coords(pre, post, cond, model.config.k_streams)
    prefixes = [model.build_prefix(cond.style_tokens, cond.entries)]
    memories = [None]
    if model.config.cross_attention_enabled:
        memories = [model.encode_source(cond.source_tokens, cond.source_kind)]
    if guidance != 1.0:
        prefixes.append(model.build_prefix(cond.style_tokens, cond.entries, drop_style=True, drop_lyrics=True))
        if model.config.cross_attention_enabled:
            memories.append(model.encode_source(None, KIND_NONE))
    prefix = torch.stack(prefixes, dim=0)
    memory = memory_mask = None
    if model.config.cross_attention_enabled:
        m_max = max(m.shape[0] for m in memories)
        memory = torch.zeros(len(memories), m_max, model.config.model_dim)
        memory_mask = torch.zeros(len(memories), m_max, dtype=torch.bool)
        for i, m in enumerate(memories):
            memory[i, :m.shape[0]] = m
            memory_mask[i, :m.shape[0]] = True
    state, logits = model.prime(
        prefix, ctx, memory=memory, memory_mask=memory_mask, frame_coords=coords,
        capacity=prefix.shape[1] + ctx.shape[0] + capacity_rows,
    )
    return state, logits, ctx


def generate_edit(
    model: SongEditLM,
    pre: np.ndarray,
    post: np.ndarray,
    cond: Conditioning,
    config: SampleConfig,
    seed: int,
    forced_prefix: Optional[np.ndarray] = None,
) -> EditResult:
    """Sample the edit segment given both contexts and the conditioning."""
    special = model.config.special
    k = model.config.k_streams
    gen = torch.Generator().manual_seed(int(seed))
    forced_len = 0 if forced_prefix is None else forced_prefix.shape[0]
    if forced_len > config.max_new_frames:
        raise ValueError("forced_prefix longer than max_new_frames")

    with torch.no_grad():
        state, logits_b, _ = _prime_state(
            model, pre, post, cond, config.guidance, capacity_rows=config.max_new_frames + k + 2
        )
        rows_fed: list[np.ndarray] = []
        t_edit: Optional[int] = None
        truncated = False
        t = 0
        while True:
            if t_edit is not None and t >= t_edit + k - 1:
                break
            if config.guidance != 1.0:
                logits = cfg_logits(logits_b[0], logits_b[1], config.guidance)
            else:
                logits = logits_b[0]
            if t_edit is None and t >= config.max_new_frames:
                t_edit = t
                truncated = True
            allow = np.zeros(k, dtype=bool)
            allow[0] = t_edit is None and t >= forced_len
            ids = sample_step(logits, special, config.top_k, gen, allow_eos=allow)
            if allow[0] and ids[0] == special.eos:
                t_edit = t
            row = np.empty(k, dtype=np.int64)
            for s in range(k):
                c = t - s
                if c < 0 or (t_edit is not None and c >= t_edit):
                    row[s] = special.pad
                elif c < forced_len:
                    row[s] = forced_prefix[c, s]
                else:
                    row[s] = ids[s]
            rows_fed.append(row)
            t += 1
            if t_edit is not None and t >= t_edit + k - 1:
                break
            logits_b = model.step(state, row, frame=pre.shape[0] + t - 1)

    if t_edit is None:
        t_edit = 0
    if t_edit == 0:
        tokens = np.empty((0, k), dtype=np.int64)
    else:
        tokens = delay_invert(np.stack(rows_fed), special.pad)
    return EditResult(tokens=tokens, truncated=truncated, rows_generated=len(rows_fed))


def score_continuation(
    model: SongEditLM,
    pre: np.ndarray,
    post: np.ndarray,
    candidate: np.ndarray,
    continuation: np.ndarray,
    cond: Conditioning,
) -> float:
    """Teacher-forced log-likelihood of the continuation after the candidate.

    Purely conditional: no guidance enters the score. The continuation is laid
    out exactly like a force-smoothing extension of the edit segment.
    """
    special = model.config.special
    k = model.config.k_streams
    content = np.concatenate([candidate, continuation], axis=0)
    ctx, _ = context_rows(pre, post, special)
    d_content = delay_apply(content, special.pad)
    rows = np.concatenate([ctx, d_content], axis=0)
    a = pre.shape[0]
    coords = np.concatenate([
        _context_coords(pre, post, cond, k),
        np.arange(a, a + d_content.shape[0], dtype=np.int64),
    ])
    with torch.no_grad():
        prefix = model.build_prefix(cond.style_tokens, cond.entries)
        memory = None
        if model.config.cross_attention_enabled:
            memory = model.encode_source(cond.source_tokens, cond.source_kind)
        logits = model.forward(prefix, torch.from_numpy(rows), memory, frame_coords=coords)
        logp = torch.log_softmax(logits, dim=-1)
    base = ctx.shape[0]
    total = 0.0
    for s in range(k):
        for c in range(candidate.shape[0], content.shape[0]):
            total += float(logp[base + c + s, s, content[c, s]])
    return total


@dataclass
class SelectionResult:
    chosen: EditResult
    scores: list[float]
    chosen_index: int
    skipped: bool


def candidate_select(
    model: SongEditLM,
    pre: np.ndarray,
    post: np.ndarray,
    cond: Conditioning,
    config: SampleConfig,
    seed: int,
    first_pass: EditResult,
    frame_rate: int,
) -> SelectionResult:
    """Pick the best of N candidates by following-context likelihood."""
    lam = min(config.rescore_lambda, post.shape[0])
    if lam < 1:
        return SelectionResult(chosen=first_pass, scores=[], chosen_index=0, skipped=True)
    continuation = post[:lam]
    resynth = int(round(config.resynthesis_seconds * frame_rate))
    keep = max(0, first_pass.tokens.shape[0] - resynth)
    candidates = [first_pass]
    for i in range(1, config.n_candidates):
        candidates.append(
            generate_edit(
                model, pre, post, cond, config,
                seed=int(np.random.SeedSequence([int(seed), 73, i]).generate_state(1)[0]),
                forced_prefix=first_pass.tokens[:keep],
            )
        )
    scores = [
        score_continuation(model, pre, post, c.tokens, continuation, cond) for c in candidates
    ]
    idx = int(np.argmax(scores))  # ties resolve to the lowest index
    return SelectionResult(chosen=candidates[idx], scores=scores, chosen_index=idx, skipped=False)


def splice_edit(tokens: np.ndarray, frame_start: int, frame_end: int, new_edit: np.ndarray) -> np.ndarray:
    """Replace [frame_start, frame_end) of a token grid with the new segment."""
    return np.concatenate([tokens[:frame_start], new_edit, tokens[frame_end:]], axis=0)


# ============================================================
# Story mode
# ============================================================


@dataclass
class StoryConfig:
    mode: str = "single"  # "single" (one prompt, long stride) or "multi" (alternating prompts)
    stride_seconds: Optional[float] = None  # default 60 for single, 5 for multi
    inst_tail_seconds: float = 2.0  # multi mode appends this much instrumental per round
    round_margin_frames: int = 25

    def stride(self, frame_rate: int) -> int:
        secs = self.stride_seconds if self.stride_seconds is not None else (60.0 if self.mode == "single" else 5.0)
        return max(1, int(round(secs * frame_rate)))


@dataclass
class RoundInfo:
    round_index: int
    prompt_index: int
    prefix_frames: int
    new_frames: int
    truncated: bool


@dataclass
class StoryResult:
    tokens: np.ndarray
    rounds: list[RoundInfo] = field(default_factory=list)


def story_mode(
    model: SongEditLM,
    rounds: list[list[Section]],
    prompts: list[np.ndarray],
    config: SampleConfig,
    story: StoryConfig,
    frame_rate: int,
    seed: int,
) -> StoryResult:
    """Generate a long song round by round.

    Each round continues from the last stride frames of accumulated output
    (capped by what exists) and is conditioned on its own sections' lyric
    view; prompts alternate per round in multi mode. One round with no prefix
    is plain generation from scratch.
    """
    if story.mode not in ("single", "multi"):
        raise ValueError(f"unknown story mode {story.mode!r}")
    if not rounds:
        raise ValueError("story needs at least one round")
    if not prompts:
        raise ValueError("story needs at least one style prompt")
    k = model.config.k_streams
    stride = story.stride(frame_rate)
    acc = np.empty((0, k), dtype=np.int64)
    infos: list[RoundInfo] = []
    for r, sections in enumerate(rounds):
        secs = list(sections)
        if story.mode == "multi" and story.inst_tail_seconds > 0:
            secs.append(Section("inst", max(1, int(round(story.inst_tail_seconds * frame_rate)))))
        entries = encode_sections(secs).entries
        prompt_index = r % len(prompts)
        pre = acc[-stride:] if stride < acc.shape[0] else acc
        expected = sum(s.duration_frames for s in secs)
        round_cfg = SampleConfig(**{**config.to_dict(), "max_new_frames": expected + story.round_margin_frames})
        res = generate_edit(
            model,
            pre,
            np.empty((0, k), dtype=np.int64),
            Conditioning(style_tokens=prompts[prompt_index], entries=entries),
            round_cfg,
            seed=int(np.random.SeedSequence([int(seed), 211, r]).generate_state(1)[0]),
        )
        acc = np.concatenate([acc, res.tokens], axis=0)
        infos.append(
            RoundInfo(
                round_index=r,
                prompt_index=prompt_index,
                prefix_frames=pre.shape[0],
                new_frames=res.tokens.shape[0],
                truncated=res.truncated,
            )
        )
    return StoryResult(tokens=acc, rounds=infos)


# ============================================================
# Token files
# ============================================================


def write_tokens(path: str, tokens: np.ndarray, meta: dict) -> None:
    manifest = {"kind": "tokens", **meta}
    blobio.write_container(path, manifest, [("tokens", np.ascontiguousarray(tokens, dtype=np.int64))])


def read_tokens(path: str) -> tuple[np.ndarray, dict]:
    manifest, blobs = blobio.read_container(path)
    if manifest.get("kind") != "tokens":
        raise blobio.BlobFormatError(f"{path}: not a token file (kind={manifest.get('kind')!r})")
    return blobs["tokens"], manifest
