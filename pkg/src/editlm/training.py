"""Training loop for the edit-rearranged LM.

Each sample is one song with a random sentence span: the token grid is
rearranged into [pre] SEP [post] SEP [edit] SEP, the loss covers only the
edit segment's content entries, and each stream is additionally supervised to
emit EOS right after its delayed content run (the last stream's EOS lands on
the terminal SEP row). With probability smoothing_prob the edit content is
extended by smoothing_frames frames copied from the true following context,
which teaches the model to rejoin the post context instead of drifting.

Conditions are the style prompt (cut from the song tail), the edited
sentences' lyric view, and a separated-track source grid drawn uniformly from
{vocal, accomp, none}; each is independently dropped with cond_dropout and
replaced by its null embedding so classifier-free guidance has an
unconditional branch to contrast against.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np
import torch

from . import blobio
from .codec import EditSpec, RearrangedSequence, SpecialIds, rearrange_for_edit
from .corpus import Corpus
from .grammar import separate
from .lyrics import TextEntry, edit_view, encode_song_lyrics
from .model import KIND_ACCOMP, KIND_NONE, KIND_VOCAL, ModelConfig, SongEditLM
from .tokenizer import DivergenceError, Tokenizer


class EmptyLossMaskError(ValueError):
    """Raised when a batch contains no maskable positions."""


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    cond_dropout: float = 0.2
    smoothing_prob: float = 0.1
    smoothing_frames: int = 25
    prompt_seconds: float = 10.0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class TrainSample:
    rows: np.ndarray  # [N, K] input grid
    targets: np.ndarray  # [N, K] next-token targets aligned to rows
    mask: np.ndarray  # [N, K] bool
    frame_coords: np.ndarray  # [N] base frame per row, for cross-attention rotary
    style_tokens: Optional[np.ndarray]
    entries: Optional[list[TextEntry]]
    drop_style: bool
    drop_lyrics: bool
    source_kind: int
    source_tokens: Optional[np.ndarray]
    meta: dict = field(default_factory=dict)


def make_targets(reseq: RearrangedSequence) -> tuple[np.ndarray, np.ndarray]:
    """Targets plus mask with per-stream EOS supervision.

    Stream k's content in the edit block ends at row e0+k+L-1; the entry one
    row later gets target EOS and joins the mask. Everything outside the mask
    keeps the grid value as a (never trained) placeholder target.
    """
    targets = reseq.rows.copy()
    mask = reseq.loss_mask.copy()
    e0, content = reseq.edit_block_start, reseq.edit_content_len
    k = reseq.rows.shape[1]
    for stream in range(k):
        row = e0 + content + stream
        targets[row, stream] = reseq.special.eos
        mask[row, stream] = True
    return targets, mask


def style_prompt_tokens(tokens: np.ndarray, frame_rate: int, prompt_seconds: float) -> np.ndarray:
    """Prompt cut from the tokenized tail, clipped so 1 s of target remains."""
    t = tokens.shape[0]
    p = int(round(prompt_seconds * frame_rate))
    p = max(1, min(p, t - frame_rate))
    return tokens[t - p:]


def _source_grid(tokenizer: Tokenizer, song, grammar_config, kind: int, rng: np.random.Generator) -> np.ndarray:
    """Tokenize one separated track with the other track silent."""
    sep = separate(song, grammar_config, rng_seed=int(rng.integers(0, 2**62)))
    zeros = np.zeros_like(song.vocal_frames)
    if kind == KIND_VOCAL:
        return tokenizer.tokenize(sep.vocal, zeros)
    return tokenizer.tokenize(zeros, sep.accomp)


def build_sample(
    song,
    tokens: np.ndarray,
    full_lyrics,
    tokenizer: Tokenizer,
    grammar_config,
    config: TrainConfig,
    special: SpecialIds,
    rng: np.random.Generator,
    span: Optional[tuple[int, int]] = None,
    source_kind: Optional[int] = None,
) -> TrainSample:
    n_sent = song.n_sentences
    if n_sent < 1:
        raise ValueError(f"song {song.song_id} has no sentences to edit")
    if span is None:
        l0 = int(rng.integers(1, n_sent + 1))
        l1 = int(rng.integers(l0, n_sent + 1))
    else:
        l0, l1 = span
    spec = EditSpec.from_sentences(song, l0, l1)

    smoothing_drawn = bool(rng.random() < config.smoothing_prob)
    smoothing = smoothing_drawn
    s_frames = config.smoothing_frames if smoothing else 0
    if spec.frame_end >= spec.n_frames:
        smoothing, s_frames = False, 0  # no following context to copy; the draw is skipped
    reseq = rearrange_for_edit(tokens, spec, special, smoothing_frames=s_frames)
    targets, mask = make_targets(reseq)

    style = style_prompt_tokens(tokens, song.frame_rate, config.prompt_seconds)
    entries = edit_view(full_lyrics, (l0, l1)).entries

    if source_kind is None:
        source_kind = int(rng.integers(0, 3))  # uniform over vocal/accomp/none
    drop_style = rng.random() < config.cond_dropout
    drop_lyrics = rng.random() < config.cond_dropout
    drop_source = rng.random() < config.cond_dropout
    kind = KIND_NONE if drop_source else source_kind
    source_tokens = None
    if kind != KIND_NONE:
        source_tokens = _source_grid(tokenizer, song, grammar_config, kind, rng)

    return TrainSample(
        rows=reseq.rows,
        targets=targets,
        mask=mask,
        frame_coords=reseq.frame_coords,
        style_tokens=style,
        entries=entries,
        drop_style=drop_style,
        drop_lyrics=drop_lyrics,
        source_kind=kind,
        source_tokens=source_tokens,
        meta={
            "song_id": song.song_id,
            "span": (l0, l1),
            "frame_span": (spec.frame_start, spec.frame_end),
            "smoothing_drawn": smoothing_drawn,
            "smoothing": bool(smoothing),
            "smoothing_frames": reseq.smoothing_frames,
            "drawn_source_kind": source_kind,
        },
    )


class BatchBuilder:
    """Caches per-song tokenization and lyric encodings across steps."""

    def __init__(self, corpus: Corpus, tokenizer: Tokenizer, config: TrainConfig, special: SpecialIds):
        self.corpus = corpus
        self.tokenizer = tokenizer
        self.config = config
        self.special = special
        self._tokens: dict[int, np.ndarray] = {}
        self._lyrics: dict[int, object] = {}

    def tokens_for(self, i: int) -> np.ndarray:
        if i not in self._tokens:
            s = self.corpus.songs[i]
            self._tokens[i] = self.tokenizer.tokenize(s.vocal_frames, s.accomp_frames)
        return self._tokens[i]

    def lyrics_for(self, i: int):
        if i not in self._lyrics:
            self._lyrics[i] = encode_song_lyrics(self.corpus.songs[i])
        return self._lyrics[i]

    def build_batch(self, rng: np.random.Generator, batch_size: Optional[int] = None) -> list[TrainSample]:
        out = []
        for _ in range(batch_size or self.config.batch_size):
            i = int(rng.integers(0, len(self.corpus.songs)))
            out.append(
                build_sample(
                    self.corpus.songs[i],
                    self.tokens_for(i),
                    self.lyrics_for(i),
                    self.tokenizer,
                    self.corpus.config,
                    self.config,
                    self.special,
                    rng,
                )
            )
        return out


@dataclass
class CollatedBatch:
    prefix: torch.Tensor
    prefix_len: torch.Tensor
    rows: torch.Tensor
    rows_len: torch.Tensor
    targets: torch.Tensor
    mask: torch.Tensor
    frame_coords: torch.Tensor
    memory: Optional[torch.Tensor]
    memory_len: Optional[torch.Tensor]


def collate(model: SongEditLM, samples: list[TrainSample]) -> CollatedBatch:
    b = len(samples)
    pad = model.config.special.pad
    prefixes = [
        model.build_prefix(s.style_tokens, s.entries, drop_style=s.drop_style, drop_lyrics=s.drop_lyrics)
        for s in samples
    ]
    p_max = max(p.shape[0] for p in prefixes)
    n_max = max(s.rows.shape[0] for s in samples)
    k = model.config.k_streams
    prefix = torch.zeros(b, p_max, model.config.model_dim)
    rows = torch.full((b, n_max, k), pad, dtype=torch.long)
    targets = torch.full((b, n_max, k), pad, dtype=torch.long)
    mask = torch.zeros(b, n_max, k, dtype=torch.bool)
    frame_coords = torch.zeros(b, n_max, dtype=torch.long)
    for i, (s, p) in enumerate(zip(samples, prefixes)):
        prefix[i, :p.shape[0]] = p
        n = s.rows.shape[0]
        rows[i, :n] = torch.from_numpy(s.rows)
        targets[i, :n] = torch.from_numpy(s.targets)
        mask[i, :n] = torch.from_numpy(s.mask)
        frame_coords[i, :n] = torch.from_numpy(s.frame_coords)
    prefix_len = torch.tensor([p.shape[0] for p in prefixes])
    rows_len = torch.tensor([s.rows.shape[0] for s in samples])

    memory = memory_len = None
    if model.config.cross_attention_enabled:
        mems = [model.encode_source(s.source_tokens, s.source_kind) for s in samples]
        m_max = max(m.shape[0] for m in mems)
        memory = torch.zeros(b, m_max, model.config.model_dim)
        for i, m in enumerate(mems):
            memory[i, :m.shape[0]] = m
        memory_len = torch.tensor([m.shape[0] for m in mems])
    return CollatedBatch(prefix, prefix_len, rows, rows_len, targets, mask, frame_coords, memory, memory_len)


def masked_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, float]:
    """Cross-entropy averaged over masked entries only; also masked accuracy.

    Gradients at every unmasked logit are exactly zero because unmasked
    entries never enter the graph.
    """
    if not bool(mask.any()):
        raise EmptyLossMaskError("loss mask selects no positions")
    sel = logits[mask]
    tgt = targets[mask]
    logp = torch.log_softmax(sel, dim=-1)
    loss = -logp.gather(1, tgt[:, None]).mean()
    acc = float((sel.argmax(-1) == tgt).float().mean())
    return loss, acc


# ============================================================
# Checkpoints
# ============================================================


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _rng_from_json(d: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }
    return np.random.Generator(bg)


def save_checkpoint(
    path: str,
    model: SongEditLM,
    opt: Optional[torch.optim.AdamW],
    step: int,
    train_config: TrainConfig,
    rng: Optional[np.random.Generator],
    tokenizer_digest: str = "",
) -> None:
    manifest = {
        "kind": "lm_checkpoint",
        "step": int(step),
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "tokenizer_digest": tokenizer_digest,
        "rng_state": _rng_state_to_json(rng) if rng is not None else None,
    }
    blobs: list[tuple[str, np.ndarray]] = []
    named = sorted(model.named_parameters(), key=lambda kv: kv[0])
    for name, p in named:
        blobs.append((f"param/{name}", p.detach().numpy()))
    if opt is not None:
        for name, p in named:
            st = opt.state.get(p)
            if st:
                blobs.append((f"opt/{name}/exp_avg", st["exp_avg"].numpy()))
                blobs.append((f"opt/{name}/exp_avg_sq", st["exp_avg_sq"].numpy()))
                blobs.append((f"opt/{name}/step", np.array([float(st["step"])], dtype=np.float64)))
    blobio.write_container(path, manifest, blobs)


def load_checkpoint(path: str):
    """Returns (model, manifest, blobs); optimizer state stays in blobs."""
    manifest, blobs = blobio.read_container(path)
    if manifest.get("kind") != "lm_checkpoint":
        raise blobio.BlobFormatError(f"{path}: not an LM checkpoint (kind={manifest.get('kind')!r})")
    model = SongEditLM(ModelConfig.from_dict(manifest["model_config"]))
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = blobs.get(f"param/{name}")
            if arr is None:
                raise blobio.BlobFormatError(f"{path}: checkpoint missing parameter {name}")
            p.copy_(torch.from_numpy(arr))
    return model, manifest, blobs


def restore_optimizer(opt: torch.optim.AdamW, model: SongEditLM, blobs: dict) -> None:
    for name, p in model.named_parameters():
        ea = blobs.get(f"opt/{name}/exp_avg")
        if ea is None:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(blobs[f"opt/{name}/step"][0])),
            "exp_avg": torch.from_numpy(blobs[f"opt/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(blobs[f"opt/{name}/exp_avg_sq"].copy()),
        }


# ============================================================
# The loop
# ============================================================


@dataclass
class TrainResult:
    model: SongEditLM
    steps_run: int
    final_loss: float
    final_acc: float
    log_rows: list[dict]
    final_checkpoint: Optional[str] = None


def train(
    corpus: Corpus,
    tokenizer: Tokenizer,
    model: SongEditLM,
    config: TrainConfig,
    out_dir: Optional[str] = None,
    log_path: Optional[str] = None,
    resume_from: Optional[str] = None,
) -> TrainResult:
    """Run config.steps optimizer steps; deterministic given config.seed.

    A non-finite loss aborts with DivergenceError after writing a diagnostic
    log row; the last periodic checkpoint stays on disk. resume_from restores
    parameters, optimizer state, and the batch RNG so the continuation
    reproduces an uninterrupted run bit for bit.
    """
    special = model.config.special
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 17])))
    start_step = 0
    if resume_from:
        loaded, manifest, blobs = load_checkpoint(resume_from)
        if loaded.config.to_dict() != model.config.to_dict():
            raise ValueError("resume checkpoint was trained with a different model config")
        with torch.no_grad():
            for (_, p), (_, q) in zip(
                sorted(model.named_parameters(), key=lambda kv: kv[0]),
                sorted(loaded.named_parameters(), key=lambda kv: kv[0]),
            ):
                p.copy_(q)
        restore_optimizer(opt, model, blobs)
        if manifest.get("rng_state"):
            rng = _rng_from_json(manifest["rng_state"])
        start_step = int(manifest["step"])

    builder = BatchBuilder(corpus, tokenizer, config, special)
    log_rows: list[dict] = []
    log_fh = open(log_path, "a") if log_path else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def emit(row: dict) -> None:
        log_rows.append(row)
        if log_fh:
            log_fh.write(json.dumps(row) + "\n")
            log_fh.flush()

    loss_val, acc = float("nan"), float("nan")
    try:
        for step in range(start_step, config.steps):
            samples = builder.build_batch(rng)
            batch = collate(model, samples)
            logits = model.forward_batch(
                batch.prefix, batch.prefix_len, batch.rows, batch.rows_len,
                batch.memory, batch.memory_len, batch.frame_coords,
            )
            loss, acc = masked_loss(logits, batch.targets, batch.mask)
            loss_val = float(loss.detach())
            if not np.isfinite(loss_val):
                emit({"step": step, "loss": loss_val, "lr": config.lr, "masked_acc": acc, "aborted": True})
                raise DivergenceError(f"training loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if step % config.log_every == 0 or step == config.steps - 1:
                emit({"step": step, "loss": loss_val, "lr": config.lr, "masked_acc": acc})
            if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"ckpt-{step + 1:06d}.edlm"),
                    model, opt, step + 1, config, rng, tokenizer.digest(),
                )
        final_path = None
        if out_dir:
            final_path = os.path.join(out_dir, "ckpt-final.edlm")
            save_checkpoint(final_path, model, opt, config.steps, config, rng, tokenizer.digest())
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(
        model=model, steps_run=config.steps - start_step, final_loss=loss_val,
        final_acc=acc, log_rows=log_rows, final_checkpoint=final_path,
    )
