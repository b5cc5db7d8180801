"""Decoder-only token LM over K parallel streams with optional source conditioning.

The input sequence is [style prompt] [lyric entries] [token rows]; every token
row embeds as the sum of its K per-stream embeddings, and K output heads read
the shared hidden state. Positions enter through rotary embeddings inside
self-attention, so an all-PAD row embeds identically everywhere. Logits are
aligned to targets: logits[i] is produced by the hidden state one position
earlier, so they depend only on rows < i plus the full prefix.

Source conditioning follows the gated multi-source scheme: a condition grid
embeds per frame as the shared stream-embedding sum plus a source-type row
(one row per track kind), a no-source condition collapses to the single
type row, and a small bidirectional encoder feeds cross-attention in every
decoder layer. Cross-attention is rotary over frame coordinates: queries turn
by the decoder row's base frame, keys by the memory row index, so a row can
find the condition frame it is completing by relative position rather than by
content matching (a single-row no-source memory is unaffected, softmax over
one key is 1). All projections are bias-free, so zeroing the encoder output
makes cross-attention contribute exactly nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import SpecialIds
from .lyrics import TextEntry

KIND_VOCAL, KIND_ACCOMP, KIND_NONE = 0, 1, 2
SOURCE_KINDS = {"vocal": KIND_VOCAL, "accomp": KIND_ACCOMP, "none": KIND_NONE}


@dataclass
class ModelConfig:
    codebook_size: int = 64
    k_streams: int = 4
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    cross_attention_enabled: bool = True
    source_encoder_layers: int = 2
    syllable_vocab: int = 32
    n_tags: int = 6
    max_sequence: int = 2048
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02
    seed: int = 0

    @property
    def vocab(self) -> int:
        return self.codebook_size + 3

    @property
    def special(self) -> SpecialIds:
        return SpecialIds(self.codebook_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# ============================================================
# Building blocks
# ============================================================


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class Rotary:
    """Rotary position embedding applied to query/key heads (split-half form)."""

    def __init__(self, head_dim: int, base: float):
        if head_dim % 2:
            raise ValueError("head_dim must be even for rotary embedding")
        self.head_dim = head_dim
        self.base = base

    def tables(self, positions: torch.Tensor, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
        half = self.head_dim // 2
        inv = self.base ** (-torch.arange(half, dtype=torch.float64) / half)
        ang = positions.to(torch.float64)[..., None] * inv
        return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)

    def apply(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        # x: [B, H, T, hd]; cos/sin: [T, hd/2], or [B, T, hd/2] for per-batch positions
        if cos.dim() == 3:
            cos, sin = cos[:, None], sin[:, None]
        half = self.head_dim // 2
        x1, x2 = x[..., :half], x[..., half:]
        return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h = config.model_dim, config.heads
        if d % h:
            raise ValueError("model_dim must divide by heads")
        self.heads = h
        self.head_dim = d // h
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)
        self.rotary = Rotary(self.head_dim, config.rope_base)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        causal: bool,
        cache: Optional[dict] = None,
    ) -> torch.Tensor:
        b, t, d = x.shape
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        cos, sin = self.rotary.tables(positions, x.dtype)
        q = self.rotary.apply(q, cos, sin)
        k = self.rotary.apply(k, cos, sin)
        if cache is not None:
            n = cache["len"]
            if n + t > cache["k"].shape[2]:
                # slice assignment past the end clamps silently; fail loudly instead
                raise ValueError(f"KV cache overflow: {n + t} rows exceed capacity {cache['k'].shape[2]}")
            cache["k"][:, :, n:n + t] = k
            cache["v"][:, :, n:n + t] = v
            cache["len"] = n + t
            k = cache["k"][:, :, :n + t]
            v = cache["v"][:, :, :n + t]
            causal = causal and t > 1  # a single appended row sees the whole cache
        out = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.o_proj(out.transpose(1, 2).reshape(b, t, d))


class CrossAttention(nn.Module):
    """Attention from decoder states to encoder memory, rotary over frames.

    Queries rotate by the decoder row's base-frame coordinate and keys by the
    memory row index, so attention logits depend on the relative frame offset
    and heads can lock onto the condition frame a row is completing.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h = config.model_dim, config.heads
        self.heads = h
        self.head_dim = d // h
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)
        self.rotary = Rotary(self.head_dim, config.rope_base)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: Optional[torch.Tensor],
        frame_coords: torch.Tensor,
    ) -> torch.Tensor:
        b, t, d = x.shape
        s = memory.shape[1]
        q = self.q_proj(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(memory).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(memory).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        cos_q, sin_q = self.rotary.tables(frame_coords, x.dtype)
        cos_k, sin_k = self.rotary.tables(torch.arange(s), x.dtype)
        q = self.rotary.apply(q, cos_q, sin_q)
        k = self.rotary.apply(k, cos_k, sin_k)
        mask = None
        if memory_mask is not None:
            mask = memory_mask[:, None, None, :]  # True where attendable
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.o_proj(out.transpose(1, 2).reshape(b, t, d))


class SwiGLU(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.gate = nn.Linear(config.model_dim, config.ff_dim, bias=False)
        self.up = nn.Linear(config.model_dim, config.ff_dim, bias=False)
        self.down = nn.Linear(config.ff_dim, config.model_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


class DecoderBlock(nn.Module):
    def __init__(self, config: ModelConfig, with_cross: bool):
        super().__init__()
        self.attn_norm = RMSNorm(config.model_dim, config.norm_eps)
        self.attn = SelfAttention(config)
        self.cross = CrossAttention(config) if with_cross else None
        self.cross_norm = RMSNorm(config.model_dim, config.norm_eps) if with_cross else None
        self.ff_norm = RMSNorm(config.model_dim, config.norm_eps)
        self.ff = SwiGLU(config)

    def forward(self, x, positions, causal, memory=None, memory_mask=None, frame_coords=None, cache=None):
        x = x + self.attn(self.attn_norm(x), positions, causal, cache)
        if self.cross is not None and memory is not None:
            if frame_coords is None:
                raise ValueError("cross-attention needs frame_coords for its rotary alignment")
            x = x + self.cross(self.cross_norm(x), memory, memory_mask, frame_coords)
        x = x + self.ff(self.ff_norm(x))
        return x


class EncoderBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.model_dim, config.norm_eps)
        self.attn = SelfAttention(config)
        self.ff_norm = RMSNorm(config.model_dim, config.norm_eps)
        self.ff = SwiGLU(config)

    def forward(self, x, positions):
        x = x + self.attn(self.attn_norm(x), positions, causal=False)
        x = x + self.ff(self.ff_norm(x))
        return x


# ============================================================
# The model
# ============================================================


class SongEditLM(nn.Module):
    """Edit-rearranged token LM with style, lyric, and source conditioning.

    Prefix structure is preserved under condition dropout: a dropped style
    prompt or lyric sequence is replaced row for row by a learned null
    embedding, and a dropped source condition by the no-source type row.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.stream_emb = nn.ModuleList(
            nn.Embedding(config.vocab, d) for _ in range(config.k_streams)
        )
        self.text_emb = nn.Embedding(config.syllable_vocab, d)
        self.type_emb = nn.Embedding(config.n_tags, d)
        self.null_style = nn.Parameter(torch.zeros(d))
        self.null_lyrics = nn.Parameter(torch.zeros(d))
        self.source_kind_emb = nn.Embedding(3, d)
        self.blocks = nn.ModuleList(
            DecoderBlock(config, with_cross=config.cross_attention_enabled) for _ in range(config.layers)
        )
        self.final_norm = RMSNorm(d, config.norm_eps)
        self.heads = nn.ModuleList(
            nn.Linear(d, config.vocab, bias=False) for _ in range(config.k_streams)
        )
        if config.cross_attention_enabled:
            self.source_blocks = nn.ModuleList(
                EncoderBlock(config) for _ in range(config.source_encoder_layers)
            )
            self.source_norm = RMSNorm(d, config.norm_eps)
        self.seeded_init(config.seed)

    # ---------- initialization ----------

    def seeded_init(self, seed: int) -> None:
        """Deterministic parameter init independent of global RNG state."""
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if "norm" in name:
                    p.fill_(1.0)
                else:
                    p.normal_(0.0, self.config.init_std, generator=gen)

    # ---------- embedding helpers ----------

    def embed_rows(self, rows: torch.Tensor) -> torch.Tensor:
        """Sum per-stream embeddings of [..., K] token rows."""
        out = self.stream_emb[0](rows[..., 0])
        for k in range(1, self.config.k_streams):
            out = out + self.stream_emb[k](rows[..., k])
        return out

    def lyric_embeddings(self, entries: list[TextEntry]) -> torch.Tensor:
        """Structure-tagged lyric entries: symbol + type, or type alone."""
        d = self.config.model_dim
        if not entries:
            return self.null_lyrics.view(1, d)
        tags = torch.tensor([e.tag_id for e in entries], dtype=torch.long)
        out = self.type_emb(tags)
        sym_rows = [i for i, e in enumerate(entries) if not e.is_duration_token]
        if sym_rows:
            idx = torch.tensor(sym_rows, dtype=torch.long)
            syms = torch.tensor([entries[i].symbol_id for i in sym_rows], dtype=torch.long)
            out = out.index_add(0, idx, self.text_emb(syms))
        return out

    def build_prefix(
        self,
        style_tokens: Optional[np.ndarray],
        entries: Optional[list[TextEntry]],
        drop_style: bool = False,
        drop_lyrics: bool = False,
    ) -> torch.Tensor:
        """[style rows][lyric rows]; dropped or absent parts become null rows."""
        d = self.config.model_dim
        if style_tokens is None:
            style = self.null_style.view(1, d)
        elif drop_style:
            style = self.null_style.view(1, d).expand(len(style_tokens), d)
        else:
            style = self.embed_rows(torch.from_numpy(np.ascontiguousarray(style_tokens, dtype=np.int64)))
        if entries is None:
            lyr = self.null_lyrics.view(1, d)
        elif drop_lyrics:
            lyr = self.null_lyrics.view(1, d).expand(max(len(entries), 1), d)
        else:
            lyr = self.lyric_embeddings(entries)
        return torch.cat([style, lyr], dim=0)

    def encode_source(self, tokens: Optional[np.ndarray], kind: int) -> torch.Tensor:
        """Multi-source condition memory: token rows + type row, encoded.

        A missing condition is the single no-source type row, so the memory
        always has at least one row and conditioning is uniform across kinds.
        """
        if not self.config.cross_attention_enabled:
            raise RuntimeError("source conditioning requires cross_attention_enabled")
        kind_row = self.source_kind_emb(torch.tensor([kind]))
        if tokens is None or kind == KIND_NONE:
            x = kind_row
        else:
            rows = torch.from_numpy(np.ascontiguousarray(tokens, dtype=np.int64))
            x = self.embed_rows(rows) + kind_row
        x = x.unsqueeze(0)
        positions = torch.arange(x.shape[1])
        for blk in self.source_blocks:
            x = blk(x, positions)
        return self.source_norm(x).squeeze(0)

    # ---------- full forwards ----------

    def forward_batch(
        self,
        prefix: torch.Tensor,
        prefix_len: torch.Tensor,
        rows: torch.Tensor,
        rows_len: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        memory_len: Optional[torch.Tensor] = None,
        frame_coords: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Teacher-forced logits [B, Nmax, K, V]; logits[:, i] predicts rows[:, i].

        Sequences are right-padded; padded tail positions produce garbage that
        is never gathered. Entries beyond a sample's rows_len are arbitrary.
        frame_coords [B, Nmax] gives each token row's base frame for the
        cross-attention rotary (prefix rows sit at frame 0); required whenever
        memory is passed.
        """
        b, n_max, _ = rows.shape
        d = self.config.model_dim
        emb = self.embed_rows(rows)
        s_len = prefix_len + rows_len
        s_max = int(s_len.max())
        x = torch.zeros(b, s_max, d, dtype=prefix.dtype)
        coords = None
        if memory is not None:
            if frame_coords is None:
                raise ValueError("forward_batch with memory needs frame_coords")
            coords = torch.zeros(b, s_max, dtype=torch.long)
        for i in range(b):
            p, n = int(prefix_len[i]), int(rows_len[i])
            x[i, :p] = prefix[i, :p]
            x[i, p:p + n] = emb[i, :n]
            if coords is not None:
                coords[i, p:p + n] = frame_coords[i, :n]
        positions = torch.arange(s_max)
        mem_mask = None
        if memory is not None and memory_len is not None:
            mem_mask = torch.arange(memory.shape[1])[None, :] < memory_len[:, None]
        for blk in self.blocks:
            x = blk(x, positions, causal=True, memory=memory, memory_mask=mem_mask, frame_coords=coords)
        x = self.final_norm(x)
        gather = (prefix_len[:, None] - 1 + torch.arange(n_max)[None, :]).clamp(0, s_max - 1)
        h = torch.gather(x, 1, gather[:, :, None].expand(b, n_max, d))
        return torch.stack([head(h) for head in self.heads], dim=2)

    def forward(
        self,
        prefix: torch.Tensor,
        rows: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        frame_coords: Optional[np.ndarray] = None,
    ) -> torch.Tensor:
        """Unbatched convenience: prefix [P, D], rows [N, K] -> [N, K, V]."""
        mem = memory.unsqueeze(0) if memory is not None else None
        mlen = torch.tensor([memory.shape[0]]) if memory is not None else None
        coords = None
        if frame_coords is not None:
            coords = torch.as_tensor(frame_coords, dtype=torch.long).unsqueeze(0)
        return self.forward_batch(
            prefix.unsqueeze(0),
            torch.tensor([prefix.shape[0]]),
            rows.unsqueeze(0),
            torch.tensor([rows.shape[0]]),
            mem,
            mlen,
            coords,
        )[0]

    # ---------- incremental decoding ----------

    def prime(
        self,
        prefix: torch.Tensor,
        rows: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        memory_mask: Optional[torch.Tensor] = None,
        frame_coords: Optional[np.ndarray] = None,
        capacity: int = 0,
    ) -> tuple[dict, torch.Tensor]:
        """Run the context once, returning (state, logits for the next row).

        prefix may be batched [B, P, D] (classifier-free guidance primes the
        conditional and unconditional branches together); rows [N, K] and
        their frame_coords [N] are shared across the batch. capacity bounds
        total rows ever cached.
        """
        if prefix.dim() == 2:
            prefix = prefix.unsqueeze(0)
        b, p, d = prefix.shape
        n = rows.shape[0]
        cap = max(capacity, p + n + 1)
        if memory is not None and memory.dim() == 2:
            memory = memory.unsqueeze(0).expand(b, -1, -1)
        if memory is not None and n and frame_coords is None:
            raise ValueError("prime with memory needs frame_coords for the context rows")
        state = {
            "caches": [
                {
                    "k": torch.zeros(b, self.config.heads, cap, d // self.config.heads),
                    "v": torch.zeros(b, self.config.heads, cap, d // self.config.heads),
                    "len": 0,
                }
                for _ in self.blocks
            ],
            "pos": 0,
            "memory": memory,
            "memory_mask": memory_mask,
        }
        x = prefix
        coords = torch.zeros(p + n, dtype=torch.long)
        if n:
            emb = self.embed_rows(torch.from_numpy(np.ascontiguousarray(rows, dtype=np.int64)))
            x = torch.cat([x, emb.unsqueeze(0).expand(b, n, d)], dim=1)
            if frame_coords is not None:
                coords[p:] = torch.as_tensor(frame_coords, dtype=torch.long)
        logits = self._advance(state, x, coords)
        return state, logits

    def step(self, state: dict, row: np.ndarray, frame: int = 0) -> torch.Tensor:
        """Append one sampled row (shared across branches), return next logits [B, K, V]."""
        emb = self.embed_rows(torch.from_numpy(np.ascontiguousarray(row, dtype=np.int64)).view(1, -1))
        b = state["caches"][0]["k"].shape[0]
        return self._advance(state, emb.unsqueeze(0).expand(b, 1, -1), torch.tensor([frame]))

    def _advance(self, state: dict, x: torch.Tensor, frame_coords: torch.Tensor) -> torch.Tensor:
        t = x.shape[1]
        positions = torch.arange(state["pos"], state["pos"] + t)
        for blk, cache in zip(self.blocks, state["caches"]):
            x = blk(
                x,
                positions,
                causal=True,
                memory=state["memory"],
                memory_mask=state["memory_mask"],
                frame_coords=frame_coords,
                cache=cache,
            )
        state["pos"] += t
        h = self.final_norm(x[:, -1])
        return torch.stack([head(h) for head in self.heads], dim=1)


def cfg_logits(cond: torch.Tensor, uncond: torch.Tensor, gamma: float) -> torch.Tensor:
    """uncond + gamma * (cond - uncond); gamma == 1 returns cond exactly."""
    if gamma == 1.0:
        return cond
    return uncond + gamma * (cond - uncond)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
