"""Two-branch residual vector quantization over frame features.

Each branch holds a fixed seeded affine encoder (the stand-in for a
pretrained feature extractor) and a trainable stack of residual codebooks.
The accompaniment branch quantizes the accompaniment track, the vocal branch
the vocal track; per frame the K = 2 * layers_per_branch codes are
concatenated accompaniment-first, giving the token grid consumed by the LM.

Codebooks train by gradient descent on the commitment loss

    sum_k ( ||sg(e_k) - z_k||^2 + ||e_k - sg(z_k)||^2 )

where z_k is the residual entering layer k, e_k the selected entry and sg the
stop-gradient. The encoders are frozen buffers, so only the second term moves
parameters; dead entries (no assignment for dead_steps consecutive steps) are
reseeded to vectors from the current batch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import blobio
from .corpus import Corpus


class DivergenceError(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass
class TokenizerConfig:
    codebook_size: int = 64
    quant_dim: int = 16
    feature_dim: int = 16
    layers_per_branch: int = 2
    seed: int = 7

    @property
    def k_streams(self) -> int:
        return 2 * self.layers_per_branch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class RvqBranch:
    """One encoder plus its residual codebook stack."""

    def __init__(self, config: TokenizerConfig, branch_seed: int):
        self.config = config
        gen = torch.Generator().manual_seed(int(branch_seed))
        self.weight = torch.empty(config.quant_dim, config.feature_dim).normal_(
            0.0, 1.0 / config.feature_dim ** 0.5, generator=gen
        )
        self.bias = torch.empty(config.quant_dim).normal_(0.0, 0.05, generator=gen)
        self.codebooks = torch.nn.Parameter(
            torch.empty(config.layers_per_branch, config.codebook_size, config.quant_dim).normal_(
                0.0, 1.0, generator=gen
            )
        )

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        return frames @ self.weight.T + self.bias

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
        """Greedy residual quantization of [T, D_q] vectors.

        Returns (codes [T, L], recon [T, D_q], per-layer residuals, per-layer
        selected entries). Nearest entries by squared distance; ties resolve
        to the lowest index (argmin takes the first minimum).
        """
        residual = z
        codes = []
        recon = torch.zeros_like(z)
        z_list: list[torch.Tensor] = []
        e_list: list[torch.Tensor] = []
        for layer in range(self.config.layers_per_branch):
            cb = self.codebooks[layer]
            d2 = ((residual.detach().unsqueeze(1) - cb.detach().unsqueeze(0)) ** 2).sum(-1)
            idx = torch.argmin(d2, dim=1)
            e = cb[idx]
            z_list.append(residual)
            e_list.append(e)
            codes.append(idx)
            recon = recon + e
            residual = residual - e.detach()
        return torch.stack(codes, dim=1), recon, z_list, e_list

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        """Sum codebook entries for [T, L] codes back to quantized vectors."""
        out = torch.zeros(codes.shape[0], self.config.quant_dim)
        for layer in range(self.config.layers_per_branch):
            out = out + self.codebooks[layer][codes[:, layer]]
        return out

    def decode_features(self, codes: torch.Tensor) -> torch.Tensor:
        """Invert the affine encoder around the quantized reconstruction."""
        zq = self.decode(codes) - self.bias
        w_inv = torch.linalg.inv(self.weight.double())
        return (zq.double() @ w_inv.T).float()


def commitment_loss(z_list: list[torch.Tensor], e_list: list[torch.Tensor]) -> torch.Tensor:
    """Both-sided commitment loss, summed over layers, mean over frames."""
    total = torch.zeros(())
    for z, e in zip(z_list, e_list):
        sq1 = ((e.detach() - z) ** 2).sum(-1)
        sq2 = ((e - z.detach()) ** 2).sum(-1)
        per_frame = sq1 + sq2
        total = total + (per_frame.mean() if per_frame.dim() > 0 else per_frame)
    return total


class Tokenizer:
    """Accompaniment branch + vocal branch over a shared frame clock."""

    def __init__(self, config: TokenizerConfig):
        self.config = config
        self.accomp_branch = RvqBranch(config, config.seed * 2 + 1)
        self.vocal_branch = RvqBranch(config, config.seed * 2 + 2)

    @property
    def k_streams(self) -> int:
        return self.config.k_streams

    def tokenize(self, vocal_frames: np.ndarray, accomp_frames: np.ndarray) -> np.ndarray:
        """Tokenize aligned tracks into a [T, K] int64 grid, accomp codes first."""
        if vocal_frames.shape != accomp_frames.shape:
            raise ValueError(f"track shapes differ: {vocal_frames.shape} vs {accomp_frames.shape}")
        with torch.no_grad():
            va = torch.from_numpy(np.ascontiguousarray(accomp_frames, dtype=np.float32))
            vv = torch.from_numpy(np.ascontiguousarray(vocal_frames, dtype=np.float32))
            ca, _, _, _ = self.accomp_branch.quantize(self.accomp_branch.encode(va))
            cv, _, _, _ = self.vocal_branch.quantize(self.vocal_branch.encode(vv))
        return torch.cat([ca, cv], dim=1).numpy().astype(np.int64)

    def decode_tokens(self, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reconstruct (accomp_features, vocal_features) from a [T, K] grid."""
        lp = self.config.layers_per_branch
        t = torch.from_numpy(np.ascontiguousarray(tokens, dtype=np.int64))
        with torch.no_grad():
            accomp = self.accomp_branch.decode_features(t[:, :lp])
            vocal = self.vocal_branch.decode_features(t[:, lp:])
        return accomp.numpy(), vocal.numpy()

    def parameters(self) -> list[torch.nn.Parameter]:
        return [self.accomp_branch.codebooks, self.vocal_branch.codebooks]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, br in (("accomp", self.accomp_branch), ("vocal", self.vocal_branch)):
            out.append((f"{name}/weight", br.weight.numpy()))
            out.append((f"{name}/bias", br.bias.numpy()))
            out.append((f"{name}/codebooks", br.codebooks.detach().numpy()))
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
        return h.hexdigest()


@dataclass
class TokenizerTrainResult:
    tokenizer: Tokenizer
    losses: list[float]
    reseeds: int


def train_tokenizer(
    corpus: Corpus,
    config: TokenizerConfig,
    steps: int,
    lr: float = 0.02,
    batch_frames: int = 256,
    dead_steps: int = 100,
    seed: int = 0,
) -> TokenizerTrainResult:
    """Fit both branches' codebooks on corpus frames.

    Zero steps leave a freshly seeded tokenizer untouched. A non-finite loss
    aborts with DivergenceError naming the step.
    """
    tok = Tokenizer(config)
    if steps == 0:
        return TokenizerTrainResult(tok, [], 0)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 94])))
    opt = torch.optim.Adam(tok.parameters(), lr=lr)
    branches = (tok.accomp_branch, tok.vocal_branch)
    unused = [
        np.zeros((config.layers_per_branch, config.codebook_size), dtype=np.int64) for _ in branches
    ]
    losses = []
    reseeds = 0
    for step in range(steps):
        song_ids = rng.integers(0, len(corpus.songs), batch_frames)
        rows = [rng.integers(0, corpus.songs[s].n_frames) for s in song_ids]
        accomp = np.stack([corpus.songs[s].accomp_frames[r] for s, r in zip(song_ids, rows)])
        vocal = np.stack([corpus.songs[s].vocal_frames[r] for s, r in zip(song_ids, rows)])

        opt.zero_grad()
        loss = torch.zeros(())
        batch_z = []
        batch_codes = []
        for br, frames in zip(branches, (accomp, vocal)):
            z = br.encode(torch.from_numpy(frames.astype(np.float32)))
            codes, _, z_list, e_list = br.quantize(z)
            loss = loss + commitment_loss(z_list, e_list)
            batch_z.append([zl.detach() for zl in z_list])
            batch_codes.append(codes)
        if not torch.isfinite(loss):
            raise DivergenceError(f"tokenizer loss became non-finite at step {step}")
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

        # dead-entry bookkeeping and reseeding
        for bi, br in enumerate(branches):
            hit = np.zeros((config.layers_per_branch, config.codebook_size), dtype=bool)
            codes_np = batch_codes[bi].numpy()
            for layer in range(config.layers_per_branch):
                hit[layer, np.unique(codes_np[:, layer])] = True
            unused[bi] = np.where(hit, 0, unused[bi] + 1)
            dead = np.argwhere(unused[bi] >= dead_steps)
            if dead.size:
                state = opt.state.get(br.codebooks)
                with torch.no_grad():
                    for layer, entry in dead:
                        pick = int(rng.integers(0, batch_frames))
                        br.codebooks[layer, entry] = batch_z[bi][layer][pick]
                        if state:
                            state["exp_avg"][layer, entry].zero_()
                            state["exp_avg_sq"][layer, entry].zero_()
                        unused[bi][layer, entry] = 0
                        reseeds += 1
    return TokenizerTrainResult(tok, losses, reseeds)


def save_tokenizer(path: str, tokenizer: Tokenizer) -> None:
    manifest = {"kind": "tokenizer", "config": tokenizer.config.to_dict()}
    blobio.write_container(path, manifest, tokenizer.state_arrays())


def load_tokenizer(path: str) -> Tokenizer:
    manifest, blobs = blobio.read_container(path)
    if manifest.get("kind") != "tokenizer":
        raise blobio.BlobFormatError(f"{path}: not a tokenizer file (kind={manifest.get('kind')!r})")
    tok = Tokenizer(TokenizerConfig.from_dict(manifest["config"]))
    for name, br in (("accomp", tok.accomp_branch), ("vocal", tok.vocal_branch)):
        br.weight = torch.from_numpy(blobs[f"{name}/weight"])
        br.bias = torch.from_numpy(blobs[f"{name}/bias"])
        with torch.no_grad():
            br.codebooks.copy_(torch.from_numpy(blobs[f"{name}/codebooks"]))
    return tok
