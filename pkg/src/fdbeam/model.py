"""Transformer policy: user encoder, probing synthesizer, serving synthesizer.

The user encoder turns partial per-pair channel knowledge into a set of K
embeddings; the probing synthesizer expands a learned embedding table into
M probing beam pairs conditioned on those users; the serving synthesizer
reads the resulting measurements back and emits the K serving beam pairs.
All attention is maskless and position-free, so user and probe tokens are
exchangeable. Trained unsupervised on the negative sum of normalized SSE.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .channels import LinkBudget, SceneRealization
from .metrics import BeamPair, link_report

#: linear SNR bound used to condition user-info inputs to O(1)
Y_CONDITIONING_SNR = 10.0


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    d_embed: int = 320
    n_heads: int = 5
    enc_layers: int = 3
    probe_layers: int = 2
    serve_layers: int = 2
    ff_expansion: int = 4
    max_m: int = 64
    array_sizes: tuple = ((16, 16),)
    z_gain: float = 8.0  # input gain on measurement features entering the memory

    def __post_init__(self):
        if self.d_embed % self.n_heads != 0:
            raise ValueError("d_embed must be divisible by n_heads")
        self.array_sizes = tuple((int(a), int(b)) for a, b in self.array_sizes)

    def to_dict(self) -> dict:
        return {
            "d_embed": self.d_embed, "n_heads": self.n_heads,
            "enc_layers": self.enc_layers, "probe_layers": self.probe_layers,
            "serve_layers": self.serve_layers, "ff_expansion": self.ff_expansion,
            "max_m": self.max_m, "array_sizes": [list(s) for s in self.array_sizes],
            "z_gain": self.z_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["array_sizes"] = tuple(tuple(s) for s in d["array_sizes"])
        return cls(**d)


def size_key(nt: int, nr: int) -> str:
    return f"{nt}x{nr}"


def realify_user_info(y_dl: np.ndarray, y_ul: np.ndarray) -> np.ndarray:
    """[Re(y_dl); Im(y_dl); Re(y_ul); Im(y_ul)] as one real vector."""
    return np.concatenate([y_dl.real, y_dl.imag, y_ul.real, y_ul.imag])


def user_features(scene: SceneRealization) -> np.ndarray:
    """Conditioned (K, 2(nt+nr)) real model inputs for one scene.

    Each link's partial knowledge is divided by the calibrated RMS channel
    amplitude (sqrt of noise variance times the SNR bound) so entries are
    O(1) regardless of absolute path gains.
    """
    b = scene.budget
    s_dl = math.sqrt(b.sigma2_dl * Y_CONDITIONING_SNR / b.p_dl)
    s_ul = math.sqrt(b.sigma2_ul * Y_CONDITIONING_SNR / b.p_ul)
    return np.stack([
        realify_user_info(y_dl / s_dl, y_ul / s_ul) for y_dl, y_ul in scene.user_info
    ])


# ---------------------------------------------------------------------------
# transformer building blocks (pre-norm, maskless, no positional encoding)
# ---------------------------------------------------------------------------


class MultiHeadAttention(nn.Module):
    def __init__(self, d_embed: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_embed // n_heads
        self.q_proj = nn.Linear(d_embed, d_embed)
        self.k_proj = nn.Linear(d_embed, d_embed)
        self.v_proj = nn.Linear(d_embed, d_embed)
        self.out_proj = nn.Linear(d_embed, d_embed)

    def forward(self, query, memory):
        b, lq, _ = query.shape
        lm = memory.shape[1]
        q = self.q_proj(query).view(b, lq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(memory).view(b, lm, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(memory).view(b, lm, self.n_heads, self.d_head).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.d_head), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, lq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_embed: int, expansion: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_embed, expansion * d_embed),
            nn.GELU(),
            nn.Linear(expansion * d_embed, d_embed),
        )

    def forward(self, x):
        return self.net(x)


class EncoderBlock(nn.Module):
    def __init__(self, d_embed: int, n_heads: int, expansion: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_embed)
        self.attn = MultiHeadAttention(d_embed, n_heads)
        self.ln2 = nn.LayerNorm(d_embed)
        self.ff = FeedForward(d_embed, expansion)

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.ln2(x))


class DecoderBlock(nn.Module):
    """Self-attention over the token set, cross-attention into a memory."""

    def __init__(self, d_embed: int, n_heads: int, expansion: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_embed)
        self.self_attn = MultiHeadAttention(d_embed, n_heads)
        self.ln2 = nn.LayerNorm(d_embed)
        self.cross_attn = MultiHeadAttention(d_embed, n_heads)
        self.ln3 = nn.LayerNorm(d_embed)
        self.ff = FeedForward(d_embed, expansion)

    def forward(self, x, memory):
        h = self.ln1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.ff(self.ln3(x))


def normalize_tx(f: torch.Tensor) -> torch.Tensor:
    """Per-antenna power normalization: divide by the max entry magnitude.

    Invariant under positive scaling of the input; the divisor is treated
    as a differentiable function of the beam (subgradient at ties). The
    clamp only guards the measure-zero all-zero output.
    """
    peak = f.abs().amax(dim=-1, keepdim=True)
    return f / peak.clamp_min(1e-30)


def _split_beams(out: torch.Tensor, nt: int, nr: int):
    """(..., 2(nt+nr)) reals -> complex f (..., nt) and w (..., nr)."""
    f = torch.complex(out[..., :nt], out[..., nt:2 * nt])
    w = torch.complex(out[..., 2 * nt:2 * nt + nr], out[..., 2 * nt + nr:])
    return f, w


class UserEncoder(nn.Module):
    """Maps realified partial channel knowledge to K user embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_proj = nn.ModuleDict({
            size_key(nt, nr): nn.Linear(2 * (nt + nr), cfg.d_embed)
            for nt, nr in cfg.array_sizes
        })
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_embed, cfg.n_heads, cfg.ff_expansion)
            for _ in range(cfg.enc_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_embed)

    def forward(self, y_real: torch.Tensor, key: str) -> torch.Tensor:
        if key not in self.in_proj:
            raise KeyError(f"no projection registered for array size {key}")
        x = self.in_proj[key](y_real)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ProbingSynthesizer(nn.Module):
    """Expands the first M rows of a learned table into probing beam pairs.

    Generation is parallel across the M tokens and conditioned only on the
    user embeddings, never on earlier measurements.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.max_m = cfg.max_m
        self.table = nn.Embedding(cfg.max_m, cfg.d_embed)
        nn.init.normal_(self.table.weight, std=0.02)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.d_embed, cfg.n_heads, cfg.ff_expansion)
            for _ in range(cfg.probe_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_embed)
        self.out_proj = nn.ModuleDict({
            size_key(nt, nr): nn.Linear(cfg.d_embed, 2 * (nt + nr))
            for nt, nr in cfg.array_sizes
        })

    def forward(self, e_u: torch.Tensor, m: int, key: str):
        if m > self.max_m:
            raise ValueError(f"probing budget m={m} exceeds table size {self.max_m}")
        b = e_u.shape[0]
        x = self.table.weight[:m].unsqueeze(0).expand(b, -1, -1)
        for block in self.blocks:
            x = block(x, e_u)
        e_si = self.norm(x)
        nt, nr = (int(v) for v in key.split("x"))
        f_raw, w = _split_beams(self.out_proj[key](e_si), nt, nr)
        return normalize_tx(f_raw), w, e_si


class ServingSynthesizer(nn.Module):
    """Turns user embeddings plus measured evidence into serving beams.

    The user embeddings enter directly as the decoder tokens; the memory is
    a projection of each SI embedding concatenated with the real and
    imaginary parts of its measurement.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.z_gain = cfg.z_gain
        self.mem_proj = nn.Linear(cfg.d_embed + 2, cfg.d_embed)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.d_embed, cfg.n_heads, cfg.ff_expansion)
            for _ in range(cfg.serve_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_embed)
        self.out_proj = nn.ModuleDict({
            size_key(nt, nr): nn.Linear(cfg.d_embed, 2 * (nt + nr))
            for nt, nr in cfg.array_sizes
        })

    def forward(self, e_u: torch.Tensor, e_si: torch.Tensor, z: torch.Tensor, key: str):
        z = self.z_gain * z
        mem = self.mem_proj(torch.cat(
            [e_si, z.real.unsqueeze(-1), z.imag.unsqueeze(-1)], dim=-1))
        x = e_u
        for block in self.blocks:
            x = block(x, mem)
        x = self.norm(x)
        nt, nr = (int(v) for v in key.split("x"))
        f_raw, w_raw = _split_beams(self.out_proj[key](x), nt, nr)
        w = w_raw / w_raw.abs().pow(2).sum(dim=-1, keepdim=True).sqrt().clamp_min(1e-30)
        return normalize_tx(f_raw), w


class BeamformerPolicy(nn.Module):
    """The full probing-and-serving policy."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.user_encoder = UserEncoder(cfg)
        self.probing = ProbingSynthesizer(cfg)
        self.serving = ServingSynthesizer(cfg)

    def encode_users(self, y_real: torch.Tensor, nt: int, nr: int) -> torch.Tensor:
        return self.user_encoder(y_real, size_key(nt, nr))

    def synthesize_probing(self, e_u: torch.Tensor, m: int, nt: int, nr: int):
        return self.probing(e_u, m, size_key(nt, nr))

    def synthesize_serving(self, e_u, e_si, z_conditioned, nt: int, nr: int):
        return self.serving(e_u, e_si, z_conditioned, size_key(nt, nr))


def build_model(cfg: ModelConfig, seed: int = 0) -> BeamformerPolicy:
    """Deterministically initialized policy model."""
    torch.manual_seed(seed)
    return BeamformerPolicy(cfg)


# ---------------------------------------------------------------------------
# differentiable measurement + objective (torch), and the per-scene loss
# ---------------------------------------------------------------------------


def measure_torch(f_cb, w_cb, h_si, p_dl, sigma2_ul, noise=None):
    """Batched probing measurements z (B, M) from token-major codebooks.

    f_cb: (B, M, nt), w_cb: (B, M, nr), h_si: (B, nr, nt), noise: (B, M, nr)
    circularly-symmetric complex Gaussian of variance sigma2_ul, or None
    for noiseless measurements.
    """
    nt = f_cb.shape[-1]
    z = math.sqrt(p_dl / nt) * torch.einsum("bmr,brt,bmt->bm", w_cb.conj(), h_si, f_cb)
    if noise is not None:
        z = z + torch.einsum("bmr,bmr->bm", w_cb.conj(), noise)
    return z


def draw_measurement_noise(shape, sigma2_ul, generator, dtype=torch.float32):
    """(B, M, nr) complex noise with covariance sigma2_ul * I per vector."""
    re = torch.randn(*shape, generator=generator, dtype=dtype)
    im = torch.randn(*shape, generator=generator, dtype=dtype)
    return math.sqrt(sigma2_ul / 2.0) * torch.complex(re, im)


def nsse_torch(f, w, h_dl, h_ul, h_si, budget: LinkBudget, cap):
    """Batched normalized SSE (B, K); cross-link interference taken as zero.

    f: (B, K, nt), w: (B, K, nr), h_dl: (B, K, nt), h_ul: (B, K, nr),
    h_si: (B, nr, nt), cap: (B, K) interference-free sum capacities.
    """
    nt = f.shape[-1]
    w2 = w.abs().pow(2).sum(dim=-1)
    snr_dl = budget.p_dl * (h_dl.conj() * f).sum(dim=-1).abs().pow(2) / (nt * budget.sigma2_dl)
    snr_ul = budget.p_ul * (w.conj() * h_ul).sum(dim=-1).abs().pow(2) / (w2 * budget.sigma2_ul)
    hf = torch.einsum("brt,bkt->bkr", h_si, f)
    inr_ul = budget.p_dl * (w.conj() * hf).sum(dim=-1).abs().pow(2) / (nt * w2 * budget.sigma2_ul)
    se_dl = torch.log2(1.0 + snr_dl)
    se_ul = torch.log2(1.0 + snr_ul / (1.0 + inr_ul))
    return (se_dl + se_ul) / cap


def negative_sum_nsse(beams: list, scene: SceneRealization) -> float:
    """The training objective on one scene: minus the sum of per-pair nsse.

    Scored against the scene's true channels (not the partial knowledge),
    so the value lies in [-K, 0].
    """
    if len(beams) != len(scene.users):
        raise ValueError("need exactly one beam pair per user pair")
    total = 0.0
    for bp, user in zip(beams, scene.users):
        total += link_report(bp, user, scene.si, scene.budget).nsse
    return -total


# ---------------------------------------------------------------------------
# numpy boundary: run the policy on one scene
# ---------------------------------------------------------------------------


def codebooks_to_numpy(f_cb: torch.Tensor, w_cb: torch.Tensor):
    """Token-major torch codebooks (1, M, n) -> column-major numpy (n, M).

    Transmit columns are re-normalized in float64 so the per-antenna
    constraint holds bit-tight after the precision change.
    """
    f = f_cb.detach().cpu().numpy()[0].T.astype(np.complex128)
    w = w_cb.detach().cpu().numpy()[0].T.astype(np.complex128)
    f = f / np.max(np.abs(f), axis=0, keepdims=True)
    return f, w


def beams_to_numpy(f: torch.Tensor, w: torch.Tensor) -> list:
    """(1, K, ...) torch serving beams -> list of BeamPair (float64).

    Re-applies the exact max-magnitude normalization in float64 so the
    per-antenna constraint holds bit-tight after the precision change.
    """
    f_np = f.detach().cpu().numpy()[0].astype(np.complex128)
    w_np = w.detach().cpu().numpy()[0].astype(np.complex128)
    out = []
    for fk, wk in zip(f_np, w_np):
        out.append(BeamPair(f=fk / np.max(np.abs(fk)), w=wk))
    return out


# ---------------------------------------------------------------------------
# checkpoint format: model.json + one raw little-endian float32 blob per
# parameter, named by module path
# ---------------------------------------------------------------------------


def save_checkpoint(model: BeamformerPolicy, path, provenance: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, p in model.named_parameters():
        blob = p.detach().cpu().numpy().astype("<f4")
        (path / f"{name}.bin").write_bytes(blob.tobytes())
        params[name] = list(p.shape)
    manifest = {
        "format": "fdbeam-checkpoint-v1",
        "dtype": "float32",
        "endianness": "little",
        "model": model.cfg.to_dict(),
        "params": params,
        "provenance": provenance or {},
    }
    (path / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[BeamformerPolicy, dict]:
    path = Path(path)
    manifest = json.loads((path / "model.json").read_text())
    cfg = ModelConfig.from_dict(manifest["model"])
    model = BeamformerPolicy(cfg)
    state = {}
    for name, shape in manifest["params"].items():
        raw = np.frombuffer((path / f"{name}.bin").read_bytes(), dtype="<f4")
        state[name] = torch.from_numpy(raw.reshape(shape).astype(np.float32))
    model.load_state_dict(state)
    return model, manifest
