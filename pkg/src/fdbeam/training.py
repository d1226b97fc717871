"""Two-stage training: broad pretraining, then configuration fine-tuning.

Each optimization step draws a batch of coherent groups from the train
split, samples a (K, M, kappa) configuration, runs the full differentiable
pipeline (encode users, synthesize probing beams, measure with fresh noise,
synthesize serving beams), and minimizes the negative sum of normalized SSE
scored on the true channels. Inputs to the model stay restricted to partial
knowledge and noisy measurements throughout.
"""

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .channels import LinkBudget
from .data import Dataset
from .model import (
    Y_CONDITIONING_SNR,
    BeamformerPolicy,
    draw_measurement_noise,
    load_checkpoint,
    measure_torch,
    nsse_torch,
    save_checkpoint,
)
from .probing import conditioning_scale


@dataclass
class TrainConfig:
    """Optimization settings; learning rates follow the reference recipe."""

    steps: int = 2000
    batch_size: int = 32
    weight_decay: float = 0.01
    pretrain_lr: float = 5e-5
    pretrain_lr_min: float = 5e-6
    finetune_peak_lr: float = 1e-4
    warmup_frac: float = 0.1
    seed: int = 0
    eval_every: int = 200
    val_scenes: int = 64
    ks: tuple = (1, 2, 4, 8, 16, 32)
    ms: tuple = (4, 8, 16, 32, 64)
    kappas_db: tuple = (-20.0, -10.0, 0.0, 10.0, 20.0)

    def __post_init__(self):
        if self.pretrain_lr <= 0 or self.finetune_peak_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    """Cosine anneal from lr0 toward lr_min, hitting lr_min at the last step."""
    frac = step / total
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(step: int, total: int, peak: float, warmup_frac: float = 0.1,
                 start_div: float = 25.0, final_div: float = 1e4) -> float:
    """Single warmup-then-anneal cycle: monotone up to the peak, then down."""
    warm = max(1, int(round(warmup_frac * total)))
    if step <= warm:
        lo = peak / start_div
        return lo + (peak - lo) * step / warm
    frac = (step - warm) / max(1, total - warm)
    lo = peak / final_div
    return lo + (peak - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class GroupBatch:
    """Tensors of one batch of coherent groups (fixed K, kappa)."""

    y_real: torch.Tensor  # (B, K, 2(nt+nr)) float
    h_dl: torch.Tensor    # (B, K, nt) complex
    h_ul: torch.Tensor    # (B, K, nr) complex
    h_si: torch.Tensor    # (B, nr, nt) complex
    cap: torch.Tensor     # (B, K) float


class _SplitTensors:
    """Split arrays converted once to torch plus per-pair capacities."""

    def __init__(self, ds: Dataset, split: str):
        arr = ds.arrays(split)
        cal = ds.calibration
        budget = cal.budget()
        self.h_los = torch.from_numpy(arr["h_los"].astype(np.complex64))
        self.h_nlos = torch.from_numpy(arr["h_nlos"].astype(np.complex64))
        self.h_dl = torch.from_numpy(arr["h_dl"].astype(np.complex64))
        self.h_ul = torch.from_numpy(arr["h_ul"].astype(np.complex64))
        g_dl = np.sum(np.abs(arr["h_dl"].astype(np.complex128)) ** 2, axis=2)
        g_ul = np.sum(np.abs(arr["h_ul"].astype(np.complex128)) ** 2, axis=2)
        cap = (np.log2(1.0 + budget.p_dl * g_dl / budget.sigma2_dl)
               + np.log2(1.0 + budget.p_ul * g_ul / budget.sigma2_ul))
        self.cap = torch.from_numpy(cap.astype(np.float32))
        # conditioned user features, laid out (S, k_max, 2(nt+nr))
        s_dl = math.sqrt(budget.sigma2_dl * Y_CONDITIONING_SNR / budget.p_dl)
        s_ul = math.sqrt(budget.sigma2_ul * Y_CONDITIONING_SNR / budget.p_ul)
        y_dl = arr["y_dl"].astype(np.complex128) / s_dl
        y_ul = arr["y_ul"].astype(np.complex128) / s_ul
        feats = np.concatenate([y_dl.real, y_dl.imag, y_ul.real, y_ul.imag], axis=2)
        self.y_real = torch.from_numpy(feats.astype(np.float32))
        self.budget = budget
        self.cal = cal
        self.n = self.h_nlos.shape[0]
        self.k_max = self.h_dl.shape[1]

    def batch(self, idx: np.ndarray, k: int, kappa_db: float,
              user_rng: np.random.Generator | None = None) -> GroupBatch:
        """Gather a batch; users are subset-sampled when k < k_max."""
        scale = self.cal.scale_for(kappa_db)
        kappa = math.inf if math.isinf(kappa_db) and kappa_db > 0 else 10.0 ** (kappa_db / 10.0)
        w_los = math.sqrt(kappa / (kappa + 1.0)) if not math.isinf(kappa) else 1.0
        w_nlos = math.sqrt(1.0 / (kappa + 1.0)) if not math.isinf(kappa) else 0.0
        idx_t = torch.from_numpy(np.ascontiguousarray(idx, dtype=np.int64))
        h_si = scale * (w_los * self.h_los.unsqueeze(0) + w_nlos * self.h_nlos[idx_t])
        if k > self.k_max:
            raise ValueError(f"k={k} exceeds stored k_max={self.k_max}")
        if k == self.k_max or user_rng is None:
            sel = np.broadcast_to(np.arange(k), (len(idx), k))
        else:
            sel = np.stack([user_rng.permutation(self.k_max)[:k] for _ in idx])
        sel_t = torch.from_numpy(np.ascontiguousarray(sel))
        gather = lambda t: t[idx_t.unsqueeze(1), sel_t]
        return GroupBatch(
            y_real=gather(self.y_real),
            h_dl=gather(self.h_dl),
            h_ul=gather(self.h_ul),
            h_si=h_si,
            cap=gather(self.cap),
        )


def forward_groups(model: BeamformerPolicy, batch: GroupBatch, m: int,
                   budget: LinkBudget, noise: torch.Tensor | None) -> torch.Tensor:
    """Full pipeline on one batch; returns per-pair nsse (B, K)."""
    nt = batch.h_dl.shape[-1]
    nr = batch.h_ul.shape[-1]
    e_u = model.encode_users(batch.y_real, nt, nr)
    f_cb, w_cb, e_si = model.synthesize_probing(e_u, m, nt, nr)
    z = measure_torch(f_cb, w_cb, batch.h_si, budget.p_dl, budget.sigma2_ul, noise)
    f, w = model.synthesize_serving(e_u, e_si, z / conditioning_scale(budget), nt, nr)
    return nsse_torch(f, w, batch.h_dl, batch.h_ul, batch.h_si, budget, batch.cap)


def validation_nsse(model: BeamformerPolicy, split: _SplitTensors,
                    configs: list, n_scenes: int, noise_seed: int = 1234) -> float:
    """Mean nsse over the first n_scenes of a split, averaged over configs.

    Deterministic: fixed noise seed, first-k user subsets.
    """
    model.eval()
    vals = []
    n = min(n_scenes, split.n)
    idx = np.arange(n)
    with torch.no_grad():
        for k, m, kappa_db in configs:
            gen = torch.Generator().manual_seed(noise_seed)
            batch = split.batch(idx, k, kappa_db, user_rng=None)
            nr = batch.h_ul.shape[-1]
            noise = draw_measurement_noise((n, m, nr), split.budget.sigma2_ul, gen)
            nsse = forward_groups(model, batch, m, split.budget, noise)
            vals.append(float(nsse.mean()))
    model.train()
    return float(np.mean(vals))


class _RunLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "lr", "train_loss", "val_nsse", "wall_time"])

    def row(self, step, lr, loss, val, wall):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [step, f"{lr:.10g}", f"{loss:.10g}",
                 "" if val is None else f"{val:.10g}", f"{wall:.3f}"])


def _check_support(ds: Dataset, model: BeamformerPolicy, ks, ms, kappas_db):
    if max(ks) > ds.k_max:
        raise ValueError(f"dataset k_max={ds.k_max} does not cover K={max(ks)}")
    if max(ms) > model.cfg.max_m:
        raise ValueError(f"model max_m={model.cfg.max_m} does not cover M={max(ms)}")
    missing = [k for k in kappas_db if round(float(k), 6) not in ds.calibration.si_scale]
    if missing:
        raise ValueError(f"dataset calibration missing kappa values {missing}")
    if (ds.cfg.nt, ds.cfg.nr) not in model.cfg.array_sizes:
        raise ValueError(f"model has no projection for array size {(ds.cfg.nt, ds.cfg.nr)}")


def _train(model, ds, tc: TrainConfig, configs, lr_fn, out_dir, stage: str):
    """Shared optimization loop; returns the best-validation checkpoint path."""
    train_split = _SplitTensors(ds, "train")
    val_split = _SplitTensors(ds, "val")
    budget = train_split.budget
    nr = ds.cfg.nr

    opt = torch.optim.AdamW(model.parameters(), lr=tc.pretrain_lr,
                            weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = _RunLog(out_dir / f"{stage}_log.csv" if out_dir is not None else None)

    val_configs = configs[: min(len(configs), 12)]
    best_val, best_state = -math.inf, None
    start = time.time()
    model.train()
    for step in range(1, tc.steps + 1):
        k, m, kappa_db = configs[rng.integers(len(configs))]
        idx = rng.integers(0, train_split.n, size=tc.batch_size)
        batch = train_split.batch(idx, k, kappa_db, user_rng=rng)
        noise = draw_measurement_noise((tc.batch_size, m, nr), budget.sigma2_ul, gen)
        nsse = forward_groups(model, batch, m, budget, noise)
        loss = -nsse.sum(dim=1).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"{stage} diverged at step {step}: non-finite loss")
        lr = lr_fn(step, tc.steps)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        loss.backward()
        opt.step()

        val = None
        if step % tc.eval_every == 0 or step == tc.steps:
            val = validation_nsse(model, val_split, val_configs, tc.val_scenes)
            if val > best_val:
                best_val, best_state = val, {
                    kname: v.detach().clone() for kname, v in model.state_dict().items()
                }
        log.row(step, lr, float(loss.detach()), val, time.time() - start)

    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / f"{stage}_best"
        save_checkpoint(model, ckpt, provenance={
            "stage": stage, "steps": tc.steps, "seed": tc.seed,
            "best_val_nsse": best_val, "configs": [list(c) for c in configs],
            "calibration": ds.calibration.to_dict(),
        })
    return ckpt, best_val, model


def pretrain(model: BeamformerPolicy, ds: Dataset, tc: TrainConfig, out_dir=None):
    """Broad pretraining across the (K, M, kappa) configuration grid.

    Returns (checkpoint path or None, best validation nsse, model); the
    model is left at its best-validation weights.
    """
    configs = [(k, m, kappa) for k in tc.ks for m in tc.ms for kappa in tc.kappas_db]
    _check_support(ds, model, tc.ks, tc.ms, tc.kappas_db)
    lr_fn = lambda step, total: cosine_lr(step, total, tc.pretrain_lr, tc.pretrain_lr_min)
    return _train(model, ds, tc, configs, lr_fn, out_dir, stage="pretrain")


def finetune(checkpoint, ds: Dataset, fixed_config: tuple, tc: TrainConfig, out_dir=None):
    """One-cycle fine-tuning restricted to a single (K, M, kappa) setting.

    ``checkpoint`` is a checkpoint directory or an in-memory model. Returns
    (checkpoint path or None, best validation nsse, model).
    """
    if isinstance(checkpoint, BeamformerPolicy):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    k, m, kappa_db = fixed_config
    _check_support(ds, model, (k,), (m,), (kappa_db,))
    lr_fn = lambda step, total: one_cycle_lr(step, total, tc.finetune_peak_lr, tc.warmup_frac)
    return _train(model, ds, tc, [(k, m, float(kappa_db))], lr_fn, out_dir,
                  stage="finetune")
