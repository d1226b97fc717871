"""Built-in oracle and invariant checks behind the `selftest` subcommand.

Each check prints one PASS/FAIL line; the runner exits nonzero on any
failure. These mirror the heavier pytest suite at a size that finishes in
seconds.
"""

import math

import numpy as np
import torch

from .arrays import dft_codebook
from .baselines import csi_bounds, interference_aware_combiner
from .channels import LinkBudget, SIChannel, UserPairChannel, assemble_si
from .metrics import BeamPair, effective_nsse, link_report
from .model import ModelConfig, build_model
from .probing import ProbingCodebooks, measure


def _rand_unit(rng, n):
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return v / np.linalg.norm(v)


def check_bounds() -> bool:
    vec, mat = csi_bounds(8, 56, 16, 16, 16)
    return abs(vec - 448 / 576) < 1e-12 and abs(mat - 448 / 704) < 1e-12


def check_effective() -> bool:
    return abs(effective_nsse(1.0, 16, 8, 56) - 448 / 464) < 1e-12


def check_measurement_oracle() -> bool:
    rng = np.random.default_rng(5)
    for _ in range(20):
        nt, nr, m = rng.integers(2, 17), rng.integers(2, 17), rng.integers(1, 33)
        h = rng.standard_normal((nr, nt)) + 1j * rng.standard_normal((nr, nt))
        si = SIChannel(h_los=h, h_nlos=np.zeros_like(h), kappa=math.inf, h=h)
        f = rng.standard_normal((nt, m)) + 1j * rng.standard_normal((nt, m))
        f /= np.max(np.abs(f), axis=0, keepdims=True)
        w = rng.standard_normal((nr, m)) + 1j * rng.standard_normal((nr, m))
        budget = LinkBudget(p_dl=2.0, p_ul=1.0, sigma2_dl=1.0, sigma2_ul=0.5)
        z = measure(ProbingCodebooks(f, w), si, budget, noise_seed=0, include_noise=False).z
        loop = np.array([
            math.sqrt(budget.p_dl / nt) * w[:, i].conj() @ h @ f[:, i] for i in range(m)
        ])
        if np.max(np.abs(z - loop)) > 1e-10 * max(np.max(np.abs(loop)), 1e-30):
            return False
    return True


def check_gradients() -> bool:
    from .training import GroupBatch, forward_groups

    torch.manual_seed(0)
    cfg = ModelConfig(d_embed=8, n_heads=2, enc_layers=1, probe_layers=1,
                      serve_layers=1, ff_expansion=2, max_m=4, array_sizes=((4, 4),))
    model = build_model(cfg, seed=3).double()
    rng = np.random.default_rng(11)
    b, k, m, nt, nr = 1, 2, 2, 4, 4
    batch = GroupBatch(
        y_real=torch.from_numpy(rng.standard_normal((b, k, 2 * (nt + nr)))),
        h_dl=torch.from_numpy(rng.standard_normal((b, k, nt)) + 1j * rng.standard_normal((b, k, nt))),
        h_ul=torch.from_numpy(rng.standard_normal((b, k, nr)) + 1j * rng.standard_normal((b, k, nr))),
        h_si=torch.from_numpy(rng.standard_normal((b, nr, nt)) + 1j * rng.standard_normal((b, nr, nt))),
        cap=torch.from_numpy(np.full((b, k), 4.0)),
    )
    budget = LinkBudget(1.0, 1.0, 1.0, 1.0)
    noise = torch.from_numpy(
        (rng.standard_normal((b, m, nr)) + 1j * rng.standard_normal((b, m, nr))) / math.sqrt(2)
    )

    def loss_fn():
        return -forward_groups(model, batch, m, budget, noise).sum()

    loss = loss_fn()
    loss.backward()
    params = list(model.parameters())
    checked = 0
    for p in params:
        flat = p.detach().view(-1)
        grad = p.grad.detach().view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 3)):
            eps = 1e-5 * max(1.0, abs(float(flat[idx])))
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + eps
                lp = float(loss_fn())
                flat[idx] = orig - eps
                lm = float(loss_fn())
                flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = float(grad[idx])
            # 1e-8 absolute floor covers the FD oracle's own roundoff
            if abs(fd - an) > 1e-4 * max(abs(fd), abs(an)) + 1e-8:
                return False
            checked += 1
    return checked > 0


def check_invariants() -> bool:
    rng = np.random.default_rng(21)
    budget = LinkBudget(1.0, 1.0, 0.5, 0.25)
    for _ in range(500):
        nt, nr = rng.integers(2, 17), rng.integers(2, 17)
        user = UserPairChannel(
            h_dl=rng.standard_normal(nt) + 1j * rng.standard_normal(nt),
            h_ul=rng.standard_normal(nr) + 1j * rng.standard_normal(nr),
        )
        h = rng.standard_normal((nr, nt)) + 1j * rng.standard_normal((nr, nt))
        si = SIChannel(h_los=h, h_nlos=np.zeros_like(h), kappa=math.inf, h=h)
        f_raw = rng.standard_normal(nt) + 1j * rng.standard_normal(nt)
        f = f_raw / np.max(np.abs(f_raw))
        w = rng.standard_normal(nr) + 1j * rng.standard_normal(nr)
        rep = link_report(BeamPair(f=f, w=w), user, si, budget)
        if not (0.0 <= rep.nsse <= 1.0):
            return False
        rep2 = link_report(BeamPair(f=f, w=2.5j * w), user, si, budget)
        if abs(rep2.sse - rep.sse) > 1e-12 * max(rep.sse, 1e-30):
            return False
    return True


def check_kappa_limits() -> bool:
    rng = np.random.default_rng(31)
    h_los = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    h_nlos = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    hi = assemble_si(h_los, h_nlos, 200.0)
    lo = assemble_si(h_los, h_nlos, -math.inf)
    ok_hi = np.linalg.norm(hi.h - h_los) <= 1e-8 * np.linalg.norm(h_los)
    ok_lo = np.array_equal(lo.h, h_nlos)
    return ok_hi and ok_lo


def check_combiner_optimality() -> bool:
    import scipy.linalg

    rng = np.random.default_rng(41)
    budget = LinkBudget(1.0, 1.0, 1.0, 0.3)
    for _ in range(10):
        nt, nr = 8, 8
        h_ul = rng.standard_normal(nr) + 1j * rng.standard_normal(nr)
        h_si = rng.standard_normal(nr) + 1j * rng.standard_normal(nr)
        w = interference_aware_combiner(h_si, h_ul, budget, nt)
        num = budget.p_ul * abs(w.conj() @ h_ul) ** 2
        den = (np.linalg.norm(w) ** 2 * budget.sigma2_ul
               + budget.p_dl / nt * abs(w.conj() @ h_si) ** 2)
        a = budget.p_ul * np.outer(h_ul, h_ul.conj())
        bmat = budget.sigma2_ul * np.eye(nr) + budget.p_dl / nt * np.outer(h_si, h_si.conj())
        best = float(np.max(scipy.linalg.eigh(a, bmat, eigvals_only=True)))
        if abs(num / den - best) > 1e-6 * best:
            return False
    return True


def check_dft() -> bool:
    g = dft_codebook(16, (4, 4))
    gram = g.conj().T @ g
    return np.max(np.abs(gram - 16 * np.eye(16))) < 1e-9


CHECKS = (
    ("csi-bounds", check_bounds),
    ("effective-nsse", check_effective),
    ("measurement-oracle", check_measurement_oracle),
    ("gradient-check", check_gradients),
    ("link-invariants", check_invariants),
    ("kappa-limits", check_kappa_limits),
    ("combiner-optimality", check_combiner_optimality),
    ("dft-orthogonality", check_dft),
)


def run_selftest() -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            ok = fn()
        except Exception as exc:
            ok = False
            print(f"FAIL {name}: {exc}")
            failures += 1
            continue
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} check(s) failed")
    return 1 if failures else 0
