"""Experiment harness: method evaluation, parameter sweeps, CDFs, plots.

Every method is scored per scene and user pair with the same link metrics,
then aggregated into raw and overhead-discounted (effective) normalized SSE
using that method's own measurement count. The Vector/Matrix CSI bounds are
evaluated analytically.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .arrays import ArrayConfig
from .baselines import csi_bounds, lmmse_baseline, mrt_mrc_beams
from .channels import SceneRealization, SiteCalibration, SiteModel, sample_scene
from .data import calibrate_site
from .metrics import effective_nsse, link_report, to_db
from .model import BeamformerPolicy, beams_to_numpy, codebooks_to_numpy, user_features
from .probing import ProbingCodebooks, measure, normalize_tx_beam

METHODS = ("proposed", "lmmse", "vector_csi", "matrix_csi", "mrt_mrc", "random_probing")

CDF_METRICS = ("nsse", "inr_ul_db", "sinr_ul_db", "snr_dl_db")


@dataclass
class SweepSpec:
    """One sweep axis plus the fixed remainder of the experiment tuple."""

    axis: str  # K | L | M_over_K | kappa_db | array_size
    values: list
    fixed: dict  # keys: k, l, m, kappa_db
    n_test_scenes: int = 200
    seed: int = 9000

    def __post_init__(self):
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.axis not in ("K", "L", "M_over_K", "kappa_db", "array_size"):
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        for key in ("k", "l", "m", "kappa_db"):
            if key not in self.fixed:
                raise ValueError(f"fixed parameters must include {key!r}")


@dataclass
class EvalRow:
    """Aggregated result of one (config, method) evaluation."""

    config: dict
    method: str
    mean_nsse: float
    mean_effective_nsse: float
    measurements_used: int
    samples: dict = field(default_factory=dict)
    status: str = "ok"


def gaussian_codebooks(nt: int, nr: int, m: int, seed: int) -> ProbingCodebooks:
    """Random probing ablation: complex Gaussian beams, transmit-normalized."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(7,)))
    f = rng.standard_normal((nt, m)) + 1j * rng.standard_normal((nt, m))
    w = rng.standard_normal((nr, m)) + 1j * rng.standard_normal((nr, m))
    f = np.stack([normalize_tx_beam(col) for col in f.T], axis=1)
    return ProbingCodebooks(f_cb=f, w_cb=w)


def run_policy_on_scene(
    model: BeamformerPolicy,
    scene: SceneRealization,
    m: int,
    noise_seed: int,
    gaussian_probing: bool = False,
):
    """Inference pipeline on one scene: encode, probe, measure, serve.

    With gaussian_probing the learned codebooks are swapped for random ones
    while the serving synthesizer keeps its own SI embeddings, isolating
    the value of learned probing.
    """
    nt = scene.users[0].h_dl.shape[0]
    nr = scene.users[0].h_ul.shape[0]
    feats = torch.from_numpy(user_features(scene).astype(np.float32)).unsqueeze(0)
    with torch.no_grad():
        e_u = model.encode_users(feats, nt, nr)
        f_cb_t, w_cb_t, e_si = model.synthesize_probing(e_u, m, nt, nr)
    if gaussian_probing:
        cb = gaussian_codebooks(nt, nr, m, noise_seed)
    else:
        f_cb, w_cb = codebooks_to_numpy(f_cb_t, w_cb_t)
        cb = ProbingCodebooks(f_cb=f_cb, w_cb=w_cb)
    rec = measure(cb, scene.si, scene.budget, noise_seed=noise_seed)
    z_c = (rec.z / rec.scale_applied).astype(np.complex64)
    z_t = torch.from_numpy(z_c).unsqueeze(0)
    with torch.no_grad():
        f, w = model.synthesize_serving(e_u, e_si, z_t, nt, nr)
    return beams_to_numpy(f, w), cb, rec


def _collect(samples: dict, report) -> None:
    samples.setdefault("nsse", []).append(report.nsse)
    samples.setdefault("inr_ul_db", []).append(float(to_db(max(report.inr_ul, 1e-300))))
    samples.setdefault("sinr_ul_db", []).append(float(to_db(max(report.sinr_ul, 1e-300))))
    samples.setdefault("snr_dl_db", []).append(float(to_db(max(report.snr_dl, 1e-300))))


def evaluate_method(
    method: str,
    model: BeamformerPolicy | None,
    scenes: list,
    k: int,
    l: int,
    m: int,
    calibration: SiteCalibration | None = None,
    rx_shape: tuple | None = None,
    seed: int = 0,
) -> EvalRow:
    """Score one method on a list of test scenes.

    The effective nsse uses the method's own measurement count per coherent
    group: M for the proposed scheme and the random-probing ablation, K*Nr
    for LMMSE, zero for the MRT/MRC reference, and the closed forms for the
    CSI bounds (which need no scenes).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; known: {METHODS}")
    if method in ("proposed", "random_probing") and model is None:
        raise ValueError(f"method {method!r} requires a model checkpoint")
    if not scenes:
        raise ValueError("need at least one test scene")

    nt = scenes[0].users[0].h_dl.shape[0]
    nr = scenes[0].users[0].h_ul.shape[0]
    config = {"k": k, "l": l, "m": m, "nt": nt, "nr": nr,
              "kappa_db": scenes[0].kappa_db if scenes else None}

    if method in ("vector_csi", "matrix_csi"):
        vec, mat = csi_bounds(k, l, m, nt, nr)
        used = k * nr if method == "vector_csi" else nt * nr
        eff = vec if method == "vector_csi" else mat
        return EvalRow(config=config, method=method, mean_nsse=1.0,
                       mean_effective_nsse=eff, measurements_used=used)

    samples: dict = {}
    for i, scene in enumerate(scenes):
        if scene.k < k:
            raise ValueError(f"scene {i} has only {scene.k} user pairs, need {k}")
        noise_seed = seed * 7919 + i
        if method in ("proposed", "random_probing"):
            beams, _, _ = run_policy_on_scene(
                model, _restrict(scene, k), m, noise_seed,
                gaussian_probing=(method == "random_probing"))
            used = m
        elif method == "mrt_mrc":
            beams = mrt_mrc_beams(_restrict(scene, k)).beams
            used = 0
        elif method == "lmmse":
            rho = calibration.rho_for(scene.kappa_db) if calibration is not None else 1.0
            beams = []
            for j in range(k):
                res = lmmse_baseline(scene, j, rng_seed=noise_seed, rho=rho,
                                     rx_shape=rx_shape)
                beams.append(res.beams[0])
            used = k * nr
        for j in range(k):
            _collect(samples, link_report(beams[j], scene.users[j], scene.si, scene.budget))

    arrays = {name: np.array(vals) for name, vals in samples.items()}
    mean_nsse = float(arrays["nsse"].mean())
    return EvalRow(
        config=config, method=method, mean_nsse=mean_nsse,
        mean_effective_nsse=effective_nsse(mean_nsse, used, k, l),
        measurements_used=used, samples=arrays,
    )


def _restrict(scene: SceneRealization, k: int) -> SceneRealization:
    if scene.k == k:
        return scene
    return SceneRealization(si=scene.si, users=scene.users[:k],
                            user_info=scene.user_info[:k], budget=scene.budget,
                            kappa_db=scene.kappa_db, rng_seed=scene.rng_seed)


def _point_config(spec: SweepSpec, value) -> dict:
    cfg = dict(spec.fixed)
    if spec.axis == "K":
        cfg["k"] = int(value)
    elif spec.axis == "L":
        cfg["l"] = int(value)
    elif spec.axis == "M_over_K":
        cfg["m"] = int(round(value * cfg["k"]))
    elif spec.axis == "kappa_db":
        cfg["kappa_db"] = float(value)
    elif spec.axis == "array_size":
        cfg["n_elements"] = int(value)
    return cfg


def _array_for(base: ArrayConfig, n_elements: int | None) -> ArrayConfig:
    if n_elements is None:
        return base
    side = int(round(math.sqrt(n_elements)))
    shape = (side, n_elements // side) if side * (n_elements // side) == n_elements else (n_elements, 1)
    return ArrayConfig(nt=n_elements, nr=n_elements, tx_shape=shape, rx_shape=shape,
                       spacing=base.spacing, separation=base.separation,
                       wavelength=base.wavelength)


def run_sweep(
    spec: SweepSpec,
    methods: list,
    model: BeamformerPolicy | None,
    site: SiteModel,
    base_cfg: ArrayConfig,
    out_dir,
    calibrations: dict | None = None,
    calibration_scenes: int = 400,
) -> list:
    """Cartesian evaluation over one axis; emits rows.csv, CDF CSVs, plots.

    Per-point failures are recorded as failed rows and do not stop the
    sweep. Calibrations are computed per (array size, kappa) as needed and
    may be passed in pre-computed keyed by (nt, nr, kappa_db).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    calibrations = {} if calibrations is None else dict(calibrations)
    rows = []
    for value in spec.values:
        pc = _point_config(spec, value)
        cfg = _array_for(base_cfg, pc.get("n_elements"))
        key = (cfg.nt, cfg.nr, round(float(pc["kappa_db"]), 6))
        try:
            if key not in calibrations:
                calibrations[key] = calibrate_site(
                    site, cfg, (pc["kappa_db"],), n_scenes=calibration_scenes,
                    seed=spec.seed + 555_000)
            cal = calibrations[key]
            scenes = [
                sample_scene(site, cfg, pc["k"], pc["kappa_db"],
                             rng_seed=spec.seed + i, calibration=cal)
                for i in range(spec.n_test_scenes)
            ]
        except Exception as exc:  # scene generation failed: every method fails
            for method in methods:
                rows.append(EvalRow(config={**pc, "axis_value": value}, method=method,
                                    mean_nsse=float("nan"), mean_effective_nsse=float("nan"),
                                    measurements_used=0, status=f"failed: {exc}"))
            continue
        for method in methods:
            try:
                row = evaluate_method(method, model, scenes, pc["k"], pc["l"], pc["m"],
                                      calibration=cal, rx_shape=cfg.rx_shape,
                                      seed=spec.seed)
                row.config["axis"] = spec.axis
                row.config["axis_value"] = value
            except Exception as exc:
                row = EvalRow(config={**pc, "axis": spec.axis, "axis_value": value},
                              method=method, mean_nsse=float("nan"),
                              mean_effective_nsse=float("nan"), measurements_used=0,
                              status=f"failed: {exc}")
            rows.append(row)
    write_rows_csv(rows, out_dir / "rows.csv")
    write_cdf_csvs(rows, out_dir)
    plot_sweep(rows, spec, out_dir)
    return rows


_ROW_COLUMNS = ("axis", "axis_value", "method", "k", "l", "m", "kappa_db", "nt", "nr",
                "measurements_used", "mean_nsse", "mean_effective_nsse", "status")


def write_rows_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ROW_COLUMNS)
        for row in rows:
            writer.writerow([
                row.config.get("axis", ""),
                _fmt(row.config.get("axis_value", "")),
                row.method,
                row.config.get("k", ""), row.config.get("l", ""),
                row.config.get("m", ""), _fmt(row.config.get("kappa_db", "")),
                row.config.get("nt", ""), row.config.get("nr", ""),
                row.measurements_used,
                _fmt(row.mean_nsse), _fmt(row.mean_effective_nsse),
                row.status,
            ])


def write_cdf_csvs(rows: list, out_dir: Path) -> None:
    for metric in CDF_METRICS:
        path = Path(out_dir) / f"cdf_{metric}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["axis_value", "method", "sample"])
            for row in rows:
                for v in row.samples.get(metric, ()):
                    writer.writerow([_fmt(row.config.get("axis_value", "")),
                                     row.method, _fmt(v)])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def empirical_cdf(samples: np.ndarray):
    """Sorted samples and CDF levels; non-decreasing, ends at 1."""
    x = np.sort(np.asarray(samples))
    levels = np.arange(1, x.size + 1) / x.size
    return x, levels


def plot_sweep(rows: list, spec: SweepSpec, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_method: dict = {}
    for row in rows:
        if row.status == "ok":
            by_method.setdefault(row.method, []).append(row)
    for kind in ("mean_nsse", "mean_effective_nsse"):
        fig, ax = plt.subplots(figsize=(6, 4))
        for method, mrows in sorted(by_method.items()):
            xs = [r.config["axis_value"] for r in mrows]
            ys = [getattr(r, kind) for r in mrows]
            ax.plot(xs, ys, marker="o", label=method)
        ax.set_xlabel(spec.axis)
        ax.set_ylabel("raw nsse" if kind == "mean_nsse" else "effective nsse")
        ax.set_ylim(0, 1.05)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / f"{spec.axis}_{'raw' if kind == 'mean_nsse' else 'effective'}.png", dpi=120)
        plt.close(fig)
    for metric in CDF_METRICS:
        fig, ax = plt.subplots(figsize=(6, 4))
        plotted = False
        for method, mrows in sorted(by_method.items()):
            for row in mrows:
                if metric not in row.samples:
                    continue
                x, lv = empirical_cdf(row.samples[metric])
                ax.step(x, lv, where="post",
                        label=f"{method} @ {row.config['axis_value']}")
                plotted = True
        if plotted:
            ax.set_xlabel(metric)
            ax.set_ylabel("CDF")
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize=6)
            fig.tight_layout()
            fig.savefig(out_dir / f"cdf_{metric}.png", dpi=120)
        plt.close(fig)
