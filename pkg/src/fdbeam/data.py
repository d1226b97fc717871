"""Dataset assembly and on-disk persistence.

A dataset directory holds one manifest.json plus raw little-endian
complex64 arrays, one file per field, row-major, shapes declared in the
manifest. The SI channel is stored as its unit-normalized LOS/NLOS parts so
a single dataset serves every Rician factor on the calibrated grid; mixing
and amplitude calibration are applied when a scene is materialized.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrays import ArrayConfig
from .channels import (
    SceneRealization,
    SiteCalibration,
    SiteModel,
    UserPairChannel,
    assemble_si,
    calibrate_budget,
    los_si_channel,
    sample_scene,
)

SPLITS = ("train", "val", "test")

_FIELDS = ("h_nlos", "h_dl", "h_ul", "y_dl", "y_ul", "h_cross")


def site_to_dict(site: SiteModel) -> dict:
    return {
        "site_seed": site.site_seed,
        "reflectors": [
            {"position": list(map(float, pos)), "reflectivity": [float(rho.real), float(rho.imag)]}
            for pos, rho in site.reflectors
        ],
        "user_region": [list(map(float, r)) for r in site.user_region],
        "dynamic_blocker_count": site.dynamic_blocker_count,
        "bs_position": list(map(float, site.bs_position)),
        "path_dropout_prob": site.path_dropout_prob,
        "blocker_reflectivity": site.blocker_reflectivity,
        "blocker_radius": site.blocker_radius,
    }


def site_from_dict(d: dict) -> SiteModel:
    return SiteModel(
        site_seed=int(d["site_seed"]),
        reflectors=[
            (np.array(r["position"]), complex(r["reflectivity"][0], r["reflectivity"][1]))
            for r in d["reflectors"]
        ],
        user_region=tuple(tuple(r) for r in d["user_region"]),
        dynamic_blocker_count=int(d["dynamic_blocker_count"]),
        bs_position=np.array(d["bs_position"]),
        path_dropout_prob=float(d["path_dropout_prob"]),
        blocker_reflectivity=float(d["blocker_reflectivity"]),
        blocker_radius=float(d["blocker_radius"]),
    )


def calibrate_site(
    site: SiteModel,
    cfg: ArrayConfig,
    kappa_set: tuple,
    n_scenes: int = 1000,
    seed: int = 0,
    k: int = 4,
) -> SiteCalibration:
    """Sample raw scenes across the kappa grid and fit the calibration."""
    scenes = []
    per = max(1, n_scenes // max(1, len(kappa_set)))
    for j, kappa_db in enumerate(kappa_set):
        for i in range(per):
            scenes.append(sample_scene(site, cfg, k, kappa_db,
                                       rng_seed=seed + j * per + i))
    return calibrate_budget(scenes)


@dataclass
class Dataset:
    """On-disk scene collection with train/val/test splits."""

    root: Path
    manifest: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def cfg(self) -> ArrayConfig:
        a = self.manifest["array"]
        return ArrayConfig(
            nt=a["nt"], nr=a["nr"],
            tx_shape=tuple(a["tx_shape"]), rx_shape=tuple(a["rx_shape"]),
            spacing=a["spacing"], separation=a["separation"],
            wavelength=a["wavelength"],
        )

    @property
    def site(self) -> SiteModel:
        return site_from_dict(self.manifest["site"])

    @property
    def calibration(self) -> SiteCalibration:
        return SiteCalibration.from_dict(self.manifest["calibration"])

    @property
    def kappa_set(self) -> tuple:
        return tuple(self.manifest["kappa_set"])

    @property
    def k_max(self) -> int:
        return int(self.manifest["k_max"])

    def n_scenes(self, split: str) -> int:
        return int(self.manifest["splits"][split]["n_scenes"])

    def arrays(self, split: str) -> dict:
        """Memory-cached numpy arrays of one split, keyed by field name."""
        if split not in self._cache:
            meta = self.manifest["splits"][split]
            out = {}
            for name in _FIELDS:
                shape = tuple(meta["shapes"][name])
                raw = (self.root / split / f"{name}.bin").read_bytes()
                out[name] = np.frombuffer(raw, dtype="<c8").reshape(shape)
            out["h_los"] = np.frombuffer(
                (self.root / "h_los.bin").read_bytes(), dtype="<c8"
            ).reshape(tuple(self.manifest["h_los_shape"]))
            self._cache[split] = out
        return self._cache[split]

    def scene(self, split: str, index: int, kappa_db: float, k: int | None = None) -> SceneRealization:
        """Materialize one stored scene at a calibrated Rician factor."""
        arr = self.arrays(split)
        cal = self.calibration
        scale = cal.scale_for(kappa_db)
        k = self.k_max if k is None else k
        if k > self.k_max:
            raise ValueError(f"k={k} exceeds stored k_max={self.k_max}")
        si = assemble_si(
            scale * arr["h_los"].astype(np.complex128),
            scale * arr["h_nlos"][index].astype(np.complex128),
            kappa_db,
        )
        users, info = [], []
        for j in range(k):
            users.append(UserPairChannel(
                h_dl=arr["h_dl"][index, j].astype(np.complex128),
                h_ul=arr["h_ul"][index, j].astype(np.complex128),
                h_cross=complex(arr["h_cross"][index, j]),
            ))
            info.append((arr["y_dl"][index, j].astype(np.complex128),
                         arr["y_ul"][index, j].astype(np.complex128)))
        seed = int(self.manifest["splits"][split]["seed_start"]) + index
        return SceneRealization(si=si, users=users, user_info=info,
                                budget=cal.budget(), kappa_db=float(kappa_db),
                                rng_seed=seed)


def build_dataset(
    site: SiteModel,
    cfg: ArrayConfig,
    n_scenes: int,
    k_max: int,
    kappa_set: tuple,
    seed: int,
    out_dir,
    split_fractions: tuple = (0.8, 0.1, 0.1),
    calibration_scenes: int = 1000,
) -> Dataset:
    """Generate and persist a dataset; deterministic given its arguments.

    Scene rng_seeds are consecutive from ``seed`` with disjoint ranges per
    split (train first, then val, then test). Calibration constants are
    fitted once from a separate leading seed range and stored in the
    manifest.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cal = calibrate_site(site, cfg, kappa_set, n_scenes=calibration_scenes,
                         seed=seed + 10_000_000, k=min(k_max, 4))

    n_val = max(1, int(round(split_fractions[1] * n_scenes)))
    n_test = max(1, int(round(split_fractions[2] * n_scenes)))
    n_train = max(1, n_scenes - n_val - n_test)
    counts = {"train": n_train, "val": n_val, "test": n_test}

    h_los = los_si_channel(cfg)
    (out_dir / "h_los.bin").write_bytes(h_los.astype("<c8").tobytes())

    splits_meta = {}
    offset = 0
    for split in SPLITS:
        n = counts[split]
        buf = {
            "h_nlos": np.empty((n, cfg.nr, cfg.nt), dtype="<c8"),
            "h_dl": np.empty((n, k_max, cfg.nt), dtype="<c8"),
            "h_ul": np.empty((n, k_max, cfg.nr), dtype="<c8"),
            "y_dl": np.empty((n, k_max, cfg.nt), dtype="<c8"),
            "y_ul": np.empty((n, k_max, cfg.nr), dtype="<c8"),
            "h_cross": np.empty((n, k_max), dtype="<c8"),
        }
        for i in range(n):
            # kappa_set[0] is a placeholder: stored parts are kappa-free
            sc = sample_scene(site, cfg, k_max, kappa_set[0], rng_seed=seed + offset + i)
            buf["h_nlos"][i] = sc.si.h_nlos
            for j, (user, (y_dl, y_ul)) in enumerate(zip(sc.users, sc.user_info)):
                buf["h_dl"][i, j] = user.h_dl
                buf["h_ul"][i, j] = user.h_ul
                buf["y_dl"][i, j] = y_dl
                buf["y_ul"][i, j] = y_ul
                buf["h_cross"][i, j] = user.h_cross
        sdir = out_dir / split
        sdir.mkdir(exist_ok=True)
        for name, arr in buf.items():
            (sdir / f"{name}.bin").write_bytes(arr.tobytes())
        splits_meta[split] = {
            "n_scenes": n,
            "seed_start": seed + offset,
            "seed_stop": seed + offset + n,
            "shapes": {name: list(arr.shape) for name, arr in buf.items()},
        }
        offset += n

    manifest = {
        "format": "fdbeam-dataset-v1",
        "dtype": "complex64",
        "endianness": "little",
        "site": site_to_dict(site),
        "array": {
            "nt": cfg.nt, "nr": cfg.nr,
            "tx_shape": list(cfg.tx_shape), "rx_shape": list(cfg.rx_shape),
            "spacing": cfg.spacing, "separation": cfg.separation,
            "wavelength": cfg.wavelength,
        },
        "k_max": k_max,
        "kappa_set": [float(k) for k in kappa_set],
        "seed": seed,
        "h_los_shape": list(h_los.shape),
        "calibration": cal.to_dict(),
        "splits": splits_meta,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Dataset(root=out_dir, manifest=manifest)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    return Dataset(root=root, manifest=manifest)
