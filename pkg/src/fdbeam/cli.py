"""Command-line entry point binding the toolkit into reproducible runs.

Subcommands: gen-data, calibrate, pretrain, finetune, eval, sweep, plot,
selftest. Each reads one JSON config file plus overriding flags and writes
a run.json provenance record next to its outputs.
"""

import argparse
import copy
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .arrays import SPEED_OF_LIGHT, ArrayConfig
from .baselines import csi_bounds
from .channels import make_site
from .data import build_dataset, calibrate_site, load_dataset, site_from_dict
from .evaluation import METHODS, SweepSpec, evaluate_method, run_sweep
from .metrics import effective_nsse
from .model import ModelConfig, build_model, load_checkpoint
from .training import TrainConfig, finetune, pretrain

DEFAULT_CONFIG = {
    "site": {"site_seed": 1, "n_reflectors": 8, "dynamic_blocker_count": 3},
    "array": {
        "nt": 16, "nr": 16, "tx_shape": [4, 4], "rx_shape": [4, 4],
        "spacing_wavelengths": 0.5, "separation_wavelengths": 10.0,
        "carrier_ghz": 28.0,
    },
    "calibration": {"snr_target_db": 10.0, "inr_target_db": 40.0, "n_scenes": 1000, "seed": 77},
    "experiment": {"k": 8, "l": 56, "m": 16, "kappa_db": 0.0},
    "dataset": {"n_scenes": 2000, "k_max": 16, "kappa_set_db": [0.0], "seed": 123},
    "model": {
        "d_embed": 320, "n_heads": 5, "enc_layers": 3, "probe_layers": 2,
        "serve_layers": 2, "ff_expansion": 4, "max_m": 64, "init_seed": 0,
    },
    "training": {
        "steps": 2000, "batch_size": 32, "weight_decay": 0.01,
        "pretrain_lr": 5e-5, "pretrain_lr_min": 5e-6,
        "finetune_peak_lr": 1e-4, "warmup_frac": 0.1,
        "seed": 0, "eval_every": 200, "val_scenes": 64,
        "ks": [1, 2, 4, 8, 16], "ms": [4, 8, 16, 32], "kappas_db": [0.0],
    },
    "evaluation": {"n_test_scenes": 200, "seed": 9000},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    user = json.loads(Path(path).read_text())
    return _deep_merge(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def site_from_config(cfg: dict):
    s = cfg["site"]
    if "reflectors" in s:
        return site_from_dict(s)
    return make_site(s["site_seed"], s["n_reflectors"], s["dynamic_blocker_count"])


def array_from_config(cfg: dict) -> ArrayConfig:
    a = cfg["array"]
    return ArrayConfig(
        nt=a["nt"], nr=a["nr"],
        tx_shape=tuple(a["tx_shape"]), rx_shape=tuple(a["rx_shape"]),
        spacing=a["spacing_wavelengths"], separation=a["separation_wavelengths"],
        wavelength=SPEED_OF_LIGHT / (a["carrier_ghz"] * 1e9),
    )


def model_config_from(cfg: dict, array: ArrayConfig) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        d_embed=m["d_embed"], n_heads=m["n_heads"], enc_layers=m["enc_layers"],
        probe_layers=m["probe_layers"], serve_layers=m["serve_layers"],
        ff_expansion=m["ff_expansion"], max_m=m["max_m"],
        array_sizes=((array.nt, array.nr),),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        steps=t["steps"], batch_size=t["batch_size"], weight_decay=t["weight_decay"],
        pretrain_lr=t["pretrain_lr"], pretrain_lr_min=t["pretrain_lr_min"],
        finetune_peak_lr=t["finetune_peak_lr"], warmup_frac=t["warmup_frac"],
        seed=t["seed"], eval_every=t["eval_every"], val_scenes=t["val_scenes"],
        ks=tuple(t["ks"]), ms=tuple(t["ms"]), kappas_db=tuple(t["kappas_db"]),
    )


def write_run_record(out_dir, cfg: dict, argv: list, extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "argv": list(argv),
        "config": cfg,
        "config_hash": config_hash(cfg),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "extra": extra or {},
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def parse_values(text: str) -> list:
    """'a:b:step' inclusive ranges or comma-separated numbers."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError("range syntax is start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValueError("range step must be positive")
        n = int(round((stop - start) / step))
        vals = [start + i * step for i in range(n + 1)]
        return [v for v in vals if v <= stop + 1e-9]
    return [float(v) for v in text.split(",") if v]


def _apply_overrides(cfg: dict, args) -> dict:
    exp = cfg["experiment"]
    for flag, key in (("k", "k"), ("m", "m"), ("l", "l"), ("kappa_db", "kappa_db")):
        val = getattr(args, flag, None)
        if val is not None:
            exp[key] = val
    if getattr(args, "seed", None) is not None:
        cfg["dataset"]["seed"] = args.seed
        cfg["training"]["seed"] = args.seed
        cfg["evaluation"]["seed"] = args.seed
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.scenes is not None:
        cfg["dataset"]["n_scenes"] = args.scenes
    site = site_from_config(cfg)
    array = array_from_config(cfg)
    out = Path(args.out)
    ds = build_dataset(
        site=site, cfg=array,
        n_scenes=cfg["dataset"]["n_scenes"], k_max=cfg["dataset"]["k_max"],
        kappa_set=tuple(cfg["dataset"]["kappa_set_db"]), seed=cfg["dataset"]["seed"],
        out_dir=out, calibration_scenes=cfg["calibration"]["n_scenes"],
    )
    write_run_record(out, cfg, sys.argv[1:], {"n_scenes": cfg["dataset"]["n_scenes"]})
    print(f"dataset written to {out} "
          f"(train/val/test = {ds.n_scenes('train')}/{ds.n_scenes('val')}/{ds.n_scenes('test')})")
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    site = site_from_config(cfg)
    array = array_from_config(cfg)
    kappas = tuple(cfg["dataset"]["kappa_set_db"])
    cal = calibrate_site(site, array, kappas,
                         n_scenes=cfg["calibration"]["n_scenes"],
                         seed=cfg["calibration"]["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration.json").write_text(json.dumps(cal.to_dict(), indent=2, sort_keys=True))
    write_run_record(out, cfg, sys.argv[1:])
    print(f"sigma2_dl={cal.sigma2_dl:.6g} sigma2_ul={cal.sigma2_ul:.6g} "
          f"si_scale={{{', '.join(f'{k}: {v:.6g}' for k, v in sorted(cal.si_scale.items()))}}}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.steps is not None:
        cfg["training"]["steps"] = args.steps
    ds = load_dataset(args.data)
    array = ds.cfg
    model = build_model(model_config_from(cfg, array), seed=cfg["model"]["init_seed"])
    tc = train_config_from(cfg)
    out = Path(args.out)
    ckpt, best_val, _ = pretrain(model, ds, tc, out_dir=out)
    write_run_record(out, cfg, sys.argv[1:], {"checkpoint": str(ckpt), "best_val_nsse": best_val})
    print(f"pretrained checkpoint at {ckpt} (best val nsse {best_val:.4f})")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.steps is not None:
        cfg["training"]["steps"] = args.steps
    ds = load_dataset(args.data)
    exp = cfg["experiment"]
    tc = train_config_from(cfg)
    out = Path(args.out)
    ckpt, best_val, _ = finetune(args.ckpt, ds, (exp["k"], exp["m"], exp["kappa_db"]),
                                 tc, out_dir=out)
    write_run_record(out, cfg, sys.argv[1:], {"checkpoint": str(ckpt), "best_val_nsse": best_val})
    print(f"fine-tuned checkpoint at {ckpt} (best val nsse {best_val:.4f})")
    return 0


def _cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    exp = cfg["experiment"]
    k, l, m = exp["k"], exp["l"], exp["m"]
    if args.method in ("vector_csi", "matrix_csi"):
        nt, nr = cfg["array"]["nt"], cfg["array"]["nr"]
        vec, mat = csi_bounds(k, l, m, nt, nr)
        eff = vec if args.method == "vector_csi" else mat
        print(f"method {args.method}")
        print(f"raw_nsse {1.0:.4f}")
        print(f"effective_nsse {eff:.4f}")
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "summary.json").write_text(json.dumps(
                {"method": args.method, "raw_nsse": 1.0, "effective_nsse": eff,
                 "k": k, "l": l, "nt": nt, "nr": nr}, indent=2, sort_keys=True))
            write_run_record(out, cfg, sys.argv[1:])
        return 0

    if args.data is None:
        print("error: --data is required for simulated methods", file=sys.stderr)
        return 1
    ds = load_dataset(args.data)
    model = None
    if args.method in ("proposed", "random_probing"):
        if args.ckpt is None:
            print("error: --ckpt is required for the proposed method", file=sys.stderr)
            return 1
        model, _ = load_checkpoint(args.ckpt)
    kappa_db = exp["kappa_db"]
    n_test = min(cfg["evaluation"]["n_test_scenes"], ds.n_scenes("test"))
    scenes = [ds.scene("test", i, kappa_db, k=k) for i in range(n_test)]
    row = evaluate_method(args.method, model, scenes, k, l, m,
                          calibration=ds.calibration, rx_shape=ds.cfg.rx_shape,
                          seed=cfg["evaluation"]["seed"])
    print(f"method {args.method}")
    print(f"raw_nsse {row.mean_nsse:.4f}")
    print(f"effective_nsse {row.mean_effective_nsse:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_metric_csv(out / "metrics.csv", scenes, row)
        (out / "summary.json").write_text(json.dumps(
            {"method": args.method, "raw_nsse": row.mean_nsse,
             "effective_nsse": row.mean_effective_nsse,
             "measurements_used": row.measurements_used,
             "k": k, "l": l, "m": m, "kappa_db": kappa_db}, indent=2, sort_keys=True))
        write_run_record(out, cfg, sys.argv[1:])
    return 0


def _write_metric_csv(path, scenes, row) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["scene_id", "pair_index", "metric", "value", "value_db"])
        k = row.config["k"]
        for name, arr in sorted(row.samples.items()):
            # dB-valued samples are emitted as (linear, dB) pairs
            as_db = name.endswith("_db")
            metric = name[:-3] if as_db else name
            for flat, val in enumerate(arr):
                linear = 10.0 ** (val / 10.0) if as_db else val
                writer.writerow([scenes[flat // k].rng_seed, flat % k, metric,
                                 f"{linear:.12g}", f"{val:.12g}" if as_db else ""])


def _cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    exp = cfg["experiment"]
    axis_map = {"K": "K", "L": "L", "M_over_K": "M_over_K", "kappa": "kappa_db",
                "kappa_db": "kappa_db", "array": "array_size", "array_size": "array_size"}
    if args.axis not in axis_map:
        print(f"error: unknown axis {args.axis!r}", file=sys.stderr)
        return 1
    spec = SweepSpec(
        axis=axis_map[args.axis],
        values=parse_values(args.values),
        fixed={"k": exp["k"], "l": exp["l"], "m": exp["m"], "kappa_db": exp["kappa_db"]},
        n_test_scenes=cfg["evaluation"]["n_test_scenes"],
        seed=cfg["evaluation"]["seed"],
    )
    methods = args.methods.split(",") if args.methods else ["mrt_mrc", "vector_csi", "matrix_csi"]
    for method in methods:
        if method not in METHODS:
            print(f"error: unknown method {method!r}", file=sys.stderr)
            return 1
    model = None
    if any(m in ("proposed", "random_probing") for m in methods):
        if args.ckpt is None:
            print("error: --ckpt required for proposed/random_probing", file=sys.stderr)
            return 1
        model, _ = load_checkpoint(args.ckpt)
    site = site_from_config(cfg)
    array = array_from_config(cfg)
    out = Path(args.out)
    rows = run_sweep(spec, methods, model, site, array, out)
    write_run_record(out, cfg, sys.argv[1:], {"n_rows": len(rows)})
    n_points = len(spec.values)
    print(f"sweep over {spec.axis}: {n_points} points x {len(methods)} methods -> {out}/rows.csv")
    return 0


def _cmd_plot(args) -> int:
    from .evaluation import CDF_METRICS, EvalRow, plot_sweep
    import csv as _csv

    results = Path(args.results)
    rows = []
    with open(results / "rows.csv", newline="") as fh:
        for rec in _csv.DictReader(fh):
            if rec["status"] != "ok":
                continue
            rows.append(EvalRow(
                config={"axis": rec["axis"], "axis_value": float(rec["axis_value"]),
                        "k": rec["k"], "l": rec["l"], "m": rec["m"]},
                method=rec["method"],
                mean_nsse=float(rec["mean_nsse"]),
                mean_effective_nsse=float(rec["mean_effective_nsse"]),
                measurements_used=int(rec["measurements_used"]),
            ))
    for metric in CDF_METRICS:
        path = results / f"cdf_{metric}.csv"
        if not path.exists():
            continue
        with open(path, newline="") as fh:
            for rec in _csv.DictReader(fh):
                for row in rows:
                    if (row.method == rec["method"]
                            and f"{row.config['axis_value']:.12g}" == rec["axis_value"]):
                        row.samples.setdefault(metric, []).append(float(rec["sample"]))
                        break
    for row in rows:
        row.samples = {k: np.array(v) for k, v in row.samples.items()}
    axis = rows[0].config["axis"] if rows else "K"
    spec = SweepSpec(axis=axis, values=[r.config["axis_value"] for r in rows] or [0],
                     fixed={"k": 1, "l": 1, "m": 0, "kappa_db": 0.0})
    out = Path(args.out) if args.out else results
    plot_sweep(rows, spec, out)
    print(f"plots written to {out}")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdbeam",
        description="Full-duplex massive MIMO beamforming with learned probing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_exp=True):
        p.add_argument("--config", default=None, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        if with_exp:
            p.add_argument("--k", type=int, default=None)
            p.add_argument("--m", type=int, default=None)
            p.add_argument("--l", type=int, default=None)
            p.add_argument("--kappa-db", dest="kappa_db", type=float, default=None)

    p = sub.add_parser("gen-data", help="generate a scene dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("calibrate", help="fit the site power calibration")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("pretrain", help="broad pretraining across configurations")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune on one configuration")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate one method")
    common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--methods", default=None, help="comma-separated method list")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("plot", help="re-plot a sweep results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("selftest", help="run the oracle/invariant suite")
    p.set_defaults(func=_cmd_selftest)
    return parser


def _join_value_flags(argv: list) -> list:
    """Fold ['--values', '-20:20:10'] into ['--values=-20:20:10'].

    Range values may start with a minus sign, which argparse would read as
    a new option.
    """
    out = []
    skip = False
    for i, arg in enumerate(argv):
        if skip:
            skip = False
            continue
        if arg == "--values" and i + 1 < len(argv):
            out.append(f"--values={argv[i + 1]}")
            skip = True
        else:
            out.append(arg)
    return out


def dispatch(argv: list) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_value_flags(argv))
    try:
        return args.func(args)
    except Exception as exc:  # failed run -> exit 1 with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
