"""Command-line interface.

Every subcommand works inside a run directory (``--out``)::

    RUN/config.json            resolved configuration
    RUN/data/manifest.json     synthetic dataset (``synth``)
    RUN/las.grd                LAS maps (``las-fit``)
    RUN/models/                checkpoints, baseline coefficients, histories
    RUN/eval/<split>/          per-model score CSVs and the aggregate table
    RUN/compare/               CRPS difference maps and summaries
    RUN/manifests/             one reproducibility manifest per command

Exit codes: 0 success, 1 invalid input (bad model id, missing file,
bad flag), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .baselines import EmosModel, LinRegModel, emos_fit, linreg_fit
from .metrics import (ForecastDistribution, ScoreReport, area_mean, crps_gaussian, crps_numeric, crpss,
                      parse_region)
from .models import (MODEL_ID_GRAMMAR, ModelConfig, ModelId, calibrated_forecast, load_model, parse_model_id,
                     save_model)
from .preprocess import (LasMaps, assemble_batch, file_digest, fit_las, load_manifest, load_split, read_grd,
                         write_grd)
from .synthdata import SynthConfig, generate, write_dataset
from .tensor import BACKEND
from .training import (TrainConfig, run_manifest, train_bias, train_calibration, train_spread, write_history,
                       write_json)

log = logging.getLogger("enspost")

DEFAULT_CONFIG = {
    "synth": SynthConfig().to_dict(),
    "las": {"filter_size": 7, "gaussian_sigma": 10.0, "truncate": 4.0},
    "model": {"spread": {}, "bias": {}},
    "train": {
        "spread": {"loss": "mse", "max_steps": 1500},
        "bias": {"loss": "mse", "max_steps": 5000},
        "crps": {"loss": "crps", "max_steps": 1000},
        "emos": {"loss": "crps", "max_steps": 3000, "lr": 0.01, "batch_size": 8, "l2_weight": 0.0},
    },
    "regions": {},
    "eval_models": ["E5", "E10", "Lin5", "EMOS5", "B5", "U5", "B5U5", "B5U5C"],
}


class CliError(Exception):
    """Invalid user input; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- configuration and run bookkeeping ------------------------------------------------

def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    """Defaults, then RUN/config.json, then --config, then --seed/--wrap-lon."""
    cfg = DEFAULT_CONFIG
    saved = Path(args.out) / "config.json"
    if saved.exists():
        cfg = merge_config(cfg, json.loads(saved.read_text()))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        try:
            cfg = merge_config(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if getattr(args, "seed", None) is not None:
        cfg = merge_config(cfg, {"synth": {"seed": args.seed}})
        for section in cfg["train"].values():
            section["seed"] = args.seed
        for section in cfg["model"].values():
            section["seed"] = args.seed
    if getattr(args, "wrap_lon", False):
        for section in cfg["model"].values():
            section["wrap_longitude"] = True
    return cfg


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def write_run_manifest(run: Path, name: str, cfg: dict, inputs: dict, outputs: list, **extra) -> None:
    def digest(p):
        return file_digest(p) if Path(p).exists() else None
    manifest = {
        "command": name, "config": cfg, "enspost_version": __version__, "git_describe": git_describe(),
        "kernel_backend": BACKEND,
        "inputs": {k: {"path": str(v), "sha256": digest(v)} for k, v in inputs.items()},
        "outputs": {str(p): digest(p) for p in outputs}, **extra,
    }
    (run / "manifests").mkdir(parents=True, exist_ok=True)
    write_json(run / "manifests" / f"{name}.json", manifest)


def _dataset_manifest(run: Path, args=None) -> Path:
    path = Path(getattr(args, "manifest", None) or run / "data" / "manifest.json")
    if not path.exists():
        raise CliError(f"dataset manifest not found: {path} (run `enspost synth` first)")
    return path


def _las(run: Path) -> LasMaps:
    path = run / "las.grd"
    if not path.exists():
        raise CliError(f"LAS maps not found: {path} (run `enspost las-fit` first)")
    return LasMaps.load(path)


def _parse_id(text: str) -> ModelId:
    try:
        return parse_model_id(text)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _checkpoint(run: Path, name: str) -> Path:
    path = run / "models" / f"{name}.ckpt"
    if not path.exists():
        raise CliError(f"checkpoint not found: {path} (train {name} first)")
    return path


# -- subcommands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    run = Path(args.out)
    cfg = resolve_config(args)
    synth = SynthConfig.from_dict(cfg["synth"])
    run.mkdir(parents=True, exist_ok=True)
    write_json(run / "config.json", cfg)
    log.info("generating %d dates on a %dx%d grid (seed %d)", synth.n_dates, synth.height, synth.width, synth.seed)
    path = write_dataset(generate(synth), run / "data")
    write_run_manifest(run, "synth", cfg, {}, [path])
    print(path)
    return 0


def cmd_las_fit(args) -> int:
    run = Path(args.out)
    cfg = resolve_config(args)
    mpath = _dataset_manifest(run, args)
    samples = load_split(load_manifest(mpath), "train")
    maps = fit_las(samples, **cfg["las"])
    out = run / "las.grd"
    maps.save(out)
    write_run_manifest(run, "las-fit", cfg, {"dataset_manifest": mpath}, [out], las_fingerprint=maps.fingerprint())
    print(out)
    return 0


def _batches(run: Path, n: int, maps: LasMaps, splits=("train", "val")):
    manifest = load_manifest(_dataset_manifest(run))
    return [assemble_batch(load_split(manifest, s), maps, n) for s in splits]


def _model_cfg(cfg: dict, head: str, n: int, batch) -> ModelConfig:
    section = "bias" if head == "bias" else "spread"
    h, w = batch.inputs.shape[2:]
    return ModelConfig(**{**cfg["model"][section], "head": head, "n_input_members": n, "height": h, "width": w})


def _train_net(run: Path, cfg: dict, kind: str, n: int, maps: LasMaps, data) -> Path:
    tr, va = data
    log.info("training %s%d", kind, n)
    logger = log.info if log.isEnabledFor(logging.INFO) else None
    if kind == "B":
        net, state = train_bias(tr, va, _model_cfg(cfg, "bias", n, tr), TrainConfig.from_dict(cfg["train"]["bias"]),
                                logger)
        name, tcfg = f"B{n}", cfg["train"]["bias"]
    elif kind == "U":
        net, state = train_spread(tr, va, _model_cfg(cfg, "spread", n, tr),
                                  TrainConfig.from_dict(cfg["train"]["spread"]), logger)
        name, tcfg = f"U{n}", cfg["train"]["spread"]
    else:
        bias = load_model(_checkpoint(run, f"B{n}"))
        spread = load_model(_checkpoint(run, f"U{n}"))
        net, state = train_calibration(spread, bias, tr, va, TrainConfig.from_dict(cfg["train"]["crps"]), logger)
        name, tcfg = f"B{n}U{n}C", cfg["train"]["crps"]
    models = run / "models"
    models.mkdir(parents=True, exist_ok=True)
    path = models / f"{name}.ckpt"
    save_model(path, net, maps.fingerprint(), {"best_step": state.best_step})
    write_history(models / f"{name}_history.csv", state)
    dataset = _dataset_manifest(run)
    inputs = {"dataset_manifest": dataset, "las": run / "las.grd"}
    if kind == "C":
        inputs.update({"bias": models / f"B{n}.ckpt", "spread": models / f"U{n}.ckpt"})
    write_run_manifest(run, f"train_{name}", cfg, inputs, [path, models / f"{name}_history.csv"],
                       training=run_manifest(TrainConfig.from_dict(tcfg), net.config.to_dict(), file_digest(dataset),
                                        best_step=state.best_step, best_val_loss=state.best_val_loss,
                                        stopped_early=state.stopped_early))
    return path


def cmd_train(args) -> int:
    run = Path(args.out)
    cfg = resolve_config(args)
    mid = _parse_id(args.model_id)
    n = mid.n
    models = run / "models"
    if mid.kind == "raw":
        print(f"{mid} is the raw ensemble; nothing to train")
        return 0
    manifest = load_manifest(_dataset_manifest(run))
    if mid.kind == "lin":
        tr = load_split(manifest, "train")
        models.mkdir(parents=True, exist_ok=True)
        outs = []
        for target in ("mean", "spread"):
            path = models / f"Lin{n}_{target}.grd"
            linreg_fit(tr, target, n).save(path)
            outs.append(path)
        write_run_manifest(run, f"train_Lin{n}", cfg, {"dataset_manifest": _dataset_manifest(run)}, outs)
        return 0
    if mid.kind == "emos":
        tr, va = load_split(manifest, "train"), load_split(manifest, "val")
        model, state = emos_fit(tr, va, n, TrainConfig.from_dict(cfg["train"]["emos"]))
        models.mkdir(parents=True, exist_ok=True)
        path = models / f"EMOS{n}.json"
        model.save(path)
        write_history(models / f"EMOS{n}_history.csv", state)
        write_run_manifest(run, f"train_EMOS{n}", cfg, {"dataset_manifest": _dataset_manifest(run)}, [path])
        return 0
    maps = _las(run)
    data = _batches(run, n, maps)
    wanted = [k for k, flag in (("B", mid.bias), ("U", mid.spread)) if flag]
    for kind in wanted:
        # composite ids reuse parts trained earlier
        if len(wanted) > 1 and (models / f"{kind}{n}.ckpt").exists():
            continue
        print(_train_net(run, cfg, kind, n, maps, data))
    if mid.crps:
        print(_train_net(run, cfg, "C", n, maps, data))
    return 0


def forecast(run: Path, mid: ModelId, samples, maps: LasMaps | None):
    """Members (n, D, H, W) for raw ensembles, else a ForecastDistribution."""
    n = mid.n
    if n > samples[0].n_members:
        raise CliError(f"{mid} needs {n} members; the dataset has {samples[0].n_members}")
    members = np.stack([s.members[48][:n] for s in samples], axis=1).astype(np.float64)
    if mid.kind == "raw":
        return members
    x = np.moveaxis(members, 0, 1)
    if mid.kind == "lin":
        paths = [run / "models" / f"Lin{n}_{t}.grd" for t in ("mean", "spread")]
        for p in paths:
            if not p.exists():
                raise CliError(f"coefficients not found: {p} (train Lin{n} first)")
        mean_m, spread_m = (LinRegModel.load(p) for p in paths)
        return ForecastDistribution(mean_m.predict(x), np.maximum(spread_m.predict(x), 1e-4 * maps.std_map))
    if mid.kind == "emos":
        path = run / "models" / f"EMOS{n}.json"
        if not path.exists():
            raise CliError(f"EMOS parameters not found: {path} (train EMOS{n} first)")
        return EmosModel.load(path).predict(x)
    batch = assemble_batch(samples, maps, n)
    bias = load_model(_checkpoint(run, f"B{n}")) if mid.bias else None
    if mid.crps:
        spread = load_model(_checkpoint(run, f"B{n}U{n}C"))
    else:
        spread = load_model(_checkpoint(run, f"U{n}")) if mid.spread else None
    return calibrated_forecast(bias, spread, batch, maps)


def score(fc, truth: np.ndarray, dressed: bool = False) -> np.ndarray:
    """Per-date CRPS maps (D, H, W)."""
    if isinstance(fc, ForecastDistribution):
        return fc.crps(truth)
    if dressed:
        return crps_gaussian(fc.mean(0), np.maximum(fc.std(0, ddof=1), 1e-12), truth)
    return crps_numeric(fc, truth)


def _mean_spread(fc):
    if isinstance(fc, ForecastDistribution):
        return fc.mu, fc.sigma
    return fc.mean(0), fc.std(0, ddof=1)


def _regions(cfg: dict, args) -> dict:
    regions = {}
    for name, text in cfg.get("regions", {}).items():
        regions[name] = parse_region(text)
    if getattr(args, "region", None):
        regions["region"] = parse_region(args.region)
    return regions


AGGREGATE_COLUMNS = ("model", "crps", "crpss_vs_E{n}", "crpss_vs_E{full}", "rmse_mean", "rmse_spread")


def evaluate_models(run: Path, ids: list[str], split: str, cfg: dict, regions: dict, area_weighted: bool,
                    dressed: bool) -> tuple[list[dict], dict]:
    parsed = [_parse_id(t) for t in ids]
    manifest = load_manifest(_dataset_manifest(run))
    samples = load_split(manifest, split)
    if not samples:
        raise CliError(f"split {split!r} is empty")
    full = samples[0].n_members
    truth = np.stack([s.ground_truth for s in samples]).astype(np.float64)
    full_spread = np.stack([s.ensemble_spread(48) for s in samples]).astype(np.float64)
    dates = [s.date_index for s in samples]
    maps = _las(run) if any(m.kind == "net" for m in parsed) else None

    def rmse_w(a, b):
        return float(np.sqrt(area_mean((a - b) ** 2, area_weighted)))

    reports, refs = {}, {}
    for m in parsed:
        maps_d = score(forecast(run, m, samples, maps), truth, dressed)
        reports[str(m)] = ScoreReport("crps", maps_d, dates, regions, area_weighted)
    for n in sorted({m.n for m in parsed} | {full}):
        key = f"E{n}"
        if key in reports:
            refs[n] = reports[key].global_mean
        else:
            refs[n] = area_mean(score(forecast(run, _parse_id(key), samples, None), truth, dressed), area_weighted)
    rows = []
    for m in parsed:
        rep = reports[str(m)]
        mean, spread = _mean_spread(forecast(run, m, samples, maps))
        rows.append({"model": str(m), "crps": rep.global_mean, "crpss_vs_E{n}": crpss(rep.global_mean, refs[m.n]),
                     "crpss_vs_E{full}": crpss(rep.global_mean, refs[full]), "rmse_mean": rmse_w(mean, truth),
                     "rmse_spread": rmse_w(spread, full_spread)})
    return rows, reports


def write_aggregate(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(AGGREGATE_COLUMNS)
        for r in rows:
            wr.writerow([r["model"]] + [repr(float(r[c])) for c in AGGREGATE_COLUMNS[1:]])


def read_aggregate(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "model" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def format_table(rows: list[dict]) -> str:
    head = f"{'model':<10}{'CRPS':>12}{'CRPSS/En':>12}{'CRPSS/Efull':>13}{'RMSE mu':>11}{'RMSE sd':>11}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['model']:<10}{r['crps']:>12.5f}{r['crpss_vs_E{n}']:>12.4f}{r['crpss_vs_E{full}']:>13.4f}"
                     f"{r['rmse_mean']:>11.4f}{r['rmse_spread']:>11.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    run = Path(args.out)
    cfg = resolve_config(args)
    ids = args.model_ids or cfg["eval_models"]
    rows, reports = evaluate_models(run, ids, args.split, cfg, _regions(cfg, args), args.area_weighted,
                                    args.dressed)
    out = run / "eval" / args.split
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, rep in reports.items():
        rep.to_csv(out / f"{name}.csv")
        outputs.append(out / f"{name}.csv")
    write_aggregate(out / "aggregate.csv", rows)
    outputs.append(out / "aggregate.csv")
    inputs = {"dataset_manifest": _dataset_manifest(run)}
    for p in sorted((run / "models").glob("*")) if (run / "models").exists() else []:
        if p.suffix in (".ckpt", ".grd", ".json"):
            inputs[p.name] = p
    write_run_manifest(run, f"eval_{args.split}", cfg, inputs, outputs, models=list(ids),
                       area_weighted=args.area_weighted, dressed=args.dressed)
    print(format_table(rows))
    return 0


def cmd_compare(args) -> int:
    run = Path(args.out)
    cfg = resolve_config(args)
    a, b = _parse_id(args.id_a), _parse_id(args.id_b)
    region = parse_region(args.region) if args.region else None
    manifest = load_manifest(_dataset_manifest(run))
    samples = load_split(manifest, args.split)
    truth = np.stack([s.ground_truth for s in samples]).astype(np.float64)
    maps = _las(run) if "net" in (a.kind, b.kind) else None
    ca = score(forecast(run, a, samples, maps), truth, args.dressed)
    cb = score(forecast(run, b, samples, maps), truth, args.dressed)
    diff = ca.mean(0) - cb.mean(0)
    out = run / "compare"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{a}_vs_{b}"
    mean_a = area_mean(ca, args.area_weighted, region)
    mean_b = area_mean(cb, args.area_weighted, region)
    summary = {"a": str(a), "b": str(b), "split": args.split, "region": args.region, "area_weighted": args.area_weighted,
               "crps_a": mean_a, "crps_b": mean_b, "mean_difference": mean_a - mean_b,
               "crpss_a_vs_b": crpss(mean_a, mean_b),
               "fraction_a_better": float(np.mean(diff < 0) if region is None else
                                          np.mean(diff[region[0]:region[1], region[2]:region[3]] < 0))}
    write_grd(out / f"{stem}.grd", diff.astype(np.float32)[None],
              {"kind": "crps_difference", "definition": "mean CRPS(a) - mean CRPS(b) per gridpoint",
               "a": str(a), "b": str(b), "split": args.split})
    write_json(out / f"{stem}.json", summary)
    write_run_manifest(run, f"compare_{stem}", cfg, {"dataset_manifest": _dataset_manifest(run)},
                       [out / f"{stem}.grd", out / f"{stem}.json"])
    print(json.dumps(summary, indent=1))
    return 0


# diverging ramp: negative -> blue (33, 102, 172), zero -> white, positive -> red (178, 24, 43)
RAMP_NEG = np.array([33, 102, 172], dtype=np.float64)
RAMP_POS = np.array([178, 24, 43], dtype=np.float64)
RAMP_NAN = np.array([128, 128, 128], dtype=np.uint8)


def diverging_rgb(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Map a 2-D field to uint8 RGB, linear in ``values / vmax`` clipped to [-1, 1].

    ``vmax`` defaults to max |value|; NaNs are grey.
    """
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if vmax is None:
        vmax = float(np.abs(v[finite]).max()) if finite.any() else 0.0
    t = np.clip(np.where(finite, v, 0.0) / vmax, -1, 1) if vmax > 0 else np.zeros_like(v)
    white = np.full(3, 255.0)
    end = np.where((t < 0)[..., None], RAMP_NEG, RAMP_POS)
    rgb = np.rint(white + np.abs(t)[..., None] * (end - white)).astype(np.uint8)
    rgb[~finite] = RAMP_NAN
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def cmd_heatmap(args) -> int:
    src = Path(args.score_map)
    if not src.exists():
        raise CliError(f"map not found: {src}")
    data, _ = read_grd(src)
    if not 0 <= args.channel < data.shape[0]:
        raise CliError(f"channel {args.channel} out of range for {data.shape[0]} channels")
    if args.scale < 1:
        raise CliError("--scale must be >= 1")
    rgb = diverging_rgb(data[args.channel], args.vmax)
    rgb = np.repeat(np.repeat(rgb, args.scale, axis=0), args.scale, axis=1)
    out = Path(args.out)
    if out.is_dir() or not out.suffix:
        out.mkdir(parents=True, exist_ok=True)
        out = out / (src.stem + ".ppm")
    write_ppm(out, rgb)
    print(out)
    return 0


def cmd_pipeline(args) -> int:
    """synth -> las-fit -> train B -> U -> C (+ baselines) -> eval."""
    cfg = resolve_config(args)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    if args.config or args.seed is not None or args.wrap_lon or not (run / "config.json").exists():
        write_json(run / "config.json", cfg)
    ns = argparse.Namespace(**{**vars(args), "config": None, "seed": None, "wrap_lon": False})
    cmd_synth(ns)
    cmd_las_fit(ns)
    n = args.members
    for mid in (f"B{n}", f"U{n}", f"B{n}U{n}C", f"EMOS{n}", f"Lin{n}"):
        cmd_train(argparse.Namespace(**{**vars(ns), "model_id": mid}))
    ids = args.model_ids or cfg["eval_models"]
    return cmd_eval(argparse.Namespace(**{**vars(ns), "model_ids": ids, "split": args.split}))


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="enspost", description="Post-process reduced ensembles with neural networks.")
    p.add_argument("--version", action="version", version=f"enspost {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, split=False, region=False):
        sp.add_argument("--out", required=True, help="run directory (or output file for heatmap)")
        sp.add_argument("--config", help="JSON config merged over the defaults")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--wrap-lon", action="store_true", help="periodic padding in longitude")
        if split:
            sp.add_argument("--split", choices=("train", "val", "test"), default="test")
        if region:
            sp.add_argument("--region", help='index box "y0:y1,x0:x1"')
            sp.add_argument("--area-weighted", action="store_true", help="cos-latitude weighted means")
            sp.add_argument("--dressed", action="store_true",
                            help="score raw ensembles with a Gaussian dressing instead of the empirical CDF")

    common(sub.add_parser("synth", help="generate the synthetic dataset"))
    sp = sub.add_parser("las-fit", help="fit LAS maps on the training split")
    common(sp)
    sp.add_argument("--manifest", help="dataset manifest (default RUN/data/manifest.json)")
    sp = sub.add_parser("train", help="train a model", description=f"Model ids: {MODEL_ID_GRAMMAR}")
    common(sp)
    sp.add_argument("model_id")
    sp = sub.add_parser("eval", help="score models on a split")
    common(sp, split=True, region=True)
    sp.add_argument("model_ids", nargs="*", help="default: eval_models from the config")
    sp = sub.add_parser("compare", help="per-gridpoint CRPS difference of two models")
    common(sp, split=True, region=True)
    sp.add_argument("id_a")
    sp.add_argument("id_b")
    sp = sub.add_parser("heatmap", help="render a GRD1 map as a PPM image")
    sp.add_argument("score_map")
    sp.add_argument("--out", required=True)
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--vmax", type=float)
    sp.add_argument("--scale", type=int, default=4, help="pixels per gridpoint")
    sp = sub.add_parser("pipeline", help="run synth, las-fit, training and eval end to end")
    common(sp, split=True, region=True)
    sp.add_argument("--members", type=int, default=5)
    sp.add_argument("model_ids", nargs="*")
    return p


COMMANDS = {"synth": cmd_synth, "las-fit": cmd_las_fit, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "heatmap": cmd_heatmap, "pipeline": cmd_pipeline}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        with threadpool_limits(1):  # single-thread BLAS keeps runs bitwise reproducible
            return COMMANDS[args.command](args)
    except (CliError, FileNotFoundError) as exc:
        print(f"enspost: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # invalid configuration values surface as ValueError from the dataclasses
        print(f"enspost: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"enspost: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
