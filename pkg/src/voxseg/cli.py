"""Command-line entry points: phantom, train, infer, evaluate, ablate.

Configuration lives in a single JSON file with sections data / model /
train / loss / fold / phantom / ablate; command-line flags override file
values. Every command is deterministic under a fixed seed and writes a
manifest sufficient to reproduce it.
"""

import argparse
import csv
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .augment import augment as augment_sample
from .folds import split_folds
from .losses import LossConfig
from .metrics import (PT_GRID, METRIC_NAMES, patient_metrics,
                      pooled_estimates, volume_bin_analysis)
from .models import (ModelConfig, build_model, experiment_name, load_weights,
                     save_weights)
from .optim import TrainConfig, training_loop
from .params import ConfigurationError
from .phantom import PhantomSpec, generate_phantom
from .preprocess import invert_to_original, preprocess, preprocess_label
from .volume import (Volume, load_volume, read_manifest, save_volume,
                     write_manifest)


def _load_config(path):
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _model_config(section, target_dims):
    fields = dict(section)
    fields.setdefault("input_shape", list(target_dims))
    fields["input_shape"] = tuple(fields["input_shape"])
    if "filters" in fields:
        fields["filters"] = tuple(fields["filters"])
    return ModelConfig(**fields)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value):
    return f"{value:.9f}"


# -- phantom ------------------------------------------------------------------

def cmd_phantom(args):
    cfg = _load_config(args.config).get("phantom", {})
    cfg_seed = cfg.pop("seed", 0)
    cfg_count = cfg.pop("count", 10)
    seed = args.seed if args.seed is not None else cfg_seed
    count = args.count if args.count is not None else cfg_count
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        spec = PhantomSpec(**cfg, seed=seed * 100003 + i,
                           patient_id=f"P{i:03d}")
        vol = generate_phantom(spec)
        save_volume(vol, out / vol.patient_id)
        entries.append({"patient_id": vol.patient_id, "path": vol.patient_id,
                        "tumor_volume_ml": vol.tumor_volume_ml()})
    write_manifest(entries, out / "manifest.json")
    return 0


# -- train --------------------------------------------------------------------

def _load_dataset(manifest_path, target_dims):
    entries = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    pairs, volumes_ml = {}, {}
    for entry in entries:
        vol = load_volume(root / entry["path"])
        img, record = preprocess(vol, target_dims)
        if vol.annotation is not None:
            lab = preprocess_label(vol.annotation, record)
        else:
            lab = np.zeros(target_dims, dtype=np.uint8)
        pairs[entry["patient_id"]] = (img, lab)
        volumes_ml[entry["patient_id"]] = float(entry["tumor_volume_ml"])
    return pairs, volumes_ml


def _run_training(cfg, seed, fold_index, out):
    data_cfg = cfg.get("data", {})
    if "manifest" not in data_cfg:
        raise ConfigurationError("config field data.manifest is required")
    target_dims = tuple(data_cfg.get("target_dims", (32, 32, 32)))
    train_cfg = TrainConfig(**{**cfg.get("train", {}), "seed": seed})
    loss_cfg = LossConfig(**cfg.get("loss", {}))
    model_cfg = _model_config(cfg.get("model", {}), target_dims)
    fold_cfg = cfg.get("fold", {})
    k = fold_cfg.get("k", 5)

    pairs, volumes_ml = _load_dataset(data_cfg["manifest"], target_dims)
    split = split_folds(volumes_ml, k=k, seed=fold_cfg.get("seed", 0))
    train_ids, val_ids, test_ids = split.iteration(fold_index)

    model = build_model(model_cfg, seed=seed)
    augment_fn = None
    if train_cfg.augment:
        augment_fn = lambda img, lab, rng: augment_sample(img, lab, rng)[:2]
    result = training_loop(model, [pairs[p] for p in train_ids],
                           [pairs[p] for p in val_ids],
                           train_cfg, loss_cfg, augment_fn=augment_fn)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / "checkpoint.ckpt")
    _write_csv(out / "history.csv",
               ["epoch", "train_loss", "val_loss", "val_top_loss"],
               [[r.epoch, _fmt(r.train_loss), _fmt(r.val_loss),
                 _fmt(r.val_top_loss)] for r in result.history])
    _write_csv(out / "timing.csv", ["epoch", "seconds"],
               [[r.epoch, _fmt(r.seconds)] for r in result.history])
    (out / "folds.json").write_text(json.dumps(
        {"k": k, "assignments": split.assignments}, indent=2, sort_keys=True))

    seconds = [r.seconds for r in result.history]
    manifest = {
        "experiment": experiment_name(model_cfg, train_cfg.accumulation_steps,
                                      loss_cfg.kind,
                                      train_cfg.checkpoint_policy),
        "seed": seed,
        "config": {"model": model_cfg.to_dict(),
                   "train": train_cfg.to_dict(),
                   "loss": asdict(loss_cfg),
                   "data": {"manifest": str(data_cfg["manifest"]),
                            "target_dims": list(target_dims)}},
        "parameter_count": model.param_count(),
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_early": result.stopped_early,
        "seconds_per_epoch": float(np.mean(seconds)),
        "train_hours": float(np.sum(seconds)) / 3600.0,
        "folds": {"k": k, "index": fold_index, "train": sorted(train_ids),
                  "val": sorted(val_ids), "test": sorted(test_ids)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                  sort_keys=True))
    return model, result, manifest


def cmd_train(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("train", {}).get("seed", 0)
    fold_index = args.fold if args.fold is not None else cfg.get("fold", {}).get("index", 0)
    _run_training(cfg, seed, fold_index, args.out)
    return 0


# -- infer --------------------------------------------------------------------

def cmd_infer(args):
    model = load_weights(args.checkpoint)
    target_dims = model.config.input_shape
    root = Path(args.volumes)
    vol_dirs = sorted(d for d in root.iterdir() if (d / "meta.json").exists())
    if not vol_dirs:
        raise ConfigurationError(f"no volumes found under {root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for vol_dir in vol_dirs:
        vol = load_volume(vol_dir)
        result = None
        for run in range(1, args.repeat + 1):
            t0 = time.perf_counter()
            img, record = preprocess(vol, target_dims)
            t1 = time.perf_counter()
            prob = model.predict_proba(img)[0, 1]
            t2 = time.perf_counter()
            result = invert_to_original(prob, record)
            t3 = time.perf_counter()
            rows.append([vol.patient_id, run, _fmt(t1 - t0), _fmt(t2 - t1),
                         _fmt(t3 - t2), _fmt(t3 - t0)])
        save_volume(result, out / vol.patient_id)
    _write_csv(out / "timing.csv",
               ["patient_id", "run", "preprocess_s", "forward_s",
                "reconstruct_s", "total_s"], rows)
    return 0


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(args):
    folds_doc = json.loads(Path(args.folds).read_text())
    assignments = folds_doc["assignments"]
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    missing = sorted(pid for pid in assignments
                     if not (pred_root / pid / "meta.json").exists())
    if missing:
        raise ConfigurationError(
            "missing predictions for patients: " + ", ".join(missing))

    per_fold, per_patient_rows = {}, []
    volumes_ml, dice_rows = {}, {}
    for pid in sorted(assignments):
        fold = assignments[pid]
        gt = load_volume(gt_root / pid)
        pred = load_volume(pred_root / pid)
        gt_mask = (gt.annotation > 0 if gt.annotation is not None
                   else np.zeros(gt.data.shape, dtype=bool))
        prob = np.clip(pred.data, 0.0, 1.0)
        rows = patient_metrics(gt_mask, prob, gt.spacing, patient_id=pid)
        per_fold.setdefault(fold, []).extend(rows)
        volumes_ml[pid] = gt.tumor_volume_ml()
        for row in rows:
            per_patient_rows.append([pid, fold, row["pt"]] +
                                    [_fmt(row[m]) for m in METRIC_NAMES])
            dice_rows[(pid, row["pt"])] = row["dice"]

    report = pooled_estimates(per_fold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv",
               ["patient_id", "fold", "pt"] + list(METRIC_NAMES),
               per_patient_rows)
    table_rows = []
    for pt in PT_GRID:
        cells = [f"{pt:.1f}"]
        for name in ("dice", "dice_tp", "f1", "recall", "precision"):
            mean, std = report["pooled"][pt][name]
            cells.append(f"{mean:.4f}±{std:.4f}")
        table_rows.append(cells)
    _write_csv(out / "table.csv",
               ["PT", "Dice", "Dice-TP", "F1", "Recall", "Precision"],
               table_rows)

    best_pt = report["best_pt"]
    patients = sorted(volumes_ml)
    bins = volume_bin_analysis([volumes_ml[p] for p in patients],
                               [dice_rows[(p, best_pt)] for p in patients],
                               patient_ids=patients,
                               bins=min(10, len(patients)))
    _write_csv(out / "bins.csv",
               ["bin", "volume_min", "volume_max", "q1", "median", "q3",
                "whisker_low", "whisker_high", "n"],
               [[b["bin"], _fmt(b["volume_min"]), _fmt(b["volume_max"]),
                 _fmt(b["q1"]), _fmt(b["median"]), _fmt(b["q3"]),
                 _fmt(b["whisker_low"]), _fmt(b["whisker_high"]),
                 len(b["patients"])] for b in bins])

    serializable = {
        "best_pt": best_pt,
        "pooled": {str(pt): {name: list(report["pooled"][pt][name])
                             for name in METRIC_NAMES} for pt in PT_GRID},
        "per_fold": {str(f): {str(pt): report["per_fold"][f][pt]
                              for pt in PT_GRID} for f in report["per_fold"]},
    }
    (out / "pooled.json").write_text(json.dumps(serializable, indent=2,
                                                sort_keys=True))
    return 0


# -- ablate -------------------------------------------------------------------

def cmd_ablate(args):
    cfg = _load_config(args.config)
    grid = cfg.get("ablate", {}).get("grid")
    if not grid:
        raise ConfigurationError("config field ablate.grid is required")
    seed = args.seed if args.seed is not None else cfg.get("train", {}).get("seed", 0)
    fold_index = args.fold if args.fold is not None else cfg.get("fold", {}).get("index", 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for overrides in grid:
        variant = {**cfg, "model": {**cfg.get("model", {}), **overrides}}
        variant.pop("ablate", None)
        model, result, manifest = _run_training(
            variant, seed, fold_index, out / "runs" / "pending")
        name = manifest["experiment"]
        run_dir = out / "runs" / name
        if run_dir.exists():
            raise ConfigurationError(f"duplicate grid entry {name}")
        (out / "runs" / "pending").rename(run_dir)
        rows.append([name, seed, manifest["parameter_count"],
                     manifest["best_epoch"], _fmt(manifest["best_val_loss"])])
    _write_csv(out / "comparison.csv",
               ["experiment", "seed", "parameters", "best_epoch",
                "best_val_loss"], rows)
    return 0


# -- entry point ----------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(prog="voxseg",
                                     description="3-D segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    p.add_argument("--config")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one cross-validation fold")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict probability maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeat", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a component toggle grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
