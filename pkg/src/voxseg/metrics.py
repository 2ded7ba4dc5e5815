"""Detection and segmentation metrics: threshold sweep, connected
components, component pairing, per-patient metrics, pooled cross-fold
estimates, and volume-binned Dice distributions.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .params import ConfigurationError

PT_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
METRIC_NAMES = ("dice", "dice_tp", "recall", "precision", "f1")


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    count: int
    voxel_counts: list
    volumes_ml: list

    def component_mask(self, index):
        """Boolean mask of component `index` (1-based label)."""
        return self.labels == index


@dataclass
class DetectionRecord:
    patient_id: str
    threshold: float
    pairs: list                 # (gt_label, pred_label, pair dice)
    missed_gt: list             # FN component labels
    spurious_pred: list         # FP component labels

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def recall(self):
        denom = self.tp + len(self.missed_gt)
        return self.tp / denom if denom else 1.0

    @property
    def precision(self):
        denom = self.tp + len(self.spurious_pred)
        # zero predictions raise no false alarms
        return self.tp / denom if denom else 1.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0

    @property
    def dice_tp(self):
        if not self.pairs:
            return float("nan")
        return float(np.mean([d for _, _, d in self.pairs]))


def threshold_sweep(prob_map, thresholds=PT_GRID):
    """Binary masks (prob >= PT) for every PT in the grid; masks are nested."""
    prob_map = np.asarray(prob_map)
    if prob_map.min() < 0.0 or prob_map.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    return {pt: prob_map >= pt for pt in thresholds}


def connected_components(mask, spacing=(1.0, 1.0, 1.0), connectivity=26):
    """Label maximal components; labels follow first-voxel scan order."""
    mask = np.asarray(mask).astype(bool)
    if connectivity == 26:
        structure = np.ones((3, 3, 3), dtype=int)
    elif connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    else:
        raise ConfigurationError(f"unsupported connectivity {connectivity}")
    labels, count = ndimage.label(mask, structure=structure)
    counts = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    voxel_ml = float(np.prod(spacing)) / 1000.0
    return ComponentLabeling(labels=labels, count=int(count),
                             voxel_counts=[int(c) for c in counts],
                             volumes_ml=[float(c) * voxel_ml for c in counts])


def pair_components(gt, pred, patient_id="", threshold=0.5):
    """Greedy one-to-one pairing by descending overlap; any overlap counts."""
    if gt.labels.shape != pred.labels.shape:
        raise ValueError("component labelings live on different grids")
    overlap = np.zeros((gt.count + 1, pred.count + 1), dtype=np.int64)
    joint = gt.labels.astype(np.int64) * (pred.count + 1) + pred.labels
    flat = np.bincount(joint.ravel(),
                       minlength=(gt.count + 1) * (pred.count + 1))
    overlap = flat.reshape(gt.count + 1, pred.count + 1)
    candidates = []
    for g in range(1, gt.count + 1):
        for p in range(1, pred.count + 1):
            if overlap[g, p] > 0:
                candidates.append((int(overlap[g, p]), g, p))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_g, used_p, pairs = set(), set(), []
    for ov, g, p in candidates:
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        dice = 2.0 * ov / (gt.voxel_counts[g - 1] + pred.voxel_counts[p - 1])
        pairs.append((g, p, float(dice)))
    missed = [g for g in range(1, gt.count + 1) if g not in used_g]
    spurious = [p for p in range(1, pred.count + 1) if p not in used_p]
    return DetectionRecord(patient_id=patient_id, threshold=threshold,
                           pairs=pairs, missed_gt=missed,
                           spurious_pred=spurious)


def dice_coefficient(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def patient_metrics(gt_mask, prob_map, spacing=(1.0, 1.0, 1.0),
                    patient_id="", thresholds=PT_GRID):
    """Whole-volume and detection metrics at every probability threshold."""
    gt_mask = np.asarray(gt_mask).astype(bool)
    prob_map = np.asarray(prob_map)
    if gt_mask.shape != prob_map.shape:
        raise ValueError("ground truth and probability map dims differ")
    gt_cc = connected_components(gt_mask, spacing)
    rows = []
    for pt, mask in threshold_sweep(prob_map, thresholds).items():
        pred_cc = connected_components(mask, spacing)
        record = pair_components(gt_cc, pred_cc, patient_id, pt)
        rows.append({
            "patient_id": patient_id,
            "pt": pt,
            "dice": dice_coefficient(gt_mask, mask),
            "dice_tp": record.dice_tp,
            "recall": record.recall,
            "precision": record.precision,
            "f1": record.f1,
            "tp": record.tp,
            "fn": len(record.missed_gt),
            "fp": len(record.spurious_pred),
        })
    return rows


def _fold_means(fold_rows, thresholds):
    """Patient-wise means per PT for one fold; NaN-aware for dice_tp."""
    means = {}
    for pt in thresholds:
        at_pt = [r for r in fold_rows if r["pt"] == pt]
        if not at_pt:
            raise ConfigurationError(f"fold has no metrics at PT={pt}")
        means[pt] = {}
        for name in METRIC_NAMES:
            values = np.array([r[name] for r in at_pt], dtype=float)
            finite = values[np.isfinite(values)]
            means[pt][name] = float(finite.mean()) if finite.size else float("nan")
    return means


def pooled_estimates(per_fold_rows, thresholds=PT_GRID):
    """Pooled mean and std of fold means per PT, plus the best PT.

    per_fold_rows maps fold index -> list of patient_metrics rows.
    Best PT maximizes pooled F1; ties break toward higher pooled Dice.
    """
    if not per_fold_rows:
        raise ConfigurationError("no folds to pool")
    fold_means = {f: _fold_means(rows, thresholds)
                  for f, rows in per_fold_rows.items()}
    pooled = {}
    for pt in thresholds:
        pooled[pt] = {}
        for name in METRIC_NAMES:
            values = np.array([fold_means[f][pt][name] for f in fold_means],
                              dtype=float)
            finite = values[np.isfinite(values)]
            if finite.size:
                pooled[pt][name] = (float(finite.mean()),
                                    float(finite.std(ddof=0)))
            else:
                pooled[pt][name] = (float("nan"), float("nan"))
    def sort_key(pt):
        f1, _ = pooled[pt]["f1"]
        dice, _ = pooled[pt]["dice"]
        return (np.nan_to_num(f1, nan=-1.0), np.nan_to_num(dice, nan=-1.0), -pt)
    best_pt = max(thresholds, key=sort_key)
    return {"per_fold": fold_means, "pooled": pooled, "best_pt": best_pt}


def volume_bin_analysis(volumes_ml, dices, patient_ids=None, bins=10):
    """Per-bin Dice distributions over equally-populated volume bins.

    Patients are sorted by tumor volume (ties broken by patient id order)
    and chunked into `bins` groups whose sizes differ by at most one.
    """
    volumes_ml = list(volumes_ml)
    dices = list(dices)
    n = len(volumes_ml)
    if len(dices) != n:
        raise ConfigurationError("volumes and dice lists differ in length")
    if n < bins:
        raise ConfigurationError(f"{n} patients cannot fill {bins} bins")
    if patient_ids is None:
        patient_ids = list(range(n))
    order = sorted(range(n), key=lambda i: (volumes_ml[i], patient_ids[i]))
    base, extra = divmod(n, bins)
    out, start = [], 0
    for b in range(bins):
        size = base + (1 if b < extra else 0)
        members = order[start:start + size]
        start += size
        vals = np.array([dices[i] for i in members], dtype=float)
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        iqr = q3 - q1
        lo_w = vals[vals >= q1 - 1.5 * iqr].min()
        hi_w = vals[vals <= q3 + 1.5 * iqr].max()
        out.append({
            "bin": b,
            "patients": [patient_ids[i] for i in members],
            "volume_min": float(min(volumes_ml[i] for i in members)),
            "volume_max": float(max(volumes_ml[i] for i in members)),
            "q1": float(q1), "median": float(med), "q3": float(q3),
            "whisker_low": float(lo_w), "whisker_high": float(hi_w),
            "outliers": [float(v) for v in vals
                         if v < q1 - 1.5 * iqr or v > q3 + 1.5 * iqr],
        })
    return out
