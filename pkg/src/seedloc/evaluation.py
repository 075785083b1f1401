"""Greedy shortest-distance pairing of detections to ground truth, and summary metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DETECTION_THRESHOLD_MM = 3.0


def greedy_match(gt_points, det_points) -> list[tuple[int, int, float]]:
    """Pair points by repeatedly taking the globally closest unmatched pair.

    Ties are broken by ``(gt_index, det_index)``. Every pair is returned,
    however far apart; distance cut-offs are applied by the metrics.
    """
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    det = np.asarray(det_points, dtype=np.float64).reshape(-1, 3)
    n, m = len(gt), len(det)
    if n == 0 or m == 0:
        return []
    dist = np.linalg.norm(gt[:, None, :] - det[None, :, :], axis=-1)
    gi, di = np.indices((n, m))
    order = np.lexsort((di.ravel(), gi.ravel(), dist.ravel()))
    used_g = np.zeros(n, bool)
    used_d = np.zeros(m, bool)
    pairs = []
    for flat in order:
        g, d = divmod(int(flat), m)
        if used_g[g] or used_d[d]:
            continue
        used_g[g] = used_d[d] = True
        pairs.append((g, d, float(dist[g, d])))
        if len(pairs) == min(n, m):
            break
    return pairs


def distance_stats(distances) -> tuple[float, float, float]:
    """25th, 50th and 75th percentiles (linear interpolation of order statistics)."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("distance statistics need at least one distance")
    q = np.quantile(d, [0.25, 0.5, 0.75], method="linear")
    return float(q[0]), float(q[1]), float(q[2])


@dataclass
class EvalReport:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)
    unmatched_det: list[int] = field(default_factory=list)
    gt_count: int = 0
    det_count: int = 0
    detected_count: int = 0
    detection_rate: float = 0.0
    threshold_mm: float = DETECTION_THRESHOLD_MM
    distance_q25: float | None = None
    distance_median: float | None = None
    distance_q75: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairs"] = [[g, k, dist] for g, k, dist in self.pairs]
        return d

    def write(self, path) -> Path:
        """JSON report at ``path`` plus ``<stem>.pairs.csv`` next to it."""
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        csv_path = p.with_name(p.name.removesuffix(".json") + ".pairs.csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gt_index", "det_index", "distance_mm", "detected"])
            for g, k, dist in self.pairs:
                w.writerow([g, k, repr(dist), int(dist < self.threshold_mm)])
        return p


def detection_metrics(pairs, gt_count: int, threshold_mm: float = DETECTION_THRESHOLD_MM,
                      det_count: int | None = None) -> EvalReport:
    if gt_count < 0:
        raise ValueError("gt_count must be non-negative")
    if not threshold_mm > 0:
        raise ValueError("threshold must be positive")
    pairs = [(int(g), int(d), float(dist)) for g, d, dist in pairs]
    if det_count is None:
        det_count = max((d for _, d, _ in pairs), default=-1) + 1
    detected = sum(1 for _, _, dist in pairs if dist < threshold_mm)
    if gt_count == 0:
        rate = 1.0 if det_count == 0 else 0.0
    else:
        rate = detected / gt_count
    matched_g = {g for g, _, _ in pairs}
    matched_d = {d for _, d, _ in pairs}
    report = EvalReport(
        pairs=pairs,
        unmatched_gt=[i for i in range(gt_count) if i not in matched_g],
        unmatched_det=[i for i in range(det_count) if i not in matched_d],
        gt_count=gt_count,
        det_count=det_count,
        detected_count=detected,
        detection_rate=rate,
        threshold_mm=threshold_mm,
    )
    if pairs:
        report.distance_q25, report.distance_median, report.distance_q75 = \
            distance_stats([dist for _, _, dist in pairs])
    return report


def evaluate(gt_points, det_points, threshold_mm: float = DETECTION_THRESHOLD_MM) -> EvalReport:
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    det = np.asarray(det_points, dtype=np.float64).reshape(-1, 3)
    return detection_metrics(greedy_match(gt, det), len(gt), threshold_mm, det_count=len(det))


def aggregate(reports: list[EvalReport], threshold_mm: float = DETECTION_THRESHOLD_MM) -> dict:
    """Pooled totals across volumes (rate = total detected / total ground truth)."""
    gt = sum(r.gt_count for r in reports)
    det = sum(r.detected_count for r in reports)
    dists = [d for r in reports for _, _, d in r.pairs]
    out = {"volumes": len(reports), "gt_count": gt, "detected_count": det,
           "detection_rate": (det / gt) if gt else (1.0 if all(r.det_count == 0 for r in reports) else 0.0),
           "threshold_mm": threshold_mm}
    if dists:
        out["distance_q25"], out["distance_median"], out["distance_q75"] = distance_stats(dists)
    return out
