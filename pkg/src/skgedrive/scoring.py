"""Task metrics and driving metrics.

Driving performance is scored from per-route logs: route completion is
the on-road distance as a percentage of the route length (capped at
100), the infraction penalty multiplies a fixed factor per recorded
infraction, and the driving score averages completion x penalty across
routes. Task metrics cover per-class IoU, boolean accuracy at a 0.5
threshold, and mean absolute error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, CorruptDataError, DataError
from .training import l1_loss

PENALTIES: Dict[str, float] = {
    "ped": 0.50,
    "veh": 0.60,
    "static": 0.65,
    "red_light": 0.70,
    "stop_sign": 0.80,
}


@dataclass
class DriveLog:
    route_id: str
    total_route_length: float                 # meters, > 0
    steps: List[Tuple[float, float, bool]] = field(default_factory=list)
    infractions: List[str] = field(default_factory=list)

    def validate(self) -> None:
        if not (self.total_route_length > 0):
            raise DataError(f"route {self.route_id}: route length must be positive")
        for x, y, _ in self.steps:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"route {self.route_id}: non-finite step position")
        for kind in self.infractions:
            if kind not in PENALTIES:
                raise DataError(f"route {self.route_id}: unknown infraction {kind!r}")


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple:
    """Per-class IoU and their mean over leading class axis; empty/empty -> 1."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    axes = tuple(range(1, pred.ndim))
    inter = np.logical_and(pred, gt).sum(axis=axes).astype(np.float64)
    union = np.logical_or(pred, gt).sum(axis=axes).astype(np.float64)
    per_class = np.where(union > 0, inter / np.maximum(union, 1.0), 1.0)
    return per_class, float(per_class.mean())


def accuracy(preds, gts) -> float:
    """Fraction of agreements after thresholding both sides at 0.5."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ContractError("accuracy needs at least one prediction")
    if p.shape != g.shape:
        raise ContractError(f"prediction/target counts differ: {p.size} vs {g.size}")
    return float(np.mean((p >= 0.5) == (g >= 0.5)))


def mae(pred, gt) -> float:
    """Mean absolute error; the same arithmetic as the L1 training loss."""
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt), dtype=p.dtype)
    return l1_loss(p, g).item()


def route_completion(log: DriveLog) -> float:
    """On-road distance as a percentage of the route length, capped at 100.

    A segment counts when its STARTING step is flagged on-road.
    """
    if not (log.total_route_length > 0):
        raise ContractError(f"route {log.route_id}: route length must be positive")
    dist = 0.0
    for (x0, y0, on_road), (x1, y1, _) in zip(log.steps, log.steps[1:]):
        if on_road:
            dist += math.hypot(x1 - x0, y1 - y0)
    return min(100.0, dist / log.total_route_length * 100.0)


def infraction_penalty(log: DriveLog, table: Optional[Dict[str, float]] = None) -> float:
    """Product over infractions of the per-type penalty factor."""
    table = PENALTIES if table is None else table
    penalty = 1.0
    for kind in log.infractions:
        if kind not in table:
            raise DataError(f"route {log.route_id}: unknown infraction {kind!r}")
        penalty *= table[kind]
    return penalty


def driving_score(routes: Sequence[Tuple[float, float]]) -> float:
    """Mean over routes of completion x penalty."""
    if not routes:
        raise ContractError("driving score needs at least one route")
    return float(np.mean([rc * ip for rc, ip in routes]))


# ---------------------------------------------------------------------------
# line-delimited log IO

def write_drive_log(path, log: DriveLog) -> None:
    """One JSON object per line; the first step line carries route_length."""
    with open(path, "w") as fh:
        first = True
        for x, y, on_road in log.steps:
            rec = {"route_id": log.route_id, "kind": "step", "x": x, "y": y,
                   "on_road": bool(on_road), "infraction_type": ""}
            if first:
                rec["route_length"] = log.total_route_length
                first = False
            fh.write(json.dumps(rec) + "\n")
        for kind in log.infractions:
            rec = {"route_id": log.route_id, "kind": "infraction", "x": 0.0,
                   "y": 0.0, "on_road": False, "infraction_type": kind}
            if first:
                rec["route_length"] = log.total_route_length
                first = False
            fh.write(json.dumps(rec) + "\n")


def read_drive_log(path) -> DriveLog:
    route_id = None
    length = None
    steps: List[Tuple[float, float, bool]] = []
    infractions: List[str] = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorruptDataError(f"{path}:{ln}: bad record: {e}") from None
            for fld in ("route_id", "kind", "x", "y", "on_road", "infraction_type"):
                if fld not in rec:
                    raise CorruptDataError(f"{path}:{ln}: missing field {fld!r}")
            if route_id is None:
                route_id = rec["route_id"]
            elif rec["route_id"] != route_id:
                raise CorruptDataError(f"{path}:{ln}: mixed route ids in one file")
            if "route_length" in rec:
                length = float(rec["route_length"])
            if rec["kind"] == "step":
                steps.append((float(rec["x"]), float(rec["y"]), bool(rec["on_road"])))
            elif rec["kind"] == "infraction":
                infractions.append(rec["infraction_type"])
            else:
                raise CorruptDataError(f"{path}:{ln}: unknown kind {rec['kind']!r}")
    if route_id is None:
        raise CorruptDataError(f"{path}: empty drive log")
    if length is None:
        raise CorruptDataError(f"{path}: no record carries route_length")
    log = DriveLog(route_id=route_id, total_route_length=length,
                   steps=steps, infractions=infractions)
    log.validate()
    return log


def score_routes(logs: Sequence[DriveLog]) -> dict:
    """Per-route RC/IP/DS plus the means across routes."""
    rows = []
    for log in logs:
        rc = route_completion(log)
        ip = infraction_penalty(log)
        rows.append({"route_id": log.route_id, "rc": rc, "ip": ip, "ds": rc * ip})
    ds = driving_score([(r["rc"], r["ip"]) for r in rows])
    return {
        "routes": rows,
        "mean_rc": float(np.mean([r["rc"] for r in rows])),
        "mean_ip": float(np.mean([r["ip"] for r in rows])),
        "driving_score": ds,
    }
