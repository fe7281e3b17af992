"""Depth and segmentation metrics, split evaluation and report files."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .errors import ConfigError, DataError, ProtocolError

DEPTH_FIELDS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
LOWER_IS_BETTER = {"abs_rel", "sq_rel", "rmse", "rmse_log"}


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    cap_m: float
    n_pixels: int


@dataclass
class SegMetrics:
    per_class_iou: list  # (class id, IoU or None)
    miou: float
    n_pixels: int = 0


class DepthAccumulator:
    """Pixel-pooled sums; metrics over many maps equal metrics over their concatenation."""

    def __init__(self, cap_m: float, d_min: float = data_mod.D_MIN):
        self.cap_m = float(cap_m)
        self.d_min = d_min
        self.n = 0
        self.sums = np.zeros(7)

    def add(self, pred, gt) -> None:
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise DataError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
        valid = (gt > 0) & (gt <= self.cap_m)
        g = gt[valid]
        p = np.clip(pred[valid], self.d_min, self.cap_m)
        diff = p - g
        ratio = np.maximum(p / g, g / p)
        self.sums += [
            np.sum(np.abs(diff) / g),
            np.sum(diff**2 / g),
            np.sum(diff**2),
            np.sum((np.log(p) - np.log(g)) ** 2),
            np.sum(ratio < 1.25),
            np.sum(ratio < 1.25**2),
            np.sum(ratio < 1.25**3),
        ]
        self.n += int(g.size)

    def result(self) -> DepthMetrics:
        if self.n == 0:
            raise DataError(f"no valid ground-truth pixels under the {self.cap_m} m cap")
        s = self.sums / self.n
        return DepthMetrics(
            abs_rel=float(s[0]),
            sq_rel=float(s[1]),
            rmse=math.sqrt(s[2]),
            rmse_log=math.sqrt(s[3]),
            delta1=float(s[4]),
            delta2=float(s[5]),
            delta3=float(s[6]),
            cap_m=self.cap_m,
            n_pixels=self.n,
        )


def depth_metrics(pred, gt, cap_m: float = 80.0) -> DepthMetrics:
    acc = DepthAccumulator(cap_m)
    acc.add(pred, gt)
    return acc.result()


class SegAccumulator:
    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred_ids, gt_ids) -> None:
        pred_ids = np.asarray(pred_ids).astype(np.int64)
        gt_ids = np.asarray(gt_ids).astype(np.int64)
        if pred_ids.shape != gt_ids.shape:
            raise DataError("class maps differ in shape")
        c = self.num_classes
        for arr in (pred_ids, gt_ids):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise DataError(f"class id outside [0, {c})")
        idx = gt_ids.ravel() * c + pred_ids.ravel()
        self.confusion += np.bincount(idx, minlength=c * c).reshape(c, c)

    def result(self) -> SegMetrics:
        cm = self.confusion
        inter = np.diag(cm)
        union = cm.sum(0) + cm.sum(1) - inter
        per_class = [(c, float(inter[c] / union[c]) if union[c] else None) for c in range(self.num_classes)]
        present = [v for _, v in per_class if v is not None]
        miou = float(np.mean(present)) if present else 0.0
        return SegMetrics(per_class_iou=per_class, miou=miou, n_pixels=int(cm.sum()))


def seg_metrics(pred_ids, gt_ids, num_classes: int) -> SegMetrics:
    acc = SegAccumulator(num_classes)
    acc.add(pred_ids, gt_ids)
    return acc.result()


def argmax_lowest(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Class map from logits; ties resolve to the lowest class id."""
    return np.argmax(logits, axis=axis)


# --- report files ------------------------------------------------------------

def metrics_records(task: str, metrics) -> dict:
    if task == "depth":
        rec = {"task": "depth", "cap_m": repr(metrics.cap_m), "n_pixels": metrics.n_pixels}
        rec.update({k: repr(getattr(metrics, k)) for k in DEPTH_FIELDS})
        return rec
    rec = {"task": "seg", "n_pixels": metrics.n_pixels, "miou": repr(metrics.miou)}
    for c, v in metrics.per_class_iou:
        rec[f"iou.{data_mod.CLASS_NAMES[c]}"] = "absent" if v is None else repr(v)
    return rec


def write_report(path, task: str, metrics) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in metrics_records(task, metrics).items()))


def read_report(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: report not found")
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    if "task" not in out:
        raise DataError(f"{path}: not a metrics report")
    return out


def report_values(rec: dict) -> dict:
    keys = DEPTH_FIELDS if rec["task"] == "depth" else ("miou",)
    return {k: float(rec[k]) for k in keys}


def relative_improvement(name: str, value: float, baseline: float) -> float:
    """Percent improvement over ``baseline``; positive is better for every metric."""
    if baseline == 0:
        return 0.0 if value == baseline else math.copysign(math.inf, baseline - value if name in LOWER_IS_BETTER else value)
    if name in LOWER_IS_BETTER:
        return (baseline - value) / abs(baseline) * 100.0
    return (value - baseline) / abs(baseline) * 100.0


def render_table(rec: dict, baseline: dict | None = None) -> str:
    vals = report_values(rec)
    cols = list(vals)
    header = ["run"] + (["cap"] if rec["task"] == "depth" else []) + cols
    lines = [" | ".join(f"{h:>9}" for h in header)]

    def row(label, r):
        cells = [label] + ([f"{float(r['cap_m']):.0f}m"] if rec["task"] == "depth" else [])
        cells += [f"{v:.4f}" for v in report_values(r).values()]
        return " | ".join(f"{c:>9}" for c in cells)

    if baseline is not None:
        if baseline["task"] != rec["task"]:
            raise ConfigError("cannot compare reports of different tasks")
        lines.append(row("baseline", baseline))
    lines.append(row("method", rec))
    if baseline is not None:
        base = report_values(baseline)
        cells = ["rel.impr"] + ([""] if rec["task"] == "depth" else [])
        cells += [f"{relative_improvement(k, vals[k], base[k]):+.2f}%" for k in cols]
        lines.append(" | ".join(f"{c:>9}" for c in cells))
    return "\n".join(lines) + "\n"


# --- split evaluation --------------------------------------------------------

def _to_ppm(path: Path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as a binary portable pixmap."""
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _depth_rgb(d: np.ndarray) -> np.ndarray:
    g = np.clip(np.log(np.clip(d, data_mod.D_MIN, data_mod.D_MAX) / data_mod.D_MIN) / math.log(data_mod.D_MAX / data_mod.D_MIN), 0, 1)
    return np.repeat((255 * (1 - g))[..., None], 3, axis=2).astype(np.uint8)


def _seg_rgb(ids: np.ndarray) -> np.ndarray:
    return (255 * data_mod.PALETTE[ids]).round().astype(np.uint8)


def evaluate_model(model, task: str, samples, cap_m: float = 80.0, num_classes: int = data_mod.NUM_CLASSES,
                   dump_dir=None, batch: int = 32):
    """Run ``model`` over labelled samples and pool metrics over all pixels."""
    if samples and not samples[0].has_labels:
        raise ProtocolError("evaluation split carries no labels")
    acc = DepthAccumulator(cap_m) if task == "depth" else SegAccumulator(num_classes)
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start : start + batch]
            x = torch.from_numpy(np.stack([s.image for s in chunk]))
            out = model(x)[-1].double().numpy()
            for s, o in zip(chunk, out):
                if task == "depth":
                    pred, gt = o[0], s.depth
                    acc.add(pred, gt)
                    panels = (_depth_rgb(pred), _depth_rgb(gt))
                else:
                    pred, gt = argmax_lowest(o, axis=0), s.classes
                    acc.add(pred, gt)
                    panels = (_seg_rgb(pred), _seg_rgb(gt))
                if dump_dir is not None:
                    img = ((s.image.transpose(1, 2, 0) + 1) * 127.5).round().astype(np.uint8)
                    _to_ppm(dump_dir / f"{s.scene_id}.ppm", np.concatenate((img,) + panels, axis=1))
    return acc.result()


@dataclass
class MetricsReport:
    task: str
    split: str
    metrics: object
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"task": self.task, "split": self.split, **asdict(self.metrics)}
