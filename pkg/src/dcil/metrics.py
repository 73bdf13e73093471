"""Evaluation, stability statistics, sparsity audits and CSV/SVG output."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import tensor_core as tc
from .data import Dataset
from .model import P, DualPathNetwork

RUN_COLUMNS = ("epoch", "iter", "lr", "S_c", "realized_sparsity", "loss_P", "loss_S", "kd_loss", "acc_P", "acc_S")
PROBE_COLUMNS = ("epoch", "iter", "global_iter", "acc_P", "refreshed")


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    probe: list[dict] = field(default_factory=list)
    refreshes: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    trainer: object = field(default=None, repr=False, compare=False)

    def column(self, name: str, train_only: bool = True) -> list:
        return [r[name] for r in self.rows if not train_only or r["epoch"] >= 0]


@dataclass
class StabilityReport:
    window: int
    std: float
    best_acc: float
    best_epoch: int
    last_acc: float

    @property
    def gap(self) -> float:
        return self.best_acc - self.last_acc


# --------------------------------------------------------------------------- evaluation

def predict(net: DualPathNetwork, path: str, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        logits = net.forward(path, images[start:start + batch_size], tc.EVAL)
        preds.append(np.argmax(logits, axis=1))
    net.clear_contexts()
    return np.concatenate(preds)


def evaluate(net: DualPathNetwork, path: str, ds: Dataset, batch_size: int = 1000) -> float:
    """Top-1 accuracy of one path in eval mode; argmax ties go to the lowest class."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, path, ds.images, batch_size) == ds.labels))


def stability_window(n_epochs: int) -> int:
    return max(2, -(-n_epochs // 10))


def stability_std(window_accs) -> float:
    """Population standard deviation of the accuracies in a window."""
    a = np.asarray(window_accs, dtype=np.float64)
    if a.size < 2:
        raise ValueError(f"stability window needs at least 2 epochs, got {a.size}")
    return float(np.sqrt(np.mean((a - a.mean()) ** 2)))


def stability_report(accs) -> StabilityReport:
    """Std over the last ceil(10%) of epochs (at least two) plus best/last accuracy."""
    accs = list(accs)
    w = stability_window(len(accs))
    if len(accs) < w:
        raise ValueError(f"need at least {w} epochs for a stability report, got {len(accs)}")
    best = int(np.argmax(accs))
    return StabilityReport(w, stability_std(accs[-w:]), float(accs[best]), best, float(accs[-1]))


# --------------------------------------------------------------------------- sparsity

@dataclass
class SparsityAudit:
    global_sparsity: float
    zeros: int
    total: int
    per_layer: dict[str, float]
    filters_pruned: dict[str, int]
    filters_total: dict[str, int]


def sparsity_audit(net: DualPathNetwork) -> SparsityAudit:
    per_layer, fp, ft = {}, {}, {}
    zeros = total = 0
    for l in net.prunable:
        m = l.mask
        z = int(m.size - np.count_nonzero(m))
        zeros += z
        total += m.size
        per_layer[l.weight_id] = z / m.size
        if l.is_conv:
            slabs = m.reshape(m.shape[0], -1)
            fp[l.weight_id] = int(np.sum(~slabs.any(axis=1)))
            ft[l.weight_id] = m.shape[0]
    return SparsityAudit(zeros / total if total else 0.0, zeros, total, per_layer, fp, ft)


# --------------------------------------------------------------------------- sawtooth probe

class SawtoothProbe:
    """Per-iteration P-path accuracy on a fixed probe set during one epoch.

    Pass ``on_iter`` as the iteration callback of ``Trainer.train_epoch``.
    Row ``iter == 0`` is the accuracy before the epoch's first step.
    """

    def __init__(self, net: DualPathNetwork, probe_set: Dataset, epoch: int, start_global_iter: int):
        if len(probe_set) == 0:
            raise ValueError("probe set is empty")
        self.net = net
        self.probe_set = probe_set
        self.epoch = epoch
        self.rows = [dict(epoch=epoch, iter=0, global_iter=start_global_iter,
                          acc_P=evaluate(net, P, probe_set), refreshed=False)]

    def on_iter(self, i: int, global_iter: int, refreshed: bool) -> None:
        self.rows.append(dict(epoch=self.epoch, iter=i + 1, global_iter=global_iter,
                              acc_P=evaluate(self.net, P, self.probe_set), refreshed=refreshed))


def sawtooth_probe(net, trainer, loader, test_set: Dataset, epoch: int) -> list[dict]:
    """Train ``epoch`` with ``trainer`` while probing accuracy after every iteration."""
    probe = SawtoothProbe(net, test_set, epoch, trainer.global_iter)
    trainer.train_epoch(loader, epoch, on_iter=probe.on_iter)
    return probe.rows


def refresh_drops(rows: list[dict]) -> list[float]:
    """Accuracy lost across each refreshing iteration (previous row minus refresh row)."""
    return [rows[i - 1]["acc_P"] - rows[i]["acc_P"] for i in range(1, len(rows)) if rows[i]["refreshed"]]


def mean_refresh_drop(rows: list[dict]) -> float:
    drops = refresh_drops(rows)
    if not drops:
        raise ValueError("no refresh happened during the probed epoch")
    return float(np.mean(drops))


# --------------------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit_csv(rows: list[dict], path, columns=RUN_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    def conv(v: str):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v

    with open(path, newline="") as f:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(f)]


def emit_run_csv(record: RunRecord, path) -> None:
    emit_csv(record.rows, path, RUN_COLUMNS)


def emit_svg(series: dict[str, tuple[list[float], list[float]]], path, title: str = "",
             xlabel: str = "", ylabel: str = "", marks: list[float] | None = None,
             width: int = 640, height: int = 400) -> None:
    """Static SVG line chart: one polyline per series, axes, ticks and a legend.

    ``marks`` draws faint vertical guide lines (e.g. mask refresh iterations).
    """
    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    left, right, top, bottom = 60, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv if math.isfinite(y)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for m in marks or []:
        out.append(f'<line x1="{sx(m):.2f}" y1="{top}" x2="{sx(m):.2f}" y2="{top + ph}" stroke="#ccc" stroke-dasharray="3,3"/>')
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{xv:.4g}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.4g}</text>')
    if xlabel:
        out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
                   f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for n, (name, (xv, yv)) in enumerate(series.items()):
        color = colors[n % len(colors)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xv, yv) if math.isfinite(y))
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 18 * n
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def emit_run_svg(record: RunRecord, path) -> None:
    rows = [r for r in record.rows if r["epoch"] >= 0]
    ep = [r["epoch"] for r in rows]
    series = {"acc_P": (ep, [r["acc_P"] for r in rows])}
    if any(math.isfinite(r["acc_S"]) for r in rows):
        series["acc_S"] = (ep, [r["acc_S"] for r in rows])
    emit_svg(series, path, "test accuracy per epoch", "epoch", "top-1 accuracy")


def emit_probe_svg(rows: list[dict], path, label: str = "acc_P") -> None:
    its = [r["iter"] for r in rows]
    emit_svg({label: (its, [r["acc_P"] for r in rows])}, path, "per-iteration test accuracy",
             "iteration in epoch", "top-1 accuracy", marks=[r["iter"] for r in rows if r["refreshed"]])
