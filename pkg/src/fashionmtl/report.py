"""Run reports: canonical JSON, CSV curves, and hand-emitted SVG panels.

The canonical report JSON is fully determined by (seed, config); volatile
facts like wall-clock time go to a sidecar meta file so repeated runs remain
byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

SCHEMA_VERSION = 1


@dataclass
class RunReport:
    kind: str                      # "teacher" | "mtl" | "ablation"
    seed: int
    config: dict
    task: str | None = None
    strategy: str | None = None
    grad_method: str | None = None
    distill: bool = False
    loss_records: list = field(default_factory=list)   # (iteration, task, task_loss, distill_loss)
    val_curves: dict = field(default_factory=dict)     # task -> [(iteration, value), ...]
    final_metrics: dict = field(default_factory=dict)  # task -> {metric: value}
    extras: dict = field(default_factory=dict)
    param_account: dict = field(default_factory=dict)
    wall_clock_sec: float = 0.0

    def to_canonical_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "task": self.task,
            "strategy": self.strategy,
            "grad_method": self.grad_method,
            "distill": self.distill,
            "loss_records": [list(r) for r in self.loss_records],
            "val_curves": {t: [list(p) for p in c] for t, c in self.val_curves.items()},
            "final_metrics": self.final_metrics,
            "extras": self.extras,
            "param_account": self.param_account,
        }

    def to_canonical_json(self) -> str:
        return json.dumps(self.to_canonical_dict(), sort_keys=True, indent=1)

    def save(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_canonical_json())
        with open(os.path.join(out_dir, "meta.json"), "w") as fh:
            json.dump({"wall_clock_sec": self.wall_clock_sec}, fh)
        with open(os.path.join(out_dir, "losses.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "task", "task_loss", "distill_loss"])
            w.writerows(self.loss_records)
        for task in sorted(self.val_curves):
            with open(os.path.join(out_dir, f"curve_{task}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iteration", "value"])
                w.writerows(self.val_curves[task])

    @classmethod
    def load(cls, run_dir: str) -> "RunReport":
        with open(os.path.join(run_dir, "report.json")) as fh:
            d = json.load(fh)
        rep = cls(kind=d["kind"], seed=d["seed"], config=d["config"], task=d.get("task"),
                  strategy=d.get("strategy"), grad_method=d.get("grad_method"),
                  distill=d.get("distill", False))
        rep.loss_records = [tuple(r) for r in d["loss_records"]]
        rep.val_curves = {t: [tuple(p) for p in c] for t, c in d["val_curves"].items()}
        rep.final_metrics = d["final_metrics"]
        rep.extras = d.get("extras", {})
        rep.param_account = d.get("param_account", {})
        return rep


# ---------------------------------------------------------------------------
# SVG curve panels
# ---------------------------------------------------------------------------

_STROKES = ("#1f6fb2", "#c0392b", "#1e8449", "#8e44ad", "#b7950b", "#34495e")


def curve_panel_svg(task: str, curves: dict, width: int = 420, height: int = 280) -> str:
    """One panel: iteration on x, validation metric on y, one polyline per run."""
    pad = 42
    xs_all = [x for pts in curves.values() for x, _ in pts]
    ys_all = [y for pts in curves.values() for _, y in pts]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0, 1)
    y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0, 1)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1

    def px(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width // 2}" y="16" text-anchor="middle" font-size="13">{task}</text>',
             f'<text x="{pad}" y="{height - 8}" font-size="10">{x_lo:g}</text>',
             f'<text x="{width - pad}" y="{height - 8}" text-anchor="end" font-size="10">'
             f'{x_hi:g}</text>',
             f'<text x="4" y="{height - pad}" font-size="10">{y_lo:.3g}</text>',
             f'<text x="4" y="{pad}" font-size="10">{y_hi:.3g}</text>']
    for i, (label, pts) in enumerate(sorted(curves.items())):
        stroke = _STROKES[i % len(_STROKES)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 12 * i}" text-anchor="end" '
                     f'font-size="10" fill="{stroke}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_curve_panels(reports: dict, out_dir: str) -> list:
    """One SVG per task, overlaying every report's validation curve."""
    os.makedirs(out_dir, exist_ok=True)
    tasks = sorted({t for rep in reports.values() for t in rep.val_curves})
    written = []
    for task in tasks:
        curves = {label: rep.val_curves[task]
                  for label, rep in sorted(reports.items()) if task in rep.val_curves}
        path = os.path.join(out_dir, f"curve_{task}.svg")
        with open(path, "w") as fh:
            fh.write(curve_panel_svg(task, curves))
        written.append(path)
    return written


def write_merged_metrics_csv(reports: dict, out_path: str):
    """Flat per-run metric table with fixed column order."""
    rows = []
    metric_cols = []
    for label, rep in sorted(reports.items()):
        flat = {}
        for task, metrics in sorted(rep.final_metrics.items()):
            for name, val in sorted(metrics.items()):
                col = f"{task}.{name}"
                flat[col] = val
                if col not in metric_cols:
                    metric_cols.append(col)
        rows.append((label, rep.kind, rep.seed, flat))
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "kind", "seed"] + metric_cols)
        for label, kind, seed, flat in rows:
            w.writerow([label, kind, seed] + [flat.get(c, "") for c in metric_cols])
