"""Evaluate response models against the simulator's ground-truth curves."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import metrics
from .world import N_CITIES, N_PERIODS, LoggedDataset, SyntheticWorld


class ResponsePredictor(Protocol):
    def predict(self, data: LoggedDataset) -> np.ndarray: ...

    def predict_curves(self, data: LoggedDataset, grid) -> np.ndarray: ...


@dataclass
class SliceMetrics:
    n: int
    auc: float
    mae: float
    mse: float
    kl: float
    pearson: float
    pearson_degenerate: bool = False


@dataclass
class CurveDump:
    city: int
    period: int
    n: int
    predicted: list[float]
    truth: list[float]


@dataclass
class EvalReport:
    grid: list[float]
    overall: SliceMetrics
    per_period: dict[int, SliceMetrics] = field(default_factory=dict)
    per_city: dict[int, SliceMetrics] = field(default_factory=dict)
    curves: list[CurveDump] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "overall": asdict(self.overall),
            "per_period": {str(k): asdict(v) for k, v in self.per_period.items()},
            "per_city": {str(k): asdict(v) for k, v in self.per_city.items()},
            "curves": [asdict(c) for c in self.curves],
            "notices": self.notices,
        }

    def slice_rows(self) -> list[tuple[str, str, SliceMetrics]]:
        rows = [("overall", "all", self.overall)]
        rows += [("period", str(k), v) for k, v in self.per_period.items()]
        rows += [("city", str(k), v) for k, v in self.per_city.items()]
        return rows

    def write(self, out_dir) -> list[Path]:
        """Write ``report.json``, ``metrics.csv`` and ``curves.csv`` into ``out_dir``."""
        from ..models import dumps_document

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json", out / "metrics.csv", out / "curves.csv"]
        paths[0].write_text(dumps_document(self.to_dict()))
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slice", "key", "n", "auc", "mae", "mse", "kl", "pearson", "pearson_degenerate"])
            for kind, key, m in self.slice_rows():
                w.writerow([kind, key, m.n, *(f"{v:.17g}" for v in (m.auc, m.mae, m.mse, m.kl, m.pearson)),
                            int(m.pearson_degenerate)])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["city", "period", "n", "treatment", "predicted", "truth"])
            for c in self.curves:
                for t, p, g in zip(self.grid, c.predicted, c.truth):
                    w.writerow([c.city, c.period, c.n, f"{t:.17g}", f"{p:.17g}", f"{g:.17g}"])
        return paths


def _slice(labels, scores, pred_curves, true_curves, grid) -> SliceMetrics:
    corr = metrics.pearson(pred_curves, true_curves)
    return SliceMetrics(
        n=int(len(labels)),
        auc=metrics.auc(labels, scores),
        mae=metrics.mae(pred_curves, true_curves),
        mse=metrics.mse(pred_curves, true_curves),
        kl=float(metrics.curve_kl(pred_curves, true_curves, grid).mean()),
        pearson=corr.value,
        pearson_degenerate=corr.degenerate,
    )


def evaluate(model: ResponsePredictor, data: LoggedDataset, world: SyntheticWorld, grid=None) -> EvalReport:
    """Score ``model`` on ``data`` (normally the randomly treated split).

    AUC uses the logged labels at the logged treatments. MAE, MSE, KL and
    Pearson compare each record's predicted curve on ``grid`` with the
    ground-truth curve of its (city, period) cell. Slices with no records
    are omitted and listed in ``notices``.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    grid = np.asarray(world.treatments if grid is None else grid, dtype=float)
    scores = np.asarray(model.predict(data), dtype=float)
    pred = np.asarray(model.predict_curves(data, grid), dtype=float)
    truth = world.curves(data.city, data.period, grid)
    report = EvalReport(grid.tolist(), _slice(data.label, scores, pred, truth, grid))
    for attr, count, target in (("period", N_PERIODS, report.per_period), ("city", N_CITIES, report.per_city)):
        keys = getattr(data, attr)
        for k in range(count):
            sel = keys == k
            if not sel.any():
                report.notices.append(f"{attr} {k}: no records, slice omitted")
                continue
            target[k] = _slice(data.label[sel], scores[sel], pred[sel], truth[sel], grid)
    for c in range(N_CITIES):
        for p in range(N_PERIODS):
            sel = (data.city == c) & (data.period == p)
            if sel.any():
                report.curves.append(CurveDump(c, p, int(sel.sum()), pred[sel].mean(axis=0).tolist(),
                                               truth[sel][0].tolist()))
    return report


@dataclass
class Cohort:
    cohort: int
    n: int
    mean_slope: float
    mean_uplift: float


def curve_slopes(curves, grid, direction: int = 1) -> np.ndarray:
    """Steepest slope of each curve in its monotone direction (its slope at the inflection)."""
    return np.max(direction * np.gradient(np.asarray(curves), np.asarray(grid), axis=1), axis=1)


def uplift_cohorts(model: ResponsePredictor, data: LoggedDataset, k_groups: int = 5, grid=None,
                   direction: int = 1, n_grid: int = 64) -> list[Cohort]:
    """Rank records by predicted curve slope and report uplift per cohort.

    Records are sorted by descending steepest slope (stable) and split into
    ``k_groups`` near-equal groups; uplift is the predicted response gain
    from the least to the most attractive treatment.
    """
    if k_groups < 1 or k_groups > len(data):
        raise ValueError("k_groups must be between 1 and the number of records")
    if grid is None:
        lo, hi = float(np.min(data.treatment)), float(np.max(data.treatment))
        if hasattr(model, "features"):
            lo, hi = model.features.t_min, model.features.t_max
        grid = np.linspace(lo, hi, n_grid)
    grid = np.asarray(grid, dtype=float)
    curves = np.asarray(model.predict_curves(data, grid), dtype=float)
    slopes = curve_slopes(curves, grid, direction)
    uplift = direction * (curves[:, -1] - curves[:, 0])
    order = np.argsort(-slopes, kind="stable")
    return [Cohort(k + 1, int(g.size), float(slopes[g].mean()), float(uplift[g].mean()))
            for k, g in enumerate(np.array_split(order, k_groups))]


def write_cohorts(path, cohorts: list[Cohort]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cohort", "n", "mean_slope", "mean_uplift"])
        for c in cohorts:
            w.writerow([c.cohort, c.n, f"{c.mean_slope:.17g}", f"{c.mean_uplift:.17g}"])


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True)
