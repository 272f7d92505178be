"""Segmentation evaluation: boundary precision/recall/F-score, cell counts.

A boundary voxel is any voxel with a 6-neighbor of different label.  A
predicted boundary voxel counts as a true positive when a truth boundary
voxel lies within Chebyshev distance `tol` voxels; recall is computed
symmetrically.  Absolute comparability with published table values is not
claimed; the metric tracks boundary placement quality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .synth import boundary_mask
from .volume import DataError, LabelVolume


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_score: float
    predicted_cells: int
    truth_cells: int
    boundary_tolerance: int
    stage_times: dict[str, float] = field(default_factory=dict)

    def to_keyvalues(self) -> str:
        lines = [
            f"precision = {self.precision:.6f}",
            f"recall = {self.recall:.6f}",
            f"f_score = {self.f_score:.6f}",
            f"predicted_cells = {self.predicted_cells}",
            f"truth_cells = {self.truth_cells}",
            f"boundary_tolerance = {self.boundary_tolerance}",
        ]
        for stage, t in self.stage_times.items():
            lines.append(f"time.{stage} = {t:.4f}")
        return "\n".join(lines) + "\n"


def f_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def boundary_prf(pred: LabelVolume, truth: LabelVolume, tol: int = 1) -> EvalReport:
    """Boundary-voxel precision/recall/F at Chebyshev tolerance tol."""
    if pred.dims != truth.dims:
        raise DataError("boundary_prf: dims mismatch")
    if tol < 0:
        raise DataError("boundary_prf: tolerance must be >= 0")
    pb = boundary_mask(pred.data)
    tb = boundary_mask(truth.data)
    n_pred = int(pb.sum())
    n_truth = int(tb.sum())
    if n_pred == 0 and n_truth == 0:
        precision = recall = 1.0
    elif n_pred == 0 or n_truth == 0:
        precision = recall = 0.0
    else:
        size = 2 * tol + 1
        tb_near = maximum_filter(tb, size=size) if tol > 0 else tb
        pb_near = maximum_filter(pb, size=size) if tol > 0 else pb
        precision = int((pb & tb_near).sum()) / n_pred
        recall = int((tb & pb_near).sum()) / n_truth
    return EvalReport(
        precision=precision,
        recall=recall,
        f_score=f_score(precision, recall),
        predicted_cells=int(pred.label_set().size),
        truth_cells=int(truth.label_set().size),
        boundary_tolerance=tol,
    )


def cell_count_stats(reports) -> tuple[float, float]:
    """Mean and population std of predicted cell counts over a result set."""
    counts = [r.predicted_cells if isinstance(r, EvalReport) else int(r) for r in reports]
    if not counts:
        raise DataError("cell_count_stats: empty report list")
    arr = np.asarray(counts, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
