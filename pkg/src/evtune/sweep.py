"""Grid sweep over the filter biases with the thresholds re-tuned in every cell.

For each ``(fo, hpf)`` cell, the controller first pins the background rate
with the lamp off. Background rate by definition excludes the target. The
lamp scene is then recorded at the tuned thresholds, and the events per
period near the lamp are counted for each polarity.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .controller import ControlGains, TuningError, TuningTarget, tune
from .core import (
    BiasRanges,
    BiasTuple,
    EvtuneError,
    InvalidArgumentError,
    RegionOfInterest,
    count_signal_events,
)
from .simulator import CameraConfig, SceneConfig, SimulatorRateSource, simulate

QUANTITIES = ("diff_on", "diff_off", "pos_rate", "neg_rate", "sig_pos", "sig_neg")
CSV_QUANTITIES = ("diff_on", "diff_off", "sig_pos", "sig_neg")


class SweepFailedError(EvtuneError):
    pass


def default_target() -> TuningTarget:
    return TuningTarget(total_rate=20000.0, tolerance=0.1, window=0.2, max_iterations=50)


@dataclass(frozen=True)
class SweepPlan:
    fo_values: tuple[int, ...] = tuple(range(-50, 51, 10))
    hpf_values: tuple[int, ...] = tuple(range(0, 151, 10))
    target: TuningTarget = field(default_factory=default_target)
    record_duration: float = 0.5
    n_periods: int = 50
    roi_radius: float = 5.0
    roi_center: Optional[tuple[float, float]] = None  # defaults to the lamp center
    warm_start: bool = False
    start_thresholds: tuple[int, int] = (0, 0)
    ranges: BiasRanges = field(default_factory=BiasRanges)

    def __post_init__(self):
        for name in ("fo_values", "hpf_values"):
            vals = tuple(int(v) for v in getattr(self, name))
            if not vals:
                raise InvalidArgumentError(f"{name} must be non-empty")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise InvalidArgumentError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, vals)
        if not self.record_duration > 0 or self.n_periods < 1:
            raise InvalidArgumentError("record_duration must be positive and n_periods >= 1")
        if self.roi_radius < 0:
            raise InvalidArgumentError("roi_radius must be non-negative")
        object.__setattr__(self, "start_thresholds", tuple(int(v) for v in self.start_thresholds))
        if self.roi_center is not None:
            object.__setattr__(self, "roi_center", tuple(float(v) for v in self.roi_center))

    def check_scene(self, scene: SceneConfig) -> None:
        """The recording must span ``n_periods`` whole signal periods."""
        periods = self.record_duration / scene.signal_period
        if abs(periods - self.n_periods) > 1e-6 * max(1.0, periods):
            raise InvalidArgumentError(
                f"record_duration {self.record_duration} s holds {periods:g} signal periods, "
                f"not n_periods={self.n_periods}")

    def roi(self, scene: SceneConfig) -> RegionOfInterest:
        cx, cy = self.roi_center if self.roi_center is not None else scene.lamp_center
        return RegionOfInterest(cx, cy, self.roi_radius)

    def to_dict(self) -> dict:
        return {"fo_values": list(self.fo_values), "hpf_values": list(self.hpf_values),
                "target": self.target.to_dict(), "record_duration": self.record_duration,
                "n_periods": self.n_periods, "roi_radius": self.roi_radius,
                "roi_center": list(self.roi_center) if self.roi_center else None,
                "warm_start": self.warm_start, "start_thresholds": list(self.start_thresholds),
                "ranges": self.ranges.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepPlan":
        d = dict(d)
        if "target" in d:
            d["target"] = TuningTarget.from_dict(d["target"])
        if "ranges" in d:
            d["ranges"] = BiasRanges.from_dict(d["ranges"])
        for k in ("fo_values", "hpf_values", "start_thresholds"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("roi_center") is not None:
            d["roi_center"] = tuple(d["roi_center"])
        return cls(**d)


@dataclass(frozen=True)
class SweepRecord:
    fo: int
    hpf: int
    diff_on: int
    diff_off: int
    pos_rate: float
    neg_rate: float
    sig_pos: float
    sig_neg: float
    converged: bool
    iterations: int
    reason: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepRecord":
        return cls(**d)


@dataclass
class SweepGrid:
    plan: SweepPlan
    records: dict[tuple[int, int], SweepRecord]

    def __post_init__(self):
        want = {(f, h) for f in self.plan.fo_values for h in self.plan.hpf_values}
        if set(self.records) != want:
            raise InvalidArgumentError("grid must hold exactly one record per (fo, hpf) pair")

    def record(self, fo: int, hpf: int) -> SweepRecord:
        return self.records[(fo, hpf)]

    def matrix(self, quantity: str) -> np.ndarray:
        """Rows follow ``hpf_values``, columns ``fo_values``."""
        if quantity not in QUANTITIES:
            raise InvalidArgumentError(f"unknown quantity {quantity!r}")
        return np.array([[float(getattr(self.records[(f, h)], quantity)) for f in self.plan.fo_values]
                         for h in self.plan.hpf_values])

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(),
                "records": [self.records[(f, h)].to_dict()
                            for h in self.plan.hpf_values for f in self.plan.fo_values]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        recs = [SweepRecord.from_dict(r) for r in d["records"]]
        return cls(SweepPlan.from_dict(d["plan"]), {(r.fo, r.hpf): r for r in recs})

    def write_json(self, path, extra: Optional[dict] = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    def write_csv(self, out_dir, quantities: Sequence[str] = CSV_QUANTITIES) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for q in quantities:
            m = self.matrix(q)
            p = out / f"{q}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["hpf\\fo", *self.plan.fo_values])
                for h, row in zip(self.plan.hpf_values, m):
                    w.writerow([h, *(repr(float(v)) if q.startswith(("sig", "pos", "neg")) else int(v)
                                     for v in row)])
            paths.append(p)
        return paths


def _dark(scene: SceneConfig) -> SceneConfig:
    return replace(scene, lamp_amplitude=0.0)


def measure_cell(plan: SweepPlan, scene: SceneConfig, camera: CameraConfig, fo: int, hpf: int,
                 start: tuple[int, int], gains: ControlGains = ControlGains()) -> SweepRecord:
    """Tune one cell from ``start`` thresholds and record its signal."""
    source = SimulatorRateSource(_dark(scene), camera)
    begin = BiasTuple(fo, hpf, *start)
    try:
        trace = tune(source, begin, plan.target, gains, plan.ranges)
    except TuningError as exc:
        trace = exc.trace
    final = trace.final or begin
    est = trace.final_estimate
    stream = simulate(scene, final, camera, duration=plan.record_duration)
    roi = plan.roi(scene)
    return SweepRecord(
        fo, hpf, final.diff_on, final.diff_off,
        est.pos_rate if est else math.nan, est.neg_rate if est else math.nan,
        count_signal_events(stream, roi, True, plan.record_duration, plan.n_periods),
        count_signal_events(stream, roi, False, plan.record_duration, plan.n_periods),
        trace.converged, trace.iterations, trace.reason)


def run_sweep(plan: SweepPlan, scene: SceneConfig, camera: CameraConfig, jobs: int = 1,
              order: Optional[Sequence[tuple[int, int]]] = None,
              progress: Optional[Callable[[SweepRecord], None]] = None) -> SweepGrid:
    """Tune and record every cell of the plan.

    Cold-start cells share no state, so ``order`` and ``jobs`` change only the
    schedule, never the records. With ``plan.warm_start`` each fo strip is
    walked in increasing hpf, and each cell starts from the previous cell's
    thresholds. Such sweeps always run sequentially.
    """
    plan.check_scene(scene)
    if jobs < 1:
        raise InvalidArgumentError("jobs must be >= 1")
    cells = [(f, h) for f in plan.fo_values for h in plan.hpf_values]
    records: dict[tuple[int, int], SweepRecord] = {}

    def done(rec: SweepRecord) -> None:
        records[(rec.fo, rec.hpf)] = rec
        if progress:
            progress(rec)

    if plan.warm_start:
        for f in plan.fo_values:
            start = plan.start_thresholds
            for h in plan.hpf_values:
                rec = measure_cell(plan, scene, camera, f, h, start)
                done(rec)
                start = (rec.diff_on, rec.diff_off)
    else:
        if order is not None:
            if sorted(order) != sorted(cells):
                raise InvalidArgumentError("order must be a permutation of the plan's cells")
            cells = list(order)
        if jobs == 1:
            for f, h in cells:
                done(measure_cell(plan, scene, camera, f, h, plan.start_thresholds))
        else:
            # the compiled kernel releases the GIL, so threads run cells in parallel
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futs = [pool.submit(measure_cell, plan, scene, camera, f, h, plan.start_thresholds)
                        for f, h in cells]
                for fut in futs:
                    done(fut.result())
    grid = SweepGrid(plan, records)
    if not any(r.converged for r in records.values()):
        raise SweepFailedError("no cell converged")
    return grid


@dataclass(frozen=True)
class SurfaceSummary:
    argmax: tuple[int, int]  # (fo, hpf)
    peak: float
    interior_peak: bool
    reference: tuple[int, int]
    reference_value: float
    ratio_to_reference: float
    fo_sensitivity: float
    hpf_sensitivity: float

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["argmax"], d["reference"] = list(self.argmax), list(self.reference)
        return d


@dataclass(frozen=True)
class GridSummary:
    sig_pos: SurfaceSummary
    sig_neg: SurfaceSummary
    threshold_decrease_fraction: float  # adjacent hpf pairs where a tuned threshold drops
    converged_cells: int
    total_cells: int

    def to_dict(self) -> dict:
        return {"sig_pos": self.sig_pos.to_dict(), "sig_neg": self.sig_neg.to_dict(),
                "threshold_decrease_fraction": self.threshold_decrease_fraction,
                "converged_cells": self.converged_cells, "total_cells": self.total_cells}


def _summarize(m: np.ndarray, fo: Sequence[int], hpf: Sequence[int]) -> SurfaceSummary:
    i, j = np.unravel_index(int(np.argmax(m)), m.shape)  # row = hpf, col = fo
    interior = 0 < i < len(hpf) - 1 and 0 < j < len(fo) - 1
    ri = int(np.argmin(np.abs(np.asarray(hpf))))
    rj = int(np.argmin(np.abs(np.asarray(fo))))
    ref = float(m[ri, rj])
    peak = float(m[i, j])
    if ref > 0:
        ratio = peak / ref
    else:
        ratio = 1.0 if peak == ref else math.inf
    fo_sens = float(np.mean(np.abs(np.diff(m, axis=1)))) if m.shape[1] > 1 else 0.0
    hpf_sens = float(np.mean(np.abs(np.diff(m, axis=0)))) if m.shape[0] > 1 else 0.0
    return SurfaceSummary((int(fo[j]), int(hpf[i])), peak, bool(interior), (int(fo[rj]), int(hpf[ri])),
                          ref, ratio, fo_sens, hpf_sens)


def analyze_grid(grid: SweepGrid) -> GridSummary:
    """Peak location, peak-to-reference ratio and per-axis sensitivity of the signal surfaces.

    The reference cell is ``(0, 0)``, or the cell nearest to it. Each axis
    sensitivity is the mean absolute difference between neighbouring cells
    along that axis.
    """
    fo, hpf = grid.plan.fo_values, grid.plan.hpf_values
    if len(fo) < 2 or len(hpf) < 2:
        raise InvalidArgumentError("analysis needs at least two values per axis")
    pairs = drops = 0
    for q in ("diff_on", "diff_off"):
        d = np.diff(grid.matrix(q), axis=0)
        pairs += d.size
        drops += int(np.count_nonzero(d < 0))
    n_conv = sum(r.converged for r in grid.records.values())
    return GridSummary(_summarize(grid.matrix("sig_pos"), fo, hpf),
                       _summarize(grid.matrix("sig_neg"), fo, hpf),
                       drops / pairs, n_conv, len(grid.records))
