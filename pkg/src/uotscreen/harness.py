"""Instance generation, MNIST ingestion and experiment sweeps.

Outputs are plot-ready CSV (per-run traces) and JSON (aggregates); there is
no plotting here.
"""
from __future__ import annotations

import csv
import dataclasses
import gzip
import json
import logging
import statistics
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DegenerateError, IterateTrace, Penalty, ProblemSpec, ScreeningState, UOTError, primal_objective
from .penalties import dual_from_primal, dual_value
from .projection import project
from .screening import SUPPORTED
from .solvers import SOLVER_PENALTIES, Iterate, SolverConfig, initial_plan, run_with_screening, step

log = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# Methods whose region may be unavailable on some instances (reported, never silent).
DEGENERATE_POSSIBLE = {(Penalty.KL, "gap")}


class IDXParseError(UOTError, ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyHistogramError(UOTError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------

def squared_distance_cost(xs, ys) -> np.ndarray:
    """Row-major squared Euclidean distances, scaled to a maximum of 1."""
    xs = np.asarray(xs, dtype=float).reshape(len(xs), -1)
    ys = np.asarray(ys, dtype=float).reshape(len(ys), -1)
    C = ((xs[:, None, :] - ys[None, :, :]) ** 2).sum(axis=2)
    cmax = C.max()
    return (C / cmax if cmax > 0 else C).ravel()


def gen_gaussian_pair(bins: int, seed, lam: float = 0.1, penalty=Penalty.L2,
                      epsilon: float = 0.0) -> ProblemSpec:
    """Two discretized 1-D Gaussians on ``bins`` bin centers with squared-distance cost.

    Means are drawn in ``[0.25, 0.75] * bins`` and standard deviations in
    ``[0.05, 0.2] * bins``; each histogram has unit mass.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    rng = np.random.default_rng(seed)
    x = np.arange(bins) + 0.5

    def hist():
        mu = rng.uniform(0.25, 0.75) * bins
        sd = rng.uniform(0.05, 0.2) * bins
        h = np.exp(-0.5 * ((x - mu) / sd) ** 2)
        return h / h.sum()

    a, b = hist(), hist()
    return ProblemSpec(a, b, squared_distance_cost(x, x), lam, penalty, epsilon)


def _read_idx(path, magic: int):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IDXParseError("truncated header", len(raw))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IDXParseError(f"bad magic {found}, expected {magic}", 0)
    ndim = found & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXParseError("truncated dimension list", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < head + size:
        raise IDXParseError(f"truncated data: expected {size} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_mnist_idx(images_path, labels_path, index_a: int, index_b: int, lam: float = 0.1,
                   penalty=Penalty.L2, epsilon: float = 0.0) -> ProblemSpec:
    """Instance between two MNIST digits.

    Each image becomes a histogram over its nonzero pixels (so ``n`` and
    ``m`` are the numbers of lit pixels), normalized to unit mass; the cost
    is the squared distance between pixel grid coordinates, scaled to a
    maximum of 1.
    """
    images = _read_idx(images_path, IMAGE_MAGIC)
    if labels_path is not None:
        labels = _read_idx(labels_path, LABEL_MAGIC)
        if labels.shape[0] != images.shape[0]:
            raise IDXParseError("label count does not match image count", 4)
    sides = []
    for idx in (index_a, index_b):
        if not 0 <= idx < images.shape[0]:
            raise IndexError(f"image index {idx} out of range")
        img = images[idx].astype(float)
        coords = np.argwhere(img > 0)
        if coords.size == 0:
            raise EmptyHistogramError(f"image {idx} has no nonzero pixel")
        w = img[img > 0]
        sides.append((w / w.sum(), coords))
    (a, xa), (b, xb) = sides
    return ProblemSpec(a, b, squared_distance_cost(xa, xb), lam, penalty, epsilon)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array in IDX layout (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    if (magic & 0xFF) != array.ndim:
        raise ValueError("magic does not match array rank")
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def save_problem(spec: ProblemSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict()))


def load_problem(path) -> ProblemSpec:
    """Problem file reader; malformed JSON or fields raise ``ValueError``."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IDXParseError(f"invalid problem JSON: {exc.msg}", exc.pos) from exc
    return ProblemSpec.from_dict(data)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IterateTrace.FIELDS)
        for row in trace:
            w.writerow([row.iter, repr(row.primal), repr(row.dual), repr(row.gap),
                        row.screened, row.elapsed_ns])


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [IterateTrace(int(r["iter"]), float(r["primal"]), float(r["dual"]), float(r["gap"]),
                         int(r["screened"]), int(r["elapsed_ns"])) for r in rows]


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    dataset: str = "gaussian"
    pairs: int = 1
    lambda_grid: list = field(default_factory=lambda: [0.1])
    penalty: str = "l2"
    epsilon: float = 0.0
    solvers: list = field(default_factory=lambda: ["fista"])
    methods: list = field(default_factory=lambda: ["none", "sa-ctp"])
    gap_tols: list = field(default_factory=lambda: [1e-7])
    seed: int = 0
    bins: int = 100
    repeats: int = 5
    max_iters: int = 100_000
    period: int = 10
    images: str | None = None
    labels: str | None = None
    problems: list = field(default_factory=list)

    def __post_init__(self):
        if self.dataset not in ("gaussian", "mnist", "file"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        for name in ("lambda_grid", "solvers", "methods", "gap_tols"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        if self.pairs < 1 or self.repeats < 1:
            raise ValueError("pairs and repeats must be positive")
        if self.dataset == "mnist" and not self.images:
            raise ValueError("mnist plans need an images path")
        if self.dataset == "file" and not self.problems:
            raise ValueError("file plans need problem paths")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown plan fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def plan_instances(plan: ExperimentPlan, lam: float):
    """Instances of the plan for one regularization value (deterministic in the seed)."""
    pen = Penalty(plan.penalty)
    if plan.dataset == "gaussian":
        return [gen_gaussian_pair(plan.bins, plan.seed + k, lam, pen, plan.epsilon)
                for k in range(plan.pairs)]
    if plan.dataset == "mnist":
        rng = np.random.default_rng(plan.seed)
        n_img = _read_idx(plan.images, IMAGE_MAGIC).shape[0]
        out = []
        for _ in range(plan.pairs):
            ia, ib = (int(v) for v in rng.choice(n_img, 2, replace=False))
            out.append(load_mnist_idx(plan.images, plan.labels, ia, ib, lam, pen, plan.epsilon))
        return out
    specs = [load_problem(p) for p in plan.problems[: plan.pairs]]
    return [s.replace(lam=lam, penalty=pen, epsilon=plan.epsilon) for s in specs]


def cell_status(solver: str, method: str, penalty) -> str:
    pen = Penalty(penalty)
    if pen not in SOLVER_PENALTIES.get(solver, set()) or method not in SUPPORTED[pen]:
        return "unsupported"
    if (pen, method) in DEGENERATE_POSSIBLE:
        return "degenerate-possible"
    return "ok"


def ratio_curve(trace, size: int):
    """``(iter, gap, screened fraction)`` rows; the fraction never decreases."""
    return [[r.iter, r.gap, r.screened / size] for r in trace]


def run_experiment(plan: ExperimentPlan, out_dir) -> dict:
    """Run every cell of the plan and write traces plus ``summary.json``.

    Each (instance, lambda, tolerance, solver, method) cell is timed
    ``plan.repeats`` times and its time is the median; speed-ups are
    ``time(none) / time(method)`` per instance, averaged over instances.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells, speedups = [], {}
    for lam in plan.lambda_grid:
        specs = plan_instances(plan, lam)
        for tol in plan.gap_tols:
            for solver in plan.solvers:
                per_method = {}
                for method in plan.methods:
                    status = cell_status(solver, method, plan.penalty)
                    for k, spec in enumerate(specs):
                        cell = {"pair": k, "lambda": lam, "gap_tol": tol, "solver": solver,
                                "method": method, "status": status}
                        if status != "unsupported":
                            cell.update(_run_cell(spec, plan, solver, method, tol, out,
                                                  f"{plan.dataset}_{k}_lam{lam:g}_tol{tol:g}_{solver}_{method}"))
                            per_method.setdefault(method, {})[k] = cell["time_s"]
                        cells.append(cell)
                if "none" in per_method:
                    key = f"{solver}|lambda={lam:g}|gap_tol={tol:g}"
                    base = per_method["none"]
                    speedups[key] = {
                        m: statistics.fmean(base[k] / times[k] for k in times if times[k] > 0)
                        for m, times in per_method.items()}
    summary = {"plan": plan.to_dict(), "cells": cells, "speedup": speedups}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def _run_cell(spec, plan, solver, method, tol, out, stem):
    config = SolverConfig(solver, max_iters=plan.max_iters, gap_tol=tol,
                          screen_period=plan.period, screen_method=method, seed=plan.seed)
    times, result = [], None
    for rep in range(plan.repeats):
        t0 = time.perf_counter()
        res = run_with_screening(spec, config)
        times.append(time.perf_counter() - t0)
        if rep == 0:
            result = res
    write_trace(result.trace, out / f"{stem}.csv")
    size = spec.n * spec.m
    return {"time_s": statistics.median(times), "iters": result.n_iter,
            "converged": result.converged, "final_gap": result.gap,
            "final_primal": result.trace[-1].primal,
            "screened_fraction": result.state.screened_count / size,
            "curve": ratio_curve(result.trace, size),
            "trace": f"{stem}.csv"}


def compare_projections(spec: ProblemSpec, iters: int, solver: str = "fista", every: int = 1,
                        methods=("shift", "rescale")):
    """Duality gaps certified by each projection along one unscreened run.

    Returns an array of shape ``(recorded iterates, len(methods))``; an
    iterate where a projection is degenerate gets an infinite gap.
    """
    state = ScreeningState(spec.n, spec.m)
    it = Iterate(initial_plan(spec))
    rows = []
    for k in range(iters):
        it = step(solver, it, spec, state)
        if k % every:
            continue
        theta = dual_from_primal(it.t, spec, state)
        P = primal_objective(it.t, spec, state)
        rows.append([_certified_gap(P, theta, spec, state, m) for m in methods])
    return np.array(rows)


def _certified_gap(P, theta, spec, state, method):
    # A projection that cannot produce a feasible point certifies nothing.
    try:
        return P - dual_value(project(theta, spec, state, method), spec)
    except DegenerateError:
        return np.inf
