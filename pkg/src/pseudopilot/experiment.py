"""Experiment grids: (method, seed[, k]) cells, per-cell records and summaries.

Cells are independent and may run in worker processes; aggregation happens
afterwards in the parent, in cell order, so output never depends on
scheduling. No wall-clock values enter the written tables.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig, ExperimentSpec, RunConfig, SpecError
from .datagen import DatasetBundle, load_bundle, make_shifted_blobs
from .training import run

log = logging.getLogger(__name__)

RECORD_FIELDS = ("method", "seed", "k", "status", "accuracy", "positive_precision",
                 "random_precision", "n_positive", "error")
PHASE_FIELDS = ("method", "seed", "k", "phase", "accuracy", "n_positive", "pseudo_precision",
                "random_precision")
SUMMARY_FIELDS = ("method", "mean", "std", "n", "failed")
CURVE_FIELDS = ("k", "method", "mean", "std", "n")


@dataclass(frozen=True)
class Cell:
    data: DataConfig
    run: RunConfig
    k: int | None = None


def bundle_for(data: DataConfig, seed: int, k: int | None = None) -> DatasetBundle:
    if data.path is not None:
        if k is not None and k != data.k_shot:
            raise SpecError("data.path", "a k-shot sweep needs generated data, not a fixed file")
        return load_bundle(data.path)
    kwargs = data.generator_kwargs()
    if k is not None:
        kwargs["k_shot"] = k
    return make_shifted_blobs(seed + data.data_seed_offset, **kwargs)


def run_cell(cell: Cell) -> dict:
    """Run one cell; any exception becomes a ``failed`` record."""
    cfg = cell.run
    rec = {"method": cfg.method, "seed": cfg.seed, "k": cell.k if cell.k is not None else cell.data.k_shot}
    start = time.perf_counter()
    try:
        result = run(cfg, bundle_for(cell.data, cfg.seed, cell.k))
    except Exception as exc:  # recorded, the grid carries on
        log.error("cell %s seed %d failed: %s", cfg.method, cfg.seed, exc)
        rec.update(status="failed", error=f"{type(exc).__name__}: {exc}", phases=[])
        return rec
    log.info("cell %s seed %d k %s: %.4f (%.1fs)", cfg.method, cfg.seed, rec["k"],
             result.final_accuracy, time.perf_counter() - start)
    last = result.phases[-1]
    rec.update(status="ok", accuracy=result.final_accuracy, positive_precision=result.positive_precision,
               random_precision=result.random_precision, n_positive=last.n_positive, error="",
               phases=result.records())
    return rec


def cells_for(spec: ExperimentSpec, k_shots=None) -> list[Cell]:
    ks = [None] if k_shots is None else list(k_shots)
    return [Cell(spec.data, spec.run.replace(method=m, seed=s), k)
            for k in ks for m in spec.methods for s in spec.seeds]


def run_cells(cells: list[Cell], jobs: int = 1) -> list[dict]:
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, cells))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(f, "")) for f in fields])


def aggregate(records: list[dict], keys=("method",)) -> list[dict]:
    """Mean and population std of accuracy over successful records per key,
    in first-seen key order."""
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        acc = [r["accuracy"] for r in rs if r["status"] == "ok"]
        row = dict(zip(keys, key))
        row.update(mean=float(np.mean(acc)) if acc else float("nan"),
                   std=float(np.std(acc)) if acc else float("nan"),
                   n=len(acc), failed=len(rs) - len(acc))
        out.append(row)
    return out


def _write_records(out: Path, records: list[dict]) -> None:
    write_csv(out / "records.csv", RECORD_FIELDS, records)
    write_csv(out / "phases.csv", PHASE_FIELDS,
              [{**p, "k": r["k"]} for r in records for p in r["phases"]])


def cmd_run(spec: ExperimentSpec, out, jobs: int = 1) -> list[dict]:
    """Every (method, seed) cell; writes records.csv, phases.csv, summary.csv."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = run_cells(cells_for(spec), jobs)
    _write_records(out, records)
    write_csv(out / "summary.csv", SUMMARY_FIELDS, aggregate(records))
    return records


def cmd_sweep_kshot(spec: ExperimentSpec, out, jobs: int = 1) -> list[dict]:
    """Every (k, method, seed) cell; writes records.csv, phases.csv, curve.csv."""
    if not spec.k_shots:
        raise SpecError("k_shots", "need at least one k")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = run_cells(cells_for(spec, spec.k_shots), jobs)
    _write_records(out, records)
    write_csv(out / "curve.csv", CURVE_FIELDS, aggregate(records, keys=("k", "method")))
    return records
