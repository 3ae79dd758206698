"""Observation-model identification from alert traces."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from irgame.dynamics import COMPROMISED, DISCOVERED, HEALTHY, N_CLASSES, ObservationModel
from irgame.stopping import Minor, tp2_check, tp2_summary

TRACE_HEADER = ["t", "node", "state_class", "alert_count"]
MODEL_HEADER = ["node", "state_class", "alert_count", "frequency"]


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    t: int
    node: int
    state_class: int
    alert_count: int


@dataclass(frozen=True)
class TraceSummary:
    records: int
    per_class: tuple[int, int, int]
    nodes: tuple[int, ...]


def summarize(records: Sequence[TraceRecord]) -> TraceSummary:
    per_class = [0, 0, 0]
    for r in records:
        per_class[r.state_class] += 1
    return TraceSummary(len(records), tuple(per_class), tuple(sorted({r.node for r in records})))


def ingest_traces(path: str | Path, n_obs: int, nodes: Iterable[int] | None = None) -> tuple[list[TraceRecord], TraceSummary]:
    """Read and validate a trace CSV; errors name the offending line."""
    known = set(nodes) if nodes is not None else None
    records: list[TraceRecord] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return records, summarize(records)
        if [h.strip() for h in header] != TRACE_HEADER:
            raise TraceError(f"line 1: expected header {','.join(TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise TraceError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                t, node, cls, o = (int(c) for c in row)
            except ValueError:
                raise TraceError(f"line {lineno}: fields must be integers") from None
            if cls not in (HEALTHY, DISCOVERED, COMPROMISED):
                raise TraceError(f"line {lineno}: state_class {cls} not in 0..2")
            if not 0 <= o < n_obs:
                raise TraceError(f"line {lineno}: alert_count {o} outside [0, {n_obs})")
            if known is not None and node not in known:
                raise TraceError(f"line {lineno}: unknown node {node}")
            records.append(TraceRecord(t, node, cls, o))
    return records, summarize(records)


def write_traces(records: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in records:
            w.writerow([r.t, r.node, r.state_class, r.alert_count])


@dataclass
class EmpiricalObservationModel:
    """Counts and frequency rows per node and class.

    ``usable[k, c]`` is false for rows estimated from no samples; a discovered
    row without samples is copied from the healthy row and marked in
    ``defaulted``.
    """

    nodes: tuple[int, ...]
    counts: np.ndarray
    rows: np.ndarray
    smoothing: float
    usable: np.ndarray
    defaulted: np.ndarray = field(default=None)

    @property
    def samples(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    @property
    def n_obs(self) -> int:
        return self.rows.shape[2]

    def to_observation_model(self) -> ObservationModel:
        return ObservationModel(self.rows)

    @classmethod
    def from_model(cls, model: ObservationModel, nodes: Sequence[int]) -> EmpiricalObservationModel:
        n = model.n_nodes
        return cls(
            tuple(nodes), np.zeros(model.rows.shape, dtype=np.int64), model.rows.copy(), 0.0,
            np.ones((n, N_CLASSES), dtype=bool), np.zeros((n, N_CLASSES), dtype=bool),
        )


def estimate_observation_model(
    records: Sequence[TraceRecord],
    n_obs: int,
    smoothing: float = 0.0,
    nodes: Sequence[int] | None = None,
) -> EmpiricalObservationModel:
    """Add-``smoothing`` frequency estimates, one row per (node, class)."""
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    nodes = tuple(nodes) if nodes is not None else tuple(sorted({r.node for r in records}))
    pos = {n: k for k, n in enumerate(nodes)}
    counts = np.zeros((len(nodes), N_CLASSES, n_obs), dtype=np.int64)
    if records:
        arr = np.array([(pos[r.node], r.state_class, r.alert_count) for r in records], dtype=np.int64)
        np.add.at(counts, (arr[:, 0], arr[:, 1], arr[:, 2]), 1)
    n = counts.sum(axis=2)
    usable = n > 0
    denom = n + smoothing * n_obs
    with np.errstate(invalid="ignore", divide="ignore"):
        rows = (counts + smoothing) / denom[..., None]
    rows[~usable] = 1.0 / n_obs
    # renormalize to remove rounding drift
    rows /= rows.sum(axis=2, keepdims=True)
    defaulted = np.zeros_like(usable)
    fill = ~usable[:, DISCOVERED] & usable[:, HEALTHY]
    rows[fill, DISCOVERED] = rows[fill, HEALTHY]
    defaulted[fill, DISCOVERED] = True
    return EmpiricalObservationModel(nodes, counts, rows, float(smoothing), usable, defaulted)


@dataclass(frozen=True)
class MlrReport:
    node: int
    passed: bool
    fraction_nonnegative: float
    worst_minor: float
    offending: Minor | None


def validate_mlr(model: EmpiricalObservationModel) -> dict[int, MlrReport]:
    """TP-2 check of the stacked healthy and compromised rows of every node."""
    out = {}
    for k, node in enumerate(model.nodes):
        M = model.rows[k, [HEALTHY, COMPROMISED]]
        ok, minor = tp2_check(M)
        frac, worst = tp2_summary(M)
        out[node] = MlrReport(node, ok, frac, worst, minor)
    return out


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def generate_traces(
    model: ObservationModel, nodes: Sequence[int], samples_per_class: int, rng: np.random.Generator
) -> list[TraceRecord]:
    """Draw ``samples_per_class`` alert counts for every node and class."""
    records = []
    for k, node in enumerate(nodes):
        for c in range(N_CLASSES):
            u = rng.random(samples_per_class)
            o = model.sample(k, np.full(samples_per_class, c), u)
            records.extend(TraceRecord(t, node, c, int(x)) for t, x in enumerate(o))
    return records


def write_model_csv(model: EmpiricalObservationModel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MODEL_HEADER)
        for k, node in enumerate(model.nodes):
            for c in range(N_CLASSES):
                for o in range(model.n_obs):
                    w.writerow([node, c, o, repr(float(model.rows[k, c, o]))])


def load_model_csv(path: str | Path, cfg) -> np.ndarray:
    """Rows ``(nodes, 3, obs)`` in the config's node order; a ``node`` of ``*`` applies to all nodes."""
    n_obs = cfg.obs_space_size
    rows = np.full((cfg.n_nodes, N_CLASSES, n_obs), np.nan)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MODEL_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MODEL_HEADER)}")
        for lineno, r in enumerate(reader, start=2):
            c, o, f = int(r["state_class"]), int(r["alert_count"]), float(r["frequency"])
            if not 0 <= o < n_obs:
                raise ValueError(f"{path}: line {lineno}: alert_count outside the observation space")
            targets = range(cfg.n_nodes) if r["node"] == "*" else [cfg.graph.index[int(r["node"])]]
            for k in targets:
                rows[k, c, o] = f
    if np.isnan(rows).any():
        raise ValueError(f"{path}: model does not cover every node, class and alert count")
    return rows
