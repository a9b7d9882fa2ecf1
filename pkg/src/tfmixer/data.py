"""Irregular multivariate event data: parsing, alignment, windowing, batching, synthesis.

A sample is a set of per-variable observation streams at arbitrary timestamps.
The canonical aligned form is the (T, X, M) triple: the sorted union of all
observation timestamps, a zero-filled value matrix, and the observation mask.
Exact float equality defines timestamp identity; ingestion rejects duplicate
(sample, variable, timestamp) rows, so near-collisions are the data's problem.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Base for data ingestion/validation failures."""


class ParseError(DataError):
    pass


class DuplicateObservationError(DataError):
    pass


class NonMonotonicQueryError(DataError):
    pass


class WindowSplitError(DataError):
    pass


@dataclass
class EventSeries:
    """Raw irregular sample: per-variable (timestamp, value) events plus future queries."""

    sample_id: str
    n_variables: int
    events: list[list[tuple[float, float]]]
    queries: list[list[float]] = field(default_factory=list)
    targets: list[list[float]] = field(default_factory=list)
    t_cut: float | None = None  # lookback/forecast boundary when known

    def __post_init__(self):
        if not self.queries:
            self.queries = [[] for _ in range(self.n_variables)]
        if not self.targets:
            self.targets = [[] for _ in range(self.n_variables)]

    def validate(self) -> "EventSeries":
        if len(self.events) != self.n_variables:
            raise DataError(f"sample {self.sample_id}: expected {self.n_variables} event lists")
        max_t = None
        for n, ev in enumerate(self.events):
            for (t0, _), (t1, _) in zip(ev, ev[1:]):
                if t1 == t0:
                    raise DuplicateObservationError(
                        f"sample {self.sample_id}, variable {n}: duplicate timestamp {t0}")
                if t1 < t0:
                    raise DataError(
                        f"sample {self.sample_id}, variable {n}: events not sorted at t={t1}")
            if ev:
                m = ev[-1][0]
                max_t = m if max_t is None else max(max_t, m)
        for n, (qs, vs) in enumerate(zip(self.queries, self.targets)):
            if len(qs) != len(vs):
                raise DataError(
                    f"sample {self.sample_id}, variable {n}: {len(qs)} queries vs {len(vs)} targets")
            for q0, q1 in zip(qs, qs[1:]):
                if q1 <= q0:
                    raise NonMonotonicQueryError(
                        f"sample {self.sample_id}, variable {n}: queries not strictly increasing at {q1}")
            if qs and max_t is not None and qs[0] <= max_t:
                raise NonMonotonicQueryError(
                    f"sample {self.sample_id}, variable {n}: query {qs[0]} not after "
                    f"last observation {max_t}")
        return self

    @property
    def n_events(self) -> int:
        return sum(len(ev) for ev in self.events)


@dataclass
class AlignedSample:
    """Canonical (T, X, M) triple: union timestamps, zero-filled values, observation mask."""

    t: np.ndarray  # (L,)
    x: np.ndarray  # (L, N)
    m: np.ndarray  # (L, N)


def pre_align(sample: EventSeries) -> AlignedSample:
    """Align a sample onto the sorted union of its event timestamps."""
    all_t = np.array(sorted({t for ev in sample.events for t, _ in ev}), dtype=float)
    L, N = len(all_t), sample.n_variables
    x = np.zeros((L, N))
    m = np.zeros((L, N))
    for n, ev in enumerate(sample.events):
        if not ev:
            continue
        ts = np.array([t for t, _ in ev])
        idx = np.searchsorted(all_t, ts)
        x[idx, n] = [v for _, v in ev]
        m[idx, n] = 1.0
    return AlignedSample(t=all_t, x=x, m=m)


def extract_triplets(aligned: AlignedSample) -> set[tuple[int, float, float]]:
    """Recover the (variable, timestamp, value) event set from an aligned sample."""
    rows, cols = np.nonzero(aligned.m)
    return {(int(n), float(aligned.t[l]), float(aligned.x[l, n])) for l, n in zip(rows, cols)}


def window_split(sample: EventSeries, t_cut: float,
                 max_targets: int | None = None) -> EventSeries:
    """Split at ``t_cut``: earlier events stay history, later ones become query/target pairs.

    ``max_targets`` keeps only the earliest k post-cut timestamps per variable
    (the next-k-observations forecasting protocol).
    """
    history: list[list[tuple[float, float]]] = []
    queries: list[list[float]] = []
    targets: list[list[float]] = []
    for ev in sample.events:
        past = [(t, v) for t, v in ev if t < t_cut]
        future = [(t, v) for t, v in ev if t >= t_cut]
        if max_targets is not None:
            future = future[:max_targets]
        history.append(past)
        queries.append([t for t, _ in future])
        targets.append([v for _, v in future])
    if not any(history):
        raise WindowSplitError(f"sample {sample.sample_id}: no events before t_cut={t_cut}")
    if not any(queries):
        raise WindowSplitError(f"sample {sample.sample_id}: no events at or after t_cut={t_cut}")
    return EventSeries(sample_id=sample.sample_id, n_variables=sample.n_variables,
                       events=history, queries=queries, targets=targets,
                       t_cut=t_cut).validate()


# -- file formats -------------------------------------------------------------

def parse_events(path: str | Path, format: str = "jsonl") -> list[EventSeries]:
    """Load a dataset file; ``format`` is ``jsonl`` or ``csv-triplet``.

    Variable ids are 0-based integers; the variable count is the max id + 1
    across the whole file, so every sample in a file shares the same width.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such data file: {path}")
    if format == "jsonl":
        raw = _read_jsonl(path)
    elif format == "csv-triplet":
        raw = _read_csv_triplet(path)
    else:
        raise DataError(f"unknown data format {format!r}")

    n_variables = 0
    for _, events, queries in raw:
        for var, *_ in events + queries:
            n_variables = max(n_variables, var + 1)

    samples = []
    for sample_id, events, queries in raw:
        ev_lists: list[list[tuple[float, float]]] = [[] for _ in range(n_variables)]
        seen: set[tuple[int, float]] = set()
        for var, t, v in events:
            if (var, t) in seen:
                raise DuplicateObservationError(
                    f"sample {sample_id}, variable {var}: duplicate observation at t={t}")
            seen.add((var, t))
            ev_lists[var].append((t, v))
        for ev in ev_lists:
            ev.sort(key=lambda tv: tv[0])
        q_lists: list[list[float]] = [[] for _ in range(n_variables)]
        v_lists: list[list[float]] = [[] for _ in range(n_variables)]
        for var, q, v in sorted(queries, key=lambda r: (r[0], r[1])):
            q_lists[var].append(q)
            v_lists[var].append(v)
        samples.append(EventSeries(sample_id=sample_id, n_variables=n_variables,
                                   events=ev_lists, queries=q_lists,
                                   targets=v_lists).validate())
    return samples


def _read_jsonl(path: Path):
    raw = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                sample_id = str(obj["id"])
                events = [(int(e[0]), float(e[1]), float(e[2])) for e in obj["events"]]
                queries = [(int(q[0]), float(q[1]), float(q[2])) for q in obj.get("queries", [])]
            except (json.JSONDecodeError, KeyError, IndexError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            raw.append((sample_id, events, queries))
    return raw


_CSV_HEADER = ["sample_id", "variable", "timestamp", "value", "split"]


def _read_csv_triplet(path: Path):
    by_sample: dict[str, tuple[list, list]] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            return []
        if [h.strip() for h in header] != _CSV_HEADER:
            raise ParseError(f"{path}: line 1: expected header {','.join(_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sample_id, var, t, v, split = row
                var, t, v = int(var), float(t), float(v)
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if split not in ("obs", "target"):
                raise ParseError(f"{path}: line {lineno}: split must be obs or target, got {split!r}")
            events, queries = by_sample.setdefault(sample_id, ([], []))
            (events if split == "obs" else queries).append((var, t, v))
    return [(sid, ev, qs) for sid, (ev, qs) in by_sample.items()]


def write_jsonl(samples: list[EventSeries], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            events = [[n, t, v] for n, ev in enumerate(s.events) for t, v in ev]
            queries = [[n, q, v] for n, (qs, vs) in enumerate(zip(s.queries, s.targets))
                       for q, v in zip(qs, vs)]
            f.write(json.dumps({"id": s.sample_id, "events": events, "queries": queries}) + "\n")


# -- model-ready preparation ---------------------------------------------------

@dataclass
class PreparedSample:
    """Aligned sample in normalized time: lookback maps to [0, 1], queries beyond it.

    Values and targets stay in original units; ``t_offset``/``t_scale`` map
    normalized time back to original units (t = offset + scale * t_norm).
    """

    sample_id: str
    t: np.ndarray                 # (L,) normalized
    x: np.ndarray                 # (L, N) original units
    m: np.ndarray                 # (L, N)
    query_t: list[list[float]]    # per variable, normalized
    target: list[list[float]]     # per variable, original units
    t_offset: float
    t_scale: float

    @property
    def n_variables(self) -> int:
        return self.x.shape[1]


def prepare_sample(series: EventSeries) -> PreparedSample:
    """Align and rescale one sample so its lookback window spans [0, 1]."""
    aligned = pre_align(series)
    if len(aligned.t) == 0:
        raise DataError(f"sample {series.sample_id}: no observations")
    offset = float(aligned.t[0])
    horizon = series.t_cut if series.t_cut is not None else float(aligned.t[-1])
    scale = horizon - offset
    if scale <= 0:
        scale = 1.0
    query_t = [[(q - offset) / scale for q in qs] for qs in series.queries]
    return PreparedSample(sample_id=series.sample_id,
                          t=(aligned.t - offset) / scale,
                          x=aligned.x, m=aligned.m,
                          query_t=query_t,
                          target=[list(vs) for vs in series.targets],
                          t_offset=offset, t_scale=scale)


@dataclass
class AlignedBatch:
    """Samples padded to a common history length and query count.

    Padded history rows carry mask 0 and repeat the last real timestamp;
    padded queries carry target_mask 0 and repeat the last real query time
    (1.0 when a variable has none), so they stay inert in masked reductions
    and keep trig arguments bounded.
    """

    sample_ids: list[str]
    t: np.ndarray            # (B, L)
    x: np.ndarray            # (B, L, N)
    m: np.ndarray            # (B, L, N)
    query_t: np.ndarray      # (B, Q, N)
    target: np.ndarray       # (B, Q, N)
    target_mask: np.ndarray  # (B, Q, N)
    t_offset: np.ndarray     # (B,)
    t_scale: np.ndarray      # (B,)
    n_times: np.ndarray      # (B,) real history rows
    n_queries: np.ndarray    # (B, N) real queries per variable

    @property
    def size(self) -> int:
        return len(self.sample_ids)

    @property
    def n_variables(self) -> int:
        return self.x.shape[2]


def make_batch(samples: list[PreparedSample]) -> AlignedBatch:
    if not samples:
        raise DataError("cannot batch an empty sample list")
    B = len(samples)
    N = samples[0].n_variables
    for s in samples:
        if s.n_variables != N:
            raise DataError(f"sample {s.sample_id}: variable count {s.n_variables} != {N}")
    L = max(len(s.t) for s in samples)
    Q = max((len(qs) for s in samples for qs in s.query_t), default=1)
    Q = max(Q, 1)

    t = np.zeros((B, L))
    x = np.zeros((B, L, N))
    m = np.zeros((B, L, N))
    query_t = np.ones((B, Q, N))
    target = np.zeros((B, Q, N))
    target_mask = np.zeros((B, Q, N))
    n_times = np.zeros(B, dtype=int)
    n_queries = np.zeros((B, N), dtype=int)

    for b, s in enumerate(samples):
        Ls = len(s.t)
        n_times[b] = Ls
        t[b, :Ls] = s.t
        t[b, Ls:] = s.t[-1]
        x[b, :Ls] = s.x
        m[b, :Ls] = s.m
        for n in range(N):
            qs, vs = s.query_t[n], s.target[n]
            n_queries[b, n] = len(qs)
            if qs:
                query_t[b, :len(qs), n] = qs
                query_t[b, len(qs):, n] = qs[-1]
                target[b, :len(vs), n] = vs
                target_mask[b, :len(qs), n] = 1.0
    return AlignedBatch(sample_ids=[s.sample_id for s in samples],
                        t=t, x=x, m=m, query_t=query_t, target=target,
                        target_mask=target_mask,
                        t_offset=np.array([s.t_offset for s in samples]),
                        t_scale=np.array([s.t_scale for s in samples]),
                        n_times=n_times, n_queries=n_queries)


def unbatch(batch: AlignedBatch) -> list[PreparedSample]:
    """Exact inverse of :func:`make_batch` on the real (unpadded) positions."""
    out = []
    for b in range(batch.size):
        Ls = batch.n_times[b]
        query_t = [list(batch.query_t[b, :batch.n_queries[b, n], n]) for n in range(batch.n_variables)]
        target = [list(batch.target[b, :batch.n_queries[b, n], n]) for n in range(batch.n_variables)]
        out.append(PreparedSample(sample_id=batch.sample_ids[b],
                                  t=batch.t[b, :Ls].copy(),
                                  x=batch.x[b, :Ls].copy(),
                                  m=batch.m[b, :Ls].copy(),
                                  query_t=query_t, target=target,
                                  t_offset=float(batch.t_offset[b]),
                                  t_scale=float(batch.t_scale[b])))
    return out


# -- synthetic data -------------------------------------------------------------

@dataclass
class SynthConfig:
    """Poisson-sampled cosine mixtures with optional trend and Gaussian noise."""

    n_samples: int
    n_variables: int
    rate: float                 # events per unit time
    span: float                 # observed interval [0, span)
    freqs: list[list[tuple[float, float, float]]]  # per variable: (frequency, amplitude, phase)
    noise_sd: float = 0.0
    trend_slope: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.rate <= 0:
            raise DataError("rate must be positive")
        if len(self.freqs) != self.n_variables:
            raise DataError(f"freqs must list components for all {self.n_variables} variables")


def signal_value(cfg: SynthConfig, n: int, t: np.ndarray) -> np.ndarray:
    """Noise-free ground-truth signal of variable ``n`` at times ``t``."""
    t = np.asarray(t, dtype=float)
    v = cfg.trend_slope * t
    for f, a, ph in cfg.freqs[n]:
        v = v + a * np.cos(2.0 * np.pi * f * t + ph)
    return v


def gen_synthetic(cfg: SynthConfig) -> list[EventSeries]:
    """Draw event times from a homogeneous Poisson process per variable; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for i in range(cfg.n_samples):
        events: list[list[tuple[float, float]]] = []
        for n in range(cfg.n_variables):
            count = rng.poisson(cfg.rate * cfg.span)
            times = np.sort(rng.uniform(0.0, cfg.span, size=count))
            while len(np.unique(times)) < count:  # exact float collisions: redraw
                times = np.sort(rng.uniform(0.0, cfg.span, size=count))
            values = signal_value(cfg, n, times)
            if cfg.noise_sd > 0:
                values = values + rng.normal(0.0, cfg.noise_sd, size=count)
            events.append(list(zip(times.tolist(), values.tolist())))
        samples.append(EventSeries(sample_id=f"synth-{i:04d}",
                                   n_variables=cfg.n_variables, events=events))
    return samples


def synth_manifest(cfg: SynthConfig) -> dict:
    """Ground-truth description stored next to a generated dataset."""
    return {
        "n_samples": cfg.n_samples,
        "n_variables": cfg.n_variables,
        "rate": cfg.rate,
        "span": cfg.span,
        "freqs": [[list(c) for c in comps] for comps in cfg.freqs],
        "noise_sd": cfg.noise_sd,
        "trend_slope": cfg.trend_slope,
        "seed": cfg.seed,
    }
