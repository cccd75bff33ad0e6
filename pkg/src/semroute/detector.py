"""Path difference scoring (AR-DTW over reduced AS embeddings) and the
windowed mean + 4 sigma anomaly threshold.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Optional

import numpy as np

from . import kernels
from .route_monitor import AsPath, RouteChange

log = logging.getLogger(__name__)

EPS = 1e-9
DEFAULT_WINDOW = 3600
SIGMA_K = 4.0


class VantageMismatch(ValueError):
    """The two paths do not start at the same AS."""


class UnresolvedAsn(KeyError):
    def __init__(self, asn: int):
        super().__init__(asn)
        self.asn = asn

    def __str__(self) -> str:
        return f"no embedding for AS{self.asn}"


def clean_path(path: AsPath) -> AsPath:
    """Drop consecutive repeats (prepending); AS sets compare as sets."""
    if not path:
        raise ValueError("empty path")
    out = [path[0]]
    for e in path[1:]:
        if e != out[-1]:
            out.append(e)
    return tuple(out)


class VectorTable:
    """Row-indexed view of reduced embeddings for the kernels.

    ``fallback(asn)`` may supply a vector for an unseen ASN; results are cached.
    """

    def __init__(self, vectors: Mapping[int, np.ndarray],
                 fallback: Optional[Callable[[int], np.ndarray]] = None):
        self.fallback = fallback
        self.index: dict[int, int] = {}
        rows = []
        for asn in sorted(vectors):
            self.index[int(asn)] = len(rows)
            rows.append(np.asarray(vectors[asn], dtype=np.float64))
        self.dim = rows[0].shape[0] if rows else 0
        self._rows = rows
        self._E = None
        self._L = None
        self.resolved = 0

    def row(self, asn: int) -> int:
        r = self.index.get(asn)
        if r is not None:
            return r
        if self.fallback is None:
            raise UnresolvedAsn(asn)
        vec = np.asarray(self.fallback(asn), dtype=np.float64)
        if self.dim and vec.shape != (self.dim,):
            raise ValueError(f"fallback vector for AS{asn} has shape {vec.shape}")
        self.dim = vec.shape[0]
        r = self.index[asn] = len(self._rows)
        self._rows.append(vec)
        self._E = self._L = None
        self.resolved += 1
        return r

    def vector(self, asn: int) -> np.ndarray:
        return self._rows[self.row(asn)]

    @property
    def matrix(self) -> np.ndarray:
        if self._E is None:
            self._E = (np.ascontiguousarray(np.vstack(self._rows), dtype=np.float64)
                       if self._rows else np.zeros((0, self.dim)))
        return self._E

    def kernel_input(self):
        if kernels.BACKEND == "cython":
            return self.matrix
        if self._L is None:
            self._L = [list(map(float, r)) for r in self._rows]
        return self._L


def _csr(path: AsPath, table: VectorTable):
    idx, off = [], [0]
    for e in path:
        if isinstance(e, frozenset):
            idx.extend(table.row(a) for a in sorted(e))
        else:
            idx.append(table.row(e))
        off.append(len(idx))
    if kernels.BACKEND == "cython":
        return np.asarray(idx, dtype=np.int64), np.asarray(off, dtype=np.int64)
    return idx, off


def node_distance(a, b, table: VectorTable) -> float:
    """Euclidean distance; an AS set contributes its farthest member.
    Equal elements are at distance zero, including equal AS sets."""
    if a == b:
        return 0.0
    sa = sorted(a) if isinstance(a, frozenset) else [a]
    sb = sorted(b) if isinstance(b, frozenset) else [b]
    return max(
        float(np.linalg.norm(table.vector(x) - table.vector(y))) if x != y else 0.0
        for x in sa for y in sb
    )


def ar_dtw(s: AsPath, t: AsPath, table: VectorTable) -> float:
    """Minimum cumulative alignment cost of two cleaned paths.

    First elements align with each other and last with last; the first
    elements (the vantage) must be the same AS.
    """
    if not s or not t:
        raise ValueError("empty path")
    if s[0] != t[0]:
        raise VantageMismatch(f"paths start at {s[0]} and {t[0]}")
    si, so = _csr(s, table)
    ti, to = _csr(t, table)
    return float(kernels.ar_dtw_csr(table.kernel_input(), si, so, ti, to))


def path_span(p: AsPath, table: VectorTable) -> float:
    idx, off = _csr(p, table)
    return float(kernels.path_span_csr(table.kernel_input(), idx, off))


def normalize_score(D: float, s: AsPath, t: AsPath, table: VectorTable) -> float:
    """Divide by the summed hop-to-hop distances along both paths."""
    if D == 0:
        return 0.0
    return D / max(path_span(s, table) + path_span(t, table), EPS)


def score_paths(hist: AsPath, upd: AsPath, table: VectorTable) -> tuple[float, float]:
    s, t = clean_path(hist), clean_path(upd)
    D = ar_dtw(s, t, table)
    return D, normalize_score(D, s, t, table)


@dataclass
class ScoredChange:
    change: RouteChange
    raw_score: float
    norm_score: float
    flagged: bool = False
    threshold_used: float = math.nan

    def to_dict(self) -> dict:
        d = self.change.to_dict()
        d.update(D=self.raw_score, Dstar=self.norm_score, flagged=self.flagged, theta=self.threshold_used)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredChange":
        return cls(RouteChange.from_dict(d), float(d["D"]), float(d["Dstar"]),
                   bool(d["flagged"]), float(d["theta"]))


@dataclass
class SkipCounts:
    vantage_mismatch: int = 0
    unresolved: int = 0


def score_changes(changes: Iterable[RouteChange], table: VectorTable,
                  skipped: Optional[SkipCounts] = None) -> Iterator[ScoredChange]:
    """Score each change; unscorable changes are counted and dropped."""
    skipped = skipped if skipped is not None else SkipCounts()
    for c in changes:
        try:
            D, Ds = score_paths(c.historical_path, c.updated_path, table)
        except VantageMismatch:
            skipped.vantage_mismatch += 1
            continue
        except UnresolvedAsn as exc:
            skipped.unresolved += 1
            log.debug("skipping change at %d: %s", c.timestamp, exc)
            continue
        yield ScoredChange(c, D, Ds)


@dataclass
class WindowStats:
    window_start: int
    width: int
    mean: float
    std: float
    count: int

    @property
    def threshold(self) -> float:
        return self.mean + SIGMA_K * self.std


def window_stats(start: int, width: int, values: list) -> WindowStats:
    n = len(values)
    if n == 0:
        return WindowStats(start, width, 0.0, 0.0, 0)
    arr = np.asarray(values, dtype=np.float64)
    return WindowStats(start, width, float(arr.mean()), float(arr.std()), n)


def detect(scored: Iterable[ScoredChange], w: int = DEFAULT_WINDOW,
           stats_out: Optional[list] = None) -> Iterator[ScoredChange]:
    """Flag changes whose normalized score exceeds mean + 4 sigma of the previous window.

    Windows are tumbling, aligned to multiples of ``w``. A window whose
    predecessor holds no scores is thresholded on its own scores.
    """
    if w <= 0:
        raise ValueError("window width must be positive")
    prev: Optional[WindowStats] = None
    buf: list[ScoredChange] = []
    cur = None

    def flush():
        nonlocal prev
        own = window_stats(cur * w, w, [x.norm_score for x in buf])
        ref = prev if prev is not None and prev.count and prev.window_start == (cur - 1) * w else own
        theta = ref.threshold
        for x in buf:
            x.threshold_used = theta
            x.flagged = x.norm_score > theta
        if stats_out is not None:
            stats_out.append(own)
        prev = own
        return buf

    for item in scored:
        win = item.change.timestamp // w
        if cur is not None and win < cur:
            raise ValueError("scored stream is not in timestamp order")
        if cur is not None and win != cur:
            yield from flush()
            buf = []
        cur = win
        buf.append(item)
    if buf:
        yield from flush()
