"""KLL streaming quantile sketch.

Level ``l`` compactor items carry weight ``2**l``. Capacities shrink
geometrically (factor ``c``) going down from the top level, so the total
stored size stays ``O(k)``. When the sketch is full, the lowest over-capacity
level is sorted and every other item (random parity) is promoted.

Parity coins come from a counter-based generator (splitmix64 of
``seed`` and a call counter), so a sketch is a pure function of its seed and
input stream, and its state serializes to plain JSON.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from itertools import accumulate

import numpy as np

from .errors import ConfigError, EmptySketchError, NumericError

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class KLLSketch:
    def __init__(self, k=200, seed=0, c=2.0 / 3.0):
        if k < 8:
            raise ConfigError("k must be >= 8")
        if not 0.5 < c < 1.0:
            raise ConfigError("c must lie in (0.5, 1)")
        self.k = int(k)
        self.c = float(c)
        self.seed = int(seed)
        self.n = 0
        self.levels: list[list[float]] = [[]]
        self._counter = 0
        self._size = 0
        self._refresh_caps()

    # -- capacity schedule ----------------------------------------------

    def capacity(self, level):
        return self._caps[level]

    def _refresh_caps(self):
        height = len(self.levels)
        self._caps = [max(2, int(math.ceil(self.k * self.c ** (height - lv - 1)))) for lv in range(height)]
        self._max_size = sum(self._caps)

    @property
    def max_size(self):
        return self._max_size

    @property
    def size(self):
        """Number of stored items."""
        return self._size

    def memory_bound(self):
        """Explicit upper bound on stored items: ``k / (1 - c)`` plus slack per level."""
        return int(math.ceil(self.k / (1.0 - self.c))) + 2 * len(self.levels) + 1

    # -- updates ---------------------------------------------------------

    def insert(self, v):
        v = float(v)
        if not math.isfinite(v):
            raise NumericError(f"cannot insert non-finite value {v!r}")
        self.levels[0].append(v)
        self.n += 1
        self._size += 1
        if self._size >= self.max_size:
            self._compress()

    def extend(self, values):
        """Insert many values; identical result to repeated ``insert``."""
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise NumericError("cannot insert non-finite values")
        items = arr.tolist()
        i = 0
        while i < len(items):
            room = self.max_size - self._size
            chunk = items[i : i + room]
            self.levels[0].extend(chunk)
            self.n += len(chunk)
            self._size += len(chunk)
            i += len(chunk)
            if self._size >= self.max_size:
                self._compress()

    def _coin(self):
        self._counter += 1
        return _splitmix64((self.seed * 0x2545F4914F6CDD1D + self._counter) & _MASK64) & 1

    def _grow(self):
        self.levels.append([])
        self._refresh_caps()

    def _compact(self, level):
        buf = sorted(self.levels[level])
        if len(buf) % 2:
            # odd item stays behind so total weight is conserved
            keep, buf = [buf[-1]], buf[:-1]
        else:
            keep = []
        offset = self._coin()
        promoted = buf[offset::2]
        self.levels[level] = keep
        if level + 1 >= len(self.levels):
            self._grow()
        self.levels[level + 1].extend(promoted)
        self._size = sum(len(b) for b in self.levels)

    def _compress(self):
        while self._size >= self.max_size:
            for level in range(len(self.levels)):
                if len(self.levels[level]) >= self.capacity(level):
                    self._compact(level)
                    break
            else:
                # every level under capacity yet total over budget: grow
                self._grow()

    def merge(self, other: "KLLSketch") -> "KLLSketch":
        """Return a new sketch summarizing both streams (inputs untouched)."""
        if other.k != self.k or other.c != self.c:
            raise ConfigError("cannot merge sketches with different k or c")
        out = KLLSketch(self.k, self.seed, self.c)
        out._counter = self._counter + other._counter
        height = max(len(self.levels), len(other.levels))
        out.levels = [[] for _ in range(height)]
        out._refresh_caps()
        for src in (self, other):
            for lv, buf in enumerate(src.levels):
                out.levels[lv].extend(buf)
        out.n = self.n + other.n
        out._size = sum(len(b) for b in out.levels)
        if out._size >= out.max_size:
            out._compress()
        return out

    # -- queries -----------------------------------------------------------

    def weighted_items(self):
        """Sorted stored values with their weights."""
        pairs = sorted((v, 1 << lv) for lv, buf in enumerate(self.levels) for v in buf)
        return [p[0] for p in pairs], [p[1] for p in pairs]

    def total_weight(self):
        return sum(len(buf) << lv for lv, buf in enumerate(self.levels))

    def query(self, q):
        """Smallest stored value whose weighted rank reaches ``q * n``."""
        if self.n == 0:
            raise EmptySketchError("query on an empty sketch")
        if not 0.0 < q < 1.0:
            raise ValueError(f"q must lie in (0, 1), got {q}")
        values, weights = self.weighted_items()
        cum = list(accumulate(weights))
        target = q * cum[-1]
        idx = bisect_right(cum, target - 1e-9 * cum[-1])
        return values[min(idx, len(values) - 1)]

    def quantiles(self, qs):
        return [self.query(q) for q in qs]

    def rank(self, v):
        """Estimated number of inserted items ``<= v``."""
        return sum((1 << lv) for lv, buf in enumerate(self.levels) for x in buf if x <= v)

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        return {
            "format": "kll-sketch",
            "version": 1,
            "k": self.k,
            "c": self.c,
            "seed": self.seed,
            "n": self.n,
            "counter": self._counter,
            "levels": [list(buf) for buf in self.levels],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "kll-sketch":
            raise ConfigError("not a KLL sketch document")
        s = cls(doc["k"], doc["seed"], doc.get("c", 2.0 / 3.0))
        s.n = int(doc["n"])
        s._counter = int(doc.get("counter", 0))
        s.levels = [[float(v) for v in buf] for buf in doc["levels"]] or [[]]
        s._refresh_caps()
        s._size = sum(len(b) for b in s.levels)
        if s.total_weight() != s.n:
            raise ConfigError("sketch document weights do not sum to n")
        return s

    def __len__(self):
        return self.n

    def __eq__(self, other):
        return isinstance(other, KLLSketch) and self.to_dict() == other.to_dict()


def sketch_insert(s: KLLSketch, v) -> None:
    s.insert(v)


def sketch_query(s: KLLSketch, q) -> float:
    return s.query(q)


def sketch_merge(a: KLLSketch, b: KLLSketch) -> KLLSketch:
    return a.merge(b)


def exact_rank_error(sketch: KLLSketch, sorted_stream, qs):
    """Normalized rank error ``|rank(query(q)) - q n| / n`` per quantile.

    The rank of a returned value is taken at whichever end of its tie block is
    closer to the target, so repeated values are not penalized.
    """
    n = len(sorted_stream)
    errs = []
    for q in qs:
        v = sketch.query(q)
        lo = np.searchsorted(sorted_stream, v, side="left") + 1
        hi = np.searchsorted(sorted_stream, v, side="right")
        target = q * n
        r = min(max(target, lo), hi) if hi >= lo else lo
        errs.append(abs(r - target) / n)
    return errs
