"""KV cache with attention sinks and chunk-based merge compression.

Layout: the first ``sink_len`` entries are the sink and are never touched by
compression; everything after is the body. Once the cache holds
``budget + chunk_size`` entries, one compression step merges that many
disjoint adjacent body pairs, bringing the length back to ``budget``.

Multi-head caches share entry positions across heads: one set of pairs is
selected per step and applied to every head, while key-merge weights are
computed per head.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .attention import AttentionSnapshot, key_gradients
from .errors import ConfigError, DimensionMismatch, InsufficientLength, InsufficientPairs
from .merge import (
    ASYMKV_EPS,
    WEIGHT_EPS,
    gradient_free_weights,
    merge_key_asymkv,
    pair_sensitivity_norms,
)

ALGORITHMS = ("kvslimmer", "asymkv", "mean", "none")
PAIR_STRATEGIES = ("lowest_attention_mass", "highest_key_similarity", "oldest_first")


@dataclass(frozen=True)
class CompressionConfig:
    budget: int = 2048
    chunk_size: int = 512
    sink_len: int = 32
    algorithm: str = "kvslimmer"
    pair_strategy: str = "lowest_attention_mass"
    eps: float = WEIGHT_EPS

    def __post_init__(self):
        if not isinstance(self.budget, (int, np.integer)) or self.budget <= 0:
            raise ConfigError("budget", f"must be a positive integer, got {self.budget!r}")
        if not isinstance(self.chunk_size, (int, np.integer)) or self.chunk_size < 1:
            raise ConfigError("chunk_size", f"must be >= 1, got {self.chunk_size!r}")
        if not isinstance(self.sink_len, (int, np.integer)) or self.sink_len < 0:
            raise ConfigError("sink_len", f"must be >= 0, got {self.sink_len!r}")
        if self.sink_len >= self.budget:
            raise ConfigError("sink_len", f"must be smaller than budget ({self.budget}), got {self.sink_len}")
        if self.chunk_size > self.budget - self.sink_len:
            # the body at trigger time must hold chunk_size disjoint adjacent pairs
            raise ConfigError(
                "chunk_size", f"must be at most budget - sink ({self.budget - self.sink_len}), got {self.chunk_size}"
            )
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.pair_strategy not in PAIR_STRATEGIES:
            raise ConfigError("pair_strategy", f"must be one of {PAIR_STRATEGIES}, got {self.pair_strategy!r}")
        if not self.eps > 0:
            raise ConfigError("eps", f"must be positive, got {self.eps!r}")


@dataclass(frozen=True)
class CacheEntry:
    key: np.ndarray
    value: np.ndarray
    merged_count: int
    origin_span: tuple[int, int]

    def __post_init__(self):
        first, last = self.origin_span
        if self.merged_count < 1 or self.merged_count != last - first + 1:
            raise ValueError(f"merged_count {self.merged_count} inconsistent with span {self.origin_span}")


@dataclass
class CompressionReport:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # body indices
    merges: int = 0  # pair merges (per head)
    fallbacks: int = 0


@dataclass(frozen=True)
class CacheStats:
    length: int
    total_tokens_represented: int
    mean_merged_count: float
    fallback_rate: float


QueryContext = Union[AttentionSnapshot, Sequence[AttentionSnapshot]]


class KvCache:
    """Per-layer cache for ``heads`` attention heads.

    Keys/values passed to :meth:`append` are (d_k,)/(d_v,) for a single head
    or (heads, d_k)/(heads, d_v) otherwise.
    """

    def __init__(self, config: CompressionConfig, d_k: int, d_v: int, heads: int = 1):
        if heads < 1 or d_k < 1 or d_v < 1:
            raise ConfigError("heads", "heads, d_k and d_v must be positive")
        self.config = config
        self.heads = heads
        self.d_k = d_k
        self.d_v = d_v
        cap = config.budget + config.chunk_size
        self._keys = np.empty((heads, cap, d_k))
        self._values = np.empty((heads, cap, d_v))
        self._count = np.empty(cap, dtype=np.int64)
        self._first = np.empty(cap, dtype=np.int64)
        self._len = 0
        self.appended = 0
        self.pair_merges = 0
        self.fallbacks = 0

    # -- storage --------------------------------------------------------

    def __len__(self) -> int:
        return self._len

    @property
    def keys(self) -> np.ndarray:
        """(heads, len, d_k) view."""
        return self._keys[:, : self._len]

    @property
    def values(self) -> np.ndarray:
        return self._values[:, : self._len]

    @property
    def merged_counts(self) -> np.ndarray:
        return self._count[: self._len]

    @property
    def origin_spans(self) -> np.ndarray:
        first = self._first[: self._len]
        return np.stack([first, first + self.merged_counts - 1], axis=1)

    def _grow(self) -> None:
        cap = 2 * self._keys.shape[1]
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            new = np.empty((old.shape[0], cap, old.shape[2]))
            new[:, : self._len] = old[:, : self._len]
            setattr(self, name, new)
        for name in ("_count", "_first"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[: self._len] = old[: self._len]
            setattr(self, name, new)

    def _entry(self, i: int) -> CacheEntry:
        k = self._keys[:, i].copy()
        v = self._values[:, i].copy()
        if self.heads == 1:
            k, v = k[0], v[0]
        first = int(self._first[i])
        count = int(self._count[i])
        return CacheEntry(k, v, count, (first, first + count - 1))

    @property
    def sink_size(self) -> int:
        return min(self._len, self.config.sink_len)

    @property
    def sink(self) -> list[CacheEntry]:
        return [self._entry(i) for i in range(self.sink_size)]

    @property
    def body(self) -> list[CacheEntry]:
        return [self._entry(i) for i in range(self.sink_size, self._len)]

    def append(self, k, v) -> None:
        k = np.asarray(k, dtype=np.float64).reshape(-1)
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if k.size != self.heads * self.d_k or v.size != self.heads * self.d_v:
            raise DimensionMismatch(
                f"expected key of {self.heads}x{self.d_k} and value of {self.heads}x{self.d_v}, "
                f"got {k.size} and {v.size} entries"
            )
        if self._len == self._keys.shape[1]:
            self._grow()
        i = self._len
        self._keys[:, i] = k.reshape(self.heads, self.d_k)
        self._values[:, i] = v.reshape(self.heads, self.d_v)
        self._count[i] = 1
        self._first[i] = self.appended
        self._len += 1
        self.appended += 1

    # -- compression ----------------------------------------------------

    def needs_compression(self) -> bool:
        cfg = self.config
        return cfg.algorithm != "none" and self._len >= cfg.budget + cfg.chunk_size

    def compress_step(self, query_context: Optional[QueryContext] = None, output_grad=None) -> CompressionReport:
        """Merge ``len - budget`` adjacent body pairs so the length returns to ``budget``.

        ``query_context`` holds one snapshot per head, computed over the whole
        cache (sink + body) by the latest query. It is required by the
        ``kvslimmer`` and ``asymkv`` algorithms and by the
        ``lowest_attention_mass`` strategy. ``output_grad`` (heads, d_v) is the
        surrogate ``dL/do`` used only by ``asymkv``.
        """
        cfg = self.config
        if cfg.algorithm == "none":
            return CompressionReport()
        if self._len < cfg.budget + cfg.chunk_size:
            raise InsufficientLength(
                f"cache holds {self._len} entries; compression needs {cfg.budget + cfg.chunk_size}"
            )
        count = self._len - cfg.budget
        snaps = _as_snapshots(query_context, self.heads, self._len)
        sink = self.sink_size
        if snaps is None and (cfg.algorithm in ("kvslimmer", "asymkv") or cfg.pair_strategy == "lowest_attention_mass"):
            raise ValueError(f"{cfg.algorithm}/{cfg.pair_strategy} needs a query context")

        mass = None
        if snaps is not None:
            mass = np.sum([s.scores[sink:] for s in snaps], axis=0)
        pairs = _select_pairs(self.keys[:, sink:], count, cfg.pair_strategy, mass)
        idx = np.array([p for p, _ in pairs], dtype=np.intp) + sink

        km = self._keys[:, idx]
        kn = self._keys[:, idx + 1]
        report = CompressionReport(pairs=pairs, merges=len(pairs) * self.heads)
        if cfg.algorithm == "mean":
            merged = 0.5 * (km + kn)
        elif cfg.algorithm == "kvslimmer":
            scores = np.stack([s.scores for s in snaps])
            values = np.stack([s.values for s in snaps])
            output = np.stack([s.output for s in snaps])
            n11, n22, n12 = pair_sensitivity_norms(scores, values, output, idx)
            w_m, w_n, fb = gradient_free_weights(n11, n12, n22, cfg.eps)
            merged = w_m[..., None] * km + w_n[..., None] * kn
            report.fallbacks = int(np.count_nonzero(fb))
        else:  # asymkv
            if output_grad is None:
                raise ValueError("asymkv needs output_grad (surrogate dL/do per head)")
            E = np.asarray(output_grad, dtype=np.float64).reshape(self.heads, self.d_v)
            grads = np.stack([key_gradients(s, E[h]) for h, s in enumerate(snaps)])
            merged = merge_key_asymkv(km, kn, grads[:, idx], grads[:, idx + 1], ASYMKV_EPS)

        keep = np.ones(self._len, dtype=bool)
        keep[idx + 1] = False
        n_new = int(np.count_nonzero(keep))
        self._keys[:, idx] = merged
        self._values[:, idx] = self._values[:, idx] + self._values[:, idx + 1]
        self._count[idx] = self._count[idx] + self._count[idx + 1]
        self._keys[:, :n_new] = self._keys[:, : self._len][:, keep]
        self._values[:, :n_new] = self._values[:, : self._len][:, keep]
        self._count[:n_new] = self._count[: self._len][keep]
        self._first[:n_new] = self._first[: self._len][keep]
        self._len = n_new
        self.pair_merges += report.merges
        self.fallbacks += report.fallbacks
        return report


def _as_snapshots(ctx: Optional[QueryContext], heads: int, length: int):
    if ctx is None:
        return None
    snaps = [ctx] if isinstance(ctx, AttentionSnapshot) else list(ctx)
    if len(snaps) != heads:
        raise DimensionMismatch(f"query context has {len(snaps)} heads, cache has {heads}")
    for s in snaps:
        if s.n != length:
            raise DimensionMismatch(f"query context covers {s.n} entries, cache holds {length}")
    return snaps


def _greedy_disjoint(score: np.ndarray, count: int, n_entries: int) -> list[tuple[int, int]]:
    """Pick ``count`` disjoint adjacent pairs by descending ``score``.

    Ties go to the earlier index. A candidate is skipped if it overlaps a
    chosen pair or if taking it would leave too few free adjacent slots to
    complete ``count`` pairs.
    """
    if count == 0:
        return []
    if n_entries // 2 < count:
        raise InsufficientPairs(f"{n_entries} entries cannot supply {count} disjoint pairs")
    order = np.lexsort((np.arange(score.size), -score))
    starts = [0]
    ends = {0: n_entries - 1}
    capacity = n_entries // 2
    chosen: list[int] = []
    remaining = list(order)
    while len(chosen) < count:
        skipped = []
        progress = False
        for i in remaining:
            if len(chosen) == count:
                break
            i = int(i)
            pos = bisect.bisect_right(starts, i) - 1
            if pos < 0:
                skipped.append(i)
                continue
            lo = starts[pos]
            hi = ends[lo]
            if i + 1 > hi:
                skipped.append(i)
                continue
            new_cap = capacity - (hi - lo + 1) // 2 + (i - lo) // 2 + (hi - i - 1) // 2
            if new_cap < count - len(chosen) - 1:
                skipped.append(i)
                continue
            del starts[pos]
            del ends[lo]
            if i - 1 >= lo:
                bisect.insort(starts, lo)
                ends[lo] = i - 1
            if hi >= i + 2:
                bisect.insort(starts, i + 2)
                ends[i + 2] = hi
            capacity = new_cap
            chosen.append(i)
            progress = True
        if not progress:
            raise InsufficientPairs(f"only {len(chosen)} of {count} disjoint pairs available")
        remaining = skipped
    chosen.sort()
    return [(i, i + 1) for i in chosen]


def _select_pairs(body_keys: np.ndarray, count: int, strategy: str, mass: Optional[np.ndarray]):
    # body_keys: (heads, n_body, d_k); mass: (n_body,) attention summed over heads
    n_body = body_keys.shape[1]
    if 2 * count > n_body:
        raise InsufficientPairs(f"body of {n_body} entries cannot supply {count} disjoint pairs")
    if strategy == "oldest_first":
        return [(2 * p, 2 * p + 1) for p in range(count)]
    if strategy == "highest_key_similarity":
        a, b = body_keys[:, :-1], body_keys[:, 1:]
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.sum(a * b, axis=-1) / (na * nb)
        score = np.mean(np.nan_to_num(cos, nan=0.0), axis=0)
    elif strategy == "lowest_attention_mass":
        if mass is None:
            raise ValueError("lowest_attention_mass needs attention scores")
        score = -(mass[:-1] + mass[1:])
    else:
        raise ConfigError("pair_strategy", f"unknown strategy {strategy!r}")
    return _greedy_disjoint(score, count, n_body)


def select_pairs(body: Sequence[CacheEntry], count: int, strategy: str, query_context: Optional[QueryContext] = None):
    """Choose ``count`` disjoint adjacent pairs of body indices.

    ``query_context`` snapshots may cover the whole cache; their trailing
    ``len(body)`` scores are taken as the body's attention mass.
    """
    if not body:
        if count:
            raise InsufficientPairs("empty body")
        return []
    keys = np.stack([np.atleast_2d(e.key) for e in body], axis=1)
    mass = None
    if query_context is not None:
        snaps = [query_context] if isinstance(query_context, AttentionSnapshot) else list(query_context)
        if any(s.n < len(body) for s in snaps):
            raise DimensionMismatch("query context shorter than the body")
        mass = np.sum([s.scores[s.n - len(body):] for s in snaps], axis=0)
    return _select_pairs(keys, count, strategy, mass)


def cache_stats(cache: KvCache) -> CacheStats:
    n = len(cache)
    total = int(np.sum(cache.merged_counts)) if n else 0
    mean = total / n if n else 0.0
    rate = cache.fallbacks / cache.pair_merges if cache.pair_merges else 0.0
    return CacheStats(n, total, mean, rate)
