"""Three-region neuron cache with dual-granularity LRU.

Regions
-------
fixed  pinned entries (attention weights, KV cache); byte budget only, never evicts.
hot    whole clusters of hot neurons, evicted a cluster at a time.
cold   single neurons, each holding a set of bundle fragments (Gate, UpDown);
       evicted a neuron at a time.

Recency is a logical tick bumped by every lookup and insert.  Eviction only
discards; nothing is written back.  Regions never evict each other's entries.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, NamedTuple

import numpy as np

from .errors import CacheRejection, ConstraintError, InvariantError


class Region(str, Enum):
    FIXED = "fixed"
    HOT = "hot"
    COLD = "cold"


class Fragment(str, Enum):
    GATE = "Gate"
    UPDOWN = "UpDown"


class LookupPhase(str, Enum):
    GATE = "Gate"
    UPDOWN = "UpDown"
    WHOLE = "Whole"


class Outcome(str, Enum):
    HIT = "hit"
    PARTIAL = "partial"
    MISS = "miss"


class ClusterKey(NamedTuple):
    layer: int
    cluster: int


class NeuronKey(NamedTuple):
    layer: int
    neuron: int


class FixedKey(NamedTuple):
    name: str


ALL_FRAGMENTS = frozenset(Fragment)
_KEY_REGION = {ClusterKey: Region.HOT, NeuronKey: Region.COLD, FixedKey: Region.FIXED}


def region_of(key) -> Region:
    try:
        return _KEY_REGION[type(key)]
    except KeyError:
        raise ConstraintError(f"malformed cache key {key!r}") from None


@dataclass(frozen=True)
class CacheConfig:
    total_bytes: int
    fixed_bytes: int
    hot_bytes: int
    cold_bytes: int

    def __post_init__(self):
        if min(self.total_bytes, self.fixed_bytes, self.hot_bytes, self.cold_bytes) < 0:
            raise ConstraintError("cache budgets must be >= 0")
        if self.fixed_bytes + self.hot_bytes + self.cold_bytes > self.total_bytes:
            raise ConstraintError("fixed + hot + cold exceeds total cache size")

    def budget(self, region: Region) -> int:
        return {Region.FIXED: self.fixed_bytes, Region.HOT: self.hot_bytes,
                Region.COLD: self.cold_bytes}[Region(region)]


@dataclass
class Entry:
    nbytes: int
    last_use: int
    fragments: dict = field(default_factory=dict)  # Fragment -> bytes (cold only)


@dataclass(frozen=True)
class CacheStats:
    lookups: int
    hits: int
    partials: int
    misses: int
    per_region: dict          # Region -> hit rate (nan if no lookups)
    window_miss_p50: float
    window_miss_p99: float
    window_miss_mean: float

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else float("nan")

    @property
    def miss_rate(self) -> float:
        return 1.0 - self.hit_rate


class NeuronCache:
    """Mutable cache state.  Single writer; not safe for concurrent mutation."""

    def __init__(self, config: CacheConfig):
        self.config = config
        self.tick = 0
        self._regions: dict[Region, OrderedDict[Hashable, Entry]] = {r: OrderedDict() for r in Region}
        self._used = {r: 0 for r in Region}
        # lookup statistics
        self._counts = {r: [0, 0, 0] for r in Region}  # hit, partial, miss
        self._windows: list[tuple[int, int]] = []        # (lookups, non-hits) per closed window
        self._cur = [0, 0]

    # -- introspection -----------------------------------------------------
    def used(self, region: Region) -> int:
        return self._used[Region(region)]

    def keys(self, region: Region) -> list:
        """Resident keys, least recently used first."""
        return list(self._regions[Region(region)])

    def __contains__(self, key) -> bool:
        return key in self._regions[region_of(key)]

    def fragments(self, key: NeuronKey) -> frozenset:
        e = self._regions[Region.COLD].get(key)
        return frozenset(e.fragments) if e else frozenset()

    def audit(self) -> None:
        for r in Region:
            total = sum(e.nbytes for e in self._regions[r].values())
            if total != self._used[r]:
                raise InvariantError(f"{r.value}: byte accounting drifted ({total} != {self._used[r]})")
            if total > self.config.budget(r):
                raise InvariantError(f"{r.value}: {total} resident bytes exceed budget {self.config.budget(r)}")
            ticks = [e.last_use for e in self._regions[r].values()]
            if ticks != sorted(ticks):
                raise InvariantError(f"{r.value}: LRU order out of sync with ticks")
        for e in self._regions[Region.COLD].values():
            if not e.fragments or sum(e.fragments.values()) != e.nbytes:
                raise InvariantError("cold entry fragment bytes inconsistent")

    # -- core operations ---------------------------------------------------
    def _touch(self, region: Region, key) -> None:
        self.tick += 1
        entries = self._regions[region]
        entries[key].last_use = self.tick
        entries.move_to_end(key)

    def lookup(self, key, phase: LookupPhase | str = LookupPhase.WHOLE) -> Outcome:
        region = region_of(key)
        phase = LookupPhase(phase)
        entry = self._regions[region].get(key)
        if entry is None:
            outcome = Outcome.MISS
        elif region is not Region.COLD:
            outcome = Outcome.HIT
        else:
            have = entry.fragments
            if phase is LookupPhase.GATE:
                outcome = Outcome.HIT if Fragment.GATE in have else Outcome.MISS
            elif phase is LookupPhase.UPDOWN:
                outcome = Outcome.HIT if Fragment.UPDOWN in have else Outcome.MISS
            else:
                outcome = Outcome.HIT if len(have) == len(ALL_FRAGMENTS) else Outcome.PARTIAL
        if outcome is not Outcome.MISS:
            self._touch(region, key)
        c = self._counts[region]
        c[(Outcome.HIT, Outcome.PARTIAL, Outcome.MISS).index(outcome)] += 1
        self._cur[0] += 1
        self._cur[1] += outcome is not Outcome.HIT
        return outcome

    def _evict_until(self, region: Region, need: int, protect=None) -> list:
        entries = self._regions[region]
        budget = self.config.budget(region)
        evicted = []
        while self._used[region] + need > budget:
            victim = next((k for k in entries if k != protect), None)
            if victim is None:
                break
            self._used[region] -= entries.pop(victim).nbytes
            evicted.append(victim)
        return evicted

    def insert(self, key, nbytes: int, region: Region | str | None = None,
               fragments=None) -> list:
        """Admit ``key``; returns the keys evicted to make room.

        Cold entries take ``fragments``: an iterable of fragments sharing
        ``nbytes`` evenly (default: both), or a mapping fragment -> bytes.
        Re-inserting a resident key adds any new fragments and refreshes
        recency.
        """
        kr = region_of(key)
        region = kr if region is None else Region(region)
        if region is not kr:
            raise ConstraintError(f"{type(key).__name__} belongs in the {kr.value} region, not {region.value}")
        nbytes = int(nbytes)
        if nbytes < 0:
            raise ConstraintError("entry size must be >= 0")
        budget = self.config.budget(region)
        entries = self._regions[region]
        existing = entries.get(key)

        if region is Region.COLD:
            have = set(existing.fragments) if existing else set()
            if isinstance(fragments, dict):
                # explicit per-fragment sizes; ``nbytes`` is ignored
                sized = {Fragment(f): int(b) for f, b in fragments.items()}
                if not sized or min(sized.values()) < 0:
                    raise ConstraintError("fragment sizes must be >= 0")
                add = {f: b for f, b in sized.items() if f not in have}
            else:
                frags = frozenset(Fragment(f) for f in (fragments or ALL_FRAGMENTS))
                if not frags:
                    raise ConstraintError("cold insert needs at least one fragment")
                new = sorted(frags - have)
                per = nbytes / len(frags)
                add = {f: int(round(per * (i + 1))) - int(round(per * i)) for i, f in enumerate(new)}
            grow = sum(add.values())
        else:
            if fragments is not None:
                raise ConstraintError("fragments apply to cold-region entries only")
            grow = nbytes - (existing.nbytes if existing else 0)
            add = {}

        final = (existing.nbytes if existing else 0) + grow
        if final > budget:
            raise CacheRejection(f"{final} bytes exceed the {region.value} budget of {budget}")
        if region is Region.FIXED:
            if self._used[region] + grow > budget:
                raise CacheRejection("fixed region is full and never evicts")
            evicted = []
        else:
            evicted = self._evict_until(region, grow, protect=key)
        if existing is None:
            entries[key] = Entry(final, 0, dict(add))
        else:
            existing.nbytes = final
            existing.fragments.update(add)
        self._used[region] += grow
        self._touch(region, key)
        return evicted

    def discard(self, key) -> bool:
        """Drop ``key`` if resident (fixed entries are pinned); returns whether it was."""
        region = region_of(key)
        if region is Region.FIXED:
            raise CacheRejection("fixed entries are pinned")
        entry = self._regions[region].pop(key, None)
        if entry is None:
            return False
        self._used[region] -= entry.nbytes
        return True

    def resize(self, new_config: CacheConfig) -> list:
        """Switch budgets; shrinking a region evicts its LRU entries (fixed is never shrunk below use)."""
        if new_config.fixed_bytes < self._used[Region.FIXED]:
            raise CacheRejection("cannot shrink the fixed region below its pinned contents")
        self.config = new_config
        evicted = []
        for r in (Region.HOT, Region.COLD):
            evicted += self._evict_until(r, 0)
        return evicted

    def clear(self, region: Region | str) -> list:
        region = Region(region)
        if region is Region.FIXED:
            raise CacheRejection("fixed entries are pinned")
        evicted = list(self._regions[region])
        self._regions[region].clear()
        self._used[region] = 0
        return evicted

    # -- statistics --------------------------------------------------------
    def end_window(self) -> None:
        """Close the current per-token statistics window."""
        if self._cur[0]:
            self._windows.append(tuple(self._cur))
        self._cur = [0, 0]

    def reset_stats(self) -> None:
        self._counts = {r: [0, 0, 0] for r in Region}
        self._windows = []
        self._cur = [0, 0]

    def stats(self) -> CacheStats:
        hits = sum(c[0] for c in self._counts.values())
        partials = sum(c[1] for c in self._counts.values())
        misses = sum(c[2] for c in self._counts.values())
        per_region = {r: (c[0] / sum(c) if sum(c) else float("nan")) for r, c in self._counts.items()}
        windows = self._windows + ([tuple(self._cur)] if self._cur[0] else [])
        rates = np.array([m / n for n, m in windows]) if windows else np.array([np.nan])
        return CacheStats(
            lookups=hits + partials + misses, hits=hits, partials=partials, misses=misses,
            per_region=per_region,
            window_miss_p50=float(np.percentile(rates, 50)),
            window_miss_p99=float(np.percentile(rates, 99)),
            window_miss_mean=float(np.mean(rates)),
        )


def hit_rate(cache: NeuronCache) -> CacheStats:
    s = cache.stats()
    if s.lookups == 0:
        raise ConstraintError("no lookups recorded")
    return s
