"""Sharded map/reduce top-k search for regularizer samples.

Each unlabeled candidate is scored against every labeled sample; a mapper
emits the candidate's ``k_m`` best labeled matches keyed by labeled id, and a
reducer keeps the ``k_r`` best candidates per labeled id. Because a mapper
truncates at ``k_m``, a labeled sample can lose its true nearest neighbor when
``k_m < |labeled|``; with ``k_m >= |labeled|`` the result equals an exhaustive
scan.

Ordering everywhere is (score descending, id ascending).
"""

from __future__ import annotations

import csv
import heapq
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import Corpus, EmbeddingRecord, as_corpus, check_same_dim, similarity_matrix
from .errors import DimensionMismatch, EmptyCorpus, KeyViolation, MissingLabels

DEFAULT_KM = 1000
DEFAULT_KR = 10


@dataclass(frozen=True)
class SearchParams:
    k_m: int = DEFAULT_KM
    k_r: int = DEFAULT_KR
    shard_count: int = 1

    def __post_init__(self):
        for name in ("k_m", "k_r", "shard_count"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, np.integer)) or val < 1:
                raise ValueError(f"{name} must be a positive integer, got {val!r}")


@dataclass(frozen=True, order=False)
class NeighborMatch:
    labeled_id: int
    unlabeled_id: int
    score: float

    def as_dict(self):
        return {"labeled_id": self.labeled_id, "unlabeled_id": self.unlabeled_id, "score": self.score}


@dataclass(frozen=True)
class RegularizedSample:
    features_source_id: int
    labels: tuple[int, ...]
    donor_id: int


class TopKAccumulator:
    """Bounded best-k collection of (score, id) pairs.

    Keeps at most ``capacity`` entries; the best are the highest scores, with
    smaller ids winning ties. Pushing an entry no better than the current worst
    into a full accumulator is a no-op.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        # min-heap whose root is the worst kept entry
        self._heap: list[tuple[float, int]] = []

    def __len__(self):
        return len(self._heap)

    def push(self, score: float, item_id: int) -> bool:
        key = (float(score), -int(item_id))
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, key)
            return True
        if key > self._heap[0]:
            heapq.heapreplace(self._heap, key)
            return True
        return False

    def entries(self) -> list[tuple[float, int]]:
        return [(s, -neg) for s, neg in sorted(self._heap, key=lambda e: (-e[0], -e[1]))]


def _ranked(matches, id_of):
    return sorted(matches, key=lambda m: (-m.score, id_of(m)))


def map_phase(candidate: EmbeddingRecord, labeled_index: Sequence[EmbeddingRecord] | Corpus,
              k_m: int, unlabeled_id: int | None = None) -> list[NeighborMatch]:
    """Emit the candidate's ``k_m`` most similar labeled samples."""
    labeled = as_corpus(labeled_index)
    if len(labeled) == 0:
        raise EmptyCorpus("labeled index is empty")
    vec = candidate.vector if isinstance(candidate, EmbeddingRecord) else np.asarray(candidate, dtype=np.float64)
    if vec.shape[0] != labeled.dim:
        raise DimensionMismatch(f"candidate dimension {vec.shape[0]} vs labeled {labeled.dim}")
    uid = candidate.id if unlabeled_id is None else unlabeled_id
    row = similarity_matrix(vec[None, :], labeled.vectors)[0]
    order = np.lexsort((labeled.ids, -row))[:k_m]
    return [NeighborMatch(int(labeled.ids[j]), int(uid), float(row[j])) for j in order]


def reduce_phase(labeled_id: int, matches: Iterable[NeighborMatch], k_r: int) -> list[NeighborMatch]:
    """Keep the ``k_r`` best candidates emitted for one labeled sample."""
    acc = TopKAccumulator(k_r)
    for m in matches:
        if m.labeled_id != labeled_id:
            raise KeyViolation(f"reducer for labeled id {labeled_id} received a match for {m.labeled_id}")
        acc.push(m.score, m.unlabeled_id)
    return [NeighborMatch(int(labeled_id), int(uid), score) for score, uid in acc.entries()]


# ---------------------------------------------------------------------------
# vectorized shard machinery


@dataclass
class Emissions:
    """Columnar buffer of (labeled_id, unlabeled_id, score) tuples."""

    labeled_id: np.ndarray
    unlabeled_id: np.ndarray
    score: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.empty(0, np.uint64), np.empty(0, np.uint64), np.empty(0, np.float64))

    def __len__(self):
        return int(self.score.shape[0])

    @classmethod
    def concat(cls, parts: Sequence["Emissions"]) -> "Emissions":
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.labeled_id for p in parts]),
            np.concatenate([p.unlabeled_id for p in parts]),
            np.concatenate([p.score for p in parts]),
        )


def _row_topk_mask(sims: np.ndarray, k: int) -> np.ndarray:
    """Mask of each row's k best columns; ties go to the lower column index."""
    n_cols = sims.shape[1]
    if k >= n_cols:
        return np.ones(sims.shape, dtype=bool)
    kth = np.partition(sims, n_cols - k, axis=1)[:, n_cols - k][:, None]
    above = sims > kth
    need = k - above.sum(axis=1, keepdims=True)
    at = sims == kth
    return above | (at & (np.cumsum(at, axis=1) <= need))


def _col_topk(sims: np.ndarray, mask: np.ndarray, k: int):
    """Per column, the (row, score) of the k best masked rows.

    Rows must already be ordered by ascending id so the cumulative count
    breaks score ties toward smaller ids. Returns flat (col, row) index arrays.
    """
    vals = np.where(mask, sims, -np.inf)
    n_rows = vals.shape[0]
    if k < n_rows:
        kth = np.partition(vals, n_rows - k, axis=0)[n_rows - k][None, :]
        above = vals > kth
        need = k - above.sum(axis=0, keepdims=True)
        at = (vals == kth) & mask
        keep = (above | (at & (np.cumsum(at, axis=0) <= need))) & mask
    else:
        keep = mask
    rows, cols = np.nonzero(keep)
    return cols, rows


def map_shard(shard: Corpus, labeled: Corpus, k_m: int, k_r: int | None = None) -> Emissions:
    """Run the mapper over every candidate in ``shard``.

    ``labeled`` must be sorted by ascending id. With ``k_r`` set, a combiner
    keeps only each labeled id's ``k_r`` best emissions from this shard, which
    cannot change the final reduce result.
    """
    perm = np.argsort(shard.ids, kind="stable")
    uids = shard.ids[perm]
    sims = similarity_matrix(shard.vectors[perm], labeled.vectors)
    mask = _row_topk_mask(sims, k_m)
    if k_r is None:
        rows, cols = np.nonzero(mask)
    else:
        cols, rows = _col_topk(sims, mask, k_r)
    return Emissions(labeled.ids[cols], uids[rows], sims[rows, cols])


def shuffle_reduce(buffers: Sequence[Emissions], k_r: int) -> dict[int, list[NeighborMatch]]:
    """Group emissions by labeled id and keep the k_r best of each group.

    The outcome depends only on the multiset of emissions, never on the order
    of ``buffers``.
    """
    em = Emissions.concat(buffers)
    out: dict[int, list[NeighborMatch]] = {}
    if len(em) == 0:
        return out
    order = np.lexsort((em.unlabeled_id, -em.score, em.labeled_id))
    lid = em.labeled_id[order]
    starts = np.flatnonzero(np.r_[True, lid[1:] != lid[:-1]])
    ends = np.r_[starts[1:], len(lid)]
    uid = em.unlabeled_id[order]
    score = em.score[order]
    for s, e in zip(starts, ends):
        e = min(e, s + k_r)
        key = int(lid[s])
        out[key] = [NeighborMatch(key, int(u), float(c)) for u, c in zip(uid[s:e], score[s:e])]
    return out


def _shard_bounds(n: int, shard_count: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, shard_count + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _prepare(labeled, unlabeled):
    labeled = as_corpus(labeled)
    unlabeled = as_corpus(unlabeled)
    if len(labeled) == 0:
        raise EmptyCorpus("labeled corpus is empty")
    if len(unlabeled) == 0:
        raise EmptyCorpus("unlabeled corpus is empty")
    check_same_dim(labeled, unlabeled)
    return labeled, unlabeled


def search(labeled, unlabeled, params: SearchParams = SearchParams(), *,
           workers: int = 1, combine: bool = True, shard_order: Sequence[int] | None = None,
           stats: dict | None = None) -> dict[int, list[NeighborMatch]]:
    """Distributed regularizer-sample search over ``shard_count`` contiguous shards.

    Mappers run independently (on ``workers`` threads when > 1) into private
    buffers; the shuffle and reduce run once all shards finish. Labeled ids
    with no surviving emission are absent from the result.
    """
    labeled, unlabeled = _prepare(labeled, unlabeled)
    lperm = np.argsort(labeled.ids, kind="stable")
    lsorted = Corpus(labeled.ids[lperm], labeled.vectors[lperm])
    bounds = _shard_bounds(len(unlabeled), params.shard_count)
    if shard_order is not None:
        bounds = [bounds[i] for i in shard_order]

    def run(bound):
        a, b = bound
        shard = Corpus(unlabeled.ids[a:b], unlabeled.vectors[a:b])
        return map_shard(shard, lsorted, params.k_m, params.k_r if combine else None)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            buffers = list(pool.map(run, bounds))
    else:
        buffers = [run(b) for b in bounds]
    if stats is not None:
        stats["shards"] = len(bounds)
        stats["emissions"] = int(sum(len(b) for b in buffers))
    return shuffle_reduce(buffers, params.k_r)


def exact_search(labeled, unlabeled, k_r: int) -> dict[int, list[NeighborMatch]]:
    """Exhaustive top-k_r per labeled sample; the oracle for :func:`search`."""
    labeled, unlabeled = _prepare(labeled, unlabeled)
    if k_r < 1:
        raise ValueError("k_r must be positive")
    sims = similarity_matrix(labeled.vectors, unlabeled.vectors)
    out = {}
    for i in range(len(labeled)):
        row = sims[i]
        order = np.lexsort((unlabeled.ids, -row))[:k_r]
        key = int(labeled.ids[i])
        out[key] = [NeighborMatch(key, int(unlabeled.ids[j]), float(row[j])) for j in order]
    return dict(sorted(out.items()))


def full_ranking(labeled, unlabeled) -> dict[int, dict[int, float]]:
    """Every (labeled, unlabeled) score, keyed by labeled id then unlabeled id."""
    labeled, unlabeled = _prepare(labeled, unlabeled)
    sims = similarity_matrix(labeled.vectors, unlabeled.vectors)
    uids = [int(u) for u in unlabeled.ids]
    return {int(l): dict(zip(uids, sims[i].tolist())) for i, l in enumerate(labeled.ids)}


def recall_at_k(approx: Mapping[int, list[NeighborMatch]], exact: Mapping[int, list[NeighborMatch]]) -> float:
    """Fraction of exact top-k pairs that the approximate search recovered."""
    total = hit = 0
    for key, ms in exact.items():
        want = {m.unlabeled_id for m in ms}
        got = {m.unlabeled_id for m in approx.get(key, [])}
        total += len(want)
        hit += len(want & got)
    return hit / total if total else 1.0


def transfer_labels(matches: Mapping[int, Sequence[NeighborMatch]],
                    labeled_labels: Mapping[int, Sequence[int]], take: int = 1) -> list[RegularizedSample]:
    """Give each labeled sample's labels to its ``take`` best unlabeled matches.

    Identical (unlabeled id, label set) pairs produced by different donors are
    emitted once, credited to the first donor in ascending labeled-id order.
    """
    if take < 1:
        raise ValueError("take must be >= 1")
    out = []
    seen = set()
    for lid in sorted(matches):
        ms = matches[lid]
        if not ms:
            continue
        if lid not in labeled_labels:
            raise MissingLabels(f"no labels for labeled id {lid}")
        labels = tuple(sorted(set(int(c) for c in labeled_labels[lid])))
        for m in _ranked(ms, lambda m: m.unlabeled_id)[:take]:
            key = (m.unlabeled_id, labels)
            if key in seen:
                continue
            seen.add(key)
            out.append(RegularizedSample(m.unlabeled_id, labels, lid))
    return out


def label_bits(labels: Sequence[int], n_classes: int) -> np.ndarray:
    y = np.zeros(n_classes, dtype=np.int8)
    for c in labels:
        y[c] = 1
    return y


def iter_sorted_matches(result: Mapping[int, Sequence[NeighborMatch]]):
    for lid in sorted(result):
        yield from result[lid]


def write_matches(result: Mapping[int, Sequence[NeighborMatch]], path, fmt: str | None = None) -> None:
    """Write matches sorted by (labeled_id, rank) as JSONL or CSV."""
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "jsonl")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            w = csv.writer(fh)
            w.writerow(["labeled_id", "unlabeled_id", "score"])
            for m in iter_sorted_matches(result):
                w.writerow([m.labeled_id, m.unlabeled_id, repr(m.score)])
        elif fmt == "jsonl":
            for m in iter_sorted_matches(result):
                fh.write(json.dumps(m.as_dict()) + "\n")
        else:
            raise ValueError(f"unknown match format {fmt!r}")


def read_matches(path) -> dict[int, list[NeighborMatch]]:
    out: dict[int, list[NeighborMatch]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        if str(path).endswith(".csv"):
            rows = csv.DictReader(fh)
        else:
            rows = (json.loads(line) for line in fh if line.strip())
        for r in rows:
            m = NeighborMatch(int(r["labeled_id"]), int(r["unlabeled_id"]), float(r["score"]))
            out.setdefault(m.labeled_id, []).append(m)
    return out
