"""Semantic (STS Pearson) and syntactic (1-NN parsing / tagging) evaluation."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .data import ParseTree, StsItem, parse_bracketed, serialize, strip_tokens

__all__ = [
    "UndefinedCorrelation",
    "EmptyIndex",
    "EvalReport",
    "Embedder",
    "pearson",
    "cosine_rows",
    "sts_eval",
    "ted",
    "ted_matrix",
    "labeled_spans",
    "bracket_counts",
    "NnIndex",
    "nn_parse_ted",
    "random_baseline_ted",
    "upper_bound_ted",
    "nn_labeled_f1",
    "nn_pos_accuracy",
    "random_baseline_bucketed",
    "upper_bound_bucketed",
    "nearest_sentences",
]


class UndefinedCorrelation(ValueError):
    pass


class EmptyIndex(ValueError):
    pass


class Embedder(Protocol):
    def embed(self, sentences: Sequence[Sequence[str]], variable: str) -> np.ndarray: ...


@dataclass
class ItemResult:
    item_id: int
    value: float
    counts: tuple[float, ...] = ()


@dataclass
class EvalReport:
    metric: str
    items: list[ItemResult]
    aggregate: float
    baselines: dict[str, float] = field(default_factory=dict)
    skipped: int = 0

    def recompute(self) -> float:
        """Aggregate from per-item results (micro-averaged when counts exist)."""
        if not self.items:
            return float("nan")
        if self.metric == "f1":
            match, pred, gold = (sum(it.counts[i] for it in self.items) for i in range(3))
            return _f1(match, pred, gold)
        if self.metric == "pos_acc":
            return sum(it.counts[0] for it in self.items) / sum(it.counts[1] for it in self.items)
        if self.metric == "pearson":
            return self.aggregate
        return float(np.mean([it.value for it in self.items]))

    def table(self) -> str:
        pct = self.metric in ("f1", "pos_acc", "pearson")

        def fmt(v):
            return f"{100 * v:.1f}" if pct else f"{v:.4f}"

        lines = [f"{'metric':<10} {'value':>10}", f"{self.metric:<10} {fmt(self.aggregate):>10}"]
        for name, v in self.baselines.items():
            lines.append(f"{name:<10} {fmt(v):>10}")
        lines.append(f"{'items':<10} {len(self.items):>10}")
        if self.skipped:
            lines.append(f"{'skipped':<10} {self.skipped:>10}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "item_id", "value"])
        for it in self.items:
            w.writerow([self.metric, it.item_id, repr(float(it.value))])
        w.writerow([self.metric, "aggregate", repr(float(self.aggregate))])
        for name, v in self.baselines.items():
            w.writerow([name, "aggregate", repr(float(v))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# semantic similarity


def pearson(scores: Sequence[float], gold: Sequence[float]) -> float:
    x = np.asarray(scores, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ValueError(f"pearson needs equal non-empty 1-D inputs, got {x.shape} and {y.shape}")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelation("correlation undefined for constant input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, 1e-300)


def sts_eval(model: Embedder, data: Sequence[StsItem], variable: str = "semantic") -> EvalReport:
    """Pearson between gold scores and cosines of the chosen latent's mean vectors."""
    left = model.embed([it.sent1 for it in data], variable)
    right = model.embed([it.sent2 for it in data], variable)
    sims = cosine_rows(left, right)
    r = pearson(sims, [it.score for it in data])
    return EvalReport("pearson", [ItemResult(i, float(s)) for i, s in enumerate(sims)], r)


# ---------------------------------------------------------------------------
# tree edit distance (Zhang & Shasha, unit costs)


def _postorder(tree: ParseTree):
    labels: list[str] = []
    leftmost: list[int] = []

    def walk(node: ParseTree) -> int:
        first = None
        for child in node.children:
            lm = walk(child)
            if first is None:
                first = lm
        labels.append(node.label)
        me = len(labels) - 1
        leftmost.append(me if first is None else first)
        return leftmost[me]

    walk(tree)
    return labels, leftmost


def _keyroots(leftmost: list[int]) -> list[int]:
    seen: dict[int, int] = {}
    for i, l in enumerate(leftmost):
        seen[l] = i
    return sorted(seen.values())


def _zs_core(lma: list[int], lmb: list[int], cost, minimum):
    """Keyroot/forest dynamic program over precomputed postorder structure.

    ``cost[i][j]`` is the relabel cost of a-node ``i`` to b-node ``j``; it may be
    a number or an array of costs for many label assignments sharing the same
    two tree shapes, in which case ``minimum`` must be elementwise.
    """
    n, m = len(lma), len(lmb)
    td = [[0] * m for _ in range(n)]
    for i in _keyroots(lma):
        for j in _keyroots(lmb):
            li, lj = lma[i], lmb[j]
            rows, cols = i - li + 2, j - lj + 2
            fd = [[0] * cols for _ in range(rows)]
            for x in range(1, rows):
                fd[x][0] = x
            for y in range(1, cols):
                fd[0][y] = y
            for x in range(1, rows):
                ii = li + x - 1
                for y in range(1, cols):
                    jj = lj + y - 1
                    if lma[ii] == li and lmb[jj] == lj:
                        fd[x][y] = minimum(fd[x - 1][y] + 1, fd[x][y - 1] + 1, fd[x - 1][y - 1] + cost[ii][jj])
                        td[ii][jj] = fd[x][y]
                    else:
                        px = lma[ii] - li
                        py = lmb[jj] - lj
                        fd[x][y] = minimum(fd[x - 1][y] + 1, fd[x][y - 1] + 1, fd[px][py] + td[ii][jj])
    return td[n - 1][m - 1]


def _zhang_shasha(a: ParseTree, b: ParseTree) -> int:
    la, lma = _postorder(a)
    lb, lmb = _postorder(b)
    cost = [[0 if x == y else 1 for y in lb] for x in la]
    return _zs_core(lma, lmb, cost, min)


def _min3(a, b, c):
    return np.minimum(np.minimum(a, b), c)


def ted_matrix(a_trees: Sequence[ParseTree], b_trees: Sequence[ParseTree]) -> np.ndarray:
    """``ted(a, b)`` for every pair, as an integer matrix of shape (len(a), len(b)).

    Trees with the same unlabeled shape share one dynamic program evaluated on
    arrays of relabel costs, which is much faster than pairwise calls.
    """
    codes: dict[str, int] = {}

    def group(trees):
        groups: dict[tuple, tuple[list[int], list[list[int]]]] = {}
        for k, t in enumerate(trees):
            labels, leftmost = _postorder(strip_tokens(t))
            ids, rows = groups.setdefault(tuple(leftmost), ([], []))
            ids.append(k)
            rows.append([codes.setdefault(l, len(codes)) for l in labels])
        return groups

    ga, gb = group(a_trees), group(b_trees)
    out = np.zeros((len(a_trees), len(b_trees)), dtype=np.int64)
    for sa, (ia, rows_a) in ga.items():
        la = np.asarray(rows_a)
        for sb, (ib, rows_b) in gb.items():
            lb = np.asarray(rows_b)
            if len(ia) * len(ib) < 64:
                # array overhead outweighs sharing for tiny groups
                for ka, ra in zip(ia, rows_a):
                    for kb, rb in zip(ib, rows_b):
                        cost = [[0 if x == y else 1 for y in rb] for x in ra]
                        out[ka, kb] = _zs_core(list(sa), list(sb), cost, min)
                continue
            # cost[i, j] is an (len(ia), len(ib)) array of relabel costs
            cost = (la.T[:, None, :, None] != lb.T[None, :, None, :]).astype(np.int64)
            out[np.ix_(ia, ib)] = _zs_core(list(sa), list(sb), cost, _min3)
    return out


@lru_cache(maxsize=1 << 16)
def _ted_cached(a: str, b: str) -> int:
    return _zhang_shasha(parse_bracketed(a), parse_bracketed(b))


def ted(a: ParseTree, b: ParseTree) -> int:
    """Ordered labelled tree edit distance with unit insert/delete/relabel costs.

    Word tokens are ignored: both trees are compared after :func:`strip_tokens`.
    """
    return _ted_cached(serialize(strip_tokens(a)), serialize(strip_tokens(b)))


# ---------------------------------------------------------------------------
# bracket scoring


def labeled_spans(tree: ParseTree) -> set[tuple[str, int, int]]:
    """``(label, start, end)`` for every non-leaf node; preterminals excluded."""
    spans: set[tuple[str, int, int]] = set()

    def walk(node: ParseTree, start: int) -> int:
        if node.token is not None or not node.children:
            return start + 1
        end = start
        for child in node.children:
            end = walk(child, end)
        spans.add((node.label, start, end))
        return end

    walk(tree, 0)
    return spans


def bracket_counts(pred: ParseTree, gold: ParseTree) -> tuple[int, int, int]:
    p, g = labeled_spans(pred), labeled_spans(gold)
    return len(p & g), len(p), len(g)


def _f1(match: float, pred: float, gold: float) -> float:
    if pred == 0 and gold == 0:
        return 1.0
    if match == 0:
        return 0.0
    prec, rec = match / pred, match / gold
    return 2 * prec * rec / (prec + rec)


def _tag_counts(pred: ParseTree, gold: ParseTree) -> tuple[int, int]:
    pt, gt = pred.pos_tags(), gold.pos_tags()
    return sum(a == b for a, b in zip(pt, gt)), len(gt)


# ---------------------------------------------------------------------------
# nearest-neighbour index


@dataclass
class NnEntry:
    tokens: list[str]
    tree: ParseTree | None = None
    label: str | None = None

    @property
    def length(self) -> int:
        return len(self.tokens)


class NnIndex:
    """Exact cosine search over a fixed set of embedded sentences.

    Also used to hold query sets: the vectors of the queries plus their gold
    trees.
    """

    def __init__(self, vectors: np.ndarray, entries: Sequence[NnEntry]):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(entries):
            raise ValueError(f"{vectors.shape[0]} vectors for {len(entries)} entries")
        self.vectors = vectors
        self.entries = list(entries)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        self._unit = vectors / np.maximum(norms, 1e-300)
        buckets: dict[int, list[int]] = defaultdict(list)
        for i, e in enumerate(self.entries):
            buckets[e.length].append(i)
        self.length_buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    @classmethod
    def build(cls, model: Embedder, entries: Sequence[NnEntry], variable: str) -> "NnIndex":
        entries = list(entries)
        if not entries:
            return cls(np.zeros((0, 1)), [])
        return cls(model.embed([e.tokens for e in entries], variable), entries)

    def __len__(self) -> int:
        return len(self.entries)

    def cosines(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        return self._unit @ (q / max(np.linalg.norm(q), 1e-300))

    def nearest(self, query: np.ndarray, length: int | None = None) -> int | None:
        """Argmax-cosine candidate (lowest index on ties), optionally within a length bucket."""
        if not self.entries:
            raise EmptyIndex("nearest-neighbour index is empty")
        sims = self.cosines(query)
        if length is None:
            return int(np.argmax(sims))
        bucket = self.length_buckets.get(length)
        if bucket is None:
            return None
        return int(bucket[np.argmax(sims[bucket])])

    def ranked(self, query: np.ndarray, top_n: int) -> list[tuple[int, float]]:
        if top_n <= 0 or not self.entries:
            return []
        sims = self.cosines(query)
        order = np.argsort(-sims, kind="stable")[:top_n]
        return [(int(i), float(sims[i])) for i in order]

    def without(self, sentences: Sequence[Sequence[str]]) -> "NnIndex":
        drop = {tuple(s) for s in sentences}
        keep = [i for i, e in enumerate(self.entries) if tuple(e.tokens) not in drop]
        return NnIndex(self.vectors[keep], [self.entries[i] for i in keep])


def _require(index: NnIndex) -> None:
    if not len(index):
        raise EmptyIndex("nearest-neighbour index is empty")


def nn_parse_ted(index: NnIndex, queries: NnIndex) -> EvalReport:
    """Predict each query's tree as its nearest neighbour's (no length restriction)."""
    _require(index)
    items = []
    for qi, q in enumerate(queries.entries):
        nb = index.nearest(queries.vectors[qi])
        items.append(ItemResult(qi, float(ted(index.entries[nb].tree, q.tree))))
    agg = sum(int(it.value) for it in items) / len(items) if items else float("nan")
    return EvalReport("ted", items, agg)


def random_baseline_ted(index: NnIndex, queries: NnIndex, runs: int = 10, rng=None) -> float:
    """Mean TED of uniformly random predictions, averaged over ``runs`` runs."""
    _require(index)
    rng = np.random.default_rng(rng)
    # integer total with one division, so a one-candidate index matches nn_parse_ted exactly
    total = 0
    for _ in range(runs):
        picks = rng.integers(0, len(index), size=len(queries))
        total += sum(ted(index.entries[p].tree, q.tree) for p, q in zip(picks, queries.entries))
    return total / (runs * len(queries))


def sample_queries(n_queries: int, sample: int, rng) -> np.ndarray:
    rng = np.random.default_rng(rng)
    if sample >= n_queries:
        return np.arange(n_queries)
    return np.sort(rng.choice(n_queries, size=sample, replace=False))


def upper_bound_ted(index: NnIndex, queries: NnIndex, sample: int = 100, rng=None, return_sample: bool = False):
    """Mean over ``sample`` random queries of the minimum TED to any candidate."""
    _require(index)
    chosen = sample_queries(len(queries), sample, rng)
    # candidates sharing a stripped tree share a distance
    shapes = sorted({serialize(strip_tokens(e.tree)) for e in index.entries})
    golds = [queries.entries[qi].tree for qi in chosen]
    values = ted_matrix([parse_bracketed(s) for s in shapes], golds).min(axis=0)
    value = float(np.mean(values))
    return (value, chosen) if return_sample else value


def _bucketed(index: NnIndex, queries: NnIndex, metric: str) -> EvalReport:
    _require(index)
    items, skipped = [], 0
    for qi, q in enumerate(queries.entries):
        nb = index.nearest(queries.vectors[qi], length=q.length)
        if nb is None:
            skipped += 1
            continue
        pred = index.entries[nb].tree
        if metric == "f1":
            counts = bracket_counts(pred, q.tree)
            items.append(ItemResult(qi, _f1(*counts), counts))
        else:
            counts = _tag_counts(pred, q.tree)
            items.append(ItemResult(qi, counts[0] / counts[1], counts))
    report = EvalReport(metric, items, float("nan"), skipped=skipped)
    report.aggregate = report.recompute()
    return report


def nn_labeled_f1(index: NnIndex, queries: NnIndex) -> EvalReport:
    """Labelled bracketing F1 of the same-length nearest neighbour's tree (corpus-level)."""
    return _bucketed(index, queries, "f1")


def nn_pos_accuracy(index: NnIndex, queries: NnIndex) -> EvalReport:
    """Tagging accuracy of the same-length nearest neighbour's POS sequence."""
    return _bucketed(index, queries, "pos_acc")


def _score(metric: str, pred: ParseTree, gold: ParseTree) -> tuple:
    return bracket_counts(pred, gold) if metric == "f1" else _tag_counts(pred, gold)


def _aggregate(metric: str, counts: list[tuple]) -> float:
    if not counts:
        return float("nan")
    if metric == "f1":
        return _f1(*(sum(c[i] for c in counts) for i in range(3)))
    return sum(c[0] for c in counts) / sum(c[1] for c in counts)


def random_baseline_bucketed(index: NnIndex, queries: NnIndex, metric: str, runs: int = 10, rng=None) -> float:
    """Random same-length candidate, averaged over ``runs`` runs (``metric``: f1 or pos_acc)."""
    _require(index)
    rng = np.random.default_rng(rng)
    results = []
    for _ in range(runs):
        counts = []
        for q in queries.entries:
            bucket = index.length_buckets.get(q.length)
            if bucket is None:
                continue
            pick = bucket[rng.integers(0, bucket.size)]
            counts.append(_score(metric, index.entries[pick].tree, q.tree))
        results.append(_aggregate(metric, counts))
    return float(np.mean(results))


def upper_bound_bucketed(index: NnIndex, queries: NnIndex, metric: str, sample: int = 100, rng=None) -> float:
    """Oracle same-length candidate (best per-sentence score) over sampled queries."""
    _require(index)
    chosen = sample_queries(len(queries), sample, rng)
    counts = []
    for qi in chosen:
        q = queries.entries[qi]
        bucket = index.length_buckets.get(q.length)
        if bucket is None:
            continue
        scored = [_score(metric, index.entries[i].tree, q.tree) for i in bucket]
        key = (lambda c: _f1(*c)) if metric == "f1" else (lambda c: c[0] / c[1])
        counts.append(max(scored, key=key))
    return _aggregate(metric, counts)


def nearest_sentences(index: NnIndex, query: np.ndarray, top_n: int) -> list[tuple[NnEntry, float]]:
    """Top ``top_n`` candidates by cosine, descending; ties keep index order."""
    _require(index)
    return [(index.entries[i], s) for i, s in index.ranked(query, top_n)]
