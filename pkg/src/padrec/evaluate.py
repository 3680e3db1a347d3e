"""Whole-catalog ranking metrics and embedding-drift diagnostics.

Ranking is sampling-free: every catalog item is scored and the target's
rank uses pessimistic tie handling (equal scores count as ranked above).
Kendall's tau is the tau-a form: (concordant - discordant) / C(n, 2) with
ties contributing to neither count, computed from behavior->target item
pair distances.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import _speedups
from .data import SplitDataset
from .model import FrequencyBucketMap

STRATA = ("warm", "median", "cold")


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1-based rank of the target; ties with equal score rank above it."""
    if scores.size == 0:
        raise ValueError("rank_of_target: empty catalog")
    return int(np.count_nonzero(scores >= scores[target]))


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / np.log2(rank + 1) if rank <= k else 0.0


def warm_med_cold_strata(test_targets: np.ndarray, n_items: int) -> np.ndarray:
    """Tercile label per item (0 warm, 1 median, 2 cold) by test-target count.

    Items are sorted by (test frequency desc, id asc) and cut into three
    equal-count groups.
    """
    test_targets = np.asarray(test_targets)
    if n_items < 3:
        raise ValueError("strata need at least 3 items")
    freq = np.bincount(test_targets, minlength=n_items)
    order = np.lexsort((np.arange(n_items), -freq))
    strata = np.empty(n_items, dtype=np.int64)
    strata[order] = np.arange(n_items) * 3 // n_items
    return strata


@dataclass
class RankReport:
    k: int
    hr: float
    ndcg: float
    n_users: int
    by_stratum: dict[str, dict[str, float]] = field(default_factory=dict)
    by_bucket: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "hr": self.hr,
            "ndcg": self.ndcg,
            "n_users": self.n_users,
            "by_stratum": self.by_stratum,
            "by_bucket": {str(b): v for b, v in self.by_bucket.items()},
        }


def rank_report(ranks: np.ndarray, targets: np.ndarray, n_items: int,
                buckets: FrequencyBucketMap | None = None,
                k: int = 10) -> RankReport:
    """Aggregate HR@k / nDCG@k (percent) overall, per tercile, per bucket."""
    ranks = np.asarray(ranks)
    targets = np.asarray(targets)
    hr = np.array([hr_at_k(r, k) for r in ranks])
    ndcg = np.array([ndcg_at_k(r, k) for r in ranks])
    report = RankReport(k=k, hr=float(hr.mean() * 100.0),
                        ndcg=float(ndcg.mean() * 100.0), n_users=len(ranks))
    strata = warm_med_cold_strata(targets, n_items)
    user_stratum = strata[targets]
    for s, name in enumerate(STRATA):
        sel = user_stratum == s
        report.by_stratum[name] = {
            "hr": float(hr[sel].mean() * 100.0) if sel.any() else 0.0,
            "ndcg": float(ndcg[sel].mean() * 100.0) if sel.any() else 0.0,
            "n_users": int(sel.sum()),
        }
    if buckets is not None:
        user_bucket = buckets.bucket_of(targets)
        for b in range(1, buckets.n_buckets + 1):
            sel = user_bucket == b
            report.by_bucket[b] = {
                "hr": float(hr[sel].mean() * 100.0) if sel.any() else 0.0,
                "ndcg": float(ndcg[sel].mean() * 100.0) if sel.any() else 0.0,
                "n_users": int(sel.sum()),
            }
    return report


def evaluate_ranking(model, dataset: SplitDataset, which: str = "test",
                     experts: tuple[str, ...] | None = None,
                     single_expert: str | None = None,
                     k: int = 10, batch_size: int = 256,
                     with_report: bool = True):
    """Rank every user's held-out target against the whole catalog."""
    n = dataset.n_users
    ranks = np.empty(n, dtype=np.int64)
    targets = np.empty(n, dtype=np.int64)
    max_len = model.cfg.max_len
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        rows = range(lo, hi)
        prefixes, targs = zip(*(dataset.task(u, which) for u in rows))
        lengths = np.array([len(p) for p in prefixes])
        L = int(lengths.max())
        ids = np.zeros((hi - lo, min(L, max_len)), dtype=np.int64)
        for i, p in enumerate(prefixes):
            p = p[-max_len:]
            lengths[i] = len(p)
            ids[i, : len(p)] = p
        if single_expert is not None:
            scores = model.score_all_single(single_expert, ids, lengths)
        else:
            scores, _ = model.score_all(ids, lengths, experts=experts)
        for i, t in enumerate(targs):
            ranks[lo + i] = rank_of_target(scores[i], t)
            targets[lo + i] = t
    if not with_report:
        return ranks, targets
    return rank_report(ranks, targets, dataset.n_items, model.buckets, k=k)


# ---------------------------------------------------------------------------
# Kendall's tau diagnostics


def kendalls_tau(a: np.ndarray, b: np.ndarray) -> float:
    """tau-a over all C(n,2) index pairs; ties count as neither."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendalls_tau: length mismatch")
    n = a.size
    if n < 2:
        raise ValueError("kendalls_tau: need at least 2 values")
    conc, disc = _speedups.kendall_counts(a, b)
    return (conc - disc) / (n * (n - 1) / 2)


def behavior_target_pairs(dataset: SplitDataset) -> list[tuple[int, int]]:
    """Ordered (behavior item, target item) pairs from the split's tasks.

    For a user of length l the targets sit at positions l-2, l-1, l and each
    pairs with every strictly earlier position. Duplicate item pairs across
    users keep the first occurrence.
    """
    seen: set[tuple[int, int]] = set()
    pairs: list[tuple[int, int]] = []
    for seq in dataset.sequences:
        l = len(seq)
        for t in (l - 3, l - 2, l - 1):
            target = int(seq[t])
            for s in range(t):
                key = (int(seq[s]), target)
                if key not in seen:
                    seen.add(key)
                    pairs.append(key)
    return pairs


def pair_distances(table: np.ndarray, pairs: list[tuple[int, int]]
                   ) -> np.ndarray:
    """Euclidean distance per (behavior, target) item pair."""
    idx = np.asarray(pairs)
    if idx.size and idx.max() >= table.shape[0]:
        raise ValueError("pair_distances: item without embedding")
    diff = table[idx[:, 0]] - table[idx[:, 1]]
    return np.sqrt((diff * diff).sum(axis=1))


@dataclass
class KTReport:
    overall: float
    per_bucket: dict[int, float | None]
    pair_counts: dict[int, int]

    def mean_defined(self) -> float:
        vals = [v for v in self.per_bucket.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_bucket": {str(b): v for b, v in self.per_bucket.items()},
            "pair_counts": {str(b): v for b, v in self.pair_counts.items()},
        }


def bucketed_kt(table_before: np.ndarray, table_after: np.ndarray,
                dataset: SplitDataset, buckets: FrequencyBucketMap,
                pairs: list[tuple[int, int]] | None = None) -> KTReport:
    """Kendall's tau between before/after pair distances, per target bucket."""
    if table_before.shape[0] != table_after.shape[0]:
        raise ValueError("bucketed_kt: vocabulary mismatch")
    pairs = pairs if pairs is not None else behavior_target_pairs(dataset)
    before = pair_distances(table_before, pairs)
    after = pair_distances(table_after, pairs)
    overall = kendalls_tau(before, after)
    target_bucket = buckets.bucket_of(np.array([t for _, t in pairs]))
    per_bucket: dict[int, float | None] = {}
    counts: dict[int, int] = {}
    for b in range(1, buckets.n_buckets + 1):
        sel = target_bucket == b
        counts[b] = int(sel.sum())
        per_bucket[b] = (kendalls_tau(before[sel], after[sel])
                         if counts[b] >= 2 else None)
    return KTReport(overall, per_bucket, counts)


# ---------------------------------------------------------------------------
# top/bottom pair-distance analysis


def top_bottom_pair_analysis(collab_table: np.ndarray, text_table: np.ndarray,
                             pairs: list[tuple[int, int]],
                             fraction: float = 0.10) -> dict:
    """Compare text distances of the pairs most/least separated in collab space.

    Selects the top and bottom `fraction` of pairs by collaborative distance
    and summarizes their text-distance distributions plus a separation score:
    (mean_top - mean_bottom) / pooled standard deviation.
    """
    n = len(pairs)
    if n < 20:
        raise ValueError("top_bottom_pair_analysis: need at least 20 pairs")
    collab_d = pair_distances(collab_table, pairs)
    text_d = pair_distances(text_table, pairs)
    k = int(np.floor(fraction * n))
    if k < 1:
        raise ValueError("top_bottom_pair_analysis: fraction selects no pairs")
    order = np.lexsort((np.arange(n), collab_d))
    bottom, top = order[:k], order[n - k:]

    def summary(vals: np.ndarray) -> dict:
        return {
            "mean": float(vals.mean()),
            "deciles": [float(v) for v in
                        np.percentile(vals, np.arange(10, 100, 10))],
            "count": int(vals.size),
        }

    t_top, t_bot = text_d[top], text_d[bottom]
    pooled_var = (
        ((t_top.size - 1) * t_top.var(ddof=1)
         + (t_bot.size - 1) * t_bot.var(ddof=1))
        / max(1, t_top.size + t_bot.size - 2)
    ) if k > 1 else 0.0
    pooled = float(np.sqrt(pooled_var))
    separation = float((t_top.mean() - t_bot.mean()) / pooled) if pooled > 0 \
        else 0.0
    group = np.full(n, "mid", dtype=object)
    group[top] = "top"
    group[bottom] = "bottom"
    return {
        "fraction": fraction,
        "top": summary(t_top),
        "bottom": summary(t_bot),
        "separation": separation,
        "_groups": group,
        "_collab_d": collab_d,
        "_text_d": text_d,
    }


def write_pairs_csv(path: str, pairs: list[tuple[int, int]],
                    analysis: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "behavior_item", "target_item",
                         "collab_distance", "text_distance", "group"])
        for i, (s, t) in enumerate(pairs):
            writer.writerow([
                i, s, t,
                f"{analysis['_collab_d'][i]:.10g}",
                f"{analysis['_text_d'][i]:.10g}",
                analysis["_groups"][i],
            ])


def write_report(path: str, *, rank: RankReport | None = None,
                 kt: KTReport | None = None,
                 pair_analysis: dict | None = None) -> None:
    doc: dict = {}
    if rank is not None:
        doc["rank"] = rank.to_dict()
    if kt is not None:
        doc["kt"] = kt.to_dict()
    if pair_analysis is not None:
        doc["pairs"] = {k: v for k, v in pair_analysis.items()
                        if not k.startswith("_")}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
