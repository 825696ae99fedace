"""Full-catalog ranking metrics over warm, cold, unified and long-tail test sets.

Every test pair ``(user, target)`` is ranked against the whole catalog minus
the user's training items.  Higher score ranks first; equal scores are
ordered by ascending item id.
"""
import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalResult:
    set: str
    metric: str
    k: int
    value: float
    pairs: int
    r: int = -1

    def row(self):
        return {"set": self.set, "metric": self.metric, "K": self.k,
                "r": "" if self.r < 0 else self.r, "value": repr(float(self.value)),
                "pairs": self.pairs}


def rank_in_scores(scores, target, excluded=()):
    """1-based rank of ``target`` in a score vector, ignoring ``excluded`` ids."""
    scores = np.asarray(scores, dtype=float)
    st = scores[target]
    ids = np.arange(len(scores))
    ahead = (scores > st) | ((scores == st) & (ids < target))
    excluded = np.asarray(excluded, dtype=np.int64)
    if excluded.size:
        ahead[excluded] = False
    return int(ahead.sum()) + 1


def rank_target(model, user, target_item, candidates):
    """Rank of ``target_item`` among ``candidates`` by ``model.predict``.

    Cold candidates go through the cold path (per ``model.cold_mask``).
    """
    candidates = np.unique(np.asarray(candidates, dtype=np.int64))
    if not candidates.size:
        raise EvaluationError("empty candidate set")
    if target_item not in candidates:
        raise EvaluationError("target is not a candidate")
    st = model.predict(user, target_item)
    rank = 1
    for j in candidates:
        if j == target_item:
            continue
        s = model.predict(user, int(j))
        if s > st or (s == st and j < target_item):
            rank += 1
    return rank


def hit_rate_at_k(ranks, k):
    ranks = np.asarray(ranks)
    if k < 1:
        raise ValueError("K must be >= 1")
    if not ranks.size:
        raise EvaluationError("no ranks to average")
    return float(np.mean(ranks <= k))


def mrr_at_k(ranks, k):
    ranks = np.asarray(ranks, dtype=float)
    if k < 1:
        raise ValueError("K must be >= 1")
    if not ranks.size:
        raise EvaluationError("no ranks to average")
    return float(np.mean(np.where(ranks <= k, 1.0 / ranks, 0.0)))


def pair_ranks(model, pairs, train, q1=None, exclude=None, users_per_block=256):
    """Full-catalog ranks for an array of (user, item) pairs.

    ``exclude`` is a boolean item mask removed from every candidate set, on
    top of each user's training items (default: the model's unservable items).
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    ranks = np.empty(len(pairs), dtype=np.int64)
    if not len(pairs):
        return ranks
    if q1 is None:
        q1 = model.item_layer()
    by_user = train.items_by_user()
    order = np.argsort(pairs[:, 0], kind="stable")
    users, starts = np.unique(pairs[order, 0], return_index=True)
    bounds = np.append(starts, len(order))
    ids = np.arange(model.n_items)
    if exclude is None:
        exclude = model.excluded_candidates()
    excluded = np.flatnonzero(exclude)
    for start in range(0, len(users), users_per_block):
        block = users[start:start + users_per_block]
        scores = model.score_users(block, q1=q1)
        for row, u in enumerate(block):
            s = scores[row]
            s[by_user[u]] = -np.inf
            s[excluded] = -np.inf
            for p in order[bounds[start + row]:bounds[start + row + 1]]:
                t = pairs[p, 1]
                st = s[t]
                if not np.isfinite(st):
                    raise EvaluationError(f"non-finite score for target ({u}, {t})")
                ranks[p] = int(np.count_nonzero((s > st) | ((s == st) & (ids < t)))) + 1
    return ranks


def unified_sample(warm, cold, ratio=0.9, seed=0):
    """Subsample pair indices so warm pairs make up exactly ``ratio`` of the set.

    Returns ``(warm_idx, cold_idx)``.  An empty cold set keeps all warm pairs.
    """
    n_w, n_c = len(warm), len(cold)
    if n_c == 0 or ratio >= 1.0:
        return np.arange(n_w), np.zeros(0, dtype=np.int64)
    if n_w == 0 or ratio <= 0.0:
        return np.zeros(0, dtype=np.int64), np.arange(n_c)
    from fractions import Fraction
    frac = Fraction(ratio).limit_denominator(1000)
    a, b = frac.numerator, frac.denominator - frac.numerator    # warm : cold = a : b
    units = min(n_w // a, n_c // b)
    if units == 0:
        raise EvaluationError("too few pairs to build the unified set at the requested ratio")
    rng = np.random.default_rng(seed)
    w = np.sort(rng.choice(n_w, size=units * a, replace=False))
    c = np.sort(rng.choice(n_c, size=units * b, replace=False))
    return w, c


def _set_results(label, ranks, ks, metrics=("HR", "MRR")):
    out = []
    for k in ks:
        if "HR" in metrics:
            out.append(EvalResult(label, "HR", k, hit_rate_at_k(ranks, k), len(ranks)))
        if "MRR" in metrics:
            out.append(EvalResult(label, "MRR", k, mrr_at_k(ranks, k), len(ranks)))
    return out


def evaluate_split(model, split, ks=(20,), unified_ratio=0.9, seed=0, section="test",
                   sets=("warm", "cold", "unified")):
    """Warm-only, cold-only and unified (90/10 by default) metrics."""
    warm = split.pairs(f"{section}_warm")
    cold = split.pairs(f"{section}_cold")
    want_cold = "cold" in sets or ("unified" in sets and len(cold))
    if want_cold and len(cold) and not model.supports_cold():
        raise EvaluationError("CF-only model cannot score cold items; evaluate the warm set only")
    results = []
    pairs = np.vstack([warm.reshape(-1, 2), cold.reshape(-1, 2)]) if want_cold else warm
    both = pair_ranks(model, pairs, split.train)
    w_ranks, c_ranks = both[:len(warm)], both[len(warm):]
    if "warm" in sets:
        if len(w_ranks):
            results += _set_results("warm", w_ranks, ks)
        else:
            log.warning("warm %s set is empty; row omitted", section)
    if "cold" in sets:
        if len(c_ranks):
            results += _set_results("cold", c_ranks, ks)
        else:
            log.warning("cold %s set is empty; row omitted", section)
    if "unified" in sets:
        wi, ci = unified_sample(w_ranks, c_ranks, unified_ratio, seed)
        u_ranks = np.concatenate([w_ranks[wi], c_ranks[ci]])
        if len(u_ranks):
            results += _set_results("unified", u_ranks, ks)
        else:
            log.warning("unified %s set is empty; row omitted", section)
    return results


def validation_mrr(model, split, k=20, unified_ratio=0.9, seed=0, include_cold=True):
    """MRR@K on the validation warm, cold and unified sets (dict keyed by set).

    With ``include_cold`` false the unified set is the warm set.
    """
    cold = split.val_cold if include_cold else np.zeros((0, 2), dtype=np.int64)
    # one pass so every user's score row is computed once
    pairs = np.vstack([np.reshape(split.val_warm, (-1, 2)), np.reshape(cold, (-1, 2))])
    ranks = pair_ranks(model, pairs, split.train)
    w_ranks, c_ranks = ranks[:len(split.val_warm)], ranks[len(split.val_warm):]
    out = {}
    if len(w_ranks):
        out["warm"] = mrr_at_k(w_ranks, k)
    if len(c_ranks):
        out["cold"] = mrr_at_k(c_ranks, k)
    wi, ci = unified_sample(w_ranks, c_ranks, unified_ratio, seed)
    out["unified"] = mrr_at_k(np.concatenate([w_ranks[wi], c_ranks[ci]]), k)
    return out


def popularity_regime_eval(model, split, r_values=(0, 40, 100, 200, 500), k=20,
                           section="test"):
    """MRR@K on the warm test pairs whose item is not among the ``r`` most popular.

    Popularity is the training count; ties are ordered by ascending id.
    """
    warm = split.pairs(f"{section}_warm")
    counts = split.train.item_counts()
    order = np.lexsort((np.arange(len(counts)), -counts))
    # same candidates as the warm evaluation, so r=0 reproduces it
    ranks = pair_ranks(model, warm, split.train)
    results = []
    for r in r_values:
        if r < 0 or r > len(counts):
            raise EvaluationError(f"r={r} outside [0, {len(counts)}]")
        keep = ~np.isin(warm[:, 1], order[:r])
        if not keep.any():
            log.warning("T_%d is empty; row omitted", r)
            continue
        results.append(EvalResult("T_r", "MRR", k, mrr_at_k(ranks[keep], k),
                                  int(keep.sum()), r=int(r)))
    return results


RESULT_FIELDS = ("set", "metric", "K", "r", "value", "pairs")


def write_results(path, results):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def read_results(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalResult(row["set"], row["metric"], int(row["K"]), float(row["value"]),
                                  int(row["pairs"]), int(row["r"]) if row["r"] else -1))
    return out
