"""Train / validation / test partitioning with simulated cold items.

A fold is built in three steps:

1. :func:`user_holdout` draws two test and two validation items for every
   user with at least ``min_items`` items.
2. :func:`stratified_cold_selection` walks the catalog sorted by
   popularity and takes every tenth item (starting at ``offset``) as a
   test-cold item and its successor as a validation-cold item, so the cold
   items follow the popularity distribution of the whole catalog.
3. :func:`apply_cold_simulation` removes every interaction of the cold
   items from train and routes them to the cold evaluation sets.
"""
import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import InteractionLog, build_popularity
from .errors import SplitError

log = logging.getLogger(__name__)

_EMPTY_PAIRS = np.zeros((0, 2), dtype=np.int64)


def _pairs(a):
    a = np.asarray(a, dtype=np.int64).reshape(-1, 2)
    if not len(a):
        return _EMPTY_PAIRS.copy()
    order = np.lexsort((a[:, 1], a[:, 0]))
    return a[order]


@dataclass
class SplitBundle:
    train: InteractionLog
    val_warm: np.ndarray
    test_warm: np.ndarray
    val_cold: np.ndarray = field(default_factory=lambda: _EMPTY_PAIRS.copy())
    test_cold: np.ndarray = field(default_factory=lambda: _EMPTY_PAIRS.copy())
    val_cold_items: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_cold_items: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    offset: int = 0
    seed: int = 0
    min_items: int = 8
    relabeled: int = 0
    dropped_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_users(self):
        return self.train.n_users

    @property
    def n_items(self):
        return self.train.n_items

    def cold_items(self):
        return np.union1d(self.val_cold_items, self.test_cold_items)

    def cold_mask(self):
        """Items with no training interaction; these are scored through the cold path."""
        return self.train.item_counts() == 0

    def pairs(self, section):
        return {"val_warm": self.val_warm, "test_warm": self.test_warm,
                "val_cold": self.val_cold, "test_cold": self.test_cold}[section]

    def __eq__(self, other):
        if not isinstance(other, SplitBundle):
            return NotImplemented
        arrays = ("val_warm", "test_warm", "val_cold", "test_cold",
                  "val_cold_items", "test_cold_items", "dropped_users")
        return (self.train == other.train
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and (self.offset, self.seed, self.min_items, self.relabeled)
                == (other.offset, other.seed, other.min_items, other.relabeled))


def user_holdout(log_, min_items=8, rng_seed=0):
    """Hold out two test and two validation items per eligible user."""
    if min_items < 5:
        raise SplitError("min_items must be >= 5 (2 test + 2 validation + 1 train)")
    rng = np.random.default_rng(rng_seed)
    by_user = log_.items_by_user()
    test, val = [], []
    for u, items in enumerate(by_user):
        if len(items) < min_items:
            continue
        pick = rng.choice(items, size=4, replace=False)
        test += [(u, pick[0]), (u, pick[1])]
        val += [(u, pick[2]), (u, pick[3])]
    if not test:
        raise SplitError(f"no user has at least {min_items} items")
    held = np.array(test + val, dtype=np.int64)
    keep = ~np.isin(log_.codes, held[:, 0] * log_.n_items + held[:, 1])
    return SplitBundle(train=log_.select(keep), val_warm=_pairs(val), test_warm=_pairs(test),
                       seed=rng_seed, min_items=min_items)


def stratified_cold_selection(popularity, offset=0, width=1):
    """Return ``(test_cold, validation_cold)`` item id arrays.

    Items are ranked by raw count, most popular first, ties broken by id.
    Ranks congruent to ``offset .. offset+width-1`` (mod 10) become test-cold;
    the next ``width`` residues become validation-cold.
    """
    if not 0 <= offset < 10:
        raise SplitError("offset must lie in [0, 10)")
    if not 1 <= width <= 5:
        raise SplitError("width must lie in [1, 5]")
    order = popularity.ranking()
    residue = np.arange(len(order)) % 10
    test_res = [(offset + k) % 10 for k in range(width)]
    val_res = [(offset + width + k) % 10 for k in range(width)]
    test = np.sort(order[np.isin(residue, test_res)])
    val = np.sort(order[np.isin(residue, val_res)])
    return test, val


def apply_cold_simulation(split, test_cold, validation_cold):
    """Move all interactions of the cold items out of train.

    Train pairs of test-cold (validation-cold) items become test (validation)
    cold pairs.  A held-out warm pair whose item turned cold moves to the
    matching cold set; if it lands in the opposite section it is dropped.
    Users left without any training item are removed from every evaluation
    set.
    """
    test_cold = np.unique(np.asarray(test_cold, dtype=np.int64))
    validation_cold = np.unique(np.asarray(validation_cold, dtype=np.int64))
    if np.intersect1d(test_cold, validation_cold).size:
        raise SplitError("test-cold and validation-cold sets overlap")
    if not test_cold.size and not validation_cold.size:
        return split
    train = split.train
    in_test = np.isin(train.items, test_cold)
    in_val = np.isin(train.items, validation_cold)
    test_cold_pairs = [train.pairs()[in_test], split.test_cold]
    val_cold_pairs = [train.pairs()[in_val], split.val_cold]
    new_train = train.select(~(in_test | in_val))

    tw = split.test_warm
    tw_to_cold = np.isin(tw[:, 1], test_cold)
    tw_drop = np.isin(tw[:, 1], validation_cold)
    vw = split.val_warm
    vw_to_cold = np.isin(vw[:, 1], validation_cold)
    vw_drop = np.isin(vw[:, 1], test_cold)
    test_cold_pairs.append(tw[tw_to_cold])
    val_cold_pairs.append(vw[vw_to_cold])
    relabeled = int(tw_to_cold.sum() + vw_to_cold.sum())

    out = replace(split, train=new_train,
                  test_warm=tw[~(tw_to_cold | tw_drop)],
                  val_warm=vw[~(vw_to_cold | vw_drop)],
                  test_cold=_pairs(np.concatenate(test_cold_pairs)),
                  val_cold=_pairs(np.concatenate(val_cold_pairs)),
                  test_cold_items=np.union1d(split.test_cold_items, test_cold),
                  val_cold_items=np.union1d(split.val_cold_items, validation_cold),
                  relabeled=split.relabeled + relabeled)

    has_train = new_train.user_degrees() > 0
    sections = ("val_warm", "test_warm", "val_cold", "test_cold")
    evaluated = np.unique(np.concatenate([getattr(out, s)[:, 0] for s in sections]))
    dropped = evaluated[~has_train[evaluated]]
    if dropped.size:
        log.warning("%d user(s) have no training items left and are dropped from evaluation",
                    dropped.size)
        kept = {s: getattr(out, s)[~np.isin(getattr(out, s)[:, 0], dropped)] for s in sections}
        out = replace(out, dropped_users=np.union1d(split.dropped_users, dropped), **kept)
    return out


def make_split(log_, offset=0, seed=0, min_items=8, width=1):
    """Full fold: user holdout followed by popularity-stratified cold items.

    Cold items are ranked by their popularity in the complete log.
    """
    split = user_holdout(log_, min_items=min_items, rng_seed=seed)
    test_cold, val_cold = stratified_cold_selection(build_popularity(log_, "minmax-count"),
                                                    offset=offset, width=width)
    out = apply_cold_simulation(split, test_cold, val_cold)
    out.offset = offset
    if out.relabeled:
        log.info("fold %d: %d held-out warm pair(s) re-labeled as cold", offset, out.relabeled)
    return out


def write_manifest(path, split):
    """Write a fold as ``section,item_or_pair`` records.

    Pairs are written as ``user:item`` (train pairs carry ``:count``), cold
    items as a bare id, fold metadata as ``key=value``.
    """
    meta = {"n_users": split.n_users, "n_items": split.n_items, "offset": split.offset,
            "seed": split.seed, "min_items": split.min_items, "relabeled": split.relabeled}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["section", "item_or_pair"])
        for k, v in meta.items():
            w.writerow(["meta", f"{k}={v}"])
        for u, i, c in zip(split.train.users, split.train.items, split.train.counts):
            w.writerow(["train", f"{u}:{i}:{c}"])
        for section in ("val_warm", "test_warm", "val_cold", "test_cold"):
            for u, i in split.pairs(section):
                w.writerow([section, f"{u}:{i}"])
        for i in split.val_cold_items:
            w.writerow(["val_cold_item", str(i)])
        for i in split.test_cold_items:
            w.writerow(["test_cold_item", str(i)])
        for u in split.dropped_users:
            w.writerow(["dropped_user", str(u)])


def read_manifest(path, user_labels=None, item_labels=None):
    meta = {}
    train = []
    sections = {s: [] for s in ("val_warm", "test_warm", "val_cold", "test_cold")}
    items = {"val_cold_item": [], "test_cold_item": [], "dropped_user": []}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["section", "item_or_pair"]:
            raise SplitError(f"{path}: not a split manifest")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise SplitError(f"{path}: line {lineno}: malformed record")
            section, value = row
            try:
                if section == "meta":
                    k, v = value.split("=", 1)
                    meta[k] = int(v)
                elif section == "train":
                    train.append([int(x) for x in value.split(":")])
                elif section in sections:
                    sections[section].append([int(x) for x in value.split(":")])
                elif section in items:
                    items[section].append(int(value))
                else:
                    raise ValueError(section)
            except ValueError:
                raise SplitError(f"{path}: line {lineno}: bad record {row!r}") from None
    train = np.array(train, dtype=np.int64).reshape(-1, 3)
    tlog = InteractionLog(train[:, 0], train[:, 1], train[:, 2], meta["n_users"], meta["n_items"],
                          user_labels, item_labels)
    return SplitBundle(train=tlog,
                       **{s: _pairs(v) for s, v in sections.items()},
                       val_cold_items=np.array(items["val_cold_item"], dtype=np.int64),
                       test_cold_items=np.array(items["test_cold_item"], dtype=np.int64),
                       dropped_users=np.array(items["dropped_user"], dtype=np.int64),
                       offset=meta["offset"], seed=meta["seed"],
                       min_items=meta["min_items"], relabeled=meta["relabeled"])
