"""Interaction log, item content catalog and popularity scores.

Users and items are addressed by dense integer indices ``0..n-1``.  Raw
identifiers read from disk are kept alongside as string labels so results
can be written back in the original id space.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

POPULARITY_MODES = ("minmax-count", "minmax-logcount", "constant-half")


def _sorted_labels(labels):
    labels = set(labels)
    try:
        return sorted(labels, key=lambda s: (int(s), s))
    except ValueError:
        return sorted(labels)


class InteractionLog:
    """Set of distinct (user, item) pairs with their raw multiplicities.

    Pairs are stored sorted by (user, item).  Construction always goes
    through :meth:`from_pairs`, which collapses duplicates, so two logs built
    from permutations of the same rows are identical.
    """

    def __init__(self, users, items, counts, n_users, n_items,
                 user_labels=None, item_labels=None):
        self.users = users
        self.items = items
        self.counts = counts
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.user_labels = (tuple(user_labels) if user_labels is not None
                            else tuple(str(i) for i in range(n_users)))
        self.item_labels = (tuple(item_labels) if item_labels is not None
                            else tuple(str(j) for j in range(n_items)))

    @classmethod
    def from_pairs(cls, users, items, n_users, n_items, counts=None,
                   user_labels=None, item_labels=None):
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        if users.shape != items.shape:
            raise DataError("users and items must have equal length")
        if counts is None:
            counts = np.ones(len(users), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64).ravel()
        if len(users) and (users.min() < 0 or users.max() >= n_users):
            raise DataError("user index out of range")
        if len(items) and (items.min() < 0 or items.max() >= n_items):
            raise DataError("item index out of range")
        codes = users * n_items + items
        uniq, inverse = np.unique(codes, return_inverse=True)
        summed = np.bincount(inverse, weights=counts, minlength=len(uniq))
        return cls(uniq // n_items, uniq % n_items, summed.astype(np.int64),
                   n_users, n_items, user_labels, item_labels)

    def __len__(self):
        return len(self.users)

    def __eq__(self, other):
        if not isinstance(other, InteractionLog):
            return NotImplemented
        return (self.n_users == other.n_users and self.n_items == other.n_items
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.counts, other.counts)
                and self.user_labels == other.user_labels
                and self.item_labels == other.item_labels)

    def __repr__(self):
        return (f"InteractionLog(pairs={len(self)}, n_users={self.n_users}, "
                f"n_items={self.n_items})")

    @property
    def codes(self):
        """Pair codes ``user * n_items + item`` (sorted, unique)."""
        return self.users * self.n_items + self.items

    def pairs(self):
        return np.column_stack([self.users, self.items])

    def item_counts(self):
        """Raw consumption count per item (duplicate rows included)."""
        return np.bincount(self.items, weights=self.counts,
                           minlength=self.n_items).astype(np.int64)

    def user_degrees(self):
        """Number of distinct items per user."""
        return np.bincount(self.users, minlength=self.n_users)

    def items_by_user(self):
        """List of sorted item arrays, one per user."""
        bounds = np.searchsorted(self.users, np.arange(self.n_users + 1))
        return [self.items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def select(self, mask):
        """Sub-log of the pairs where ``mask`` is true; id space unchanged."""
        mask = np.asarray(mask, dtype=bool)
        return InteractionLog(self.users[mask], self.items[mask], self.counts[mask],
                              self.n_users, self.n_items,
                              self.user_labels, self.item_labels)

    def contains(self, users, items):
        """Vectorized membership test for (user, item) pairs."""
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        codes = self.codes
        pos = np.searchsorted(codes, q)
        pos = np.minimum(pos, max(len(codes) - 1, 0))
        if not len(codes):
            return np.zeros(q.shape, dtype=bool)
        return codes[pos] == q


@dataclass(frozen=True)
class ContentBundle:
    """Raw content of one item: a tag set, free text and numeric features."""
    tags: frozenset = field(default_factory=frozenset)
    text: str = ""
    numeric: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "numeric", tuple(float(x) for x in self.numeric))

    def is_empty(self):
        return not self.tags and not self.text.strip() and not self.numeric


@dataclass
class PopularityTable:
    scores: np.ndarray
    counts: np.ndarray
    mode: str = "constant-half"

    def __len__(self):
        return len(self.scores)

    def ranking(self):
        """Items ordered most popular first; ties by ascending item id."""
        ids = np.arange(len(self.counts))
        return np.lexsort((ids, -self.counts))


def ingest_interactions(path, rating_threshold=3.5):
    """Read an interactions CSV into an :class:`InteractionLog`.

    The header must name ``user_id`` and ``item_id``; ``rating`` and
    ``timestamp`` are optional.  When a rating column is present only rows
    with ``rating >= rating_threshold`` are kept (pass ``None`` to keep all).
    Duplicate pairs collapse into one pair whose count is the number of rows.
    """
    rows_u, rows_i = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if "user_id" not in header or "item_id" not in header:
            raise DataError("header must contain user_id and item_id", line=1)
        iu, ii = header.index("user_id"), header.index("item_id")
        ir = header.index("rating") if "rating" in header else None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            u, i = row[iu].strip(), row[ii].strip()
            if not u or not i:
                raise DataError("empty user_id or item_id", line=lineno)
            if ir is not None:
                try:
                    rating = float(row[ir])
                except ValueError:
                    raise DataError(f"bad rating {row[ir]!r}", line=lineno) from None
                if not math.isfinite(rating):
                    raise DataError(f"bad rating {row[ir]!r}", line=lineno)
                if rating_threshold is not None and rating < rating_threshold:
                    continue
            rows_u.append(u)
            rows_i.append(i)
    if not rows_u:
        raise DataError(f"{path}: no interactions")
    user_labels = _sorted_labels(rows_u)
    item_labels = _sorted_labels(rows_i)
    umap = {lab: k for k, lab in enumerate(user_labels)}
    imap = {lab: k for k, lab in enumerate(item_labels)}
    return InteractionLog.from_pairs([umap[u] for u in rows_u], [imap[i] for i in rows_i],
                                     len(user_labels), len(item_labels),
                                     user_labels=user_labels, item_labels=item_labels)


def _split_field(cell):
    return [p.strip() for p in cell.split("|") if p.strip()]


def ingest_content(path):
    """Read a content CSV into ``{raw item id: ContentBundle}``."""
    content = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if "item_id" not in header:
            raise DataError("header must contain item_id", line=1)
        col = {name: header.index(name) for name in ("item_id", "tags", "text", "numeric")
               if name in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            item = row[col["item_id"]].strip()
            if not item:
                raise DataError("empty item_id", line=lineno)
            if item in content:
                raise DataError(f"duplicate content row for item {item!r}", line=lineno)
            tags = _split_field(row[col["tags"]]) if "tags" in col else []
            text = row[col["text"]] if "text" in col else ""
            numeric = []
            if "numeric" in col:
                for tok in _split_field(row[col["numeric"]]):
                    try:
                        numeric.append(float(tok))
                    except ValueError:
                        raise DataError(f"bad numeric value {tok!r}", line=lineno) from None
            bundle = ContentBundle(frozenset(tags), text, tuple(numeric))
            if bundle.is_empty():
                raise DataError(f"item {item!r} has no content", line=lineno)
            content[item] = bundle
    if not content:
        raise DataError(f"{path}: no content rows")
    return content


def build_catalog(log, content):
    """Align raw-id keyed content with the log's dense item ids.

    Raises :class:`DataError` when an item of the log has no content row.
    Content rows for items absent from the log are ignored.
    """
    missing = [lab for lab in log.item_labels if lab not in content]
    if missing:
        preview = ", ".join(missing[:5])
        raise DataError(f"{len(missing)} item(s) without content: {preview}")
    return [content[lab] for lab in log.item_labels]


def build_popularity(log_or_counts, mode="constant-half"):
    """Normalized per-item popularity in [0, 1].

    ``minmax-count`` and ``minmax-logcount`` min-max normalize the raw count
    (or ``log1p`` of it); ``constant-half`` gives every item 0.5.  When all
    counts are equal the min-max modes also return 0.5 everywhere.
    """
    if mode not in POPULARITY_MODES:
        raise ValueError(f"unknown popularity mode {mode!r}")
    if isinstance(log_or_counts, InteractionLog):
        if not len(log_or_counts):
            raise DataError("cannot build popularity from an empty log")
        counts = log_or_counts.item_counts()
    else:
        counts = np.asarray(log_or_counts, dtype=np.int64)
    scores = np.full(len(counts), 0.5)
    if mode != "constant-half" and len(counts):
        raw = counts.astype(float)
        if mode == "minmax-logcount":
            raw = np.log1p(raw)
        lo, hi = raw.min(), raw.max()
        if hi > lo:
            scores = (raw - lo) / (hi - lo)
    return PopularityTable(scores, counts, mode)


def write_interactions(path, log):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id"])
        for u, i, c in zip(log.users, log.items, log.counts):
            for _ in range(int(c)):
                w.writerow([log.user_labels[u], log.item_labels[i]])


def write_content(path, item_labels, catalog):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "tags", "text", "numeric"])
        for lab, b in zip(item_labels, catalog):
            w.writerow([lab, "|".join(sorted(b.tags)), b.text,
                        "|".join(repr(x) for x in b.numeric)])
