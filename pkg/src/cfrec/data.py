"""Ratings ingestion, binarization, pruning and training-point construction.

Raw MovieLens ``u.data`` lines become :class:`Rating` records, which are
binarized into :class:`Interaction` records and pruned into a densely
re-indexed :class:`InteractionTable`.  From the table two training sets can be
built: one pointwise point per interaction, or one ``(u, i+, i-)`` triple per
positive interaction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, EmptyDatasetError, ParseError, UnknownIdError

DATASET_SCHEMA = "cfrec.dataset/1"

POINTWISE = "pointwise"
PAIRWISE = "pairwise"


@dataclass(frozen=True)
class Rating:
    user_id: int
    item_id: int
    value: int
    timestamp: int


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    positive: bool


def load_ratings(path) -> list[Rating]:
    """Parse a tab-separated ``user item rating timestamp`` file.

    Blank lines are skipped.  Raises :class:`ParseError` naming the 1-based
    line number of the first malformed line, and :class:`EmptyDatasetError`
    when no rating is found.
    """
    ratings = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                user, item, value, ts = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"line {lineno}: non-integer field in {line!r}") from None
            if not 1 <= value <= 5:
                raise ParseError(f"line {lineno}: rating out of range: {value}")
            if user < 0 or item < 0:
                raise ParseError(f"line {lineno}: negative id")
            if (user, item) in seen:
                raise ParseError(f"line {lineno}: duplicate rating for user {user}, item {item}")
            seen.add((user, item))
            ratings.append(Rating(user, item, value, ts))
    if not ratings:
        raise EmptyDatasetError(f"no ratings in {os.fspath(path)}")
    return ratings


def binarize(ratings: Iterable[Rating], threshold: int = 3) -> list[Interaction]:
    if not 1 <= threshold <= 5:
        raise ContractError(f"threshold must be in [1, 5], got {threshold}")
    return [Interaction(r.user_id, r.item_id, r.value >= threshold) for r in ratings]


@dataclass(frozen=True, eq=False)
class InteractionTable:
    """Pruned interactions with dense ids.

    ``user_ids[k]`` / ``item_ids[k]`` hold the original id of dense user/item
    ``k``; rows are sorted by (user, item).
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self):
        return len(self.users)

    def to_interactions(self) -> list[Interaction]:
        """Back to original-id interactions (inverse of the re-indexing)."""
        return [
            Interaction(int(self.user_ids[u]), int(self.item_ids[i]), bool(y))
            for u, i, y in zip(self.users, self.items, self.labels)
        ]


def prune_users(interactions, min_pos: int = 10, min_neg: int = 10) -> InteractionTable:
    """Keep users with at least ``min_pos`` positives and ``min_neg`` negatives.

    Items left without interactions are dropped, and the survivors are
    re-indexed densely in increasing original-id order.
    """
    if min_pos < 0 or min_neg < 0:
        raise ContractError("min_pos and min_neg must be non-negative")
    if isinstance(interactions, InteractionTable):
        interactions = interactions.to_interactions()
    if not interactions:
        raise EmptyDatasetError("no interactions to prune")
    u = np.array([x.user_id for x in interactions], dtype=np.int64)
    i = np.array([x.item_id for x in interactions], dtype=np.int64)
    y = np.array([x.positive for x in interactions], dtype=bool)

    uniq_u, u_idx = np.unique(u, return_inverse=True)
    pos = np.bincount(u_idx, weights=y, minlength=len(uniq_u))
    neg = np.bincount(u_idx, weights=~y, minlength=len(uniq_u))
    keep_users = (pos >= min_pos) & (neg >= min_neg)
    rows = keep_users[u_idx]
    if not rows.any():
        raise EmptyDatasetError(f"no user has >= {min_pos} positives and >= {min_neg} negatives")
    u, i, y = u[rows], i[rows], y[rows]

    user_ids, du = np.unique(u, return_inverse=True)
    item_ids, di = np.unique(i, return_inverse=True)
    order = np.lexsort((di, du))
    return InteractionTable(
        users=du[order].astype(np.int64),
        items=di[order].astype(np.int64),
        labels=y[order],
        user_ids=user_ids.astype(np.int64),
        item_ids=item_ids.astype(np.int64),
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training points bound to a dense user/item vocabulary.

    ``kind`` is ``"pointwise"`` (columns ``users``, ``items``, ``labels``) or
    ``"pairwise"`` (columns ``users``, ``items`` holding i+, ``negatives``
    holding i-).  Removing points flips ``active`` rather than shrinking the
    arrays, so a dataset and all its leave-some-out variants share shapes.
    ``seen[u]`` lists every item ``u`` rated in the source data; it does not
    change when points are removed.
    """

    kind: str
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray | None
    negatives: np.ndarray | None
    user_ids: np.ndarray
    item_ids: np.ndarray
    seen: tuple
    active: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.active is None:
            object.__setattr__(self, "active", np.ones(len(self.users), dtype=bool))
        if len(self.users) == 0:
            raise EmptyDatasetError("dataset has no points")
        if self.kind == PAIRWISE and np.any(self.items == self.negatives):
            raise ContractError("triple with identical positive and negative item")

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n(self) -> int:
        return int(self.active.sum())

    @property
    def n_total(self) -> int:
        return len(self.users)

    def check_user(self, u: int):
        if not 0 <= u < self.n_users:
            raise UnknownIdError(f"unknown user {u}")

    def check_item(self, i: int):
        if not 0 <= i < self.n_items:
            raise UnknownIdError(f"unknown item {i}")

    def _positive_mask(self):
        if self.kind == POINTWISE:
            return self.active & self.labels
        return self.active

    def profiles(self) -> list[tuple[int, ...]]:
        """I_u for every user: positive items of active points, ascending."""
        if "profiles" not in self._cache:
            m = self._positive_mask()
            out = [[] for _ in range(self.n_users)]
            for u, i in zip(self.users[m], self.items[m]):
                out[u].append(int(i))
            self._cache["profiles"] = [tuple(sorted(p)) for p in out]
        return self._cache["profiles"]

    def profile(self, u: int) -> tuple[int, ...]:
        self.check_user(u)
        return self.profiles()[u]

    def point_of(self, u: int, item: int) -> int:
        """Index of the active point encoding user ``u``'s positive action on ``item``."""
        if "point_index" not in self._cache:
            m = self._positive_mask()
            idx = np.flatnonzero(m)
            self._cache["point_index"] = {
                (int(self.users[k]), int(self.items[k])): int(k) for k in idx
            }
        try:
            return self._cache["point_index"][(u, item)]
        except KeyError:
            raise UnknownIdError(f"item {item} is not in the profile of user {u}") from None

    def pools(self, width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Profiles as a padded ``(n_users, width)`` index array plus mask."""
        profiles = self.profiles()
        if width is None:
            width = self.pool_width
        pool = np.zeros((self.n_users, width), dtype=np.int64)
        mask = np.zeros((self.n_users, width), dtype=bool)
        for u, p in enumerate(profiles):
            pool[u, : len(p)] = p
            mask[u, : len(p)] = True
        return pool, mask

    @property
    def pool_width(self) -> int:
        if "pool_width" not in self._cache:
            self._cache["pool_width"] = max(1, max(len(p) for p in self.profiles()))
        return self._cache["pool_width"]

    def without(self, indices: Iterable[int]) -> "Dataset":
        """Copy with the given points deactivated (vocabulary and shapes kept)."""
        active = self.active.copy()
        for k in indices:
            if not active[k]:
                raise ContractError(f"point {k} is not active")
            active[k] = False
        if not active.any():
            raise EmptyDatasetError("removing these points leaves no training data")
        out = Dataset(
            self.kind, self.users, self.items, self.labels, self.negatives,
            self.user_ids, self.item_ids, self.seen, active,
        )
        out._cache["pool_width"] = self.pool_width
        return out

    def point(self, k: int) -> tuple:
        if self.kind == POINTWISE:
            return (int(self.users[k]), int(self.items[k]), int(self.labels[k]))
        return (int(self.users[k]), int(self.items[k]), int(self.negatives[k]))

    def user_index(self, original_id: int) -> int:
        pos = np.searchsorted(self.user_ids, original_id)
        if pos >= len(self.user_ids) or self.user_ids[pos] != original_id:
            raise UnknownIdError(f"unknown user {original_id}")
        return int(pos)

    def save(self, path):
        doc = {
            "schema": DATASET_SCHEMA,
            "kind": self.kind,
            "user_ids": self.user_ids.tolist(),
            "item_ids": self.item_ids.tolist(),
            "users": self.users.tolist(),
            "items": self.items.tolist(),
            "labels": None if self.labels is None else self.labels.astype(int).tolist(),
            "negatives": None if self.negatives is None else self.negatives.tolist(),
            "seen": [list(s) for s in self.seen],
            "active": self.active.astype(int).tolist(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not a dataset artifact ({exc})") from None
        if doc.get("schema") != DATASET_SCHEMA:
            raise ParseError(f"{path}: unsupported schema {doc.get('schema')!r}")
        arr = lambda key, dt: None if doc[key] is None else np.asarray(doc[key], dtype=dt)
        return cls(
            kind=doc["kind"],
            users=arr("users", np.int64),
            items=arr("items", np.int64),
            labels=arr("labels", bool),
            negatives=arr("negatives", np.int64),
            user_ids=arr("user_ids", np.int64),
            item_ids=arr("item_ids", np.int64),
            seen=tuple(tuple(s) for s in doc["seen"]),
            active=arr("active", bool),
        )


def _seen_items(table: InteractionTable) -> tuple:
    seen = [[] for _ in range(table.n_users)]
    for u, i in zip(table.users, table.items):
        seen[u].append(int(i))
    return tuple(tuple(s) for s in seen)


def build_pointwise(table: InteractionTable) -> Dataset:
    if len(table) == 0:
        raise EmptyDatasetError("empty interaction table")
    return Dataset(
        kind=POINTWISE,
        users=table.users.copy(),
        items=table.items.copy(),
        labels=table.labels.copy(),
        negatives=None,
        user_ids=table.user_ids,
        item_ids=table.item_ids,
        seen=_seen_items(table),
    )


def co_rating_counts(table: InteractionTable) -> np.ndarray:
    """``C[i, j]`` = number of users who interacted with both ``i`` and ``j``."""
    b = np.zeros((table.n_users, table.n_items), dtype=np.int64)
    b[table.users, table.items] = 1
    return b.T @ b


def pair_negatives(table: InteractionTable, seed: int = 0) -> Dataset:
    """One ``(u, i+, i-)`` triple per positive interaction.

    ``i-`` is the user's negative item co-rated with ``i+`` by the most users,
    ties going to the smaller item id.  When every candidate has a zero count
    the choice is drawn from a generator seeded with ``seed``.
    """
    counts = co_rating_counts(table)
    rng = np.random.default_rng(seed)
    users, pos, neg = [], [], []
    for u in range(table.n_users):
        rows = table.users == u
        items, labels = table.items[rows], table.labels[rows]
        likes, dislikes = items[labels], np.sort(items[~labels])
        if len(likes) and not len(dislikes):
            raise ContractError(
                f"user {int(table.user_ids[u])} has positives but no negative to pair with"
            )
        for i in likes:
            c = counts[i, dislikes]
            if c.max() > 0:
                j = dislikes[int(np.argmax(c))]  # argmax returns the first, i.e. smallest id
            else:
                j = dislikes[int(rng.integers(len(dislikes)))]
            users.append(u)
            pos.append(int(i))
            neg.append(int(j))
    if not users:
        raise EmptyDatasetError("no positive interactions to pair")
    return Dataset(
        kind=PAIRWISE,
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(pos, dtype=np.int64),
        labels=None,
        negatives=np.asarray(neg, dtype=np.int64),
        user_ids=table.user_ids,
        item_ids=table.item_ids,
        seen=_seen_items(table),
    )


def table_stats(table: InteractionTable) -> dict:
    return {
        "users": table.n_users,
        "items": table.n_items,
        "interactions": len(table),
        "positives": int(table.labels.sum()),
    }


def build_dataset(table: InteractionTable, kind: str, seed: int = 0) -> Dataset:
    if kind == POINTWISE:
        return build_pointwise(table)
    if kind == PAIRWISE:
        return pair_negatives(table, seed)
    raise ContractError(f"unknown dataset kind {kind!r}")


def from_rows(rows: Sequence[tuple], threshold=3, min_pos=10, min_neg=10) -> InteractionTable:
    """Convenience for tests and demos: ``(user, item, value)`` tuples to a pruned table."""
    ratings = [Rating(int(u), int(i), int(v), 0) for u, i, v, *_ in rows]
    return prune_users(binarize(ratings, threshold), min_pos, min_neg)
