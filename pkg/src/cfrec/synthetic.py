"""Seeded MovieLens-format ratings for desk-scale experiments.

Ratings come from a low-rank taste model plus item quality and Gaussian
noise, rounded and clipped to 1..5.  Items are sampled with popularity skew
so co-rating counts are informative.
"""

from __future__ import annotations

import numpy as np

from .data import Rating


def synthetic_ratings(
    n_users: int = 60,
    n_items: int = 250,
    min_ratings: int = 35,
    max_ratings: int = 60,
    rank: int = 4,
    noise: float = 0.8,
    shift: float = -0.4,
    seed: int = 0,
) -> list[Rating]:
    rng = np.random.default_rng(seed)
    taste = rng.normal(size=(n_users, rank))
    traits = rng.normal(size=(n_items, rank)) / np.sqrt(rank)
    quality = rng.normal(0.0, 0.7, n_items)
    popularity = np.exp(quality + rng.normal(0.0, 0.8, n_items))
    popularity /= popularity.sum()

    ratings = []
    ts = 880_000_000
    for u in range(n_users):
        m = int(rng.integers(min_ratings, max_ratings + 1))
        items = rng.choice(n_items, size=m, replace=False, p=popularity)
        raw = 3.0 + shift + quality[items] + traits[items] @ taste[u] + rng.normal(0.0, noise, m)
        values = np.clip(np.rint(raw), 1, 5).astype(int)
        for i, v in zip(items, values):
            ts += int(rng.integers(1, 500))
            ratings.append(Rating(u + 1, int(i) + 1, int(v), ts))
    return ratings


def write_ratings(ratings, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in ratings:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.value}\t{r.timestamp}\n")


DESK = dict(n_users=62, n_items=215, min_ratings=24, max_ratings=32, shift=-0.7)


def desk_ratings(seed: int = 0) -> list[Rating]:
    """The desk-scale corpus used by the demos and acceptance run (53 users and 203 items after pruning)."""
    return synthetic_ratings(seed=seed, **DESK)


ORACLE = dict(n_users=45, n_items=60, min_ratings=12, max_ratings=17, shift=-0.5)


def oracle_ratings(seed: int = 3) -> list[Rating]:
    """A corpus small enough for exhaustive search: prune it at 3/3 and nearly every profile is at most 12."""
    return synthetic_ratings(seed=seed, **ORACLE)
