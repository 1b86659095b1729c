"""Two small differentiable recommenders behind one gradient/Hessian interface.

``pointwise``
    Generalized matrix factorization with a linear head,
    ``y(u, i) = h . (p_u * q_i) + b``, trained with binary cross-entropy on
    pointwise labels.

``attention``
    A single attention layer over the user's liked items,
    ``y(u, i) = q_i . (p_u + sum_j alpha_j q_j)`` with
    ``alpha = softmax_j(a . gelu(W (q_j * q_i)))``, trained with the smooth
    pairwise loss ``softplus(-(y(u, i+) - y(u, i-)))`` on triples.

Both losses carry ``l2_reg`` times the squared norms of the parameters a point
touches, so the empirical risk is a plain mean of per-point losses.
All derivatives come from jax in float64.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import minimize

from .data import PAIRWISE, POINTWISE, Dataset
from .errors import (
    ContractError,
    DivergenceError,
    ParseError,
    UnknownIdError,
    UnsupportedOperationError,
)

jax.config.update("jax_enable_x64", True)

log = logging.getLogger(__name__)

MODEL_SCHEMA = "cfrec.model/1"
MODEL_KINDS = {"pointwise": POINTWISE, "attention": PAIRWISE}
HEADS = {"pointwise": ("h", "b"), "attention": ("W", "a")}


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "pointwise"
    d: int = 8
    learning_rate: float = 0.5
    epochs: int = 3000
    l2_reg: float = 0.01
    seed: int = 0
    init_std: float = 0.1
    optimizer: str = "lbfgs"
    tol: float = 1e-9

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ContractError(f"unknown model kind {self.model_kind!r}")
        if self.d < 1:
            raise ContractError("d must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.l2_reg < 0:
            raise ContractError("l2_reg must be non-negative")
        if self.optimizer not in ("lbfgs", "gd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# settings that keep refits stable on the desk corpus
KIND_DEFAULTS = {
    "pointwise": {"d": 2, "l2_reg": 0.02},
    "attention": {"d": 6, "l2_reg": 0.01},
}


def default_config(model_kind: str = "pointwise", **overrides) -> TrainConfig:
    """``TrainConfig`` with the per-kind dimension and weight decay, then ``overrides``."""
    if model_kind not in MODEL_KINDS:
        raise ContractError(f"unknown model kind {model_kind!r}")
    return TrainConfig(model_kind=model_kind, **{**KIND_DEFAULTS[model_kind], **overrides})


# ---------------------------------------------------------------------------
# scoring and per-point losses (pure jax)


def _gmf_scores(params, u, i):
    return jnp.sum(params["h"] * params["P"][u] * params["Q"][i], axis=-1) + params["b"]


def _attention_logits(params, q_target, hist):
    x = hist * q_target[..., None, :]
    return jax.nn.gelu(x @ params["W"].T, approximate=False) @ params["a"]


def _masked_softmax(e, mask):
    e = jnp.where(mask, e, -1e30)
    e = e - jnp.max(e, axis=-1, keepdims=True)
    ex = jnp.exp(e) * mask
    s = jnp.sum(ex, axis=-1, keepdims=True)
    return ex / jnp.where(s > 0, s, 1.0)


def _attention_parts(params, u, i, pool, mask):
    hist = params["Q"][pool]
    q_t = params["Q"][i]
    alpha = _masked_softmax(_attention_logits(params, q_t, hist), mask)
    context = params["P"][u] + jnp.sum(alpha[..., None] * hist, axis=-2)
    return jnp.sum(q_t * context, axis=-1), alpha


def _attention_scores(params, u, i, pool, mask):
    return _attention_parts(params, u, i, pool, mask)[0]


def _sq(x):
    return jnp.sum(x * x, axis=-1)


def _pointwise_losses(params, batch, l2):
    y = batch["labels"]
    s = _gmf_scores(params, batch["users"], batch["items"])
    reg = _sq(params["P"][batch["users"]]) + _sq(params["Q"][batch["items"]]) + _sq(params["h"])
    return jax.nn.softplus(s) - y * s + l2 * reg


def _pairwise_losses(params, batch, l2):
    u, pool, mask = batch["users"], batch["pool"], batch["mask"]
    s_pos = _attention_scores(params, u, batch["items"], pool, mask)
    s_neg = _attention_scores(params, u, batch["negatives"], pool, mask)
    reg = (
        _sq(params["P"][u]) + _sq(params["Q"][batch["items"]]) + _sq(params["Q"][batch["negatives"]])
        + jnp.sum(params["W"] ** 2) + _sq(params["a"])
    )
    return jax.nn.softplus(-(s_pos - s_neg)) + l2 * reg


def _point_losses(kind, params, batch, l2):
    return _pointwise_losses(params, batch, l2) if kind == "pointwise" else _pairwise_losses(params, batch, l2)


def _risk(kind, params, batch, l2, n):
    return jnp.sum(batch["weights"] * _point_losses(kind, params, batch, l2)) / n


def make_batch(dataset: Dataset, index=None, pad_to=None) -> dict:
    """Arrays for a subset of points (all points by default), optionally zero-padded."""
    if index is None:
        index = np.arange(dataset.n_total)
    index = np.asarray(index, dtype=np.int64)
    m = len(index)
    size = m if pad_to is None else pad_to
    take = np.zeros(size, dtype=np.int64)
    take[:m] = index
    weights = np.zeros(size)
    weights[:m] = dataset.active[index]
    batch = {"users": dataset.users[take], "items": dataset.items[take], "weights": weights}
    if dataset.kind == POINTWISE:
        batch["labels"] = dataset.labels[take].astype(np.float64)
    else:
        pool, mask = dataset.pools()
        batch["negatives"] = dataset.negatives[take]
        batch["pool"] = pool[batch["users"]]
        batch["mask"] = mask[batch["users"]]
    return batch


# ---------------------------------------------------------------------------
# parameters


def init_params(kind: str, n_users: int, n_items: int, d: int, std: float, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    params = {
        "P": rng.normal(0.0, std, (n_users, d)),
        "Q": rng.normal(0.0, std, (n_items, d)),
    }
    if kind == "pointwise":
        # unit-centred head: a 0.1-scale three-way product starts inside the
        # regularizer's basin around the origin and collapses there
        params["h"] = 1.0 + rng.normal(0.0, std, d)
        params["b"] = np.zeros(())
    else:
        params["W"] = rng.normal(0.0, std, (d, d))
        params["a"] = rng.normal(0.0, std, d)
    return params


def _names(kind):
    return ("P", "Q") + HEADS[kind]


def _row_scales(dataset: Dataset, kind: str, d: int) -> dict:
    """sqrt(n / count) per embedding row; rows of rare users/items get larger steps."""
    act = dataset.active
    n = max(dataset.n, 1)
    cu = np.bincount(dataset.users[act], minlength=dataset.n_users).astype(float)
    targets = [dataset.items[act]]
    if dataset.negatives is not None:
        targets.append(dataset.negatives[act])
    ci = np.bincount(np.concatenate(targets), minlength=dataset.n_items).astype(float)
    out = {
        "P": np.sqrt(n / np.maximum(cu, 1.0))[:, None],
        "Q": np.sqrt(n / np.maximum(ci, 1.0))[:, None],
    }
    for name in HEADS[kind]:
        out[name] = np.ones(())
    return out


def _flatten(params, names):
    return np.concatenate([np.ravel(params[k]) for k in names])


def _unflatten(x, shapes, names):
    out, o = {}, 0
    for k in names:
        size = int(np.prod(shapes[k], dtype=int))
        out[k] = x[o : o + size].reshape(shapes[k])
        o += size
    return out


@lru_cache(maxsize=None)
def _scaled_objective(kind, shapes_key):
    shapes = dict(shapes_key)
    names = _names(kind)

    def f(x, scales, batch, l2, n):
        p = _unflatten(x, shapes, names)
        p = {k: p[k] * scales[k] for k in names}
        return _risk(kind, p, batch, l2, n)

    return jax.jit(jax.value_and_grad(f))


@lru_cache(maxsize=None)
def _gd_loop(kind, shapes_key, epochs):
    shapes = dict(shapes_key)
    names = _names(kind)

    def f(x, scales, batch, l2, n):
        p = _unflatten(x, shapes, names)
        return _risk(kind, p | {k: p[k] * scales[k] for k in names}, batch, l2, n)

    vg = jax.value_and_grad(f)

    def run(x, scales, batch, l2, n, lr):
        def step(x, _):
            v, g = vg(x, scales, batch, l2, n)
            return x - lr * g, v

        return jax.lax.scan(step, x, None, length=epochs)

    return jax.jit(run)


@lru_cache(maxsize=None)
def _risk_grad(kind):
    return jax.jit(jax.value_and_grad(lambda p, b, l2, n: _risk(kind, p, b, l2, n)))


# ---------------------------------------------------------------------------
# trained model


class TrainedModel:
    """Parameters fitted to ``dataset`` plus the loss that defines them.

    Treat instances as immutable: every query is read-only.
    """

    def __init__(self, params: dict, config: TrainConfig, dataset: Dataset,
                 loss_history=(), grad_norm=float("nan")):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.config = config
        self.dataset = dataset
        self.loss_history = list(loss_history)
        self.grad_norm = grad_norm
        self._batch = None

    @property
    def kind(self) -> str:
        return self.config.model_kind

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float("nan")

    @property
    def batch(self) -> dict:
        if self._batch is None:
            self._batch = make_batch(self.dataset)
        return self._batch

    def _check_user(self, u):
        self.dataset.check_user(u)

    def _check_items(self, items):
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        bad = (items < 0) | (items >= self.dataset.n_items)
        if bad.any():
            raise UnknownIdError(f"unknown item {int(items[bad][0])}")
        return items

    def pool_of(self, u, removed=()) -> tuple[int, ...]:
        removed = set(removed)
        return tuple(j for j in self.dataset.profile(u) if j not in removed)

    def scores(self, u: int, items=None, params=None, pool=None) -> np.ndarray:
        """Scores of ``u`` for ``items`` (all items by default).

        ``params`` overrides the fitted parameters and ``pool`` the attention
        history (ignored by the pointwise model).
        """
        self._check_user(u)
        items = np.arange(self.dataset.n_items) if items is None else self._check_items(items)
        p = self.params if params is None else params
        if self.kind == "pointwise":
            return np.asarray(_user_scores_gmf(p["P"][u], p["Q"][items], p["h"], p["b"]))
        if pool is None:
            pool = self.dataset.profile(u)
        return np.asarray(_user_scores_attention(p, u, items, *_pool_row(pool, self.dataset.pool_width)))

    def score(self, u: int, i: int) -> float:
        return float(self.scores(u, [i])[0])

    def attention_weights(self, u: int, i: int, pool=None) -> np.ndarray:
        if self.kind != "attention":
            raise UnsupportedOperationError("attention weights exist only for the attention model")
        self._check_user(u)
        self._check_items([i])
        pool = self.dataset.profile(u) if pool is None else tuple(pool)
        row, mask = _pool_row(pool, self.dataset.pool_width)
        alpha = np.asarray(_user_alpha(self.params, u, i, row, mask))
        return alpha[: len(pool)]

    def score_without(self, u: int, i: int, removed=()) -> float:
        """Score with ``removed`` dropped from the attention pool, parameters fixed."""
        if self.kind != "attention":
            raise UnsupportedOperationError("score_without needs the attention model")
        profile = self.dataset.profile(u)
        removed = set(removed)
        if not removed <= set(profile):
            raise ContractError("removed items must belong to the user's profile")
        if len(removed) == len(profile):
            raise ContractError("cannot remove the entire profile")
        return float(self.scores(u, [i], pool=self.pool_of(u, removed))[0])

    def topk(self, u: int, k: int, exclude=None, params=None, pool=None) -> list[int]:
        """Top ``k`` items by score, descending, ties to the smaller id.

        Items the user rated in the source data are excluded by default.
        """
        if k < 1:
            raise ContractError("k must be >= 1")
        self._check_user(u)
        s = self.scores(u, params=params, pool=pool)
        return rank_items(s, self.dataset.seen[u] if exclude is None else exclude)[:k]

    def loss(self, z: int) -> float:
        b = make_batch(self.dataset, [z])
        return float(_point_losses(self.kind, self.params, b, self.config.l2_reg)[0])

    def risk(self, params=None) -> float:
        v, _ = _risk_grad(self.kind)(self.params if params is None else params,
                                     self.batch, self.config.l2_reg, float(self.n))
        return float(v)

    def risk_grad(self, params=None) -> dict:
        _, g = _risk_grad(self.kind)(self.params if params is None else params,
                                     self.batch, self.config.l2_reg, float(self.n))
        return {k: np.asarray(v) for k, v in g.items()}

    def grad_loss(self, z: int, dense: bool = False):
        """Gradient of the loss of point ``z``.

        Returns a dict keyed by parameter block -- ``("P", u)``, ``("Q", i)``,
        ``("h",)`` and so on -- holding only the blocks ``z`` touches, or the
        full dense gradient with ``dense=True``.
        """
        b = make_batch(self.dataset, [z])
        g = _point_grad(self.kind)(self.params, b, self.config.l2_reg)
        g = {k: np.asarray(v) for k, v in g.items()}
        if dense:
            return g
        return sparse_blocks(g, self.touched_blocks(z), self.kind)

    def touched_blocks(self, z: int) -> list[tuple]:
        u, i, j = self.dataset.point(z)
        blocks = [("P", u), ("Q", i)]
        if self.kind == "attention":
            blocks.append(("Q", j))
            blocks += [("Q", k) for k in self.dataset.profile(u) if k not in (i, j)]
        return blocks + [(h,) for h in HEADS[self.kind]]

    def hessian_block(self, blocks: Sequence[tuple]) -> np.ndarray:
        """Restriction of the risk Hessian to ``blocks`` (see :func:`hessian_block`)."""
        return hessian_block(self, blocks)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    # checkpoints -----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "config": asdict(self.config),
            "dataset_fingerprint": dataset_fingerprint(self.dataset),
            "user_ids": self.dataset.user_ids.tolist(),
            "item_ids": self.dataset.item_ids.tolist(),
            "grad_norm": self.grad_norm,
            "final_loss": self.final_loss,
            "params": {k: {"shape": list(v.shape), "data": np.ravel(v).tolist()}
                       for k, v in sorted(self.params.items())},
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path, dataset: Dataset) -> "TrainedModel":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not a checkpoint ({exc})") from None
        if doc.get("schema") != MODEL_SCHEMA:
            raise ParseError(f"{path}: unsupported schema {doc.get('schema')!r}")
        if doc["dataset_fingerprint"] != dataset_fingerprint(dataset):
            raise ContractError("checkpoint was trained on a different dataset")
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        m = cls(params, TrainConfig(**doc["config"]), dataset, grad_norm=doc["grad_norm"])
        m.loss_history = [doc["final_loss"]]
        return m


def dataset_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256(dataset.kind.encode())
    for a in (dataset.users, dataset.items, dataset.labels, dataset.negatives, dataset.active,
              dataset.user_ids, dataset.item_ids):
        if a is not None:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def rank_items(scores, exclude=()) -> list[int]:
    scores = np.asarray(scores)
    ids = np.arange(len(scores))
    keep = np.ones(len(scores), dtype=bool)
    keep[list(exclude)] = False
    ids = ids[keep]
    order = np.lexsort((ids, -scores[ids]))
    return [int(x) for x in ids[order]]


def sparse_blocks(dense: dict, blocks, kind) -> dict:
    out = {}
    for key in blocks:
        if len(key) == 2:
            out[key] = dense[key[0]][key[1]].copy()
        else:
            out[key] = np.atleast_1d(dense[key[0]]).ravel().copy()
    return out


def _pool_row(pool, width):
    pool = tuple(pool)
    if len(pool) > width:
        width = len(pool)
    row = np.zeros(width, dtype=np.int64)
    mask = np.zeros(width, dtype=bool)
    row[: len(pool)] = pool
    mask[: len(pool)] = True
    return row, mask


@jax.jit
def _user_scores_gmf(pu, q, h, b):
    return q @ (h * pu) + b


@jax.jit
def _user_scores_attention(params, u, items, row, mask):
    m = items.shape[0]
    return _attention_scores(
        params, jnp.full(m, u), items,
        jnp.broadcast_to(row, (m,) + row.shape), jnp.broadcast_to(mask, (m,) + mask.shape),
    )


@jax.jit
def _user_alpha(params, u, i, row, mask):
    return _attention_parts(params, u, i, row, mask)[1]


@lru_cache(maxsize=None)
def _point_grad(kind):
    return jax.jit(jax.grad(lambda p, b, l2: _point_losses(kind, p, b, l2)[0]))


# ---------------------------------------------------------------------------
# restricted second derivatives


def _split_blocks(blocks, kind):
    blocks = [tuple(b) for b in blocks]
    if not blocks:
        raise ContractError("coordinate subset must be non-empty")
    if len(set(blocks)) != len(blocks):
        raise ContractError("duplicate block in coordinate subset")
    rows_p = [b[1] for b in blocks if b[0] == "P"]
    rows_q = [b[1] for b in blocks if b[0] == "Q"]
    heads = tuple(b[0] for b in blocks if len(b) == 1)
    for h in heads:
        if h not in HEADS[kind]:
            raise ContractError(f"no head parameter {h!r} in the {kind} model")
    for b in blocks:
        if len(b) == 2 and b[0] not in ("P", "Q"):
            raise ContractError(f"bad block {b!r}")
    return blocks, rows_p, rows_q, heads


def _apply_blocks(params, delta, rows_p, rows_q, heads, d):
    out = dict(params)
    o = 0
    if rows_p.shape[0]:
        k = rows_p.shape[0] * d
        out["P"] = params["P"].at[rows_p].add(delta[o : o + k].reshape(-1, d))
        o += k
    if rows_q.shape[0]:
        k = rows_q.shape[0] * d
        out["Q"] = params["Q"].at[rows_q].add(delta[o : o + k].reshape(-1, d))
        o += k
    for h in heads:
        size = int(np.prod(params[h].shape, dtype=int))
        out[h] = params[h] + delta[o : o + size].reshape(params[h].shape)
        o += size
    return out


@lru_cache(maxsize=None)
def _restricted_hessian(kind, heads):
    def f(delta, params, rows_p, rows_q, batch, l2, n):
        d = params["P"].shape[1]
        return _risk(kind, _apply_blocks(params, delta, rows_p, rows_q, heads, d), batch, l2, n)

    return jax.jit(jax.hessian(f))


@lru_cache(maxsize=None)
def _restricted_point_grad(kind, heads):
    def f(delta, params, rows_p, rows_q, batch, l2):
        d = params["P"].shape[1]
        p = _apply_blocks(params, delta, rows_p, rows_q, heads, d)
        return jnp.sum(batch["weights"] * _point_losses(kind, p, batch, l2))

    return jax.jit(jax.grad(f))


def _internal_order(blocks, params, d):
    """Permutation from internal (P rows, Q rows, heads) layout back to ``blocks`` order."""
    spans, o = {}, 0
    for key in [b for b in blocks if b[0] == "P" and len(b) == 2] + \
               [b for b in blocks if b[0] == "Q" and len(b) == 2]:
        spans[key] = (o, o + d)
        o += d
    for key in [b for b in blocks if len(b) == 1]:
        size = int(np.prod(params[key[0]].shape, dtype=int))
        spans[key] = (o, o + size)
        o += size
    return np.concatenate([np.arange(*spans[b]) for b in blocks]), o


def touching_points(model: TrainedModel, blocks) -> np.ndarray:
    """Indices of active points whose loss depends on any coordinate in ``blocks``."""
    ds = model.dataset
    blocks, rows_p, rows_q, heads = _split_blocks(blocks, model.kind)
    if heads:
        return np.flatnonzero(ds.active)
    hit = np.isin(ds.users, rows_p) | np.isin(ds.items, rows_q)
    if ds.kind == PAIRWISE:
        hit |= np.isin(ds.negatives, rows_q)
        pool, mask = ds.pools()
        in_pool = (np.isin(pool, rows_q) & mask).any(axis=1)
        hit |= in_pool[ds.users]
    return np.flatnonzero(hit & ds.active)


def _bucket(m):
    size = 64
    while size < m:
        size *= 2
    return size


def hessian_block(model: TrainedModel, blocks: Sequence[tuple]) -> np.ndarray:
    """Dense ``|S| x |S|`` block of ``(1/n) sum_z d^2 L(z) / dS^2`` at the fitted parameters.

    ``blocks`` lists parameter blocks such as ``("P", u)`` or ``("Q", i)``
    (``d`` coordinates each) and head names such as ``("h",)``.  Only points
    touching the subset are summed; the rest contribute exactly zero.
    """
    blocks, rows_p, rows_q, heads = _split_blocks(blocks, model.kind)
    perm, size = _internal_order(blocks, model.params, model.config.d)
    idx = touching_points(model, blocks)
    if len(idx) == 0:
        return np.zeros((size, size))
    batch = make_batch(model.dataset, idx, pad_to=_bucket(len(idx)))
    fn = _restricted_hessian(model.kind, heads)
    h = np.asarray(fn(jnp.zeros(size), model.params, np.asarray(rows_p, dtype=np.int64),
                      np.asarray(rows_q, dtype=np.int64), batch, model.config.l2_reg, float(model.n)))
    h = h[np.ix_(perm, perm)]
    return (h + h.T) / 2.0


def restricted_grad(model: TrainedModel, z: int, blocks: Sequence[tuple]) -> np.ndarray:
    """Gradient of the loss of point ``z`` with respect to ``blocks``, flattened in block order."""
    blocks, rows_p, rows_q, heads = _split_blocks(blocks, model.kind)
    perm, size = _internal_order(blocks, model.params, model.config.d)
    batch = make_batch(model.dataset, [z])
    batch["weights"] = np.ones(1)
    fn = _restricted_point_grad(model.kind, heads)
    g = np.asarray(fn(jnp.zeros(size), model.params, np.asarray(rows_p, dtype=np.int64),
                      np.asarray(rows_q, dtype=np.int64), batch, model.config.l2_reg))
    return g[perm]


# ---------------------------------------------------------------------------
# training


def train(dataset: Dataset, config: TrainConfig, init: dict | None = None) -> TrainedModel:
    """Fit parameters to ``dataset``; a pure function of ``(dataset, config)``.

    ``lbfgs`` minimizes the full-batch risk with scipy's L-BFGS in row-scaled
    coordinates until the scaled gradient max-norm drops below ``tol`` or
    ``epochs`` iterations pass.  ``gd`` runs ``epochs`` fixed steps of size
    ``learning_rate`` in the same coordinates.
    """
    if MODEL_KINDS[config.model_kind] != dataset.kind:
        raise ContractError(
            f"model kind {config.model_kind!r} needs a {MODEL_KINDS[config.model_kind]} dataset, "
            f"got {dataset.kind}"
        )
    kind = config.model_kind
    names = _names(kind)
    params = init or init_params(kind, dataset.n_users, dataset.n_items, config.d,
                                 config.init_std, config.seed)
    shapes = {k: np.shape(params[k]) for k in names}
    shapes_key = tuple(sorted(shapes.items()))
    scales = _row_scales(dataset, kind, config.d)
    batch = make_batch(dataset)
    n = float(dataset.n)
    x0 = _flatten({k: params[k] / scales[k] for k in names}, names)

    history = []
    if config.optimizer == "gd":
        run = _gd_loop(kind, shapes_key, config.epochs)
        x, trace = run(x0, scales, batch, config.l2_reg, n, config.learning_rate)
        trace = np.asarray(trace)
        bad = np.flatnonzero(~np.isfinite(trace))
        if len(bad):
            raise DivergenceError(int(bad[0]), float(trace[bad[0]]))
        history = trace.tolist()
        x = np.asarray(x)
    else:
        vg = _scaled_objective(kind, shapes_key)
        state = {"epoch": 0}

        def fun(x):
            v, g = vg(x, scales, batch, config.l2_reg, n)
            v = float(v)
            if not np.isfinite(v):
                raise DivergenceError(state["epoch"], v)
            return v, np.asarray(g)

        def callback(intermediate_result):
            state["epoch"] += 1
            history.append(float(intermediate_result.fun))

        res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=callback,
                       options={"maxiter": config.epochs, "gtol": config.tol, "ftol": 0.0,
                                "maxcor": 20})
        x = res.x
    fitted = _unflatten(x, shapes, names)
    fitted = {k: np.asarray(fitted[k] * scales[k]) for k in names}
    if any(not np.all(np.isfinite(v)) for v in fitted.values()):
        raise DivergenceError(len(history), float("nan"))
    model = TrainedModel(fitted, config, dataset)
    value, grad = _risk_grad(kind)(fitted, batch, config.l2_reg, n)
    model.loss_history = history or [float(value)]
    model.grad_norm = float(np.sqrt(sum(float(np.sum(np.asarray(g) ** 2)) for g in grad.values())))
    log.debug("trained %s: loss %.6g, |grad| %.3g after %d epochs",
              kind, float(value), model.grad_norm, len(history))
    return model
