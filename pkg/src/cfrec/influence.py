"""Removal influence on scores and score gaps via damped restricted Hessian blocks.

Removing a training point ``z`` moves the fitted parameters by approximately

    delta = (1/n) (H_SS + damping * I)^-1 grad_S L(z)

where ``S`` holds only the embedding rows ``z`` touches (``p_u``, ``q_i`` and,
for triples, ``q_i-``) and ``H_SS`` is the matching block of the mean-loss
Hessian.  Scores after removal come from a forward pass at the shifted
parameters; for the attention model the removed item also leaves the
attention pool.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import ContractError, NumericError
from .model import TrainedModel, hessian_block, restricted_grad, train

log = logging.getLogger(__name__)

DEFAULT_DAMPING = 0.01
DENSE_LIMIT = 512
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DampedHessian:
    blocks: tuple
    matrix: np.ndarray
    damping: float
    n: int
    positive_definite: bool = True

    def solve(self, g: np.ndarray) -> np.ndarray:
        return _solve(self, g)


@dataclass(frozen=True, eq=False)
class ParamDelta:
    """Sparse parameter change keyed by block (``("P", u)``, ``("Q", i)``, ...)."""

    values: dict = field(default_factory=dict)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(v @ v) for v in self.values.values())))

    def __add__(self, other: "ParamDelta") -> "ParamDelta":
        out = {k: v.copy() for k, v in self.values.items()}
        for k, v in other.values.items():
            out[k] = out[k] + v if k in out else v.copy()
        return ParamDelta(out)

    def apply(self, params: dict) -> dict:
        out = dict(params)
        for name in {k[0] for k in self.values}:
            out[name] = params[name].copy()
        for key, v in self.values.items():
            if len(key) == 2:
                out[key[0]][key[1]] += v
            else:
                out[key[0]] = out[key[0]] + v.reshape(np.shape(params[key[0]]))
        return out


@dataclass(frozen=True)
class InfluenceRecord:
    z: int
    user: int
    item_i: int
    item_j: int
    score_influence_rec: float
    score_influence_alt: float
    gap_influence: float

    def to_json(self) -> dict:
        return {
            "z": self.z, "user": self.user, "rec": self.item_i, "alt": self.item_j,
            "score_influence_rec": self.score_influence_rec,
            "score_influence_alt": self.score_influence_alt,
            "gap_influence": self.gap_influence,
        }


def removal_blocks(model: TrainedModel, z: int) -> list[tuple]:
    u, i, j = model.dataset.point(z)
    if model.kind == "pointwise":
        return [("P", u), ("Q", i)]
    return [("P", u), ("Q", i), ("Q", j)]


def damped_hessian(model: TrainedModel, blocks, damping: float = DEFAULT_DAMPING) -> DampedHessian:
    if damping < 0:
        raise ContractError("damping must be non-negative")
    h = hessian_block(model, blocks)
    h[np.diag_indices_from(h)] += damping
    return DampedHessian(tuple(tuple(b) for b in blocks), h, damping, model.n)


def _solve(dh: DampedHessian, g: np.ndarray) -> np.ndarray:
    a = dh.matrix
    if len(g) <= DENSE_LIMIT:
        try:
            x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(a), g)
        except np.linalg.LinAlgError:
            # the damping did not make the block positive definite; a symmetric
            # indefinite solve still gives the Newton-type step
            object.__setattr__(dh, "positive_definite", False)
            log.warning("damped Hessian block is not positive definite; using LDL solve")
            try:
                x = scipy.linalg.solve(a, g, assume_a="sym")
            except np.linalg.LinAlgError as exc:
                raise NumericError(f"singular damped Hessian block: {exc}") from None
    else:
        x, info = scipy.sparse.linalg.cg(a, g, rtol=RESIDUAL_TOL, atol=0.0, maxiter=10 * len(g))
        if info != 0:
            raise NumericError(f"conjugate gradient did not converge (info={info})")
    scale = max(float(np.linalg.norm(g)), np.finfo(float).tiny)
    if np.linalg.norm(a @ x - g) / scale > RESIDUAL_TOL * 100 or not np.all(np.isfinite(x)):
        raise NumericError("damped Hessian solve failed the residual check")
    return x


def removal_delta(model: TrainedModel, z: int, damping: float = DEFAULT_DAMPING,
                  blocks=None) -> ParamDelta:
    """Estimated ``theta^{-z} - theta`` on the blocks ``z`` touches (or ``blocks``)."""
    if damping <= 0 and blocks is None:
        raise ContractError("damping must be positive")
    if not model.dataset.active[z]:
        raise ContractError(f"point {z} is not in the training set")
    blocks = removal_blocks(model, z) if blocks is None else [tuple(b) for b in blocks]
    g = restricted_grad(model, z, blocks)
    if not np.any(g):
        return ParamDelta({b: np.zeros(_block_size(model, b)) for b in blocks})
    x = damped_hessian(model, blocks, damping).solve(g) / model.n
    out, o = {}, 0
    for b in blocks:
        size = _block_size(model, b)
        out[b] = x[o : o + size]
        o += size
    return ParamDelta(out)


def _block_size(model, block):
    return model.config.d if len(block) == 2 else int(np.size(model.params[block[0]]))


class Influence:
    """Cached influence queries against one fitted model.

    One delta is solved per removed point and reused for every score target.
    ``exclude_from_pool=False`` keeps removed items in the attention pool
    (parameter effect only).
    """

    def __init__(self, model: TrainedModel, damping: float = DEFAULT_DAMPING,
                 exclude_from_pool: bool = True):
        if damping <= 0:
            raise ContractError("damping must be positive")
        self.model = model
        self.damping = damping
        self.exclude_from_pool = exclude_from_pool
        self._deltas: dict[int, ParamDelta] = {}
        self._single: dict[int, np.ndarray] = {}
        self._base: dict[int, np.ndarray] = {}
        self.delta_solves = 0
        self.gap_evaluations = 0

    def delta(self, z: int) -> ParamDelta:
        if z not in self._deltas:
            self._deltas[z] = removal_delta(self.model, z, self.damping)
            self.delta_solves += 1
        return self._deltas[z]

    def base_scores(self, u: int) -> np.ndarray:
        if u not in self._base:
            self._base[u] = self.model.scores(u)
        return self._base[u]

    def point(self, u: int, item: int) -> int:
        return self.model.dataset.point_of(u, item)

    def scores_after(self, removed_points, u: int, items=None) -> np.ndarray:
        """Estimated scores of ``u`` once ``removed_points`` are all dropped (deltas summed)."""
        removed_points = list(removed_points)
        total = ParamDelta()
        for z in removed_points:
            total = total + self.delta(z)
        params = total.apply(self.model.params)
        pool = None
        if self.model.kind == "attention":
            gone = {self.model.dataset.items[z] for z in removed_points
                    if self.model.dataset.users[z] == u} if self.exclude_from_pool else set()
            pool = self.model.pool_of(u, gone)
        return self.model.scores(u, items, params=params, pool=pool)

    def score_influences(self, z: int, u: int) -> np.ndarray:
        """``y_{u,i} - y^{-z}_{u,i}`` for every item ``i``."""
        if u != int(self.model.dataset.users[z]):
            return self._other_user_influences(z, u)
        if z not in self._single:
            self._single[z] = self.base_scores(u) - self.scores_after([z], u)
        return self._single[z]

    def _other_user_influences(self, z, u):
        params = self.delta(z).apply(self.model.params)
        return self.base_scores(u) - self.model.scores(u, params=params)

    def influence_on_score(self, z: int, u: int, i: int) -> float:
        return float(self.score_influences(z, u)[i])

    def influence_on_gap(self, z: int, u: int, i: int, j: int) -> InfluenceRecord:
        if i == j:
            raise ContractError("gap influence needs two distinct items")
        s = self.score_influences(z, u)
        self.gap_evaluations += 1
        return InfluenceRecord(z, u, i, j, float(s[i]), float(s[j]), float(s[i] - s[j]))


def influence_on_score(model, z, u, i, damping=DEFAULT_DAMPING) -> float:
    return Influence(model, damping).influence_on_score(z, u, i)


def influence_on_gap(model, z, u, i, j, damping=DEFAULT_DAMPING) -> InfluenceRecord:
    return Influence(model, damping).influence_on_gap(z, u, i, j)


def set_influence(records) -> float:
    """Additive estimate of removing every point in ``records`` on their shared gap."""
    records = list(records)
    if not records:
        return 0.0
    target = (records[0].user, records[0].item_i, records[0].item_j)
    for r in records[1:]:
        if (r.user, r.item_i, r.item_j) != target:
            raise ContractError("records must share (user, i, j)")
    return float(sum(r.gap_influence for r in records))


class Retrainer:
    """Thread-safe memo of from-scratch refits keyed by the removed point set."""

    def __init__(self, model):
        self.model = model
        self._cache = {}
        self._lock = threading.Lock()
        self.retrains = 0

    def without(self, points):
        key = frozenset(int(z) for z in points)
        if not key:
            return self.model
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        fitted = train(self.model.dataset.without(sorted(key)), self.model.config)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = fitted
                self.retrains += 1
            return self._cache[key]

    def top1(self, u, points) -> int:
        return self.without(points).topk(u, 1)[0]


def retrained_gap(model: TrainedModel, retrained: TrainedModel, u: int, i: int, j: int) -> float:
    """Gap at the fitted parameters minus the gap after retraining."""
    before = model.scores(u, [i, j])
    after = retrained.scores(u, [i, j])
    return float((before[0] - before[1]) - (after[0] - after[1]))


def true_influence(model: TrainedModel, Z, u: int, i: int, j: int, retrainer: Retrainer = None) -> float:
    """Actual change of the gap ``y_{u,i} - y_{u,j}`` when ``Z`` is removed and the model refit."""
    Z = list(Z)
    if not Z:
        retrained = train(model.dataset, model.config)
    else:
        retrained = (retrainer or Retrainer(model)).without(Z)
    return retrained_gap(model, retrained, u, i, j)
