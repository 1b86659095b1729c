"""Counterfactual explanation search: ACCENT, its one-versus-all variant, and baselines.

Every method takes a user ``u``, the current recommendation ``rec``, the
user's actions ``profile`` (liked items) and replacement candidates
``candidates`` (the rest of the original top-k, in rank order) and returns an
:class:`Explanation`.  A method that cannot displace ``rec`` returns a
failure (``rec_star is None``) rather than raising.

What the per-action ``value`` in ``Explanation.set`` means depends on the
method (see ``VALUE_KINDS``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, UnsupportedOperationError
from .influence import DEFAULT_DAMPING, Influence

EXPLANATION_SCHEMA = "cfrec.explanation/1"

METHODS = ("accent", "accent_ova", "pure_fia", "fia", "pure_attention", "attention")
ATTENTION_ONLY = ("pure_attention", "attention")
VALUE_KINDS = {
    "accent": "gap_influence",
    "accent_ova": "gap_influence",
    "fia": "gap_influence",
    "pure_fia": "score_influence",
    "pure_attention": "attention_weight",
    "attention": "gap_reduction",
}


@dataclass
class Explanation:
    method: str
    user: int
    rec: int
    rec_star: int | None
    set: list = field(default_factory=list)
    estimated_gap_initial: float = float("nan")
    estimated_gap_remaining: float = float("nan")
    candidates: list = field(default_factory=list)
    ranking: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    verified: bool | None = None
    resumed: int = 0

    @property
    def success(self) -> bool:
        return self.rec_star is not None

    @property
    def items(self) -> list[int]:
        return [i for i, _ in self.set]

    @property
    def size(self) -> int:
        return len(self.set)

    def to_json(self, item_ids=None) -> dict:
        orig = (lambda i: i) if item_ids is None else (lambda i: None if i is None else int(item_ids[i]))
        return {
            "schema": EXPLANATION_SCHEMA,
            "method": self.method,
            "user": self.user,
            "rec": orig(self.rec),
            "rec_star": orig(self.rec_star),
            "success": self.success,
            "set": [{"item": orig(i), VALUE_KINDS[self.method]: v} for i, v in self.set],
            "estimated_gap_initial": _finite(self.estimated_gap_initial),
            "estimated_gap_remaining": _finite(self.estimated_gap_remaining),
            "candidates": [orig(c) for c in self.candidates],
            "skipped": [orig(i) for i in self.skipped],
            "verified": self.verified,
            "resumed": self.resumed,
        }


def _finite(v):
    return float(v) if np.isfinite(v) else None


def certificate_holds(expl: Explanation) -> bool:
    """Re-check the swap condition from the stored trace: summed gap influence exceeds the gap."""
    if not expl.success:
        return False
    return sum(v for _, v in expl.set) > expl.estimated_gap_initial


def _check(model, u, rec, profile, candidates):
    profile, candidates = list(profile), list(candidates)
    if not candidates:
        raise ContractError("candidate replacement set is empty")
    if rec in candidates:
        raise ContractError("rec must not be among the candidates")
    if len(set(candidates)) != len(candidates):
        raise ContractError("duplicate candidates")
    if set(profile) - set(model.dataset.profile(u)):
        raise ContractError("profile items must be the user's own actions")
    return profile, candidates


def _sorted_desc(pairs):
    """Sort ``(item, value)`` by decreasing value, ties to the smaller item id."""
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def _argmax(scores: dict) -> int:
    return min(scores, key=lambda i: (-scores[i], i))


def accent(model, u, rec, profile, candidates, damping=DEFAULT_DAMPING, engine=None) -> Explanation:
    """Smallest greedy gap-filling set over all replacement candidates.

    For each candidate, actions are taken in decreasing order of their
    influence on the gap between ``rec`` and the candidate until the summed
    influence exceeds the gap or the next influence is not positive.
    """
    profile, candidates = _check(model, u, rec, profile, candidates)
    engine = engine or Influence(model, damping)
    base = engine.base_scores(u)
    best = None
    for c in candidates:
        ranking = _sorted_desc(
            (item, engine.influence_on_gap(engine.point(u, item), u, rec, c).gap_influence)
            for item in profile
        )
        gap = float(base[rec] - base[c])
        chosen = []
        for item, g in ranking:
            if gap < 0 or g <= 0:
                break
            gap -= g
            chosen.append((item, g))
        # a set must be strictly smaller than the whole profile to count
        limit = len(profile) if best is None else best.size
        if gap < 0 and len(chosen) < limit:
            best = Explanation(
                "accent", u, rec, c, chosen, float(base[rec] - base[c]), gap,
                candidates=list(candidates), ranking=ranking,
            )
    if best is None:
        c = candidates[0]
        return Explanation("accent", u, rec, None, [], float(base[rec] - base[c]),
                           float(base[rec] - base[c]), candidates=list(candidates))
    return best


def accent_ova(model, u, rec, profile, candidates, damping=DEFAULT_DAMPING, engine=None) -> Explanation:
    """One-versus-all variant: always close the gap to the current estimated runner-up."""
    profile, candidates = _check(model, u, rec, profile, candidates)
    engine = engine or Influence(model, damping)
    base = engine.base_scores(u)
    targets = [rec] + candidates
    est = {t: float(base[t]) for t in targets}
    runner = _argmax({c: est[c] for c in candidates})
    initial = est[rec] - est[runner]
    remaining = list(profile)
    chosen = []
    while True:
        runner = _argmax({c: est[c] for c in candidates})
        if est[rec] < est[runner]:
            break
        pairs = [(item, engine.influence_on_gap(engine.point(u, item), u, rec, runner).gap_influence)
                 for item in remaining]
        if not pairs:
            break
        item, g = _sorted_desc(pairs)[0]
        if g <= 0:
            break
        chosen.append((item, g))
        remaining.remove(item)
        infl = engine.score_influences(engine.point(u, item), u)
        for t in targets:
            est[t] -= float(infl[t])
    runner = _argmax({c: est[c] for c in candidates})
    ok = est[rec] < est[runner] and len(chosen) < len(profile)
    if not ok:
        # like accent, a failed run returns no set; the attempted removals stay in the ranking
        return Explanation("accent_ova", u, rec, None, [], initial, est[rec] - est[runner],
                           candidates=list(candidates), ranking=chosen)
    ranking = _sorted_desc(
        (item, engine.influence_on_gap(engine.point(u, item), u, rec, runner).gap_influence)
        for item in remaining
    )
    return Explanation("accent_ova", u, rec, runner, chosen, initial, est[rec] - est[runner],
                       candidates=list(candidates), ranking=chosen + ranking)


def _influence_walk(method, model, u, rec, profile, candidates, engine, gap_filter):
    base = engine.base_scores(u)
    runner = candidates[0]
    order = _sorted_desc(
        (item, engine.influence_on_score(engine.point(u, item), u, rec)) for item in profile
    )
    targets = [rec] + candidates
    removed, chosen, skipped = [], [], []
    for item, score_infl in order:
        z = engine.point(u, item)
        if gap_filter:
            g = engine.influence_on_gap(z, u, rec, runner).gap_influence
            if g <= 0:
                skipped.append(item)
                continue
            value = g
        else:
            value = score_infl
        removed.append(z)
        chosen.append((item, value))
        est = engine.scores_after(removed, u, targets)
        top = _argmax(dict(zip(targets, est)))
        if top != rec:
            return Explanation(method, u, rec, top, chosen, float(base[rec] - base[top]),
                               float(est[0] - est[targets.index(top)]),
                               candidates=list(candidates), skipped=skipped)
    return Explanation(method, u, rec, None, chosen, float(base[rec] - base[runner]), float("nan"),
                       candidates=list(candidates), skipped=skipped)


def pure_fia(model, u, rec, profile, candidates, damping=DEFAULT_DAMPING, engine=None) -> Explanation:
    """Remove actions by decreasing influence on the score of ``rec`` until it is displaced."""
    profile, candidates = _check(model, u, rec, profile, candidates)
    return _influence_walk("pure_fia", model, u, rec, profile, candidates,
                           engine or Influence(model, damping), gap_filter=False)


def fia(model, u, rec, profile, candidates, damping=DEFAULT_DAMPING, engine=None) -> Explanation:
    """As :func:`pure_fia`, skipping actions that do not shrink the gap to the original runner-up."""
    profile, candidates = _check(model, u, rec, profile, candidates)
    return _influence_walk("fia", model, u, rec, profile, candidates,
                           engine or Influence(model, damping), gap_filter=True)


def _attention_walk(method, model, u, rec, profile, candidates, gap_filter):
    if model.kind != "attention":
        raise UnsupportedOperationError(f"{method} needs the attention model")
    profile, candidates = _check(model, u, rec, profile, candidates)
    full = model.dataset.profile(u)
    weights = dict(zip(full, model.attention_weights(u, rec)))
    order = _sorted_desc((item, float(weights[item])) for item in profile)
    targets = [rec] + candidates
    runner = candidates[0]

    def scores(removed):
        return dict(zip(targets, model.scores(u, targets, pool=model.pool_of(u, removed))))

    start = scores(())
    gap = start[rec] - start[runner]
    removed, chosen, skipped = [], [], []
    for item, w in order:
        if len(removed) >= len(full) - 1:
            break
        trial = scores(removed + [item])
        if gap_filter:
            new_gap = trial[rec] - trial[runner]
            if not new_gap < gap:
                skipped.append(item)
                continue
            value, gap = gap - new_gap, new_gap
        else:
            value = w
        removed.append(item)
        chosen.append((item, value))
        top = _argmax(trial)
        if top != rec:
            return Explanation(method, u, rec, top, chosen, start[rec] - start[top],
                               trial[rec] - trial[top], candidates=list(candidates), skipped=skipped)
    return Explanation(method, u, rec, None, chosen, start[rec] - start[runner], float("nan"),
                       candidates=list(candidates), skipped=skipped)


def pure_attention(model, u, rec, profile, candidates, damping=None, engine=None) -> Explanation:
    """Remove actions by decreasing attention weight (parameters fixed) until ``rec`` is displaced."""
    return _attention_walk("pure_attention", model, u, rec, profile, candidates, gap_filter=False)


def attention(model, u, rec, profile, candidates, damping=None, engine=None) -> Explanation:
    """As :func:`pure_attention`, keeping only removals that shrink the gap to the runner-up."""
    return _attention_walk("attention", model, u, rec, profile, candidates, gap_filter=True)


EXPLAINERS = {
    "accent": accent,
    "accent_ova": accent_ova,
    "pure_fia": pure_fia,
    "fia": fia,
    "pure_attention": pure_attention,
    "attention": attention,
}


def explain(model, u, k, method="accent", damping=DEFAULT_DAMPING, engine=None) -> Explanation:
    """Explain the top-1 recommendation of ``u`` with replacements from the rest of the top ``k``."""
    if method not in EXPLAINERS:
        raise ContractError(f"unknown method {method!r}")
    if k < 2:
        raise ContractError("k must be >= 2 to leave a replacement candidate")
    top = model.topk(u, k)
    profile = model.dataset.profile(u)
    if not profile:
        return Explanation(method, u, top[0], None, [], candidates=top[1:])
    return EXPLAINERS[method](model, u, top[0], profile, top[1:], damping=damping, engine=engine)


def extend(expl: Explanation, extra: int = 1) -> Explanation | None:
    """Take the next positive-influence actions from the stored ranking (for resuming)."""
    taken = set(expl.items)
    nxt = [(i, v) for i, v in expl.ranking if i not in taken and v > 0][:extra]
    if not nxt:
        return None
    new_set = expl.set + nxt
    return replace(expl, set=new_set,
                   estimated_gap_remaining=expl.estimated_gap_initial - float(np.sum([v for _, v in new_set])),
                   resumed=expl.resumed + 1)
