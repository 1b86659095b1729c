"""Retrain-and-verify evaluation, diagnostics, the exhaustive oracle and resumption.

An explanation is verified by refitting the model from scratch without the
explanation's actions and looking at the user's new top-1 among items they
never rated.  ``strict_success`` means the new top-1 is the predicted
replacement; ``displaced`` only asks that the old top-1 lost its place.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CapExceededError, ContractError, DivergenceError, NumericError
from .explain import ATTENTION_ONLY, Explanation, certificate_holds, explain, extend
from .influence import DEFAULT_DAMPING, Influence, Retrainer, retrained_gap
from .stats import mcnemar, paired_t_test

log = logging.getLogger(__name__)

OUTCOME_SCHEMA = "cfrec.outcome/1"
SUMMARY_SCHEMA = "cfrec.summary/1"
TESTS_SCHEMA = "cfrec.tests/1"
ORACLE_CAP = 12
ORACLE_MAX_SIZE = 3
ALPHA = 0.05

SUMMARY_FIELDS = [
    "schema", "method", "k", "users", "returned", "strict_successes", "displaced",
    "diverged", "cf_percentage", "displaced_percentage", "mean_cf_set_size",
    "mean_cf_set_size_success", "influence_rmse", "influence_correlation",
]
TEST_FIELDS = [
    "schema", "k", "method_a", "method_b", "pairs", "mcnemar_b", "mcnemar_c",
    "mcnemar_statistic", "mcnemar_p", "mcnemar_mode", "mcnemar_degenerate",
    "size_pairs", "t_statistic", "t_p", "t_degenerate", "alpha",
]


@dataclass
class EvalOutcome:
    user: int
    method: str
    k: int
    explanation: Explanation
    retrained_top1: int | None = None
    strict_success: bool = False
    displaced: bool = False
    diverged: bool = False
    estimated_gap_influence: float | None = None
    true_gap_influence: float | None = None

    @property
    def set_size(self) -> int:
        return self.explanation.size

    def to_json(self, item_ids=None) -> dict:
        orig = (lambda i: i) if item_ids is None else (lambda i: None if i is None else int(item_ids[i]))
        return {
            "schema": OUTCOME_SCHEMA,
            "user": self.user,
            "method": self.method,
            "k": self.k,
            "retrained_top1": orig(self.retrained_top1),
            "strict_success": self.strict_success,
            "displaced": self.displaced,
            "diverged": self.diverged,
            "set_size": self.set_size,
            "estimated_gap_influence": self.estimated_gap_influence,
            "true_gap_influence": self.true_gap_influence,
            "explanation": self.explanation.to_json(item_ids),
        }


@dataclass
class EvalSummary:
    method: str
    k: int
    users: int
    returned: int
    strict_successes: int
    displaced: int
    diverged: int
    mean_cf_set_size: float
    mean_cf_set_size_success: float
    influence_rmse: float
    influence_correlation: float
    tests: dict = field(default_factory=dict)

    @property
    def cf_percentage(self) -> float:
        return 100.0 * self.strict_successes / self.users if self.users else 0.0

    @property
    def displaced_percentage(self) -> float:
        return 100.0 * self.displaced / self.users if self.users else 0.0

    def row(self) -> dict:
        out = {"schema": SUMMARY_SCHEMA}
        for name in SUMMARY_FIELDS[1:]:
            out[name] = getattr(self, name)
        return out


def compatible(method: str, model) -> bool:
    return not (method in ATTENTION_ONLY and model.kind != "attention")


def verify(model, expl: Explanation, retrainer: Retrainer):
    """Refit without the explanation's actions; returns ``(new_top1, refit_model)``."""
    points = [model.dataset.point_of(expl.user, i) for i in expl.items]
    fitted = retrainer.without(points)
    return fitted.topk(expl.user, 1)[0], fitted


def _outcome(model, expl, k, engine, retrainer):
    out = EvalOutcome(expl.user, expl.method, k, expl)
    if not expl.success or not expl.set:
        return out
    try:
        top1, fitted = verify(model, expl, retrainer)
    except (DivergenceError, NumericError) as exc:
        log.warning("refit diverged for user %d (%s): %s", expl.user, expl.method, exc)
        out.diverged = True
        return out
    out.retrained_top1 = top1
    out.displaced = top1 != expl.rec
    out.strict_success = top1 == expl.rec_star
    u, rec, star = expl.user, expl.rec, expl.rec_star
    out.estimated_gap_influence = float(sum(
        engine.influence_on_gap(engine.point(u, i), u, rec, star).gap_influence for i in expl.items
    ))
    out.true_gap_influence = retrained_gap(model, fitted, u, rec, star)
    return out


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def evaluate(model, method: str, k: int, damping: float = DEFAULT_DAMPING, users=None,
             engine: Influence = None, retrainer: Retrainer = None, jobs: int = 1):
    """Explain every user's top-1 with ``method`` and verify each returned set by refitting.

    Returns ``(outcomes, summary)`` with outcomes in user order.
    """
    if not compatible(method, model):
        raise ContractError(f"{method} needs the attention model")
    engine = engine or Influence(model, damping)
    retrainer = retrainer or Retrainer(model)
    users = range(model.dataset.n_users) if users is None else users

    def one(u):
        expl = explain(model, int(u), k, method, damping=damping, engine=engine)
        return _outcome(model, expl, k, engine, retrainer)

    outcomes = _map(one, list(users), jobs)
    return outcomes, summarize(outcomes, method, k)


def influence_diagnostics(estimated, true) -> tuple[float, float]:
    """RMSE and Pearson correlation between estimated and refit gap influences."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(true, dtype=float)
    if est.shape != tru.shape:
        raise ContractError("estimated and true influences must align")
    if len(est) < 2:
        raise ContractError("correlation needs at least two points")
    rmse = float(np.sqrt(np.mean((est - tru) ** 2)))
    if est.std() == 0 or tru.std() == 0:
        return rmse, float("nan")
    return rmse, float(np.corrcoef(est, tru)[0, 1])


def summarize(outcomes, method: str, k: int) -> EvalSummary:
    outs = [o for o in outcomes if o.method == method and o.k == k]
    sizes = [o.set_size for o in outs if o.set_size > 0]
    strict = [o.set_size for o in outs if o.strict_success]
    pairs = [(o.estimated_gap_influence, o.true_gap_influence) for o in outs
             if o.true_gap_influence is not None]
    rmse = rho = float("nan")
    if len(pairs) >= 2:
        rmse, rho = influence_diagnostics(*zip(*pairs))
    return EvalSummary(
        method, k, len(outs), len(sizes), sum(o.strict_success for o in outs),
        sum(o.displaced for o in outs), sum(o.diverged for o in outs),
        float(np.mean(sizes)) if sizes else float("nan"),
        float(np.mean(strict)) if strict else float("nan"),
        rmse, rho,
    )


def pairwise_tests(outcomes, k: int, methods) -> list[dict]:
    """McNemar on strict success and paired t on set sizes for each method pair at ``k``."""
    by = {}
    for o in outcomes:
        if o.k == k:
            by.setdefault(o.method, {})[o.user] = o
    rows = []
    for a, b in itertools.combinations([m for m in methods if m in by], 2):
        common = sorted(set(by[a]) & set(by[b]))
        mc = mcnemar([(by[a][u].strict_success, by[b][u].strict_success) for u in common])
        both = [u for u in common if by[a][u].set_size > 0 and by[b][u].set_size > 0]
        row = {
            "schema": TESTS_SCHEMA, "k": k, "method_a": a, "method_b": b, "pairs": len(common),
            "mcnemar_b": sum(by[a][u].strict_success and not by[b][u].strict_success for u in common),
            "mcnemar_c": sum(by[b][u].strict_success and not by[a][u].strict_success for u in common),
            "mcnemar_statistic": mc.statistic, "mcnemar_p": mc.p_value, "mcnemar_mode": mc.mode,
            "mcnemar_degenerate": mc.degenerate, "size_pairs": len(both),
            "t_statistic": float("nan"), "t_p": float("nan"), "t_degenerate": True, "alpha": ALPHA,
        }
        if len(both) >= 2:
            tt = paired_t_test([by[a][u].set_size for u in both], [by[b][u].set_size for u in both])
            row.update(t_statistic=tt.statistic, t_p=tt.p_value, t_degenerate=tt.degenerate)
        rows.append(row)
    return rows


def run_evaluation(model, methods, ks, damping=DEFAULT_DAMPING, users=None, jobs=1):
    """All compatible ``methods`` at every ``k`` sharing one influence engine and refit cache."""
    engine = Influence(model, damping)
    retrainer = Retrainer(model)
    outcomes, summaries, tests = [], [], []
    runnable = []
    for m in methods:
        if compatible(m, model):
            runnable.append(m)
        else:
            log.warning("skipping %s: needs the attention model", m)
    for k in ks:
        for m in runnable:
            outs, summ = evaluate(model, m, k, damping, users, engine, retrainer, jobs)
            outcomes += outs
            summaries.append(summ)
        tests += pairwise_tests(outcomes, k, runnable)
    return outcomes, summaries, tests, retrainer


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(round(v, 10))
    return v


def summary_csv(summaries) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for s in summaries:
        w.writerow({k: _fmt(v) for k, v in s.row().items()})
    return buf.getvalue()


def tests_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, TEST_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def outcomes_jsonl(outcomes, item_ids=None) -> str:
    return "".join(json.dumps(o.to_json(item_ids), sort_keys=True) + "\n" for o in outcomes)


# ---------------------------------------------------------------------------
# oracle, random baseline and resumption


def exhaustive_counterfactual(model, u: int, max_size: int = ORACLE_MAX_SIZE, cap: int = ORACLE_CAP,
                              retrainer: Retrainer = None):
    """Smallest action subset whose removal changes the refit top-1.

    Subsets are tried by increasing size, lexicographically within a size.
    Returns ``(items, new_top1)`` or ``None`` when nothing up to ``max_size``
    works.
    """
    profile = model.dataset.profile(u)
    if len(profile) > cap:
        raise CapExceededError(f"profile of user {u} has {len(profile)} actions (cap {cap})")
    if max_size > ORACLE_MAX_SIZE:
        raise CapExceededError(f"max_size {max_size} exceeds {ORACLE_MAX_SIZE}")
    retrainer = retrainer or Retrainer(model)
    rec = model.topk(u, 1)[0]
    for size in range(1, min(max_size, len(profile)) + 1):
        for subset in itertools.combinations(profile, size):
            points = [model.dataset.point_of(u, i) for i in subset]
            top1 = retrainer.top1(u, points)
            if top1 != rec:
                return list(subset), top1
    return None


def random_set_rate(model, u: int, size: int, draws: int = 10, seed: int = 0,
                    retrainer: Retrainer = None) -> float:
    """Fraction of random ``size``-subsets of the profile whose removal changes the refit top-1."""
    profile = model.dataset.profile(u)
    if not 1 <= size <= len(profile):
        raise ContractError("size must lie in 1..|profile|")
    retrainer = retrainer or Retrainer(model)
    rng = np.random.default_rng([seed, u, size])
    rec = model.topk(u, 1)[0]
    hits = 0
    for _ in range(draws):
        subset = sorted(rng.choice(profile, size=size, replace=False).tolist())
        points = [model.dataset.point_of(u, i) for i in subset]
        hits += retrainer.top1(u, points) != rec
    return hits / draws


def verify_and_resume(model, expl: Explanation, retrainer: Retrainer = None, budget: int = 3) -> Explanation:
    """Refit without the set; while the old top-1 survives, extend the set and refit again.

    Each resume adds the next positive-influence action from the stored
    ranking.  The result carries ``verified`` (the refit top-1 changed) and
    the number of resumes used.
    """
    if expl.method not in ("accent", "accent_ova"):
        raise ContractError("only greedy gap-filling explanations can resume")
    if not expl.success:
        raise ContractError("cannot verify a failed explanation")
    retrainer = retrainer or Retrainer(model)
    current = expl
    while True:
        top1, _ = verify(model, current, retrainer)
        if top1 != current.rec:
            current.verified = True
            return current
        if current.resumed >= budget:
            break
        nxt = extend(current)
        if nxt is None or nxt.size >= len(model.dataset.profile(expl.user)):
            break
        current = nxt
    current.verified = False
    return current


def certificate_rate(outcomes) -> float:
    accent_ok = [o.explanation for o in outcomes if o.method == "accent" and o.explanation.success]
    if not accent_ok:
        return float("nan")
    return sum(certificate_holds(e) for e in accent_ok) / len(accent_ok)
