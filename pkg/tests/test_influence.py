import numpy as np
import pytest
import scipy.linalg

from cfrec.errors import ContractError
from cfrec.influence import (
    DampedHessian, Influence, InfluenceRecord, ParamDelta, Retrainer, damped_hessian,
    influence_on_gap, influence_on_score, removal_blocks, removal_delta, set_influence, true_influence,
)
from cfrec.model import default_config, restricted_grad, train

from oracles import fd_hessian, frozen_fit, frozen_model, frozen_user_problem, random_model, small_dataset
from test_model import toy_pairwise, toy_pointwise, with_params


@pytest.fixture(scope="module")
def pw_model():
    ds = small_dataset("pointwise", 1)
    return train(ds, default_config("pointwise"))


@pytest.fixture(scope="module")
def att_model():
    ds = small_dataset("attention", 1)
    return train(ds, default_config("attention", d=3))


def test_one_parameter_hand_value():
    dh = DampedHessian((("P", 0),), np.array([[2.0]]), 0.0, 4)
    assert dh.solve(np.array([1.0]))[0] / dh.n == pytest.approx(0.125, abs=1e-15)


def test_delta_matches_formula(pw_model):
    z = 5
    blocks = removal_blocks(pw_model, z)
    g = restricted_grad(pw_model, z, blocks)
    h = fd_hessian(pw_model, blocks) + 0.01 * np.eye(len(g))
    expected = np.linalg.solve(h, g) / pw_model.n
    got = np.concatenate([removal_delta(pw_model, z, 0.01).values[b] for b in blocks])
    assert np.allclose(got, expected, rtol=1e-6, atol=1e-12)


def test_zero_gradient_gives_zero_delta():
    ds = toy_pointwise([0, 1], [0, 1], [1, 0], 2, 2)
    m = with_params(ds, "pointwise", 2, P=[[0, 0], [1, 1]], Q=[[0, 0], [1, 1]], h=[1, 1], b=0.3)
    d = removal_delta(m, 0, 0.01)
    assert d.norm() == 0.0
    assert Influence(m).influence_on_score(0, 0, 1) == 0.0


def test_damping_shrinks_delta(att_model):
    norms = [removal_delta(att_model, 2, lam).norm() for lam in (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 100.0)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-2 * norms[0]


def test_damping_must_be_positive(pw_model):
    with pytest.raises(ContractError):
        removal_delta(pw_model, 0, 0.0)
    with pytest.raises(ContractError):
        Influence(pw_model, -1.0)


def test_removed_point_rejected(pw_model):
    ds = pw_model.dataset.without([0])
    m = train(ds, pw_model.config.with_(epochs=5))
    with pytest.raises(ContractError):
        removal_delta(m, 0)


def test_delta_support_is_touched_rows(att_model):
    z = 4
    u, i, j = att_model.dataset.point(z)
    assert set(removal_delta(att_model, z).values) == {("P", u), ("Q", i), ("Q", j)}


def test_indefinite_block_falls_back():
    a = np.diag([1.0, -0.5, 2.0])
    dh = DampedHessian((), a, 0.0, 1)
    x = dh.solve(np.array([1.0, 1.0, 1.0]))
    assert np.allclose(a @ x, 1.0)
    assert not dh.positive_definite


def test_large_block_uses_iterative_solver():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(600, 600))
    a = m @ m.T / 600 + np.eye(600)
    g = rng.normal(size=600)
    x = DampedHessian((), a, 0.0, 1).solve(g)
    assert np.allclose(x, scipy.linalg.solve(a, g), atol=1e-8)


@pytest.mark.parametrize("fixture", ["pw_model", "att_model"])
def test_gap_identity_and_antisymmetry(fixture, request):
    m = request.getfixturevalue(fixture)
    eng = Influence(m)
    rng = np.random.default_rng(1)
    for _ in range(20):
        u = int(rng.integers(m.dataset.n_users))
        prof = m.dataset.profile(u)
        if not prof:
            continue
        z = m.dataset.point_of(u, int(rng.choice(prof)))
        i, j = (int(x) for x in rng.choice(m.dataset.n_items, 2, replace=False))
        rec = eng.influence_on_gap(z, u, i, j)
        assert rec.gap_influence == rec.score_influence_rec - rec.score_influence_alt
        assert rec.score_influence_rec == eng.influence_on_score(z, u, i)
        assert eng.influence_on_gap(z, u, j, i).gap_influence == -rec.gap_influence
        fresh = influence_on_gap(m, z, u, i, j)
        assert fresh.gap_influence == pytest.approx(rec.gap_influence, abs=1e-14)


def test_gap_needs_distinct_items(pw_model):
    with pytest.raises(ContractError):
        Influence(pw_model).influence_on_gap(0, 0, 1, 1)


def test_gap_with_untouched_alternative(pw_model):
    # for another user only q_i moves, so item j's score influence is exactly zero
    eng = Influence(pw_model)
    u, i, _ = pw_model.dataset.point(3)
    v = (u + 1) % pw_model.dataset.n_users
    j = next(j for j in range(pw_model.dataset.n_items) if j != i)
    rec = eng.influence_on_gap(3, v, i, j)
    assert rec.score_influence_alt == 0.0
    assert rec.gap_influence == rec.score_influence_rec


def test_pointwise_locality(pw_model):
    eng = Influence(pw_model)
    ds = pw_model.dataset
    for z in range(0, ds.n, 7):
        u, i, _ = ds.point(z)
        for v in range(ds.n_users):
            if v == u:
                continue
            other = eng.score_influences(z, v)
            # only the shared item row moved for another user
            assert np.all(np.delete(other, i) == 0.0)


def r(g, u=0, i=1, j=2):
    return InfluenceRecord(0, u, i, j, g, 0.0, g)


def test_set_influence_sums():
    assert set_influence([]) == 0.0
    assert set_influence([r(0.4), r(0.2), r(-0.1)]) == pytest.approx(0.5)
    assert set_influence([r(0.3)]) == 0.3
    a, b = [r(0.1), r(0.25)], [r(-0.05)]
    assert set_influence(a + b) == pytest.approx(set_influence(a) + set_influence(b), abs=1e-15)


def test_set_influence_mixed_targets():
    with pytest.raises(ContractError):
        set_influence([r(0.1), r(0.1, j=3)])


def test_param_delta_add_and_apply():
    a = ParamDelta({("P", 0): np.array([1.0, 0.0])})
    b = ParamDelta({("P", 0): np.array([0.5, 0.5]), ("Q", 1): np.array([1.0, 1.0])})
    params = {"P": np.zeros((2, 2)), "Q": np.zeros((2, 2))}
    out = (a + b).apply(params)
    assert out["P"][0].tolist() == [1.5, 0.5] and out["Q"][1].tolist() == [1.0, 1.0]
    assert params["P"].sum() == 0


def test_convex_oracle_small():
    hits = 0
    for seed in range(20):
        prob = frozen_user_problem(seed)
        n = len(prob["items"])
        p = frozen_fit(prob, np.ones(n))
        m = frozen_model(prob, p)
        z = seed % n
        i = int(prob["items"][z])
        d = removal_delta(m, z, 1e-8, blocks=[("P", 0)])
        est = m.score(0, i) - m.scores(0, [i], params=d.apply(m.params))[0]
        mask = np.ones(n)
        mask[z] = 0
        p2 = frozen_fit(prob, mask)
        tru = m.score(0, i) - m.scores(0, [i], params=dict(m.params, P=p2[None, :]))[0]
        hits += abs(est - tru) <= 0.05 * abs(tru)
    assert hits >= 19


def test_removing_liked_similar_item_lowers_score():
    # item 0 and item 2 are co-liked by user 1 and co-disliked by user 2; user 0 likes 0 and 1
    rows = [(0, 0, 1), (0, 1, 1), (0, 3, 0), (1, 0, 1), (1, 2, 1), (1, 1, 0), (2, 1, 1), (2, 0, 0), (2, 2, 0)]
    u, i, y = zip(*rows)
    pw = train(toy_pointwise(list(u), list(i), list(y), 3, 4), default_config("pointwise", d=2))
    triples = [(0, 0, 3), (0, 1, 3), (1, 0, 1), (1, 2, 1), (2, 1, 0)]
    u, i, j = zip(*triples)
    att = train(toy_pairwise(list(u), list(i), list(j), 3, 4), default_config("attention", d=2, l2_reg=0.02))
    for m in (pw, att):
        z = m.dataset.point_of(0, 0)
        est = influence_on_score(m, z, 0, 2)
        refit = Retrainer(m).without([z])
        assert est > 0
        assert m.score(0, 2) - refit.score(0, 2) > 0


def test_true_influence_empty_and_finite(pw_model):
    assert true_influence(pw_model, [], 0, 1, 2) == 0.0
    z = pw_model.dataset.point_of(0, pw_model.dataset.profile(0)[0])
    assert np.isfinite(true_influence(pw_model, [z], 0, 1, 2))


def test_retrainer_memoizes(pw_model):
    rt = Retrainer(pw_model)
    a = rt.without([1, 2])
    assert rt.without([2, 1]) is a and rt.retrains == 1
    assert rt.without([]) is pw_model


def test_pool_exclusion_flag(att_model):
    ds = att_model.dataset
    u = next(u for u in range(ds.n_users) if len(ds.profile(u)) >= 2)
    z = ds.point_of(u, ds.profile(u)[0])
    with_pool = Influence(att_model).score_influences(z, u)
    without_pool = Influence(att_model, exclude_from_pool=False).score_influences(z, u)
    assert not np.allclose(with_pool, without_pool)


def test_damped_hessian_is_symmetric_positive(att_model):
    blocks = removal_blocks(att_model, 0)
    dh = damped_hessian(att_model, blocks)
    assert np.array_equal(dh.matrix, dh.matrix.T)
    assert np.all(np.linalg.eigvalsh(dh.matrix) > 0) or not dh.positive_definite
