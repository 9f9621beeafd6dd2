import numpy as np
import pytest

from fedlog import tensor as T
from fedlog.errors import ContractError, FormatError
from fedlog.graphio import Graph
from fedlog.model import BaselineModel
from fedlog.promptgen import (GradientMatcher, PromptGenerator, PromptGeneratorBank, _items, aggregate_generators,
                              generate_prompt, generate_prompts, hvp_fd, pretrain_generator, pretrain_objective)

from _util import grad_close, small_sbm


def scalar_pg(values):
    names = PromptGenerator.NAMES
    shapes = {"l1.w": (1, 1), "l1.bias": (1,), "l2.w": (1, 1), "l2.bias": (1,), "l3.w": (1, 1), "l3.bias": (1,)}
    return PromptGenerator({n: T.Tensor(np.full(shapes[n], v), requires_grad=True) for n, v in zip(names, values)})


# ------------------------------------------------------------ HVP machinery

@pytest.mark.parametrize("seed", range(5))
def test_hvp_matches_quadratic_toy(seed):
    """l(phi, x) = (phi.x)^2 / 2, so d/dx l = (phi.x) phi and its derivative
    along u in phi is (u.x) phi + (phi.x) u."""
    rng = np.random.default_rng(seed)
    phi, x, u = rng.normal(size=(3, 7))
    grad_x = lambda p: (p @ x) * p  # noqa: E731
    got = hvp_fd(grad_x, phi, u)
    want = (u @ x) * phi + (phi @ x) * u
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-3


def test_hvp_zero_direction_is_exactly_zero():
    calls = []
    out = hvp_fd(lambda p: calls.append(1) or p * 2.0, np.ones(3), np.zeros(3))
    assert np.all(out == 0.0) and len(calls) == 1


def _pair_graph(x0, x1):
    return Graph.from_edges(np.array([x0, x1], dtype=float), [0, 1], 2, [(0, 1)])


def test_gradient_match_zero_when_subgraphs_coincide():
    g = _pair_graph([0.3, -1.0, 2.0], [1.5, 0.2, -0.7])
    (item,), skipped = _items(g, [0], h=1)
    assert skipped == 0
    m = GradientMatcher(BaselineModel.initialize(3, 2, np.random.default_rng(0)))
    val, grad = m.match(item, g.features[1].copy())
    assert val < 1e-24
    assert np.abs(grad).max() < 1e-9


def test_hvp_step_size_robust_on_real_matcher():
    g = small_sbm(0, sizes=(6, 6), feature_dim=4)
    items, _ = _items(g, np.arange(12), h=2)
    m = GradientMatcher(BaselineModel.initialize(4, 2, np.random.default_rng(1)))
    xp = np.random.default_rng(2).normal(size=4)
    it = items[0]
    u = 2.0 * (m.synthetic_gradient(it, xp) - m.true_gradient(it))
    f = lambda phi: m.prompt_gradient(phi, it, xp)  # noqa: E731
    a, b = hvp_fd(f, m.phi, u, 1e-3), hvp_fd(f, m.phi, u, 5e-4)
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-3


def test_match_gradient_agrees_with_finite_differences_in_prompt():
    g = small_sbm(1, sizes=(5, 5), feature_dim=3)
    items, _ = _items(g, np.arange(10), h=2)
    it = items[0]
    m = GradientMatcher(BaselineModel.initialize(3, 2, np.random.default_rng(0)))
    xp = np.random.default_rng(4).normal(size=3)
    _, grad = m.match(it, xp)
    num = T.numeric_gradient(lambda: m.match(it, xp)[0], xp, 1e-5)
    assert grad_close(grad, num, rel=1e-3)


# --------------------------------------------------------- pretraining loss

def _six_node():
    x = np.random.default_rng(7).normal(size=(6, 3))
    return Graph.from_edges(x, [0, 1, 0, 1, 0, 1], 2, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)])


def test_pretrain_objective_gradient_matches_finite_differences():
    g = _six_node()
    items, _ = _items(g, np.arange(6), h=2)
    rng = np.random.default_rng(0)
    matchers = [GradientMatcher(BaselineModel.initialize(3, 2, rng)) for _ in range(2)]
    pg = PromptGenerator.initialize(3, np.random.default_rng(1), hidden=6)
    _, _, grads = pretrain_objective(pg, items, matchers)

    def total():
        feat, lg, _ = pretrain_objective(pg, items, matchers)
        return feat + lg

    for name in PromptGenerator.NAMES:
        num = T.numeric_gradient(total, pg.params[name].data, 1e-5)
        assert grad_close(grads[name], num, rel=1e-3), name


def test_feature_loss_zero_for_perfect_generator():
    # every node's neighbors share one feature vector and the generator outputs it
    x = np.array([[1.0], [2.0], [1.0], [2.0]])
    g = Graph.from_edges(x, [0, 0, 0, 0], 1, [(0, 1), (2, 3)])
    items, _ = _items(g, [0, 1, 2, 3], h=1)
    # zero weights make the output the constant l3.bias; nodes 0 and 2 both have neighbor value 2
    pg = scalar_pg([0, 0, 0, 0, 0, 2.0])
    feat, _, _ = pretrain_objective(pg, [items[0], items[2]], [])
    assert feat == 0.0


def test_skips_isolated_nodes_and_rejects_empty():
    g = Graph.from_edges(np.eye(3), [0, 1, 1], 2, [(0, 1)])
    items, skipped = _items(g, [0, 1, 2], h=2)
    assert len(items) == 2 and skipped == 1
    with pytest.raises(ContractError):
        pretrain_generator(g, [2], h=1, n_inits=1, epochs=1)
    with pytest.raises(ContractError):
        pretrain_generator(g, [0], h=0, n_inits=1, epochs=1)


def test_pretraining_decreases_smoothed_loss():
    g = small_sbm(2, sizes=(12, 12), feature_dim=4, p_intra=0.3, p_inter=0.05)
    pg, report = pretrain_generator(g, np.arange(24), h=2, n_inits=2, epochs=20, seed=0, lr=1e-3, batch_size=8)
    totals = np.array([e["total"] for e in report.epochs])
    assert len(totals) == 20 and report.used + report.skipped == 24
    assert totals[10:].mean() < totals[:10].mean()


def test_pretraining_is_deterministic():
    g = small_sbm(2, sizes=(6, 6), feature_dim=3, p_intra=0.4)
    a, _ = pretrain_generator(g, np.arange(12), n_inits=1, epochs=2, seed=5)
    b, _ = pretrain_generator(g, np.arange(12), n_inits=1, epochs=2, seed=5)
    assert a.fingerprint() == b.fingerprint()


# -------------------------------------------------------------- aggregation

def test_aggregate_scalar_toy():
    g0, g1 = scalar_pg([0.0] * 6), scalar_pg([1.0] * 6)
    (pc,) = aggregate_generators([g0, g1], [[0.75], [0.25]])
    assert all(pc.params[n].data.item() == 0.25 for n in PromptGenerator.NAMES)
    assert pc.frozen and not any(p.requires_grad for p in pc.params.values())


def test_aggregate_single_client_and_one_hot_rates():
    rng = np.random.default_rng(0)
    a, b = PromptGenerator.initialize(3, rng, 4), PromptGenerator.initialize(3, rng, 4)
    for pc in aggregate_generators([a], [[0.2, 0.8]]):
        assert pc.fingerprint() == a.fingerprint()
    pc0, pc1 = aggregate_generators([a, b], [[1.0, 0.3], [0.0, 0.7]])
    assert pc0.fingerprint() == a.fingerprint()


def test_aggregate_equal_rates_is_plain_mean_and_absent_class_falls_back(caplog):
    rng = np.random.default_rng(0)
    gens = [PromptGenerator.initialize(2, rng, 3) for _ in range(3)]
    eq, absent = aggregate_generators(gens, [[0.2, 0.0]] * 3)
    for n in PromptGenerator.NAMES:
        mean = sum(g.params[n].data for g in gens) / 3
        np.testing.assert_allclose(eq.params[n].data, mean, rtol=0, atol=1e-15)
        np.testing.assert_allclose(absent.params[n].data, mean, rtol=0, atol=1e-15)
    assert any("zero rate" in r.message for r in caplog.records)


def test_aggregate_rejects_mismatched_inputs():
    rng = np.random.default_rng(0)
    a, b = PromptGenerator.initialize(2, rng, 3), PromptGenerator.initialize(2, rng, 4)
    with pytest.raises(ContractError):
        aggregate_generators([a, b], [[1.0], [1.0]])
    with pytest.raises(ContractError):
        aggregate_generators([a], [[1.0], [1.0]])


def test_generate_prompt_examples():
    zero = scalar_pg([0, 0, 0, 0, 0, 0.7])
    np.testing.assert_allclose(generate_prompt(zero, np.array([[5.0]])), [[0.7]])
    pg = scalar_pg([2.0, -1.0, 1.5, 0.5, -2.0, 0.25])
    x = 1.2
    silu = lambda z: z / (1 + np.exp(-z))  # noqa: E731
    want = -2.0 * silu(1.5 * silu(2.0 * x - 1.0) + 0.5) + 0.25
    got = generate_prompt(pg, np.array([[x]]))
    assert got[0, 0] == pytest.approx(want, rel=1e-14)
    np.testing.assert_array_equal(got, generate_prompt(pg, np.array([[x]])))
    out = generate_prompts([zero, pg], np.array([[x], [x]]), [1, 0])
    np.testing.assert_allclose(out, [[want], [0.7]])


def test_bank_round_trip_and_type_check():
    rng = np.random.default_rng(0)
    gens = [PromptGenerator.initialize(2, rng, 3) for _ in range(2)]
    bank = PromptGeneratorBank(gens, np.array([[0.5, 0.5], [1.0, 0.0]]), [{"used": 3}])
    back = PromptGeneratorBank.from_bytes(bank.to_bytes())
    assert [g.fingerprint() for g in back.generators] == [g.fingerprint() for g in gens]
    np.testing.assert_array_equal(back.rates, bank.rates)
    from fedlog.model import pack_arrays
    with pytest.raises(FormatError):
        PromptGeneratorBank.from_bytes(pack_arrays({}, {"kind": "fedlog"}))
