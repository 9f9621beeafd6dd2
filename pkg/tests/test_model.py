import math

import numpy as np
import pytest

from fedlog import tensor as T
from fedlog.errors import ContractError, FormatError
from fedlog.graphio import Graph
from fedlog.model import (EMBED, BaselineModel, LocalModel, accuracy, branch_forward, branch_shapes,
                          class_mean_matrix, count_parameters, init_params, merge_branches, merge_weight,
                          model_from_bytes, model_to_bytes, pack_arrays, per_class_accuracy, predict, sage_embed,
                          unpack_arrays)

from _util import check_grad, grad_close, small_sbm


def scalar_params(a, b, c, d, bias1=0.0, bias2=0.0):
    t = lambda v: T.Tensor(np.array([[v]], dtype=float))  # noqa: E731
    return {"enc.l1.self": t(a), "enc.l1.neigh": t(b), "enc.l1.bias": T.Tensor(np.array([bias1])),
            "enc.l2.self": t(c), "enc.l2.neigh": t(d), "enc.l2.bias": T.Tensor(np.array([bias2]))}


def test_sage_zero_weights_give_zero_embeddings():
    g = small_sbm(0, sizes=(5, 5), feature_dim=3)
    p = {k: T.Tensor(np.zeros(v.shape)) for k, v in LocalModel.initialize(3, 2, s=2).params.items()}
    out = sage_embed(p, g.features, g.mean_adjacency)
    assert np.all(out.data == 0.0)


def test_sage_two_node_path_hand_computed():
    g = Graph.from_edges(np.array([[1.0], [-2.0]]), [0, 1], 2, [(0, 1)])
    a, b, c, d = 0.5, 2.0, 3.0, -1.0
    out = sage_embed(scalar_params(a, b, c, d), g.features, g.mean_adjacency).data[:, 0]
    h0 = max(0.0, a * 1.0 + b * -2.0)   # relu(-3.5) = 0
    h1 = max(0.0, a * -2.0 + b * 1.0)   # relu(1.0) = 1
    np.testing.assert_allclose(out, [c * h0 + d * h1, c * h1 + d * h0])


def test_isolated_node_equals_zero_feature_neighbor():
    p = LocalModel.initialize(4, 2, s=2, rng=np.random.default_rng(3)).params
    x = np.random.default_rng(0).normal(size=(1, 4))
    alone = Graph.from_edges(x, [0], 1, [])
    pair = Graph.from_edges(np.vstack([x, np.zeros((1, 4))]), [0, 0], 1, [(0, 1)])
    # layer 2 sees the neighbor's layer-1 output relu(bias), which need not vanish,
    # so compare only through one layer by zeroing the second-layer neighbor weight
    p2 = dict(p)
    p2["enc.l2.neigh"] = T.Tensor(np.zeros_like(p["enc.l2.neigh"].data))
    a = sage_embed(p2, alone.features, alone.mean_adjacency).data[0]
    b = sage_embed(p2, pair.features, pair.mean_adjacency).data[0]
    np.testing.assert_allclose(a, b, atol=1e-12)


def _branch_params(seed=0):
    return init_params(branch_shapes("head"), np.random.default_rng(seed))


def test_branch_zero_transform_leaves_embedding_unshifted():
    rng = np.random.default_rng(1)
    p = _branch_params()
    p["head.trans.l3.w"] = T.Tensor(np.zeros_like(p["head.trans.l3.w"].data))
    p["head.trans.l3.bias"] = T.Tensor(np.zeros_like(p["head.trans.l3.bias"].data))
    h, n = rng.normal(size=(3, EMBED)), rng.normal(size=(3, EMBED))
    protos = rng.normal(size=(4, EMBED))
    M = class_mean_matrix(2, 2)
    got = branch_forward(p, "head", h, n, protos, M).data
    means = M @ protos
    d = ((h[:, None, :] - means[None]) ** 2).sum(-1)
    np.testing.assert_allclose(got, T.softmax(T.Tensor(-d)).data, rtol=1e-12)


def test_branch_softmax_closed_form_example():
    # with the gate off, two class means at squared distance 0 and ln 3 from h
    p = _branch_params()
    for k in ("head.trans.l3.w", "head.trans.l3.bias"):
        p[k] = T.Tensor(np.zeros_like(p[k].data))
    h = np.zeros((1, EMBED))
    protos = np.zeros((2, EMBED))
    protos[1, 0] = math.sqrt(math.log(3.0))
    got = branch_forward(p, "head", h, h, protos, class_mean_matrix(2, 1)).data[0]
    np.testing.assert_allclose(got, [0.75, 0.25], atol=1e-12)


def test_branch_equidistant_means_uniform():
    # identical prototypes put every class mean at the same point
    p = _branch_params()
    h = np.zeros((1, EMBED))
    same = np.tile(np.random.default_rng(0).normal(size=(1, EMBED)), (3, 1))
    got = branch_forward(p, "head", h, h, same, class_mean_matrix(3, 1)).data[0]
    np.testing.assert_allclose(got, np.full(3, 1 / 3), atol=1e-12)


def test_class_mean_matrix_layout():
    M = class_mean_matrix(2, 3)
    np.testing.assert_allclose(M, [[1 / 3] * 3 + [0] * 3, [0] * 3 + [1 / 3] * 3])


def test_merge_weight_values():
    assert merge_weight(4, 3.0) == 0.5
    assert abs(float(merge_weight(3, 3.0)) - 1 / (1 + math.e)) < 1e-12
    degs = np.arange(0, 40)
    a = merge_weight(degs, 3.0)
    assert np.all(np.diff(a) > 0) and np.all((a > 0) & (a <= 1))
    assert float(merge_weight(60, 3.0)) == pytest.approx(1.0)


def test_merge_branches_equal_inputs_and_normalization():
    rng = np.random.default_rng(0)
    p = T.softmax(T.Tensor(rng.normal(size=(5, 4)))).data
    q = T.softmax(T.Tensor(rng.normal(size=(5, 4)))).data
    np.testing.assert_allclose(merge_branches(p, p, rng.random(5)).data, p, rtol=1e-12)
    m = merge_branches(p, q, rng.random(5)).data
    np.testing.assert_allclose(m.sum(1), 1.0, atol=1e-9)


def _five_node():
    x = np.random.default_rng(2).normal(size=(5, 3))
    return Graph.from_edges(x, [0, 1, 0, 1, 1], 2, [(0, 1), (1, 2), (2, 3), (0, 4)])


@pytest.mark.parametrize("bank", ["head", "tail"])
def test_fitting_loss_gradient_wrt_banks(bank):
    g = _five_node()
    m = LocalModel.initialize(3, 2, s=2, lam=1.0, rng=np.random.default_rng(0), bank_std=0.5)

    def loss_of(x):
        m.params[f"bank.{bank}"] = x
        return m.fitting_loss(g, np.arange(5), beta=0.1, train=False)

    check_grad(loss_of, m.params[f"bank.{bank}"].data.copy(), rel=1e-4)


def test_fitting_loss_examples():
    g = Graph.from_edges(np.zeros((1, 2)), [0], 2, [])
    m = LocalModel.initialize(2, 2, s=1, rng=np.random.default_rng(0))
    for k in m.params:
        m.params[k].data[...] = 0.0
    # every prototype and embedding coincides, so p = (0.5, 0.5)
    assert abs(m.fitting_loss(g, [0], beta=0.3, train=False).item() - math.log(2)) < 1e-12
    m.params["bank.head"].data[...] = np.array([[3.0, 4.0], [0.0, 0.0]])
    m.params["bank.tail"].data[...] = np.array([[0.0, 0.0], [1.0, 0.0]])
    with_beta = m.fitting_loss(g, [0], beta=0.5, train=False).item()
    no_beta = m.fitting_loss(g, [0], beta=0.0, train=False).item()
    assert abs(with_beta - no_beta - 0.5 * 6.0) < 1e-12
    with pytest.raises(ContractError):
        m.fitting_loss(g, [], beta=0.1)


def test_fitting_loss_updates_every_parameter_group():
    g = _five_node()
    m = LocalModel.initialize(3, 2, s=2, rng=np.random.default_rng(0), bank_std=0.5)
    with T.Tape() as tape:
        loss = m.fitting_loss(g, np.arange(5), beta=0.1, train=True, rng=np.random.default_rng(1))
    grads = T.backward(loss, m.params, tape)
    for prefix in ("enc.", "head.", "tail.", "bank.head", "bank.tail"):
        assert any(np.any(grads[k] != 0) for k in grads if k.startswith(prefix)), prefix


def test_shared_excludes_banks():
    m = LocalModel.initialize(4, 3, s=2)
    assert not any(k.startswith("bank.") for k in m.shared)
    assert count_parameters(m.params) - count_parameters(m.params, m.shared) == 2 * 3 * 2 * 4


def _routing_graph():
    def clique(nodes):
        return [(a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:]]
    # class 0: a 10-clique (degree 9 > lam + 3); class 1: disjoint pairs (degree 1);
    # classes 2 and 3: 5-cliques (degree 4 = lam + 1, so both branches weigh 0.5)
    labels = np.repeat(np.arange(4), 10)
    edges = clique(list(range(10))) + [(10 + 2 * i, 11 + 2 * i) for i in range(5)]
    for start in range(20, 40, 5):
        edges += clique(list(range(start, start + 5)))
    rng = np.random.default_rng(0)
    X = 2 * rng.normal(size=(4, 6))[labels] + rng.normal(size=(40, 6))
    return Graph.from_edges(X, labels, 4, edges)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_knowledge_routing_by_degree(seed):
    """High-degree class knowledge lands in the head bank, degree-1 class
    knowledge in the tail bank. Both branches start as exact copies so the
    degree weight is the only asymmetry."""
    g = _routing_graph()
    s = 5
    m = LocalModel.initialize(6, 4, s=s, lam=3.0, rng=np.random.default_rng(seed))
    for k in m.params:
        if k.startswith("tail."):
            m.params[k].data[...] = m.params["head." + k[5:]].data
    m.params["bank.tail"].data[...] = m.params["bank.head"].data
    init = {b: m.params[f"bank.{b}"].data.copy() for b in ("head", "tail")}
    for _ in range(30):
        with T.Tape() as tape:
            loss = m.fitting_loss(g, np.arange(40), beta=0.0, train=False)
        grads = T.backward(loss, m.params, tape)
        for k, v in m.params.items():
            v.data -= 1e-3 * grads[k]
    move = {b: np.linalg.norm(m.params[f"bank.{b}"].data - init[b], axis=1).reshape(4, s).sum(1)
            for b in init}
    assert move["head"][0] > move["tail"][0]
    assert move["tail"][1] > move["head"][1]


def test_predict_is_pure_and_proba_normalized():
    g = small_sbm(1)
    m = LocalModel.initialize(g.feature_dim, g.n_classes, s=3, rng=np.random.default_rng(0), bank_std=0.3)
    nodes = np.arange(g.n_nodes)
    a, b = m.predict_proba(g, nodes), m.predict_proba(g, nodes)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(m.predict_proba(g, nodes, chunk=7), a)
    fixed = m.predict_proba(g, nodes, fixed_alpha=0.5)
    assert fixed.shape == a.shape


def test_untrained_model_is_near_chance():
    g = small_sbm(5, sizes=(100, 100), feature_dim=8, separation=2.0)
    accs = []
    for seed in range(5):
        m = LocalModel.initialize(g.feature_dim, 2, s=5, rng=np.random.default_rng(seed))
        accs.append(accuracy(m, g, np.arange(200)))
    assert abs(np.mean(accs) - 0.5) <= 0.1, accs


def test_fitting_learns_separable_sbm():
    g = small_sbm(2, sizes=(30, 30, 30), feature_dim=8, separation=3.0)
    m = LocalModel.initialize(g.feature_dim, 3, s=3, rng=np.random.default_rng(0))
    opt = T.Adam(1e-2)
    nodes = np.arange(g.n_nodes)
    rng = np.random.default_rng(0)
    for _ in range(200):
        with T.Tape() as tape:
            loss = m.fitting_loss(g, nodes, beta=0.1, train=True, rng=rng)
        opt.step(m.params, T.backward(loss, m.params, tape))
    assert accuracy(m, g, nodes) > 0.9


def test_baseline_mask_blocks_unseen_classes():
    g = small_sbm(0)
    m = BaselineModel.initialize(g.feature_dim, 3, np.random.default_rng(0), class_mask=[True, False, True])
    assert not np.any(predict(m, g, np.arange(g.n_nodes)) == 1)
    pc = per_class_accuracy(m, g, np.arange(g.n_nodes), 3)
    assert pc[1] == 0.0
    assert np.isnan(per_class_accuracy(m, g, np.flatnonzero(g.labels == 0), 3)[1])
    assert accuracy(m, g, []) is None


def test_model_round_trip_bytes():
    for m in (LocalModel.initialize(5, 3, s=2, rng=np.random.default_rng(0)),
              BaselineModel.initialize(5, 3, np.random.default_rng(0), class_mask=[True, True, False])):
        back = model_from_bytes(model_to_bytes(m))
        assert type(back) is type(m) and back.meta() == m.meta()
        for k in m.params:
            np.testing.assert_array_equal(back.params[k].data, m.params[k].data)


def test_unpack_rejects_corruption():
    blob = pack_arrays({"a": np.arange(3.0)}, {"x": 1})
    arrays, meta = unpack_arrays(blob)
    assert meta == {"x": 1} and arrays["a"].tolist() == [0, 1, 2]
    for bad in (blob[:5], blob[:-8], blob + b"\0" * 8, b"\x02" + blob[1:]):
        with pytest.raises(FormatError):
            unpack_arrays(bad)
    with pytest.raises(FormatError):
        model_from_bytes(pack_arrays({"a": np.zeros(1)}, {"kind": "mystery"}))


def test_gradients_are_finite_under_training_mode():
    g = small_sbm(3, sizes=(10, 10))
    m = LocalModel.initialize(g.feature_dim, 2, s=2)
    with T.Tape() as tape:
        loss = m.fitting_loss(g, np.arange(20), train=True, rng=np.random.default_rng(0))
    grads = T.backward(loss, m.params, tape)
    assert all(np.isfinite(v).all() for v in grads.values())
    assert grad_close(grads["bank.head"], grads["bank.head"])
