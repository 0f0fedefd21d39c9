import numpy as np
import pytest

import oracles
from conftest import perturbed_nets, random_emb, random_state
from tiarec import nn
from tiarec.agents import (
    EpisodeState,
    StateBatch,
    classifier_forward,
    critic_forward,
    nearest_items_batch,
    rank_items,
    recommender_forward,
    select_action,
    top_k_items,
)
from tiarec.env import apply_classification
from tiarec.pretrain import ItemEmbeddingTable


def test_empty_history_prototype_is_mlp_of_zero(rng):
    nets = perturbed_nets(4, rng)
    emb = random_emb(rng)
    want = nn.mlp_forward(nets.recommender.spec, nets.recommender.params, np.zeros(4))
    np.testing.assert_allclose(recommender_forward(nets.recommender, EpisodeState("u"), emb), want, atol=1e-15)


def test_single_item_history_prototype_is_mlp_of_item(rng):
    nets = perturbed_nets(4, rng)
    emb = random_emb(rng)
    state = apply_classification(EpisodeState("u"), "i2", False)
    want = nn.mlp_forward(nets.recommender.spec, nets.recommender.params, emb["i2"])
    np.testing.assert_allclose(recommender_forward(nets.recommender, state, emb), want, atol=1e-12)


def test_recommender_matches_composition_oracle(rng):
    for _ in range(100):
        dim = int(rng.integers(2, 6))
        nets = perturbed_nets(dim, rng)
        emb = random_emb(rng, n_items=5, dim=dim)
        state = random_state(rng, emb, max_len=6)
        _, want = oracles.recommender_forward(nets, state, emb)
        np.testing.assert_allclose(recommender_forward(nets.recommender, state, emb), want, rtol=0, atol=1e-10)


def test_classifier_zero_final_layer_gives_half(rng):
    nets = perturbed_nets(4, rng)
    nets.classifier.params["mlp.1.W"].data[:] = 0.0
    nets.classifier.params["mlp.1.b"].data[:] = 0.0
    emb = random_emb(rng)
    for _ in range(5):
        state = random_state(rng, emb)
        assert classifier_forward(nets.classifier, state, rng.normal(size=4), emb) == 0.5


def test_classifier_empty_pools_is_state_independent(rng):
    nets = perturbed_nets(4, rng)
    emb = random_emb(rng)
    values = {classifier_forward(nets.classifier, EpisodeState(f"u{k}"), rng.normal(size=4), emb) for k in range(4)}
    assert len(values) == 1
    want = nn.mlp_forward(nets.classifier.spec, nets.classifier.params, np.zeros(8))[0]
    assert values.pop() == pytest.approx(want, abs=1e-15)


def test_classifier_matches_composition_oracle(rng):
    for _ in range(100):
        nets = perturbed_nets(3, rng, scale=1.0)
        emb = random_emb(rng, n_items=4, dim=3)
        state = random_state(rng, emb, max_len=6)
        query = rng.normal(size=3)
        got = classifier_forward(nets.classifier, state, query, emb)
        assert 0.0 < got < 1.0
        assert abs(got - oracles.classifier_forward(nets, state, query.tolist(), emb)) <= 1e-10


def test_classifier_rejects_bad_query(rng):
    nets = perturbed_nets(3, rng)
    with pytest.raises(ValueError):
        classifier_forward(nets.classifier, EpisodeState("u"), np.zeros(4), random_emb(rng, dim=3))


def test_critic_zero_output_layer_gives_zero(rng):
    nets = perturbed_nets(4, rng)
    nets.critic.params["mlp.1.W"].data[:] = 0.0
    nets.critic.params["mlp.1.b"].data[:] = 0.0
    emb = random_emb(rng)
    assert critic_forward(nets, random_state(rng, emb), rng.normal(size=4), 0.3, emb) == 0.0


def test_critic_is_deterministic_and_matches_oracle(rng):
    for _ in range(100):
        nets = perturbed_nets(3, rng)
        emb = random_emb(rng, n_items=4, dim=3)
        state = random_state(rng, emb)
        action, a_c = rng.normal(size=3), float(rng.random())
        first = critic_forward(nets, state, action, a_c, emb)
        assert first == critic_forward(nets, state, action, a_c, emb)
        assert abs(first - oracles.critic_forward(nets, state, action.tolist(), a_c, emb)) <= 1e-10


def test_critic_input_validation(rng):
    nets = perturbed_nets(3, rng)
    emb = random_emb(rng, dim=3)
    with pytest.raises(ValueError):
        critic_forward(nets, EpisodeState("u"), np.zeros(2), 0.5, emb)
    with pytest.raises(ValueError):
        critic_forward(nets, EpisodeState("u"), np.zeros(3), 1.5, emb)


def test_batch_equals_single_state_passes(rng):
    nets = perturbed_nets(4, rng)
    emb = random_emb(rng)
    states = [random_state(rng, emb, user=f"u{k}") for k in range(6)]
    with nn.no_grad():
        _, protos = nets.prototypes(StateBatch(states, emb))
    for s, p in zip(states, protos.data):
        np.testing.assert_allclose(p, recommender_forward(nets.recommender, s, emb), atol=1e-12)


def test_state_index_cache_tracks_table(rng):
    emb = random_emb(rng)
    state = random_state(rng, emb, max_len=4)
    other = ItemEmbeddingTable(list(reversed(emb.keys)), emb.matrix[::-1])
    a = state.indices(emb)[0]
    b = state.indices(other)[0]
    np.testing.assert_array_equal(emb.matrix[a], other.matrix[b])
    with pytest.raises(KeyError):
        apply_classification(state, "ghost", True).indices(emb)


def test_select_action_two_item_catalogue():
    emb = ItemEmbeddingTable(["e1", "e2"], np.array([[1.0, 0.0], [0.0, 1.0]]))
    item, vec = select_action(np.array([0.9, 0.1]), emb)
    assert item == "e1"
    np.testing.assert_array_equal(vec, [1.0, 0.0])


def test_select_action_exact_match(rng):
    emb = random_emb(rng, n_items=20)
    assert select_action(emb["i13"], emb)[0] == "i13"


def test_select_action_matches_scan_oracle(rng):
    for _ in range(20):
        emb = random_emb(rng, n_items=100, dim=5)
        proto = rng.normal(size=5)
        j = oracles.nearest_item(proto.tolist(), emb.matrix.tolist())
        assert select_action(proto, emb)[0] == emb.keys[j]


def test_select_action_ties_break_by_vocabulary_order():
    emb = ItemEmbeddingTable(["b", "a", "c"], np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]))
    assert select_action(np.array([1.0, 0.0]), emb)[0] == "b"


def test_select_action_exploration_needs_rng(rng):
    emb = random_emb(rng)
    with pytest.raises(ValueError):
        select_action(np.ones(4), emb, exploration_sigma=0.1)
    a = select_action(np.ones(4), emb, 0.5, np.random.default_rng(3))
    b = select_action(np.ones(4), emb, 0.5, np.random.default_rng(3))
    assert a[0] == b[0]


def test_top_k_full_ranking_is_permutation(rng):
    emb = random_emb(rng, n_items=12)
    ranking = top_k_items(rng.normal(size=4), emb, 12)
    assert sorted(ranking) == sorted(emb.keys)


def test_top_1_agrees_with_select_action(rng):
    emb = random_emb(rng, n_items=30)
    for _ in range(10):
        p = rng.normal(size=4)
        assert top_k_items(p, emb, 1) == [select_action(p, emb)[0]]


def test_top_5_matches_sort_oracle(rng):
    for _ in range(20):
        emb = random_emb(rng, n_items=50, dim=6)
        p = rng.normal(size=6)
        order = oracles.full_ranking(p.tolist(), emb.matrix.tolist())
        assert top_k_items(p, emb, 5) == [emb.keys[j] for j in order[:5]]


def test_top_k_bounds(rng):
    emb = random_emb(rng, n_items=3)
    with pytest.raises(ValueError):
        top_k_items(np.ones(4), emb, 0)
    with pytest.raises(ValueError):
        top_k_items(np.ones(4), emb, 4)


def test_zero_prototype_falls_back_to_dot_product(rng):
    emb = random_emb(rng, n_items=5)
    order = rank_items(np.zeros(4), emb)
    assert sorted(order.tolist()) == list(range(5))


def test_nearest_items_batch_agrees_with_select_action(rng):
    emb = random_emb(rng, n_items=25)
    protos = rng.normal(size=(8, 4))
    got = nearest_items_batch(protos, emb)
    assert [emb.keys[j] for j in got] == [select_action(p, emb)[0] for p in protos]
