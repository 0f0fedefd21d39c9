import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tiarec.agents import EpisodeState, Networks  # noqa: E402
from tiarec.corpus import Interaction, build_split  # noqa: E402
from tiarec.env import Transition, apply_classification  # noqa: E402
from tiarec.pretrain import ItemEmbeddingTable, PMFFactors, VectorTable  # noqa: E402


def random_emb(rng, n_items=6, dim=4, prefix="i"):
    keys = [f"{prefix}{j}" for j in range(n_items)]
    return ItemEmbeddingTable(keys, rng.normal(size=(n_items, dim)))


def random_state(rng, emb, max_len=5, user="u0"):
    state = EpisodeState(user)
    for _ in range(int(rng.integers(0, max_len + 1))):
        state = apply_classification(state, emb.keys[int(rng.integers(len(emb)))], bool(rng.random() < 0.5))
    return state


def random_transition(rng, emb, user="u0", max_len=5):
    before = random_state(rng, emb, max_len, user)
    item = emb.keys[int(rng.integers(len(emb)))]
    atypical = bool(rng.random() < 0.5)
    return Transition(before, item, float(rng.uniform(0.05, 0.95)), atypical, float(rng.normal()),
                      apply_classification(before, item, atypical))


def perturbed_nets(dim, rng, scale=0.3):
    nets = Networks.create(dim, rng)
    for group in nets.groups().values():
        for _, p in group.items():
            p.data += rng.normal(scale=scale, size=p.data.shape)
    return nets


def toy_log(n_users=3, n_items=6, per_user=10, seed=0, categories=("A", "B")):
    rng = np.random.default_rng(seed)
    items = [f"i{j}" for j in range(n_items)]
    cat = {it: categories[j % len(categories)] for j, it in enumerate(items)}
    events = []
    for u in range(n_users):
        for t in range(per_user):
            it = items[int(rng.integers(n_items))]
            events.append(Interaction(f"u{u}", it, 1.0, 100 * t + u, cat[it]))
    return events, cat


def pmf_for(split, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    users = VectorTable(list(split.user_vocabulary), rng.normal(scale=0.5, size=(len(split.user_vocabulary), dim)))
    items = ItemEmbeddingTable(list(split.item_vocabulary),
                               rng.normal(scale=0.5, size=(len(split.item_vocabulary), dim)))
    return PMFFactors(users, items)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_split():
    events, cat = toy_log()
    return build_split(events, cat)


@pytest.fixture
def toy_world(toy_split):
    """Split, embeddings and PMF factors small enough for fast training tests."""
    rng = np.random.default_rng(7)
    emb = ItemEmbeddingTable(list(toy_split.item_vocabulary), rng.normal(size=(len(toy_split.item_vocabulary), 4)))
    return toy_split, emb, pmf_for(toy_split)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
