"""Finite-difference check of the critic and agent loss gradients."""

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .agents import EpisodeState, Networks
from .env import Transition, apply_classification
from .pretrain import ItemEmbeddingTable
from .seeding import component_rng
from .trainer import agent_loss, critic_loss

logger = logging.getLogger(__name__)

# keeps near-zero coordinates from dividing rounding noise by ~0
DENOMINATOR_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    loss: str
    group: str
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


def relative_error(analytic, numeric, floor=DENOMINATOR_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _random_state(user, vocab, rng, max_len=4):
    state = EpisodeState(user)
    for _ in range(int(rng.integers(1, max_len + 1))):
        state = apply_classification(state, vocab[int(rng.integers(len(vocab)))], bool(rng.random() < 0.5))
    return state


def random_problem(dim=4, n_items=3, batch_size=4, seed=0):
    """Random embeddings, networks, target networks and a transition batch."""
    rng = component_rng(seed, "gradcheck")
    vocab = [f"i{j}" for j in range(n_items)]
    emb = ItemEmbeddingTable(vocab, rng.normal(size=(n_items, dim)))
    nets = Networks.create(dim, rng)
    for group in nets.groups().values():
        for _, p in group.items():
            p.data += rng.normal(scale=0.1, size=p.data.shape)
    targets = nets.copy()
    for group in targets.groups().values():
        for _, p in group.items():
            p.data += rng.normal(scale=0.05, size=p.data.shape)
    batch = []
    for b in range(batch_size):
        before = _random_state(f"u{b}", vocab, rng)
        item = vocab[int(rng.integers(n_items))]
        atypical = bool(rng.random() < 0.5)
        batch.append(Transition(before, item, float(rng.uniform(0.05, 0.95)), atypical,
                                float(rng.normal()), apply_classification(before, item, atypical)))
    return emb, nets, targets, batch


def _check(loss_name, loss_fn, groups, h, floor):
    loss = loss_fn()
    nn.backward(loss)
    analytic = {g: {k: p.grad.copy() for k, p in params.items()} for g, params in groups.items()}
    for params in groups.values():
        params.zero_grad()
    results = []
    with nn.no_grad():
        for g, params in groups.items():
            for name, p in params.items():
                for idx in np.ndindex(p.data.shape):
                    saved = p.data[idx]
                    p.data[idx] = saved + h
                    up = float(loss_fn().data)
                    p.data[idx] = saved - h
                    down = float(loss_fn().data)
                    p.data[idx] = saved
                    numeric = (up - down) / (2 * h)
                    a = float(analytic[g][name][idx])
                    results.append(GradCheckResult(loss_name, g, name, idx, a, numeric,
                                                   relative_error(a, numeric, floor)))
    return results


def gradient_check(dim=4, n_items=3, batch_size=4, seed=0, h=1e-4, gamma=0.99, floor=DENOMINATOR_FLOOR):
    """Compare backprop with central differences for both losses, every coordinate.

    The critic loss is checked against the critic MLP and the agent loss
    against the recommender and classifier parameters, matching which
    sets each loss trains.
    """
    emb, nets, targets, batch = random_problem(dim, n_items, batch_size, seed)
    results = _check("critic_loss", lambda: critic_loss(batch, nets, targets, gamma, emb),
                     {"critic": nets.critic.params}, h, floor)
    results += _check("agent_loss", lambda: agent_loss(batch, nets, emb),
                      {"recommender": nets.recommender.params, "classifier": nets.classifier.params}, h, floor)
    worst = max(results, key=lambda r: r.rel_error)
    logger.info("gradient check: %d coordinates, worst rel error %.3g (%s %s%s)", len(results),
                worst.rel_error, worst.loss, worst.name, list(worst.index))
    return results
