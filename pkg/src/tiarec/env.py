"""Offline simulated environment: state updates, rewards and the replay buffer."""

import json
from dataclasses import dataclass

import numpy as np

from .agents import EpisodeState, cosine_scores
from .pretrain import pmf_probabilities

EMPTY_SET_SIMILARITY = 0.5


@dataclass(frozen=True)
class Transition:
    state_before: EpisodeState
    a_r_item: str
    a_c_prob: float
    classified_atypical: bool
    reward: float
    state_after: EpisodeState

    def to_json(self):
        return json.dumps({
            "user_id": self.state_before.user_id,
            "state_before": {"all": list(self.state_before.all), "normal": list(self.state_before.normal),
                             "atypical": list(self.state_before.atypical)},
            "a_r_item": self.a_r_item,
            "a_c_prob": self.a_c_prob,
            "classified_atypical": self.classified_atypical,
            "reward": self.reward,
        })


def apply_classification(state, item, classified_atypical):
    """Append ``item`` to O and to exactly one of N (atypical) or M (normal)."""
    if classified_atypical:
        return EpisodeState(state.user_id, state.all + (item,), state.normal, state.atypical + (item,))
    return EpisodeState(state.user_id, state.all + (item,), state.normal + (item,), state.atypical)


def recommender_reward(factors, user_id, top_k):
    """Mean PMF interaction probability over the recommended list."""
    if len(top_k) < 1:
        raise ValueError("recommended list must hold at least one item")
    return float(np.mean(pmf_probabilities(factors, user_id, list(top_k))))


def mean_similarity(items, a_r, emb):
    if not items:
        return EMPTY_SET_SIMILARITY
    return float(np.mean(cosine_scores(a_r, emb.rows(list(items)))))


def classifier_reward(state, a_r, classified_atypical, emb, clamp=True):
    """Dissimilarity to N when judged atypical, similarity to M when judged normal.

    ``state`` must be the state before the item is inserted.
    """
    a_r = np.asarray(a_r, dtype=np.float64)
    if classified_atypical:
        reward = 1.0 - mean_similarity(state.atypical, a_r, emb)
    else:
        reward = mean_similarity(state.normal, a_r, emb)
    return min(1.0, max(0.0, reward)) if clamp else reward


def total_reward(r_rec, r_cls, alpha):
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return r_rec + alpha * r_cls


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform minibatch sampling."""

    def __init__(self, capacity=2000):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._slots = []
        self._next = 0

    def __len__(self):
        return len(self._slots)

    def push(self, transition):
        if len(self._slots) < self.capacity:
            self._slots.append(transition)
        else:
            self._slots[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def entries(self):
        """Oldest first."""
        if len(self._slots) < self.capacity:
            return list(self._slots)
        return self._slots[self._next:] + self._slots[:self._next]

    def sample(self, batch_size, rng):
        if batch_size > len(self._slots):
            raise ValueError(f"cannot sample {batch_size} from a buffer holding {len(self._slots)}")
        picks = rng.choice(len(self._slots), size=batch_size, replace=False)
        return [self._slots[i] for i in picks]


def buffer_push(buffer, transition):
    buffer.push(transition)


def buffer_sample(buffer, batch_size, rng):
    return buffer.sample(batch_size, rng)
