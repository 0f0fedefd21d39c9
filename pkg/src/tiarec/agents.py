"""Recommender agent, classifier agent and shared critic.

States are batched into padded arrays so that a minibatch passes through
each network in one sweep.  Single-state helpers wrap the batched path.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import MLPSpec, ParameterSet

logger = logging.getLogger(__name__)

_warned_zero_prototype = False


@dataclass(frozen=True)
class EpisodeState:
    """All / normal / atypical interaction lists for one user (ordered multisets)."""

    user_id: str
    all: tuple = ()
    normal: tuple = ()
    atypical: tuple = ()
    _index_cache: dict = field(default=None, compare=False, repr=False, hash=False)

    def indices(self, emb):
        """(all, normal, atypical) as integer row arrays of ``emb``, computed once."""
        cache = self._index_cache
        if cache is None or cache[0] is not emb:
            lookup = emb.index
            try:
                arrays = tuple(np.fromiter((lookup[i] for i in part), dtype=np.int64, count=len(part))
                               for part in (self.all, self.normal, self.atypical))
            except KeyError as exc:
                raise KeyError(f"item {exc.args[0]!r} has no embedding") from None
            cache = (emb, arrays)
            object.__setattr__(self, "_index_cache", cache)
        return cache[1]

    def partition_holds(self):
        return Counter(self.all) == Counter(self.normal) + Counter(self.atypical)

    def __len__(self):
        return len(self.all)


def empty_state(user_id):
    return EpisodeState(user_id)


# ------------------------------------------------------------------ batching

def _pad(index_arrays, emb):
    b = len(index_arrays)
    lengths = np.array(list(map(len, index_arrays)), dtype=np.int64)
    width = max(1, int(lengths.max(initial=0)))
    mask = np.arange(width)[None, :] < lengths[:, None]
    idx = np.zeros((b, width), dtype=np.int64)
    if lengths.sum():
        idx[mask] = np.concatenate(index_arrays)
    return emb.matrix[idx], mask


class StateBatch:
    """Padded embeddings of O, M and N for a list of states."""

    def __init__(self, states, emb):
        self.states = list(states)
        self.size = len(self.states)
        parts = [s.indices(emb) for s in self.states]
        self.all, self.all_mask = _pad([p[0] for p in parts], emb)
        self.normal, self.normal_mask = _pad([p[1] for p in parts], emb)
        self.atypical, self.atypical_mask = _pad([p[2] for p in parts], emb)


def _params_view(params, frozen):
    return params.constants() if frozen else params


# -------------------------------------------------------------------- agents

class RecommenderAgent:
    """Attention over O with a learned query, then MLP_r to a prototype item."""

    def __init__(self, dim, rng=None, params=None):
        self.dim = dim
        self.spec = MLPSpec([dim, 2 * dim, dim], hidden="relu", output="identity")
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = ParameterSet()
            params.add("attn.W", nn.glorot(rng, dim, dim))
            params.add("attn.b", np.zeros(dim))
            params.add("attn.q", nn.glorot(rng, 1, dim)[0])
            nn.init_mlp(self.spec, rng, params, prefix="mlp")
        self.params = params

    def encode(self, batch, frozen=False):
        p = _params_view(self.params, frozen)
        return nn.attention_pool_batch(batch.all, batch.all_mask, p["attn.W"], p["attn.b"], p["attn.q"])

    def prototype(self, z, frozen=False):
        return nn.mlp_apply(self.spec, _params_view(self.params, frozen), z, prefix="mlp")

    def copy(self):
        return RecommenderAgent(self.dim, params=self.params.copy())


class ClassifierAgent:
    """Two query-driven attentions over N and M, then a logistic MLP_c."""

    def __init__(self, dim, rng=None, params=None):
        self.dim = dim
        self.spec = MLPSpec([2 * dim, 2 * dim, 1], hidden="relu", output="logistic")
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(1)
            params = ParameterSet()
            params.add("attn_n.W", nn.glorot(rng, dim, dim))
            params.add("attn_n.b", np.zeros(dim))
            params.add("attn_m.W", nn.glorot(rng, dim, dim))
            params.add("attn_m.b", np.zeros(dim))
            nn.init_mlp(self.spec, rng, params, prefix="mlp")
        self.params = params

    def encode(self, batch, query, frozen=False):
        p = _params_view(self.params, frozen)
        z_n = nn.attention_pool_batch(batch.atypical, batch.atypical_mask, p["attn_n.W"], p["attn_n.b"], query)
        z_m = nn.attention_pool_batch(batch.normal, batch.normal_mask, p["attn_m.W"], p["attn_m.b"], query)
        return z_n, z_m

    def probability(self, z_n, z_m, frozen=False):
        return nn.mlp_apply(self.spec, _params_view(self.params, frozen), nn.concat([z_n, z_m]), prefix="mlp")

    def copy(self):
        return ClassifierAgent(self.dim, params=self.params.copy())


class Critic:
    """MLP_q over a ⊕ a_c ⊕ z° ⊕ z^n ⊕ z^m; the pooled inputs come from the agents' encoders."""

    def __init__(self, dim, rng=None, params=None):
        self.dim = dim
        self.spec = MLPSpec([4 * dim + 1, 2 * dim, 1], hidden="relu", output="identity")
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(2)
            params = nn.init_mlp(self.spec, rng, ParameterSet(), prefix="mlp")
        self.params = params

    def value(self, action, a_c, z_o, z_n, z_m, frozen=False):
        x = nn.concat([nn.as_tensor(action), nn.as_tensor(a_c), z_o, z_n, z_m])
        return nn.mlp_apply(self.spec, _params_view(self.params, frozen), x, prefix="mlp")

    def copy(self):
        return Critic(self.dim, params=self.params.copy())


class Networks:
    """Recommender, classifier and critic trained together."""

    def __init__(self, recommender, classifier, critic):
        self.recommender = recommender
        self.classifier = classifier
        self.critic = critic

    @classmethod
    def create(cls, dim, rng):
        return cls(RecommenderAgent(dim, rng), ClassifierAgent(dim, rng), Critic(dim, rng))

    @property
    def dim(self):
        return self.recommender.dim

    def groups(self):
        return {"recommender": self.recommender.params,
                "classifier": self.classifier.params,
                "critic": self.critic.params}

    def copy(self):
        return Networks(self.recommender.copy(), self.classifier.copy(), self.critic.copy())

    def values_equal(self, other):
        return all(a.values_equal(b) for a, b in zip(self.groups().values(), other.groups().values()))

    # -- batched passes (Tensor in/out)

    def prototypes(self, batch, frozen=False):
        z_o = self.recommender.encode(batch, frozen)
        return z_o, self.recommender.prototype(z_o, frozen)

    def q_value(self, batch, action, a_c, z_o=None, frozen_critic=False, frozen_encoders=False):
        """Critic estimate; z^n/z^m pool with ``action`` as the query."""
        if z_o is None:
            z_o = self.recommender.encode(batch, frozen_encoders)
        z_n, z_m = self.classifier.encode(batch, action, frozen_encoders)
        return self.critic.value(action, a_c, z_o, z_n, z_m, frozen_critic)


# ------------------------------------------------------- single-state helpers

def recommender_forward(agent, state, emb):
    """Prototype item embedding for one state (numpy d-vector)."""
    with nn.no_grad():
        batch = StateBatch([state], emb)
        return agent.prototype(agent.encode(batch)).data[0]


def classifier_forward(agent, state, query, emb):
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (agent.dim,):
        raise ValueError(f"query must have shape ({agent.dim},), got {query.shape}")
    with nn.no_grad():
        batch = StateBatch([state], emb)
        z_n, z_m = agent.encode(batch, query[None])
        return float(agent.probability(z_n, z_m).data[0, 0])


def critic_forward(nets, state, action, a_c, emb):
    """Critic value of (state, action ⊕ a_c) using the shared state encoders."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (nets.dim,):
        raise ValueError(f"action must have shape ({nets.dim},), got {action.shape}")
    if not 0.0 <= a_c <= 1.0:
        raise ValueError(f"a_c must lie in [0, 1], got {a_c}")
    with nn.no_grad():
        batch = StateBatch([state], emb)
        return float(nets.q_value(batch, action[None], np.array([[a_c]])).data[0, 0])


# ------------------------------------------------------------ item selection

def cosine_scores(prototype, matrix):
    prototype = np.asarray(prototype, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=-1)
    pnorm = np.linalg.norm(prototype, axis=-1)
    dots = matrix @ prototype.T if prototype.ndim > 1 else matrix @ prototype
    if prototype.ndim > 1:
        denom = np.outer(norms, pnorm)
    else:
        denom = norms * pnorm
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def rank_items(prototype, emb, exclude=None):
    """Vocabulary positions sorted by descending cosine; ties keep vocabulary order."""
    global _warned_zero_prototype
    prototype = np.asarray(prototype, dtype=np.float64)
    if not np.any(prototype):
        if not _warned_zero_prototype:
            logger.warning("zero prototype vector: cosine undefined, ranking by dot product")
            _warned_zero_prototype = True
        scores = emb.matrix @ prototype
    else:
        scores = cosine_scores(prototype, emb.matrix)
    order = np.argsort(-scores, kind="stable")
    if exclude:
        banned = {emb.index[i] for i in exclude if i in emb.index}
        order = np.array([j for j in order if j not in banned], dtype=np.int64)
    return order


def top_k_items(prototype, emb, k, exclude=None):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = rank_items(prototype, emb, exclude)
    if k > len(order):
        raise ValueError(f"k={k} exceeds the {len(order)} available items")
    return [emb.keys[j] for j in order[:k]]


def select_action(prototype, emb, exploration_sigma=0.0, rng=None):
    """Nearest catalogue item to the (optionally noise-perturbed) prototype."""
    if len(emb) == 0:
        raise ValueError("empty embedding table")
    prototype = np.asarray(prototype, dtype=np.float64)
    if exploration_sigma > 0:
        if rng is None:
            raise ValueError("exploration needs an rng")
        prototype = prototype + rng.normal(0.0, exploration_sigma, size=prototype.shape)
    item = emb.keys[rank_items(prototype, emb)[0]]
    return item, emb[item].copy()


def nearest_items_batch(prototypes, emb):
    """Row-wise cosine argmax (first index wins ties) for a (B, d) array."""
    scores = cosine_scores(prototypes, emb.matrix).T          # (B, n_items)
    zero = ~np.any(prototypes, axis=1)
    if zero.any():
        scores[zero] = prototypes[zero] @ emb.matrix.T
    return np.argmax(scores, axis=1)
