"""Joint actor-critic training of the recommender and classifier agents."""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .agents import (
    ClassifierAgent,
    Critic,
    EpisodeState,
    Networks,
    RecommenderAgent,
    StateBatch,
    nearest_items_batch,
    rank_items,
)
from .env import (
    ReplayBuffer,
    Transition,
    apply_classification,
    classifier_reward,
    recommender_reward,
    total_reward,
)
from .seeding import component_rng

logger = logging.getLogger(__name__)

NO_CLASSIFIER_PROB = 0.5

TRAINLOG_HEADER = ("epoch", "average_q", "mean_reward_rec", "mean_reward_cls",
                   "critic_loss", "agent_loss", "updates")


class NumericError(ArithmeticError):
    """A loss or estimate became NaN or infinite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.01
    alpha: float = 0.1
    buffer_capacity: int = 2000
    batch_size: int = 64
    reward_k: int = 10
    horizon: int = 50
    sigma_start: float = 0.1
    sigma_end: float = 0.0
    epochs: int = 50
    seed: int = 0
    optimizer: str = "sgd"
    use_classifier: bool = True
    clamp_classifier_reward: bool = True
    warm_start: int = 0
    checkpoint_every: int = 0

    def validate(self):
        problems = []
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if not 0 < self.gamma <= 1:
            problems.append("gamma must lie in (0, 1]")
        if not 0 <= self.tau <= 1:
            problems.append("tau must lie in [0, 1]")
        if self.alpha < 0:
            problems.append("alpha must be >= 0")
        for name in ("buffer_capacity", "batch_size", "reward_k", "horizon"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.batch_size > self.buffer_capacity:
            problems.append("batch_size must not exceed buffer_capacity")
        if self.sigma_start < 0 or self.sigma_end < 0:
            problems.append("exploration sigma must be >= 0")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            problems.append("optimizer must be 'sgd' or 'adam'")
        if self.warm_start < 0 or self.checkpoint_every < 0:
            problems.append("warm_start and checkpoint_every must be >= 0")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))
        return self

    def sigma_at(self, epoch):
        """Linear anneal from sigma_start at epoch 0 towards sigma_end at the last epoch."""
        if self.epochs <= 1:
            return self.sigma_start
        frac = epoch / (self.epochs - 1)
        return self.sigma_start + (self.sigma_end - self.sigma_start) * frac

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class EpochRecord:
    epoch: int
    average_q: float
    mean_reward_rec: float
    mean_reward_cls: float
    critic_loss: float
    agent_loss: float
    updates: int
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def average_q(self):
        return [r.average_q for r in self.records]

    def write_csv(self, path):
        """Deterministic columns only; wall time goes to :meth:`write_timings`."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAINLOG_HEADER)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in TRAINLOG_HEADER[1:-1]] + [r.updates])
        return path

    def write_timings(self, path):
        Path(path).write_text("".join(f"{r.epoch},{r.wall_time:.3f}\n" for r in self.records))

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["average_q"]), float(r["mean_reward_rec"]),
                                float(r["mean_reward_cls"]), float(r["critic_loss"]),
                                float(r["agent_loss"]), int(r["updates"])) for r in rows])


def average_q(per_user_estimates):
    """Mean over users of each user's mean critic estimate."""
    if not per_user_estimates:
        raise ValueError("average_q needs at least one user")
    means = []
    for user, values in per_user_estimates.items():
        if len(values) == 0:
            raise ValueError(f"user {user!r} has no critic estimates")
        means.append(sum(values) / len(values))
    return sum(means) / len(means)


# --------------------------------------------------------------------- losses

def _action_rows(batch, emb):
    return emb.rows([t.a_r_item for t in batch])


def td_targets(batch, targets, gamma, emb, use_classifier=True):
    """r + gamma * Q'(s', a'_r ⊕ a'_c) with every quantity from the target networks."""
    nxt = StateBatch([t.state_after for t in batch], emb)
    rewards = np.array([t.reward for t in batch])
    with nn.no_grad():
        z_o, proto = targets.prototypes(nxt)
        a_r = emb.matrix[nearest_items_batch(proto.data, emb)]
        z_n, z_m = targets.classifier.encode(nxt, a_r)
        if use_classifier:
            a_c = targets.classifier.probability(z_n, z_m).data
        else:
            a_c = np.full((len(batch), 1), NO_CLASSIFIER_PROB)
        q_next = targets.critic.value(a_r, a_c, z_o, z_n, z_m).data[:, 0]
    return rewards + gamma * q_next


def td_target(transition, targets, gamma, emb, use_classifier=True):
    return float(td_targets([transition], targets, gamma, emb, use_classifier)[0])


def critic_loss(batch, nets, targets, gamma, emb, use_classifier=True, states=None):
    """Mean squared TD error; only the critic MLP receives gradient."""
    if not batch:
        raise ValueError("critic_loss needs a non-empty batch")
    q_t = td_targets(batch, targets, gamma, emb, use_classifier)
    sb = states if states is not None else StateBatch([t.state_before for t in batch], emb)
    a_c = np.array([[t.a_c_prob] for t in batch])
    q = nets.q_value(sb, _action_rows(batch, emb), a_c, frozen_encoders=True)
    return nn.mean(nn.square(nn.sub(q, q_t[:, None])))


def agent_loss(batch, nets, emb, use_classifier=True, states=None):
    """Mean of ||a_r - a_p||^2 - Q(s, a_p ⊕ a_c); the critic MLP is held fixed.

    a_p and a_c are recomputed from the stored state, with a_p as the
    classifier query, so both terms differentiate into both agents.
    """
    if not batch:
        raise ValueError("agent_loss needs a non-empty batch")
    sb = states if states is not None else StateBatch([t.state_before for t in batch], emb)
    a_r = _action_rows(batch, emb)
    z_o, a_p = nets.prototypes(sb)
    z_n, z_m = nets.classifier.encode(sb, a_p, frozen=not use_classifier)
    if use_classifier:
        a_c = nets.classifier.probability(z_n, z_m)
    else:
        a_c = nn.Tensor(np.full((len(batch), 1), NO_CLASSIFIER_PROB))
    q = nets.critic.value(a_p, a_c, z_o, z_n, z_m, frozen=True)
    match = nn.tsum(nn.square(nn.sub(a_r, a_p)), axis=-1)
    return nn.mean(nn.sub(match, nn.reshape(q, (len(batch),))))


# ----------------------------------------------------------------- training

class _Stepper:
    """Applies plain gradient steps or Adam to one parameter set."""

    def __init__(self, params, cfg):
        self.params = params
        self.lr = cfg.lr
        self.adam = nn.Adam(params, cfg.lr) if cfg.optimizer == "adam" else None

    def step(self):
        if self.adam is not None:
            self.adam.step()
        else:
            nn.sgd_step(self.params, self.lr)


class Trainer:
    """Holds networks, targets, buffer and RNG streams for one training run."""

    def __init__(self, split, emb, factors, cfg, nets=None, targets=None):
        cfg.validate()
        self.split, self.emb, self.factors, self.cfg = split, emb, factors, cfg
        missing = [i for i in split.item_vocabulary if i not in emb]
        if missing:
            raise KeyError(f"{len(missing)} vocabulary items lack embeddings, e.g. {missing[0]!r}")
        self.users = [u for u in split.user_vocabulary if u in split.train and len(split.train[u]) >= 2]
        absent = [u for u in self.users if u not in factors.users]
        if absent:
            raise KeyError(f"{len(absent)} training users lack PMF factors, e.g. {absent[0]!r}")
        if cfg.reward_k > len(emb):
            raise ValueError(f"reward_k={cfg.reward_k} exceeds catalogue size {len(emb)}")
        self.nets = nets if nets is not None else Networks.create(emb.dim, component_rng(cfg.seed, "init"))
        self.targets = targets if targets is not None else self.nets.copy()
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.rollout_rng = component_rng(cfg.seed, "rollout")
        self.buffer_rng = component_rng(cfg.seed, "replay")
        self.steppers = {
            "critic": _Stepper(self.nets.critic.params, cfg),
            "recommender": _Stepper(self.nets.recommender.params, cfg),
            "classifier": _Stepper(self.nets.classifier.params, cfg),
        }
        self.update_trace = []
        self.trace_updates = False
        self.transition_sink = None

    # -- one environment step

    def _pool_step(self, state):
        """z°, prototype, and a closure finishing the classifier/critic pass for an action."""
        sb = StateBatch([state], self.emb)
        with nn.no_grad():
            z_o, proto = self.nets.prototypes(sb)

        def finish(a_r):
            with nn.no_grad():
                z_n, z_m = self.nets.classifier.encode(sb, a_r[None])
                if self.cfg.use_classifier:
                    a_c = float(self.nets.classifier.probability(z_n, z_m).data[0, 0])
                else:
                    a_c = NO_CLASSIFIER_PROB
                q = float(self.nets.critic.value(a_r[None], np.array([[a_c]]), z_o, z_n, z_m).data[0, 0])
            return a_c, q

        return proto.data[0], finish

    def _classify(self, a_c):
        if not self.cfg.use_classifier:
            return False
        return bool(self.rollout_rng.random() < a_c)

    def warm_state(self, user):
        state = EpisodeState(user)
        for item in self.split.train[user].items[:self.cfg.warm_start]:
            _, finish = self._pool_step(state)
            a_c, _ = finish(self.emb[item])
            state = apply_classification(state, item, self._classify(a_c))
        return state

    def step(self, state, sigma):
        cfg, emb = self.cfg, self.emb
        proto, finish = self._pool_step(state)
        if sigma > 0:
            proto = proto + self.rollout_rng.normal(0.0, sigma, size=proto.shape)
        order = rank_items(proto, emb)
        item = emb.keys[order[0]]
        a_r = emb.matrix[order[0]]
        top_k = [emb.keys[j] for j in order[:cfg.reward_k]]
        r_rec = recommender_reward(self.factors, state.user_id, top_k)
        a_c, q_hat = finish(a_r)
        atypical = self._classify(a_c)
        r_cls = (classifier_reward(state, a_r, atypical, emb, cfg.clamp_classifier_reward)
                 if cfg.use_classifier else 0.0)
        reward = total_reward(r_rec, r_cls, cfg.alpha if cfg.use_classifier else 0.0)
        nxt = apply_classification(state, item, atypical)
        return Transition(state, item, a_c, atypical, reward, nxt), q_hat, r_rec, r_cls

    # -- one minibatch update

    def update(self):
        cfg = self.cfg
        batch = self.buffer.sample(cfg.batch_size, self.buffer_rng)

        states = StateBatch([t.state_before for t in batch], self.emb)
        lq = critic_loss(batch, self.nets, self.targets, cfg.gamma, self.emb, cfg.use_classifier, states)
        nn.backward(lq)
        self.steppers["critic"].step()
        if self.trace_updates:
            self.update_trace.append("critic")

        lrc = agent_loss(batch, self.nets, self.emb, cfg.use_classifier, states)
        nn.backward(lrc)
        self.nets.critic.params.zero_grad()
        self.steppers["recommender"].step()
        if cfg.use_classifier:
            self.steppers["classifier"].step()
        else:
            self.nets.classifier.params.zero_grad()
        if self.trace_updates:
            self.update_trace.append("agents")

        for online, target in zip(self.nets.groups().values(), self.targets.groups().values()):
            nn.soft_update(target, online, cfg.tau)
        if self.trace_updates:
            self.update_trace.append("targets")

        lq_v, lrc_v = float(lq.data), float(lrc.data)
        if not (np.isfinite(lq_v) and np.isfinite(lrc_v)):
            raise NumericError(f"non-finite loss (critic={lq_v}, agents={lrc_v})")
        return lq_v, lrc_v

    # -- epochs

    def run_epoch(self, epoch):
        cfg = self.cfg
        start = time.perf_counter()
        sigma = self.cfg.sigma_at(epoch)
        per_user_q, r_recs, r_clss, lqs, lrcs = {}, [], [], [], []
        for ui in self.rollout_rng.permutation(len(self.users)):
            user = self.users[ui]
            state = self.warm_state(user) if cfg.warm_start else EpisodeState(user)
            horizon = min(len(self.split.train[user]), cfg.horizon)
            qs = per_user_q.setdefault(user, [])
            for _ in range(horizon):
                transition, q_hat, r_rec, r_cls = self.step(state, sigma)
                qs.append(q_hat)
                r_recs.append(r_rec)
                r_clss.append(r_cls)
                self.buffer.push(transition)
                if self.transition_sink is not None:
                    self.transition_sink.write(transition.to_json() + "\n")
                if len(self.buffer) >= cfg.batch_size:
                    lq, lrc = self.update()
                    lqs.append(lq)
                    lrcs.append(lrc)
                state = transition.state_after
        avg_q = average_q(per_user_q)
        if not np.isfinite(avg_q):
            raise NumericError(f"non-finite Average-Q at epoch {epoch}")
        return EpochRecord(
            epoch=epoch,
            average_q=avg_q,
            mean_reward_rec=float(np.mean(r_recs)),
            mean_reward_cls=float(np.mean(r_clss)),
            critic_loss=float(np.mean(lqs)) if lqs else float("nan"),
            agent_loss=float(np.mean(lrcs)) if lrcs else float("nan"),
            updates=len(lqs),
            wall_time=time.perf_counter() - start,
        )

    def fit(self, checkpoint_path=None, start_epoch=0):
        log = TrainLog()
        if not self.users:
            raise ValueError("no user has at least two training events")
        for epoch in range(start_epoch, self.cfg.epochs):
            record = self.run_epoch(epoch)
            log.records.append(record)
            logger.info("epoch %d average_q=%.4f r_rec=%.4f critic=%.4f", epoch, record.average_q,
                        record.mean_reward_rec, record.critic_loss)
            every = self.cfg.checkpoint_every
            if checkpoint_path is not None and every and (epoch + 1) % every == 0:
                self.save(checkpoint_path, epoch + 1)
        return log

    def save(self, path, epochs_completed):
        save_networks(path, self.nets, self.targets, {"epochs_completed": epochs_completed,
                                                       "config": asdict(self.cfg)})


def train(split, emb, factors, cfg, checkpoint_path=None, resume_from=None):
    """Run the full training loop; returns ``(networks, targets, TrainLog)``."""
    cfg.validate()
    nets = targets = None
    start_epoch = 0
    if resume_from is not None:
        nets, targets, meta = load_networks(resume_from)
        start_epoch = int(meta.get("epochs_completed", 0))
    trainer = Trainer(split, emb, factors, cfg, nets, targets)
    log = trainer.fit(checkpoint_path, start_epoch)
    if checkpoint_path is not None:
        trainer.save(checkpoint_path, cfg.epochs)
    return trainer.nets, trainer.targets, log


# --------------------------------------------------------------- checkpoints

def save_networks(path, nets, targets=None, meta=None):
    groups = dict(nets.groups())
    if targets is not None:
        groups.update({f"target_{k}": v for k, v in targets.groups().items()})
    meta = dict(meta or {})
    meta["dim"] = nets.dim
    nn.save_checkpoint(path, groups, meta)


def load_networks(path):
    groups, meta = nn.load_checkpoint(path)
    dim = int(meta["dim"])

    def build(prefix):
        return Networks(RecommenderAgent(dim, params=groups[f"{prefix}recommender"]),
                        ClassifierAgent(dim, params=groups[f"{prefix}classifier"]),
                        Critic(dim, params=groups[f"{prefix}critic"]))

    nets = build("")
    targets = build("target_") if "target_critic" in groups else nets.copy()
    return nets, targets, meta
