"""Ranking evaluation, the classifier-free ablation and robustness noise."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .agents import EpisodeState, classifier_forward, rank_items, recommender_forward
from .corpus import DataError, DatasetSplit, Interaction, UserSequence, rare_categories
from .env import apply_classification
from .seeding import component_rng

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)
NOISE_LEVELS = (0.1, 0.2, 0.4, 0.8)


@dataclass(frozen=True)
class RankedList:
    target: str
    ranking: tuple
    rank_of_target: Optional[int]

    @classmethod
    def build(cls, target, ranking):
        ranking = tuple(ranking)
        try:
            rank = ranking.index(target) + 1
        except ValueError:
            rank = None
        return cls(target, ranking, rank)


@dataclass
class MetricReport:
    ks: list
    hr: dict
    recall: dict
    ndcg: dict
    model: str = "TIARec"
    n_users: int = 0
    per_user: dict = field(default_factory=dict)

    def rows(self):
        return [{"model": self.model, "k": k, "hr": self.hr[k], "recall": self.recall[k], "ndcg": self.ndcg[k]}
                for k in self.ks]

    def to_dict(self):
        return {"model": self.model, "ks": list(self.ks), "n_users": self.n_users,
                "hr": {str(k): v for k, v in self.hr.items()},
                "recall": {str(k): v for k, v in self.recall.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()}}


def write_reports_csv(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "k", "hr", "recall", "ndcg"], lineterminator="\n")
        w.writeheader()
        for report in reports:
            for row in report.rows():
                w.writerow(row)
    return path


def write_reports_json(reports, path):
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")


# -------------------------------------------------------------------- metrics

def compute_metrics(lists, ks=DEFAULT_KS, model="TIARec", keep_per_user=False):
    """HR@k, Recall@k and NDCG@k over users' per-instance ranked lists.

    A missing target counts as rank infinity.
    """
    if not lists:
        raise ValueError("compute_metrics needs at least one user")
    ks = sorted(set(int(k) for k in ks))
    hr = {k: 0.0 for k in ks}
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    per_user = {}
    for user, instances in lists.items():
        n = len(instances)
        if n == 0:
            raise ValueError(f"user {user!r} has no test instances")
        ranks = [r.rank_of_target for r in instances]
        row = {}
        for k in ks:
            hits = [rank for rank in ranks if rank is not None and rank <= k]
            s_k = len(hits)
            u_hr = 1.0 if s_k >= 1 else 0.0
            u_recall = s_k / n
            u_ndcg = sum(1.0 / math.log2(1 + rank) for rank in hits) / n
            hr[k] += u_hr
            recall[k] += u_recall
            ndcg[k] += u_ndcg
            row[k] = (u_hr, u_recall, u_ndcg)
        if keep_per_user:
            per_user[user] = row
    m = len(lists)
    return MetricReport(ks, {k: v / m for k, v in hr.items()}, {k: v / m for k, v in recall.items()},
                        {k: v / m for k, v in ndcg.items()}, model, m, per_user)


def expected_random_hr(lists, k, n_items):
    """Analytic HR@k when every instance gets an independent uniformly random ranking."""
    p = min(1.0, k / n_items)
    return sum(1.0 - (1.0 - p) ** len(v) for v in lists.values()) / len(lists)


# ----------------------------------------------------------- eval-time states

def _classify_item(classifier, state, item, emb):
    return classifier_forward(classifier, state, emb[item], emb) > 0.5


def build_eval_state(user_id, history, classifier, emb, use_classifier=True):
    """Replay logged items, splitting them into M/N by thresholding a_c at 0.5."""
    state = EpisodeState(user_id)
    for item in history:
        atypical = use_classifier and _classify_item(classifier, state, item, emb)
        state = apply_classification(state, item, atypical)
    return state


def rank_for_instance(nets, state, emb, target=None, exclude_seen=False):
    proto = recommender_forward(nets.recommender, state, emb)
    order = rank_items(proto, emb, exclude=state.all if exclude_seen else None)
    return RankedList.build(target, [emb.keys[j] for j in order])


def ranked_lists(nets, split, emb, part="test", use_classifier=True, exclude_seen=False):
    """Teacher-forced lists: instance i is ranked from the true logged prefix."""
    source = getattr(split, part)
    lists = {}
    for user in split.user_vocabulary:
        if user not in source:
            continue
        prefix = []
        for name in ("train", "validation", "test"):
            if name == part:
                break
            seq = getattr(split, name).get(user)
            if seq is not None:
                prefix.extend(seq.items)
        if not prefix:
            logger.debug("user %s skipped: empty history", user)
            continue
        state = build_eval_state(user, prefix, nets.classifier, emb, use_classifier)
        out = []
        for ev in source[user].events:
            out.append(rank_for_instance(nets, state, emb, ev.item_id, exclude_seen))
            atypical = use_classifier and _classify_item(nets.classifier, state, ev.item_id, emb)
            state = apply_classification(state, ev.item_id, atypical)
        lists[user] = out
    return lists


def evaluate(nets, split, emb, ks=DEFAULT_KS, part="test", use_classifier=True, exclude_seen=False,
             model="TIARec"):
    lists = ranked_lists(nets, split, emb, part, use_classifier, exclude_seen)
    return compute_metrics(lists, ks, model)


# ---------------------------------------------------------------- robustness

def _choose_windows(n_events, n_windows, window, rng):
    taken = np.zeros(n_events, dtype=bool)
    spans = []
    for _ in range(n_windows):
        valid = [s for s in range(n_events) if not taken[s:min(s + window, n_events)].any()]
        if not valid:
            break
        s = valid[int(rng.integers(len(valid)))]
        end = min(s + window, n_events)
        taken[s:end] = True
        spans.append((s, end))
    return sorted(spans)


def inject_robustness_noise(split, noise_level, seed=0, window=5, rare_fraction=0.2):
    """Overwrite windows of consecutive test events with items of one rare category.

    A category qualifies when its interaction count is below
    ``rare_fraction`` times the mean category count.  Each user gets
    ``noise_level * N_u / window`` windows in expectation: the integer part
    always, the fractional part as a coin flip.
    """
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must lie in [0, 1], got {noise_level}")
    if noise_level == 0.0:
        return split
    rare, counts = rare_categories(split, rare_fraction)
    if not rare:
        mean = sum(counts.values()) / max(1, len(counts))
        raise DataError(
            f"no category has fewer than {rare_fraction:.0%} of the mean count {mean:.1f}; "
            f"counts: {dict(sorted(counts.items()))}"
        )
    pools = {c: [i for i in split.item_vocabulary if split.category_index.get(i) == c] for c in sorted(rare)}
    categories = sorted(pools)
    rng = component_rng(seed, f"robustness-{noise_level}")
    test = {}
    for user in split.user_vocabulary:
        if user not in split.test:
            continue
        events = list(split.test[user].events)
        expected = noise_level * len(events) / window
        n_windows = int(expected) + int(rng.random() < expected - int(expected))
        for start, end in _choose_windows(len(events), n_windows, window, rng):
            cat = categories[int(rng.integers(len(categories)))]
            pool = pools[cat]
            for pos in range(start, end):
                ev = events[pos]
                item = pool[int(rng.integers(len(pool)))]
                events[pos] = Interaction(ev.user_id, item, ev.rating, ev.timestamp, cat)
        test[user] = UserSequence(user, tuple(events))
    return DatasetSplit(split.train, split.validation, test, split.item_vocabulary,
                        split.user_vocabulary, split.category_index)


def replaced_windows(original, perturbed):
    """(user, start, end, category) spans where item ids differ; a scanning helper."""
    spans = []
    for user, seq in perturbed.test.items():
        a = original.test[user].items
        b = seq.items
        pos = 0
        while pos < len(b):
            if a[pos] != b[pos] or seq.events[pos].category != original.test[user].events[pos].category:
                start = pos
                while pos < len(b) and (a[pos] != b[pos]
                                        or seq.events[pos].category != original.test[user].events[pos].category):
                    pos += 1
                spans.append((user, start, pos, seq.events[start].category))
            else:
                pos += 1
    return spans


def run_robustness(nets, split, emb, levels=NOISE_LEVELS, seed=0, ks=DEFAULT_KS, use_classifier=True,
                   exclude_seen=False):
    reports = {}
    for level in levels:
        noisy = inject_robustness_noise(split, level, seed)
        reports[level] = evaluate(nets, noisy, emb, ks, use_classifier=use_classifier, exclude_seen=exclude_seen,
                                  model=f"TIARec@noise={level}")
    return reports


def write_robustness_curve(reports, path, k=10):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["noise_level", f"hr@{k}", f"recall@{k}", f"ndcg@{k}"])
        for level, rep in sorted(reports.items()):
            w.writerow([level, rep.hr[k], rep.recall[k], rep.ndcg[k]])
    return path


# ------------------------------------------------------------------ ablation

def ablated_config(cfg):
    """Classifier removed: alpha = 0, a_c pinned at 0.5, everything lands in M."""
    return replace(cfg, alpha=0.0, use_classifier=False)


def run_ablation(split, emb, factors, cfg, ks=DEFAULT_KS, exclude_seen=False):
    """Train TIARec and TIARec-C under the same seed; returns reports and networks."""
    from .trainer import train

    full_nets, _, full_log = train(split, emb, factors, cfg)
    ab_cfg = ablated_config(cfg)
    ab_nets, _, ab_log = train(split, emb, factors, ab_cfg)
    reports = {
        "TIARec": evaluate(full_nets, split, emb, ks, exclude_seen=exclude_seen, model="TIARec"),
        "TIARec-C": evaluate(ab_nets, split, emb, ks, use_classifier=False, exclude_seen=exclude_seen,
                             model="TIARec-C"),
    }
    return reports, {"TIARec": (full_nets, full_log), "TIARec-C": (ab_nets, ab_log)}
