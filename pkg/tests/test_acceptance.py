"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to ``conftest.ACCEPTANCE_LINES``; the
lines are printed in the terminal summary.  Criteria 5 and 6 share one
desk-scale training run configured by ``configs/synthetic-desk.conf``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

import oracles
import test_properties
from conftest import ACCEPTANCE_LINES, perturbed_nets, random_emb, random_state, random_transition, toy_log
from tiarec import nn
from tiarec.cli import build_parser, resolve_options, run, train_config
from tiarec.corpus import build_split
from tiarec.env import ReplayBuffer, classifier_reward, recommender_reward
from tiarec.evaluation import (
    RankedList,
    compute_metrics,
    expected_random_hr,
    ranked_lists,
    run_ablation,
    run_robustness,
)
from tiarec.gradcheck import gradient_check
from tiarec.pretrain import ItemEmbeddingTable, PMFFactors, VectorTable, fit_pmf, pmf_probability
from tiarec.pretrain import pretrain_item_embeddings
from tiarec.synthetic import make_burst_dataset
from tiarec.trainer import TrainConfig, Trainer, average_q, td_target

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic-desk.conf"


def record(label, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


# ------------------------------------------------------------------ 1

def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = gradient_check(dim=4, n_items=3)
    elapsed = time.perf_counter() - start
    worst = max(r.rel_error for r in results)
    losses = {r.loss for r in results}
    ok = worst <= 1e-4 and elapsed < 10 and losses == {"critic_loss", "agent_loss"}
    record("1 gradient suite", ok, f"{len(results)} coordinates, worst rel error {worst:.2e}, {elapsed:.1f}s")


# ------------------------------------------------------------------ 2

def _oracle_errors(rng):
    """Largest absolute deviation per formula over 100 random instances each."""
    errs = {}

    def note(name, got, want):
        errs[name] = max(errs.get(name, 0.0), float(np.max(np.abs(np.asarray(got) - np.asarray(want)))))

    for _ in range(100):
        d, n = int(rng.integers(1, 6)), int(rng.integers(0, 6))
        items = rng.normal(size=(n, d))
        W, b, q = rng.normal(size=(d, d)), rng.normal(size=d), rng.normal(size=d)
        note("attention_pool", nn.attention_pool(list(items), W, b, q),
             oracles.attention_pool(items.tolist(), W.tolist(), b.tolist(), q.tolist()))

        widths = [int(w) for w in rng.integers(1, 6, size=int(rng.integers(2, 5)))]
        spec = nn.MLPSpec(widths, hidden=str(rng.choice(["relu", "tanh"])),
                          output=str(rng.choice(["identity", "logistic"])))
        params = nn.init_mlp(spec, rng)
        for _, p in params.items():
            p.data += rng.normal(scale=0.5, size=p.data.shape)
        x = rng.normal(size=widths[0])
        note("mlp_forward", nn.mlp_forward(spec, params, x),
             oracles.mlp(oracles.mlp_layers(params), x.tolist(), spec.hidden, spec.output))

        u, v = rng.normal(scale=2, size=d), rng.normal(scale=2, size=d)
        factors = PMFFactors(VectorTable(["u"], u[None]), ItemEmbeddingTable(["v"], v[None]))
        note("pmf_probability", pmf_probability(factors, "u", "v"), oracles.logistic(oracles.dot(u.tolist(), v.tolist())))

        k = int(rng.integers(1, 11))
        vs = rng.normal(size=(k, d))
        keys = [f"v{j}" for j in range(k)]
        factors = PMFFactors(VectorTable(["u"], u[None]), ItemEmbeddingTable(keys, vs))
        note("recommender_reward", recommender_reward(factors, "u", keys),
             oracles.recommender_reward(u.tolist(), vs.tolist()))

        emb = random_emb(rng, n_items=5, dim=3)
        state = random_state(rng, emb, max_len=6)
        a_r, odd = rng.normal(size=3), bool(rng.random() < 0.5)
        note("classifier_reward", classifier_reward(state, a_r, odd, emb),
             oracles.classifier_reward([emb[i].tolist() for i in state.normal],
                                       [emb[i].tolist() for i in state.atypical], a_r.tolist(), odd))

        targets = perturbed_nets(3, rng)
        t = random_transition(rng, emb)
        note("td_target", td_target(t, targets, 0.99, emb), oracles.td_target(t, targets, 0.99, emb))

        est = {f"u{m}": rng.normal(size=int(rng.integers(1, 6))).tolist() for m in range(int(rng.integers(1, 6)))}
        note("average_q", average_q(est), oracles.average_q(est))

        ranks = {f"u{m}": [None if rng.random() < 0.2 else int(rng.integers(1, 21))
                           for _ in range(int(rng.integers(1, 5)))] for m in range(int(rng.integers(1, 6)))}
        lists = {}
        for user, rs in ranks.items():
            lists[user] = []
            for r in rs:
                filler = [f"x{m}" for m in range(20)]
                if r is not None:
                    filler[r - 1] = "t"
                lists[user].append(RankedList.build("t", filler))
        report = compute_metrics(lists, ks=[5, 10, 20])
        for kk in report.ks:
            note("compute_metrics", [report.hr[kk], report.recall[kk], report.ndcg[kk]], oracles.metrics(ranks, kk))
    return errs


ARITHMETIC = {"pmf_probability", "recommender_reward", "classifier_reward", "average_q", "compute_metrics"}


def test_criterion_2_formula_oracles():
    start = time.perf_counter()
    errs = _oracle_errors(np.random.default_rng(2024))
    elapsed = time.perf_counter() - start
    bad = {k: e for k, e in errs.items() if e > (1e-12 if k in ARITHMETIC else 1e-10)}
    detail = ", ".join(f"{k} {e:.1e}" for k, e in sorted(errs.items()))
    record("2 formula oracles", len(errs) == 8 and not bad and elapsed < 30,
           f"8 formulas x 100 instances in {elapsed:.1f}s; max errors {detail}")


# ------------------------------------------------------------------ 3

def test_criterion_3_metric_hand_check():
    target_first = ["t1"] + [f"x{m}" for m in range(20)]
    target_eleventh = [f"y{m}" for m in range(10)] + ["t2"] + [f"y{m}" for m in range(10, 20)]
    lists = {"u": [RankedList.build("t1", target_first), RankedList.build("t2", target_eleventh)]}
    report = compute_metrics(lists, ks=[10])
    got = (report.hr[10], report.recall[10], report.ndcg[10])
    record("3 metric hand-check", got == (1.0, 0.5, 0.5), f"HR, Recall, NDCG at 10 = {got}")


# ------------------------------------------------------------------ 4

def _toy_world():
    events, cat = toy_log()
    split = build_split(events, cat)
    rng = np.random.default_rng(7)
    emb = ItemEmbeddingTable(list(split.item_vocabulary), rng.normal(size=(len(split.item_vocabulary), 4)))
    users = VectorTable(list(split.user_vocabulary), rng.normal(scale=0.5, size=(len(split.user_vocabulary), 4)))
    items = ItemEmbeddingTable(list(split.item_vocabulary), rng.normal(scale=0.5, size=(len(emb), 4)))
    return split, emb, PMFFactors(users, items)


def _snapshot(nets):
    return {g: {n: p.data.copy() for n, p in ps.items()} for g, ps in nets.groups().items()}


def _unchanged(before, nets, group):
    return all(np.array_equal(before[group][n], p.data) for n, p in nets.groups()[group].items())


def test_criterion_4_training_mechanics():
    checks = {}

    buf = ReplayBuffer()
    for j in range(2001):
        buf.push(j)
    checks["fifo 2000"] = (TrainConfig().buffer_capacity == 2000 and len(buf) == 2000
                           and buf.entries()[0] == 1 and buf.entries()[-1] == 2000)

    split, emb, pmf = _toy_world()
    gated = Trainer(split, emb, pmf, TrainConfig(batch_size=30, buffer_capacity=30, reward_k=3, epochs=1))
    first = gated.run_epoch(0)
    # 21 transitions per epoch, so updates start during the second epoch at the 30th transition
    second = gated.run_epoch(1)
    checks["warmup"] = first.updates == 0 and second.updates == 21 - (30 - 21) + 1

    trainer = Trainer(split, emb, pmf, TrainConfig(batch_size=4, buffer_capacity=50, reward_k=3, epochs=1))
    trainer.trace_updates = True
    phases = []
    for group, stepper in trainer.steppers.items():
        def wrapped(step=stepper.step, group=group):
            before = _snapshot(trainer.nets)
            step()
            others = [g for g in ("critic", "recommender", "classifier") if g != group]
            phases.append((group, all(_unchanged(before, trainer.nets, g) for g in others),
                           not _unchanged(before, trainer.nets, group)))
        stepper.step = wrapped
    targets_before = _snapshot(trainer.targets)
    online_before = _snapshot(trainer.nets)
    rec = trainer.run_epoch(0)
    checks["order"] = rec.updates > 0 and trainer.update_trace == ["critic", "agents", "targets"] * rec.updates
    checks["isolation"] = bool(phases) and all(iso and moved for _, iso, moved in phases)
    expected_groups = ["critic", "recommender", "classifier"] * rec.updates
    checks["isolation"] &= [g for g, _, _ in phases] == expected_groups

    target, online = nn.ParameterSet(), nn.ParameterSet()
    rng = np.random.default_rng(0)
    target.add("w", rng.normal(size=(3, 3)))
    online.add("w", rng.normal(size=(3, 3)))
    t0, o0 = target["w"].data.copy(), online["w"].data.copy()
    nn.soft_update(target, online, 0.01)
    new = target["w"].data
    convex = np.allclose(new, 0.01 * o0 + 0.99 * t0, rtol=0, atol=1e-15)
    between = np.all(new >= np.minimum(t0, o0) - 1e-15) and np.all(new <= np.maximum(t0, o0) + 1e-15)
    checks["soft update"] = bool(convex and between) and TrainConfig().tau == 0.01
    # targets moved, but by much less than the online networks
    moved_t = sum(np.abs(trainer.targets.groups()[g][n].data - targets_before[g][n]).sum()
                  for g in targets_before for n in targets_before[g])
    moved_o = sum(np.abs(trainer.nets.groups()[g][n].data - online_before[g][n]).sum()
                  for g in online_before for n in online_before[g])
    checks["target lag"] = 0 < moved_t < moved_o

    detail = ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
    record("4 training mechanics", all(checks.values()), detail)


# ---------------------------------------------------------------- 5, 6

def _options(command):
    return resolve_options(command, build_parser().parse_args([command, "--config", str(DESK_CONFIG)]))


@pytest.fixture(scope="module")
def desk_run():
    start = time.perf_counter()
    emb_opts, pmf_opts, train_opts = _options("pretrain-embeddings"), _options("pretrain-pmf"), _options("ablate")
    split, _ = make_burst_dataset(seed=train_opts["seed"])
    emb = pretrain_item_embeddings(split, dim=emb_opts["emb_dim"], window=emb_opts["emb_window"],
                                   negatives=emb_opts["emb_negatives"], epochs=emb_opts["emb_epochs"],
                                   lr=emb_opts["emb_lr"], seed=emb_opts["seed"])
    pmf = fit_pmf(split, dim=pmf_opts["pmf_dim"], negatives_per_positive=pmf_opts["pmf_negatives"],
                  epochs=pmf_opts["pmf_epochs"], lr=pmf_opts["pmf_lr"], reg=pmf_opts["pmf_reg"],
                  seed=pmf_opts["seed"])
    cfg = train_config(train_opts)
    reports, trained = run_ablation(split, emb, pmf, cfg)
    nets, log = trained["TIARec"]
    robustness = run_robustness(nets, split, emb, levels=(0.1, 0.8), seed=train_opts["seed"])
    return {"split": split, "emb": emb, "cfg": cfg, "reports": reports, "nets": nets, "log": log,
            "robustness": robustness, "elapsed": time.perf_counter() - start}


def test_criterion_5a_average_q_rises(desk_run):
    q = desk_run["log"].average_q()
    first, last = float(np.mean(q[:5])), float(np.mean(q[-5:]))
    record("5a Average-Q rises", len(q) == 50 and last > first,
           f"first 5 epochs {first:.4f}, last 5 epochs {last:.4f} over {len(q)} epochs")


def test_criterion_5b_beats_random_threefold(desk_run):
    lists = ranked_lists(desk_run["nets"], desk_run["split"], desk_run["emb"])
    baseline = expected_random_hr(lists, 10, len(desk_run["emb"]))
    hr = desk_run["reports"]["TIARec"].hr[10]
    record("5b HR@10 vs random", hr >= 3 * baseline,
           f"HR@10 {hr:.4f}, random {baseline:.4f}, ratio {hr / baseline:.2f} (need >= 3)")


def test_criterion_5c_classifier_helps(desk_run):
    full, ablated = desk_run["reports"]["TIARec"].hr[10], desk_run["reports"]["TIARec-C"].hr[10]
    record("5c TIARec vs TIARec-C", full >= ablated, f"HR@10 {full:.4f} vs {ablated:.4f}")


def test_criterion_5_runtime(desk_run):
    elapsed = desk_run["elapsed"]
    record("5 runtime", elapsed < 600, f"{elapsed:.0f}s for pretraining, both trainings and robustness")


def test_criterion_6_robustness_direction(desk_run):
    low, high = desk_run["robustness"][0.1].hr[10], desk_run["robustness"][0.8].hr[10]
    record("6 robustness direction", high <= low + 0.01, f"HR@10 at noise 0.1 {low:.4f}, at 0.8 {high:.4f}")


# ------------------------------------------------------------------ 7

def test_criterion_7_determinism(tmp_path):
    out = ["--out", str(tmp_path), "--log-level", "WARNING"]
    assert run(["synth", "--n-users", "30", "--run-dir", str(tmp_path / "data")] + out) == 0
    data = ["--data", str(tmp_path / "data" / "interactions.tsv")]
    assert run(["pretrain-embeddings", *data, "--emb-dim", "8", "--emb-epochs", "2",
                "--run-dir", str(tmp_path / "emb")] + out) == 0
    assert run(["pretrain-pmf", *data, "--pmf-dim", "8", "--pmf-epochs", "3",
                "--run-dir", str(tmp_path / "pmf")] + out) == 0
    cfg = tmp_path / "train.conf"
    cfg.write_text("seed = 11\nepochs = 3\nbatch_size = 16\nbuffer_capacity = 300\noptimizer = adam\n"
                   "sigma_start = 0.5\n")
    runs = []
    for name in ("a", "b"):
        code = run(["train", *data, "--embeddings", str(tmp_path / "emb" / "embeddings.json"),
                    "--pmf", str(tmp_path / "pmf" / "pmf"), "--config", str(cfg),
                    "--run-dir", str(tmp_path / name)] + out)
        assert code == 0
        runs.append(tmp_path / name)
    same = {f: (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
            for f in ("trainlog.csv", "checkpoint.json", "checkpoint.bin")}
    record("7 determinism", all(same.values()),
           ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in same.items()))


# ------------------------------------------------------------------ 8

def test_criterion_8_invariants():
    test_properties.CASES.clear()
    start = time.perf_counter()
    for prop in test_properties.all_properties():
        prop()
    elapsed = time.perf_counter() - start
    total = sum(test_properties.CASES.values())
    record("8 invariant suite", total >= 10_000 and elapsed < 60,
           f"{total} cases over {len(test_properties.CASES)} properties in {elapsed:.1f}s")

