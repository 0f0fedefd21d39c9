"""Command-line entry point: ``tiarec <subcommand> [flags]``.

Every setting is one key in a shared option table.  The same key works as
``key = value`` in a ``--config`` file and as ``--key`` on the command line
(underscores become dashes); flags win over the file.  Each run writes into
``<out>/<subcommand>-<timestamp>/`` (or ``--run-dir``) and records itself in
``<out>/latest.json``.

Exit status: 0 success, 1 failed check, 2 configuration error, 3 data
error, 4 numeric failure.
"""

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .corpus import DataError, dataset_statistics, ingest, read_canonical, write_split, write_statistics
from .evaluation import (
    DEFAULT_KS,
    NOISE_LEVELS,
    evaluate,
    run_ablation,
    run_robustness,
    write_reports_csv,
    write_reports_json,
    write_robustness_curve,
)
from .trainer import NumericError, TrainConfig, load_networks, train

logger = logging.getLogger("tiarec")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    """Bad option value, unknown key or missing input path."""


@dataclass(frozen=True)
class Option:
    key: str
    kind: str  # int | float | str | path | bool | ints | floats
    default: object
    help: str
    commands: tuple

    @property
    def flag(self):
        return "--" + self.key.replace("_", "-")

    def parse(self, text):
        text = str(text).strip()
        try:
            if self.kind == "int":
                return int(text)
            if self.kind == "float":
                return float(text)
            if self.kind == "bool":
                lowered = text.lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(f"not a boolean: {text!r}")
            if self.kind == "ints":
                return [int(t) for t in text.split(",") if t.strip()]
            if self.kind == "floats":
                return [float(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"{self.key}: {exc}") from None
        return text or None


ALL = ("synth", "ingest", "stats", "pretrain-embeddings", "pretrain-pmf", "train", "evaluate",
       "ablate", "robustness", "gradient-check")
DATA_IN = ("ingest", "stats", "pretrain-embeddings", "pretrain-pmf", "train", "evaluate", "ablate", "robustness")
TRAINING = ("train", "ablate")
EVALUATING = ("evaluate", "ablate", "robustness")

_TRAIN_HELP = {
    "lr": "learning rate for all three networks",
    "gamma": "discount factor",
    "tau": "soft target update rate",
    "alpha": "weight of the classifier reward",
    "buffer_capacity": "replay buffer capacity",
    "batch_size": "minibatch size (also the warmup size)",
    "reward_k": "list size for the recommender reward",
    "horizon": "maximum steps per user per epoch",
    "sigma_start": "exploration noise std at the first epoch",
    "sigma_end": "exploration noise std at the last epoch",
    "epochs": "training epochs",
    "optimizer": "sgd or adam",
    "use_classifier": "train with the classifier agent (off gives the TIARec-C ablation)",
    "clamp_classifier_reward": "clamp the classifier reward to [0, 1]",
    "warm_start": "logged train items replayed into the state before each episode",
    "checkpoint_every": "save a checkpoint every N epochs (0 = only at the end)",
}


def _train_options():
    kinds = {int: "int", float: "float", str: "str", bool: "bool"}
    defaults = TrainConfig()
    out = []
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        commands = TRAINING + (("evaluate", "robustness") if f.name == "use_classifier" else ())
        out.append(Option(f.name, kinds[type(getattr(defaults, f.name))], getattr(defaults, f.name),
                          _TRAIN_HELP[f.name], commands))
    return out


OPTIONS = [
    Option("config", "path", None, "key = value file; flags override it", ALL),
    Option("out", "path", "runs", "root directory for run outputs", ALL),
    Option("run_dir", "path", None, "exact output directory (default <out>/<subcommand>-<timestamp>)", ALL),
    Option("seed", "int", 0, "root seed; every component derives its own stream", ALL),
    Option("log_level", "str", "INFO", "logging level", ALL),
    Option("data", "path", None, "interaction log", DATA_IN),
    Option("data_format", "str", "canonical", "canonical, csv or tsv", DATA_IN),
    Option("schema", "str", None, "column map for csv/tsv, e.g. user=0,item=1,rating=2,timestamp=3", DATA_IN),
    Option("delimiter", "str", None, "override the csv/tsv delimiter", DATA_IN),
    Option("categories", "path", None, "item_id<TAB>category file", DATA_IN),
    Option("n_users", "int", 200, "synthetic users", ("synth",)),
    Option("rare_threshold", "float", 0.05, "rare category cutoff as a fraction of the mean count",
           ("stats", "ingest", "synth")),
    Option("emb_dim", "int", 16, "item embedding width (also the agents' width)", ("pretrain-embeddings",)),
    Option("emb_window", "int", 3, "skip-gram context window", ("pretrain-embeddings",)),
    Option("emb_negatives", "int", 5, "negative samples per pair", ("pretrain-embeddings",)),
    Option("emb_epochs", "int", 20, "skip-gram epochs", ("pretrain-embeddings",)),
    Option("emb_lr", "float", 0.025, "skip-gram initial learning rate", ("pretrain-embeddings",)),
    Option("pmf_dim", "int", 16, "PMF latent width", ("pretrain-pmf",)),
    Option("pmf_negatives", "int", 4, "sampled negatives per positive", ("pretrain-pmf",)),
    Option("pmf_epochs", "int", 20, "PMF epochs", ("pretrain-pmf",)),
    Option("pmf_lr", "float", 0.1, "PMF learning rate", ("pretrain-pmf",)),
    Option("pmf_reg", "float", 0.01, "PMF L2 penalty", ("pretrain-pmf",)),
    Option("embeddings", "path", None, "embedding artifact (.json manifest)", TRAINING + EVALUATING),
    Option("pmf", "path", None, "PMF artifact directory", TRAINING),
    Option("checkpoint", "path", None, "network checkpoint (.json)", ("evaluate", "robustness")),
    Option("resume", "path", None, "checkpoint to resume training from", ("train",)),
    *_train_options(),
    Option("ks", "ints", list(DEFAULT_KS), "cutoffs for HR/Recall/NDCG", EVALUATING),
    Option("exclude_seen", "bool", False, "drop already-seen items from rankings", EVALUATING),
    Option("noise_levels", "floats", list(NOISE_LEVELS), "robustness noise grid", ("robustness",)),
    Option("gc_dim", "int", 4, "embedding width for the gradient check", ("gradient-check",)),
    Option("gc_items", "int", 3, "catalogue size for the gradient check", ("gradient-check",)),
    Option("gc_batch", "int", 4, "transitions in the gradient-check batch", ("gradient-check",)),
    Option("gc_step", "float", 1e-4, "central-difference step", ("gradient-check",)),
    Option("gc_tolerance", "float", 1e-4, "largest accepted relative error", ("gradient-check",)),
]
OPTION_INDEX = {o.key: o for o in OPTIONS}

DESCRIPTIONS = {
    "synth": "write the synthetic two-cluster burst dataset",
    "ingest": "parse a raw log into the canonical form",
    "stats": "dataset statistics including the rare-interaction user fraction",
    "pretrain-embeddings": "train skip-gram item embeddings",
    "pretrain-pmf": "fit PMF factors for the recommender reward",
    "train": "train recommender, classifier and critic",
    "evaluate": "HR/Recall/NDCG of a checkpoint on the test split",
    "ablate": "train and evaluate TIARec and TIARec-C under one seed",
    "robustness": "evaluate a checkpoint under the noise grid",
    "gradient-check": "finite-difference check of both loss gradients",
}


# ------------------------------------------------------------------ parsing

def build_parser():
    parser = argparse.ArgumentParser(prog="tiarec", description="Reinforcement-learning recommendation lab with an atypical-interaction classifier")
    parser.add_argument("--version", action="version", version=f"tiarec {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", required=True)
    for command in ALL:
        p = sub.add_parser(command, help=DESCRIPTIONS[command], description=DESCRIPTIONS[command])
        for opt in OPTIONS:
            if command not in opt.commands:
                continue
            default_note = "" if opt.default is None else f" (default: {_display(opt.default)})"
            if opt.kind == "bool":
                p.add_argument(opt.flag, dest=opt.key, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=opt.help + default_note)
            else:
                p.add_argument(opt.flag, dest=opt.key, default=argparse.SUPPRESS, metavar=opt.kind.upper(),
                               help=opt.help + default_note)
    return parser


def _display(value):
    return ",".join(str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file {path} not found")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTION_INDEX or key == "config":
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve_options(command, namespace):
    """Defaults, then the config file, then flags."""
    flags = {k: v for k, v in vars(namespace).items() if k != "command"}
    opts = {o.key: o.default for o in OPTIONS if command in o.commands}
    if flags.get("config"):
        for key, text in read_config_file(flags["config"]).items():
            if key in opts:
                opts[key] = OPTION_INDEX[key].parse(text)
            else:
                logger.debug("config key %s does not apply to %s", key, command)
    for key, value in flags.items():
        opt = OPTION_INDEX[key]
        opts[key] = value if opt.kind == "bool" else opt.parse(value)
    return opts


def _require_path(opts, key):
    value = opts.get(key)
    if not value:
        raise ConfigError(f"{key}: required (pass {OPTION_INDEX[key].flag} or set it in the config)")
    path = Path(value)
    probe = path if path.exists() else path.with_suffix(".json")
    if not probe.exists():
        raise ConfigError(f"{key}: {value} does not exist")
    return path


def train_config(opts):
    cfg = TrainConfig(**{f.name: opts[f.name] for f in fields(TrainConfig)
                         if f.name in opts and f.name != "seed"},
                      seed=opts["seed"])
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ----------------------------------------------------------------- run dirs

class Run:
    def __init__(self, command, opts):
        self.command, self.opts = command, opts
        if opts.get("run_dir"):
            self.dir = Path(opts["run_dir"])
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            base = Path(opts["out"]) / f"{command}-{stamp}"
            self.dir, n = base, 1
            while self.dir.exists():
                self.dir = base.with_name(f"{base.name}-{n}")
                n += 1
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs = []

    def path(self, name):
        self.outputs.append(name)
        return self.dir / name

    def finish(self, summary=None):
        manifest = {"subcommand": self.command, "run_dir": str(self.dir), "outputs": sorted(set(self.outputs)),
                    "options": {k: v for k, v in sorted(self.opts.items())}, "summary": summary or {}}
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
        latest_path = Path(self.opts["out"]) / "latest.json"
        latest_path.parent.mkdir(parents=True, exist_ok=True)
        latest = json.loads(latest_path.read_text()) if latest_path.exists() else {}
        latest[self.command] = str(self.dir)
        latest["last"] = str(self.dir)
        latest_path.write_text(json.dumps(latest, indent=2, sort_keys=True) + "\n")
        return manifest


# ------------------------------------------------------------------ helpers

def load_data(opts):
    path = _require_path(opts, "data")
    categories = _require_path(opts, "categories") if opts.get("categories") else None
    fmt = opts["data_format"]
    if fmt == "canonical":
        return read_canonical(path, categories)
    if fmt not in ("csv", "tsv"):
        raise ConfigError(f"data_format: expected canonical, csv or tsv, got {fmt!r}")
    schema = None
    if opts.get("schema"):
        try:
            schema = dict(part.split("=", 1) for part in opts["schema"].split(","))
        except ValueError:
            raise ConfigError(f"schema: expected name=column pairs, got {opts['schema']!r}") from None
    return ingest(path, fmt, schema=schema, category_path=categories, delimiter=opts.get("delimiter"))


def load_embeddings_opt(opts):
    from .pretrain import load_embeddings

    return load_embeddings(_require_path(opts, "embeddings"))


def load_pmf_opt(opts):
    from .pretrain import load_pmf

    return load_pmf(_require_path(opts, "pmf"))


def _write_split_outputs(run, split, opts):
    write_split(split, run.path("interactions.tsv"), run.path("categories.tsv") if split.category_index else None)
    stats = dataset_statistics(split, opts["rare_threshold"])
    write_statistics(stats, run.path("stats.json"))
    return stats


# ----------------------------------------------------------------- commands

def cmd_synth(opts, run):
    from .synthetic import make_burst_dataset

    split, truth = make_burst_dataset(n_users=opts["n_users"], seed=opts["seed"])
    stats = _write_split_outputs(run, split, opts)
    run.path("truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return {"n_interactions": stats["n_interactions"]}


def cmd_ingest(opts, run):
    split = load_data(opts)
    stats = _write_split_outputs(run, split, opts)
    return {"n_interactions": stats["n_interactions"], "n_users": stats["n_users"]}


def cmd_stats(opts, run):
    stats = dataset_statistics(load_data(opts), opts["rare_threshold"])
    print(write_statistics(stats, run.path("stats.json")))
    return {k: stats[k] for k in ("n_users", "n_items", "rare_user_fraction") if k in stats}


def cmd_pretrain_embeddings(opts, run):
    from .pretrain import pretrain_item_embeddings, save_embeddings

    emb = pretrain_item_embeddings(load_data(opts), dim=opts["emb_dim"], window=opts["emb_window"],
                                   negatives=opts["emb_negatives"], epochs=opts["emb_epochs"],
                                   lr=opts["emb_lr"], seed=opts["seed"])
    save_embeddings(emb, run.path("embeddings.json"))
    run.outputs.append("embeddings.f32")
    return {"n_items": len(emb), "dim": emb.dim, "embeddings": str(run.dir / "embeddings.json")}


def cmd_pretrain_pmf(opts, run):
    from .pretrain import fit_pmf, save_pmf

    factors = fit_pmf(load_data(opts), dim=opts["pmf_dim"], negatives_per_positive=opts["pmf_negatives"],
                      epochs=opts["pmf_epochs"], lr=opts["pmf_lr"], reg=opts["pmf_reg"], seed=opts["seed"])
    save_pmf(factors, run.path("pmf"))
    with open(run.path("pmf_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(factors.loss_history))
    final = factors.loss_history[-1] if factors.loss_history else None
    return {"final_loss": final, "pmf": str(run.dir / "pmf")}


def cmd_train(opts, run):
    from .plotting import plot_training_curves

    cfg = train_config(opts)
    split, emb, factors = load_data(opts), load_embeddings_opt(opts), load_pmf_opt(opts)
    resume = _require_path(opts, "resume") if opts.get("resume") else None
    ckpt = run.path("checkpoint.json")
    run.outputs.append("checkpoint.bin")
    nets, _, log = train(split, emb, factors, cfg, checkpoint_path=ckpt, resume_from=resume)
    log.write_csv(run.path("trainlog.csv"))
    log.write_timings(run.path("timings.csv"))
    if len(log):
        plot_training_curves({"TIARec" if cfg.use_classifier else "TIARec-C": log}, run.path("training_curves.png"))
    last = log.records[-1] if len(log) else None
    return {"epochs": len(log), "checkpoint": str(ckpt),
            "final_average_q": last.average_q if last else None}


def _report_summary(reports, k=10):
    return {r.model: {f"hr@{k}": r.hr.get(k), f"ndcg@{k}": r.ndcg.get(k)} for r in reports}


def cmd_evaluate(opts, run):
    split, emb = load_data(opts), load_embeddings_opt(opts)
    nets, _, _ = load_networks(_require_path(opts, "checkpoint"))
    model = "TIARec" if opts["use_classifier"] else "TIARec-C"
    report = evaluate(nets, split, emb, opts["ks"], use_classifier=opts["use_classifier"],
                      exclude_seen=opts["exclude_seen"], model=model)
    write_reports_csv([report], run.path("metrics.csv"))
    write_reports_json([report], run.path("metrics.json"))
    return _report_summary([report])


def cmd_ablate(opts, run):
    from .plotting import plot_ablation, plot_training_curves

    cfg = train_config(opts)
    split, emb, factors = load_data(opts), load_embeddings_opt(opts), load_pmf_opt(opts)
    reports, trained = run_ablation(split, emb, factors, cfg, opts["ks"], exclude_seen=opts["exclude_seen"])
    write_reports_csv(reports.values(), run.path("metrics.csv"))
    write_reports_json(reports.values(), run.path("metrics.json"))
    for name, (_, log) in trained.items():
        log.write_csv(run.path(f"trainlog-{name}.csv"))
    plot_ablation(reports, run.path("ablation.png"))
    plot_training_curves({name: log for name, (_, log) in trained.items()}, run.path("training_curves.png"))
    return _report_summary(reports.values())


def cmd_robustness(opts, run):
    from .plotting import plot_robustness

    split, emb = load_data(opts), load_embeddings_opt(opts)
    nets, _, _ = load_networks(_require_path(opts, "checkpoint"))
    ks = opts["ks"]
    reports = run_robustness(nets, split, emb, opts["noise_levels"], opts["seed"], ks,
                             use_classifier=opts["use_classifier"], exclude_seen=opts["exclude_seen"])
    write_reports_csv(reports.values(), run.path("metrics.csv"))
    write_reports_json(reports.values(), run.path("metrics.json"))
    k = 10 if 10 in ks else ks[0]
    write_robustness_curve(reports, run.path("robustness.csv"), k)
    plot_robustness(reports, run.path("robustness.png"), k)
    return {str(level): rep.hr[k] for level, rep in reports.items()}


def cmd_gradient_check(opts, run):
    from .gradcheck import gradient_check

    results = gradient_check(dim=opts["gc_dim"], n_items=opts["gc_items"], batch_size=opts["gc_batch"],
                             seed=opts["seed"], h=opts["gc_step"])
    with open(run.path("gradcheck.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss", "group", "name", "index", "analytic", "numeric", "rel_error"])
        for r in results:
            w.writerow([r.loss, r.group, r.name, "-".join(map(str, r.index)), repr(r.analytic),
                        repr(r.numeric), repr(r.rel_error)])
    worst = max(r.rel_error for r in results)
    passed = worst <= opts["gc_tolerance"]
    print(f"gradient check: {len(results)} coordinates, worst relative error {worst:.3g} "
          f"({'pass' if passed else 'FAIL'} at {opts['gc_tolerance']:g})")
    return {"coordinates": len(results), "worst_rel_error": worst, "passed": passed}


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "pretrain-embeddings": cmd_pretrain_embeddings,
    "pretrain-pmf": cmd_pretrain_pmf,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "gradient-check": cmd_gradient_check,
}


def run(argv=None):
    """Execute one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        namespace = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = namespace.command
    try:
        opts = resolve_options(command, namespace)
        level = getattr(logging, str(opts["log_level"]).upper(), None)
        if not isinstance(level, int):
            raise ConfigError(f"log_level: unknown level {opts['log_level']!r}")
        logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
        if opts.get("config"):
            _require_path(opts, "config")
        handler = COMMANDS[command]
        out = Run(command, opts)
        summary = handler(opts, out)
        out.finish(summary)
        logger.info("%s finished: %s", command, out.dir)
        if command == "gradient-check" and not summary["passed"]:
            return EXIT_CHECK_FAILED
        return EXIT_OK
    except ConfigError as exc:
        print(f"tiarec {command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"tiarec {command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, KeyError, ValueError) as exc:
        print(f"tiarec {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
