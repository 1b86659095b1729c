"""Command-line entry point: ``cfrec ingest | train | explain | evaluate | oracle``.

Settings resolve in this order, later winning: built-in defaults, the
key-value config file given with ``--config``, the ``CFREC_OUTPUT_DIR``
environment variable (output directory only), then command-line flags.
Every file written embeds the resolved settings.

Exit codes: 0 success, 2 unreadable or malformed input (or a request the
data cannot satisfy), 3 unknown user id, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .data import Dataset, binarize, build_dataset, load_ratings, prune_users, table_stats
from .errors import (
    CapExceededError, CfrecError, ContractError, EmptyDatasetError, NumericError, ParseError,
    UnknownIdError, UnsupportedOperationError,
)
from .evaluation import (
    _map, exhaustive_counterfactual, outcomes_jsonl, random_set_rate, run_evaluation,
    summary_csv, tests_csv, verify, verify_and_resume,
)
from .explain import METHODS, explain
from .influence import Influence, Retrainer
from .model import KIND_DEFAULTS, MODEL_KINDS, TrainConfig, TrainedModel, train

log = logging.getLogger("cfrec")

ENV_OUTPUT_DIR = "CFREC_OUTPUT_DIR"
RUN_SCHEMA = "cfrec.run/1"
ORACLE_SCHEMA = "cfrec.oracle/1"

KIND_OF_DATASET = {v: k for k, v in MODEL_KINDS.items()}

EXIT_OK, EXIT_IO, EXIT_LOOKUP, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Every setting a command can read.  ``None`` for ``d``/``l2_reg`` means the per-model default."""

    ratings: str = ""
    dataset: str = ""
    checkpoint: str = ""
    output_dir: str = "cfrec-out"
    model: str = "pointwise"
    d: int | None = None
    l2_reg: float | None = None
    epochs: int = 3000
    tol: float = 1e-9
    init_std: float = 0.1
    optimizer: str = "lbfgs"
    learning_rate: float = 0.5
    seed: int = 0
    threshold: int = 3
    min_pos: int = 10
    min_neg: int = 10
    damping: float = 0.01
    k: tuple = (5,)
    methods: tuple = METHODS
    jobs: int = 1
    oracle_cap: int = 12
    oracle_max_size: int = 3
    resume_budget: int = 3
    random_draws: int = 10

    def resolve(self, explicit=()) -> "RunConfig":
        if self.model not in MODEL_KINDS:
            raise ContractError(f"unknown model {self.model!r}; choose from {sorted(MODEL_KINDS)}")
        if any(k < 2 for k in self.k):
            raise ContractError("every k must be >= 2 (one replacement candidate at least)")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ContractError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
        if self.jobs < 1:
            raise ContractError("--jobs must be >= 1")
        self._explicit = frozenset(explicit)
        self._fill_kind_defaults()
        self.dataset = self.dataset or os.path.join(self.output_dir, "dataset.json")
        self.checkpoint = self.checkpoint or os.path.join(self.output_dir, "model.json")
        return self

    def _fill_kind_defaults(self):
        defaults = KIND_DEFAULTS[self.model]
        for key in ("d", "l2_reg"):
            if key not in self._explicit:
                setattr(self, key, defaults[key])

    def adopt(self, model_kind, config: TrainConfig | None = None):
        """Follow a dataset's or checkpoint's model kind unless the user chose one.

        With a checkpoint ``config`` the recorded training settings replace
        the resolved ones, since those are what refits will use.
        """
        if "model" not in self._explicit and model_kind != self.model:
            self.model = model_kind
            self._fill_kind_defaults()
        if config is not None and config.model_kind == self.model:
            self.d, self.l2_reg, self.epochs = config.d, config.l2_reg, config.epochs
            self.tol, self.init_std = config.tol, config.init_std
            self.optimizer, self.learning_rate = config.optimizer, config.learning_rate
            if "seed" not in self._explicit:
                self.seed = config.seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(model_kind=self.model, d=self.d, l2_reg=self.l2_reg, epochs=self.epochs,
                           tol=self.tol, init_std=self.init_std, seed=self.seed,
                           optimizer=self.optimizer, learning_rate=self.learning_rate)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["k"], out["methods"] = list(self.k), list(self.methods)
        return out


def _int_list(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _str_list(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _optional(conv):
    return lambda text: None if str(text).strip().lower() in ("", "none", "auto") else conv(text)


CONVERTERS = {
    "d": _optional(int), "l2_reg": _optional(float), "epochs": int, "tol": float,
    "init_std": float, "learning_rate": float, "seed": int, "threshold": int, "min_pos": int, "min_neg": int,
    "damping": float, "k": _int_list, "methods": _str_list, "jobs": int, "oracle_cap": int,
    "oracle_max_size": int, "resume_budget": int, "random_draws": int,
}
KEYS = [f.name for f in fields(RunConfig)]


def read_config_file(path) -> dict:
    """``key = value`` lines (``#`` comments, optional ``[cfrec]`` header) to typed settings."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        if not text.lstrip().startswith("["):
            text = "[cfrec]\n" + text
        parser.read_string(text, source=os.fspath(path))
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.replace("-", "_")
            if key not in KEYS:
                raise ParseError(f"{path}: unknown key {key!r}")
            try:
                out[key] = CONVERTERS.get(key, str)(value)
            except ValueError:
                raise ParseError(f"{path}: bad value for {key}: {value!r}") from None
    return out


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    if os.environ.get(ENV_OUTPUT_DIR):
        values["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    for key in KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values).resolve(explicit=values)


# ---------------------------------------------------------------------------
# output helpers


def _header(command, cfg) -> dict:
    return {"schema": RUN_SCHEMA, "command": command, "version": __version__, "config": cfg.as_dict()}


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_json(path, doc):
    _write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _config_comment(command, cfg) -> str:
    return "# " + json.dumps(_header(command, cfg), sort_keys=True) + "\n"


def _jsonl(command, cfg, docs) -> str:
    lines = [json.dumps(_header(command, cfg), sort_keys=True)]
    lines += [json.dumps(d, sort_keys=True) for d in docs]
    return "\n".join(lines) + "\n"


def _user_label(doc, user_ids):
    """Replace dense user indices in an outcome/explanation document with source ids."""
    doc["user"] = int(user_ids[doc["user"]])
    if "explanation" in doc:
        doc["explanation"]["user"] = doc["user"]
    return doc


def _load_model(cfg):
    dataset = Dataset.load(cfg.dataset)
    model = TrainedModel.load(cfg.checkpoint, dataset)
    cfg.adopt(model.kind, model.config)
    if model.kind != cfg.model:
        raise ContractError(f"checkpoint holds a {model.kind} model, config asks for {cfg.model}")
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg, args):
    if not cfg.ratings:
        raise ContractError("ingest needs --ratings")
    ratings = load_ratings(cfg.ratings)
    inter = binarize(ratings, cfg.threshold)
    before = {
        "users": len({r.user_id for r in ratings}),
        "items": len({r.item_id for r in ratings}),
        "interactions": len(inter),
        "positives": sum(x.positive for x in inter),
    }
    table = prune_users(inter, cfg.min_pos, cfg.min_neg)
    dataset = build_dataset(table, MODEL_KINDS[cfg.model], seed=cfg.seed)
    after = table_stats(table)
    after["training_points"] = dataset.n
    os.makedirs(os.path.dirname(cfg.dataset) or ".", exist_ok=True)
    dataset.save(cfg.dataset)
    report = dict(_header("ingest", cfg), before=before, after=after)
    _write_json(os.path.join(cfg.output_dir, "ingest_report.json"), report)
    print(f"users {before['users']} -> {after['users']}, items {before['items']} -> {after['items']}, "
          f"interactions {before['interactions']} -> {after['interactions']}, "
          f"{dataset.kind} points {dataset.n}")
    return EXIT_OK


def _trend(history):
    h = np.asarray(history, dtype=float)
    steps = np.diff(h)
    return {
        "iterations": len(h),
        "loss_first": float(h[0]),
        "loss_last": float(h[-1]),
        "nonincreasing_fraction": float(np.mean(steps <= 1e-12)) if len(steps) else 1.0,
        "monotone": bool(np.all(steps <= 1e-12)),
    }


def cmd_train(cfg, args):
    dataset = Dataset.load(cfg.dataset)
    cfg.adopt(KIND_OF_DATASET[dataset.kind])
    model = train(dataset, cfg.train_config())
    doc = model.to_json()
    doc["run"] = _header("train", cfg)
    _write(cfg.checkpoint, json.dumps(doc, separators=(",", ":"), sort_keys=True))
    buf = io.StringIO()
    buf.write(_config_comment("train", cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for epoch, loss in enumerate(model.loss_history, start=1):
        w.writerow([epoch, repr(round(loss, 12))])
    _write(os.path.join(cfg.output_dir, "train_log.csv"), buf.getvalue())
    report = dict(_header("train", cfg), final_loss=model.final_loss, grad_norm=model.grad_norm,
                  **_trend(model.loss_history))
    _write_json(os.path.join(cfg.output_dir, "train_report.json"), report)
    print(f"trained {cfg.model}: loss {model.final_loss:.6g}, |grad| {model.grad_norm:.3g}, "
          f"{len(model.loss_history)} iterations, monotone {report['monotone']}")
    return EXIT_OK


def cmd_explain(cfg, args):
    model = _load_model(cfg)
    ds = model.dataset
    if args.all_users:
        users = list(range(ds.n_users))
    elif args.user is not None:
        users = [ds.user_index(args.user)]
    else:
        raise ContractError("explain needs --user ID or --all-users")
    method, k = cfg.methods[0], cfg.k[0]
    engine = Influence(model, cfg.damping)

    def one(u):
        doc = explain(model, u, k, method, cfg.damping, engine).to_json(ds.item_ids)
        return _user_label(dict(doc, k=k), ds.user_ids)

    text = _jsonl("explain", cfg, _map(one, users, cfg.jobs))
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(cfg, args):
    model = _load_model(cfg)
    ds = model.dataset
    outcomes, summaries, tests, retrainer = run_evaluation(
        model, cfg.methods, cfg.k, cfg.damping, jobs=cfg.jobs)
    comment = _config_comment("evaluate", cfg)
    _write(os.path.join(cfg.output_dir, "summary.csv"), comment + summary_csv(summaries))
    _write(os.path.join(cfg.output_dir, "tests.csv"), comment + tests_csv(tests))
    body = outcomes_jsonl(outcomes, ds.item_ids)
    docs = [_user_label(json.loads(line), ds.user_ids) for line in body.splitlines()]
    _write(os.path.join(cfg.output_dir, "outcomes.jsonl"), _jsonl("evaluate", cfg, docs))
    sys.stdout.write(summary_csv(summaries))
    log.info("%d refits", retrainer.retrains)
    return EXIT_OK


def _oracle_user(model, u, cfg, retrainer):
    ds = model.dataset
    profile = ds.profile(u)
    row = {"user": int(ds.user_ids[u]), "profile_size": len(profile)}
    try:
        found = exhaustive_counterfactual(model, u, cfg.oracle_max_size, cfg.oracle_cap, retrainer)
    except CapExceededError as exc:
        return dict(row, status="skipped", reason=str(exc))
    row["oracle_size"] = None if found is None else len(found[0])
    row["oracle_set"] = None if found is None else [int(ds.item_ids[i]) for i in found[0]]
    expl = explain(model, u, cfg.k[0], "accent", cfg.damping)
    row["accent_size"] = expl.size
    if not expl.success:
        return dict(row, status="accent failed")
    first_top1, _ = verify(model, expl, retrainer)
    row["accent_displaced_initial"] = bool(first_top1 != expl.rec)
    row["random_rate"] = random_set_rate(model, u, expl.size, cfg.random_draws, cfg.seed, retrainer)
    final = verify_and_resume(model, expl, retrainer, cfg.resume_budget)
    row["accent_verified"] = bool(final.verified)
    row["accent_verified_size"] = final.size if final.verified else None
    row["resumed"] = final.resumed
    if not final.verified:
        return dict(row, status="accent unverified")
    if found is None:
        status = "oracle inconclusive" if final.size > cfg.oracle_max_size else "inconsistent"
        return dict(row, status=status)
    return dict(row, status="compared", oracle_le_accent=row["oracle_size"] <= final.size)


def oracle_report(model, cfg, users=None):
    """Per-user oracle rows and the aggregate comparison."""
    users = range(model.dataset.n_users) if users is None else users
    retrainer = Retrainer(model)
    rows = _map(lambda u: _oracle_user(model, u, cfg, retrainer), list(users), cfg.jobs)
    compared = [r for r in rows if r["status"] == "compared"]
    paired = [r for r in rows if "random_rate" in r]
    summary = {
        "schema": ORACLE_SCHEMA,
        "users": len(rows),
        "eligible": sum(r["status"] != "skipped" for r in rows),
        "skipped": sum(r["status"] == "skipped" for r in rows),
        "compared": len(compared),
        "oracle_le_accent": sum(r["oracle_le_accent"] for r in compared),
        "oracle_inconclusive": sum(r["status"] == "oracle inconclusive" for r in rows),
        "inconsistent": sum(r["status"] == "inconsistent" for r in rows),
        "paired_users": len(paired),
        "accent_verified_rate": float(np.mean([r["accent_displaced_initial"] for r in paired])) if paired else None,
        "random_verified_rate": float(np.mean([r["random_rate"] for r in paired])) if paired else None,
    }
    return rows, summary


def cmd_oracle(cfg, args):
    model = _load_model(cfg)
    users = None
    if args.user:
        users = [model.dataset.user_index(u) for u in args.user]
    rows, summary = oracle_report(model, cfg, users)
    _write(os.path.join(cfg.output_dir, "oracle.jsonl"), _jsonl("oracle", cfg, rows))
    _write_json(os.path.join(cfg.output_dir, "oracle_summary.json"), dict(_header("oracle", cfg), **summary))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value settings file; flags override it")
    common.add_argument("--output-dir", dest="output_dir",
                        help=f"where results go (env {ENV_OUTPUT_DIR} overrides the config file)")
    common.add_argument("--dataset", help="dataset artifact (default OUTPUT_DIR/dataset.json)")
    common.add_argument("--checkpoint", help="model checkpoint (default OUTPUT_DIR/model.json)")
    common.add_argument("--model", choices=sorted(MODEL_KINDS))
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel per-user workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cfrec", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"cfrec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", parents=[common], help="parse, binarize and prune ratings")
    ing.add_argument("--ratings", help="tab-separated user item rating timestamp file")
    ing.add_argument("--threshold", type=int)
    ing.add_argument("--min-pos", dest="min_pos", type=int)
    ing.add_argument("--min-neg", dest="min_neg", type=int)

    tr = sub.add_parser("train", parents=[common], help="fit a model and write a checkpoint")
    tr.add_argument("--d", type=int)
    tr.add_argument("--l2-reg", dest="l2_reg", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--tol", type=float)
    tr.add_argument("--optimizer", choices=["lbfgs", "gd"])
    tr.add_argument("--learning-rate", dest="learning_rate", type=float, help="step size for gd")

    infl = argparse.ArgumentParser(add_help=False)
    infl.add_argument("--damping", type=float)
    infl.add_argument("--k", type=_int_list, help="comma-separated list, e.g. 5,10,20")

    ex = sub.add_parser("explain", parents=[common, infl], help="explain top-1 recommendations")
    ex.add_argument("--user", type=int, help="source user id")
    ex.add_argument("--all-users", action="store_true")
    ex.add_argument("--method", dest="methods", type=lambda s: (s,), help="one of " + ", ".join(METHODS))
    ex.add_argument("--out", help="write JSON lines here instead of stdout")

    ev = sub.add_parser("evaluate", parents=[common, infl], help="explain, refit and summarize")
    ev.add_argument("--methods", type=_str_list, help="comma-separated methods")

    orc = sub.add_parser("oracle", parents=[common, infl], help="compare ACCENT with exhaustive search")
    orc.add_argument("--user", type=int, action="append", help="source user id (repeatable)")
    orc.add_argument("--oracle-cap", dest="oracle_cap", type=int)
    orc.add_argument("--oracle-max-size", dest="oracle_max_size", type=int)
    orc.add_argument("--random-draws", dest="random_draws", type=int)
    orc.add_argument("--resume-budget", dest="resume_budget", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_IO
    except UnknownIdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOOKUP
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, EmptyDatasetError, ContractError, UnsupportedOperationError,
            json.JSONDecodeError, CfrecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
