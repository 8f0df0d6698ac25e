"""Command-line entry point: ``pte simulate|score|replay|train-benchmark|report``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
Set ``PTE_LOG_LEVEL`` (e.g. ``DEBUG``) for diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import events as ev
from .errors import EmptyTrainingSet, LedgerError, LogFormatError, PeerTruthError
from .forest import Forest, ForestConfig, train_forest
from .ledger import (
    AUGMENTED,
    ORIGINAL,
    QUADRATIC,
    LedgerConfig,
    LedgerState,
    Weights,
    replay,
    score_channels,
    training_set,
)
from .mechanism import ScoreParams, keyed_rng
from .simulation import (
    StrategySpec,
    WorldConfig,
    convergence_curve,
    convergence_rows,
    run_experiment,
)

logger = logging.getLogger("peertruth")

RESULT_HEADER = ("mechanism", "strategy", "N", "mean", "stderr", "reps")
REPUTATION_HEADER = ("user", "r0", "rp", "rr", "ep", "er", "total")
SCORE_HEADER = ("rater", "item", "question", "value", "status")


class ConfigError(Exception):
    """Bad command-line input or config file; maps to exit code 2."""


# -- output ----------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def to_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [
        [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit(args, header, rows, filename: str) -> None:
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(to_csv(header, rows), encoding="utf-8")
        logger.info("wrote %s", out / filename)
    sys.stdout.write(to_csv(header, rows) if args.format == "csv" else to_table(header, rows))


# -- config ----------------------------------------------------------------------


def _read_json(path: Optional[str], default: Optional[str] = None) -> dict:
    if path is None:
        if default is None:
            return {}
        text = resources.files("peertruth").joinpath("data", default).read_text(encoding="utf-8")
        source = f"<bundled {default}>"
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = p.read_text(encoding="utf-8")
        source = path
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return obj


def _build(what: str, factory, obj):
    try:
        return factory(obj)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


def _forest_config(obj: Optional[dict], seed: int) -> ForestConfig:
    return _build("forest", lambda o: ForestConfig(**{"seed": seed, **(o or {})}), obj)


def ledger_settings(args) -> tuple[LedgerConfig, Weights, ScoreParams]:
    obj = _read_json(args.config)
    unknown = set(obj) - {"ledger", "weights", "params"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = _build("ledger", LedgerConfig.from_dict, obj.get("ledger", {}))
    weights = _build("weights", lambda o: Weights(**o), obj.get("weights", {}))
    params = _build("params", lambda o: ScoreParams(**o), obj.get("params", {}))
    return cfg, weights, params


def load_log(path: str, config: LedgerConfig) -> tuple[LedgerState, list[ev.LedgerEvent]]:
    """Parse and validate a log, naming the line of the first bad event."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"log file not found: {path}")
    try:
        numbered = ev.parse_numbered(p.read_text(encoding="utf-8").splitlines())
    except LogFormatError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    state = LedgerState(config)
    for lineno, event in numbered:
        try:
            state.apply(event)
        except LedgerError as exc:
            raise ConfigError(f"{path}: line {lineno} (seq {event.seq}): {type(exc).__name__}: {exc}") from None
    return state, [event for _, event in numbered]


# -- commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    obj = _read_json(args.config, default="default_simulate.json")
    seed = args.seed if args.seed is not None else obj.get("seed", 0)
    base = _build("world", WorldConfig.from_dict, obj.get("world", {}))
    experiments = obj.get("experiments")
    if not isinstance(experiments, list) or not experiments:
        raise ConfigError("config needs a non-empty 'experiments' list")
    rows = []
    for i, exp in enumerate(experiments):
        where = f"experiments[{i}]"
        if not isinstance(exp, dict):
            raise ConfigError(f"{where} must be an object")
        mechanism = args.mechanism or exp.get("mechanism", ORIGINAL)
        world = _build(f"{where}.world", base.updated, exp.get("world", {}))
        params = _build(f"{where}.params", lambda o: ScoreParams(**o), exp.get("params", {}))
        forest_cfg = _forest_config(exp.get("forest", {"tree_count": 50}), seed)
        if "convergence" in exp:
            conv = exp["convergence"]
            strategy = _build(f"{where}.convergence.strategy", StrategySpec.from_dict, conv.get("strategy", {}))
            _build(f"{where}.convergence.strategy", strategy.validate_for, world)
            result = _build(where, lambda _: convergence_curve(
                world, strategy, mechanism=mechanism,
                schedule=conv.get("schedule", (1000, 5000, 20000)),
                replications=conv.get("replications", 3),
                test_items=conv.get("test_items"),
                params=params, seed=seed,
                forest_config=_forest_config(conv.get("forest", {"tree_count": 50}), seed),
            ), None)
            rows.extend(convergence_rows(result))
            continue
        population = []
        for j, entry in enumerate(exp.get("population", [])):
            spec = _build(f"{where}.population[{j}].strategy", StrategySpec.from_dict, entry.get("strategy", {}))
            _build(f"{where}.population[{j}].strategy", spec.validate_for, world)
            population.append((spec, entry.get("weight", 1.0)))
        if not population:
            raise ConfigError(f"{where} needs a population or a convergence block")
        result = _build(where, lambda _: run_experiment(
            world, population, mechanism=mechanism,
            replications=exp.get("replications", 50), params=params, seed=seed,
            forest_config=forest_cfg, training_ratings=exp.get("training_ratings", 5000),
        ), None)
        rows.extend(result.rows())
    emit(args, RESULT_HEADER, rows, "results.csv")
    return 0


def cmd_replay(args) -> int:
    cfg, weights, params = ledger_settings(args)
    _, events = load_log(args.log, cfg)
    forest = Forest.load(args.forest) if args.forest else None
    mechanism = None if args.mechanism in (None, QUADRATIC) else args.mechanism
    rep = replay(events, weights, params, args.seed or 0, cfg, forest=forest, mechanism=mechanism)
    rows = [(u, r.r0, r.rp, r.rr, r.ep, r.er, r.total) for u, r in rep.users.items()]
    emit(args, REPUTATION_HEADER, rows, "reputation.csv")
    return 0


def cmd_score(args) -> int:
    cfg, _, params = ledger_settings(args)
    state, _ = load_log(args.log, cfg)
    forest = Forest.load(args.forest) if args.forest else None
    mechanism = None if args.mechanism in (None, QUADRATIC) else args.mechanism
    scores = score_channels(state, params, args.seed or 0, forest=forest, mechanism=mechanism)
    rows = [(s.rater, s.item, s.question, s.value, s.status) for s in scores]
    emit(args, SCORE_HEADER, rows, "scores.csv")
    return 0


def calibration_l1(predicted: np.ndarray, y: np.ndarray) -> float:
    """L1 gap between mean predicted and observed label shares."""
    observed = np.bincount(y, minlength=predicted.shape[1]) / len(y)
    return float(np.abs(predicted.mean(axis=0) - observed).sum())


def out_of_fold(data, config: ForestConfig, folds: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Predictions for every row from a forest that never saw the row's item."""
    items, inverse = np.unique(data.items, return_inverse=True)
    fold_of = keyed_rng(seed, "folds").permutation(len(items)) % folds
    row_fold = fold_of[inverse]
    predicted = np.zeros((len(data), len(data.labels)))
    covered = np.zeros(len(data), dtype=bool)
    for k in range(folds):
        test = row_fold == k
        if not test.any() or test.all():
            continue
        forest = train_forest(data.subset(~test), config)
        predicted[test] = forest.predict_matrix(data.X[test])
        covered |= test
    return predicted[covered], data.y[covered]


def cmd_train_benchmark(args) -> int:
    cfg, _, _ = ledger_settings(args)
    state, _ = load_log(args.log, cfg)
    seed = args.seed or 0
    question = args.question or cfg.project_questions[0]
    data = training_set(state, question, finalized_only=True)
    if len(data) == 0:
        raise EmptyTrainingSet(f"no finalized ratings on question {question!r}")
    forest_cfg = _forest_config(_read_json(args.forest_config) if args.forest_config else {}, seed)
    predicted, y = out_of_fold(data, forest_cfg, args.folds, seed)
    diagnostic = calibration_l1(predicted, y) if len(y) else float("nan")
    forest = train_forest(data, forest_cfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "forest.ndjson"
    forest.save(path)
    header = ("question", "rows", "held_out", "calibration_l1", "forest")
    rows = [(question, len(data), len(y), diagnostic, str(path))]
    sys.stdout.write(to_table(header, rows) if args.format == "table" else to_csv(header, rows))
    return 0


def cmd_report(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise ConfigError(f"results file not found: {args.input}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{args.input}: empty file") from None
        rows = [tuple(_number(v) for v in row) for row in reader]
    sys.stdout.write(to_table(header, rows) if args.format == "table" else to_csv(header, rows))
    return 0


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


# -- parser ----------------------------------------------------------------------


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit value")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=_seed, help="unsigned 64-bit seed")
    common.add_argument("--out", help="directory for CSV or forest output")
    common.add_argument("--format", choices=("csv", "table"), default="table")
    common.add_argument("--mechanism", choices=(ORIGINAL, AUGMENTED, QUADRATIC))

    parser = _Parser(prog="pte", description="Peer-truth scoring, reputation replay and incentive simulations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="run experiments from a simulation config")
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (
        ("replay", cmd_replay, "per-user reputation from an event log"),
        ("score", cmd_score, "current accuracy score of every rating"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--log", required=True, help="event log (NDJSON)")
        p.add_argument("--forest", help="forest file for the augmented mechanism")
        p.set_defaults(func=func)

    p = sub.add_parser("train-benchmark", parents=[common], help="train the descriptor forest from a log")
    p.add_argument("--log", required=True, help="event log (NDJSON)")
    p.add_argument("--question", help="rating question to learn (default: first project question)")
    p.add_argument("--forest-config", help="JSON file with forest settings")
    p.add_argument("--folds", type=int, default=5, help="item-grouped folds for the held-out diagnostic")
    p.set_defaults(func=cmd_train_benchmark)

    p = sub.add_parser("report", parents=[common], help="render a results CSV")
    p.add_argument("input", help="CSV written by simulate")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("PTE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"pte: error: {exc}", file=sys.stderr)
        return 2
    except (PeerTruthError, LedgerError) as exc:
        print(f"pte: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pte: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
