"""Synthetic worlds and Monte-Carlo experiments for the scoring mechanisms.

A world draws each item's latent quality ``t`` from a prior, its public
descriptors from per-state emission distributions, and one private signal
per assigned rater from the confusion matrix ``C[t]``. Strategies turn
signals (and descriptors) into reports, which are scored by the original,
augmented or quadratic mechanism.

The batch scorers here are array versions of the per-rating functions in
``mechanism`` and ``variants``; ``engine="reference"`` routes the original
mechanism through ``score_item_ratings`` instead, which is slower but is
the definition the fast path is tested against.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .forest import DescriptorSchema, ForestConfig, TrainingSet, train_forest
from .mechanism import (
    DEFAULT_MAX_SAMPLE,
    LabelSet,
    RatingEvent,
    RatingPool,
    ScoreParams,
    keyed_rng,
    score_item_ratings,
)
from .variants import CONSTANT_BENCHMARK, DEFAULT_EPSILON, quadratic_score

ORIGINAL = "original"
AUGMENTED = "augmented"
QUADRATIC = "quadratic"

TRUTHFUL = "truthful"
CONSTANT = "constant"
NOISY = "noisy_truthful"
DESCRIPTOR_MAP = "descriptor_map"
STRATEGY_KINDS = (TRUTHFUL, CONSTANT, NOISY, DESCRIPTOR_MAP)


# -- world ---------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    """Generative model of items, descriptors and rater signals.

    ``confusion[t][x]`` is the chance a rater of a state-``t`` item sees
    signal ``x``. ``categorical[j][t][v]`` is the chance feature ``j`` takes
    value ``v`` in state ``t``; numeric features are normal with per-state
    ``numeric_means[j][t]`` and common ``numeric_std[j]``.
    """

    labels: tuple[str, ...] = ("u", "s", "e")
    prior: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    confusion: tuple[tuple[float, ...], ...] = ()
    categorical: tuple[tuple[tuple[float, ...], ...], ...] = ()
    numeric_means: tuple[tuple[float, ...], ...] = ()
    numeric_std: tuple[float, ...] = ()
    numeric_names: tuple[str, ...] = ()
    success_prob: tuple[float, ...] = ()
    n_items: int = 500
    raters_per_item: int = 5
    n_raters: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        m, T = len(self.labels), len(self.prior)
        LabelSet(self.labels)
        _check_distribution(self.prior, "prior")
        if len(self.confusion) != T:
            raise ValueError(f"confusion needs one row per state ({T})")
        for t, row in enumerate(self.confusion):
            if len(row) != m:
                raise ValueError(f"confusion row {t} needs {m} entries")
            _check_distribution(row, f"confusion[{t}]")
        for j, feature in enumerate(self.categorical):
            if len(feature) != T:
                raise ValueError(f"categorical feature {j} needs one row per state")
            width = len(feature[0])
            for t, row in enumerate(feature):
                if len(row) != width:
                    raise ValueError(f"categorical feature {j} rows differ in width")
                _check_distribution(row, f"categorical[{j}][{t}]")
        if len(self.numeric_means) != len(self.numeric_std):
            raise ValueError("numeric_means and numeric_std must align")
        for j, means in enumerate(self.numeric_means):
            if len(means) != T:
                raise ValueError(f"numeric feature {j} needs one mean per state")
            if not self.numeric_std[j] > 0:
                raise ValueError(f"numeric_std[{j}] must be positive")
        if self.numeric_names and len(self.numeric_names) != len(self.numeric_means):
            raise ValueError("numeric_names must name every numeric feature")
        if self.success_prob and (len(self.success_prob) != T or not all(0 <= p <= 1 for p in self.success_prob)):
            raise ValueError("success_prob needs one probability per state")
        if self.n_items < 2 or self.raters_per_item < 1:
            raise ValueError("need at least two items and one rater per item")
        if self.n_raters < self.raters_per_item:
            raise ValueError("rater pool smaller than raters_per_item")

    @property
    def n_states(self) -> int:
        return len(self.prior)

    @property
    def label_set(self) -> LabelSet:
        return LabelSet(self.labels)

    @property
    def schema(self) -> DescriptorSchema:
        return DescriptorSchema(len(self.numeric_means), tuple(len(f[0]) for f in self.categorical))

    @property
    def fully_mixed(self) -> bool:
        arrays = [self.prior, *self.confusion, *(row for f in self.categorical for row in f)]
        return all(min(a) > 0 for a in arrays)

    def numeric_index(self, name) -> int:
        if isinstance(name, int):
            return name
        return self.numeric_names.index(name)

    def with_(self, **changes) -> "WorldConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return WorldConfig(**fields)

    def updated(self, obj: Mapping) -> "WorldConfig":
        """Copy with the JSON-style overrides in ``obj`` applied."""
        unknown = set(obj) - set(self.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown world keys {sorted(unknown)}")
        return self.with_(**{k: _tupleize(v) for k, v in obj.items()})

    @classmethod
    def from_dict(cls, obj: Mapping) -> "WorldConfig":
        """World from JSON-style overrides of ``default_world()``."""
        return default_world().updated(obj)

    def to_dict(self) -> dict:
        return {k: _listify(getattr(self, k)) for k in self.__dataclass_fields__}


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    return value


def _check_distribution(p: Sequence[float], what: str) -> None:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or len(arr) == 0 or np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-9:
        raise ValueError(f"{what} must be a probability vector, got {list(p)}")


def symmetric_confusion(m: int, diagonal: float) -> tuple[tuple[float, ...], ...]:
    off = (1.0 - diagonal) / (m - 1)
    return tuple(tuple(diagonal if i == j else off for j in range(m)) for i in range(m))


def default_world(**overrides) -> WorldConfig:
    """Three labels and states, ``C`` diagonal 0.7, two 3-valued features with accuracy 0.8."""
    emission = symmetric_confusion(3, 0.8)
    base = dict(
        labels=("u", "s", "e"),
        prior=(1 / 3, 1 / 3, 1 / 3),
        confusion=symmetric_confusion(3, 0.7),
        categorical=(emission, emission),
        success_prob=(0.2, 0.5, 0.8),
    )
    base.update(overrides)
    return WorldConfig(**base)


def pages_world(**overrides) -> WorldConfig:
    """Default world plus a ``pages`` feature whose mean grows with quality."""
    base = dict(numeric_means=((10.0, 20.0, 30.0),), numeric_std=(6.0,), numeric_names=("pages",))
    base.update(overrides)
    return default_world(**base)


@dataclass
class World:
    config: WorldConfig
    states: np.ndarray        # (M,)
    numeric: np.ndarray       # (M, n_numeric)
    categorical: np.ndarray   # (M, n_categorical)
    raters: np.ndarray        # (M, R) rater ids
    signals: np.ndarray       # (M, R) label indices
    outcomes: np.ndarray      # (M,) success indicator

    @property
    def n_items(self) -> int:
        return len(self.states)

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.numeric, self.categorical.astype(float)])


def generate_world(config: WorldConfig, rng: Optional[np.random.Generator] = None, n_items: Optional[int] = None) -> World:
    rng = rng if rng is not None else keyed_rng(config.seed, "world")
    M = n_items if n_items is not None else config.n_items
    R = config.raters_per_item
    states = rng.choice(config.n_states, size=M, p=np.asarray(config.prior))
    categorical = np.empty((M, len(config.categorical)), dtype=np.int64)
    for j, feature in enumerate(config.categorical):
        categorical[:, j] = _draw_rows(np.asarray(feature)[states], rng)
    numeric = np.empty((M, len(config.numeric_means)))
    for j, means in enumerate(config.numeric_means):
        numeric[:, j] = rng.normal(np.asarray(means)[states], config.numeric_std[j])
    keys = rng.random((M, config.n_raters))
    raters = np.argpartition(keys, R - 1, axis=1)[:, :R] if R < config.n_raters else np.tile(np.arange(R), (M, 1))
    raters = np.sort(raters, axis=1)
    signals = _draw_rows(np.asarray(config.confusion)[np.repeat(states, R)], rng).reshape(M, R)
    success = np.asarray(config.success_prob or [0.5] * config.n_states)
    outcomes = (rng.random(M) < success[states]).astype(np.int64)
    return World(config, states, numeric, categorical, raters, signals, outcomes)


def _draw_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


# -- analytic quantities -----------------------------------------------------


def state_posterior(config: WorldConfig, numeric: np.ndarray, categorical: np.ndarray) -> np.ndarray:
    """P(t | D) for each row of descriptors, shape (M, T)."""
    numeric = np.atleast_2d(np.asarray(numeric, dtype=float))
    categorical = np.atleast_2d(np.asarray(categorical, dtype=np.int64))
    M = max(len(numeric), len(categorical))
    logp = np.tile(np.log(np.maximum(np.asarray(config.prior), 1e-300)), (M, 1))
    for j, feature in enumerate(config.categorical):
        emit = np.asarray(feature)
        logp += np.log(np.maximum(emit[:, categorical[:, j]].T, 1e-300))
    for j, means in enumerate(config.numeric_means):
        logp += stats.norm.logpdf(numeric[:, [j]], loc=np.asarray(means)[None, :], scale=config.numeric_std[j])
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def report_distribution(config: WorldConfig, numeric, categorical) -> np.ndarray:
    """P(truthful report = x | D), shape (M, m)."""
    return state_posterior(config, numeric, categorical) @ np.asarray(config.confusion)


@dataclass
class SelfPredictingReport:
    margins: np.ndarray
    cell_margins: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return bool(np.all(self.margins > 0)) and all(np.all(m > 0) for m in self.cell_margins.values())

    @property
    def min_margin(self) -> float:
        values = [self.margins.min(), *(m.min() for m in self.cell_margins.values())]
        return float(min(values))


def peer_conditional(prior: np.ndarray, confusion: np.ndarray) -> np.ndarray:
    """``cond[y, x] = P(peer sees x | I see y)`` for two independent raters of one item."""
    prior = np.asarray(prior, dtype=float)
    C = np.asarray(confusion, dtype=float)
    joint = (C * prior[:, None]).T @ C
    marginal = joint.sum(axis=1)
    return np.divide(joint, marginal[:, None], out=np.zeros_like(joint), where=marginal[:, None] > 0)


def peer_margins(prior: np.ndarray, confusion: np.ndarray) -> np.ndarray:
    """P(peer=x | me=x) - max over y != x of P(peer=x | me=y), for each label x."""
    cond = peer_conditional(prior, confusion)
    m = cond.shape[0]
    margins = np.empty(m)
    for x in range(m):
        margins[x] = cond[x, x] - max(cond[y, x] for y in range(m) if y != x)
    return margins


def check_self_predicting(config: WorldConfig) -> SelfPredictingReport:
    """Per-label self-predicting margins, overall and within each categorical descriptor cell."""
    C = np.asarray(config.confusion)
    report = SelfPredictingReport(peer_margins(np.asarray(config.prior), C))
    widths = [len(f[0]) for f in config.categorical]
    if widths:
        cells = np.array(np.meshgrid(*[np.arange(w) for w in widths], indexing="ij")).reshape(len(widths), -1).T
        posterior = state_posterior(config.with_(numeric_means=(), numeric_std=(), numeric_names=()),
                                    np.zeros((len(cells), 0)), cells)
        for cell, prior in zip(cells, posterior):
            report.cell_margins[tuple(int(c) for c in cell)] = peer_margins(prior, C)
    return report


# -- strategies ----------------------------------------------------------------


@dataclass(frozen=True)
class StrategySpec:
    """How a rater turns a signal into a report.

    ``rule`` for ``descriptor_map`` is either a categorical lookup
    ``{"categorical": j, "map": [label per value]}`` or a numeric threshold
    ``{"numeric": j_or_name, "threshold": x, "below": label, "above": label}``.
    """

    kind: str = TRUTHFUL
    label: Optional[str] = None
    gamma: float = 0.0
    rule: Optional[Mapping] = None
    name: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == CONSTANT and self.label is None:
            raise ValueError("constant strategy needs a label")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.kind == DESCRIPTOR_MAP and not self.rule:
            raise ValueError("descriptor_map strategy needs a rule")

    @property
    def title(self) -> str:
        if self.name:
            return self.name
        if self.kind == CONSTANT:
            return f"constant({self.label})"
        if self.kind == NOISY:
            return f"noisy_truthful({self.gamma:g})"
        if self.kind == DESCRIPTOR_MAP:
            r = self.rule
            if "threshold" in r:
                return f"descriptor_map({r['numeric']}>{r['threshold']:g}?{r['above']}:{r['below']})"
            return f"descriptor_map(cat{r['categorical']}->{''.join(r['map'])})"
        return self.kind

    def validate_for(self, config: WorldConfig) -> None:
        labels = config.label_set
        if self.kind == CONSTANT and self.label not in labels:
            raise ValueError(f"label {self.label!r} not in {config.labels}")
        if self.kind != DESCRIPTOR_MAP:
            return
        r = self.rule
        if "threshold" in r:
            j = config.numeric_index(r["numeric"])
            if not 0 <= j < len(config.numeric_means):
                raise ValueError(f"no numeric feature {r['numeric']!r}")
            for key in ("below", "above"):
                if r[key] not in labels:
                    raise ValueError(f"label {r[key]!r} not in {config.labels}")
        else:
            j = r["categorical"]
            if not 0 <= j < len(config.categorical):
                raise ValueError(f"no categorical feature {j}")
            if len(r["map"]) != len(config.categorical[j][0]):
                raise ValueError("descriptor map must cover every category")
            for label in r["map"]:
                if label not in labels:
                    raise ValueError(f"label {label!r} not in {config.labels}")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "StrategySpec":
        return cls(**dict(obj))

    def report(self, config: WorldConfig, signals: np.ndarray, numeric: np.ndarray,
               categorical: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Reports (label indices) for ratings with the given signals and item descriptors."""
        labels = config.label_set
        m = len(labels)
        if self.kind == TRUTHFUL:
            return signals.copy()
        if self.kind == CONSTANT:
            return np.full_like(signals, labels.index(self.label))
        if self.kind == NOISY:
            flip = rng.random(signals.shape) < self.gamma
            return np.where(flip, rng.integers(m, size=signals.shape), signals)
        r = self.rule
        if "threshold" in r:
            x = numeric[:, config.numeric_index(r["numeric"])]
            return np.where(x > r["threshold"], labels.index(r["above"]), labels.index(r["below"]))
        lookup = np.array([labels.index(label) for label in r["map"]])
        return lookup[categorical[:, r["categorical"]]]


def truthful() -> StrategySpec:
    return StrategySpec(TRUTHFUL)


def constant(label: str) -> StrategySpec:
    return StrategySpec(CONSTANT, label=label)


def noisy_truthful(gamma: float) -> StrategySpec:
    return StrategySpec(NOISY, gamma=gamma)


def uniform_random() -> StrategySpec:
    return StrategySpec(NOISY, gamma=1.0, name="uniform_random")


def descriptor_map(rule: Mapping, name: Optional[str] = None) -> StrategySpec:
    return StrategySpec(DESCRIPTOR_MAP, rule=dict(rule), name=name)


Population = Sequence[tuple[StrategySpec, float]]


def assign_strategies(population: Population, n_raters: int) -> np.ndarray:
    """Strategy index for each rater id, by largest-remainder apportionment of the weights."""
    weights = np.asarray([w for _, w in population], dtype=float)
    if len(weights) == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("population weights must be non-negative with a positive sum")
    quota = weights / weights.sum() * n_raters
    counts = np.floor(quota).astype(int)
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[: n_raters - counts.sum()]] += 1
    return np.repeat(np.arange(len(population)), counts)


def make_reports(world: World, population: Population, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Reports and per-rating strategy index, both (M, R)."""
    owner = assign_strategies(population, world.config.n_raters)[world.raters]
    reports = np.empty_like(world.signals)
    M, R = world.signals.shape
    for k, (spec, _) in enumerate(population):
        spec.validate_for(world.config)
        mask = owner == k
        if not mask.any():
            continue
        rows = np.nonzero(mask)[0]
        reports[mask] = spec.report(world.config, world.signals[mask], world.numeric[rows],
                                    world.categorical[rows], rng)
    return reports, owner


# -- batch scoring ---------------------------------------------------------------


def _peer_match_share(reports: np.ndarray) -> np.ndarray:
    """Share of each rating's peers on the same item that report the same label."""
    M, R = reports.shape
    if R < 2:
        return np.full(reports.shape, np.nan)
    same = (reports[:, :, None] == reports[:, None, :]).sum(axis=2) - 1
    return same / (R - 1)


def _other_items(M: int, R: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """For each of the ``M * R`` ratings, ``count`` distinct items other than its own."""
    K = M * R
    item_of = np.repeat(np.arange(M), R)
    if count == 0:
        return np.empty((K, 0), dtype=np.int64)
    if K * M <= 4_000_000 or 2 * count > M - 1:
        keys = rng.random((K, M))
        keys[np.arange(K), item_of] = np.inf
        return np.argpartition(keys, count - 1, axis=1)[:, :count]
    out = np.empty((K, count), dtype=np.int64)
    todo = np.arange(K)
    while len(todo):
        draw = rng.integers(M - 1, size=(len(todo), count))
        draw += draw >= item_of[todo, None]
        srt = np.sort(draw, axis=1)
        ok = np.all(srt[:, 1:] != srt[:, :-1], axis=1)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


def original_scores(reports: np.ndarray, params: ScoreParams, rng: np.random.Generator) -> np.ndarray:
    """Expectation-mode scores when every item has the same number of distinct raters.

    Each rating samples ``n - 1`` distinct other items and one rating from
    each; the frequency of its own label in that sample is clamped at ``1/n``.
    """
    M, R = reports.shape
    if params.include_peer_in_frequency:
        raise NotImplementedError("batch scorer excludes the peer from the frequency sample")
    eligible = M - 1
    n = min(params.n or DEFAULT_MAX_SAMPLE, eligible + 1)
    K = M * R
    picked = _other_items(M, R, n - 1, rng)
    cols = rng.integers(R, size=picked.shape)
    sample = reports[picked, cols]
    own = reports.reshape(K, 1)
    share = (sample == own).sum(axis=1) / max(n - 1, 1)
    freq = np.maximum(share, 1.0 / n).reshape(M, R)
    return params.alpha * (_peer_match_share(reports) / freq - 1.0)


def reference_original_scores(reports: np.ndarray, raters: np.ndarray, labels: LabelSet,
                              params: ScoreParams, seed: int) -> np.ndarray:
    """The same scores computed rating by rating through ``score_item_ratings``."""
    M, R = reports.shape
    events = [
        RatingEvent(f"w{raters[k, j]}", f"i{k}", "q", labels[reports[k, j]])
        for k in range(M) for j in range(R)
    ]
    pool = RatingPool(events)
    out = np.empty((M, R))
    for k in range(M):
        scores = score_item_ratings(pool, f"i{k}", "q", params, keyed_rng(seed, k))
        for j in range(R):
            out[k, j] = scores[f"w{raters[k, j]}"].value
    return out


def augmented_scores(reports: np.ndarray, q: np.ndarray, alpha: float = 1.0, eps: float = DEFAULT_EPSILON) -> np.ndarray:
    """Expectation-mode augmented scores given per-item Q(x|D) rows ``q`` of shape (M, m)."""
    M, R = reports.shape
    q_tilde = np.maximum(q[np.arange(M)[:, None], reports], eps)
    return alpha * (_peer_match_share(reports) / q_tilde - 1.0)


def posterior_success(config: WorldConfig, numeric, categorical, reports: np.ndarray) -> np.ndarray:
    """P(o = 1 | D, signal = report) for each rating, shape (M, R)."""
    post = state_posterior(config, numeric, categorical)                # (M, T)
    C = np.asarray(config.confusion)                                     # (T, m)
    joint = post[:, None, :] * C[:, reports].transpose(1, 2, 0)          # (M, R, T)
    joint /= joint.sum(axis=2, keepdims=True)
    success = np.asarray(config.success_prob or [0.5] * config.n_states)
    return joint @ success


def quadratic_scores(p: np.ndarray, outcomes: np.ndarray, benchmark: str = "community_average") -> np.ndarray:
    """S(p_i, o) - S(p_B, o) with p_B the leave-one-out community mean or 0.5."""
    M, R = p.shape
    if benchmark == "constant" or R < 2:
        p_b = np.full_like(p, CONSTANT_BENCHMARK)
    else:
        p_b = (p.sum(axis=1, keepdims=True) - p) / (R - 1)
    o = outcomes[:, None]
    return quadratic_score(p, o) - quadratic_score(p_b, o)


def training_set_from(world: World, reports: np.ndarray) -> TrainingSet:
    R = reports.shape[1]
    cfg = world.config
    return TrainingSet.from_arrays(
        cfg.schema, cfg.label_set,
        np.repeat(world.numeric, R, axis=0), np.repeat(world.categorical, R, axis=0),
        reports.reshape(-1),
    )


# -- experiments -----------------------------------------------------------------


@dataclass
class StrategyResult:
    strategy: str
    mean: float
    stderr: float
    count: int
    replicate_means: np.ndarray

    def ci(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return self.mean - z * self.stderr, self.mean + z * self.stderr


@dataclass
class ExperimentResult:
    mechanism: str
    results: dict[str, StrategyResult]
    n_ratings: int
    replications: int
    correlation: float = 0.0
    correlation_defined: bool = False
    scores: list[np.ndarray] = field(default_factory=list)
    convergence: list[tuple[int, float]] = field(default_factory=list)
    by_n: dict[int, StrategyResult] = field(default_factory=dict)

    def rows(self) -> list[tuple]:
        return [
            (self.mechanism, r.strategy, self.n_ratings, r.mean, r.stderr, r.count)
            for r in self.results.values()
        ]


def _summarize(title: str, per_rep: Sequence[float]) -> StrategyResult:
    arr = np.asarray(per_rep, dtype=float)
    arr = arr[~np.isnan(arr)]
    n = len(arr)
    mean = float(arr.mean()) if n else float("nan")
    stderr = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return StrategyResult(title, mean, stderr, n, arr)


def _titles(population: Population) -> list[str]:
    titles = [spec.title for spec, _ in population]
    if len(set(titles)) != len(titles):
        raise ValueError(f"strategy titles must be distinct: {titles}")
    return titles


def run_experiment(
    config: WorldConfig,
    population: Population,
    mechanism: str = ORIGINAL,
    replications: int = 50,
    params: ScoreParams = ScoreParams(),
    seed: Optional[int] = None,
    forest_config: ForestConfig = ForestConfig(tree_count=50),
    training_ratings: int = 5000,
    epsilon: float = DEFAULT_EPSILON,
    benchmark: str = "community_average",
    engine: str = "batch",
    require_self_predicting: bool = True,
    keep_scores: bool = False,
) -> ExperimentResult:
    """Mean score per strategy over independent replications of the world.

    The augmented mechanism trains its forest on a separate world of
    ``training_ratings`` ratings made by the same population.
    """
    if mechanism not in (ORIGINAL, AUGMENTED, QUADRATIC):
        raise ValueError(f"unknown mechanism {mechanism!r}")
    if engine not in ("batch", "reference"):
        raise ValueError(f"unknown engine {engine!r}")
    if require_self_predicting and not check_self_predicting(config).holds:
        raise ValueError("world does not satisfy the self-predicting condition")
    if mechanism == QUADRATIC and not config.success_prob:
        raise ValueError("quadratic experiments need success_prob")
    seed = config.seed if seed is None else seed
    titles = _titles(population)
    per_rep = {t: [] for t in titles}
    corr, defined = [], []
    kept = []
    for rep in range(replications):
        world = generate_world(config, keyed_rng(seed, "world", rep))
        reports, owner = make_reports(world, population, keyed_rng(seed, "reports", rep))
        score_rng = keyed_rng(seed, "score", rep)
        if mechanism == ORIGINAL:
            if engine == "reference":
                scores = reference_original_scores(reports, world.raters, config.label_set, params,
                                                   int(score_rng.integers(2**63)))
            else:
                scores = original_scores(reports, params, score_rng)
        elif mechanism == AUGMENTED:
            train_items = max(2, math.ceil(training_ratings / config.raters_per_item))
            train_world = generate_world(config, keyed_rng(seed, "train-world", rep), n_items=train_items)
            train_reports, _ = make_reports(train_world, population, keyed_rng(seed, "train-reports", rep))
            forest = train_forest(training_set_from(train_world, train_reports),
                                  _with_seed(forest_config, seed, rep))
            q = forest.predict_matrix(world.X)
            scores = augmented_scores(reports, q, params.alpha, epsilon)
        else:
            p = posterior_success(config, world.numeric, world.categorical, reports)
            scores = quadratic_scores(p, world.outcomes, benchmark)
        for k, t in enumerate(titles):
            mask = owner == k
            per_rep[t].append(float(scores[mask].mean()) if mask.any() else float("nan"))
        rho, ok = rating_quality_correlation(world, reports)
        corr.append(rho)
        defined.append(ok)
        if keep_scores:
            kept.append(scores)
    return ExperimentResult(
        mechanism=mechanism,
        results={t: _summarize(t, per_rep[t]) for t in titles},
        n_ratings=config.n_items * config.raters_per_item,
        replications=replications,
        correlation=float(np.mean(corr)) if corr else 0.0,
        correlation_defined=all(defined) if defined else False,
        scores=kept,
    )


def _with_seed(config: ForestConfig, seed: int, *keys) -> ForestConfig:
    derived = int(keyed_rng(seed, "forest", *keys).integers(2**63))
    fields = {k: getattr(config, k) for k in config.__dataclass_fields__}
    fields["seed"] = derived
    return ForestConfig(**fields)


def convergence_curve(
    config: WorldConfig,
    strategy: StrategySpec,
    mechanism: str = AUGMENTED,
    schedule: Sequence[int] = (1000, 5000, 20000),
    replications: int = 3,
    test_items: Optional[int] = None,
    params: ScoreParams = ScoreParams(),
    seed: Optional[int] = None,
    forest_config: ForestConfig = ForestConfig(tree_count=50),
    epsilon: float = DEFAULT_EPSILON,
) -> ExperimentResult:
    """Mean |score| of a strategy everyone adopts, as the training corpus grows.

    Each replication scores one held-out test world at every ``N``; under
    the augmented mechanism the forest is retrained on the first
    ``N / raters_per_item`` items of a training world sized for the largest N.
    """
    if mechanism not in (ORIGINAL, AUGMENTED):
        raise ValueError("convergence is defined for the original and augmented mechanisms")
    seed = config.seed if seed is None else seed
    population = [(strategy, 1.0)]
    schedule = sorted(int(n) for n in schedule)
    R = config.raters_per_item
    per_n = {n: [] for n in schedule}
    for rep in range(replications):
        test = generate_world(config, keyed_rng(seed, "test-world", rep), n_items=test_items)
        reports, _ = make_reports(test, population, keyed_rng(seed, "test-reports", rep))
        if mechanism == ORIGINAL:
            value = float(np.abs(original_scores(reports, params, keyed_rng(seed, "score", rep))).mean())
            for n in schedule:
                per_n[n].append(value)
            continue
        big = math.ceil(schedule[-1] / R)
        train = generate_world(config, keyed_rng(seed, "train-world", rep), n_items=big)
        train_reports, _ = make_reports(train, population, keyed_rng(seed, "train-reports", rep))
        full = training_set_from(train, train_reports)
        for n in schedule:
            rows = math.ceil(n / R) * R
            subset = full.subset(np.arange(len(full)) < rows)
            forest = train_forest(subset, _with_seed(forest_config, seed, rep, n))
            q = forest.predict_matrix(test.X)
            per_n[n].append(float(np.abs(augmented_scores(reports, q, params.alpha, epsilon)).mean()))
    summaries = {n: _summarize(strategy.title, per_n[n]) for n in schedule}
    result = ExperimentResult(
        mechanism=mechanism,
        results={},
        n_ratings=schedule[-1],
        replications=replications,
        convergence=[(n, summaries[n].mean) for n in schedule],
        by_n=summaries,
    )
    return result


def convergence_rows(result: ExperimentResult) -> list[tuple]:
    return [
        (result.mechanism, s.strategy, n, s.mean, s.stderr, s.count)
        for n, s in sorted(result.by_n.items())
    ]


def rating_quality_correlation(world: World, reports: np.ndarray, level_weights: Optional[Mapping[str, float]] = None) -> tuple[float, bool]:
    """Spearman correlation of each item's rating total with its latent state.

    Returns ``(0.0, False)`` when either side has no variance.
    """
    labels = world.config.labels
    weights = level_weights or {"u": -1.0, "s": 1.0, "e": 2.0}
    w = np.array([weights.get(label, float(i)) for i, label in enumerate(labels)])
    totals = w[reports].sum(axis=1)
    if np.ptp(totals) == 0 or np.ptp(world.states) == 0:
        return 0.0, False
    rho = stats.spearmanr(totals, world.states).statistic
    return float(rho), True


def world_events(world: World, reports: np.ndarray, question: str = "contribution",
                 finalize: bool = True, r0: float = 0.0) -> list:
    """Ledger events publishing every item of ``world`` as a project rated with ``reports``.

    Rater ``j`` becomes user ``w{j}``; each item is authored by the lowest
    pool member not among its raters.
    """
    from . import events as ev

    labels = world.config.labels
    out = []

    def emit(kind, payload, ts=0.0):
        out.append(ev.LedgerEvent(len(out) + 1, kind, payload, ts))

    for j in range(world.config.n_raters):
        emit(ev.USER_JOINED, {"user": f"w{j}", "r0": r0})
    for k in range(world.n_items):
        taken = set(world.raters[k].tolist())
        author = next(j for j in range(world.config.n_raters) if j not in taken)
        descriptors = {"numeric": world.numeric[k].tolist(), "categorical": world.categorical[k].tolist()}
        emit(ev.PROJECT_PUBLISHED, {"item": f"i{k}", "author": f"w{author}", "descriptors": descriptors})
        for j, rater in enumerate(world.raters[k]):
            emit(ev.RATING_SUBMITTED, {"rater": f"w{rater}", "item": f"i{k}", "question": question,
                                       "label": labels[reports[k, j]]})
        if finalize:
            emit(ev.SCORING_FINALIZED, {"item": f"i{k}", "question": question})
    return out
