"""Probability-machine random forest over public item descriptors.

Each tree is grown on a bootstrap resample with Gini splits over a random
subset of features, and its leaves keep the class proportions of the
training rows that reach them. The forest's estimate of P(label | D) is
the average of those leaf vectors across trees.

Numeric features split on midpoints between consecutive distinct values.
Categorical features with at most ``MAX_SUBSET_CATEGORIES`` levels split
on subset membership; wider ones are treated as ordinal codes.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyTrainingSet, SchemaMismatch
from .mechanism import LabelSet

MAX_SUBSET_CATEGORIES = 8
FOREST_FORMAT = "peertruth-forest"
FOREST_VERSION = 1


@dataclass(frozen=True)
class DescriptorSchema:
    n_numeric: int = 0
    categories: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(int(c) for c in self.categories))
        if self.n_numeric < 0 or any(c < 1 for c in self.categories):
            raise ValueError("invalid descriptor schema")

    @property
    def n_features(self) -> int:
        return self.n_numeric + len(self.categories)

    def subset_split(self, feature: int) -> bool:
        if feature < self.n_numeric:
            return False
        return self.categories[feature - self.n_numeric] <= MAX_SUBSET_CATEGORIES


@dataclass(frozen=True)
class DescriptorVector:
    numeric: tuple[float, ...] = ()
    categorical: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {"numeric": list(self.numeric), "categorical": list(self.categorical)}

    @classmethod
    def from_json(cls, obj: Optional[dict]) -> "DescriptorVector":
        obj = obj or {}
        return cls(
            tuple(float(x) for x in obj.get("numeric", ())),
            tuple(int(x) for x in obj.get("categorical", ())),
        )


def _encode(schema: DescriptorSchema, d: DescriptorVector) -> list[float]:
    if len(d.numeric) != schema.n_numeric or len(d.categorical) != len(schema.categories):
        raise SchemaMismatch(
            f"descriptor arity ({len(d.numeric)}, {len(d.categorical)}) does not match "
            f"schema ({schema.n_numeric}, {len(schema.categories)})"
        )
    for x in d.numeric:
        if not math.isfinite(x):
            raise SchemaMismatch(f"non-finite numeric descriptor {x!r}")
    for c, width in zip(d.categorical, schema.categories):
        if not 0 <= c < width:
            raise SchemaMismatch(f"category {c} outside [0, {width})")
    return [float(x) for x in d.numeric] + [float(c) for c in d.categorical]


@dataclass
class TrainingSet:
    """Descriptor rows with their labels; ``items`` tags each row with its source item."""

    schema: DescriptorSchema
    labels: LabelSet
    X: np.ndarray
    y: np.ndarray
    items: Optional[np.ndarray] = None

    @classmethod
    def from_rows(
        cls,
        rows: Iterable[tuple[DescriptorVector, str]],
        schema: DescriptorSchema,
        labels: LabelSet,
        items: Optional[Sequence[str]] = None,
    ) -> "TrainingSet":
        X, y = [], []
        for d, label in rows:
            X.append(_encode(schema, d))
            if label not in labels:
                raise SchemaMismatch(f"label {label!r} not in {labels.labels}")
            y.append(labels.index(label))
        X_arr = np.asarray(X, dtype=float).reshape(len(X), schema.n_features)
        item_arr = None if items is None else np.asarray(list(items), dtype=object)
        if item_arr is not None and len(item_arr) != len(y):
            raise SchemaMismatch("items must tag every row")
        return cls(schema, labels, X_arr, np.asarray(y, dtype=np.int64), item_arr)

    @classmethod
    def from_arrays(cls, schema, labels, numeric, categorical, y, items=None) -> "TrainingSet":
        n = len(y)
        numeric = np.asarray(numeric, dtype=float).reshape(n, schema.n_numeric)
        categorical = np.asarray(categorical, dtype=float).reshape(n, len(schema.categories))
        X = np.hstack([numeric, categorical])
        if not np.all(np.isfinite(X)):
            raise SchemaMismatch("descriptors must be finite")
        for j, width in enumerate(schema.categories):
            col = categorical[:, j]
            if n and (col.min() < 0 or col.max() >= width):
                raise SchemaMismatch(f"categorical feature {j} outside [0, {width})")
        y = np.asarray(y, dtype=np.int64)
        if n and (y.min() < 0 or y.max() >= len(labels)):
            raise SchemaMismatch("label index outside label set")
        return cls(schema, labels, X, y, None if items is None else np.asarray(items, dtype=object))

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask: np.ndarray) -> "TrainingSet":
        items = None if self.items is None else self.items[mask]
        return TrainingSet(self.schema, self.labels, self.X[mask], self.y[mask], items)


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 200
    max_depth: Optional[int] = None
    min_leaf_size: int = 5
    features_per_split: Optional[int] = None
    bootstrap_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tree_count < 1:
            raise ValueError("tree_count must be >= 1")
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")
        if not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")


@dataclass
class Tree:
    feature: np.ndarray    # -1 marks a leaf
    threshold: np.ndarray  # numeric split point, or subset bitmask for categorical splits
    subset: np.ndarray     # True where the split is by category membership
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # (nodes, labels) class proportions; meaningful at leaves

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node[rows]]
            inner = f >= 0
            if not inner.any():
                return node
            rows = rows[inner]
            cur = node[rows]
            f = f[inner]
            x = X[rows, f]
            thr = self.threshold[cur]
            go_left = x <= thr
            by_subset = self.subset[cur]
            if by_subset.any():
                bits = thr[by_subset].astype(np.int64) >> x[by_subset].astype(np.int64)
                go_left[by_subset] = (bits & 1) == 1
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def leaves(self) -> np.ndarray:
        return self.value[self.feature < 0]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "subset": self.subset.astype(int).tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Tree":
        return cls(
            np.asarray(obj["feature"], dtype=np.int64),
            np.asarray(obj["threshold"], dtype=float),
            np.asarray(obj["subset"], dtype=bool),
            np.asarray(obj["left"], dtype=np.int64),
            np.asarray(obj["right"], dtype=np.int64),
            np.asarray(obj["value"], dtype=float),
        )


def _subset_masks(width: int) -> tuple[np.ndarray, np.ndarray]:
    # every non-trivial bipartition once: subsets of the first width-1 categories
    codes = np.arange(1, 2 ** (width - 1), dtype=np.int64)
    member = (codes[:, None] >> np.arange(width)[None, :]) & 1
    return codes, member.astype(float)


_MASK_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _child_impurity(left: np.ndarray, total: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Size-weighted Gini of both children for each candidate split (rows of ``left``)."""
    right = total[None, :] - left
    nl = left.sum(axis=1)
    nr = right.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        imp = (nl - (left**2).sum(axis=1) / nl) + (nr - (right**2).sum(axis=1) / nr)
    return imp, np.minimum(nl, nr)


class _TreeBuilder:
    def __init__(self, X, y, schema: DescriptorSchema, n_labels: int, config: ForestConfig, rng):
        self.X = X
        self.y = y
        self.schema = schema
        self.m = n_labels
        self.config = config
        self.rng = rng
        p = schema.n_features
        if p == 0:
            self.k = 0
        else:
            self.k = config.features_per_split or max(1, math.ceil(math.sqrt(p)))
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.subset: list[bool] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[np.ndarray] = []

    def _new_node(self, counts: np.ndarray) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.subset.append(False)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(counts / counts.sum())
        return len(self.feature) - 1

    def _numeric_split(self, x, y, total):
        order = np.argsort(x, kind="stable")
        xs = x[order]
        onehot = np.zeros((len(xs), self.m))
        onehot[np.arange(len(xs)), y[order]] = 1.0
        left = np.cumsum(onehot, axis=0)[:-1]
        imp, smaller = _child_impurity(left, total)
        ok = (xs[:-1] < xs[1:]) & (smaller >= self.config.min_leaf_size)
        if not ok.any():
            return None
        imp = np.where(ok, imp, np.inf)
        i = int(np.argmin(imp))
        return imp[i], float((xs[i] + xs[i + 1]) / 2.0), False

    def _subset_split(self, x, y, total, width):
        if width not in _MASK_CACHE:
            _MASK_CACHE[width] = _subset_masks(width)
        codes, member = _MASK_CACHE[width]
        counts = np.bincount(x.astype(np.int64) * self.m + y, minlength=width * self.m)
        counts = counts.reshape(width, self.m).astype(float)
        left = member @ counts
        imp, smaller = _child_impurity(left, total)
        ok = smaller >= self.config.min_leaf_size
        if not ok.any():
            return None
        imp = np.where(ok, imp, np.inf)
        i = int(np.argmin(imp))
        return imp[i], float(codes[i]), True

    def _best_split(self, idx):
        X, y = self.X[idx], self.y[idx]
        total = np.bincount(y, minlength=self.m).astype(float)
        chosen = []
        for j in self.rng.permutation(self.schema.n_features):
            col = X[:, j]
            if col.min() < col.max():
                chosen.append(int(j))
                if len(chosen) == self.k:
                    break
        best = None
        for j in sorted(chosen):
            if self.schema.subset_split(j):
                width = self.schema.categories[j - self.schema.n_numeric]
                cand = self._subset_split(X[:, j], y, total, width)
            else:
                cand = self._numeric_split(X[:, j], y, total)
            if cand is not None and (best is None or cand[0] < best[0]):
                best = (cand[0], j, cand[1], cand[2])
        return best

    def build(self, idx: np.ndarray) -> Tree:
        cfg = self.config
        stack = [(idx, 0, None, False)]
        while stack:
            rows, depth, parent, is_left = stack.pop()
            counts = np.bincount(self.y[rows], minlength=self.m).astype(float)
            node = self._new_node(counts)
            if parent is not None:
                if is_left:
                    self.left[parent] = node
                else:
                    self.right[parent] = node
            if (
                (cfg.max_depth is not None and depth >= cfg.max_depth)
                or len(rows) < 2 * cfg.min_leaf_size
                or np.count_nonzero(counts) <= 1
                or self.k == 0
            ):
                continue
            split = self._best_split(rows)
            if split is None:
                continue
            _, j, thr, by_subset = split
            x = self.X[rows, j]
            if by_subset:
                go_left = ((int(thr) >> x.astype(np.int64)) & 1) == 1
            else:
                go_left = x <= thr
            self.feature[node] = j
            self.threshold[node] = thr
            self.subset[node] = by_subset
            # right pushed first so the left subtree is numbered first
            stack.append((rows[~go_left], depth + 1, node, False))
            stack.append((rows[go_left], depth + 1, node, True))
        return Tree(
            np.asarray(self.feature, dtype=np.int64),
            np.asarray(self.threshold, dtype=float),
            np.asarray(self.subset, dtype=bool),
            np.asarray(self.left, dtype=np.int64),
            np.asarray(self.right, dtype=np.int64),
            np.vstack(self.value),
        )


@dataclass
class Forest:
    trees: list[Tree]
    schema: DescriptorSchema
    labels: LabelSet
    config: ForestConfig = field(default_factory=ForestConfig)

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.schema.n_features:
            raise SchemaMismatch(f"expected rows of {self.schema.n_features} features, got shape {X.shape}")
        total = np.zeros((len(X), len(self.labels)))
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def predict_proba(self, d: DescriptorVector) -> np.ndarray:
        return self.predict_matrix(np.asarray([_encode(self.schema, d)]))[0]

    def predict_many(self, ds: Sequence[DescriptorVector]) -> np.ndarray:
        return self.predict_matrix(np.asarray([_encode(self.schema, d) for d in ds]))

    def to_lines(self) -> list[str]:
        header = {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "schema": {"n_numeric": self.schema.n_numeric, "categories": list(self.schema.categories)},
            "labels": list(self.labels.labels),
            "config": asdict(self.config),
        }
        lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(t.to_json(), sort_keys=True, separators=(",", ":")) for t in self.trees]
        return lines

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Forest":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise SchemaMismatch(f"{path}: empty forest file")
        header = json.loads(lines[0])
        if header.get("format") != FOREST_FORMAT or header.get("version") != FOREST_VERSION:
            raise SchemaMismatch(f"{path}: not a version {FOREST_VERSION} forest file")
        schema = DescriptorSchema(header["schema"]["n_numeric"], tuple(header["schema"]["categories"]))
        trees = [Tree.from_json(json.loads(ln)) for ln in lines[1:]]
        return cls(trees, schema, LabelSet(tuple(header["labels"])), ForestConfig(**header["config"]))


def train_forest(data: TrainingSet, config: ForestConfig = ForestConfig()) -> Forest:
    n = len(data)
    if n == 0:
        raise EmptyTrainingSet("cannot train a forest on zero rows")
    if data.X.shape != (n, data.schema.n_features):
        raise SchemaMismatch(f"rows have shape {data.X.shape}, schema needs {data.schema.n_features} columns")
    size = max(1, int(round(config.bootstrap_fraction * n)))
    trees = []
    for child in np.random.SeedSequence(config.seed).spawn(config.tree_count):
        rng = np.random.default_rng(child)
        idx = rng.integers(n, size=size)
        builder = _TreeBuilder(data.X, data.y, data.schema, len(data.labels), config, rng)
        trees.append(builder.build(idx))
    return Forest(trees, data.schema, data.labels, config)


def train_excluding(data: TrainingSet, config: ForestConfig, item_k: str) -> Forest:
    """Train on every row that did not come from ``item_k``."""
    if data.items is None:
        raise SchemaMismatch("training rows carry no item tags")
    keep = data.items != item_k
    if not keep.any():
        raise EmptyTrainingSet(f"no rows left after excluding {item_k!r}")
    return train_forest(data.subset(keep), config)


def check_epsilon(eps: float, n_labels: int) -> float:
    if not 0 < eps <= 1.0 / n_labels:
        raise ValueError(f"epsilon must lie in (0, 1/{n_labels}]")
    return eps


def regularize(q, eps: float) -> np.ndarray:
    """Elementwise ``max(eps, q)``; deliberately not renormalised."""
    q = np.asarray(q, dtype=float)
    check_epsilon(eps, q.shape[-1])
    return np.maximum(q, eps)
