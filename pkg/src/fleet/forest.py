"""Deterministic CART random forest, merge aggregation, and evaluation.

Every run is a pure function of (rows, seeds): bootstrap draws, feature
subsets, split choice and all tie-breaking follow fixed rules, so two nodes
training on the same data with the same seed produce byte-identical models.
Split scoring uses exact rational arithmetic; float rounding can neither
reorder candidates nor mask ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from . import canonical
from .errors import (
    EmptyTrainSet,
    IncompatibleSchemas,
    InvariantViolation,
    MalformedDocument,
    MissingFeature,
    MissingModel,
    NoFeatures,
)
from .model import ModelSpec, _as_str, _check_no_extras, _require_mapping, _take
from .rng import SplitMix64, mix
from .tabular import Table


@dataclass(frozen=True)
class Leaf:
    label: str
    counts: tuple[tuple[str, int], ...]  # (class, count), sorted by class

    def to_jsonable(self) -> dict:
        return {"counts": {c: n for c, n in self.counts}, "label": self.label}


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: int
    right: int

    def to_jsonable(self) -> dict:
        return {"feature": self.feature, "left": self.left,
                "right": self.right, "threshold": self.threshold}


@dataclass(frozen=True)
class Tree:
    """Flat node array, root at index 0; rows with value <= threshold go left."""

    nodes: tuple[Leaf | Split, ...]

    def to_jsonable(self) -> dict:
        return {"nodes": [n.to_jsonable() for n in self.nodes]}

    def leaf_for(self, features: Sequence[float]) -> Leaf:
        node = self.nodes[0]
        while isinstance(node, Split):
            node = self.nodes[node.left if features[node.feature] <= node.threshold else node.right]
        return node


@dataclass(frozen=True)
class ForestMeta:
    n_estimators: int
    origin: str           # fingerprint of the producing node
    random_state: int | None

    def to_jsonable(self) -> dict:
        return {"n_estimators": self.n_estimators, "origin": self.origin,
                "random_state": self.random_state}


@dataclass(frozen=True)
class Forest:
    trees: tuple[Tree, ...]
    classes: tuple[str, ...]   # sorted label vocabulary
    columns: tuple[str, ...]   # feature names the trees index into
    meta: ForestMeta

    def to_jsonable(self) -> dict:
        return {"classes": list(self.classes), "columns": list(self.columns),
                "meta": self.meta.to_jsonable(),
                "trees": [t.to_jsonable() for t in self.trees]}


def parse_forest(doc: Any) -> Forest:
    doc = _require_mapping(doc, "forest")
    _check_no_extras(doc, {"classes", "columns", "meta", "trees"}, "forest")
    meta_doc = _require_mapping(_take(doc, "meta", "forest"), "forest.meta")
    _check_no_extras(meta_doc, {"n_estimators", "origin", "random_state"}, "forest.meta")
    random_state = meta_doc.get("random_state")
    if random_state is not None and (isinstance(random_state, bool) or not isinstance(random_state, int)):
        raise MalformedDocument("forest.meta.random_state must be an integer or null")
    trees = []
    raw_trees = _take(doc, "trees", "forest")
    if not isinstance(raw_trees, list):
        raise MalformedDocument("forest.trees must be an array")
    for raw_tree in raw_trees:
        tree_doc = _require_mapping(raw_tree, "tree")
        raw_nodes = _take(tree_doc, "nodes", "tree")
        if not isinstance(raw_nodes, list) or not raw_nodes:
            raise MalformedDocument("tree.nodes must be a non-empty array")
        nodes: list[Leaf | Split] = []
        for raw in raw_nodes:
            raw = _require_mapping(raw, "tree node")
            if "label" in raw:
                _check_no_extras(raw, {"counts", "label"}, "leaf")
                counts = _require_mapping(_take(raw, "counts", "leaf"), "leaf.counts")
                nodes.append(Leaf(label=_as_str(raw["label"], "leaf.label"),
                                  counts=tuple(sorted((str(k), int(v)) for k, v in counts.items()))))
            else:
                _check_no_extras(raw, {"feature", "left", "right", "threshold"}, "split")
                nodes.append(Split(feature=int(raw["feature"]), threshold=float(raw["threshold"]),
                                   left=int(raw["left"]), right=int(raw["right"])))
        for node in nodes:
            if isinstance(node, Split) and not (0 <= node.left < len(nodes) and 0 <= node.right < len(nodes)):
                raise InvariantViolation("tree child index out of range")
        trees.append(Tree(tuple(nodes)))
    classes = _take(doc, "classes", "forest")
    columns = _take(doc, "columns", "forest")
    if not (isinstance(classes, list) and isinstance(columns, list)):
        raise MalformedDocument("forest classes/columns must be arrays")
    return Forest(trees=tuple(trees),
                  classes=tuple(_as_str(c, "class") for c in classes),
                  columns=tuple(_as_str(c, "column") for c in columns),
                  meta=ForestMeta(n_estimators=int(_take(meta_doc, "n_estimators", "meta")),
                                  origin=_as_str(_take(meta_doc, "origin", "meta"), "origin"),
                                  random_state=random_state))


def deserialize_forest(data: bytes | str) -> Forest:
    return parse_forest(canonical.loads(data))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _majority(labels: Iterable[str]) -> tuple[str, tuple[tuple[str, int], ...]]:
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    top = max(counts.values())
    winner = min(c for c, n in counts.items() if n == top)  # ties to smallest label
    return winner, tuple(sorted(counts.items()))


def _purity_score(counts: Mapping[str, int], total: int) -> Fraction:
    """sum of squared class counts over the partition size; maximizing the
    left+right sum is equivalent to minimizing weighted Gini impurity."""
    return Fraction(sum(n * n for n in counts.values()), total)


def _feature_subset(rng: SplitMix64, n_features: int) -> list[int]:
    """ceil(sqrt(f)) distinct feature indices drawn by partial Fisher-Yates,
    returned ascending so the split search walks features in index order.
    When every feature would be taken anyway, no randomness is consumed."""
    k = _ceil_sqrt(n_features)
    if k >= n_features:
        return list(range(n_features))
    pool = list(range(n_features))
    for i in range(k):
        j = i + rng.below(n_features - i)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:k])


def _ceil_sqrt(n: int) -> int:
    r = int(n ** 0.5)
    while r * r < n:
        r += 1
    while (r - 1) * (r - 1) >= n:
        r -= 1
    return r


def best_split(xs: Sequence[Sequence[float]], ys: Sequence[str],
               features: Sequence[int]) -> tuple[int, float] | None:
    """The (feature, threshold) maximizing Gini impurity decrease.

    Candidate thresholds are midpoints of consecutive distinct sorted values
    per feature; ties break to the lower feature index, then the lower
    threshold. None when no feature varies.
    """
    n = len(ys)
    best: tuple[Fraction, int, float] | None = None
    for feature in features:
        order = sorted(range(n), key=lambda i: xs[i][feature])
        left: dict[str, int] = {}
        right: dict[str, int] = {}
        for label in ys:
            right[label] = right.get(label, 0) + 1
        moved = 0
        for pos in range(n - 1):
            i = order[pos]
            label = ys[i]
            left[label] = left.get(label, 0) + 1
            right[label] -= 1
            if right[label] == 0:
                del right[label]
            moved += 1
            value, nxt = xs[i][feature], xs[order[pos + 1]][feature]
            if value == nxt:
                continue
            threshold = (value + nxt) / 2.0
            score = _purity_score(left, moved) + _purity_score(right, n - moved)
            if best is None or score > best[0] or (
                    score == best[0] and (feature, threshold) < (best[1], best[2])):
                best = (score, feature, threshold)
    if best is None:
        return None
    return best[1], best[2]


def _grow(xs, ys, indices: list[int], depth: int, max_depth: int,
          rng: SplitMix64, nodes: list) -> int:
    node_labels = [ys[i] for i in indices]
    pure = len(set(node_labels)) <= 1
    if depth >= max_depth or pure or len(indices) < 2:
        label, counts = _majority(node_labels)
        nodes.append(Leaf(label, counts))
        return len(nodes) - 1
    features = _feature_subset(rng, len(xs[0]))
    choice = best_split([xs[i] for i in indices], node_labels,
                        features)
    if choice is None:
        label, counts = _majority(node_labels)
        nodes.append(Leaf(label, counts))
        return len(nodes) - 1
    feature, threshold = choice
    left_idx = [i for i in indices if xs[i][feature] <= threshold]
    right_idx = [i for i in indices if xs[i][feature] > threshold]
    position = len(nodes)
    nodes.append(None)  # reserve; children are appended next, left first
    left = _grow(xs, ys, left_idx, depth + 1, max_depth, rng, nodes)
    right = _grow(xs, ys, right_idx, depth + 1, max_depth, rng, nodes)
    nodes[position] = Split(feature=feature, threshold=threshold, left=left, right=right)
    return position


def train_forest(train: Table, spec: ModelSpec, origin: str,
                 bootstrap: bool = True) -> Forest:
    """Grow spec.n_estimators CART trees.

    Tree i draws its own SplitMix64 stream from mix(random_state, i); the
    first n outputs take the bootstrap sample (n draws with replacement),
    subsequent outputs pick per-split feature subsets in recursion order
    (left subtree before right). ``bootstrap=False`` is a unit-test hook for
    forced-outcome trees; the production path always resamples.
    """
    if train.n == 0:
        raise EmptyTrainSet("training table has no rows")
    xs = train.feature_rows()
    if not xs or not xs[0]:
        raise NoFeatures("training table has no feature columns")
    ys = list(train.labels())
    trees = []
    for i in range(spec.n_estimators):
        rng = SplitMix64(mix(spec.random_state, i))
        if bootstrap:
            indices = [rng.below(train.n) for _ in range(train.n)]
        else:
            indices = list(range(train.n))
        nodes: list = []
        _grow(xs, ys, indices, 0, spec.max_depth, rng, nodes)
        trees.append(Tree(tuple(nodes)))
    return Forest(trees=tuple(trees),
                  classes=tuple(sorted(set(ys))),
                  columns=train.feature_columns,
                  meta=ForestMeta(n_estimators=spec.n_estimators, origin=origin,
                                  random_state=spec.random_state))


# --------------------------------------------------------------------------
# aggregation, prediction, evaluation
# --------------------------------------------------------------------------

def aggregate_merge(forests: Sequence[Forest], origin: str) -> Forest:
    """Merge local forests by concatenating their trees in input order.

    Callers supply forests ordered by producing-node fingerprint; trees are
    preserved verbatim and the class vocabulary is the sorted union.
    """
    if not forests:
        raise MissingModel("nothing to merge")
    columns = forests[0].columns
    for forest in forests[1:]:
        if forest.columns != columns:
            raise IncompatibleSchemas("forests were trained on different column sets")
    trees = tuple(t for forest in forests for t in forest.trees)
    classes = tuple(sorted({c for forest in forests for c in forest.classes}))
    return Forest(trees=trees, classes=classes, columns=columns,
                  meta=ForestMeta(n_estimators=len(trees), origin=origin, random_state=None))


def predict(forest: Forest, row: Mapping[str, float]) -> str:
    """Majority vote over the trees' leaf labels; ties go to the
    lexicographically smallest label."""
    if not forest.trees:
        raise MissingModel("forest has no trees")
    try:
        features = [float(row[c]) for c in forest.columns]
    except KeyError as exc:
        raise MissingFeature(f"row lacks feature column {exc.args[0]!r}") from None
    votes: dict[str, int] = {}
    for tree in forest.trees:
        label = tree.leaf_for(features).label
        votes[label] = votes.get(label, 0) + 1
    top = max(votes.values())
    return min(label for label, n in votes.items() if n == top)


def evaluate(forest: Forest, test: Table) -> dict:
    """Accuracy over the test rows; an empty test set reports only its size."""
    if test.n == 0:
        return {"n_test": 0}
    labels = test.labels()
    correct = 0
    for features, truth in zip(test.feature_rows(), labels):
        row = dict(zip(test.feature_columns, features))
        if predict(forest, row) == truth:
            correct += 1
    return {"accuracy": correct / test.n, "n_test": test.n}
