from __future__ import annotations

import itertools
import random
from collections import Counter
from fractions import Fraction

import pytest

from fleet.errors import (
    EmptyTrainSet,
    IncompatibleSchemas,
    MissingFeature,
    MissingModel,
    NoFeatures,
)
from fleet.forest import (
    Forest,
    ForestMeta,
    Leaf,
    Split,
    Tree,
    aggregate_merge,
    best_split,
    deserialize_forest,
    evaluate,
    parse_forest,
    predict,
    train_forest,
)
from fleet.model import ModelSpec, canonical_serialize
from fleet.tabular import Table

ORIGIN = "ab" * 32


def table(rows, columns=("x", "target"), label="target"):
    return Table(columns=columns, rows=tuple(rows), label=label)


def spec(n_estimators=1, max_depth=3, random_state=42):
    return ModelSpec(n_estimators=n_estimators, max_depth=max_depth,
                     random_state=random_state)


def test_forced_stump_splits_at_one_point_five():
    # Candidates 0.5 / 1.5 / 2.5; only 1.5 yields two pure halves.
    train = table([(0.0, "A"), (1.0, "A"), (2.0, "B"), (3.0, "B")])
    forest = train_forest(train, spec(max_depth=1), ORIGIN, bootstrap=False)
    tree = forest.trees[0]
    root = tree.nodes[0]
    assert isinstance(root, Split)
    assert root.feature == 0 and root.threshold == 1.5
    assert tree.nodes[root.left] == Leaf("A", (("A", 2),))
    assert tree.nodes[root.right] == Leaf("B", (("B", 2),))


def test_pure_training_set_gives_single_leaf():
    train = table([(0.0, "A"), (5.0, "A"), (9.0, "A")])
    forest = train_forest(train, spec(n_estimators=3), ORIGIN)
    for tree in forest.trees:
        assert tree.nodes == (Leaf("A", (("A", 3),)),)


def test_training_is_byte_deterministic():
    rows = [(float(i % 7), float(i % 3), "ABC"[i % 3]) for i in range(30)]
    train = table(rows, columns=("x", "y", "target"))
    one = train_forest(train, spec(n_estimators=4), ORIGIN)
    two = train_forest(train, spec(n_estimators=4), ORIGIN)
    assert canonical_serialize(one) == canonical_serialize(two)


def test_different_seed_changes_model():
    rows = [(float(i % 7), "AB"[i % 2]) for i in range(20)]
    one = train_forest(table(rows), spec(n_estimators=2, random_state=1), ORIGIN)
    two = train_forest(table(rows), spec(n_estimators=2, random_state=2), ORIGIN)
    assert canonical_serialize(one) != canonical_serialize(two)


def test_empty_train_set():
    with pytest.raises(EmptyTrainSet):
        train_forest(table([]), spec(), ORIGIN)


def test_no_features():
    bare = Table(columns=("target",), rows=(("A",), ("B",)), label="target")
    with pytest.raises(NoFeatures):
        train_forest(bare, spec(), ORIGIN)


def test_max_depth_respected():
    rnd = random.Random(5)
    rows = [(rnd.random(), rnd.random(), "AB"[rnd.randrange(2)]) for _ in range(60)]
    forest = train_forest(table(rows, columns=("x", "y", "target")),
                          spec(n_estimators=3, max_depth=2), ORIGIN)

    def depth_of(tree, index=0):
        node = tree.nodes[index]
        if isinstance(node, Leaf):
            return 0
        return 1 + max(depth_of(tree, node.left), depth_of(tree, node.right))

    assert all(depth_of(t) <= 2 for t in forest.trees)


# --- split choice vs brute force ----------------------------------------------

def brute_force_best(xs, ys):
    """Minimal weighted-Gini split over all candidate thresholds, ties to the
    lower feature then lower threshold. Written independently of best_split."""
    n = len(ys)
    best = None
    for f in range(len(xs[0])):
        values = sorted({x[f] for x in xs})
        for a, b in zip(values, values[1:]):
            thr = (a + b) / 2.0
            left = [y for x, y in zip(xs, ys) if x[f] <= thr]
            right = [y for x, y in zip(xs, ys) if x[f] > thr]

            def gini(part):
                counts = Counter(part)
                return 1 - sum(Fraction(v, len(part)) ** 2 for v in counts.values())

            weighted = Fraction(len(left), n) * gini(left) + Fraction(len(right), n) * gini(right)
            key = (weighted, f, thr)
            if best is None or key < best:
                best = key
    return None if best is None else (best[1], best[2])


def test_exhaustive_one_feature_datasets_match_brute_force():
    # Every 4-point dataset over values {0,1,2} and labels {A,B}: 1296 cases.
    for values in itertools.product((0.0, 1.0, 2.0), repeat=4):
        for labels in itertools.product("AB", repeat=4):
            xs = [(v,) for v in values]
            assert best_split(xs, list(labels), [0]) == brute_force_best(xs, list(labels))


def test_exhaustive_two_feature_datasets_match_brute_force():
    points = list(itertools.product((0.0, 1.0), repeat=2))
    for combo in itertools.product(points, repeat=4):
        for labels in itertools.product("AB", repeat=4):
            xs = list(combo)
            assert best_split(xs, list(labels), [0, 1]) == brute_force_best(xs, list(labels))


def test_random_wider_datasets_match_brute_force():
    rnd = random.Random(99)
    for _ in range(200):
        n = rnd.randint(2, 12)
        n_feat = rnd.randint(1, 2)
        xs = [tuple(float(rnd.randint(0, 5)) for _ in range(n_feat)) for _ in range(n)]
        ys = [rnd.choice("ABC") for _ in range(n)]
        assert best_split(xs, ys, list(range(n_feat))) == brute_force_best(xs, ys)


# --- merge ---------------------------------------------------------------------

def train_three(n_estimators=10):
    rnd = random.Random(3)
    forests = []
    for origin in sorted({"aa" * 32, "bb" * 32, "cc" * 32}):
        rows = [(float(rnd.randint(0, 9)), float(rnd.randint(0, 9)), "AB"[rnd.randrange(2)])
                for _ in range(25)]
        forests.append(train_forest(table(rows, columns=("x", "y", "target")),
                                    spec(n_estimators=n_estimators), origin))
    return forests


def test_merge_concatenates_trees():
    forests = train_three()
    merged = aggregate_merge(forests, ORIGIN)
    assert len(merged.trees) == 30
    assert merged.meta.n_estimators == 30
    assert merged.meta.origin == ORIGIN
    # trees preserved verbatim, node by node, in input order
    offset = 0
    for forest in forests:
        for i, tree in enumerate(forest.trees):
            assert canonical_serialize(merged.trees[offset + i]) == canonical_serialize(tree)
        offset += len(forest.trees)


def test_merge_single_forest_is_identity_on_trees():
    forest = train_three(n_estimators=2)[0]
    merged = aggregate_merge([forest], ORIGIN)
    assert merged.trees == forest.trees
    assert merged.classes == forest.classes


def test_merge_incompatible_columns():
    forests = train_three(n_estimators=1)
    other = Forest(trees=forests[0].trees, classes=forests[0].classes,
                   columns=("x",), meta=forests[0].meta)
    with pytest.raises(IncompatibleSchemas):
        aggregate_merge([forests[0], other], ORIGIN)


def test_merge_empty_input():
    with pytest.raises(MissingModel):
        aggregate_merge([], ORIGIN)


# --- predict / evaluate ----------------------------------------------------------

def stump(label_left="A", label_right="B"):
    nodes = (Split(feature=0, threshold=1.5, left=1, right=2),
             Leaf(label_left, ((label_left, 2),)),
             Leaf(label_right, ((label_right, 2),)))
    return Forest(trees=(Tree(nodes),), classes=tuple(sorted({label_left, label_right})),
                  columns=("x",), meta=ForestMeta(1, ORIGIN, 42))


def test_predict_traverses_stump():
    assert predict(stump(), {"x": 0.5}) == "A"
    assert predict(stump(), {"x": 2.5}) == "B"


def test_predict_tie_goes_to_smallest_label():
    forest = Forest(trees=stump().trees + stump("B", "A").trees,
                    classes=("A", "B"), columns=("x",),
                    meta=ForestMeta(2, ORIGIN, 42))
    assert predict(forest, {"x": 0.0}) == "A"


def test_predict_missing_feature():
    with pytest.raises(MissingFeature):
        predict(stump(), {"y": 1.0})


def test_predict_empty_forest():
    empty = Forest(trees=(), classes=(), columns=("x",), meta=ForestMeta(0, ORIGIN, None))
    with pytest.raises(MissingModel):
        predict(empty, {"x": 1.0})


def test_evaluate_clean_training_points():
    train = table([(0.0, "A"), (1.0, "A"), (2.0, "B"), (3.0, "B")])
    forest = train_forest(train, spec(max_depth=1), ORIGIN, bootstrap=False)
    metrics = evaluate(forest, train)
    assert metrics == {"accuracy": 1.0, "n_test": 4}


def test_evaluate_empty_test():
    metrics = evaluate(stump(), Table(("x", "target"), (), "target"))
    assert metrics == {"n_test": 0}
    assert "accuracy" not in metrics


def test_metrics_canonical_form():
    assert canonical_serialize({"accuracy": 1.0, "n_test": 4}) == b'{"accuracy":1.0,"n_test":4}'


# --- serialization ----------------------------------------------------------------

def test_forest_round_trip():
    forests = train_three(n_estimators=3)
    merged = aggregate_merge(forests, ORIGIN)
    data = canonical_serialize(merged)
    again = deserialize_forest(data)
    assert again == merged
    assert canonical_serialize(again) == data


def test_merged_predictions_match_union_vote_oracle():
    # Independent oracle: tally every tree of every local forest directly.
    rnd = random.Random(77)
    for round_no in range(20):
        columns = tuple(f"f{j}" for j in range(rnd.randint(1, 4))) + ("target",)
        forests = []
        for origin in sorted("aa bb cc".split()):
            rows = [tuple(float(rnd.randint(0, 6)) for _ in columns[:-1]) + (rnd.choice("ABC"),)
                    for _ in range(rnd.randint(5, 100))]
            forests.append(train_forest(table(rows, columns=columns),
                                        spec(n_estimators=rnd.randint(1, 6), random_state=round_no),
                                        origin * 32))
        merged = aggregate_merge(forests, ORIGIN)
        for _ in range(25):
            row = {c: float(rnd.randint(0, 6)) for c in columns[:-1]}
            features = [row[c] for c in merged.columns]
            votes = Counter()
            for forest in forests:
                for tree in forest.trees:
                    votes[tree.leaf_for(features).label] += 1
            top = max(votes.values())
            expected = min(label for label, n in votes.items() if n == top)
            assert predict(merged, row) == expected
