import itertools
import math

import numpy as np
import pytest

from conftest import write_csv
from slim.bench import DEFAULT_CONFIG, object_set
from slim.relations import (DEFAULT_MISSING, INVERSE, LABELS, CommonsenseTable, ConsistencyRuleSet,
                            RelationLabel as R, brute_force_marginals, build_factor_graph, consistency_factor,
                            load_commonsense, run_belief_propagation)
from slim.simworld import load_world


def random_graph(n, rng, uniform=False):
    classes = [f"c{i}" for i in range(n)]
    g = build_factor_graph(classes, CommonsenseTable())
    u = np.ones_like(g.unary) if uniform else rng.random(g.unary.shape) + 0.05
    g.unary = u / u.sum(axis=1, keepdims=True)
    return g


def linf(a, b):
    return max(np.max(np.abs(a[p].probs - b[p].probs)) for p in a)


# -- labels -------------------------------------------------------------------

def test_six_labels_with_inverse_pairs():
    assert len(LABELS) == 6
    assert R.IN.inverse is R.CONTAIN and R.CONTAIN.inverse is R.IN
    assert R.ON.inverse is R.SUPPORT and R.SUPPORT.inverse is R.ON
    assert R.PROXIMITY.inverse is R.PROXIMITY and R.DISJOINT.inverse is R.DISJOINT
    assert list(INVERSE[INVERSE]) == list(range(6))


def test_label_parse_case_insensitive():
    assert R.parse(" on ") is R.ON
    with pytest.raises(ValueError):
        R.parse("left_of")


# -- commonsense ingestion ----------------------------------------------------

def test_load_direct_row(tmp_path):
    t = load_commonsense(write_csv(tmp_path / "cs.csv", [("cup", "table", "On", 0.6)]))
    assert t.entries[("cup", "table", R.ON)] == 0.6


def test_invalid_expression_stored_as_zero(tmp_path):
    p = write_csv(tmp_path / "cs.csv", [("laptop", "kitchen-room", "On", 0.2)])
    t = load_commonsense(p, invalid=[("laptop", "kitchen-room", "On")])
    assert t.entries[("laptop", "kitchen-room", R.ON)] == 0.0


def test_absent_pair_gets_default_vector(tmp_path):
    t = load_commonsense(write_csv(tmp_path / "cs.csv", [("cup", "table", "On", 0.6)]))
    assert np.array_equal(t.vector("cup", "sofa"), DEFAULT_MISSING)
    assert np.allclose(DEFAULT_MISSING, [0, 0, 0, 0, 0.1, 0.9])


def test_reverse_entry_maps_through_inverse(tmp_path):
    t = load_commonsense(write_csv(tmp_path / "cs.csv", [("cup", "table", "On", 0.6)]))
    v = t.vector("table", "cup")
    assert v[R.SUPPORT] == 0.6 and v[R.ON] == 0.0


@pytest.mark.parametrize("rows,line", [
    ([("cup", "table", "On", 1.5)], 2),
    ([("cup", "table", "On", 0.5), ("cup", "sofa", "Under", 0.1)], 3),
    ([("cup", "table", "On", 0.5), ("cup", "sofa", "On", "abc")], 3),
    ([("cup", "table", "On")], 2),
])
def test_parse_errors_carry_line_number(tmp_path, rows, line):
    with pytest.raises(ValueError, match=f":{line}:"):
        load_commonsense(write_csv(tmp_path / "cs.csv", rows))


def test_bad_header_rejected(tmp_path):
    with pytest.raises(ValueError, match=":1:"):
        load_commonsense(write_csv(tmp_path / "cs.csv", [("a", "b", "On", 0.1)], header="a,b,c,d"))


def test_shipped_table_frequencies_in_range(apartment):
    t = load_commonsense(apartment.commonsense, apartment.invalid_expressions)
    vals = np.array(list(t.entries.values()))
    assert np.all((vals >= 0) & (vals <= 1))
    for a, b, r in apartment.invalid_expressions:
        assert t.entries.get((a, b, R.parse(r)), 0.0) == 0.0


# -- consistency rules --------------------------------------------------------

@pytest.mark.parametrize("triple,value", [
    ((R.IN, R.IN, R.IN), 1),
    ((R.IN, R.DISJOINT, R.IN), 0),
    ((R.DISJOINT, R.DISJOINT, R.DISJOINT), 1),
])
def test_consistency_examples(triple, value):
    assert consistency_factor(*triple) == value


def test_rule_table_total_and_binary():
    t = ConsistencyRuleSet.default().table
    assert t.shape == (6, 6, 6)
    assert set(np.unique(t)) <= {0.0, 1.0}


def _relabel(rel, perm):
    """Triple (R_ij, R_ik, R_jk) after renaming objects (i, j, k) -> perm."""
    full = {}
    for (a, b), r in zip([(0, 1), (0, 2), (1, 2)], rel):
        full[(a, b)] = r
        full[(b, a)] = int(INVERSE[r])
    p = perm
    return full[(p[0], p[1])], full[(p[0], p[2])], full[(p[1], p[2])]


def test_consistency_invariant_under_object_permutation():
    for rel in itertools.product(range(6), repeat=3):
        v = consistency_factor(*rel)
        for perm in itertools.permutations(range(3)):
            assert consistency_factor(*_relabel(rel, perm)) == v


def test_rules_csv_override(tmp_path):
    p = tmp_path / "rules.csv"
    p.write_text("r_ij,r_ik,r_jk,value\nIn,Disjoint,In,1\n")
    rules = ConsistencyRuleSet.from_csv(p)
    assert rules(R.IN, R.DISJOINT, R.IN) == 1
    assert rules(R.IN, R.IN, R.IN) == 1


# -- factor graph -------------------------------------------------------------

@pytest.mark.parametrize("n,variables,trinary", [(2, 1, 0), (3, 3, 1), (7, 21, 35)])
def test_factor_graph_counts(n, variables, trinary):
    g = build_factor_graph([f"c{i}" for i in range(n)], CommonsenseTable())
    assert len(g.variables) == variables
    assert g.n_unary_factors == variables
    assert g.n_trinary_factors == trinary
    assert math.comb(n, 3) == trinary


def test_factor_graph_needs_two_objects():
    with pytest.raises(ValueError):
        build_factor_graph(["cup"], CommonsenseTable())


def test_unary_rows_normalized(apartment):
    t = load_commonsense(apartment.commonsense, apartment.invalid_expressions)
    g = build_factor_graph([o.cls for o in apartment.objects], t)
    assert np.allclose(g.unary.sum(axis=1), 1.0)


# -- belief propagation -------------------------------------------------------

def test_two_object_bp_is_normalized_unary():
    rng = np.random.default_rng(0)
    g = random_graph(2, rng)
    b = run_belief_propagation(g)
    assert b.converged
    np.testing.assert_allclose(b[(0, 1)].probs, g.unary[0] / g.unary[0].sum(), atol=1e-12, rtol=0)
    assert linf(b, brute_force_marginals(g)) < 1e-12


def test_three_object_uniform_matches_enumeration():
    g = random_graph(3, np.random.default_rng(1), uniform=True)
    assert linf(run_belief_propagation(g), brute_force_marginals(g)) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_three_object_random_matches_enumeration(seed):
    g = random_graph(3, np.random.default_rng(seed))
    b = run_belief_propagation(g)
    assert b.converged
    assert linf(b, brute_force_marginals(g)) < 1e-6


def test_forced_in_conditions_other_pairs():
    g = random_graph(3, np.random.default_rng(3), uniform=True)
    g.unary[0] = np.eye(6)[R.IN]
    bf = brute_force_marginals(g)
    F = g.rule_table
    # hand enumeration over the 36 completions with R_12 = In
    joint = F[R.IN] * g.unary[1][:, None] * g.unary[2][None, :]
    np.testing.assert_allclose(bf[(0, 2)].probs, joint.sum(1) / joint.sum(), atol=1e-12)
    np.testing.assert_allclose(bf[(1, 2)].probs, joint.sum(0) / joint.sum(), atol=1e-12)
    # with R_12 = In and R_23 = In, R_13 = In is the only completion
    assert np.flatnonzero(F[R.IN, :, R.IN]).tolist() == [R.IN]


def test_marginals_normalized_and_inverse_symmetric():
    g = random_graph(4, np.random.default_rng(7))
    b = run_belief_propagation(g)
    for (i, j) in b.canonical_pairs():
        f, r = b[(i, j)], b[(j, i)]
        assert abs(f.probs.sum() - 1) < 1e-9
        assert f[R.IN] == r[R.CONTAIN] and f[R.ON] == r[R.SUPPORT]
        assert f[R.PROXIMITY] == r[R.PROXIMITY] and f[R.DISJOINT] == r[R.DISJOINT]


def test_all_zero_unary_rejected():
    g = random_graph(3, np.random.default_rng(0))
    g.unary[1] = 0.0
    with pytest.raises(ValueError):
        run_belief_propagation(g)


def test_brute_force_size_cap():
    g = random_graph(5, np.random.default_rng(0))   # 10 variables
    with pytest.raises(ValueError):
        brute_force_marginals(g)


def test_shipped_apartment_cup_table_mass_on_on(apartment):
    ids = object_set(apartment, "cup")
    classes = [apartment.objects[i].cls for i in ids]
    t = load_commonsense(apartment.commonsense, apartment.invalid_expressions)
    b = run_belief_propagation(build_factor_graph(classes, t))
    cup, table = classes.index("cup"), classes.index("table")
    probs = b[(cup, table)].probs
    assert np.argmax(probs) == R.ON
    assert probs[R.ON] > 0.4
