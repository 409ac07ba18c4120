"""Pairwise spatial relations between objects.

A factor graph holds one 6-way variable per unordered object pair (stored in
canonical ``i < j`` order; the reverse direction is obtained through the
inverse label map).  Unary factors come from a commonsense frequency table,
trinary factors enforce logical consistency between the three relations of
every object triple.  Marginals are computed by damped loopy sum-product
belief propagation; ``brute_force_marginals`` enumerates the joint exactly and
is kept as a test oracle.
"""

from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class RelationLabel(enum.IntEnum):
    IN = 0
    ON = 1
    CONTAIN = 2
    SUPPORT = 3
    PROXIMITY = 4
    DISJOINT = 5

    @property
    def inverse(self) -> "RelationLabel":
        return RelationLabel(INVERSE[self])

    @classmethod
    def parse(cls, text: str) -> "RelationLabel":
        key = text.strip().upper()
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown relation label {text!r}") from None


N_LABELS = 6
LABELS = tuple(RelationLabel)
# INVERSE[r] is the label of R_ji when R_ij = r.
INVERSE = np.array([2, 3, 0, 1, 4, 5])
DEFAULT_MISSING = np.array([0.0, 0.0, 0.0, 0.0, 0.1, 0.9])

_AT = (RelationLabel.IN, RelationLabel.ON)
_ON = RelationLabel.ON
_IN = RelationLabel.IN
_PROX = RelationLabel.PROXIMITY
_DISJ = RelationLabel.DISJOINT

# Allowed R_ac for a chain a -R_ab-> b -R_bc-> c where a rests at b.
_CHAIN_RULES = {
    (_IN, _IN): {_IN},
    (_ON, _ON): {_ON, _PROX},
    (_IN, _ON): {_IN, _ON, _PROX},
    (_ON, _IN): {_IN},
    (_IN, _PROX): {_PROX, _DISJ},
    (_ON, _PROX): {_PROX, _DISJ},
    (_IN, _DISJ): {_PROX, _DISJ},
    (_ON, _DISJ): {_PROX, _DISJ},
}


def _chain_ok(r_ab: int, r_bc: int, r_ac: int) -> bool:
    allowed = _CHAIN_RULES.get((RelationLabel(r_ab), RelationLabel(r_bc)))
    return allowed is None or RelationLabel(r_ac) in allowed


def _default_consistency(r_ij: int, r_ik: int, r_jk: int) -> int:
    # full directed relation matrix for objects (0=i, 1=j, 2=k)
    rel = {(0, 1): r_ij, (0, 2): r_ik, (1, 2): r_jk}
    for (a, b), r in list(rel.items()):
        rel[(b, a)] = int(INVERSE[r])
    for a, b, c in itertools.permutations(range(3)):
        if not _chain_ok(rel[(a, b)], rel[(b, c)], rel[(a, c)]):
            return 0
    return 1


@dataclass(frozen=True)
class ConsistencyRuleSet:
    """Logical-consistency predicate over ``(R_ij, R_ik, R_jk)`` as a 6x6x6 table.

    The default table forbids chains that contradict "resting at" semantics:
    In is transitive, On-chains collapse to On or Proximity, and an object
    resting at something cannot be inside/on an object its support is merely
    near or disjoint from.  All other triples are consistent.  The table is
    closed under relabeling of the three objects by construction.
    """

    table: np.ndarray

    @classmethod
    def default(cls) -> "ConsistencyRuleSet":
        t = np.zeros((N_LABELS,) * 3, dtype=float)
        for a, b, c in itertools.product(range(N_LABELS), repeat=3):
            t[a, b, c] = _default_consistency(a, b, c)
        t.setflags(write=False)
        return cls(t)

    @classmethod
    def from_csv(cls, path, base: Optional["ConsistencyRuleSet"] = None) -> "ConsistencyRuleSet":
        """Override entries of ``base`` (default rules) from ``r_ij,r_ik,r_jk,value`` rows."""
        t = np.array((base or cls.default()).table)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):
                try:
                    idx = tuple(RelationLabel.parse(row[k]) for k in ("r_ij", "r_ik", "r_jk"))
                    value = int(row["value"])
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad rule row: {exc}") from None
                if value not in (0, 1):
                    raise ValueError(f"{path}:{lineno}: rule value must be 0 or 1")
                t[idx] = value
        t.setflags(write=False)
        return cls(t)

    def __call__(self, r_ij, r_ik, r_jk) -> int:
        return int(self.table[int(r_ij), int(r_ik), int(r_jk)])


_DEFAULT_RULES: Optional[ConsistencyRuleSet] = None


def default_rules() -> ConsistencyRuleSet:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = ConsistencyRuleSet.default()
    return _DEFAULT_RULES


def consistency_factor(r_ij, r_ik, r_jk, rules: Optional[ConsistencyRuleSet] = None) -> int:
    return (rules or default_rules())(r_ij, r_ik, r_jk)


@dataclass
class CommonsenseTable:
    entries: Dict[Tuple[str, str, RelationLabel], float] = field(default_factory=dict)
    note: str = ""

    def vector(self, class_i: str, class_j: str) -> np.ndarray:
        """Frequency vector over labels for ``R_ij``.

        Entries listed in the reverse direction are mapped through the inverse
        labels.  Labels not listed for a known pair are 0; a pair with no
        entries at all gets ``DEFAULT_MISSING``.
        """
        v = np.zeros(N_LABELS)
        found = False
        for r in LABELS:
            fwd = self.entries.get((class_i, class_j, r))
            if fwd is None:
                fwd = self.entries.get((class_j, class_i, r.inverse))
            if fwd is not None:
                v[r] = fwd
                found = True
        return v if found else DEFAULT_MISSING.copy()


def load_commonsense(path, invalid: Iterable[Sequence[str]] = ()) -> CommonsenseTable:
    """Read a ``class_i,class_j,relation,frequency`` CSV.

    ``invalid`` lists ``(class_i, class_j, relation)`` expressions that are not
    physically meaningful; their frequency is stored as 0 whatever the file says.
    """
    invalid_keys = {(a, b, RelationLabel.parse(r)) for a, b, r in invalid}
    entries: Dict[Tuple[str, str, RelationLabel], float] = {}
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["class_i", "class_j", "relation", "frequency"]:
            raise ValueError(f"{path}:1: expected header class_i,class_j,relation,frequency")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            ci, cj, rel, freq = (c.strip() for c in row)
            try:
                label = RelationLabel.parse(rel)
                value = float(freq)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{path}:{lineno}: frequency {value} outside [0, 1]")
            key = (ci, cj, label)
            entries[key] = 0.0 if key in invalid_keys else value
    return CommonsenseTable(entries, note=f"loaded from {path.name}")


@dataclass(frozen=True)
class RelationBelief:
    pair: Tuple[int, int]
    probs: np.ndarray

    def __getitem__(self, label) -> float:
        return float(self.probs[int(label)])

    def reversed(self) -> "RelationBelief":
        return RelationBelief((self.pair[1], self.pair[0]), self.probs[INVERSE])


class RelationBeliefs(Mapping):
    """Pair -> RelationBelief lookup that answers both ``(i, j)`` and ``(j, i)``."""

    def __init__(self, canonical: Mapping[Tuple[int, int], np.ndarray], converged: bool = True,
                 iterations: int = 0):
        self._data = {}
        for (i, j), p in canonical.items():
            p = np.asarray(p, dtype=float)
            self._data[(i, j)] = RelationBelief((i, j), p)
            self._data[(j, i)] = RelationBelief((j, i), p[INVERSE])
        self.converged = converged
        self.iterations = iterations

    def __getitem__(self, pair) -> RelationBelief:
        return self._data[tuple(pair)]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def canonical_pairs(self) -> List[Tuple[int, int]]:
        return sorted(p for p in self._data if p[0] < p[1])


@dataclass
class RelationFactorGraph:
    classes: List[str]
    variables: List[Tuple[int, int]]
    unary: np.ndarray                  # (V, 6), rows sum to 1 (or all zero)
    triples: List[Tuple[int, int, int]]  # variable indices of (R_ij, R_ik, R_jk)
    rule_table: np.ndarray             # (6, 6, 6)

    @property
    def n_unary_factors(self) -> int:
        return len(self.variables)

    @property
    def n_trinary_factors(self) -> int:
        return len(self.triples)

    def edges(self) -> List[Tuple[str, int, int]]:
        out = [("unary", v, v) for v in range(len(self.variables))]
        for f, t in enumerate(self.triples):
            out.extend(("trinary", f, v) for v in t)
        return out


def build_factor_graph(object_classes: Sequence[str], table: CommonsenseTable,
                       rules: Optional[ConsistencyRuleSet] = None) -> RelationFactorGraph:
    n = len(object_classes)
    if n < 2:
        raise ValueError("a relation factor graph needs at least 2 objects")
    rules = rules or default_rules()
    variables = list(itertools.combinations(range(n), 2))
    index = {p: v for v, p in enumerate(variables)}
    unary = np.zeros((len(variables), N_LABELS))
    for v, (i, j) in enumerate(variables):
        u = table.vector(object_classes[i], object_classes[j])
        s = u.sum()
        unary[v] = u / s if s > 0 else u
    triples = [(index[(i, j)], index[(i, k)], index[(j, k)])
               for i, j, k in itertools.combinations(range(n), 3)]
    return RelationFactorGraph(list(object_classes), variables, unary, triples,
                               np.asarray(rules.table, dtype=float))


def _check_unary(graph: RelationFactorGraph) -> None:
    dead = np.flatnonzero(graph.unary.sum(axis=1) <= 0)
    if dead.size:
        i, j = graph.variables[dead[0]]
        raise ValueError(f"all-zero commonsense potential for pair ({i}, {j})")


def _normalize(m: np.ndarray) -> np.ndarray:
    s = m.sum(axis=-1, keepdims=True)
    return np.divide(m, s, out=np.full_like(m, 1.0 / m.shape[-1]), where=s > 0)


def run_belief_propagation(graph: RelationFactorGraph, max_iters: int = 200, tol: float = 1e-8,
                           damping: float = 0.5) -> RelationBeliefs:
    """Damped synchronous sum-product BP.

    The returned mapping carries ``converged`` (max message change fell below
    ``tol``) and ``iterations``.
    """
    _check_unary(graph)
    V = len(graph.variables)
    T = len(graph.triples)
    F = graph.rule_table
    if T == 0:
        marg = _normalize(graph.unary)
        return RelationBeliefs({p: marg[v] for v, p in enumerate(graph.variables)}, True, 0)

    tri = np.array(graph.triples)                       # (T, 3)
    f2v = np.full((T, 3, N_LABELS), 1.0 / N_LABELS)     # factor -> variable messages
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        # variable beliefs times unary, then divide out each factor's own message
        log_in = np.zeros((V, N_LABELS))
        with np.errstate(divide="ignore"):
            np.add.at(log_in, tri.ravel(), np.log(f2v.reshape(-1, N_LABELS)))
            log_u = np.log(graph.unary)
            log_own = np.log(f2v)
        log_v2f = log_u[tri] + log_in[tri] - log_own
        log_v2f = np.where(np.isfinite(log_v2f), log_v2f, -np.inf)
        mx = log_v2f.max(axis=-1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        v2f = _normalize(np.exp(log_v2f - mx))          # (T, 3, 6)

        a, b, c = v2f[:, 0], v2f[:, 1], v2f[:, 2]
        new = np.empty_like(f2v)
        new[:, 0] = np.einsum("xyz,ty,tz->tx", F, b, c)
        new[:, 1] = np.einsum("xyz,tx,tz->ty", F, a, c)
        new[:, 2] = np.einsum("xyz,tx,ty->tz", F, a, b)
        new = _normalize(new)
        new = damping * f2v + (1.0 - damping) * new
        delta = np.abs(new - f2v).max()
        f2v = new
        if delta < tol:
            converged = True
            break

    log_in = np.zeros((V, N_LABELS))
    with np.errstate(divide="ignore"):
        np.add.at(log_in, tri.ravel(), np.log(f2v.reshape(-1, N_LABELS)))
        log_b = np.log(graph.unary) + log_in
    mx = log_b.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise ValueError("belief propagation produced an all-zero marginal (inconsistent evidence)")
    marg = _normalize(np.exp(log_b - mx))
    return RelationBeliefs({p: marg[v] for v, p in enumerate(graph.variables)}, converged, it)


MAX_ENUMERATION_VARIABLES = 8


def brute_force_marginals(graph: RelationFactorGraph) -> RelationBeliefs:
    """Exact marginals by enumerating all 6**V joint assignments."""
    V = len(graph.variables)
    if V > MAX_ENUMERATION_VARIABLES:
        raise ValueError(f"{V} variables is too many to enumerate (max {MAX_ENUMERATION_VARIABLES})")
    joint = np.ones((N_LABELS,) * V)
    for v in range(V):
        shape = [1] * V
        shape[v] = N_LABELS
        joint = joint * graph.unary[v].reshape(shape)
    for a, b, c in graph.triples:
        # F is indexed (R_ij, R_ik, R_jk); variable axes a < b < c need not hold
        order = np.argsort([a, b, c])
        f = np.transpose(graph.rule_table, order)
        shape = [1] * V
        for ax in sorted((a, b, c)):
            shape[ax] = N_LABELS
        joint = joint * f.reshape(shape)
    z = joint.sum()
    if z <= 0:
        raise ValueError("joint distribution has zero mass (inconsistent evidence)")
    out = {}
    for v, p in enumerate(graph.variables):
        axes = tuple(ax for ax in range(V) if ax != v)
        out[p] = joint.sum(axis=axes) / z
    return RelationBeliefs(out, True, 0)


def relation_table_rows(classes: Sequence[str], beliefs: RelationBeliefs) -> List[List[str]]:
    rows = [["object_i", "object_j"] + [r.name.capitalize() for r in LABELS]]
    for i, j in beliefs.canonical_pairs():
        rows.append([classes[i], classes[j]] + [f"{p:.3f}" for p in beliefs[(i, j)].probs])
    return rows
