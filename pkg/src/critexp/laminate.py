"""Laminates of finite order: finitely supported probability measures on
2x2 matrices together with a binary splitting tree that witnesses how they
arise from a Dirac mass by rank-one splittings."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .conformal import ConformalMatrix, GaussianRational
from .errors import InvalidInput, InvariantViolation
from .targets import RANK_ONE_TOL, is_rank_one

MERGE_TOL = 1e-12
PRUNE_WEIGHT = 1e-300
AFFINE_TOL = 1e-10


@dataclass(frozen=True)
class Node:
    matrix: ConformalMatrix
    weight: float
    parent: int | None = None
    children: tuple | None = None
    lam: float | None = None  # share of the parent weight sent to children[0]
    label: str = ""


@dataclass(frozen=True)
class Atom:
    matrix: ConformalMatrix
    weight: float
    leaves: tuple


def _check_split(A, B, C, lam, tol=AFFINE_TOL):
    if not (0 <= lam <= 1):
        raise InvalidInput(f"split fraction {lam} outside [0, 1]")
    comb = B * lam + C * (1 - lam)
    if A.exact and comb.exact:
        if comb != A:
            raise InvalidInput("split violates A = lam B + (1 - lam) C")
        if (B - C).det() != 0:
            raise InvalidInput("split direction B - C is not rank one")
        return
    err = A.distance(comb)
    if err > tol * max(1.0, A.to_float().hs_norm()):
        raise InvalidInput(f"split violates A = lam B + (1 - lam) C (error {err:.3g})")
    if not is_rank_one((B - C).to_float(), RANK_ONE_TOL):
        raise InvalidInput("split direction B - C is not rank one")


class Laminate:
    """Immutable laminate. ``nodes[0]`` is the root; leaves carry the atoms."""

    def __init__(self, nodes: Iterable[Node]):
        self.nodes = tuple(nodes)
        self._atoms = None
        self.pruned_mass = 0.0

    @classmethod
    def dirac(cls, A: ConformalMatrix) -> "Laminate":
        one = Fraction(1) if A.exact else 1.0
        return cls([Node(A, one)])

    @property
    def root(self) -> Node:
        return self.nodes[0]

    @property
    def exact(self) -> bool:
        return all(n.matrix.exact for n in self.nodes)

    def leaf_ids(self):
        return [i for i, n in enumerate(self.nodes) if n.children is None]

    @property
    def atoms(self) -> list:
        """Support points with weights; leaves closer than 1e-12 are merged."""
        if self._atoms is None:
            atoms = []
            pruned = 0.0
            # hash grid with cell size MERGE_TOL: candidates live in adjacent cells
            grid = {}
            for i in self.leaf_ids():
                node = self.nodes[i]
                if node.weight < PRUNE_WEIGHT and node.weight != 0:
                    pruned += float(node.weight)
                    continue
                key = tuple(math.floor(c / MERGE_TOL) for c in node.matrix.as_tuple())
                hit = None
                for off in itertools.product((-1, 0, 1), repeat=4):
                    for idx in grid.get(tuple(k + o for k, o in zip(key, off)), ()):
                        if atoms[idx].matrix.distance(node.matrix) <= MERGE_TOL:
                            hit = idx
                            break
                    if hit is not None:
                        break
                if hit is None:
                    grid.setdefault(key, []).append(len(atoms))
                    atoms.append(Atom(node.matrix, node.weight, (i,)))
                else:
                    at = atoms[hit]
                    atoms[hit] = Atom(at.matrix, at.weight + node.weight, at.leaves + (i,))
            self._atoms = atoms
            self.pruned_mass = pruned
        return self._atoms

    def __len__(self):
        return len(self.atoms)

    def split(self, atom_index: int, B: ConformalMatrix, C: ConformalMatrix, lam) -> "Laminate":
        """Replace an atom A = lam B + (1 - lam) C by lam*delta_B + (1 - lam)*delta_C."""
        atom = self.atoms[atom_index]
        builder = LaminateBuilder.from_laminate(self)
        for leaf in atom.leaves:
            builder.split(leaf, B, C, lam)
        return builder.freeze()

    def __repr__(self):
        return f"Laminate({len(self.atoms)} atoms, {len(self.nodes)} nodes)"


class LaminateBuilder:
    """Mutable counterpart of :class:`Laminate` used while growing deep trees."""

    def __init__(self, root: ConformalMatrix):
        one = Fraction(1) if root.exact else 1.0
        self.nodes = [Node(root, one)]

    @classmethod
    def from_laminate(cls, lam: Laminate) -> "LaminateBuilder":
        b = cls.__new__(cls)
        b.nodes = list(lam.nodes)
        return b

    def split(self, node_id: int, B, C, lam, labels=("", ""), check=True):
        """Split a leaf; returns the ids of the two children."""
        node = self.nodes[node_id]
        if node.children is not None:
            raise InvalidInput(f"node {node_id} is not a leaf")
        if check:
            _check_split(node.matrix, B, C, lam)
        i = len(self.nodes)
        self.nodes[node_id] = Node(node.matrix, node.weight, node.parent, (i, i + 1), lam, node.label)
        self.nodes.append(Node(B, node.weight * lam, node_id, None, None, labels[0]))
        self.nodes.append(Node(C, node.weight * (1 - lam), node_id, None, None, labels[1]))
        return i, i + 1

    def freeze(self) -> Laminate:
        return Laminate(self.nodes)


def validate(lam: Laminate, tol: float = AFFINE_TOL) -> None:
    """Re-check every split and the probability normalization; raises InvariantViolation."""
    nodes = lam.nodes
    for i, node in enumerate(nodes):
        if node.children is None:
            continue
        ib, ic = node.children
        B, C = nodes[ib], nodes[ic]
        try:
            _check_split(node.matrix, B.matrix, C.matrix, node.lam, tol)
        except InvalidInput as exc:
            raise InvariantViolation("laminate split", f"node {i}: {exc}") from None
        for child, share in ((B, node.lam), (C, 1 - node.lam)):
            expect = node.weight * share
            if abs(float(child.weight - expect)) > 1e-12 * max(1.0, abs(float(expect))):
                raise InvariantViolation("laminate weights", f"node {i}: child weight mismatch")
    total = sum(nodes[i].weight for i in lam.leaf_ids())
    if abs(float(total) - 1.0) > 1e-12:
        raise InvariantViolation("laminate normalization", f"weights sum to {float(total)!r}")
    bar = barycenter(lam)
    if bar.distance(lam.root.matrix) > tol * max(1.0, lam.root.matrix.to_float().hs_norm()):
        raise InvariantViolation("laminate barycenter", "barycenter differs from the root")


def barycenter(lam: Laminate) -> ConformalMatrix:
    total = None
    for i in lam.leaf_ids():
        n = lam.nodes[i]
        term = n.matrix * n.weight
        total = term if total is None else total + term
    return total


def p_moment(lam: Laminate, p: float) -> float:
    """Sum of weight * |A|_HS^p over the atoms."""
    if p < 1:
        raise InvalidInput("p_moment needs p >= 1")
    return math.fsum(float(a.weight) * a.matrix.to_float().hs_norm() ** p for a in lam.atoms)


def tail_mass(lam: Laminate, t: float) -> float:
    """Total weight of atoms with |A|_HS > t."""
    if t <= 0:
        raise InvalidInput("tail_mass needs t > 0")
    return math.fsum(float(a.weight) for a in lam.atoms if a.matrix.to_float().hs_norm() > t)


def norms_and_weights(lam: Laminate):
    """Atom norms and weights as float lists (for layer-cake quadrature)."""
    norms = [a.matrix.to_float().hs_norm() for a in lam.atoms]
    weights = [float(a.weight) for a in lam.atoms]
    return norms, weights


# JSON-lines serialization -------------------------------------------------


def _num_out(x):
    if isinstance(x, Fraction):
        return f"{x.numerator}/{x.denominator}"
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def _num_in(s):
    if "/" in s:
        return Fraction(s)
    if s.lstrip("-").isdigit():
        return Fraction(int(s))
    return float(s)


def _complex_out(z):
    if isinstance(z, GaussianRational):
        return [_num_out(z.real), _num_out(z.imag)]
    z = complex(z)
    return [_num_out(z.real), _num_out(z.imag)]


def _complex_in(pair, exact):
    re, im = (_num_in(v) for v in pair)
    if exact:
        return GaussianRational(re, im)
    return complex(float(re), float(im))


def dumps_jsonl(lam: Laminate) -> str:
    from . import SCHEMA_VERSION

    lines = [json.dumps({"schema": SCHEMA_VERSION, "kind": "laminate", "nodes": len(lam.nodes), "exact": lam.exact})]
    for i, n in enumerate(lam.nodes):
        lines.append(
            json.dumps(
                {
                    "id": i,
                    "parent": n.parent,
                    "children": list(n.children) if n.children else None,
                    "lambda": None if n.lam is None else _num_out(n.lam),
                    "weight": _num_out(n.weight),
                    "a_plus": _complex_out(n.matrix.a_plus),
                    "a_minus": _complex_out(n.matrix.a_minus),
                    "label": n.label,
                }
            )
        )
    return "\n".join(lines) + "\n"


def loads_jsonl(text: str) -> Laminate:
    from . import SCHEMA_VERSION

    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = json.loads(lines[0])
    if head.get("schema") != SCHEMA_VERSION or head.get("kind") != "laminate":
        raise InvalidInput(f"unsupported laminate schema {head.get('schema')!r}")
    exact = bool(head.get("exact"))
    nodes = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        conv = (lambda v: _num_in(v)) if exact else (lambda v: float(_num_in(v)))
        nodes.append(
            Node(
                ConformalMatrix(_complex_in(rec["a_plus"], exact), _complex_in(rec["a_minus"], exact)),
                conv(rec["weight"]),
                rec["parent"],
                tuple(rec["children"]) if rec["children"] else None,
                None if rec["lambda"] is None else conv(rec["lambda"]),
                rec.get("label", ""),
            )
        )
    if len(nodes) != head["nodes"]:
        raise InvalidInput("laminate file is truncated")
    return Laminate(nodes)
