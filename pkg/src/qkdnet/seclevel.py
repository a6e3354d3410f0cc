"""Symbolic security labels and their parallel/serial composition.

A label is a base level (ITS or MC) minus a set of side-channel tags.  An
expression is a union of labels.  Parallel key generation unions the
expressions and merges same-base atoms by intersecting their side channels;
serial generation meets every pair of atoms (lower base, union of side
channels).  Results are kept as antichains: an atom dominated by another atom
of the same expression is dropped.

Serial composition of multi-atom unions distributes the pairwise meet over
both unions.  That rule is an extrapolation: the symbolic tables only cover
single-atom operands.

Parallel composition is not associative in general once a dominated atom has
been dropped from an intermediate result; it is associative on single-base
expressions and whenever no cross-base domination occurs along the way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from itertools import product
from typing import Iterable


class Base(IntEnum):
    MC = 0
    ITS = 1


@dataclass(frozen=True)
class SecurityLabel:
    base: Base
    side_channels: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "base", Base(self.base))
        object.__setattr__(self, "side_channels", frozenset(self.side_channels))
        for tag in self.side_channels:
            if not isinstance(tag, str) or not tag:
                raise ValueError(f"side-channel tags must be non-empty strings, got {tag!r}")

    def dominates(self, other: "SecurityLabel") -> bool:
        return self.base >= other.base and self.side_channels <= other.side_channels

    def sort_key(self) -> tuple:
        return (-int(self.base), sorted(self.side_channels))

    def __str__(self) -> str:
        if not self.side_channels:
            return self.base.name
        tags = ", ".join(sorted(self.side_channels))
        return f"{self.base.name} \\ {{{tags}}}"


def _antichain(atoms: Iterable[SecurityLabel]) -> frozenset[SecurityLabel]:
    atoms = set(atoms)
    return frozenset(
        a for a in atoms if not any(b != a and b.dominates(a) for b in atoms)
    )


@dataclass(frozen=True)
class SecurityExpr:
    """Non-empty, normalized union of labels."""

    atoms: frozenset[SecurityLabel]

    def __post_init__(self) -> None:
        atoms = frozenset(self.atoms)
        if not atoms:
            raise ValueError("a security expression needs at least one atom")
        if _antichain(atoms) != atoms:
            raise ValueError("atoms are not normalized (one dominates another)")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def of(cls, *atoms: SecurityLabel) -> "SecurityExpr":
        return cls(_antichain(atoms))

    def sorted_atoms(self) -> list[SecurityLabel]:
        return sorted(self.atoms, key=SecurityLabel.sort_key)

    def dominates(self, other: "SecurityExpr") -> bool:
        """Every atom of `other` is dominated by some atom of `self`."""
        return all(any(a.dominates(b) for a in self.atoms) for b in other.atoms)

    def __str__(self) -> str:
        parts = [str(a) for a in self.sorted_atoms()]
        if len(parts) == 1:
            return parts[0]
        return " ∪ ".join(f"({p})" for p in parts)


def its(*tags: str) -> SecurityExpr:
    return SecurityExpr.of(SecurityLabel(Base.ITS, frozenset(tags)))


def mc(*tags: str) -> SecurityExpr:
    return SecurityExpr.of(SecurityLabel(Base.MC, frozenset(tags)))


def as_expr(value: SecurityExpr | SecurityLabel) -> SecurityExpr:
    if isinstance(value, SecurityLabel):
        return SecurityExpr.of(value)
    return value


def normalize(atoms: Iterable[SecurityLabel]) -> SecurityExpr:
    return SecurityExpr(_antichain(atoms))


def parallel(a: SecurityExpr, b: SecurityExpr) -> SecurityExpr:
    a, b = as_expr(a), as_expr(b)
    merged: dict[Base, frozenset[str]] = {}
    for atom in a.atoms | b.atoms:
        if atom.base in merged:
            merged[atom.base] = merged[atom.base] & atom.side_channels
        else:
            merged[atom.base] = atom.side_channels
    return normalize(SecurityLabel(base, scs) for base, scs in merged.items())


def serial(a: SecurityExpr, b: SecurityExpr) -> SecurityExpr:
    a, b = as_expr(a), as_expr(b)
    return normalize(
        SecurityLabel(min(x.base, y.base), x.side_channels | y.side_channels)
        for x, y in product(a.atoms, b.atoms)
    )


def parallel_all(exprs: Iterable[SecurityExpr]) -> SecurityExpr:
    exprs = list(exprs)
    out = as_expr(exprs[0])
    for e in exprs[1:]:
        out = parallel(out, e)
    return out


def serial_all(exprs: Iterable[SecurityExpr]) -> SecurityExpr:
    exprs = list(exprs)
    out = as_expr(exprs[0])
    for e in exprs[1:]:
        out = serial(out, e)
    return out


def label_with_pqc_auth(label: SecurityLabel) -> SecurityLabel:
    """Authenticating a QKD link with a PQC signature caps it at MC."""
    return SecurityLabel(Base.MC, label.side_channels)
