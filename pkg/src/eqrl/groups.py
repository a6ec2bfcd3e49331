"""Dihedral and cyclic groups acting on square grids.

Conventions used by every caller in this package:

* elements are written ``t^a r^k`` with ``a`` in {0, 1} and ``0 <= k < N``,
  composed right-to-left (the rotation part acts first);
* ``r`` rotates the grid 90 degrees clockwise: ``(row, col) -> (col, d-1-row)``;
* ``t`` reflects across the vertical axis: ``(row, col) -> (row, d-1-col)``;
* images transform by pull-back, ``out[p] = in[g^-1 p]``, so pixel contents
  move the same way grid cells do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GroupElement:
    """One element t^a r^k of a dihedral group with rotation order n.

    ``reflect`` is the exponent a (0 or 1), ``rotation`` is k modulo n.
    Cyclic groups use the same type with reflect always 0.
    """

    reflect: int
    rotation: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"rotation order must be >= 1, got {self.n}")
        if self.reflect not in (0, 1):
            raise ValueError(f"reflect exponent must be 0 or 1, got {self.reflect}")
        if not 0 <= self.rotation < self.n:
            raise ValueError(f"rotation {self.rotation} out of range for n={self.n}")

    @property
    def label(self) -> str:
        rot = "" if self.rotation == 0 else ("r" if self.rotation == 1 else f"r{self.rotation}")
        ref = "t" if self.reflect else ""
        return (ref + rot) or "e"

    def __repr__(self):
        return f"<{self.label}|n={self.n}>"


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """Product g*h: apply h first, then g.

    With g = t^a r^k and h = t^b r^l the product is
    t^(a xor b) r^((-1)^b * k + l mod n), from r^k t = t r^-k.
    """
    if g.n != h.n:
        raise ValueError(f"cannot compose elements of different groups (n={g.n}, n={h.n})")
    sign = -1 if h.reflect else 1
    return GroupElement(g.reflect ^ h.reflect, (sign * g.rotation + h.rotation) % g.n, g.n)


def inverse(g: GroupElement) -> GroupElement:
    # (t r^k)^-1 = t r^k when reflected, r^-k otherwise
    if g.reflect:
        return g
    return GroupElement(0, (-g.rotation) % g.n, g.n)


class Group:
    """A dihedral group D_n or cyclic group C_n with a fixed element order.

    The canonical order is e, r, ..., r^(n-1) followed (for dihedral groups)
    by t, tr, ..., tr^(n-1).  Regular representations and restriction maps
    index channels in this order.
    """

    def __init__(self, n: int, reflections: bool):
        if n < 1:
            raise ValueError(f"rotation order must be >= 1, got {n}")
        self.n = n
        self.reflections = reflections
        elems = [GroupElement(0, k, n) for k in range(n)]
        if reflections:
            elems += [GroupElement(1, k, n) for k in range(n)]
        self.elements: tuple[GroupElement, ...] = tuple(elems)
        self._index = {g: i for i, g in enumerate(self.elements)}

    @classmethod
    def dihedral(cls, n: int) -> "Group":
        return cls(n, reflections=True)

    @classmethod
    def cyclic(cls, n: int) -> "Group":
        return cls(n, reflections=False)

    @property
    def order(self) -> int:
        return len(self.elements)

    @property
    def name(self) -> str:
        return f"{'D' if self.reflections else 'C'}{self.n}"

    @property
    def identity(self) -> GroupElement:
        return self.elements[0]

    def index(self, g: GroupElement) -> int:
        try:
            return self._index[g]
        except KeyError:
            raise ValueError(f"{g!r} is not an element of {self.name}") from None

    def __contains__(self, g: GroupElement):
        return g in self._index

    def __eq__(self, other):
        return isinstance(other, Group) and self.n == other.n and self.reflections == other.reflections

    def __hash__(self):
        return hash((self.n, self.reflections))

    def __repr__(self):
        return f"Group({self.name})"

    def element(self, label: str) -> GroupElement:
        """Parse a label like 'e', 'r', 'r2', 't' or 'tr3'."""
        s = label.strip()
        for g in self.elements:
            if g.label == s:
                return g
        raise ValueError(f"unknown element {label!r} for {self.name}")


@dataclass(frozen=True)
class Representation:
    """Trivial or regular representation of a group.

    The regular representation acts by left translation on the basis indexed
    by the group's canonical element order: rho(g) e_h = e_{g h}.
    """

    group: Group
    kind: str

    def __post_init__(self):
        if self.kind not in ("trivial", "regular"):
            raise ValueError(f"unknown representation kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "trivial" else self.group.order

    def perm(self, g: GroupElement) -> np.ndarray:
        """Gather indices p with (rho(g) v)[i] = v[p[i]]."""
        if g not in self.group:
            raise ValueError(f"{g!r} not in {self.group.name}")
        if self.kind == "trivial":
            return np.zeros(1, dtype=np.int64)
        ginv = inverse(g)
        return np.array(
            [self.group.index(compose(ginv, h)) for h in self.group.elements], dtype=np.int64
        )

    def matrix(self, g: GroupElement) -> np.ndarray:
        p = self.perm(g)
        m = np.zeros((self.dim, self.dim))
        m[np.arange(self.dim), p] = 1.0
        return m


def act_on_grid(g: GroupElement, cell: tuple[int, int], d: int) -> tuple[int, int]:
    """Image of a cell (row, col) of a d x d grid under g = t^a r^k."""
    row, col = cell
    if not (0 <= row < d and 0 <= col < d):
        raise ValueError(f"cell {cell} outside {d}x{d} grid")
    for _ in range(g.rotation):
        row, col = col, d - 1 - row
    if g.reflect:
        col = d - 1 - col
    return row, col


def act_on_image(g: GroupElement, img: np.ndarray) -> np.ndarray:
    """Transform an image (trailing two axes, square) by out[p] = in[g^-1 p].

    Equivalent to rotating the picture 90*k degrees clockwise and then
    flipping it left-right if g carries a reflection.
    """
    if img.ndim < 2 or img.shape[-1] != img.shape[-2]:
        raise ValueError(f"expected square trailing axes, got shape {img.shape}")
    out = np.rot90(img, k=-g.rotation, axes=(-2, -1))
    if g.reflect:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


# Grid-world actions in the order used by the environments.
ACTION_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right
ACTION_NAMES = ("up", "down", "left", "right")


def _delta_image(g: GroupElement, delta: tuple[int, int]) -> tuple[int, int]:
    # displacement vectors transform without the d-1 offsets of act_on_grid
    dr, dc = delta
    for _ in range(g.rotation):
        dr, dc = dc, -dr
    if g.reflect:
        dc = -dc
    return dr, dc


def action_permutation(g: GroupElement) -> np.ndarray:
    """pi_g with pi_g[a] = the action whose direction is g applied to a's."""
    out = np.empty(len(ACTION_DELTAS), dtype=np.int64)
    for a, delta in enumerate(ACTION_DELTAS):
        out[a] = ACTION_DELTAS.index(_delta_image(g, delta))
    return out


@dataclass(frozen=True)
class RestrictionMap:
    """Change of basis splitting a parent regular field into child fields.

    ``embedding`` lists the parent image of each child element, in the child's
    canonical order.  ``channel_permutation`` gathers parent channels into
    right-coset blocks so that left translation by any embedded child element
    acts block-diagonally, each block being the child regular representation.
    """

    parent: Group
    child: Group
    embedding: tuple[GroupElement, ...]
    channel_permutation: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.parent.order // self.child.order

    def embed(self, c: GroupElement) -> GroupElement:
        return self.embedding[self.child.index(c)]


def restriction(parent: Group, child: Group, reflection_index: int = 0) -> RestrictionMap:
    """Build the restriction of the parent regular representation to a subgroup.

    The child embeds by r_child -> r^(N/M) and, for dihedral children,
    t_child -> t r^reflection_index.  Raises if the embedding is not an
    injective homomorphism (for example C_3 into D_4).
    """
    if child.reflections and not parent.reflections:
        raise ValueError(f"cannot embed {child.name} into rotation-only {parent.name}")
    if parent.n % child.n != 0:
        raise ValueError(f"{child.name} does not divide {parent.name}")
    step = parent.n // child.n
    t_img = GroupElement(1, reflection_index % parent.n, parent.n)

    def embed(c: GroupElement) -> GroupElement:
        img = GroupElement(0, (c.rotation * step) % parent.n, parent.n)
        if c.reflect:
            img = compose(t_img, img)
        return img

    embedding = tuple(embed(c) for c in child.elements)
    if len(set(embedding)) != child.order:
        raise ValueError(f"embedding of {child.name} into {parent.name} is not injective")
    for a in child.elements:
        for b in child.elements:
            if embed(compose(a, b)) != compose(embed(a), embed(b)):
                raise ValueError(f"embedding of {child.name} into {parent.name} is not a homomorphism")

    # regroup parent channels by right cosets H*x, x chosen in canonical order
    seen = set()
    perm = []
    for x in parent.elements:
        if parent.index(x) in seen:
            continue
        block = [parent.index(compose(h, x)) for h in embedding]
        if seen.intersection(block):
            raise ValueError("cosets overlap; embedding is inconsistent")
        seen.update(block)
        perm.extend(block)
    return RestrictionMap(parent, child, embedding, np.array(perm, dtype=np.int64))
