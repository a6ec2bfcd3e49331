import numpy as np
import pytest

from eqrl.groups import (
    ACTION_DELTAS,
    Group,
    GroupElement,
    Representation,
    act_on_grid,
    act_on_image,
    action_permutation,
    compose,
    inverse,
    restriction,
)

D4 = Group.dihedral(4)
D1 = Group.dihedral(1)
C4 = Group.cyclic(4)


def el(label, group=D4):
    return group.element(label)


def test_element_labels_and_order():
    assert [g.label for g in D4.elements] == ["e", "r", "r2", "r3", "t", "tr", "tr2", "tr3"]
    assert [g.label for g in D1.elements] == ["e", "t"]
    assert [g.label for g in C4.elements] == ["e", "r", "r2", "r3"]
    assert D4.order == 8 and D1.order == 2 and C4.order == 4


def test_compose_examples():
    assert compose(el("r"), el("r")) == el("r2")
    assert compose(el("r"), el("r3")) == el("e")
    # r * t = t r^3: moving r across t flips the rotation sign
    assert compose(el("r"), el("t")) == el("tr3")
    assert compose(el("t"), el("r")) == el("tr")


def test_inverse_examples():
    assert inverse(el("e")) == el("e")
    assert inverse(el("r")) == el("r3")
    assert inverse(el("tr")) == el("tr")
    for g in D4.elements:
        assert compose(g, inverse(g)) == el("e")
        assert compose(inverse(g), g) == el("e")


def test_group_axioms_exhaustive():
    for group in (D4, D1, C4, Group.dihedral(3), Group.cyclic(6)):
        e = group.identity
        for g in group.elements:
            assert compose(g, e) == g and compose(e, g) == g
            assert compose(g, inverse(g)) == e
        # associativity over all triples
        for a in group.elements:
            for b in group.elements:
                for c in group.elements:
                    assert compose(compose(a, b), c) == compose(a, compose(b, c))


def test_compose_rejects_mixed_orders():
    with pytest.raises(ValueError):
        compose(el("r"), GroupElement(0, 1, 3))


def test_regular_representation_matrices():
    reg = Representation(D4, "regular")
    assert reg.dim == 8
    np.testing.assert_array_equal(reg.matrix(el("e")), np.eye(8))
    m = reg.matrix(el("r")) @ reg.matrix(el("r3"))
    np.testing.assert_array_equal(m, np.eye(8))
    # each matrix is a permutation matrix
    for g in D4.elements:
        m = reg.matrix(g)
        assert ((m == 0) | (m == 1)).all()
        np.testing.assert_array_equal(m.sum(axis=0), np.ones(8))
        np.testing.assert_array_equal(m.sum(axis=1), np.ones(8))


def test_trivial_representation():
    triv = Representation(D4, "trivial")
    for g in D4.elements:
        np.testing.assert_array_equal(triv.matrix(g), np.ones((1, 1)))


def test_representation_homomorphism():
    for group in (D4, D1, C4):
        reg = Representation(group, "regular")
        for g in group.elements:
            for h in group.elements:
                lhs = reg.matrix(compose(g, h))
                rhs = reg.matrix(g) @ reg.matrix(h)
                np.testing.assert_array_equal(lhs, rhs)


def test_regular_perm_matches_matrix():
    reg = Representation(D4, "regular")
    rng = np.random.default_rng(0)
    v = rng.normal(size=8)
    for g in D4.elements:
        np.testing.assert_allclose(reg.matrix(g) @ v, v[reg.perm(g)])


def test_act_on_grid_examples():
    assert act_on_grid(el("r"), (0, 0), 2) == (0, 1)
    assert act_on_grid(el("e"), (1, 3), 5) == (1, 3)
    # full turn is the identity
    r = el("r")
    cell = (2, 4)
    for _ in range(4):
        cell = act_on_grid(r, cell, 7)
    assert cell == (2, 4)
    assert act_on_grid(el("t"), (1, 0), 4) == (1, 3)


def test_act_on_grid_is_action():
    d = 5
    for g in D4.elements:
        for h in D4.elements:
            gh = compose(g, h)
            for row in range(d):
                for col in range(d):
                    assert act_on_grid(gh, (row, col), d) == act_on_grid(
                        g, act_on_grid(h, (row, col), d), d
                    )


def test_act_on_grid_bounds():
    with pytest.raises(ValueError):
        act_on_grid(el("r"), (5, 0), 4)


def test_act_on_image_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(act_on_image(el("e"), x), x)
    np.testing.assert_array_equal(act_on_image(el("t"), x), [[2, 1], [4, 3]])
    np.testing.assert_array_equal(act_on_image(el("r2"), x), [[4, 3], [2, 1]])
    np.testing.assert_array_equal(act_on_image(el("r"), x), [[3, 1], [4, 2]])


def test_act_on_image_matches_grid_action():
    # pixel at cell p lands at cell g(p)
    rng = np.random.default_rng(1)
    d = 6
    x = rng.normal(size=(d, d))
    for g in D4.elements:
        y = act_on_image(g, x)
        for row in range(d):
            for col in range(d):
                nr, nc = act_on_grid(g, (row, col), d)
                assert y[nr, nc] == x[row, col]


def test_act_on_image_composition_and_channels():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5, 5))
    for g in D4.elements:
        for h in D4.elements:
            lhs = act_on_image(compose(g, h), x)
            rhs = act_on_image(g, act_on_image(h, x))
            np.testing.assert_array_equal(lhs, rhs)
    # mass is conserved: transforms are permutations of pixels
    for g in D4.elements:
        assert act_on_image(g, x).sum() == pytest.approx(x.sum())


def test_act_on_image_rejects_nonsquare():
    with pytest.raises(ValueError):
        act_on_image(el("r"), np.zeros((2, 3)))


def test_action_permutation_examples():
    up, down, left, right = 0, 1, 2, 3
    np.testing.assert_array_equal(action_permutation(el("e")), [up, down, left, right])
    # clockwise quarter turn: up->right, right->down, down->left, left->up
    np.testing.assert_array_equal(action_permutation(el("r")), [right, left, up, down])
    np.testing.assert_array_equal(action_permutation(el("t")), [up, down, right, left])


def test_action_permutation_is_homomorphism():
    for g in D4.elements:
        for h in D4.elements:
            pg, ph = action_permutation(g), action_permutation(h)
            np.testing.assert_array_equal(action_permutation(compose(g, h)), pg[ph])


def test_action_permutation_consistent_with_grid():
    # moving then transforming equals transforming then moving with pi_g(a)
    d = 9
    start = (4, 4)  # center cell, fixed by every g
    for g in D4.elements:
        pi = action_permutation(g)
        for a, (dr, dc) in enumerate(ACTION_DELTAS):
            moved = (start[0] + dr, start[1] + dc)
            lhs = act_on_grid(g, moved, d)
            dr2, dc2 = ACTION_DELTAS[pi[a]]
            gs = act_on_grid(g, start, d)
            assert lhs == (gs[0] + dr2, gs[1] + dc2)


def brute_force_cosets(parent, embedded):
    """Oracle: right cosets {h x : h in H} as frozensets of parent indices."""
    cosets = set()
    for x in parent.elements:
        cosets.add(frozenset(parent.index(compose(h, x)) for h in embedded))
    return cosets


def test_restriction_d4_to_d4_is_identity():
    rm = restriction(D4, D4)
    np.testing.assert_array_equal(rm.channel_permutation, np.arange(8))
    assert rm.n_blocks == 1


def test_restriction_d4_to_d1():
    rm = restriction(D4, D1)
    assert rm.n_blocks == 4
    assert [g.label for g in rm.embedding] == ["e", "t"]
    np.testing.assert_array_equal(rm.channel_permutation, [0, 4, 1, 5, 2, 6, 3, 7])
    blocks = {frozenset(rm.channel_permutation[2 * b : 2 * b + 2]) for b in range(4)}
    assert blocks == brute_force_cosets(D4, rm.embedding)


def test_restriction_d4_to_c4():
    rm = restriction(D4, C4)
    assert rm.n_blocks == 2
    np.testing.assert_array_equal(rm.channel_permutation, [0, 1, 2, 3, 4, 7, 6, 5])
    blocks = {frozenset(rm.channel_permutation[4 * b : 4 * b + 4]) for b in range(2)}
    assert blocks == brute_force_cosets(D4, rm.embedding)


def test_restriction_alternate_reflection_axis():
    rm = restriction(D4, D1, reflection_index=1)
    assert rm.embed(D1.element("t")).label == "tr"
    check_block_diagonal(rm)


def check_block_diagonal(rm):
    """P rho_parent(embed(c)) P^T must be block-diagonal child regular blocks."""
    preg = Representation(rm.parent, "regular")
    creg = Representation(rm.child, "regular")
    n, m = rm.parent.order, rm.child.order
    p = np.zeros((n, n))
    p[np.arange(n), rm.channel_permutation] = 1.0
    for c in rm.child.elements:
        conj = p @ preg.matrix(rm.embed(c)) @ p.T
        expect = np.zeros((n, n))
        for b in range(rm.n_blocks):
            expect[m * b : m * (b + 1), m * b : m * (b + 1)] = creg.matrix(c)
        np.testing.assert_array_equal(conj, expect)


def test_restriction_block_diagonal_property():
    for child, kw in [(D4, {}), (D1, {}), (C4, {}), (D1, {"reflection_index": 3})]:
        check_block_diagonal(restriction(D4, child, **kw))
    check_block_diagonal(restriction(Group.dihedral(8), Group.dihedral(2)))
    check_block_diagonal(restriction(Group.dihedral(6), Group.cyclic(3)))


def test_restriction_rejects_bad_embeddings():
    with pytest.raises(ValueError):
        restriction(D4, Group.cyclic(3))
    with pytest.raises(ValueError):
        restriction(C4, D1)


def test_element_parsing():
    assert D4.element("tr3") == GroupElement(1, 3, 4)
    with pytest.raises(ValueError):
        D4.element("q")
    with pytest.raises(ValueError):
        C4.element("t")
