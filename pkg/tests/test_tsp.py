import itertools

import numpy as np
import pytest

from splitmerge.tasks.tsp import (
    D_MAX, beam_search_tour, dist_matrix, gen_tsp, held_karp, leaf_tour_solver,
    nearest_neighbor, ratio_metric, tour_adjacency, tour_cost, tsp_oracle, two_opt,
)


def brute_force_tour(d):
    n = d.shape[0]
    best, best_tour = np.inf, None
    for perm in itertools.permutations(range(1, n)):
        tour = (0,) + perm
        cost = sum(d[tour[i], tour[(i + 1) % n]] for i in range(n))
        if cost < best:
            best, best_tour = cost, tour
    return list(best_tour), best


def max_score_tour(scores):
    n = scores.shape[0]
    best, best_tour = -np.inf, None
    for perm in itertools.permutations(range(1, n)):
        tour = (0,) + perm
        s = sum(scores[tour[i], tour[(i + 1) % n]] for i in range(n))
        if s > best:
            best, best_tour = s, tour
    return list(best_tour), best


def test_square_perimeter():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tour, length, exact = tsp_oracle(pts)
    assert exact
    np.testing.assert_allclose(length, 4.0, atol=1e-12)
    assert sorted(tour) == [0, 1, 2, 3]
    # perimeter, not a diagonal crossing
    np.testing.assert_allclose(tour_cost(pts, tour), 4.0, atol=1e-12)


def test_held_karp_matches_brute_force():
    rng = np.random.default_rng(31)
    for _ in range(25):
        n = int(rng.integers(4, 9))
        pts = rng.uniform(size=(n, 2))
        d = dist_matrix(pts)
        tour, cost = held_karp(d)
        _, expect = brute_force_tour(d)
        np.testing.assert_allclose(cost, expect, atol=1e-9)
        assert sorted(tour) == list(range(n))


def test_oracle_validity_and_modes():
    rng = np.random.default_rng(3)
    small = gen_tsp(8, 2, rng)
    for inst in small:
        assert inst.exact and sorted(inst.tour) == list(range(8))
    big = gen_tsp(15, 1, rng)[0]
    assert not big.exact and sorted(big.tour) == list(range(15))
    nn = nearest_neighbor(dist_matrix(big.points), 0)
    assert big.tour_length <= tour_cost(big.points, nn) + 1e-9


def test_two_opt_never_worsens():
    rng = np.random.default_rng(8)
    for _ in range(10):
        pts = rng.uniform(size=(12, 2))
        d = dist_matrix(pts)
        start = list(rng.permutation(12))
        improved = two_opt(d, start)
        assert tour_cost(pts, improved) <= tour_cost(pts, start) + 1e-9
        assert sorted(improved) == list(range(12))


def test_adjacency_definition():
    rng = np.random.default_rng(1)
    inst = gen_tsp(6, 1, rng)[0]
    a = inst.adjacency
    d = dist_matrix(inst.points)
    np.testing.assert_allclose(a, D_MAX - d, atol=1e-12)
    assert (a >= 0).all()
    np.testing.assert_allclose(a, a.T, atol=1e-12)


def test_beam_width_one_is_greedy():
    rng = np.random.default_rng(9)
    pts = rng.uniform(size=(7, 2))
    scores = np.exp(-dist_matrix(pts))
    np.fill_diagonal(scores, 0.0)
    tour = beam_search_tour(scores, beam_width=1)
    # greedy: at each step extend to the highest-score unvisited node
    cur, seen, expect = 0, {0}, [0]
    for _ in range(6):
        cand = [(scores[cur, j], j) for j in range(7) if j not in seen]
        cur = max(cand)[1]
        seen.add(cur)
        expect.append(cur)
    assert tour == expect


def test_wide_beam_finds_max_score_tour():
    rng = np.random.default_rng(13)
    for _ in range(5):
        pts = rng.uniform(size=(5, 2))
        scores = np.exp(-dist_matrix(pts))
        np.fill_diagonal(scores, 0.0)
        tour = beam_search_tour(scores, beam_width=1000)
        expect, best = max_score_tour(scores)
        got = sum(scores[tour[i], tour[(i + 1) % 5]] for i in range(5))
        np.testing.assert_allclose(got, best, atol=1e-9)


def test_beam_output_always_hamiltonian():
    rng = np.random.default_rng(21)
    for _ in range(10):
        n = int(rng.integers(5, 12))
        s = rng.uniform(size=(n, n))
        s = (s + s.T) / 2
        tour = beam_search_tour(s, beam_width=4)
        assert sorted(tour) == list(range(n))


def test_beam_rejects_asymmetric():
    with pytest.raises(ValueError):
        beam_search_tour(np.arange(16.0).reshape(4, 4), 2)


def test_ratio_metric_identical_tour():
    pts = np.random.default_rng(2).uniform(size=(6, 2))
    tour, _, _ = tsp_oracle(pts)
    m = ratio_metric(pts, tour, tour)
    np.testing.assert_allclose(m["ratio"], 1.0)
    np.testing.assert_allclose(m["accuracy"], 1.0)


def test_ratio_metric_square_diagonal_swap():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    perimeter = [0, 1, 2, 3]
    crossed = [0, 2, 1, 3]   # both diagonals: length 2 + 2*sqrt(2)
    m = ratio_metric(pts, crossed, perimeter)
    np.testing.assert_allclose(m["ratio"], (2 + 2 * np.sqrt(2)) / 4, atol=1e-12)


def test_ratio_at_least_one_for_exact_truth():
    rng = np.random.default_rng(77)
    for _ in range(10):
        inst = gen_tsp(8, 1, rng)[0]
        perm = [0] + list(rng.permutation(range(1, 8)))
        m = ratio_metric(inst.points, perm, inst.tour)
        assert m["ratio"] >= 1.0 - 1e-12


def test_leaf_solver_small_sets():
    assert leaf_tour_solver(np.zeros((1, 2))) == [0]
    assert leaf_tour_solver(np.zeros((2, 2))) == [0, 1]
    pts = np.random.default_rng(4).uniform(size=(9, 2))
    tour = leaf_tour_solver(pts)
    assert sorted(tour) == list(range(9))


def test_tour_adjacency_symmetric_two_regular():
    adj = tour_adjacency(5, [0, 2, 4, 1, 3])
    np.testing.assert_array_equal(adj, adj.T)
    np.testing.assert_array_equal(adj.sum(axis=0), 2.0)
