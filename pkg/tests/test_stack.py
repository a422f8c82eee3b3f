import numpy as np
import pytest
from scipy.stats import chisquare

from mhpf.dynamics import build_dynamics
from mhpf.errors import InvalidInputError
from mhpf.filtration import single_linkage
from mhpf.geometry import Trajectory, distance_matrix
from mhpf.stack import (CoarseObservation, FilterStack, FineObservation,
                        bounded_log_weights, check_consistency, split_counts,
                        start_point_sampler)

N = 100


def hand_trajectories():
    return [
        Trajectory("0", np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])),
        Trajectory("1", np.array([[0.0, 0.5], [1.0, 0.5], [2.0, 0.5]])),
        Trajectory("2", np.array([[0.0, 3.0], [1.0, 3.0], [2.0, 3.0]])),
    ]


@pytest.fixture
def hand_stack(hand_tree):
    trajs = hand_trajectories()
    dyn = build_dynamics(hand_tree, trajs, kappa=0.0, epsilon_floor=0.5)
    prior = {c: 1.0 / 3.0 for c in hand_tree.leaves()}
    return FilterStack(hand_tree, dyn, prior, start_point_sampler(hand_tree, trajs),
                       N, 0.01, seed=123)


def force_counts(stack, counts):
    """Overwrite particle labels with exact per-leaf counts and re-derive state."""
    labels = np.concatenate([np.full(k, leaf, dtype=int) for leaf, k in counts.items()])
    assert len(labels) == stack.n_particles
    stack.leaf_labels = labels
    stack.leaf_weights = np.full(stack.n_particles, 1.0 / stack.n_particles)
    stack.rebuild_tree(stack.leaf_level())
    stack.prev_probs = dict(stack.class_probs)
    stack.propagate_up()


def test_init_uniform_prior_counts_and_weights(hand_stack):
    counts = {c: int((hand_stack.leaf_labels == c).sum()) for c in [0, 1, 2]}
    assert sum(counts.values()) == N
    assert np.all(hand_stack.leaf_weights == 1.0 / N)
    check_consistency(hand_stack)


def test_init_concentrated_prior(hand_tree):
    trajs = hand_trajectories()
    dyn = build_dynamics(hand_tree, trajs, kappa=0.0, epsilon_floor=0.5)
    stack = FilterStack(hand_tree, dyn, {1: 1.0}, start_point_sampler(hand_tree, trajs),
                        N, 0.0, seed=5)
    assert stack.class_probs[1] == 1.0
    assert stack.class_probs[3] == 1.0
    assert stack.class_probs[stack.tree.root] == 1.0
    assert stack.class_probs[0] == 0.0
    assert stack.class_probs[2] == 0.0


def test_init_rejects_non_leaf_prior(hand_tree):
    trajs = hand_trajectories()
    dyn = build_dynamics(hand_tree, trajs, kappa=0.0, epsilon_floor=0.5)
    with pytest.raises(InvalidInputError):
        FilterStack(hand_tree, dyn, {3: 1.0}, start_point_sampler(hand_tree, trajs),
                    N, 0.0, seed=5)


def test_rebuild_unchanged_weights_is_fixed_point(hand_stack):
    before = dict(hand_stack.class_probs)
    hand_stack.rebuild_tree(hand_stack.leaf_level())
    assert hand_stack.class_probs == before


def test_rebuild_two_leaf_additivity():
    d = np.array([[0.0, 1.0], [1.0, 0.0]])
    tree = single_linkage(d)
    trajs = [Trajectory("0", np.array([[0.0, 0.0], [1.0, 0.0]])),
             Trajectory("1", np.array([[0.0, 1.0], [1.0, 1.0]]))]
    dyn = build_dynamics(tree, trajs, kappa=0.0, epsilon_floor=0.5)
    stack = FilterStack(tree, dyn, {0: 0.5, 1: 0.5}, start_point_sampler(tree, trajs),
                        4, 0.0, seed=1)
    force_counts(stack, {0: 2, 1: 2})
    stack.leaf_weights = np.array([0.375, 0.375, 0.125, 0.125])
    stack.rebuild_tree(stack.leaf_level())
    assert stack.class_probs[0] == pytest.approx(0.75)
    assert stack.class_probs[1] == pytest.approx(0.25)
    assert stack.class_probs[tree.root] == pytest.approx(1.0)


def test_rebuild_middle_level_hand_computed(hand_stack):
    stack = hand_stack
    force_counts(stack, {0: 50, 1: 30, 2: 20})
    assert stack.class_probs[3] == pytest.approx(0.8)
    stack._upper[3]["weights"][:] = 0.02
    stack.leaf_weights[stack.leaf_labels == 2] = 0.01
    stack.rebuild_tree({3, 2})
    assert stack.class_probs[3] == pytest.approx(8.0 / 9.0, abs=1e-12)
    assert stack.class_probs[2] == pytest.approx(1.0 / 9.0, abs=1e-12)
    assert stack.class_probs[0] == pytest.approx(5.0 / 9.0, abs=1e-12)
    assert stack.class_probs[1] == pytest.approx(3.0 / 9.0, abs=1e-12)
    assert stack.class_probs[4] == pytest.approx(1.0, abs=1e-12)


def test_rebuild_zero_prev_parent_splits_uniformly(hand_stack):
    stack = hand_stack
    force_counts(stack, {0: 0, 1: 0, 2: N})
    assert stack.class_probs[3] == stack.prev_probs[3] == 0.0
    # Pushing fresh mass through an exhausted parent has no conditional to
    # scale, so the children split it evenly.
    out = {}
    stack._assign_down(3, 0.5, out)
    assert out[0] == pytest.approx(0.25)
    assert out[1] == pytest.approx(0.25)


def test_propagate_up_all_particles_one_leaf(hand_stack):
    force_counts(hand_stack, {0: N, 1: 0, 2: 0})
    assert len(hand_stack._upper[3]["weights"]) == N
    assert len(hand_stack._upper[4]["weights"]) == N


def test_propagate_up_count_preservation(hand_stack):
    force_counts(hand_stack, {0: 60, 1: 40, 2: 0})
    assert len(hand_stack._upper[3]["weights"]) == 100
    got = hand_stack._positions_of(3)
    assert np.array_equal(np.sort(got, axis=0),
                          np.sort(hand_stack.leaf_positions, axis=0))


def test_chain_tree_every_level_holds_n():
    pts = [0.0, 1.0, 3.0, 7.0, 15.0]
    trajs = [Trajectory(str(i), np.array([[x, 0.0], [x + 0.5, 0.0]]))
             for i, x in enumerate(pts)]
    d = distance_matrix(trajs)
    tree = single_linkage(d, member_ids=[t.id for t in trajs])
    dyn = build_dynamics(tree, trajs, kappa=0.0, epsilon_floor=0.2)
    prior = {c: 1.0 / 5.0 for c in tree.leaves()}
    stack = FilterStack(tree, dyn, prior, start_point_sampler(tree, trajs), N, 0.0, seed=3)
    for b in tree.unique_births():
        count = sum(len(stack._weights_of(c)) for c in tree.alive_at(b))
        assert count == N
    check_consistency(stack)


def test_predict_preserves_labels(hand_stack):
    before = hand_stack.leaf_labels.copy()
    hand_stack._t = 1
    hand_stack.predict()
    assert np.array_equal(hand_stack.leaf_labels, before)


def test_predict_kappa_zero_moves_along_trajectory(hand_tree):
    trajs = hand_trajectories()
    dyn = build_dynamics(hand_tree, trajs, kappa=0.0, epsilon_floor=0.5)
    stack = FilterStack(hand_tree, dyn, {0: 1.0}, start_point_sampler(hand_tree, trajs),
                        1, 0.0, seed=2)
    assert np.array_equal(stack.leaf_positions[0], [0.0, 0.0])
    stack._t = 1
    stack.predict()
    assert np.array_equal(stack.leaf_positions[0], [1.0, 0.0])


def test_step_bit_identical_across_runs(hand_tree):
    trajs = hand_trajectories()

    def run():
        dyn = build_dynamics(hand_tree, trajs, kappa=0.5, epsilon_floor=0.5)
        prior = {c: 1.0 / 3.0 for c in hand_tree.leaves()}
        stack = FilterStack(hand_tree, dyn, prior, start_point_sampler(hand_tree, trajs),
                            N, 0.01, seed=77)
        obs = [
            [FineObservation(np.array([1.0, 0.2]))],
            [CoarseObservation(3, 1.5)],
            [],
            [FineObservation(np.array([2.0, 0.4])), CoarseObservation(3, 1.5)],
        ]
        snaps = [stack.step(o) for o in obs]
        return stack, snaps

    s1, snaps1 = run()
    s2, snaps2 = run()
    assert np.array_equal(s1.leaf_positions, s2.leaf_positions)
    assert np.array_equal(s1.leaf_labels, s2.leaf_labels)
    assert snaps1 == snaps2


def test_fine_update_nearest_particle_wins(hand_stack):
    stack = hand_stack
    force_counts(stack, {0: 50, 1: 30, 2: 20})
    target = stack.leaf_positions[7].copy()
    stack.leaf_positions += np.linspace(0, 5, N)[:, None]  # spread everyone out
    stack.leaf_positions[7] = target
    stack.update(FineObservation(target))
    assert np.argmax(stack.leaf_weights) == 7


def test_fine_update_all_equidistant_resets_uniform(hand_stack):
    stack = hand_stack
    stack.leaf_positions = np.zeros_like(stack.leaf_positions)
    before = stack.diagnostics["uniform_resets"]
    stack.update(FineObservation(np.array([3.0, 4.0])))
    assert stack.diagnostics["uniform_resets"] == before + 1
    assert np.all(stack.leaf_weights == 1.0 / N)


def test_coarse_update_equal_weights_within_class(hand_stack):
    stack = hand_stack
    force_counts(stack, {0: 50, 1: 30, 2: 20})
    stack.update(CoarseObservation(3, 1.5))
    w3 = stack._upper[3]["weights"]
    assert len(set(w3.tolist())) == 1
    assert w3[0] > 0


def test_coarse_update_observed_class_beats_sibling(hand_stack):
    stack = hand_stack
    force_counts(stack, {0: 50, 1: 30, 2: 20})
    stack.update(CoarseObservation(3, 1.5))
    w3 = stack._upper[3]["weights"][0]
    w2 = stack._weights_of(2)
    assert np.all(w3 > w2)
    # Tree distances: own birth (1.0) for the observed class, root birth (2.0)
    # for the sibling, so the sibling lands on the zero end of the scale.
    assert np.all(w2 == 0.0)
    assert stack.class_probs[2] == 0.0
    assert stack.class_probs[3] == pytest.approx(1.0)
    check_consistency(stack)


def test_coarse_update_scales_leaves_proportionally(hand_stack):
    stack = hand_stack
    force_counts(stack, {0: 50, 1: 30, 2: 20})
    stack.update(CoarseObservation(3, 1.5))
    assert stack.class_probs[0] == pytest.approx(0.5 / 0.8, abs=1e-12)
    assert stack.class_probs[1] == pytest.approx(0.3 / 0.8, abs=1e-12)
    # Within-class leaf weights stay equal after the ratio scaling.
    w0 = stack.leaf_weights[stack.leaf_labels == 0]
    w1 = stack.leaf_weights[stack.leaf_labels == 1]
    assert len(set(w0.tolist())) == 1
    assert len(set(w1.tolist())) == 1
    assert w0[0] == pytest.approx(w1[0])


def test_coarse_at_root_level_preserves_leaf_ratio():
    d = np.array([[0.0, 1.0], [1.0, 0.0]])
    tree = single_linkage(d)
    trajs = [Trajectory("0", np.array([[0.0, 0.0], [1.0, 0.0]])),
             Trajectory("1", np.array([[0.0, 1.0], [1.0, 1.0]]))]
    dyn = build_dynamics(tree, trajs, kappa=0.0, epsilon_floor=0.5)
    stack = FilterStack(tree, dyn, {0: 0.5, 1: 0.5}, start_point_sampler(tree, trajs),
                        4, 0.0, seed=1)
    force_counts(stack, {0: 2, 1: 2})
    stack.leaf_weights = np.array([0.375, 0.375, 0.125, 0.125])
    stack.rebuild_tree(stack.leaf_level())
    stack.prev_probs = dict(stack.class_probs)
    before = dict(stack.class_probs)
    resets = stack.diagnostics["uniform_resets"]
    stack.update(CoarseObservation(tree.root, tree.root_birth))
    # A single alive class carries no information: uniform reset, ratios kept.
    assert stack.diagnostics["uniform_resets"] == resets + 1
    assert stack.class_probs[0] == pytest.approx(before[0])
    assert stack.class_probs[1] == pytest.approx(before[1])
    ratio = stack.leaf_weights[0] / stack.leaf_weights[2]
    assert ratio == pytest.approx(3.0)


def test_coarse_dead_class_rejected(hand_stack):
    with pytest.raises(InvalidInputError):
        hand_stack.update(CoarseObservation(0, 1.5))  # leaf 0 dead at 1.5


def test_resample_one_hot_weight_copies_winner(hand_stack):
    stack = hand_stack
    stack.depletion = 0.0
    stack.leaf_weights = np.zeros(N)
    stack.leaf_weights[12] = 1.0
    winner_pos = stack.leaf_positions[12].copy()
    winner_cls = stack.leaf_labels[12]
    stack.resample()
    assert np.all(stack.leaf_labels == winner_cls)
    assert np.all(stack.leaf_positions == winner_pos)
    assert np.all(stack.leaf_weights == 1.0 / N)


def test_split_counts_paper_case():
    assert split_counts(100, 0.01) == (99, 1)
    assert split_counts(100, 0.0) == (100, 0)
    assert split_counts(10, 0.5) == (5, 5)


def test_resample_preserves_distribution_chi_square(hand_stack):
    stack = hand_stack
    stack.depletion = 0.0
    force_counts(stack, {0: 50, 1: 30, 2: 20})
    saved = (stack.leaf_positions.copy(), stack.leaf_labels.copy(), stack.leaf_weights.copy())
    totals = {0: 0, 1: 0, 2: 0}
    reps = 1000
    for rep in range(reps):
        stack._t = rep + 1  # fresh resampling substream per repeat
        stack.leaf_positions, stack.leaf_labels, stack.leaf_weights = (
            saved[0].copy(), saved[1].copy(), saved[2].copy())
        stack.resample()
        for c in totals:
            totals[c] += int((stack.leaf_labels == c).sum())
    expected = np.array([0.5, 0.3, 0.2]) * N * reps
    observed = np.array([totals[0], totals[1], totals[2]])
    assert chisquare(observed, expected).pvalue > 1e-3


def test_map_class_ties_and_argmax(hand_stack):
    force_counts(hand_stack, {0: 40, 1: 40, 2: 20})
    assert hand_stack.map_class(0.0) == 0  # tie between 0 and 1 -> smaller id
    force_counts(hand_stack, {0: 10, 1: 30, 2: 60})
    assert hand_stack.map_class(0.0) == 2
    assert hand_stack.map_class(1.5) == 2  # node 3 holds 0.4 < 0.6
    assert hand_stack.map_class(10.0) == hand_stack.tree.root


def test_point_estimate_formulas(hand_stack):
    stack = hand_stack
    stack.leaf_positions = np.zeros_like(stack.leaf_positions)
    stack.leaf_positions[0] = [2.0, 0.0]
    stack.leaf_weights = np.zeros(N)
    stack.leaf_weights[0] = 0.5
    stack.leaf_weights[1] = 0.5
    assert np.allclose(stack.point_estimate(), [1.0, 0.0])
    rng = np.random.default_rng(55)
    stack.leaf_positions = rng.normal(size=(N, 2))
    w = rng.uniform(0.1, 1.0, size=N)
    stack.leaf_weights = w
    expected = (w[:, None] * stack.leaf_positions).sum(0) / w.sum()
    assert np.allclose(stack.point_estimate(), expected, atol=1e-12)


def test_snapshot_schema(hand_stack):
    snap = hand_stack.step([FineObservation(np.array([0.5, 0.1]))])
    assert set(snap) == {"t", "levels", "point_estimate", "map_class"}
    assert snap["t"] == 1
    bs = [lvl["b"] for lvl in snap["levels"]]
    assert bs == sorted(bs)
    for lvl in snap["levels"]:
        total = sum(c["prob"] for c in lvl["classes"])
        assert total == pytest.approx(1.0, abs=1e-9)
    assert len(snap["point_estimate"]) == 2


def test_consistency_over_randomized_steps(hand_stack, hand_tree):
    rng = np.random.default_rng(60)
    stack = hand_stack
    levels = hand_tree.unique_births()
    for _ in range(100):
        obs = []
        if rng.random() < 0.6:
            obs.append(FineObservation(rng.normal(scale=2.0, size=2)))
        if rng.random() < 0.4:
            b = float(rng.choice(levels))
            cls = sorted(hand_tree.alive_at(b))[int(rng.integers(len(hand_tree.alive_at(b))))]
            obs.append(CoarseObservation(cls, b))
        stack.step(obs)
        check_consistency(stack)


def test_bounded_log_weights_shape():
    w = bounded_log_weights(np.array([0.0, 1.0, 3.0]))
    assert w[0] > w[1] > w[2] == 0.0
    assert np.all(w >= 0)
    assert np.all(np.isfinite(w))


def test_particles_at_level(hand_stack):
    parts = hand_stack.particles_at(1.5)
    assert len(parts) == N
    assert {p.class_id for p in parts} <= {2, 3}


def test_level_weights_normalized_after_updates(hand_stack):
    stack = hand_stack
    force_counts(stack, {0: 50, 1: 30, 2: 20})
    stack.update(CoarseObservation(3, 1.5))
    for b in (0.0, 1.5, 2.0):
        total = sum(p.weight for p in stack.particles_at(b))
        assert total == pytest.approx(1.0, abs=1e-9)
    stack.update(FineObservation(np.array([1.0, 0.1])))
    total = sum(p.weight for p in stack.particles_at(0.0))
    assert total == pytest.approx(1.0, abs=1e-9)
