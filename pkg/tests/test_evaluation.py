import numpy as np
import pytest

from mhpf.dynamics import build_dynamics
from mhpf.errors import InvalidInputError
from mhpf.evaluation import (ExperimentConfig, LeafParticleFilter, RAW_FIELDS,
                             RunParams, SUMMARY_FIELDS, build_scenario,
                             convergence_time, make_observation_plan, map_tree_distance,
                             mean_spacing, mse, parse_raw_rows, read_csv, run_bl1,
                             run_bl2, run_experiment, run_mhpf, summarize, write_csv)
from mhpf.filtration import flat_tree, single_class_tree
from mhpf.obsgen import bbox_diagonal, gen_fine
from mhpf.seeding import PHASE_OBSERVE, child_seed, substream
from mhpf.stack import CoarseObservation, FilterStack, start_point_sampler


def test_mse_trivials():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1.0, 0.0], [0.0, 0.0]) == 1.0


def test_mse_matches_formula():
    rng = np.random.default_rng(70)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert mse(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)), abs=1e-12)


def test_mse_rejects_mismatched_dims():
    with pytest.raises(InvalidInputError):
        mse([0.0], [0.0, 1.0])


def test_map_tree_distance_cases(hand_tree):
    # Truth leaf 0; its ancestor alive at 1.5 is node 3 (birth 1).
    assert map_tree_distance(hand_tree, 3, 0, 1.5) == 1.0     # MAP equals truth class
    assert map_tree_distance(hand_tree, 2, 0, 1.5) == 2.0     # sibling -> root birth
    assert map_tree_distance(hand_tree, 1, 0, 0.0) == 1.0     # sibling leaves
    assert map_tree_distance(hand_tree, hand_tree.root, 0, 1.5) == 2.0


def test_convergence_time_scan():
    assert convergence_time([0.1, 0.1], root_birth=3.0) == 0
    assert convergence_time([5.0, 5.0], root_birth=3.0) is None
    assert convergence_time([4.0, 4.0, 0.5, 0.5], root_birth=3.0) == 2
    assert convergence_time([4.0, 0.5, 4.0, 0.5], root_birth=3.0) == 3
    assert convergence_time([0.5, 0.5, 4.0], root_birth=3.0) is None


def fine_only_plan(corpus, truth, psi, seed, steps=None):
    scale = bbox_diagonal(corpus)
    rng = substream(seed, PHASE_OBSERVE)
    n = steps if steps is not None else len(truth) - 1
    return [[gen_fine(truth.points[t], psi, scale, rng)] for t in range(1, n + 1)]


def test_bl1_is_bit_identical_to_flat_tree_bottom_layer(fixed_corpus):
    corpus = fixed_corpus
    tree = flat_tree([t.id for t in corpus], root_birth=5.0)
    floor = 2.0 * mean_spacing(corpus)
    dyn = build_dynamics(tree, corpus, kappa=0.4, epsilon_floor=floor)
    prior = {c: 1.0 / tree.leaf_count for c in tree.leaves()}
    sampler = start_point_sampler(tree, corpus)
    seed = child_seed(1234, 0, 0)
    stack = FilterStack(tree, dyn, prior, sampler, 100, 0.01, seed)
    pf = LeafParticleFilter(tree.leaves(), {c: dyn[c] for c in tree.leaves()},
                            prior, sampler, 100, 0.01, seed)
    assert np.array_equal(stack.leaf_positions, pf.positions)
    assert np.array_equal(stack.leaf_labels, pf.labels)
    plan = fine_only_plan(corpus, corpus[3], psi=0.02, seed=99)
    for obs in plan:
        snap_stack = stack.step(obs, snapshot_levels=[0.0])
        snap_pf = pf.step(obs)
        assert snap_stack == snap_pf
        assert np.array_equal(stack.leaf_positions, pf.positions)
        assert np.array_equal(stack.leaf_labels, pf.labels)
        assert np.array_equal(stack.leaf_weights, pf.weights)


def test_bl2_is_bit_identical_to_single_class_stack(fixed_corpus):
    corpus = fixed_corpus
    tree = single_class_tree([t.id for t in corpus])
    floor = 2.0 * mean_spacing(corpus)
    dyn = build_dynamics(tree, corpus, kappa=0.3, epsilon_floor=floor,
                         epsilon_override=1.5)
    sampler = start_point_sampler(tree, corpus)
    seed = child_seed(4321, 0, 0)
    stack = FilterStack(tree, dyn, {0: 1.0}, sampler, 100, 0.01, seed)
    pf = LeafParticleFilter([0], {0: dyn[0]}, {0: 1.0}, sampler, 100, 0.01, seed)
    plan = fine_only_plan(corpus, corpus[5], psi=0.05, seed=98)
    for obs in plan:
        snap_stack = stack.step(obs, snapshot_levels=[0.0])
        snap_pf = pf.step(obs)
        assert snap_stack == snap_pf
        assert np.array_equal(stack.leaf_positions, pf.positions)
        assert np.array_equal(stack.leaf_weights, pf.weights)


def test_bl1_ignores_coarse_observations(fixed_corpus, fixed_tree):
    corpus = fixed_corpus
    floor = 2.0 * mean_spacing(corpus)
    dyn = build_dynamics(fixed_tree, corpus, kappa=0.4, epsilon_floor=floor)
    leaves = fixed_tree.leaves()
    prior = {c: 1.0 / len(leaves) for c in leaves}
    sampler = start_point_sampler(fixed_tree, corpus)
    seed = child_seed(7, 0, 0)
    leaf_dyn = {c: dyn[c] for c in leaves}
    pf_a = LeafParticleFilter(leaves, leaf_dyn, prior, sampler, 100, 0.01, seed)
    pf_b = LeafParticleFilter(leaves, leaf_dyn, prior, sampler, 100, 0.01, seed)
    plan = fine_only_plan(corpus, corpus[1], psi=0.02, seed=97)
    level = fixed_tree.unique_births()[3]
    cls = sorted(fixed_tree.alive_at(level))[0]
    for obs in plan:
        snap_a = pf_a.step(obs)
        snap_b = pf_b.step(list(obs) + [CoarseObservation(cls, level)])
        assert snap_a == snap_b


def test_bl1_zero_noise_locks_on(fixed_corpus):
    scenario = build_scenario(fixed_corpus, truth_index=0, holdout=False, index=0)
    params = RunParams(kappa=0.0, psi=0.0, depletion=0.0, coarse_prob=0.0)
    res = run_bl1(scenario, params, seed=11, repeat=0)
    quarter = len(res.mse) // 4
    assert np.mean(res.mse[-quarter:]) < 1e-9
    assert res.mse[-1] < 1e-12


def test_run_results_have_consistent_lengths(fixed_corpus):
    scenario = build_scenario(fixed_corpus, truth_index=2, index=2)
    params = RunParams(kappa=0.3, psi=0.01, coarse_prob=0.5)
    seed = 13
    plan = make_observation_plan(scenario, params, seed, 0)
    for runner in (run_mhpf, run_bl1, run_bl2):
        res = runner(scenario, params, seed, 0, plan=plan)
        assert len(res.mse) == len(plan)
        assert len(res.tree_distance) == len(plan)
        assert res.meta["root_birth"] == scenario.tree.root_birth


def test_holdout_excludes_truth(fixed_corpus):
    scenario = build_scenario(fixed_corpus, truth_index=4, index=4)
    ids = {t.id for t in scenario.corpus}
    assert fixed_corpus[4].id not in ids
    assert scenario.tree.leaf_count == len(fixed_corpus) - 1
    # The nearest remaining leaf stands in as the true class.
    assert scenario.truth_leaf in scenario.tree.leaves()


def test_bl2_tree_distance_is_root_birth(fixed_corpus):
    scenario = build_scenario(fixed_corpus, truth_index=1, index=1)
    params = RunParams(kappa=0.2, psi=0.01)
    res = run_bl2(scenario, params, seed=5, repeat=0)
    assert all(d == scenario.tree.root_birth for d in res.tree_distance)


def test_bl2_ignores_coarse_observations(fixed_corpus):
    scenario = build_scenario(fixed_corpus, truth_index=1, index=1)
    base = RunParams(kappa=0.2, psi=0.01, coarse_prob=0.0)
    plan = make_observation_plan(scenario, base, 5, 0)
    level = scenario.tree.root_birth
    noisy = [list(obs) + [CoarseObservation(scenario.tree.root, level)] for obs in plan]
    res_a = run_bl2(scenario, base, 5, 0, plan=plan)
    res_b = run_bl2(scenario, base, 5, 0, plan=noisy)
    assert res_a.mse == res_b.mse


def test_bl2_zero_noise_tracks_corpus_trajectory(fixed_corpus):
    # With zero noise every pooled particle starts on the shared start point
    # and the coincident-sample rule makes it follow the first member
    # trajectory; choosing that trajectory as truth gives exact tracking.
    scenario = build_scenario(fixed_corpus, truth_index=0, holdout=False, index=0)
    params = RunParams(kappa=0.0, psi=0.0, depletion=0.0)
    res = run_bl2(scenario, params, seed=6, repeat=0)
    assert max(res.mse) < 1e-12


def smoke_config(**overrides):
    base = dict(corpus_kind="fixed", corpus_n=13, n_points=40, corpus_seed=3,
                n_scenarios=2, n_repeats=2, seed=21, kappas=(0.3,), psis=(0.02,),
                mode="mixed", coarse_prob=0.5, n_particles=50, workers=1)
    base.update(overrides)
    return ExperimentConfig(**base)


def test_run_experiment_smoke_schema(tmp_path):
    cfg = smoke_config()
    raw, summary = run_experiment(cfg)
    assert len(raw) == 2 * 2 * 3 * 39  # scenarios x repeats x filters x steps
    assert set(raw[0]) == set(RAW_FIELDS)
    kinds = {r["filter"] for r in summary}
    assert kinds == {"mhpf", "bl1", "bl2"}
    mhpf_row = next(r for r in summary if r["filter"] == "mhpf")
    assert isinstance(mhpf_row["p_mse_vs_bl1"], float)
    raw_path = tmp_path / "raw.csv"
    summary_path = tmp_path / "summary.csv"
    write_csv(raw_path, raw, RAW_FIELDS)
    write_csv(summary_path, summary, SUMMARY_FIELDS)
    header = raw_path.read_text().splitlines()[0]
    assert header == ",".join(RAW_FIELDS)
    assert summary_path.read_text().splitlines()[0] == ",".join(SUMMARY_FIELDS)


def test_summary_rederivable_from_raw_csv(tmp_path):
    cfg = smoke_config(n_scenarios=2, n_repeats=1)
    raw, summary = run_experiment(cfg)
    path = tmp_path / "raw.csv"
    write_csv(path, raw, RAW_FIELDS)
    reparsed = parse_raw_rows(read_csv(path))
    assert summarize(reparsed) == summary


def test_run_experiment_deterministic_across_workers():
    cfg = smoke_config(n_scenarios=2, n_repeats=1)
    raw_1, summary_1 = run_experiment(cfg)
    cfg2 = smoke_config(n_scenarios=2, n_repeats=1, workers=2)
    raw_2, summary_2 = run_experiment(cfg2)
    assert raw_1 == raw_2
    assert summary_1 == summary_2
