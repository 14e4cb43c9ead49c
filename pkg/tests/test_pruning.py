import itertools

import numpy as np
import pytest

from dynprune.errors import ConfigError, StructuralError
from dynprune.grouping import GroupParameters
from dynprune.model import Model, build_toy_net
from dynprune.oracle import channel_prune_baseline
from dynprune.pruning import (
    GroupAssignment,
    PrunedStructure,
    compute_importance,
    discretize_alpha,
    find_redundant_channels,
    masked_model,
    prune,
    prune_filters,
    redundant_by_ratio,
    structure_report,
)


def exhaustive_best(scores, beta):
    """Largest subset with ratio < beta; among equal sizes the lowest energy,
    then the greedy (ascending, index-stable) prefix."""
    n, total = len(scores), scores.sum()
    best = []
    for size in range(n, -1, -1):
        feasible = []
        for sub in itertools.combinations(range(n), size):
            e = scores[list(sub)].sum()
            ratio = e / total if total > 0 else 0.0
            if ratio < beta:
                feasible.append(sub)
        if feasible:
            best = feasible
            break
    return [sorted(s) for s in best]


def loop_importance(w, labels, n_groups):
    c_out, c_in, kh, kw = w.shape
    out = np.zeros((n_groups, c_in))
    for p in range(n_groups):
        for m in range(c_in):
            for k in range(c_out):
                if labels[k] != p:
                    continue
                for i in range(kh):
                    for j in range(kw):
                        out[p, m] += w[k, m, i, j] ** 2
    return out


def test_assignment_invariants():
    a = GroupAssignment((0, 1, 1, 0), 3)
    assert a.groups() == [[0, 3], [1, 2], []]
    np.testing.assert_array_equal(a.one_hot().sum(axis=1), 1)
    with pytest.raises(ValueError):
        GroupAssignment((0, 3), 2)
    assert GroupAssignment.from_groups([[1], [0, 2]]).group_of_filter == (1, 0, 1)
    with pytest.raises(ValueError):
        GroupAssignment.from_groups([[0, 1], [1]])


def test_discretize_examples():
    p = GroupParameters({"l": np.array([[3.0, 1.0], [1.0, 1.0]])}, 0.5, 2)
    assert discretize_alpha(p)["l"].group_of_filter == (0, 0)


def test_importance_examples(rng):
    a = GroupAssignment((0, 1, 0), 2)
    assert not compute_importance(np.zeros((3, 4, 3, 3)), a).any()
    w = rng.standard_normal((2, 3, 3, 3))
    single = compute_importance(w, GroupAssignment((0, 1), 2))
    np.testing.assert_allclose(single, (w**2).sum(axis=(2, 3)), rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_importance_matches_loops(seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((7, 5, 3, 3))
    labels = r.integers(0, 3, size=7)
    got = compute_importance(w, GroupAssignment(tuple(labels), 3))
    np.testing.assert_allclose(got, loop_importance(w, labels, 3), rtol=0, atol=1e-12)


def test_beta_zero_prunes_nothing(rng):
    assert redundant_by_ratio(rng.random(8) + 0.1, 0.0) == []


def test_dominant_channel_kept():
    scores = np.array([0.0, 0.0, 5.0, 0.0])
    for beta in (1e-9, 0.5, 0.99):
        assert redundant_by_ratio(scores, beta) == [0, 1, 3]


def test_zero_energy_group():
    assert redundant_by_ratio(np.zeros(3), 0.0) == []
    assert redundant_by_ratio(np.zeros(3), 0.1) == [0, 1, 2]


def test_beta_out_of_range():
    with pytest.raises(ConfigError):
        redundant_by_ratio(np.ones(3), 1.0)
    with pytest.raises(ConfigError):
        find_redundant_channels(np.ones((1, 3)), GroupAssignment((0,), 1), -0.1)


def test_empty_group_prunes_nothing():
    scores = np.array([[1.0, 0.1, 2.0], [0.0, 0.0, 0.0]])
    out = find_redundant_channels(scores, GroupAssignment((0, 0), 2), 0.5)
    assert out == [[0, 1], []]


@pytest.mark.parametrize("seed", range(40))
def test_greedy_matches_exhaustive(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 9))
    scores = r.exponential(size=n) * (r.random(n) > 0.2)
    for beta in (0.1, 0.3, 0.5):
        got = redundant_by_ratio(scores, beta)
        best = exhaustive_best(scores, beta)
        assert len(got) == len(best[0])
        assert got in best


def test_spec_example_eight_channels():
    r = np.random.default_rng(2024)
    scores = r.random(8)
    got = redundant_by_ratio(scores, 0.3)
    assert got in exhaustive_best(scores, 0.3)


@pytest.mark.parametrize("seed", range(10))
def test_bound_maximality_monotonicity(seed):
    r = np.random.default_rng(seed)
    scores = r.exponential(size=8)
    prev: set[int] = set()
    for beta in np.linspace(0, 0.95, 20):
        q = redundant_by_ratio(scores, beta)
        assert scores[q].sum() / scores.sum() < beta or not q
        rest = [m for m in np.argsort(scores, kind="stable") if m not in q]
        if rest:
            assert (scores[q].sum() + scores[rest[0]]) / scores.sum() >= beta
        assert prev <= set(q)
        prev = set(q)


def test_prune_filters():
    w = np.random.default_rng(0).standard_normal((8, 3, 3, 3))
    assert prune_filters(w, 0.0) == list(range(8))
    w[5] = 0
    assert 5 not in prune_filters(w, 1e-6)
    r = np.random.default_rng(1)
    w = r.standard_normal((8, 2, 3, 3))
    energy = (w.reshape(8, -1) ** 2).sum(axis=1)
    kept = prune_filters(w, 0.2)
    dropped = sorted(set(range(8)) - set(kept))
    assert dropped in exhaustive_best(energy, 0.2)


def _model(seed=0):
    return Model.init(build_toy_net(), np.random.default_rng(seed))


def test_prune_beta_zero_is_identity():
    m = _model()
    s, state = prune(m, {"conv4": GroupAssignment((0, 1) * 4, 2)}, beta=0.0)
    assert all(len(g.gather) == 8 for g in s.layers["conv4"].groups)
    assert all(np.array_equal(state[k], v) for k, v in m.state().items())


def test_single_group_equals_channel_baseline():
    for seed in range(5):
        m = _model(seed)
        w = m.params["conv4.weight"].data
        w[:, seed] *= 0.05
        for beta in (0.1, 0.3, 0.6):
            s, _ = prune(m, {"conv4": GroupAssignment((0,) * 8, 1)}, beta=beta)
            base = channel_prune_baseline(m, ["conv4"], beta=beta)
            assert s.to_json() == base.to_json()


def test_partition_invariant_and_dead_channel_cascade():
    m = _model()
    w = m.params["conv4.weight"].data
    w[:, 2] = 0.0  # channel 2 unused by every group
    w[6] = 0.0  # alone in its group, so the whole group goes
    s, state = prune(m, {"conv4": GroupAssignment((0, 1, 0, 1, 0, 1, 2, 1), 3)}, beta=1e-9)
    conv4 = s.layers["conv4"]
    kept = [k for g in conv4.groups for k in g.filters]
    assert len(kept) == len(set(kept)) and 6 not in kept
    assert 2 not in s.layers["conv0"].kept_filters()
    assert 6 not in s.layers["linear8"].groups[0].gather
    assert not state["conv0.weight"][2].any()
    s.validate()


def test_structure_report_and_json_round_trip():
    m = _model()
    s, _ = prune(m, {"conv4": GroupAssignment((0, 0, 1, 1, 0, 0, 1, 1), 2)}, beta=0.3)
    text = structure_report(s)
    assert "[conv4]" in text and "gather=" in text
    assert PrunedStructure.from_json(s.to_json()).to_json() == s.to_json()


def test_all_filters_dead_is_structural_error():
    m = _model()
    m.params["conv4.weight"].data[:] = 0.0
    with pytest.raises(StructuralError):
        prune(m, {"conv4": GroupAssignment((0,) * 8, 1)}, beta=0.5)


def test_fixed_rate_and_exclusive_arguments():
    m = _model()
    a = GroupAssignment((0, 1) * 4, 2)
    s, _ = prune(m, {"conv4": a}, rate=0.5)
    assert all(len(g.gather) == 4 for g in s.layers["conv4"].groups)
    with pytest.raises(ConfigError):
        prune(m, {"conv4": a})
    with pytest.raises(ConfigError):
        prune(m, {"conv4": a}, beta=0.1, rate=0.1)


def test_masked_model_zeroes_pruned_weights():
    m = _model()
    s, _ = prune(m, {"conv4": GroupAssignment((0, 1) * 4, 2)}, rate=0.25)
    mm = masked_model(m, s)
    w = mm.params["conv4.weight"].data
    for g in s.layers["conv4"].groups:
        for m_ in g.pruned_channels:
            assert not w[np.ix_(g.filters, [m_])].any()
