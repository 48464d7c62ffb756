from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import random_sequence
from reference import reference_answer_logprob
from vfl_workbench import numkit as nk
from vfl_workbench.errors import ContractError, LayerRangeError
from vfl_workbench.intervene import DropSpec, logprob_dropped
from vfl_workbench.model import Params, sequence_logprob
from vfl_workbench.selection import (
    RelevanceProfile,
    allocate,
    check_k_set,
    dominant_layer,
    partition_and_sample,
    profile_dataset,
    random_sample,
    read_profiles,
    relevance_ratio,
    select,
    write_profiles,
    write_selection,
)


def _synthetic_profiles(n: int, n_layers: int, seed: int) -> list[RelevanceProfile]:
    rng = np.random.default_rng(seed)
    profiles = []
    for i in range(n):
        logp = list(np.cumsum(rng.normal(size=n_layers + 1)) - 10.0)
        profiles.append(RelevanceProfile(f"s{i:04d}", list(range(n_layers + 1)), logp, logp[-1]))
    return profiles


# ---------------------------------------------------------------------------
# Ratios
# ---------------------------------------------------------------------------

def test_ratios_and_dominant_layer():
    profile = RelevanceProfile("a", [0, 1, 2, 3], [-4.0, -3.0, -2.5, -2.5], -2.5)
    assert profile.ratio_ks == [1, 2, 3]
    assert profile.log_r == [1.0, 0.5, 0.0]
    assert profile.r == pytest.approx([math.e, math.exp(0.5), 1.0])
    assert dominant_layer(profile) == 1


def test_dominant_layer_ties_go_to_smallest_k():
    profile = RelevanceProfile("a", [0, 2, 4], [0.0, 0.5, 1.0], 1.0)
    assert dominant_layer(profile) == 2


def test_dominant_layer_needs_ratios():
    with pytest.raises(ContractError):
        dominant_layer(RelevanceProfile("a", [3], [0.0], 0.0))


def test_check_k_set():
    assert check_k_set([0, 2, 3], 3) == [0, 2, 3]
    with pytest.raises(ContractError):
        check_k_set([1], 3)
    with pytest.raises(ContractError):
        check_k_set([2, 1], 3)
    with pytest.raises(LayerRangeError):
        check_k_set([0, 4], 3)


def test_profiles_telescope_on_a_real_model(tiny_model, tiny_config, count_answers):
    profiles = profile_dataset(tiny_model, count_answers[:2])
    L = tiny_config.n_layers
    for sample, profile in zip(count_answers, profiles):
        seq = sample.sequence(tiny_config, with_answer=True)
        assert profile.ks == list(range(L + 1))
        assert profile.logp_full == sequence_logprob(tiny_model, seq)
        assert profile.logp[0] == logprob_dropped(tiny_model, seq, DropSpec(0))
        assert sum(profile.log_r) == pytest.approx(profile.logp_full - profile.logp[0], abs=1e-9)
        assert relevance_ratio(tiny_model, seq, 2) == pytest.approx(profile.r[1], rel=1e-12)
        assert 1 <= profile.k_star <= L


def test_sparse_k_set_keeps_the_full_likelihood(tiny_model, count_answers):
    (profile,) = profile_dataset(tiny_model, count_answers[:1], ks=[0, 1])
    (full,) = profile_dataset(tiny_model, count_answers[:1])
    assert profile.logp == full.logp[:2]
    assert profile.logp_full == full.logp_full
    assert profile.k_star == 1


def test_profile_dataset_is_independent_of_jobs(tiny_model, count_answers):
    serial = profile_dataset(tiny_model, count_answers, jobs=1)
    threaded = profile_dataset(tiny_model, count_answers, jobs=3)
    assert [p.to_record() for p in serial] == [p.to_record() for p in threaded]


def test_relevance_ratio_range(tiny_model, tiny_config, count_sequence):
    with pytest.raises(LayerRangeError):
        relevance_ratio(tiny_model, count_sequence, 0)
    with pytest.raises(LayerRangeError):
        relevance_ratio(tiny_model, count_sequence, tiny_config.n_layers + 1)


def test_relevance_ratio_matches_two_reference_passes(micro_config):
    params = Params.initialize(micro_config, seed=6)
    seq = random_sequence(micro_config, np.random.default_rng(6), n_text=3, n_answer=2)
    with nk.float64_mode():
        r1 = relevance_ratio(params, seq, 1)
    upper = reference_answer_logprob(params, seq, drop_from=1)
    lower = reference_answer_logprob(params, seq, drop_from=0)
    assert r1 == pytest.approx(math.exp(upper - lower), rel=1e-9)


def test_vision_agnostic_model_has_unit_ratios(micro_model, micro_config):
    blind = micro_model.replace({"lm_head": np.zeros_like(micro_model["lm_head"])})
    seq = random_sequence(micro_config, np.random.default_rng(2), n_text=3, n_answer=2)
    for k in range(1, micro_config.n_layers + 1):
        assert relevance_ratio(blind, seq, k) == 1.0


# ---------------------------------------------------------------------------
# Budgeted selection
# ---------------------------------------------------------------------------

def test_allocate_caps_small_groups():
    assert allocate({1: 1, 2: 10, 3: 10}, 9) == {1: 1, 2: 4, 3: 4}


def test_allocate_remainder_order():
    assert allocate({0: 5, 1: 5, 2: 5}, 10) == {0: 4, 1: 3, 2: 3}
    assert allocate({0: 2, 1: 6}, 3) == {0: 1, 1: 2}
    assert allocate({0: 3}, 0) == {0: 0}
    with pytest.raises(ContractError):
        allocate({0: 1, 1: 1}, 3)


def test_selection_is_balanced_and_deterministic():
    profiles = _synthetic_profiles(1000, 4, seed=0)
    first = partition_and_sample(profiles, 200, seed=3)
    second = partition_and_sample(profiles, 200, seed=3)
    assert first.ids == second.ids
    assert len(first.ids) == len(set(first.ids)) == 200
    assert sum(first.group_sizes.values()) == 200
    assert sum(first.group_totals.values()) == 1000
    by_id = {p.sample_id: p for p in profiles}
    picked = [by_id[i].k_star for i in first.ids]
    for k, size in first.group_sizes.items():
        assert picked.count(k) == size
    if all(total >= 50 for total in first.group_totals.values()):
        sizes = list(first.group_sizes.values())
        assert max(sizes) - min(sizes) <= 1
    assert partition_and_sample(profiles, 200, seed=4).ids != first.ids


def test_selection_spreads_over_likelihood_strata():
    # one dominant layer; logp_full 0..99 so the strata are the four quartiles
    profiles = [RelevanceProfile(f"s{i:03d}", [0, 1], [-200.0, float(i)], float(i)) for i in range(100)]
    selection = partition_and_sample(profiles, 8, seed=0)
    quartiles = [int(i[1:]) // 25 for i in selection.ids]
    assert sorted(quartiles) == [0, 0, 1, 1, 2, 2, 3, 3]


def test_selection_edge_cases():
    profiles = _synthetic_profiles(10, 3, seed=1)
    assert partition_and_sample(profiles, 0, seed=0).ids == []
    assert sorted(partition_and_sample(profiles, 10, seed=0).ids) == sorted(p.sample_id for p in profiles)
    with pytest.raises(ContractError):
        partition_and_sample(profiles, 11, seed=0)
    with pytest.raises(ContractError):
        partition_and_sample(profiles + profiles[:1], 2, seed=0)


def test_random_strategy():
    profiles = _synthetic_profiles(50, 3, seed=2)
    chosen = select(profiles, 10, seed=5, strategy="random")
    assert chosen.strategy == "random"
    assert chosen.ids == random_sample(profiles, 10, seed=5).ids
    assert len(set(chosen.ids)) == 10
    with pytest.raises(ContractError):
        select(profiles, 10, seed=5, strategy="greedy")


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def test_profile_and_selection_files(tmp_path):
    profiles = _synthetic_profiles(20, 3, seed=4)
    path = write_profiles(profiles, tmp_path / "profiles.jsonl")
    loaded = read_profiles(path)
    assert [p.sample_id for p in loaded] == [p.sample_id for p in profiles]
    assert [p.k_star for p in loaded] == [p.k_star for p in profiles]
    record = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert set(record) == {"id", "ks", "logp", "r", "k_star", "logp_full"}

    selection = partition_and_sample(loaded, 6, seed=1)
    ids_path, manifest_path = write_selection(selection, tmp_path / "subset.txt")
    assert ids_path.read_text(encoding="utf-8").split() == selection.ids
    assert manifest_path.name == "subset.selection.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    assert manifest["budget"] == 6 and manifest["selected"] == 6 and manifest["strategy"] == "vfl"


def test_read_profiles_rejects_garbage(tmp_path):
    path = tmp_path / "profiles.jsonl"
    path.write_text('{"id": "a"}\n', encoding="utf-8")
    with pytest.raises(ContractError):
        read_profiles(path)
