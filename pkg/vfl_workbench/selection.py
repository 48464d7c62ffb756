"""Relevance-ratio data selection.

For a sample with answer y, ``logP(k)`` is the teacher-forced log-likelihood
with vision visible to layers ``0..k-1`` only (dropped from layer k), so
``logP(L)`` is the full model and ``logP(0)`` the text-only one. The ratio
``R_k = P(k) / P(k-1)`` measures how much layer k-1's view of the image helps
the answer; a sample's dominant layer is the k with the largest ratio.

Selection groups samples by dominant layer, spreads the budget evenly across
groups and samples each group uniformly within quartile strata of ``logP(L)``.
For a sparse k-set the ratios span the gaps between consecutive configured
k values; they are not rescaled.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, LayerRangeError, WorkbenchError
from .intervene import DropSpec, VisionTrunk, logprob_dropped
from .model import ModelLike, MultimodalSequence
from .parallel import ordered_map
from .taskgen import AnswerSample

logger = logging.getLogger(__name__)

N_STRATA = 4
STRATEGIES = ("vfl", "random")


@dataclass
class RelevanceProfile:
    sample_id: str
    ks: list[int]
    logp: list[float]
    logp_full: float

    @property
    def ratio_ks(self) -> list[int]:
        """The k each ratio belongs to (every configured k but the first)."""
        return self.ks[1:]

    @property
    def log_r(self) -> list[float]:
        return [b - a for a, b in zip(self.logp, self.logp[1:])]

    @property
    def r(self) -> list[float]:
        return [math.exp(v) for v in self.log_r]

    @property
    def k_star(self) -> int:
        return dominant_layer(self)

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.sample_id,
            "ks": list(self.ks),
            "logp": list(self.logp),
            "r": self.r,
            "k_star": self.k_star,
            "logp_full": self.logp_full,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> RelevanceProfile:
        try:
            return cls(
                sample_id=str(record["id"]),
                ks=[int(k) for k in record["ks"]],
                logp=[float(v) for v in record["logp"]],
                logp_full=float(record["logp_full"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed profile record: {exc}") from exc


def relevance_ratio(model: ModelLike, seq: MultimodalSequence, k: int) -> float:
    """``R_k = exp(logP(k) - logP(k-1))`` for 1 <= k <= L."""
    n_layers = model.config.n_layers
    if not 1 <= k <= n_layers:
        raise LayerRangeError(f"relevance ratio layer {k} outside [1, {n_layers}]")
    upper = logprob_dropped(model, seq, DropSpec(k))
    lower = logprob_dropped(model, seq, DropSpec(k - 1))
    return math.exp(upper - lower)


def dominant_layer(profile: RelevanceProfile) -> int:
    """k with the largest ratio; ties go to the smallest k."""
    log_r = profile.log_r
    if not log_r:
        raise ContractError(f"profile {profile.sample_id} has no ratios")
    return profile.ratio_ks[int(np.argmax(log_r))]


def check_k_set(ks: Iterable[int], n_layers: int) -> list[int]:
    ks = [int(k) for k in ks]
    if len(ks) < 2:
        raise ContractError("a k-set needs at least two drop points")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ContractError(f"k-set must be strictly increasing, got {ks}")
    if ks[0] < 0 or ks[-1] > n_layers:
        raise LayerRangeError(f"k-set {ks} outside [0, {n_layers}]")
    return ks


def profile_sample(model: ModelLike, sample: AnswerSample, ks: Sequence[int]) -> RelevanceProfile:
    seq = sample.sequence(model.config, with_answer=True)
    trunk = VisionTrunk(model, seq)
    logp = [trunk.logprob_dropped(DropSpec(k)) for k in ks]
    n_layers = model.config.n_layers
    logp_full = logp[-1] if ks[-1] == n_layers else trunk.logprob_dropped(DropSpec(n_layers))
    return RelevanceProfile(sample.sample_id, list(ks), logp, logp_full)


def profile_dataset(
    model: ModelLike,
    samples: Sequence[AnswerSample],
    ks: Sequence[int] | None = None,
    jobs: int = 1,
    on_progress: Callable[[int, int], None] | None = None,
) -> list[RelevanceProfile]:
    """One profile per sample, in input order; the vision prefix is computed once per sample."""
    n_layers = model.config.n_layers
    ks = check_k_set(range(n_layers + 1) if ks is None else ks, n_layers)

    def run(sample: AnswerSample) -> RelevanceProfile:
        try:
            return profile_sample(model, sample, ks)
        except WorkbenchError as exc:
            raise exc.__class__(f"sample {sample.sample_id}: {exc}") from exc

    logger.info("Profiling %d samples over k=%s", len(samples), ks)
    return ordered_map(run, samples, jobs, on_progress)


# ---------------------------------------------------------------------------
# Budgeted selection
# ---------------------------------------------------------------------------

@dataclass
class Selection:
    ids: list[str]
    budget: int
    seed: int
    strategy: str
    group_sizes: dict[int, int] = field(default_factory=dict)
    group_totals: dict[int, int] = field(default_factory=dict)

    def to_manifest(self) -> dict[str, Any]:
        return {
            "budget": self.budget,
            "seed": self.seed,
            "strategy": self.strategy,
            "selected": len(self.ids),
            "group_sizes": {str(k): v for k, v in sorted(self.group_sizes.items())},
            "group_totals": {str(k): v for k, v in sorted(self.group_totals.items())},
        }


def allocate(capacity: Mapping[int, int], budget: int) -> dict[int, int]:
    """Spread ``budget`` evenly over keys, never beyond a key's capacity.

    The remainder of each round goes to the largest capacities first, then the
    smallest key; capacity left unused by small keys is redistributed the
    same way.
    """
    if budget > sum(capacity.values()):
        raise ContractError(f"budget {budget} exceeds the {sum(capacity.values())} available items")
    alloc = {key: 0 for key in capacity}
    remaining = budget
    while remaining > 0:
        open_keys = sorted((k for k in capacity if alloc[k] < capacity[k]), key=lambda k: (-capacity[k], k))
        share, extra = divmod(remaining, len(open_keys))
        for i, key in enumerate(open_keys):
            give = min(share + (1 if i < extra else 0), capacity[key] - alloc[key])
            alloc[key] += give
            remaining -= give
    return alloc


def _check_budget(budget: int, available: int) -> None:
    if budget < 0:
        raise ContractError(f"budget must be non-negative, got {budget}")
    if budget > available:
        raise ContractError(f"budget {budget} exceeds dataset size {available}")


def partition_and_sample(profiles: Sequence[RelevanceProfile], budget: int, seed: int) -> Selection:
    """Balanced selection across dominant-layer groups, stratified by terminal likelihood."""
    _check_budget(budget, len(profiles))
    ids = [p.sample_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ContractError("profile sample ids are not unique")

    groups: dict[int, list[RelevanceProfile]] = {}
    for profile in profiles:
        groups.setdefault(profile.k_star, []).append(profile)
    for members in groups.values():
        members.sort(key=lambda p: (p.logp_full, p.sample_id))

    totals = {k: len(members) for k, members in groups.items()}
    quota = allocate(totals, budget) if groups else {}
    rng = np.random.default_rng(seed)
    selected: list[str] = []
    for k in sorted(groups):
        strata = [list(s) for s in np.array_split(np.arange(len(groups[k])), N_STRATA)]
        per_stratum = allocate({i: len(s) for i, s in enumerate(strata)}, quota[k])
        for i, stratum in enumerate(strata):
            if per_stratum[i] == 0:
                continue
            picks = rng.choice(len(stratum), size=per_stratum[i], replace=False)
            selected.extend(groups[k][stratum[int(j)]].sample_id for j in sorted(picks))

    logger.info(
        "Selected %d of %d samples across %d dominant-layer groups: %s",
        len(selected), len(profiles), len(groups), dict(sorted(quota.items())),
    )
    return Selection(sorted(selected), budget, seed, "vfl", dict(sorted(quota.items())), dict(sorted(totals.items())))


def random_sample(profiles: Sequence[RelevanceProfile], budget: int, seed: int) -> Selection:
    """Uniform random subset of the same size, for comparison."""
    _check_budget(budget, len(profiles))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(profiles), size=budget, replace=False)
    return Selection(sorted(profiles[int(i)].sample_id for i in picks), budget, seed, "random")


def select(profiles: Sequence[RelevanceProfile], budget: int, seed: int, strategy: str = "vfl") -> Selection:
    if strategy == "vfl":
        return partition_and_sample(profiles, budget, seed)
    if strategy == "random":
        return random_sample(profiles, budget, seed)
    raise ContractError(f"unknown selection strategy {strategy!r}; expected one of {list(STRATEGIES)}")


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_profiles(profiles: Sequence[RelevanceProfile], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for profile in profiles:
            fh.write(json.dumps(profile.to_record(), sort_keys=True, separators=(",", ":")) + "\n")
    logger.info("Wrote %d profiles to %s", len(profiles), path)
    return path


def read_profiles(path: str | Path) -> list[RelevanceProfile]:
    profiles = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                profiles.append(RelevanceProfile.from_record(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
    return profiles


def write_selection(selection: Selection, ids_path: str | Path) -> tuple[Path, Path]:
    """Newline-separated ids plus ``<stem>.selection.json`` with budget, seed and group sizes."""
    ids_path = Path(ids_path)
    ids_path.write_text("".join(f"{i}\n" for i in selection.ids), encoding="utf-8", newline="\n")
    manifest_path = ids_path.with_name(ids_path.stem + ".selection.json")
    manifest_path.write_text(json.dumps(selection.to_manifest(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info("Wrote selection %s (%d ids)", ids_path, len(selection.ids))
    return ids_path, manifest_path


__all__ = [
    "RelevanceProfile",
    "STRATEGIES",
    "Selection",
    "allocate",
    "check_k_set",
    "dominant_layer",
    "partition_and_sample",
    "profile_dataset",
    "profile_sample",
    "random_sample",
    "read_profiles",
    "relevance_ratio",
    "select",
    "write_profiles",
    "write_selection",
]
