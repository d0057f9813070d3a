"""Multi-level candidate selection.

Each database model is judged similar or not on three levels (category,
surface-feature statistics, bounding size). Models are grouped by how many
levels agree, only the best non-empty group is registered against the
observation, and registration fitness orders the survivors.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .cloud import PointCloud, voxel_downsample
from .descriptor import CFPFHDescriptor, DescriptorParams, build_cfpfh, ds, geometric_match, qs
from .dimension import SOBB, SortedExtents, build_sobb, dimensional_match, ss
from .errors import InvalidInputError, RegistrationFailedError, SimGraspError, TooSparseError
from .registration import RegistrationParams, RegistrationResult, register
from .semantic import Category, CompletionService, EmbeddingTable, prefilter_semantic, semantic_match

log = logging.getLogger(__name__)

ABLATIONS = ("semantic", "geometric", "dimensional", "multilevel")


def _word(v: bool | None) -> str:
    return "skipped" if v is None else ("yes" if v else "no")


@dataclass(frozen=True)
class MatchFlags:
    """Per-level verdicts; None marks a level that was not evaluated."""

    semantic: bool | None
    geometric: bool | None
    dimensional: bool | None

    @property
    def tier(self) -> int:
        return sum(v is True for v in (self.semantic, self.geometric, self.dimensional))

    @property
    def available(self) -> int:
        return sum(v is not None for v in (self.semantic, self.geometric, self.dimensional))

    def to_dict(self) -> dict:
        return {"semantic": _word(self.semantic), "geometric": _word(self.geometric),
                "dimensional": _word(self.dimensional)}


@dataclass(frozen=True)
class MatchConfig:
    qs_min: float = 0.9
    ds_max: float = 0.1
    ss_max: float = 0.1
    delta: float = 0.5
    alpha: float = 0.5
    beta: float = 5.0
    count_voxel: float = 0.005
    prefilter: bool = False
    tier0_cap: int = 32
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    descriptor: DescriptorParams = field(default_factory=DescriptorParams)

    def __post_init__(self):
        if not 0 < self.qs_min <= 1:
            raise InvalidInputError("qs_min must lie in (0, 1]")
        if self.ds_max <= 0 or self.ss_max <= 0:
            raise InvalidInputError("ds_max and ss_max must be positive")
        if not 0 < self.delta <= 1:
            raise InvalidInputError("delta must lie in (0, 1]")
        if not 0 <= self.alpha < self.beta:
            raise InvalidInputError("need 0 <= alpha < beta")
        if self.tier0_cap < 1:
            raise InvalidInputError("tier0_cap must be >= 1")

    def thresholds(self) -> dict:
        return {"qs_min": self.qs_min, "ds_max": self.ds_max, "ss_max": self.ss_max, "delta": self.delta,
                "alpha": self.alpha, "beta": self.beta, "prefilter": self.prefilter}


@dataclass
class Services:
    completion: CompletionService | None = None
    embeddings: EmbeddingTable | None = None


@dataclass
class Observation:
    """A segmented partial cloud plus everything derived from it once."""

    cloud: PointCloud
    category: Category | None
    descriptor: CFPFHDescriptor | None
    sobb: SOBB | None
    point_count: int
    support_normal: np.ndarray | None = None
    support_point: np.ndarray | None = None
    truth: dict = field(default_factory=dict)

    @property
    def extents(self) -> SortedExtents | None:
        return None if self.sobb is None else self.sobb.sorted_extents


def observe(cloud: PointCloud, category: Category | str | None = None, support_normal=None, support_point=None,
            config: MatchConfig = MatchConfig(), truth: dict | None = None) -> Observation:
    if isinstance(category, str):
        category = Category.of(category)
    try:
        descriptor = build_cfpfh(cloud, config.descriptor)
    except TooSparseError as exc:
        log.warning("observation descriptor unavailable: %s", exc)
        descriptor = None
    sobb = None
    if support_normal is not None:
        try:
            sobb = build_sobb(cloud, np.asarray(support_normal, dtype=float))
        except SimGraspError as exc:
            log.warning("bounding box unavailable: %s", exc)
    count = len(voxel_downsample(cloud, config.count_voxel))
    return Observation(cloud, category, descriptor, sobb, count,
                       None if support_normal is None else np.asarray(support_normal, float),
                       None if support_point is None else np.asarray(support_point, float), dict(truth or {}))


def observe_scene(scene, config: MatchConfig = MatchConfig()) -> Observation:
    return observe(scene.cloud, scene.category, scene.support_normal, getattr(scene, "support_point", None),
                   config, scene.truth)


def evaluate_levels(obs: Observation, record, semantic_set: set[str] | None, config: MatchConfig = MatchConfig(),
                    ablate: str | None = None) -> MatchFlags:
    sem = None if semantic_set is None or ablate == "semantic" else record.category.simplified in semantic_set
    if ablate == "geometric":
        geo = None
    elif obs.descriptor is None or record.descriptor is None:
        geo = False
    else:
        geo = geometric_match(obs.descriptor, record.descriptor, config.qs_min, config.ds_max)
    if ablate == "dimensional" or obs.extents is None:
        dim = None
    else:
        dim = dimensional_match(obs.extents, record.sorted_extents, config.ss_max)
    return MatchFlags(sem, geo, dim)


def select_candidates(flags: Mapping[str, MatchFlags]) -> tuple[int, list[str]]:
    """Highest tier with members and its model ids; tier 0 means every model."""
    if not flags:
        return 0, []
    best = max(f.tier for f in flags.values())
    return best, sorted(k for k, f in flags.items() if f.tier == best)


def prefilter_count(n_observed: int, records, alpha: float = 0.5, beta: float = 5.0) -> list:
    """Records whose 5 mm point count lies strictly inside (alpha, beta) times the observed count."""
    if n_observed <= 0:
        raise InvalidInputError("observed point count must be positive")
    lo, hi = alpha * n_observed, beta * n_observed
    return [r for r in records if lo < r.point_count_5mm < hi]


@dataclass(frozen=True)
class Candidate:
    model_id: str
    tier: int
    fitness: float
    inlier_rmse: float
    method: str
    transform: np.ndarray

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "tier": self.tier, "fitness": self.fitness,
                "inlier_rmse": self.inlier_rmse, "method": self.method, "transform": self.transform.tolist()}


def rank_candidates(group, registrations: Mapping[str, RegistrationResult],
                    tiers: Mapping[str, int] | None = None) -> list[Candidate]:
    """Order by tier, then fitness (both descending), then id."""
    out = []
    for model_id in group:
        reg = registrations.get(model_id)
        if reg is None:
            continue
        tier = 0 if tiers is None else tiers.get(model_id, 0)
        out.append(Candidate(model_id, tier, reg.fitness, reg.inlier_rmse, reg.method, reg.transform))
    out.sort(key=lambda c: (-c.tier, -c.fitness, c.model_id))
    return out


@dataclass
class MatchReport:
    flags: dict
    tier: int | None
    group: list[str]
    ranking: list[Candidate]
    semantic: list[str] | None
    pool: list[str]
    timings: dict
    thresholds: dict
    ablate: str | None = None
    failed: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def registered(self) -> int:
        return len(self.ranking) + len(self.failed)

    def rank_of(self, model_id: str) -> int | None:
        for k, c in enumerate(self.ranking, 1):
            if c.model_id == model_id:
                return k
        return None

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "ablate": self.ablate,
            "tier": self.tier,
            "thresholds": self.thresholds,
            "semantic": self.semantic,
            "pool_size": len(self.pool),
            "models": {k: {"flags": f.to_dict(), "tier": f.tier} for k, f in self.flags.items()},
            "group": self.group,
            "ranking": [c.to_dict() for c in self.ranking],
            "registration_failed": self.failed,
            "timings": self.timings,
            "notes": self.notes,
        }


def _register_all(obs: Observation, records, params: RegistrationParams, jobs: int):
    def one(rec):
        try:
            return rec.id, register(obs.cloud, rec.registration_target(params), params)
        except RegistrationFailedError as exc:
            log.warning("registration against %s failed: %s", rec.id, exc)
            return rec.id, None

    if jobs > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    return {k: v for k, v in results if v is not None}, sorted(k for k, v in results if v is None)


def match(obs: Observation, db, services: Services = Services(), config: MatchConfig = MatchConfig(),
          ablate: str | None = None, jobs: int = 1, dry_run: bool = False) -> MatchReport:
    """Levels, tier selection, registration of the selected group, ranking.

    With ``dry_run`` nothing is registered: the report carries the group
    that would be registered (tier 0 truncated by id instead of by coarse
    fitness) and an empty ranking.
    """
    if ablate is not None and ablate not in ABLATIONS:
        raise InvalidInputError(f"unknown ablation {ablate!r}")
    t0 = time.perf_counter()
    pool = list(db)
    notes = {}
    if config.prefilter and pool:
        if obs.category is not None and services.embeddings is not None:
            keep = set(prefilter_semantic(services.embeddings, obs.category, sorted({r.category.simplified for r in pool}),
                                          config.delta))
            pool = [r for r in pool if r.category.simplified in keep]
        pool = prefilter_count(obs.point_count, pool, config.alpha, config.beta)
    t_pre = time.perf_counter()
    categories = sorted({r.category.simplified for r in pool})
    semantic = None
    if ablate != "semantic" and pool:
        semantic = semantic_match(services.completion, categories, obs.category, services.embeddings, config.delta)
    flags = {r.id: evaluate_levels(obs, r, semantic, config, ablate) for r in pool}
    t_levels = time.perf_counter()
    by_id = {r.id: r for r in pool}
    if ablate == "multilevel":
        tier, group = None, sorted(by_id)
    else:
        tier, group = select_candidates(flags)
        if tier == 0 and len(group) > config.tier0_cap:
            if dry_run:
                group = group[: config.tier0_cap]
            else:
                group = _cap_by_coarse_fitness(obs, [by_id[k] for k in group], config)
            notes["tier0_capped"] = config.tier0_cap
    if dry_run:
        regs, failed = {}, []
        notes["dry_run"] = True
    else:
        regs, failed = _register_all(obs, [by_id[k] for k in group], config.registration, jobs)
    tiers = None if tier is None else {k: flags[k].tier for k in group}
    ranking = rank_candidates(group, regs, tiers)
    t_end = time.perf_counter()
    if obs.truth.get("unoccluded_pixels"):
        notes["occlusion_ratio"] = 1.0 - obs.truth["visible_pixels"] / obs.truth["unoccluded_pixels"]
    timings = {"prefilter": t_pre - t0, "levels": t_levels - t_pre, "registration": t_end - t_levels,
               "total": t_end - t0}
    return MatchReport(flags, tier, group, ranking, None if semantic is None else sorted(semantic),
                       sorted(by_id), timings, config.thresholds(), ablate, failed, notes)


def _cap_by_coarse_fitness(obs: Observation, records, config: MatchConfig) -> list[str]:
    quick = replace(config.registration, icp_max_iter=1, ransac_iters=min(config.registration.ransac_iters, 1000))
    scored = []
    for rec in records:
        try:
            fit = register(obs.cloud, rec.registration_target(config.registration), quick).fitness
        except RegistrationFailedError:
            fit = -1.0
        scored.append((-fit, rec.id))
    scored.sort()
    return sorted(k for _, k in scored[: config.tier0_cap])


def level_scores(obs: Observation, record) -> dict:
    """Raw QS / DS / SS values behind the flags, for reports and debugging."""
    out = {"qs": None, "ds": None, "ss": None}
    if obs.descriptor is not None and record.descriptor is not None:
        out["qs"] = qs(obs.descriptor, record.descriptor)
        out["ds"] = ds(obs.descriptor, record.descriptor)
    if obs.extents is not None:
        out["ss"] = ss(obs.extents, record.sorted_extents)
    return out
