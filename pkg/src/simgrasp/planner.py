"""End-to-end grasp planning from an observation and a model database."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cloud import PointCloud, SpatialIndex, voxel_downsample
from .errors import FinetuneFailedError, NoFeasibleGraspError
from .grasping import (FineTuneParams, Grasp, GraspVerdict, GripperModel, SupportPlane, WorkspaceReach,
                       evaluate_grasp, feasibility, finetune_center, finetune_position, transfer_grasps)
from .selection import MatchConfig, MatchReport, Observation, Services, match


@dataclass(frozen=True)
class PlanConfig:
    finetune: bool = True
    finetune_params: FineTuneParams = field(default_factory=FineTuneParams)
    gripper: GripperModel = field(default_factory=GripperModel)
    reachability: Callable | None = field(default_factory=WorkspaceReach)
    # contacts and fine-tuning use the observation on this grid; collisions use every point
    contact_voxel: float | None = 0.005

    def contact_cloud(self, cloud: PointCloud) -> PointCloud:
        return cloud if not self.contact_voxel else voxel_downsample(cloud, self.contact_voxel)


@dataclass
class PlanReport:
    grasp: Grasp | None
    verdict: GraspVerdict | None
    match: MatchReport
    trail: list = field(default_factory=list)
    histogram: Counter = field(default_factory=Counter)
    timings: dict = field(default_factory=dict)
    theta: list | None = None

    @property
    def source_model(self) -> str | None:
        return None if self.grasp is None else self.grasp.source_model

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "status": "ok" if self.grasp is not None else "no-feasible-grasp",
            "grasp": None if self.grasp is None else self.grasp.to_dict(),
            "verdict": None if self.verdict is None else self.verdict.value,
            "theta_deg": self.theta,
            "candidates": [{"model_id": c.model_id, "tier": c.tier, "fitness": c.fitness}
                           for c in self.match.ranking],
            "verdict_histogram": {k: self.histogram.get(k, 0) for k in [v.value for v in GraspVerdict]},
            "trail": self.trail,
            "timings": self.timings,
        }


def support_plane(obs: Observation) -> SupportPlane | None:
    if obs.support_normal is None:
        return None
    point = obs.support_point
    if point is None:
        # fall back to the lowest observed point along the normal
        h = obs.cloud.points @ obs.support_normal
        point = obs.cloud.points[int(np.argmin(h))]
    return SupportPlane(np.asarray(point, float), np.asarray(obs.support_normal, float))


def resolve_grasp(grasp: Grasp, obs: Observation, config: PlanConfig, support: SupportPlane | None,
                  contacts: PointCloud | None = None, index: SpatialIndex | None = None):
    """Classify one feasible grasp and fine-tune it when allowed.

    ``contacts`` is the cloud used for contacts and fine-tuning (by default
    the observation on the configured contact grid); collision re-checks
    use the full observation. Returns (final grasp or None, verdict, trail
    entries, last outcome). The grasp is non-None only for Stable results
    and for Potential grasps.
    """
    gripper, params = config.gripper, config.finetune_params
    P = obs.cloud
    C = contacts if contacts is not None else config.contact_cloud(P)
    events = []
    out = evaluate_grasp(grasp, C, gripper, params)
    events.append({"stage": "classify", "verdict": out.verdict.value, "theta": out.theta.tolist()})
    if out.verdict is GraspVerdict.POTENTIAL:
        return grasp, GraspVerdict.POTENTIAL, events, out
    if out.verdict is GraspVerdict.UNSTABLE:
        return None, GraspVerdict.UNSTABLE, events, out
    if out.verdict is GraspVerdict.TUNABLE:
        if not config.finetune:
            return None, GraspVerdict.TUNABLE, events, out
        ref = int(out.contacts[int(np.argmax(out.theta))])
        try:
            out = finetune_position(grasp, ref, C, params, gripper, index)
        except FinetuneFailedError:
            events.append({"stage": "finetune_position", "result": "failed"})
            return None, GraspVerdict.TUNABLE, events, out
        events.append({"stage": "finetune_position", "verdict": out.verdict.value, "theta": out.theta.tolist()})
        if out.verdict is not GraspVerdict.STABLE:
            return None, out.verdict, events, out
        if feasibility(out.grasp, P, gripper, support, config.reachability) is not None:
            events.append({"stage": "recheck", "result": "infeasible"})
            return None, GraspVerdict.TUNABLE, events, out
    stable = out
    if config.finetune and obs.sobb is not None:
        pair = C.points[stable.contacts] if len(stable.contacts) == 2 else None
        centered = finetune_center(stable.grasp, obs.sobb, pair)
        again = evaluate_grasp(centered, C, gripper, params)
        ok = again.verdict is GraspVerdict.STABLE and \
            feasibility(centered, P, gripper, support, config.reachability) is None
        events.append({"stage": "finetune_center", "verdict": again.verdict.value, "kept": bool(ok)})
        if ok:
            stable = again
    return stable.grasp, GraspVerdict.STABLE, events, stable


def plan(obs: Observation, db, services: Services = Services(), match_config: MatchConfig = MatchConfig(),
         config: PlanConfig = PlanConfig(), ablate: str | None = None, jobs: int = 1) -> PlanReport:
    """Match, then walk candidates by fitness and return the first Stable grasp.

    Potential grasps are held back and returned only when no candidate
    yields a Stable one. Raises NoFeasibleGraspError (with the report
    attached) when nothing usable is found.
    """
    t0 = time.perf_counter()
    report = match(obs, db, services, match_config, ablate, jobs)
    t_match = time.perf_counter()
    P = obs.cloud
    C = config.contact_cloud(P)
    index = SpatialIndex(C.points)
    support = support_plane(obs)
    result = PlanReport(None, None, report)
    potential = None
    for cand in report.ranking:
        record = db[cand.model_id]
        grasps = transfer_grasps(record.grasps, cand.transform, source_model=record.id)
        reasons = Counter()
        feasible = []
        for g in grasps:
            why = feasibility(g, P, config.gripper, support, config.reachability)
            if why is None:
                feasible.append(g)
            else:
                reasons[why] += 1
        result.trail.append({"stage": "candidate", "model_id": record.id, "fitness": cand.fitness,
                             "transferred": len(grasps), "feasible": len(feasible), "rejected": dict(reasons)})
        for g in feasible:
            final, verdict, events, out = resolve_grasp(g, obs, config, support, C, index)
            result.histogram[verdict.value] += 1
            if verdict is GraspVerdict.STABLE:
                result.trail.extend(events)
                result.grasp, result.verdict = final, verdict
                result.theta = out.theta.tolist()
                result.timings = {"match": t_match - t0, "grasp": time.perf_counter() - t_match,
                                  "total": time.perf_counter() - t0}
                return result
            if verdict is GraspVerdict.POTENTIAL and potential is None:
                potential = final
    result.timings = {"match": t_match - t0, "grasp": time.perf_counter() - t_match,
                      "total": time.perf_counter() - t0}
    if potential is not None:
        result.grasp, result.verdict = potential, GraspVerdict.POTENTIAL
        result.trail.append({"stage": "fallback", "verdict": "Potential"})
        return result
    raise NoFeasibleGraspError("no feasible grasp among the candidates", report=result)
