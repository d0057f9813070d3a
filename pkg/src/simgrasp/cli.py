"""Command-line entry point: build-db, match, plan, eval, make-fixtures.

Reports go to stdout as JSON, logs to stderr. Exit codes: 0 success,
1 usage or IO error, 2 no feasible grasp.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import fixtures
from .descriptor import DescriptorParams
from .errors import NoFeasibleGraspError, SimGraspError
from .evaluation import format_table, load_suite, observe_suite, run_match_suite
from .grasping import FineTuneParams, GraspVerdict
from .planner import PlanConfig, plan
from .registration import RegistrationParams
from .scene import load_scene, read_obj, write_obj
from .selection import ABLATIONS, MatchConfig, Services, observe_scene, match
from .semantic import (ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL, EmbeddingTable, HttpCompletionService,
                       StubCompletionService, load_stub_table)
from .store import Database, IngestParams, canonical_json, ingest_model, load_database, save_database

log = logging.getLogger("simgrasp")

EXIT_OK, EXIT_USAGE, EXIT_NO_GRASP = 0, 1, 2


class UsageError(Exception):
    pass


# Every tunable: (flag, section, field, meaning). Defaults come from the
# dataclasses so the help text cannot drift from the code.
TUNABLES = [
    ("--qs-min", "match", "qs_min", "geometric level: minimum quantity similarity"),
    ("--ds-max", "match", "ds_max", "geometric level: maximum distribution distance"),
    ("--ss-max", "match", "ss_max", "dimensional level: maximum sorted-extent distance (m)"),
    ("--delta", "match", "delta", "embedding fallback and pre-filter: kept fraction of categories"),
    ("--alpha", "match", "alpha", "pre-filter: lower point-count ratio"),
    ("--beta", "match", "beta", "pre-filter: upper point-count ratio"),
    ("--count-voxel", "match", "count_voxel", "voxel size for point counts (m)"),
    ("--tier0-cap", "match", "tier0_cap", "models registered when no level matches"),
    ("--sample-voxel", "descriptor", "sample_voxel", "descriptor sample grid (m)"),
    ("--fpfh-radius", "descriptor", "fpfh_radius", "FPFH support radius (m)"),
    ("--cluster-radius", "descriptor", "cluster_radius", "descriptor cluster linking radius (m)"),
    ("--normal-angle-max", "descriptor", "normal_angle_max", "descriptor cluster normal gate (deg)"),
    ("--reg-voxel", "registration", "voxel", "registration downsampling voxel (m)"),
    ("--plane-dist-tol", "registration", "plane_dist_tol", "plane growth distance tolerance (m)"),
    ("--plane-min-inliers", "registration", "plane_min_inliers", "minimum points per plane"),
    ("--sweep-steps", "registration", "sweep_steps", "plane-alignment rotations about the normal"),
    ("--icp-corr-dist", "registration", "icp_corr_dist", "ICP correspondence cutoff and fitness radius (m)"),
    ("--icp-max-iter", "registration", "icp_max_iter", "ICP iteration cap"),
    ("--ransac-iters", "registration", "ransac_iters", "RANSAC fallback hypotheses"),
    ("--ransac-seed", "registration", "ransac_seed", "RANSAC fallback seed"),
    ("--stable-deg", "finetune", "stable_deg", "contact angle below which a grasp is Stable (deg)"),
    ("--discard-deg", "finetune", "discard_deg", "contact angle above which a grasp is Unstable (deg)"),
    ("--flat-deg", "finetune", "flat_deg", "flatness check for fine-tuning neighbors (deg)"),
    ("--k1", "finetune", "k1", "neighbors searched around the steep contact"),
    ("--k2", "finetune", "k2", "flatness neighbors per candidate point"),
]

_SECTIONS = {"match": MatchConfig, "descriptor": DescriptorParams, "registration": RegistrationParams,
             "finetune": FineTuneParams}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


@dataclass(frozen=True)
class RunConfig:
    """All tunables of one command invocation, validated on construction."""

    match: MatchConfig = field(default_factory=MatchConfig)
    finetune: FineTuneParams = field(default_factory=FineTuneParams)
    contact_voxel: float = 0.005
    jobs: int = 1

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        values = {name: {} for name in _SECTIONS}
        for flag, section, name, _ in TUNABLES:
            values[section][name] = getattr(args, _dest(flag))
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if args.contact_voxel < 0:
            raise UsageError("--contact-voxel must be >= 0")
        try:
            descriptor = DescriptorParams(**{**dataclasses.asdict(DescriptorParams()), **values["descriptor"]})
            registration = RegistrationParams(**{**dataclasses.asdict(RegistrationParams()), **values["registration"]})
            mc = MatchConfig(**values["match"], prefilter=args.prefilter, registration=registration,
                             descriptor=descriptor)
            ft = FineTuneParams(**values["finetune"])
        except (SimGraspError, ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from exc
        return cls(mc, ft, args.contact_voxel, args.jobs)

    def plan_config(self, finetune: bool = True) -> PlanConfig:
        return PlanConfig(finetune=finetune, finetune_params=self.finetune, contact_voxel=self.contact_voxel or None)

    def to_dict(self) -> dict:
        return {"match": self.match.thresholds(), "finetune": dataclasses.asdict(self.finetune),
                "registration": dataclasses.asdict(self.match.registration),
                "descriptor": self.match.descriptor.to_dict(), "contact_voxel": self.contact_voxel,
                "jobs": self.jobs}


# ------------------------------------------------------------- services

def make_services(args) -> Services:
    """Completion client (HTTP when configured, else the offline stub) and optional embeddings."""
    embeddings = EmbeddingTable.load(args.embeddings) if args.embeddings else None
    mode = args.semantic
    if mode == "auto":
        mode = "http" if os.environ.get(ENV_ENDPOINT) else "stub"
    if mode == "none":
        client = None
    elif mode == "http":
        client = HttpCompletionService.from_env()
    else:
        table = load_stub_table(args.stub_table) if args.stub_table else fixtures.stub_table()
        client = StubCompletionService(table)
    return Services(client, embeddings)


def _open_db(path) -> Database:
    db = load_database(path)
    if not len(db):
        log.warning("database %s is empty", path)
    return db


def _emit(obj) -> None:
    sys.stdout.write(canonical_json(obj))


# ------------------------------------------------------------- commands

def cmd_build_db(args, cfg: RunConfig) -> int:
    mesh_dir, out = Path(args.mesh_dir), Path(args.out_dir)
    if not mesh_dir.is_dir():
        raise UsageError(f"{mesh_dir}: not a directory")
    try:
        categories = json.loads(Path(args.categories).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{args.categories}: cannot read categories: {exc}") from exc
    meshes = sorted(mesh_dir.glob("*.obj"))
    if not meshes:
        raise UsageError(f"{mesh_dir}: no .obj meshes")
    missing = [p.stem for p in meshes if p.stem not in categories]
    if missing:
        raise UsageError(f"{args.categories}: no category for {', '.join(missing)}")
    params = IngestParams(surface_spacing=args.surface_spacing, descriptor=cfg.match.descriptor,
                          grasp_count=args.grasp_count, sample_grasps=not args.no_grasps)

    def one(path: Path):
        t0 = time.perf_counter()
        rec = ingest_model(read_obj(path), path.stem, categories[path.stem], params,
                           source_info={"mesh": path.name})
        log.info("ingested %s in %.1f s", path.stem, time.perf_counter() - t0)
        return rec

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        records = list(pool.map(one, meshes))
    db = Database(records, params)
    save_database(db, out)
    rows = [{"model_id": r.id, "category": r.category.simplified, "point_count_5mm": r.point_count_5mm,
             "sorted_extents": list(r.sorted_extents.values), "grasps": len(r.grasps), "flags": list(r.flags)}
            for r in db]
    _emit({"version": 1, "out_dir": str(out), "records": len(rows), "models": rows})
    flagged = [r["model_id"] for r in rows if set(r["flags"]) - {"grasps-not-sampled"}]
    if args.strict and flagged:
        log.error("flagged models: %s", ", ".join(flagged))
        return EXIT_USAGE
    return EXIT_OK


def cmd_match(args, cfg: RunConfig) -> int:
    db = _open_db(args.db)
    obs = observe_scene(load_scene(args.scene), cfg.match)
    report = match(obs, db, make_services(args), cfg.match, args.ablate, cfg.jobs, args.dry_run)
    out = report.to_dict()
    out["truth"] = obs.truth.get("model_id")
    out["truth_rank"] = report.rank_of(out["truth"]) if out["truth"] else None
    _emit(out)
    return EXIT_OK


def cmd_plan(args, cfg: RunConfig) -> int:
    db = _open_db(args.db)
    obs = observe_scene(load_scene(args.scene), cfg.match)
    try:
        report = plan(obs, db, make_services(args), cfg.match, cfg.plan_config(not args.no_finetune),
                      args.ablate, cfg.jobs)
    except NoFeasibleGraspError as exc:
        if exc.report is not None:
            _emit(exc.report.to_dict())
        log.error("%s", exc)
        return EXIT_NO_GRASP
    _emit(report.to_dict())
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    try:
        suite = load_suite(args.suite)
    except SimGraspError as exc:
        raise UsageError(str(exc)) from exc
    db = _open_db(args.db)
    services = make_services(args)
    observations = observe_suite(suite["scenes"], cfg.match, suite["base_dir"])
    result = run_match_suite(observations, db, services, cfg.match, args.ablate, cfg.jobs)
    summary = result.to_dict(tuple(suite["tops"]))
    summary["version"] = 1
    summary["verdict_rates"] = None
    if args.plan:
        verdicts = Counter()
        for obs in observations:
            try:
                rep = plan(obs, db, services, cfg.match, cfg.plan_config(not args.no_finetune), args.ablate, cfg.jobs)
                verdicts[rep.verdict.value] += 1
            except NoFeasibleGraspError:
                verdicts["none"] += 1
        keys = [v.value for v in GraspVerdict] + ["none"]
        summary["verdict_rates"] = {k: verdicts[k] / len(observations) for k in keys}
    if args.format == "text":
        sys.stdout.write(format_table(summary) + "\n")
    else:
        _emit(summary)
        log.info("\n%s", format_table(summary))
    return EXIT_OK


def cmd_make_fixtures(args, cfg: RunConfig) -> int:
    """Write the procedural catalog as meshes plus a categories file, the
    offline stub table, embeddings and a matching suite."""
    from .scene import make_mesh

    out = Path(args.out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "scenes").mkdir(exist_ok=True)
    categories = {}
    for model_id, raw, spec in fixtures.CATALOG:
        write_obj(make_mesh(spec), out / "meshes" / f"{model_id}.obj")
        categories[model_id] = raw
    (out / "categories.json").write_text(canonical_json(categories))
    (out / "stub_table.json").write_text(canonical_json(fixtures.stub_table()))
    fixtures.write_glove(fixtures.synthetic_embeddings(), out / "embeddings.txt")
    spec = fixtures.SuiteSpec(occlusion=(0.3, 0.5) if args.occluded else None)
    names = []
    for k, scene in enumerate(fixtures.suite_scenes(spec)):
        name = f"scenes/{k:03d}_{scene['model_id']}.json"
        (out / name).write_text(canonical_json(scene))
        names.append(name)
    (out / "suite.json").write_text(canonical_json({"version": 1, "tops": [1, 2, 5], "scenes": names}))
    _emit({"version": 1, "out_dir": str(out), "meshes": len(categories), "scenes": len(names)})
    return EXIT_OK


# --------------------------------------------------------------- parser

def _add_tunables(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tunables")
    for flag, section, name, meaning in TUNABLES:
        default = getattr(_SECTIONS[section](), name)
        g.add_argument(flag, dest=_dest(flag), type=type(default), default=default, help=meaning)
    g.add_argument("--contact-voxel", type=float, default=PlanConfig().contact_voxel,
                   help="grid for grasp contacts and fine-tuning (m); 0 uses every point")
    g.add_argument("--prefilter", action="store_true",
                   help="enable embedding and point-count pre-filters for large databases")


def _add_services(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("semantic services")
    g.add_argument("--semantic", choices=["auto", "stub", "http", "none"], default="auto",
                   help=f"completion client; auto uses http when {ENV_ENDPOINT} is set, else the offline stub")
    g.add_argument("--stub-table", help="JSON table for the offline stub (default: built-in fixture table)")
    g.add_argument("--embeddings", help="GloVe-style text file used when the completion service fails")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="simgrasp", formatter_class=fmt,
        description="Similar-model matching and grasp transfer on depth observations.",
        epilog=f"environment: {ENV_ENDPOINT} (completion endpoint URL), {ENV_API_KEY} (bearer token), "
               f"{ENV_MODEL} (model name). Exit codes: 0 ok, 1 usage or IO error, 2 no feasible grasp.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--jobs", type=int, default=1, help="worker cap; output order does not depend on it")
        _add_tunables(p)
        return p

    p = command("build-db", cmd_build_db, "ingest a directory of .obj meshes into a model database")
    p.add_argument("mesh_dir")
    p.add_argument("categories", help="JSON object mapping mesh stem to raw category")
    p.add_argument("out_dir")
    p.add_argument("--strict", action="store_true", help="exit 1 when any model is flagged")
    p.add_argument("--surface-spacing", type=float, default=IngestParams().surface_spacing,
                   help="mesh surface sampling spacing (m)")
    p.add_argument("--grasp-count", type=int, default=IngestParams().grasp_count, help="grasps sampled per model")
    p.add_argument("--no-grasps", action="store_true", help="skip grasp sampling")

    for name, func, text in (("match", cmd_match, "rank database models for an observed scene"),
                             ("plan", cmd_plan, "match, transfer grasps and fine-tune")):
        p = command(name, func, text)
        p.add_argument("scene", help="scene JSON file")
        p.add_argument("db", help="database directory")
        p.add_argument("--ablate", choices=sorted(ABLATIONS), help="disable one matching level")
        _add_services(p)
    sub.choices["match"].add_argument("--dry-run", action="store_true",
                                      help="report the registration group without registering")
    sub.choices["plan"].add_argument("--no-finetune", action="store_true", help="skip grasp fine-tuning")

    p = command("eval", cmd_eval, "matching accuracy and timings over a scene suite")
    p.add_argument("suite", help="suite config JSON")
    p.add_argument("db", help="database directory")
    p.add_argument("--ablate", choices=sorted(ABLATIONS), help="disable one matching level")
    p.add_argument("--plan", action="store_true", help="also plan grasps and report verdict rates")
    p.add_argument("--no-finetune", action="store_true", help="skip fine-tuning when planning")
    p.add_argument("--format", choices=["json", "text"], default="json", help="report format on stdout")
    _add_services(p)

    p = command("make-fixtures", cmd_make_fixtures, "write the procedural catalog and a scene suite")
    p.add_argument("out_dir")
    p.add_argument("--occluded", action="store_true", help="side occluders covering 30 to 50 percent")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)])
    try:
        cfg = RunConfig.from_args(args)
        return args.func(args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (OSError, SimGraspError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
