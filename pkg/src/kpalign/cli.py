"""Command-line pipeline runner.

Stages communicate through files in the ``--out`` directory::

    scene.json, scene_depth.eatn, constraints.json, config.json   (gen)
    rollouts/rollout_{i}/...                                      (gen)
    scores.json                                                   (score)
    report.json, lifted.eatn, lifted_visibility.eatn              (select)
    trajectory_init.eatn                                          (retarget)
    trajectory.eatn, trace.csv                                    (optimize)

``pipeline`` runs the five stages in order on the same directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dsl
from .harness import (VARIANTS, ConfigError, EpisodeOutcome, RunConfig, ablate, evaluate_success,
                      generate_batch, load_task, optimization_json)
from .optimize import OptProblem, solve, write_trace_csv
from .retarget import retarget, trajectory_from_tensor, trajectory_to_tensor
from .rollout import load_rollout, rollout_dirs, save_rollout, visual_plausibility
from .selection import KeypointTrajectory, SelectionError, lift_to_3d, select_from_scores
from .tasks import TASK_NAMES
from .tensorio import (DocumentError, ReportDoc, TensorFormatError, constraints_to_json, dumps_report,
                       load_constraints, load_report, load_scene, load_tensor, report_from_json,
                       save_constraints, save_scene, save_tensor)

EXIT_OK, EXIT_USAGE, EXIT_STAGE, EXIT_SELECTION = 0, 1, 2, 3


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, code: int = EXIT_STAGE):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag dest -> RunConfig field
_OVERRIDES = {
    "seed": "seed", "task": "task", "scene": "scene_path", "constraints": "constraints_path",
    "n": "n_rollouts", "rate": "hallucination_rate", "frames": "frames", "epsilon": "epsilon",
    "fallback": "fallback", "max_evaluated": "max_evaluated", "lam": "lam", "iters": "max_iters",
    "restarts": "restarts", "context": "context", "horizon": "horizon", "stride": "stride",
    "latent_dim": "latent_dim", "track_sigma": "track_sigma_px", "depth_sigma": "depth_sigma",
}


def build_config(args) -> RunConfig:
    doc: Dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    for dest, name in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            doc[name] = value
    if getattr(args, "modes", None):
        doc["modes"] = [m.strip() for m in args.modes.split(",") if m.strip()]
    return RunConfig.from_dict(doc)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stage_config(out: Path, args) -> RunConfig:
    """Config written by ``gen`` with any command-line overrides applied."""
    path = out / "config.json"
    if path.exists() and not args.config:
        args.config = str(path)
    return build_config(args)


def _scene_and_constraints(out: Path):
    try:
        scene = load_scene(out / "scene.json")
        cs = dsl.bind(load_constraints(out / "constraints.json"), scene)
    except (DocumentError, OSError) as exc:
        raise StageError("inputs", f"missing or invalid scene/constraints in {out}: {exc}") from None
    return scene, cs


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_rollouts(out: Path):
    root = out / "rollouts"
    if not root.is_dir():
        raise StageError("inputs", f"no rollouts under {root}; run gen first")
    return [load_rollout(d) for d in rollout_dirs(root)]


# ---------------------------------------------------------------------------
# stages


def cmd_gen(cfg: RunConfig, out: Path) -> List[Path]:
    scene, cs = load_task(cfg)
    if cfg.scene_path:
        cfg = replace(cfg, task=scene.task or cfg.task)
    if cfg.task not in TASK_NAMES:
        raise StageError("gen", f"scene task {cfg.task!r} has no motion template")
    scene = replace(scene, depth_path="scene_depth.eatn")
    save_scene(scene, out / "scene.json")
    save_constraints(cs, out / "constraints.json", task=cfg.task)
    saved = cfg.to_dict()
    saved.update(scene_path=None, constraints_path=None)
    _write_json(out / "config.json", saved)
    dirs = []
    for i, v in enumerate(generate_batch(cfg, scene)):
        dirs.append(save_rollout(v, out / "rollouts" / f"rollout_{i}"))
    return dirs


def cmd_score(cfg: RunConfig, out: Path) -> List[float]:
    batch = _load_rollouts(out)
    wm = cfg.world_model()
    scores = [visual_plausibility(v, wm) for v in batch]
    _write_json(out / "scores.json", {"s_vis": scores, "context": cfg.context, "horizon": cfg.horizon,
                                      "stride": cfg.stride, "latent_dim": cfg.latent_dim})
    return scores


def cmd_select(cfg: RunConfig, out: Path) -> ReportDoc:
    scene, cs = _scene_and_constraints(out)
    batch = _load_rollouts(out)
    spath = out / "scores.json"
    s_vis = json.loads(spath.read_text())["s_vis"] if spath.exists() else cmd_score(cfg, out)
    if len(s_vis) != len(batch):
        raise StageError("select", "scores.json does not match the rollout count")

    def spatial(i):
        lifted = lift_to_3d(batch[i], scene)
        return dsl.aggregate_cost(cs, lifted.points), lifted

    try:
        res = select_from_scores(s_vis, spatial, cfg.selection)
    except SelectionError as exc:
        raise StageError("select", str(exc), EXIT_SELECTION) from None
    rec = res.records[res.selected_index]
    lifted = rec.lifted if rec.lifted is not None else lift_to_3d(batch[res.selected_index], scene)
    save_tensor(out / "lifted.eatn", lifted.points)
    save_tensor(out / "lifted_visibility.eatn", lifted.visibility.astype(np.float32))
    report = ReportDoc(records=[r.to_record() for r in res.records], selected_index=res.selected_index,
                       fallback=res.fallback, task=cfg.task)
    if lifted.calibration is not None:
        report.calibration = {"alpha": lifted.calibration.alpha, "beta": lifted.calibration.beta}
    (out / "report.json").write_text(dumps_report(report), encoding="utf-8")
    return report


def _report(out: Path) -> ReportDoc:
    try:
        return load_report(out / "report.json")
    except (DocumentError, OSError) as exc:
        raise StageError("inputs", f"missing or invalid report in {out}: {exc}") from None


def cmd_retarget(cfg: RunConfig, out: Path) -> ReportDoc:
    scene, _ = _scene_and_constraints(out)
    try:
        points = load_tensor(out / "lifted.eatn").astype(float)
        vis = load_tensor(out / "lifted_visibility.eatn") > 0.5
    except (OSError, TensorFormatError) as exc:
        raise StageError("retarget", f"cannot read lifted trajectory: {exc}") from None
    result = retarget(KeypointTrajectory(points, vis), scene)
    save_tensor(out / "trajectory_init.eatn", trajectory_to_tensor(result.initial_trajectory))
    report = _report(out)
    report.retarget = {"residuals": [float(r) for r in result.residuals],
                       "max_residual": float(np.max(result.residuals))}
    report.trajectory = trajectory_to_tensor(result.initial_trajectory).tolist()
    (out / "report.json").write_text(dumps_report(report), encoding="utf-8")
    return report


def cmd_optimize(cfg: RunConfig, out: Path) -> ReportDoc:
    scene, cs = _scene_and_constraints(out)
    try:
        init = trajectory_from_tensor(load_tensor(out / "trajectory_init.eatn"))
    except (OSError, TensorFormatError) as exc:
        raise StageError("optimize", f"cannot read initial trajectory: {exc}") from None
    res = solve(OptProblem(init, cs, scene, lam=cfg.lam, rot_weight=cfg.rot_weight, params=cfg.solver))
    save_tensor(out / "trajectory.eatn", trajectory_to_tensor(res.trajectory))
    write_trace_csv(res, out / "trace.csv")
    report = _report(out)
    report.optimization = optimization_json(res)
    report.trajectory = trajectory_to_tensor(res.trajectory).tolist()
    success, violation = evaluate_success(res.trajectory, cs, scene, cfg.success_threshold, cfg.goal_tolerance)
    mode = None
    if report.selected_index is not None:
        meta = out / "rollouts" / f"rollout_{report.selected_index}" / "meta.json"
        if meta.exists():
            mode = json.loads(meta.read_text()).get("injected_mode")
    failure = None
    if not success:
        failure = "selection_miss" if mode not in (None, "none") else (
            "optimizer_nonconverged" if not res.converged else "constraint_violation")
    outcome = EpisodeOutcome(cfg.task, "plus_opt", 0, success, violation, failure,
                             report.selected_index, mode, report.fallback).to_dict()
    outcome.pop("timing")
    report.outcome = outcome
    (out / "report.json").write_text(dumps_report(report), encoding="utf-8")
    return report


def cmd_pipeline(cfg: RunConfig, out: Path) -> ReportDoc:
    cmd_gen(cfg, out)
    cfg = RunConfig.from_dict(json.loads((out / "config.json").read_text()))
    cmd_score(cfg, out)
    cmd_select(cfg, out)
    cmd_retarget(cfg, out)
    return cmd_optimize(cfg, out)


def cmd_ablate(cfg: RunConfig, out: Path, variants: Sequence[str], episodes: int,
               tasks: Sequence[str], jobs: int = 1):
    table = ablate(cfg, variants, episodes, tasks, jobs)
    _write_json(out / "ablation.json", table.to_json())
    (out / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    return table


def _collect_reports(paths: Sequence[str]) -> List[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob("report.json")))
        else:
            found.append(p)
    return found


def cmd_report(paths: Sequence[str], out: Optional[Path]) -> List[str]:
    """Summarise reports; optionally write records/traces/failures CSVs."""
    files = _collect_reports(paths)
    reports = [(str(f), load_report(f)) for f in files]
    lines = []
    failures: Dict[str, int] = {}
    successes = 0
    for name, r in reports:
        o = r.outcome or {}
        ok = bool(o.get("success"))
        successes += ok
        if not ok and o:
            cat = o.get("failure") or "constraint_violation"
            failures[cat] = failures.get(cat, 0) + 1
        lines.append(f"{name}: task={r.task} selected={r.selected_index} fallback={r.fallback} "
                     f"success={int(ok)} violation={o.get('violation')}")
    if reports:
        lines.append(f"total={len(reports)} success={successes}")
        nfail = sum(failures.values())
        for cat, k in sorted(failures.items()):
            lines.append(f"failure {cat}: {k} ({100.0 * k / nfail:.1f}%)")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "records.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["report", "index", "s_vis", "s_spatial", "accepted"])
            for name, r in reports:
                for rec in r.records:
                    w.writerow([name, rec["index"], rec["s_vis"], rec.get("s_spatial", ""), rec["accepted"]])
        with open(out / "traces.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["report", "iteration", "objective", "max_violation"])
            for name, r in reports:
                for row in (r.optimization or {}).get("trace", []):
                    w.writerow([name, row["iteration"], row["objective"], row["max_violation"]])
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "count", "percent"])
            nfail = sum(failures.values())
            for cat, k in sorted(failures.items()):
                w.writerow([cat, k, f"{100.0 * k / nfail:.2f}"])
    return lines


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--task", choices=TASK_NAMES)
    g.add_argument("--scene", help="scene JSON path")
    g.add_argument("--constraints", help="constraint-set JSON path")
    g.add_argument("--n", type=int, help="rollouts per batch")
    g.add_argument("--rate", type=float, help="hallucination rate in [0, 1]")
    g.add_argument("--modes", help="comma-separated hallucination mode mix")
    g.add_argument("--frames", type=int)
    g.add_argument("--track-sigma", type=float, dest="track_sigma")
    g.add_argument("--depth-sigma", type=float, dest="depth_sigma")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--fallback", choices=("best_spatial", "error"))
    g.add_argument("--max-evaluated", type=int, dest="max_evaluated")
    g.add_argument("--lambda", type=float, dest="lam")
    g.add_argument("--iters", type=int)
    g.add_argument("--restarts", type=int)
    g.add_argument("--context", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--stride", type=int)
    g.add_argument("--latent-dim", type=int, dest="latent_dim")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="kpalign_out")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--config", default=None, help="JSON run configuration")
    parser = _Parser(prog="kpalign",
                     description="Constraint-guided rollout selection, retargeting and trajectory refinement.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("gen", "generate a rollout batch"), ("score", "visual plausibility scores"),
                        ("select", "lazy constraint-checked selection"), ("retarget", "end-effector poses"),
                        ("optimize", "refine the trajectory"), ("pipeline", "all five stages")):
        sp = sub.add_parser(name, help=help_, parents=[common])
        _add_run_flags(sp)
    ab = sub.add_parser("ablate", help="variant ablation over task archetypes", parents=[common])
    _add_run_flags(ab)
    ab.add_argument("--variants", default=",".join(VARIANTS))
    ab.add_argument("--episodes", type=int, default=100)
    ab.add_argument("--tasks", default=",".join(TASK_NAMES))
    rp = sub.add_parser("report", help="summarise report files", parents=[common])
    rp.add_argument("paths", nargs="*")
    rp.add_argument("--csv", action="store_true", help="write CSVs into --out")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            for line in cmd_report(args.paths, Path(args.out) if args.csv else None):
                print(line)
            return EXIT_OK
        out = _out(args)
        if args.command in ("gen", "pipeline", "ablate"):
            cfg = build_config(args)
        else:
            cfg = _stage_config(out, args)
        if args.command == "gen":
            dirs = cmd_gen(cfg, out)
            print(f"wrote {len(dirs)} rollouts to {out / 'rollouts'}")
        elif args.command == "score":
            for i, s in enumerate(cmd_score(cfg, out)):
                print(f"rollout_{i}: s_vis={s:.6g}")
        elif args.command == "select":
            rep = cmd_select(cfg, out)
            print(f"selected rollout_{rep.selected_index}" + (" (fallback)" if rep.fallback else ""))
        elif args.command == "retarget":
            rep = cmd_retarget(cfg, out)
            print(f"retargeted {len(rep.trajectory)} frames, max residual {rep.retarget['max_residual']:.3g} m")
        elif args.command in ("optimize", "pipeline"):
            rep = (cmd_optimize if args.command == "optimize" else cmd_pipeline)(cfg, out)
            o = rep.outcome
            print(f"success={int(o['success'])} violation={o['violation']:.3g} report={out / 'report.json'}")
        elif args.command == "ablate":
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
            bad = [t for t in tasks if t not in TASK_NAMES]
            if bad:
                raise ConfigError(f"unknown tasks {bad}")
            table = cmd_ablate(cfg, out, variants, args.episodes, tasks, args.jobs)
            sys.stdout.write(table.to_csv())
        return EXIT_OK
    except ConfigError as exc:
        print(f"kpalign: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"kpalign: error {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, ArithmeticError, OSError, KeyError) as exc:
        print(f"kpalign: error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
