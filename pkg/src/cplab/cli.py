"""Command-line entry point: ``cplab <subcommand> [options]``.

Every subcommand reads an optional INI config (``--config``), applies
``--set section.key=value`` overrides, logs the seed and config digest, and
writes ``report.json`` (deterministic) plus ``timing.json`` under ``--out``.
Values in the INI file are parsed as JSON when possible (numbers, booleans,
lists, null) and taken as plain strings otherwise.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import BUDGET_GRID, AttackConfig, AttackType
from .baseline import BaselineConfig, consensus_baseline
from .bench import GRADIENT_TYPES, fps_benchmark, leave_one_out
from .benchgen import AttackSettings, GenConfig, ShardFormatError, compute_stats, generate_dataset, read_shards
from .checkpoint import CheckpointError
from .cpsim import DetectorConfig, DetectorModel, DetectorTrainConfig, SceneConfig, ViewConfig
from .experiments import attack_ap, eval_frames, train_default_detector
from .guard import GuardConfig, GuardModel, defend, embedding_distances, evaluate, train_guard
from .metrics import MetricsReport

log = logging.getLogger("cplab")


class UsageError(Exception):
    """Bad input from the user: reported as a one-line diagnostic, exit status 2."""


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    train_scenes: int = 200
    eval_frames: int = 100
    agents: int = 4


@dataclasses.dataclass(frozen=True)
class BenchConfig:
    collaborators: int = 5
    frames: int = 30
    warmup: int = 5
    repetitions: int = 5


SECTIONS = {
    "run": RunConfig,
    "detector": DetectorTrainConfig,
    "model": DetectorConfig,
    "scene": SceneConfig,
    "view": ViewConfig,
    "data": GenConfig,
    "attack": AttackSettings,
    "guard": GuardConfig,
    "baseline": BaselineConfig,
    "bench": BenchConfig,
}
_NESTED = {"detector", "view", "scene", "attack"}


def _parse_value(text: str):
    try:
        v = json.loads(text)
    except json.JSONDecodeError:
        return text
    return tuple(v) if isinstance(v, list) else v


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Resolve every section to a dataclass instance."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)
    raw = {s: {} for s in SECTIONS}
    for section in cp.sections():
        if section not in SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
        fields = {f.name for f in dataclasses.fields(SECTIONS[section])} - _NESTED
        for k, v in cp.items(section):
            if k not in fields:
                raise UsageError(f"unknown key {k!r} in section [{section}]")
            raw[section][k] = _parse_value(v)
    if "seed" not in raw["run"] and os.environ.get("CPLAB_SEED"):
        try:
            raw["run"]["seed"] = int(os.environ["CPLAB_SEED"])
        except ValueError as exc:
            raise UsageError("CPLAB_SEED must be an integer") from exc
    try:
        flat = {s: SECTIONS[s](**raw[s]) for s in ("run", "model", "scene", "view", "attack",
                                                   "guard", "baseline", "bench")}
        flat["detector"] = DetectorTrainConfig(**raw["detector"], detector=flat["model"],
                                               view=flat["view"])
        flat["data"] = GenConfig(**raw["data"], scene=flat["scene"], view=flat["view"],
                                 attack=flat["attack"])
        flat["data"].validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return flat


def config_digest(cfg: dict) -> str:
    blob = json.dumps({k: dataclasses.asdict(v) for k, v in sorted(cfg.items())},
                      sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output helpers


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if x is None else (f"{x:.6f}" if isinstance(x, float) else x) for x in r])


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "cplab"
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_detector(path) -> DetectorModel:
    return DetectorModel.load(_require(path, "detector checkpoint")).freeze()


def _load_guard(path) -> GuardModel:
    return GuardModel.load(_require(path, "guard checkpoint"))


def _load_data(path):
    return read_shards(_require(path, "dataset directory"))


# ---------------------------------------------------------------------------
# subcommands; each returns (MetricsReport, timing dict)


def cmd_train_detector(args, cfg, out: Path):
    run = cfg["run"]
    model = train_default_detector(dataclasses.replace(cfg["detector"], seed=run.seed),
                                   run.train_scenes, cfg["scene"])
    model.save(out / "detector.ckpt")
    frames = eval_frames(model, run.eval_frames, run.agents, run.seed, cfg["scene"], cfg["view"])
    res = attack_ap(model, frames, None)
    rep = MetricsReport(ap_050=res.clean["ap_050"], ap_070=res.clean["ap_070"],
                        extra={"loss_history": [round(x, 6) for x in model.history]})
    return rep, {}


def cmd_gen_data(args, cfg, out: Path):
    model = _load_detector(args.detector)
    target = Path(args.data) if args.data else out / "data"
    ds = generate_dataset(model, cfg["data"], cfg["run"].seed, target)
    return MetricsReport(extra={"dataset": str(target.name), "records": len(ds),
                                "splits": ds.manifest.splits, "stats": ds.manifest.stats}), {}


def cmd_stats(args, cfg, out: Path):
    ds = _load_data(args.data)
    stats = compute_stats(ds)
    for line in stats.lines():
        print(line)
    return MetricsReport(config_digest=ds.manifest.config_digest, extra={"stats": stats.to_dict()}), {}


def _per_attack_table(ev, threshold) -> dict:
    names = {0: "none", **{int(t): t.name for t in AttackType}}
    return {names[k]: v.rates() for k, v in ev.per_attack(threshold).items()}


def cmd_train_guard(args, cfg, out: Path):
    ds = _load_data(args.data)
    gc = cfg["guard"]
    model = train_guard(ds, gc, cfg["run"].seed)
    model.save(out / "guard.ckpt")
    ev = evaluate(model, ds, "test")
    rep = MetricsReport.from_counts(ev.counts, config_digest=ds.manifest.config_digest,
                                    per_attack=_per_attack_table(ev, gc.threshold))
    rep.extra["history"] = [{k: round(v, 6) if isinstance(v, float) else v for k, v in h.items()}
                            for h in model.history]
    return rep, {}


def cmd_eval(args, cfg, out: Path):
    model = _load_guard(args.guard)
    ds = _load_data(args.data)
    ev = evaluate(model, ds, "test")
    rep = MetricsReport.from_counts(ev.counts, config_digest=ds.manifest.config_digest,
                                    per_attack=_per_attack_table(ev, model.config.threshold))
    dist = embedding_distances(ev.embeddings, ev.labels)
    rep.extra["embedding_distance"] = {"positive": dist["positive"], "negative": dist["negative"]}
    rows = [[k, v["accuracy"], v["tpr"], v["fpr"]] for k, v in sorted(rep.per_attack.items())]
    _write_csv(out / "per_attack.csv", ["attack", "accuracy", "tpr", "fpr"], rows)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("positive", "negative"):
        if dist[f"{key}_values"].size:
            ax.hist(dist[f"{key}_values"], bins=40, alpha=0.6, label=f"{key} pairs")
    ax.set_xlabel("cosine distance")
    ax.set_ylabel("pairs")
    ax.legend()
    _save_svg(fig, out / "embedding_distance.svg")
    if args.detector:
        det = _load_detector(args.detector)
        run = cfg["run"]
        frames = eval_frames(det, run.eval_frames, run.agents, run.seed, cfg["scene"], cfg["view"])
        atk = AttackConfig(AttackType.PGD, args.budget, **dataclasses.asdict(cfg["attack"]))
        res = attack_ap(det, frames, atk, run.seed, guard=model)
        rep.ap_050, rep.ap_070 = res.defended["ap_050"], res.defended["ap_070"]
        rep.extra["ap"] = {"clean": res.clean, "attacked": res.attacked, "defended": res.defended,
                           "budget": args.budget}
    return rep, {}


def cmd_attack(args, cfg, out: Path):
    det = _load_detector(args.detector)
    run = cfg["run"]
    frames = eval_frames(det, run.eval_frames, run.agents, run.seed, cfg["scene"], cfg["view"])
    base = dataclasses.asdict(cfg["attack"])
    budgets = [float(b) for b in args.budgets.split(",")] if args.budgets else list(BUDGET_GRID)
    table, rows, clean = {}, [], None
    for flip in (False, True):
        base["sign_flip"] = flip
        direction = "minimise" if flip else "as_written"
        for t in AttackType:
            for b in budgets:
                res = attack_ap(det, frames, AttackConfig(t, b, **base), run.seed)
                clean = res.clean
                table.setdefault(direction, {}).setdefault(t.name, {})[str(b)] = res.attacked
                rows.append([direction, t.name, b, res.attacked["ap_050"], res.attacked["ap_070"]])
    _write_csv(out / "attack_ap.csv", ["direction", "attack", "budget", "ap_050", "ap_070"], rows)
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for ax, direction in zip(axes, ("as_written", "minimise")):
        for t in AttackType:
            ys = [table[direction][t.name][str(b)]["ap_050"] for b in budgets]
            ax.plot(budgets, ys, marker="o", label=t.name)
        ax.axhline(clean["ap_050"], color="k", ls="--", lw=0.8, label="clean")
        ax.set_title(direction)
        ax.set_xlabel("budget")
    axes[0].set_ylabel("AP@0.5")
    axes[1].legend(fontsize=7)
    _save_svg(fig, out / "ap_vs_budget.svg")
    rep = MetricsReport(ap_050=clean["ap_050"], ap_070=clean["ap_070"], per_attack=table)
    return rep, {}


def _frame_states(det, cfg, n_collab: int, count: int):
    from .attacks import CollabState
    run = cfg["run"]
    frames = eval_frames(det, count, n_collab + 1, run.seed, cfg["scene"], cfg["view"])
    return [CollabState.from_frame(f, det).features for f in frames]


def cmd_bench_fps(args, cfg, out: Path):
    det = _load_detector(args.detector)
    guard = _load_guard(args.guard)
    bc = cfg["bench"]
    feats = _frame_states(det, cfg, bc.collaborators, bc.frames)
    counts = {"guard": Counter(), "baseline": Counter()}

    def run_guard(f, c=None):
        return defend(f[0], f[1:], guard, det, counter=c)

    def run_base(f, c=None):
        return consensus_baseline(f[0], f[1:], det, cfg["baseline"], seed=cfg["run"].seed, counter=c)

    hyp = 0
    for f in feats:
        run_guard(f, counts["guard"])
        hyp += run_base(f, counts["baseline"]).attempts
    g = fps_benchmark(run_guard, feats, bc.warmup, bc.repetitions)
    b = fps_benchmark(run_base, feats, bc.warmup, bc.repetitions)
    calls = {k: {"fuse_decode_per_frame": v["fuse_decode"] / len(feats),
                 "guard_forward_per_frame": v["guard_forward"] / len(feats)} for k, v in counts.items()}
    calls["baseline"]["hypotheses_per_frame"] = hyp / len(feats)
    rep = MetricsReport(fps=g.fps, extra={"fps": {"guard": g.fps, "baseline": b.fps,
                                                  "ratio": g.fps / b.fps},
                                          "calls": calls, "collaborators": bc.collaborators})
    _write_csv(out / "fps.csv", ["method", "fps"], [["guard", g.fps], ["baseline", b.fps]])
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(["consensus baseline", "residual guard"], [b.fps, g.fps], color=["tab:gray", "tab:blue"])
    ax.set_ylabel("frames per second")
    _save_svg(fig, out / "fps.svg")
    return rep, {"fps_repetitions": {"guard": g.repetitions, "baseline": b.repetitions}}


def cmd_leave_one_out(args, cfg, out: Path):
    ds = _load_data(args.data)
    res = leave_one_out(ds, cfg["guard"], cfg["run"].seed)
    ub = res["upper_bound"]
    rows, per = [], {}
    for t in AttackType:
        r = res[t.name]
        per[t.name] = {"held_out": r.accuracy, "upper_bound": ub.per_attack[t.name]["accuracy"],
                       "held_out_tpr": r.tpr, "held_out_fpr": r.fpr}
        rows.append([t.name, r.accuracy, ub.per_attack[t.name]["accuracy"], r.tpr, r.fpr])
    _write_csv(out / "leave_one_out.csv",
               ["held_out", "accuracy", "upper_bound_accuracy", "tpr", "fpr"], rows)
    rep = MetricsReport(accuracy=ub.accuracy, tpr=ub.tpr, fpr=ub.fpr, precision=ub.precision,
                        f1=ub.f1, config_digest=ds.manifest.config_digest, per_attack=per,
                        extra={"gradient_attacks": [t.name for t in GRADIENT_TYPES]})
    return rep, {}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-detector": cmd_train_detector,
    "train-guard": cmd_train_guard,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "bench-fps": cmd_bench_fps,
    "leave-one-out": cmd_leave_one_out,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cplab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cplab {__version__}")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI config file")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        s.add_argument("--seed", type=int, help="shortcut for --set run.seed=N")
        s.add_argument("--out", default=".", help="output directory (default: current)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("gen-data", "attack", "eval", "bench-fps"):
            s.add_argument("--detector", help="detector checkpoint")
        if name in ("train-guard", "eval", "leave-one-out", "stats", "gen-data"):
            s.add_argument("--data", help="dataset directory (shards + manifest.json)")
        if name in ("eval", "bench-fps"):
            s.add_argument("--guard", help="guard checkpoint")
        if name == "eval":
            s.add_argument("--budget", type=float, default=0.5,
                           help="PGD budget for the defended-AP run (needs --detector)")
        if name == "attack":
            s.add_argument("--budgets", help="comma-separated budgets (default: the standard grid)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    try:
        if args.command == "gen-data" and not args.detector:
            raise UsageError("detector checkpoint path is required")
        cfg = load_config(args.config, overrides)
        digest = config_digest(cfg)
        log.warning("%s: seed %d, config digest %s", args.command, cfg["run"].seed, digest)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        report, timing = COMMANDS[args.command](args, cfg, out)
        timing["elapsed_seconds"] = time.perf_counter() - t0
        timing["finished_unix"] = time.time()
    except (UsageError, ShardFormatError, CheckpointError) as exc:
        print(f"cplab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    report.extra.setdefault("seed", cfg["run"].seed)
    report.extra.setdefault("command", args.command)
    report.extra["run_config_digest"] = digest
    if not report.config_digest:
        report.config_digest = digest
    (out / "report.json").write_text(report.to_text())
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
