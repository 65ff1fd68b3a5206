"""Command line entry point.

Every subcommand reads an optional JSON config, applies ``--seed`` and
``--set KEY=VALUE`` overrides, validates, and writes its artifacts plus
``config.json`` and ``run-manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from egogrpo import __version__, kernels
from egogrpo.checkpoint import CheckpointError, load_denoiser, load_scorer, save_denoiser, save_scorer
from egogrpo.config import ConfigError, ExperimentConfig, apply_overrides, load_config
from egogrpo.diffusion import Denoiser, SamplerConfig, build_schedule, pretrain, reconstruct
from egogrpo.grpo import history_csv, grpo_update, rollout_group, train_grpo
from egogrpo.kinematics import Skeleton
from egogrpo.metrics import evaluate
from egogrpo.numerics import Adam, Rng
from egogrpo.rewards import train_scorer
from egogrpo.scorer import PerceptualScorer
from egogrpo.synthdata import DatasetFormatError, build_dataset, load_dataset, save_dataset

UPSTREAM_SECTIONS = ("data", "schedule", "denoiser")
STUDY_COLUMNS = ("lambda", "mean_diversity", "mean_grad_norm", "guard_rate", "advantage_fraction")


class HarnessError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def write_csv(path: Path, header, rows) -> None:
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in r])
    write_text(path, buf.getvalue())


def check_upstream(path, cfg: ExperimentConfig, sections=UPSTREAM_SECTIONS) -> None:
    """Refuse inputs produced under a different data/schedule/model config."""
    side = Path(path).parent / "config.json"
    if not side.exists():
        return
    try:
        other = load_config(side)
    except ConfigError as e:
        raise HarnessError(f"cannot read config next to {path}: {e}") from e
    if other.digest(sections) != cfg.digest(sections):
        diff = [s for s in sections if other.digest([s]) != cfg.digest([s])]
        raise HarnessError(f"{path} was produced with a different config (sections differ: {', '.join(diff)})")


def finish(out: Path, cfg: ExperimentConfig, command: str, started: float, outputs, inputs=(), extra=None):
    write_text(out / "config.json", cfg.to_json())
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernels": kernels.BACKEND,
        },
        "wall_time_s": round(time.perf_counter() - started, 3),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {name: sha256_file(out / name) for name in outputs},
    }
    if extra:
        manifest.update(extra)
    write_text(out / "run-manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def open_dataset(path):
    if path is None:
        raise HarnessError("--data is required")
    try:
        return load_dataset(path)
    except (OSError, DatasetFormatError) as e:
        raise HarnessError(f"cannot load dataset: {e}") from e


def sampler_config(cfg: ExperimentConfig) -> SamplerConfig:
    return SamplerConfig(cfg.sampler.steps, cfg.sampler.eta)


def schedule(cfg: ExperimentConfig):
    return build_schedule(cfg.schedule.steps, cfg.schedule.beta_min, cfg.schedule.beta_max)


def decile_trend(values) -> bool:
    k = max(1, len(values) // 10)
    return float(np.mean(values[-k:])) < float(np.mean(values[:k]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> None:
    t0 = time.perf_counter()
    d = cfg.data
    ds = build_dataset(d.count, d.frames, d.fps, cfg.seed, d.split_fractions)
    save_dataset(ds, out / "dataset.jsonl")
    finish(out, cfg, "gen-data", t0, ["dataset.jsonl"], extra={"splits": ds.split_sizes()})


def cmd_pretrain(args, cfg: ExperimentConfig, out: Path) -> None:
    t0 = time.perf_counter()
    ds = open_dataset(args.data)
    check_upstream(args.data, cfg, ("data",))
    skel = Skeleton.default()
    root = Rng(cfg.seed)
    prior = []
    if args.resume:
        rdir = Path(args.resume)
        old = load_config(rdir / "config.json")
        mine, theirs = cfg.to_dict(), old.to_dict()
        mine["pretrain"].pop("steps")
        theirs["pretrain"].pop("steps")
        if mine != theirs:
            raise HarnessError(f"refusing to resume from {rdir}: its config differs from this run's")
        den = load_denoiser(rdir / "denoiser.mgrp")
        opt = Adam(den.params, lr=cfg.pretrain.learning_rate)
        state = np.load(rdir / "optimizer.npz")
        for dst, src in zip(opt.state_arrays(), [state[f"s{i}"] for i in range(len(opt.state_arrays()))]):
            dst[...] = src
        opt.step_count = int(state["step_count"])
        with open(rdir / "pretrain_loss.csv") as f:
            prior = [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(f)]
    else:
        den = Denoiser.create(cfg.data.frames, skel.joint_count, tuple(cfg.denoiser.hidden),
                              rng=root.child("denoiser-init"))
        opt = Adam(den.params, lr=cfg.pretrain.learning_rate)
    start = opt.step_count
    losses = pretrain(den, ds.split("train"), schedule(cfg), cfg.pretrain.steps, cfg.pretrain.batch_size,
                      root.child("pretrain"), opt)
    save_denoiser(out / "denoiser.mgrp", den)
    np.savez(out / "optimizer.npz", step_count=opt.step_count,
             **{f"s{i}": a for i, a in enumerate(opt.state_arrays())})
    rows = prior + [(start + i + 1, loss) for i, loss in enumerate(losses)]
    write_csv(out / "pretrain_loss.csv", ("step", "loss"), rows)
    trend = decile_trend(losses) if len(losses) >= 10 else None
    finish(out, cfg, "pretrain", t0, ["denoiser.mgrp", "optimizer.npz", "pretrain_loss.csv"], [args.data],
           {"loss_trend_ok": trend})
    if trend is False:
        raise HarnessError("pre-training loss did not decrease (last-decile mean >= first-decile mean)")


def cmd_train_scorer(args, cfg: ExperimentConfig, out: Path) -> None:
    t0 = time.perf_counter()
    ds = open_dataset(args.data)
    den = _load_den(args.denoiser, cfg)
    skel = Skeleton.default()
    root = Rng(cfg.seed)
    sc = cfg.scorer
    scorer = PerceptualScorer(skel.joint_count, sc.width, sc.blocks, sc.hidden, rng=root.child("scorer-init"))
    opt = Adam(scorer.params, lr=sc.learning_rate)
    losses = train_scorer(scorer, ds.split("train"), den, sc.steps, root.child("scorer"), opt, schedule(cfg),
                          sampler_config(cfg), skel, negatives=sc.negatives, delta=sc.temperature)
    save_scorer(out / "scorer.mgrp", scorer)
    write_csv(out / "scorer_loss.csv", ("step", "loss"), [(i + 1, v) for i, v in enumerate(losses)])
    finish(out, cfg, "train-scorer", t0, ["scorer.mgrp", "scorer_loss.csv"], [args.data, args.denoiser])


def _load_den(path, cfg):
    if path is None:
        raise HarnessError("--denoiser is required")
    check_upstream(path, cfg)
    try:
        return load_denoiser(path)
    except (OSError, CheckpointError) as e:
        raise HarnessError(f"cannot load denoiser: {e}") from e


def _load_scorer(path, cfg):
    if path is None:
        raise HarnessError("--scorer is required")
    check_upstream(path, cfg)
    try:
        return load_scorer(path)
    except (OSError, CheckpointError) as e:
        raise HarnessError(f"cannot load scorer: {e}") from e


def cmd_grpo(args, cfg: ExperimentConfig, out: Path) -> None:
    t0 = time.perf_counter()
    ds = open_dataset(args.data)
    den = _load_den(args.denoiser, cfg)
    scorer = _load_scorer(args.scorer, cfg)
    history = []
    if cfg.grpo.iterations == 0:
        shutil.copyfile(args.denoiser, out / "denoiser.mgrp")
    else:
        history = train_grpo(den, scorer, ds.split("train"), cfg.grpo, sampler_config(cfg), schedule(cfg),
                             cfg.rewards, Skeleton.default(), Rng(cfg.seed).child("grpo"))
        save_denoiser(out / "denoiser.mgrp", den)
    write_text(out / "grpo_log.csv", history_csv(history))
    finish(out, cfg, "grpo", t0, ["denoiser.mgrp", "grpo_log.csv"], [args.data, args.denoiser, args.scorer],
           {"guard_rate": [h.guard_rate for h in history], "skipped_samples": sum(h.skipped for h in history)})


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> None:
    t0 = time.perf_counter()
    ds = open_dataset(args.data)
    records = ds.split(cfg.eval.split)
    if not records:
        raise HarnessError(f"split {cfg.eval.split!r} is empty")
    skel = Skeleton.default()
    gts = [r.motion for r in records]
    inputs = [args.data]
    if args.oracle:
        preds = gts
    else:
        den = _load_den(args.checkpoint, cfg)
        inputs.append(args.checkpoint)
        preds = reconstruct(den, [r.head for r in records], schedule(cfg), cfg.sampler.steps, cfg.eval.eta,
                            Rng(cfg.seed).child("eval"), skel.joint_count, cfg.data.fps)
    report = evaluate(preds, gts, skel, cfg.data.fps, cfg.eval.contact_threshold, cfg.eval.rotation_mode)
    write_text(out / "eval.csv", report.to_csv())
    write_text(out / "eval_per_sequence.csv", report.per_sequence_csv())
    finish(out, cfg, "eval", t0, ["eval.csv", "eval_per_sequence.csv"], inputs, {"oracle": bool(args.oracle)})


def diversity_study(den, scorer, records, cfg: ExperimentConfig, lambdas, groups: int, rng: Rng):
    """Rows of ``(lambda, diversity, grad-norm proxy, guard rate, advantage-bearing fraction)``.

    Every lambda sees the same head tracks and random streams, so rows differ
    only through the perturbation strength.
    """
    skel = Skeleton.default()
    sched = schedule(cfg)
    sampler = sampler_config(cfg)
    rows = []
    for lam in lambdas:
        gcfg = replace(cfg.grpo, perlin_lambda=float(lam))
        div, norm, guard, bearing = [], [], [], []
        for g in range(groups):
            rec = records[g % len(records)]
            ro = rollout_group(den, rec.head, scorer, rec.motion, skel, gcfg, sampler, sched, cfg.rewards,
                               rng.child("group", g))
            div.append(ro.diversity)
            norm.append(grpo_update(den, [ro], gcfg, None, sampler, sched).grad_norm)
            guard.append(float(ro.advantages.guarded.mean()))
            bearing.append(float(np.any(ro.advantages.aggregated != 0.0)))
        rows.append((float(lam), float(np.mean(div)), float(np.mean(norm)), float(np.mean(guard)),
                     float(np.mean(bearing))))
    return rows


def cmd_diversity_study(args, cfg: ExperimentConfig, out: Path) -> None:
    t0 = time.perf_counter()
    ds = open_dataset(args.data)
    den = _load_den(args.denoiser, cfg)
    scorer = _load_scorer(args.scorer, cfg)
    rows = diversity_study(den, scorer, ds.split("train"), cfg, cfg.study.lambdas, cfg.study.groups,
                           Rng(cfg.seed).child("study"))
    write_csv(out / "diversity.csv", STUDY_COLUMNS, rows)
    finish(out, cfg, "diversity-study", t0, ["diversity.csv"], [args.data, args.denoiser, args.scorer])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-scorer": cmd_train_scorer,
    "grpo": cmd_grpo,
    "eval": cmd_eval,
    "diversity-study": cmd_diversity_study,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egogrpo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path; repeatable")
        if name != "gen-data":
            s.add_argument("--data", help="dataset JSONL from gen-data")
        if name in ("train-scorer", "grpo", "diversity-study"):
            s.add_argument("--denoiser", help="denoiser checkpoint")
        if name in ("grpo", "diversity-study"):
            s.add_argument("--scorer", help="scorer checkpoint")
        if name == "pretrain":
            s.add_argument("--resume", help="output directory of an earlier pretrain run")
        if name == "eval":
            s.add_argument("--checkpoint", help="denoiser checkpoint to evaluate")
            s.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "eval" and not args.oracle and not args.checkpoint:
            raise HarnessError("eval needs --checkpoint or --oracle")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (HarnessError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
