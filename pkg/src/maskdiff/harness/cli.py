"""Command-line interface.

    maskdiff gen-data --episodes 500 --seed 1
    maskdiff train-codebook
    maskdiff train-bpe
    maskdiff train --config desk.cfg
    maskdiff eval --config desk.cfg
    maskdiff bench --modes full,prefix_kv
    maskdiff ablation --config desk.cfg --seeds 0,1,2
    maskdiff inspect runs/run/dataset.bin

Artifacts land in <out>/<name> (default runs/run); the MASKDIFF_RUN_DIR
environment variable overrides the output root. Every command is
deterministic given its config and seeds and writes a manifest alongside
its artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from ..model import Model, load_model
from ..image_codec import load_codebook
from ..toyworld import load_episodes
from ..vocab import desk_layout
from .ablation import run_ablation
from .bench import BENCH_MODES, backend_csv, backend_report, bench_spec, run_benchmark
from .config import RunConfig, dump_config, load_config
from .pipeline import (
    resolve_run_dir,
    stage_eval,
    stage_gen_data,
    stage_train,
    stage_train_bpe,
    stage_train_codebook,
    write_manifest,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run config file (flat key=value)")
    parser.add_argument("--out", help="output root (default runs; env MASKDIFF_RUN_DIR wins)")
    parser.add_argument("--name", help="run directory name (default: config stem or 'run')")


def _setup(args) -> tuple[RunConfig, Path]:
    overrides = {}
    for flag, field in (("episodes", "data_episodes"), ("seed", "data_seed"), ("task", "data_task")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    cfg = load_config(args.config, overrides) if args.config else RunConfig(**overrides)
    name = args.name or (Path(args.config).stem if args.config else "run")
    return cfg, resolve_run_dir(args.out, name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdiff",
        description="Masked-diffusion vision-language-action stack at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstration episodes")
    _add_common(p)
    p.add_argument("--episodes", type=int, help="number of episodes")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--task", choices=("single", "all"), help="task family")

    for name, help_text in (
        ("train-codebook", "fit the image patch codebook on the dataset"),
        ("train-bpe", "fit action normalization stats and BPE merges"),
        ("train", "train the policy model; writes checkpoint + loss curve"),
        ("eval", "closed-loop evaluation of the trained checkpoint"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("bench", help="decode-throughput benchmark")
    _add_common(p)
    p.add_argument("--modes", default="full,prefix_kv",
                   help=f"comma list from {','.join(BENCH_MODES)}")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--refresh", type=int, default=4, help="response-cache refresh interval")
    p.add_argument("--seed", type=int, default=0, help="model/template seed")
    p.add_argument("--backends", action="store_true",
                   help="also compare attention-kernel backends")

    p = sub.add_parser("ablation", help="chain-of-thought vs action-only comparison")
    _add_common(p)
    p.add_argument("--seeds", default="0,1,2", help="comma list of training seeds")

    p = sub.add_parser("inspect", help="summarize an artifact file")
    p.add_argument("path", help="dataset/checkpoint/codebook/config/manifest file")
    return parser


def _cmd_gen_data(args) -> int:
    cfg, run_dir = _setup(args)
    path = stage_gen_data(cfg, run_dir)
    print(f"wrote {cfg.data_episodes} episodes to {path}")
    return 0


def _cmd_train_codebook(args) -> int:
    cfg, run_dir = _setup(args)
    path = stage_train_codebook(cfg, run_dir)
    print(f"wrote {cfg.codebook_size}-entry codebook to {path}")
    return 0


def _cmd_train_bpe(args) -> int:
    cfg, run_dir = _setup(args)
    norm_path, bpe_path = stage_train_bpe(cfg, run_dir)
    print(f"wrote normalization stats to {norm_path}")
    print(f"wrote BPE model to {bpe_path}")
    return 0


def _cmd_train(args) -> int:
    cfg, run_dir = _setup(args)

    def on_step(step, loss, _grad_norm):
        if step % 100 == 0 or step == cfg.train_steps - 1:
            print(f"step {step + 1}/{cfg.train_steps} loss {loss:.3f}")

    result = stage_train(cfg, run_dir, on_step=on_step)
    print(
        f"trained {result.steps_run} steps in {result.wall_seconds:.0f}s; "
        f"checkpoint and loss curve in {run_dir}"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg, run_dir = _setup(args)
    result = stage_eval(cfg, run_dir)
    print(
        f"success {result.n_success}/{result.n_episodes} "
        f"({result.success_rate:.3f}), mean steps {result.mean_steps:.1f}, "
        f"flagged {result.flagged}; details in {run_dir / 'eval.csv'}"
    )
    return 0


def _cmd_bench(args) -> int:
    cfg, run_dir = _setup(args)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    if not modes:
        raise ValueError("--modes must name at least one mode")
    layout = desk_layout()
    spec = bench_spec()
    model_cfg = cfg.model_config(vocab_size=layout.total_size, seed=args.seed)
    if model_cfg.max_len < spec.length:
        model_cfg = dataclasses.replace(model_cfg, max_len=spec.length)
    model = Model(model_cfg)
    schedule = cfg.schedule(seed=args.seed)
    report = run_benchmark(
        model, layout, spec, schedule, modes,
        chunk_len=cfg.chunk, trials=args.trials, refresh=args.refresh, seed=args.seed,
    )
    csv_path = run_dir / "bench.csv"
    csv_path.write_text(report.to_csv())
    print(report.to_csv(), end="")
    labels = {row.label for row in report.rows}
    if "full" in labels:
        for accelerated in ("prefix_kv", "prefix", "block"):
            if accelerated in labels:
                print(f"speedup full -> {accelerated}: {report.speedup('full', accelerated):.2f}x")
                break
    outputs = {"bench": csv_path}
    if args.backends:
        backends_path = run_dir / "backends.csv"
        backends_path.write_text(backend_csv(backend_report(seed=args.seed)))
        print(backends_path.read_text(), end="")
        outputs["backends"] = backends_path
    write_manifest(run_dir, "bench", cfg, seeds={"bench": args.seed}, outputs=outputs)
    return 0


def _cmd_ablation(args) -> int:
    cfg, run_dir = _setup(args)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    report = run_ablation(cfg, run_dir, seeds, log=print)
    print(report.summary())
    print(f"details in {run_dir / 'ablation.csv'}")
    return 0


def _cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    head = path.open("rb").read(4)
    if head == b"MDDS":
        episodes = load_episodes(path)
        n_success = sum(ep.success for ep in episodes)
        steps = [ep.n_steps for ep in episodes]
        print(f"dataset: {len(episodes)} episodes, {n_success} successful")
        print(f"steps: min {min(steps)}, mean {sum(steps) / len(steps):.1f}, max {max(steps)}")
        print(f"instructions: {len({ep.instruction for ep in episodes})} distinct")
    elif head == b"MDCK":
        model = load_model(path)
        c = model.config
        print(
            f"checkpoint: {c.n_layers} layers, d_model {c.d_model}, "
            f"{c.n_heads} heads, d_ff {c.d_ff}, max_len {c.max_len}, "
            f"vocab {c.vocab_size}"
        )
        print(f"parameters: {model.n_params()}")
    elif head == b"MDCB":
        codebook = load_codebook(path)
        print(
            f"codebook: {codebook.entries.shape[0]} entries, "
            f"patch {codebook.patch_size}x{codebook.patch_size}"
        )
    else:
        lines = path.read_text().splitlines()
        print(f"text artifact: {len(lines)} lines")
        for line in lines[:12]:
            print(f"  {line}")
        if len(lines) > 12:
            print(f"  ... {len(lines) - 12} more")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-codebook": _cmd_train_codebook,
    "train-bpe": _cmd_train_bpe,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "ablation": _cmd_ablation,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
