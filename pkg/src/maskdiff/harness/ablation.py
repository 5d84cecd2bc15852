"""Matched-budget comparison: chain-of-thought decoding vs action-only.

Both variants train on the same bin-picking demonstrations with the same
optimizer budget and seeds, differing only in whether the template carries
subgoal-image and reasoning segments. Success rates are averaged over seeds
and reported with standard errors; the headline number is the mean gap.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..toyworld import evaluate_policy, load_episodes
from ..vocab import desk_layout
from .config import RunConfig
from .pipeline import (
    ModelPolicy,
    artifact_paths,
    episode_sequences,
    load_codebook,
    load_tokenizer,
    stage_gen_data,
    stage_train_bpe,
    stage_train_codebook,
    tokenize_episode_frames,
    train_model,
    write_manifest,
)

VARIANTS = ("vanilla", "mm_cot")


@dataclass(frozen=True)
class SeedOutcome:
    variant: str
    seed: int
    success_rate: float
    mean_steps: float
    flagged: int
    decode_failures: int
    diverged: bool
    train_seconds: float


@dataclass(frozen=True)
class AblationReport:
    outcomes: tuple[SeedOutcome, ...]

    def of(self, variant: str) -> tuple[SeedOutcome, ...]:
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        return tuple(o for o in self.outcomes if o.variant == variant)

    def rates(self, variant: str) -> np.ndarray:
        return np.array([o.success_rate for o in self.of(variant)], dtype=np.float64)

    def mean(self, variant: str) -> float:
        return float(self.rates(variant).mean())

    def stderr(self, variant: str) -> float:
        rates = self.rates(variant)
        if rates.size < 2:
            return float("nan")
        return float(rates.std(ddof=1) / np.sqrt(rates.size))

    def gap(self) -> tuple[float, float]:
        """(mm_cot mean - vanilla mean, standard error of the difference)."""
        gap = self.mean("mm_cot") - self.mean("vanilla")
        err = float(np.hypot(self.stderr("mm_cot"), self.stderr("vanilla")))
        return gap, err

    def to_csv(self) -> str:
        lines = ["variant,success_mean,success_stderr,mean_steps,seeds,n_diverged"]
        for variant in VARIANTS:
            outcomes = self.of(variant)
            step_means = [o.mean_steps for o in outcomes if np.isfinite(o.mean_steps)]
            steps = float(np.mean(step_means)) if step_means else float("nan")
            seeds = ";".join(str(o.seed) for o in outcomes)
            diverged = sum(o.diverged for o in outcomes)
            lines.append(
                f"{variant},{self.mean(variant)!r},{self.stderr(variant)!r},"
                f"{steps!r},{seeds},{diverged}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        gap, err = self.gap()
        n = len(self.of("mm_cot"))
        return (
            f"mm_cot {self.mean('mm_cot'):.3f} +/- {self.stderr('mm_cot'):.3f} vs "
            f"vanilla {self.mean('vanilla'):.3f} +/- {self.stderr('vanilla'):.3f}; "
            f"gap {gap:+.3f} +/- {err:.3f} over {n} seeds"
        )


def run_ablation(
    cfg: RunConfig,
    run_dir: Path,
    seeds=(0, 1, 2),
    *,
    log=None,
) -> AblationReport:
    """Train and evaluate both variants on every seed; write ablation.csv.

    The task is forced to multi-object bin-picking (where intermediate
    subgoals disambiguate which object to fetch next). Shared artifacts
    (dataset, codebook, action tokenizer) are built once if absent. A seed
    whose training diverges (non-finite loss) scores 0 and is flagged.
    """
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise ValueError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValueError("ablation seeds must be distinct")
    cfg = dataclasses.replace(cfg, data_task="all", eval_task="all")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    say = log if log is not None else (lambda _msg: None)

    paths = artifact_paths(cfg, run_dir)
    if not paths["dataset"].exists():
        say(f"generating {cfg.data_episodes} bin-picking episodes")
        stage_gen_data(cfg, run_dir)
    if not paths["codebook"].exists():
        say("fitting patch codebook")
        stage_train_codebook(cfg, run_dir)
    if not (paths["norm"].exists() and paths["bpe"].exists()):
        say("fitting action tokenizer")
        stage_train_bpe(cfg, run_dir)

    episodes = load_episodes(paths["dataset"])
    codebook = load_codebook(paths["codebook"])
    tokenizer = load_tokenizer(cfg, run_dir)
    layout = desk_layout()
    say("tokenizing demonstration frames")
    frame_tokens = tokenize_episode_frames(episodes, codebook)

    outcomes = []
    for variant in VARIANTS:
        variant_cfg = dataclasses.replace(cfg, mode=variant)
        spec = variant_cfg.sequence_spec()
        for seed in seeds:
            rng = np.random.default_rng([seed, 0x5B])
            sequences = episode_sequences(
                episodes, frame_tokens, variant_cfg, tokenizer, layout, spec, rng
            )
            started = time.perf_counter()
            result = train_model(variant_cfg, sequences, layout, spec, seed=seed)
            train_seconds = time.perf_counter() - started
            if result.diverged:
                say(f"{variant} seed {seed}: diverged at step {result.steps_run}")
                outcomes.append(
                    SeedOutcome(
                        variant=variant, seed=seed, success_rate=0.0,
                        mean_steps=float("nan"), flagged=0, decode_failures=0,
                        diverged=True, train_seconds=train_seconds,
                    )
                )
                continue
            policy = ModelPolicy(
                model=result.model,
                codebook=codebook,
                tokenizer=tokenizer,
                layout=layout,
                spec=spec,
                schedule=variant_cfg.schedule(seed=cfg.eval_seed),
                inference=variant_cfg.inference(),
                chunk_len=cfg.chunk,
            )
            outcome = evaluate_policy(
                policy,
                cfg.eval_episodes,
                seed=cfg.eval_seed,
                task="all",
                horizon=cfg.eval_horizon or None,
                chunk=cfg.chunk,
            )
            say(
                f"{variant} seed {seed}: success {outcome.success_rate:.3f} "
                f"({outcome.n_success}/{outcome.n_episodes}), "
                f"train {train_seconds:.0f}s"
            )
            outcomes.append(
                SeedOutcome(
                    variant=variant, seed=seed,
                    success_rate=outcome.success_rate,
                    mean_steps=outcome.mean_steps,
                    flagged=outcome.flagged,
                    decode_failures=policy.decode_failures,
                    diverged=False,
                    train_seconds=train_seconds,
                )
            )

    report = AblationReport(outcomes=tuple(outcomes))
    csv_path = run_dir / "ablation.csv"
    csv_path.write_text(report.to_csv())
    write_manifest(
        run_dir, "ablation", cfg,
        seeds={f"train_{s}": s for s in seeds} | {"eval": cfg.eval_seed},
        inputs={"dataset": paths["dataset"], "codebook": paths["codebook"]},
        outputs={"ablation": csv_path},
    )
    return report
