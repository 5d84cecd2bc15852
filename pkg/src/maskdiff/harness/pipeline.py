"""Experiment orchestration: artifact stages, manifests, the trained policy.

Every stage is a pure function of (config, input artifacts): it writes its
outputs plus a manifest recording the exact config snapshot, library
versions, seeds, and sha256 hashes of everything consumed and produced.
Re-running a stage from the same inputs reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..action_tokenizer import (
    ActionTokenizer,
    bpe_train,
    dct,
    fit_norm,
    flatten,
    load_bpe,
    load_norm_stats,
    normalize,
    quantize,
    save_bpe,
    save_norm_stats,
)
from ..diffusion import make_training_batch, sample, train_step
from ..image_codec import load_codebook, save_codebook, tokenize, train_codebook
from ..model import AdamState, Model, load_model
from ..sequence import (
    AttentionMask,
    EpisodeParts,
    TokenSequence,
    assemble,
    assemble_inference_template,
    block_mask_matrix,
    extract_action,
)
from ..toyworld import (
    Episode,
    encode_state,
    encode_words,
    evaluate_policy,
    frame_to_float,
    generate_dataset,
    load_episodes,
    make_training_example,
    save_episodes,
)
from ..vocab import desk_layout
from .config import RunConfig, dump_config

# Frames entering codebook training are subsampled to roughly this many so
# k-means stays fast; tokenization afterwards still covers every frame.
CODEBOOK_FRAME_BUDGET = 1500


# ---- run directory and manifests -------------------------------------------------------


def resolve_run_dir(out: str | None, name: str = "run") -> Path:
    """Output root is MASKDIFF_RUN_DIR when set, else `out`, else ./runs."""
    root = os.environ.get("MASKDIFF_RUN_DIR") or out or "runs"
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def artifact_paths(cfg: RunConfig, run_dir: Path) -> dict[str, Path]:
    """Where each artifact lives; explicit config paths win over the run dir."""
    run_dir = Path(run_dir)
    return {
        "dataset": Path(cfg.dataset_path) if cfg.dataset_path else run_dir / "dataset.bin",
        "codebook": Path(cfg.codebook_path) if cfg.codebook_path else run_dir / "codebook.bin",
        "norm": Path(cfg.norm_path) if cfg.norm_path else run_dir / "norm.txt",
        "bpe": Path(cfg.bpe_path) if cfg.bpe_path else run_dir / "bpe.txt",
        "model": Path(cfg.model_path) if cfg.model_path else run_dir / "model.ckpt",
    }


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(
    run_dir: Path,
    command: str,
    cfg: RunConfig,
    *,
    seeds: dict[str, int],
    inputs: dict[str, Path] | None = None,
    outputs: dict[str, Path] | None = None,
) -> Path:
    """One manifest per command: config snapshot, versions, seeds, hashes."""
    lines = [f"command = {command}"]
    lines.append(f"version.package = {__version__}")
    lines.append(f"version.python = {sys.version.split()[0]}")
    lines.append(f"version.numpy = {np.__version__}")
    for name in sorted(seeds):
        lines.append(f"seed.{name} = {seeds[name]}")
    for label, table in (("input", inputs or {}), ("output", outputs or {})):
        for name in sorted(table):
            lines.append(f"{label}.{name} = {sha256_file(table[name])}")
    for line in dump_config(cfg).splitlines():
        lines.append(f"config.{line}")
    path = Path(run_dir) / f"manifest-{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path} (run the producing stage first)")
    return Path(path)


def _ensure_dir(run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# ---- artifact stages --------------------------------------------------------------------


def stage_gen_data(cfg: RunConfig, run_dir: Path) -> Path:
    """Expert demonstration dataset; byte-identical for identical seeds."""
    run_dir = _ensure_dir(run_dir)
    paths = artifact_paths(cfg, run_dir)
    episodes = generate_dataset(cfg.data_episodes, seed=cfg.data_seed, task=cfg.data_task)
    save_episodes(paths["dataset"], episodes)
    write_manifest(
        run_dir, "gen-data", cfg,
        seeds={"data": cfg.data_seed},
        outputs={"dataset": paths["dataset"]},
    )
    return paths["dataset"]


def stage_train_codebook(cfg: RunConfig, run_dir: Path) -> Path:
    """Fit the patch codebook on a frame subsample of the dataset."""
    run_dir = _ensure_dir(run_dir)
    paths = artifact_paths(cfg, run_dir)
    episodes = load_episodes(_require(paths["dataset"], "dataset"))
    frames = [frame for ep in episodes for frame in ep.frames]
    stride = max(1, len(frames) // CODEBOOK_FRAME_BUDGET)
    corpus = [frame_to_float(frame) for frame in frames[::stride]]
    codebook = train_codebook(
        corpus,
        k=cfg.codebook_size,
        patch_size=cfg.patch_size,
        iters=cfg.codebook_iters,
        seed=cfg.codebook_seed,
    )
    save_codebook(codebook, paths["codebook"])
    write_manifest(
        run_dir, "train-codebook", cfg,
        seeds={"codebook": cfg.codebook_seed},
        inputs={"dataset": paths["dataset"]},
        outputs={"codebook": paths["codebook"]},
    )
    return paths["codebook"]


def _episode_chunks(episodes: list[Episode], chunk: int) -> list[np.ndarray]:
    return [
        np.asarray(ep.actions[t0 : t0 + chunk], dtype=np.float64)
        for ep in episodes
        for t0 in range(ep.n_steps - chunk + 1)
    ]


def stage_train_bpe(cfg: RunConfig, run_dir: Path) -> tuple[Path, Path]:
    """Fit normalization stats and BPE merges on every action chunk."""
    run_dir = _ensure_dir(run_dir)
    paths = artifact_paths(cfg, run_dir)
    episodes = load_episodes(_require(paths["dataset"], "dataset"))
    chunks = _episode_chunks(episodes, cfg.chunk)
    stats = fit_norm(chunks)
    radius = cfg.max_magnitude
    streams = []
    for values in chunks:
        q = quantize(dct(normalize(values, stats)), cfg.quant_scale)
        clamped = np.clip(q, -radius, radius)
        streams.append(flatten((clamped + radius).T).tolist())
    bpe = bpe_train(streams, target_vocab=cfg.bpe_vocab, base_alphabet=2 * radius + 1)
    save_norm_stats(stats, paths["norm"])
    save_bpe(bpe, paths["bpe"])
    write_manifest(
        run_dir, "train-bpe", cfg,
        seeds={},
        inputs={"dataset": paths["dataset"]},
        outputs={"norm": paths["norm"], "bpe": paths["bpe"]},
    )
    return paths["norm"], paths["bpe"]


def load_tokenizer(cfg: RunConfig, run_dir: Path) -> ActionTokenizer:
    paths = artifact_paths(cfg, run_dir)
    stats = load_norm_stats(_require(paths["norm"], "normalization stats"))
    bpe = load_bpe(_require(paths["bpe"], "BPE model"))
    return ActionTokenizer(
        stats=stats, bpe=bpe, scale=cfg.quant_scale, max_magnitude=cfg.max_magnitude
    )


# ---- training-sequence assembly ---------------------------------------------------------


def tokenize_episode_frames(episodes, codebook) -> list[list[np.ndarray]]:
    """Patch-token ids for every frame of every episode (the slow part,
    done once and shared across variants/seeds)."""
    return [
        [tokenize(frame_to_float(frame), codebook) for frame in ep.frames]
        for ep in episodes
    ]


def episode_sequences(
    episodes: list[Episode],
    frame_tokens: list[list[np.ndarray]],
    cfg: RunConfig,
    tokenizer: ActionTokenizer,
    layout,
    spec,
    rng: np.random.Generator | None,
) -> list[TokenSequence]:
    """Every chunk-aligned training window of every episode, assembled.

    rng drives the subgoal-horizon jitter; None pins the subgoal exactly one
    chunk ahead. Vanilla templates (no subgoal/reasoning segments) simply
    omit those parts.
    """
    with_cot = spec.subgoal_tokens > 0
    sequences = []
    for ep, tokens in zip(episodes, frame_tokens):
        instruction = encode_words(ep.instruction)
        for t0 in range(ep.n_steps - cfg.chunk + 1):
            ex = make_training_example(ep, t0, chunk=cfg.chunk, rng=rng)
            parts = EpisodeParts(
                obs_images=(tokens[t0],),
                instruction=instruction,
                state=encode_state(ex.state),
                subgoal=tokens[ex.subgoal_index] if with_cot else None,
                reasoning=encode_words(ex.reasoning) if spec.reasoning_len else None,
                action=tuple(tokenizer.encode(ex.action_chunk)),
            )
            sequences.append(assemble(parts, layout, spec))
    return sequences


# ---- training ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    grad_norms: list[float]
    steps_run: int
    wall_seconds: float
    diverged: bool = False


def train_model(
    cfg: RunConfig,
    sequences: list[TokenSequence],
    layout,
    spec,
    *,
    seed: int | None = None,
    on_step=None,
) -> TrainResult:
    """Masked-diffusion training over the assembled sequences.

    Single-threaded and deterministic per seed. The learning rate anneals
    linearly to zero when cfg.lr_decay is set, which keeps late low-noise
    steps (tiny t draws carry 1/t loss weights) from blowing up. A
    non-finite loss stops training and marks the result diverged.
    """
    if not sequences:
        raise ValueError("no training sequences")
    if spec.length > cfg.max_len:
        raise ValueError(f"template length {spec.length} exceeds model.max_len {cfg.max_len}")
    seed = cfg.seed if seed is None else seed
    model = Model(cfg.model_config(vocab_size=layout.total_size, seed=seed))
    opt = AdamState(lr=cfg.lr)
    mask = AttentionMask(block_mask_matrix(spec.length, spec.boundary), spec.boundary)
    rng = np.random.default_rng([seed, len(sequences)])
    losses: list[float] = []
    grad_norms: list[float] = []
    started = time.perf_counter()
    for step_i in range(cfg.train_steps):
        idx = rng.integers(0, len(sequences), size=cfg.batch_size)
        batch = make_training_batch(
            [sequences[int(i)] for i in idx],
            layout,
            spec,
            rng,
            include_prefix=cfg.mask_prefix,
            cond_dropout=cfg.cond_dropout,
            full_mask_frac=cfg.full_mask_frac,
        )
        if cfg.lr_decay:
            opt.lr = cfg.lr * (1.0 - step_i / cfg.train_steps)
        try:
            loss, grad_norm = train_step(model, opt, batch, mask)
        except RuntimeError:
            return TrainResult(
                model, losses, grad_norms, step_i,
                time.perf_counter() - started, diverged=True,
            )
        losses.append(loss)
        grad_norms.append(grad_norm)
        if on_step is not None:
            on_step(step_i, loss, grad_norm)
    return TrainResult(
        model, losses, grad_norms, cfg.train_steps, time.perf_counter() - started
    )


def loss_curve_csv(result: TrainResult) -> str:
    lines = ["step,loss,grad_norm"]
    for i, (loss, grad_norm) in enumerate(zip(result.losses, result.grad_norms)):
        lines.append(f"{i},{loss!r},{grad_norm!r}")
    return "\n".join(lines) + "\n"


def stage_train(cfg: RunConfig, run_dir: Path, on_step=None) -> TrainResult:
    """Dataset + codec artifacts -> trained checkpoint + loss curve CSV."""
    run_dir = _ensure_dir(run_dir)
    paths = artifact_paths(cfg, run_dir)
    episodes = load_episodes(_require(paths["dataset"], "dataset"))
    codebook = load_codebook(_require(paths["codebook"], "codebook"))
    tokenizer = load_tokenizer(cfg, run_dir)
    layout = desk_layout()
    spec = cfg.sequence_spec()
    frame_tokens = tokenize_episode_frames(episodes, codebook)
    rng = np.random.default_rng([cfg.seed, 0x5B])
    sequences = episode_sequences(
        episodes, frame_tokens, cfg, tokenizer, layout, spec, rng
    )
    result = train_model(cfg, sequences, layout, spec, on_step=on_step)
    if result.diverged:
        raise RuntimeError(
            f"training diverged (non-finite loss) at step {result.steps_run}"
        )
    result.model.save(paths["model"])
    curve_path = Path(run_dir) / "loss_curve.csv"
    curve_path.write_text(loss_curve_csv(result))
    write_manifest(
        run_dir, "train", cfg,
        seeds={"train": cfg.seed},
        inputs={
            "dataset": paths["dataset"],
            "codebook": paths["codebook"],
            "norm": paths["norm"],
            "bpe": paths["bpe"],
        },
        outputs={"model": paths["model"], "loss_curve": curve_path},
    )
    return result


# ---- the policy -------------------------------------------------------------------------


class ModelPolicy:
    """Closed-loop policy: observation -> template -> iterative decode -> chunk.

    Callable on a batch of (frame, instruction, WorldState) observations, as
    the evaluator expects; all live episodes decode in lockstep through one
    batched sampling session. A generation whose action segment fails to
    decode (malformed code or wrong symbol count) falls back to a zero
    chunk — a no-op in the world — and is tallied in decode_failures.
    """

    def __init__(self, model, codebook, tokenizer, layout, spec, schedule, inference, chunk_len):
        if spec.length > model.config.max_len:
            raise ValueError(
                f"template length {spec.length} exceeds model.max_len {model.config.max_len}"
            )
        self.model = model
        self.codebook = codebook
        self.tokenizer = tokenizer
        self.layout = layout
        self.spec = spec
        self.schedule = schedule
        self.inference = inference
        self.chunk_len = chunk_len
        self.decode_failures = 0
        self.forward_calls = 0

    def template(self, frame, instruction, state) -> TokenSequence:
        return assemble_inference_template(
            obs_images=(tokenize(frame_to_float(frame), self.codebook),),
            instruction=encode_words(instruction),
            state=encode_state(state),
            layout=self.layout,
            spec=self.spec,
        )

    def __call__(self, observations):
        templates = [
            self.template(frame, instruction, state)
            for frame, instruction, state in observations
        ]
        ids_list, calls = sample(
            self.model, templates, self.layout, self.spec, self.schedule, self.inference
        )
        self.forward_calls += calls
        chunks = []
        for ids in ids_list:
            try:
                code = extract_action(ids, self.layout, self.spec)
                chunk = self.tokenizer.decode(code, self.chunk_len).values
            except ValueError:
                self.decode_failures += 1
                chunk = np.zeros((self.chunk_len, 3))
            chunks.append(np.asarray(chunk, dtype=np.float32))
        return chunks


def load_policy(cfg: RunConfig, run_dir: Path, *, sample_seed: int = 0) -> ModelPolicy:
    """Reassemble the policy from a run directory's artifacts."""
    paths = artifact_paths(cfg, run_dir)
    layout = desk_layout()
    model = load_model(_require(paths["model"], "model checkpoint"), expected_vocab=layout.total_size)
    codebook = load_codebook(_require(paths["codebook"], "codebook"))
    tokenizer = load_tokenizer(cfg, run_dir)
    return ModelPolicy(
        model=model,
        codebook=codebook,
        tokenizer=tokenizer,
        layout=layout,
        spec=cfg.sequence_spec(),
        schedule=cfg.schedule(seed=sample_seed),
        inference=cfg.inference(),
        chunk_len=cfg.chunk,
    )


def eval_csv(result, decode_failures: int) -> str:
    header = "episodes,successes,success_rate,mean_steps,flagged,decode_failures"
    row = (
        f"{result.n_episodes},{result.n_success},{result.success_rate!r},"
        f"{result.mean_steps!r},{result.flagged},{decode_failures}"
    )
    return header + "\n" + row + "\n"


def stage_eval(cfg: RunConfig, run_dir: Path):
    """Closed-loop evaluation of the trained checkpoint; writes eval.csv."""
    run_dir = _ensure_dir(run_dir)
    policy = load_policy(cfg, run_dir, sample_seed=cfg.eval_seed)
    result = evaluate_policy(
        policy,
        cfg.eval_episodes,
        seed=cfg.eval_seed,
        task=cfg.eval_task,
        horizon=cfg.eval_horizon or None,
        chunk=cfg.chunk,
    )
    csv_path = Path(run_dir) / "eval.csv"
    csv_path.write_text(eval_csv(result, policy.decode_failures))
    paths = artifact_paths(cfg, run_dir)
    write_manifest(
        run_dir, "eval", cfg,
        seeds={"eval": cfg.eval_seed},
        inputs={"model": paths["model"], "codebook": paths["codebook"]},
        outputs={"eval": csv_path},
    )
    return result
