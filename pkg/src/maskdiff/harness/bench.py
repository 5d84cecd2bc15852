"""Decode-throughput benchmark, numeric-divergence probes, and the
behavioral action-accuracy probe used to bound acceleration staleness.

Fairness contract: every timed configuration decodes the identical template
under the identical schedule, asserted by an input hash recorded per row.
Timing reports the median over trials with warmup runs excluded.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from ..diffusion import InferenceConfig, SampleSchedule, sample
from ..kernels import available_backends
from ..model import KvCache, Model
from ..sequence import (
    AttentionMask,
    SequenceSpec,
    TokenSequence,
    assemble_inference_template,
    block_mask_matrix,
    build_full_mask,
    segment_allowed_ids,
    target_positions,
)
from ..toyworld import generate_dataset, make_training_example
from ..vocab import VocabLayout

# Exact caching (prefix reuse, or response reuse refreshed every step) must
# reproduce uncached logits to this tolerance.
EXACT_DIVERGENCE_BOUND = 1e-5

# Named inference modes benchmarked against each other. prefix_kv's refresh
# interval comes from the caller.
BENCH_MODES = ("full", "block", "prefix", "prefix_kv")


class BenchError(RuntimeError):
    """The benchmark could not produce a trustworthy measurement."""


def mode_config(mode: str, refresh: int = 4) -> InferenceConfig:
    if mode == "full":
        return InferenceConfig(attention="full", cache="none")
    if mode == "block":
        return InferenceConfig(attention="block", cache="none")
    if mode == "prefix":
        return InferenceConfig(attention="block", cache="prefix")
    if mode == "prefix_kv":
        return InferenceConfig(attention="block", cache="prefix+response", refresh_interval=refresh)
    raise ValueError(f"unknown bench mode {mode!r}; choose from {BENCH_MODES}")


def bench_spec() -> SequenceSpec:
    """Synthetic timing geometry: 256 tokens, 144 of them known prefix
    (two observation images), matching the deployed template's shape class
    at a larger scale."""
    return SequenceSpec(
        n_images=2,
        image_tokens=64,
        instruction_len=8,
        state_len=3,
        subgoal_tokens=64,
        reasoning_len=8,
        action_slots=36,
    )


def bench_template(layout: VocabLayout, spec: SequenceSpec, seed: int = 0) -> TokenSequence:
    """Deterministic random-content template for timing runs."""
    rng = np.random.default_rng(seed)
    images = tuple(
        rng.integers(0, layout.image_size, size=spec.image_tokens)
        for _ in range(spec.n_images)
    )
    instruction = tuple(int(i) for i in rng.integers(0, 64, size=spec.instruction_len))
    state = tuple(int(i) for i in rng.integers(64, 192, size=spec.state_len))
    return assemble_inference_template(images, instruction, state, layout, spec)


def _input_hash(template: TokenSequence, schedule: SampleSchedule, chunk_len: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(template.ids).tobytes())
    h.update(
        f"{schedule.steps}|{schedule.schedule}|{schedule.temperature}"
        f"|{schedule.cfg_weight}|{schedule.seed}|{chunk_len}".encode()
    )
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class BenchRow:
    label: str
    decode_steps: int
    seq_len: int
    chunk_seconds: float
    chunks_per_sec: float
    action_hz: float
    max_logit_divergence: float
    forward_calls: int
    input_hash: str


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    chunk_len: int
    trials: int

    def row(self, label: str) -> BenchRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(f"no benchmark row labeled {label!r}")

    def speedup(self, baseline: str, accelerated: str) -> float:
        return self.row(baseline).chunk_seconds / self.row(accelerated).chunk_seconds

    def to_csv(self) -> str:
        lines = [
            "label,decode_steps,seq_len,chunk_seconds,chunks_per_sec,"
            "action_hz,max_logit_divergence,forward_calls,input_hash"
        ]
        for r in self.rows:
            lines.append(
                f"{r.label},{r.decode_steps},{r.seq_len},{r.chunk_seconds!r},"
                f"{r.chunks_per_sec!r},{r.action_hz!r},{r.max_logit_divergence!r},"
                f"{r.forward_calls},{r.input_hash}"
            )
        return "\n".join(lines) + "\n"


def _synthetic_decode_states(
    template: TokenSequence,
    layout: VocabLayout,
    spec: SequenceSpec,
    schedule: SampleSchedule,
    seed: int,
) -> list[np.ndarray]:
    """Masked-to-complete id snapshots mimicking a decode trajectory.

    Commits land at seeded-random target positions with seeded-random
    modality-legal values, following the schedule's per-step commit counts;
    snapshot s is the input to forward call s.
    """
    rng = np.random.default_rng(seed)
    segments = target_positions(spec)
    positions = np.concatenate(list(segments.values()))
    fills = np.empty(positions.size, dtype=np.int64)
    offset = 0
    for name, pos in segments.items():
        allowed = segment_allowed_ids(layout, name)
        fills[offset : offset + pos.size] = rng.choice(allowed, size=pos.size)
        offset += pos.size
    order = rng.permutation(positions.size)
    positions, fills = positions[order], fills[order]
    counts = schedule.commit_counts(positions.size)
    ids = template.ids[None, :].copy()
    states = []
    committed = 0
    for count in counts:
        states.append(ids.copy())
        take = slice(committed, committed + int(count))
        ids[0, positions[take]] = fills[take]
        committed += int(count)
    return states


def divergence_probe(
    model: Model,
    template: TokenSequence,
    layout: VocabLayout,
    spec: SequenceSpec,
    schedule: SampleSchedule,
    inference: InferenceConfig,
    seed: int = 0,
) -> float:
    """Max |cached - uncached| logit gap over a simulated decode, where the
    uncached reference uses the same attention pattern (full-precision
    recompute each step)."""
    if inference.cache == "none":
        return 0.0
    states = _synthetic_decode_states(template, layout, spec, schedule, seed)
    boundary = template.boundary
    mask = (
        AttentionMask(block_mask_matrix(template.length, boundary), boundary)
        if inference.attention == "block"
        else build_full_mask(template.length)
    )
    refresh = 1 if inference.cache == "prefix" else inference.refresh_interval
    cache = KvCache(prefix_len=boundary, refresh_interval=refresh)
    worst = 0.0
    for ids in states:
        cached = model.forward(ids, mask, cache=cache)
        reference = model.forward(ids, mask)
        worst = max(worst, float(np.max(np.abs(cached - reference))))
    return worst


def run_benchmark(
    model: Model,
    layout: VocabLayout,
    spec: SequenceSpec,
    schedule: SampleSchedule,
    modes=BENCH_MODES,
    *,
    chunk_len: int = 5,
    trials: int = 5,
    warmup: int = 1,
    refresh: int = 4,
    seed: int = 0,
) -> BenchReport:
    """Median decode latency per inference mode on one shared workload."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if spec.length > model.config.max_len:
        raise ValueError(f"template length {spec.length} exceeds model.max_len")
    template = bench_template(layout, spec, seed=seed)
    fairness = _input_hash(template, schedule, chunk_len)
    resolution = time.get_clock_info("perf_counter").resolution
    rows = []
    for mode in modes:
        inference = mode_config(mode, refresh=refresh)
        calls = 0
        for _ in range(warmup):
            _, calls = sample(model, template, layout, spec, schedule, inference)
        times = []
        for _ in range(trials):
            start = time.perf_counter()
            _, calls = sample(model, template, layout, spec, schedule, inference)
            times.append(time.perf_counter() - start)
        median = float(np.median(times))
        if median < 100.0 * resolution:
            raise BenchError(
                f"measured interval {median:.3e}s is below 100x the timer "
                f"resolution {resolution:.3e}s; enlarge the workload"
            )
        divergence = divergence_probe(
            model, template, layout, spec, schedule, inference, seed=seed
        )
        if mode in ("block", "prefix") and divergence > EXACT_DIVERGENCE_BOUND:
            raise BenchError(
                f"mode {mode} should be numerically exact but diverged by {divergence:.3e}"
            )
        rows.append(
            BenchRow(
                label=mode,
                decode_steps=schedule.steps,
                seq_len=spec.length,
                chunk_seconds=median,
                chunks_per_sec=1.0 / median,
                action_hz=chunk_len / median,
                max_logit_divergence=divergence,
                forward_calls=calls,
                input_hash=fairness,
            )
        )
    if len({row.input_hash for row in rows}) > 1:
        raise BenchError("benchmark fairness violated: rows consumed different inputs")
    return BenchReport(rows=tuple(rows), chunk_len=chunk_len, trials=trials)


# ---- behavioral accuracy probe -----------------------------------------------------------


def behavior_classes(chunk) -> np.ndarray:
    """World-effect classes of a continuous chunk: per step, the executed
    x/y deltas (round + clamp to one cell) and the grip decision sign."""
    values = np.asarray(chunk, dtype=np.float64)
    moves = np.clip(np.floor(values[:, :2] + 0.5), -1, 1)
    grip = (values[:, 2] > 0.5).astype(np.int64) - (values[:, 2] < -0.5).astype(np.int64)
    return np.column_stack([moves.astype(np.int64), grip])


def probe_examples(n_episodes: int, seed: int, chunk: int, task: str = "single"):
    """Held-out (observation, expert chunk) pairs from fresh expert episodes."""
    examples = []
    for ep in generate_dataset(n_episodes, seed=seed, task=task):
        for t0 in range(ep.n_steps - chunk + 1):
            examples.append(make_training_example(ep, t0, chunk=chunk, rng=None))
    return examples


def action_accuracy(policy, examples, batch_size: int = 25) -> float:
    """Fraction of probe examples whose decoded chunk matches the expert's
    world-effect classes at every control step."""
    if not examples:
        raise ValueError("empty probe set")
    hits = 0
    for start in range(0, len(examples), batch_size):
        group = examples[start : start + batch_size]
        observations = [(ex.obs_frame, ex.instruction, ex.state) for ex in group]
        chunks = policy(observations)
        for ex, chunk in zip(group, chunks):
            if np.array_equal(behavior_classes(chunk), behavior_classes(ex.action_chunk)):
                hits += 1
    return hits / len(examples)


# ---- kernel backend comparison -----------------------------------------------------------


@dataclass(frozen=True)
class BackendRow:
    backend: str
    op: str
    seconds: float
    rows_per_sec: float


def backend_report(
    *, heads: int = 4, length: int = 256, trials: int = 5, seed: int = 0
) -> tuple[BackendRow, ...]:
    """Median attention-kernel latency for every importable backend
    (compiled extension and numpy reference) on one shared workload."""
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((heads, length, length)).astype(np.float32)
    mask = block_mask_matrix(length, length // 2)
    dprobs = rng.standard_normal(scores.shape).astype(np.float32)
    rows = []
    for name, impl in sorted(available_backends().items()):
        for op, fn in (
            ("masked_softmax", lambda: impl.masked_softmax(scores, mask)),
            ("softmax_backward", lambda: impl.softmax_backward(impl.masked_softmax(scores, mask), dprobs)),
        ):
            fn()  # warmup
            times = []
            for _ in range(trials):
                start = time.perf_counter()
                fn()
                times.append(time.perf_counter() - start)
            median = float(np.median(times))
            rows.append(
                BackendRow(
                    backend=name,
                    op=op,
                    seconds=median,
                    rows_per_sec=heads * length / median if median > 0 else float("inf"),
                )
            )
    return tuple(rows)


def backend_csv(rows) -> str:
    lines = ["backend,op,seconds,rows_per_sec"]
    for r in rows:
        lines.append(f"{r.backend},{r.op},{r.seconds!r},{r.rows_per_sec!r}")
    return "\n".join(lines) + "\n"
