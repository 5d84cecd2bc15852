"""Masked discrete-diffusion training objective and iterative sampler.

Training: corrupt target-region tokens by replacing each with [MASK]
independently with probability t (t drawn uniform per sequence), then
score the model's prediction of the originals at exactly the masked
positions, weighted 1/t so easy (lightly masked) draws count less.

Inference: start from an all-[MASK] target region and iteratively commit
the highest-confidence predictions on a fixed schedule until no mask
remains. Decoding is modality-constrained per segment, optionally guided
at subgoal-image positions by classifier-free guidance, and optionally
accelerated by the model's KvCache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import AdamState, KvCache, Model
from .sequence import (
    SequenceSpec,
    TokenSequence,
    build_block_mask,
    build_full_mask,
    maskable_positions,
    segment_allowed_ids,
    target_positions,
)
from .vocab import VocabLayout

T_MIN = 1e-3
DEFAULT_CFG_WEIGHT = 3.5
DEFAULT_COND_DROPOUT = 0.1


@dataclass(frozen=True)
class MaskedBatch:
    """Corrupted training batch; rows index the masked positions."""

    x_t: np.ndarray  # (B, L) ids with [MASK] at masked positions
    x0: np.ndarray  # (B, L) reference ids
    t: np.ndarray  # (B,) masking probability per sequence
    rows: tuple[np.ndarray, np.ndarray]  # (batch_idx, pos_idx) of masked positions
    cond_dropout: np.ndarray  # (B,) bool: instruction hidden for CFG training

    @property
    def batch_size(self) -> int:
        return int(self.x0.shape[0])

    def n_masked(self) -> np.ndarray:
        return np.bincount(self.rows[0], minlength=self.batch_size)

    def validate(self, layout: VocabLayout, region_per_seq: list[np.ndarray]) -> None:
        """Assert the structural invariants (used by tests, not hot paths)."""
        b_idx, p_idx = self.rows
        assert np.all(self.x_t[b_idx, p_idx] == layout.mask_id)
        assert np.all((self.t > 0) & (self.t <= 1))
        for b in range(self.batch_size):
            mine = p_idx[b_idx == b]
            region = set(region_per_seq[b].tolist())
            assert set(mine.tolist()) <= region
            untouched = np.setdiff1d(np.arange(self.x0.shape[1]), mine)
            if not self.cond_dropout[b]:
                assert np.array_equal(self.x_t[b, untouched], self.x0[b, untouched])


def forward_mask(
    x0_ids: np.ndarray,
    t: float,
    region: np.ndarray,
    rng: np.random.Generator,
    mask_id: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt: each region token becomes mask_id independently with prob t.

    Returns (x_t, masked_positions); positions outside region are untouched.
    The caller supplies the generator, so results are deterministic per seed.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must be in (0, 1], got {t}")
    region = np.asarray(region, dtype=np.int64)
    if region.size == 0:
        raise ValueError("empty maskable region")
    x_t = np.asarray(x0_ids, dtype=np.int64).copy()
    hit = rng.random(region.size) < t
    masked = region[hit]
    x_t[masked] = mask_id
    return x_t, masked


def make_training_batch(
    sequences: list[TokenSequence],
    layout: VocabLayout,
    spec: SequenceSpec,
    rng: np.random.Generator,
    include_prefix: bool = False,
    cond_dropout: float = DEFAULT_COND_DROPOUT,
    full_mask_frac: float = 0.0,
) -> MaskedBatch:
    """Sample t per sequence, mask the target region, apply CFG dropout.

    full_mask_frac pins that fraction of the batch to t=1 (everything
    masked): iterative decoding always starts from the fully-masked state,
    but uniform t draws rarely land there, and at partial masking the
    visible target tokens alone often determine the masked ones — so the
    conditioning pathway from the prefix is undertrained without it.
    """
    if not sequences:
        raise ValueError("empty batch")
    x0 = np.stack([seq.ids for seq in sequences])
    x_t = x0.copy()
    batch = len(sequences)
    t = rng.uniform(T_MIN, 1.0, size=batch)
    if full_mask_frac > 0.0:
        t[rng.random(batch) < full_mask_frac] = 1.0
    b_rows: list[np.ndarray] = []
    p_rows: list[np.ndarray] = []
    mask_id = layout.mask_id
    for b, seq in enumerate(sequences):
        region = maskable_positions(seq, spec, layout, include_prefix=include_prefix)
        x_t[b], masked = forward_mask(seq.ids, float(t[b]), region, rng, mask_id)
        b_rows.append(np.full(masked.size, b, dtype=np.int64))
        p_rows.append(masked)
    drop = rng.random(batch) < cond_dropout
    if drop.any():
        instr = sequences[0].span("instruction")
        x_t[np.flatnonzero(drop), instr.start : instr.end] = mask_id
    return MaskedBatch(
        x_t=x_t,
        x0=x0,
        t=t,
        rows=(np.concatenate(b_rows), np.concatenate(p_rows)),
        cond_dropout=drop,
    )


def _rows_loss(logits_rows: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Weighted cross-entropy over selected rows; returns loss and dlogits."""
    if not np.all(np.isfinite(logits_rows)):
        raise ValueError("non-finite logits")
    x = logits_rows.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z))[:, 0]
    nll = lse - x[np.arange(x.shape[0]), targets]
    loss = float((nll * weights).sum())
    dlogits = e / z
    dlogits[np.arange(x.shape[0]), targets] -= 1.0
    dlogits *= weights[:, None]
    return loss, dlogits


def _row_weights(batch: MaskedBatch) -> np.ndarray:
    # Per Eq-style weighting: each sequence's masked sum is scaled by 1/t,
    # and the batch reduces by mean.
    b_idx = batch.rows[0]
    return 1.0 / (batch.t[b_idx] * batch.batch_size)


def unified_loss(logits: np.ndarray, batch: MaskedBatch) -> float:
    """Batch-mean of per-sequence (1/t) * sum of masked-token NLL."""
    logits = np.asarray(logits)
    if logits.ndim == 2:
        logits = logits[None]
    if logits.shape[:2] != batch.x0.shape:
        raise ValueError(f"logits shape {logits.shape} does not cover batch {batch.x0.shape}")
    b_idx, p_idx = batch.rows
    if b_idx.size == 0:
        return 0.0
    rows = logits[b_idx, p_idx]
    targets = batch.x0[b_idx, p_idx]
    loss, _ = _rows_loss(rows, targets, _row_weights(batch))
    return loss


def make_loss_fn(batch: MaskedBatch):
    """Row-restricted loss closure for Model.loss_and_grad.

    The head GEMM runs only on masked rows; every other position has zero
    gradient, so the trunk backward is unchanged.
    """
    b_idx, p_idx = batch.rows
    targets = batch.x0[b_idx, p_idx]
    weights = _row_weights(batch)

    def loss_fn(model: Model, hidden: np.ndarray):
        rows = hidden[b_idx, p_idx]
        logits_rows = rows @ model.params["head_w"] + model.params["head_b"]
        loss, dlogits = _rows_loss(logits_rows, targets, weights)
        return loss, dlogits, (b_idx, p_idx), {}

    return loss_fn


def train_step(model: Model, opt: AdamState, batch: MaskedBatch, mask) -> tuple[float, float]:
    """One optimizer step on the unified loss; returns (loss, grad_norm)."""
    if batch.rows[0].size == 0:
        return 0.0, 0.0
    loss, grads, _ = model.loss_and_grad(batch.x_t, mask, make_loss_fn(batch))
    if not math.isfinite(loss):
        t_stats = f"t in [{batch.t.min():.4f}, {batch.t.max():.4f}]"
        raise RuntimeError(
            f"non-finite loss {loss} on batch of {batch.batch_size} ({t_stats}, "
            f"{batch.rows[0].size} masked positions)"
        )
    sq = 0.0
    for g in grads.values():
        sq += float((g.astype(np.float64) ** 2).sum())
    opt.step(model.params, grads)
    return loss, math.sqrt(sq)


# ---- sampling ------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSchedule:
    """Decode schedule: S model calls, committing a growing token count."""

    steps: int
    schedule: str = "cosine"
    temperature: float = 1.0
    cfg_weight: float = DEFAULT_CFG_WEIGHT
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.schedule not in ("cosine", "linear"):
            raise ValueError(f"schedule must be cosine or linear, got {self.schedule!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")

    def fractions(self) -> np.ndarray:
        """Per-step unmask fractions; they sum to 1 over S steps."""
        s = np.arange(1, self.steps + 1, dtype=np.float64)
        if self.schedule == "cosine":
            cum = 1.0 - np.cos(0.5 * np.pi * s / self.steps)
        else:
            cum = s / self.steps
        cum[-1] = 1.0
        return np.diff(np.concatenate([[0.0], cum]))

    def commit_counts(self, n_positions: int) -> np.ndarray:
        """Integer commits per step: rounding of the cumulative fractions,
        so counts are non-negative and sum exactly to n_positions."""
        cum = np.cumsum(self.fractions())
        cum[-1] = 1.0
        marks = np.rint(cum * n_positions).astype(np.int64)
        counts = np.diff(np.concatenate([[0], marks]))
        return counts


@dataclass(frozen=True)
class InferenceConfig:
    """Attention/caching configuration for one decode session."""

    attention: str = "block"  # block | full
    cache: str = "none"  # none | prefix | prefix+response
    refresh_interval: int = 4
    order: str = "joint"  # joint | sequential

    def __post_init__(self):
        if self.attention not in ("block", "full"):
            raise ValueError(f"attention must be block or full, got {self.attention!r}")
        if self.cache not in ("none", "prefix", "prefix+response"):
            raise ValueError(f"unknown cache mode {self.cache!r}")
        if self.cache != "none" and self.attention != "block":
            raise ValueError("caching requires the blockwise attention mask")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.order not in ("joint", "sequential"):
            raise ValueError(f"order must be joint or sequential, got {self.order!r}")

    def label(self) -> str:
        if self.cache == "none":
            return f"{self.attention}-attn"
        if self.cache == "prefix":
            return "block-attn+prefix-cache"
        return f"block-attn+prefix-cache+response-R{self.refresh_interval}"


def cfg_logits(cond: np.ndarray, uncond: np.ndarray, w: float, positions=None) -> np.ndarray:
    """uncond + w * (cond - uncond); w=1 returns cond, w=0 returns uncond.

    With positions given, guidance applies only at those sequence positions
    (the subgoal-image region); everything else keeps the conditional logits.
    """
    cond = np.asarray(cond)
    uncond = np.asarray(uncond)
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch: {cond.shape} vs {uncond.shape}")
    if positions is None:
        return uncond + w * (cond - uncond)
    out = cond.copy()
    out[..., positions, :] = uncond[..., positions, :] + w * (
        cond[..., positions, :] - uncond[..., positions, :]
    )
    return out


def _segment_table(layout: VocabLayout, spec: SequenceSpec):
    """Per target segment: positions, allowed-id mask over the vocab."""
    table = []
    for name, positions in target_positions(spec).items():
        allowed = np.zeros(layout.total_size, dtype=bool)
        allowed[segment_allowed_ids(layout, name)] = True
        table.append((name, positions, allowed))
    return table


def _sample_rows(rows: np.ndarray, temps: np.ndarray, rng: np.random.Generator):
    """Choose one token per row (argmax at temp 0, else tempered sampling);
    confidence is the chosen token's untempered softmax probability."""
    x = rows.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    probs = np.exp(x - m)
    probs /= probs.sum(axis=-1, keepdims=True)
    chosen = np.argmax(rows, axis=-1)
    hot = temps > 0
    if hot.any():
        # Gumbel-max categorical draw: argmax(logits/T + G) samples the
        # tempered softmax and can never pick a -inf (disallowed) entry.
        scaled = rows[hot] / temps[hot, None]
        chosen[hot] = np.argmax(scaled + rng.gumbel(size=scaled.shape), axis=-1)
    conf = probs[np.arange(rows.shape[0]), chosen]
    return chosen, conf


class SampleSession:
    """Holds per-decode state: ids, masks, caches, and the RNG."""

    def __init__(self, model, templates, layout, spec, schedule, inference):
        ids = np.stack([t.ids for t in templates]) if isinstance(templates, (list, tuple)) else None
        if ids is None:
            seq = templates
            ids = seq.ids[None, :].copy()
        self.single = not isinstance(templates, (list, tuple))
        self.ids = ids.copy()
        self.model = model
        self.layout = layout
        self.spec = spec
        self.schedule = schedule
        self.inference = inference
        self.rng = np.random.default_rng(schedule.seed)
        self.mask = (
            build_full_mask(spec.length)
            if inference.attention == "full"
            else build_block_mask_for_spec(spec)
        )
        self.forward_calls = 0
        self.cache = None
        self.uncond_cache = None
        if inference.cache != "none":
            r = 1 if inference.cache == "prefix" else inference.refresh_interval
            self.cache = KvCache(spec.boundary, refresh_interval=r)
            self.uncond_cache = KvCache(spec.boundary, refresh_interval=r)
        self.use_cfg = (
            spec.subgoal_tokens > 0
            and schedule.cfg_weight != 1.0
        )
        if self.use_cfg:
            instr = next(s for s in spec.spans() if s.name == "instruction")
            self._instr_end = instr.end
            self.uncond_ids = self.ids.copy()
            self.uncond_ids[:, instr.start : instr.end] = layout.mask_id
            self.subgoal_positions = target_positions(spec)["subgoal"]

    def logits(self) -> np.ndarray:
        self.forward_calls += 1
        out = self.model.forward(self.ids, self.mask, self.cache)
        if self.use_cfg:
            self.forward_calls += 1
            self.uncond_ids[:, self._instr_end :] = self.ids[:, self._instr_end :]
            uncond = self.model.forward(self.uncond_ids, self.mask, self.uncond_cache)
            out = cfg_logits(out, uncond, self.schedule.cfg_weight, self.subgoal_positions)
        return out


def build_block_mask_for_spec(spec: SequenceSpec):
    from .sequence import AttentionMask, block_mask_matrix

    return AttentionMask(block_mask_matrix(spec.length, spec.boundary), spec.boundary)


def _decode_region(session: SampleSession, positions, allowed, temps) -> None:
    """Commit every position in the region over the session's schedule."""
    ids = session.ids
    batch = ids.shape[0]
    schedule = session.schedule
    counts = schedule.commit_counts(positions.size)
    neg_inf = -np.inf
    for n_commit in counts:
        still = ids[:, positions] == session.layout.mask_id  # (B, N)
        if not still.any():
            break
        logits = session.logits()
        b_idx, local_idx = np.nonzero(still)
        rows = logits[b_idx, positions[local_idx]].astype(np.float64)
        rows[~allowed[local_idx]] = neg_inf
        chosen, conf = _sample_rows(rows, temps[local_idx], session.rng)
        if n_commit == 0:
            continue
        for b in range(batch):
            mine = np.flatnonzero(b_idx == b)
            if mine.size == 0:
                continue
            take = mine[np.argsort(-conf[mine], kind="stable")[: int(n_commit)]]
            ids[b, positions[local_idx[take]]] = chosen[take]
    # Rounding can leave a remainder when commits hit zero-count steps; the
    # schedule guarantees the counts sum to the region size, so by now every
    # position is committed.
    assert not (ids[:, positions] == session.layout.mask_id).any()


def sample(
    model,
    templates,
    layout: VocabLayout,
    spec: SequenceSpec,
    schedule: SampleSchedule,
    inference: InferenceConfig = InferenceConfig(),
):
    """Decode all target segments of the template(s).

    templates: one TokenSequence or a list decoded in lockstep (shared
    schedule and step count; separate sampling randomness per row). Returns
    final ids with shape matching the input arity, plus the number of model
    forward calls (the denoise-step cost driver).
    """
    session = SampleSession(model, templates, layout, spec, schedule, inference)
    table = _segment_table(layout, spec)
    temp_of = {"subgoal": schedule.temperature, "reasoning": 0.0, "action": 0.0}
    if inference.order == "joint":
        positions = np.concatenate([pos for _, pos, _ in table])
        order = np.argsort(positions, kind="stable")
        positions = positions[order]
        allowed = np.concatenate(
            [np.broadcast_to(a, (p.size, a.size)) for _, p, a in table]
        )[order]
        temps = np.concatenate(
            [np.full(p.size, temp_of[name]) for name, p, _ in table]
        )[order]
        _decode_region(session, positions, allowed, temps)
    else:
        for name, positions, allowed_vec in table:
            allowed = np.broadcast_to(allowed_vec, (positions.size, allowed_vec.size))
            temps = np.full(positions.size, temp_of[name])
            _decode_region(session, positions, allowed, temps)
    out = session.ids[0] if session.single else session.ids
    return out, session.forward_calls
