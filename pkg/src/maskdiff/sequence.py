"""Multimodal token template assembly, parsing, and attention masks.

A training sequence packs, in order: M observation images, an instruction,
the discretized robot state, then the generation targets: a subgoal image,
optional textual reasoning, and an action-token region. The boundary after
the state span splits the sequence into a fully-known prefix block (B1)
and a generated block (B2); the blockwise mask lets B1 attend only within
B1 so its features never depend on B2 content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vocab import VocabLayout

STATE_BINS = 32

SEGMENT_IMAGE = "image"
SEGMENT_TEXT = "text"
SEGMENT_ACTION = "action"


def uniform_bin(value: float, low: float, high: float, n_bins: int = STATE_BINS) -> int:
    """Discretize a scalar into one of n_bins uniform bins over [low, high]."""
    if not high > low:
        raise ValueError(f"need high > low, got [{low}, {high}]")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    frac = (float(value) - low) / (high - low)
    return min(n_bins - 1, max(0, int(frac * n_bins)))


def bin_center(index: int, low: float, high: float, n_bins: int = STATE_BINS) -> float:
    if not 0 <= index < n_bins:
        raise ValueError(f"bin index {index} out of range [0, {n_bins})")
    return low + (index + 0.5) * (high - low) / n_bins


@dataclass(frozen=True)
class Span:
    """Half-open index range [start, end) of one named segment."""

    name: str
    start: int
    end: int
    modality: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"span {self.name}: bad range [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def positions(self) -> np.ndarray:
        return np.arange(self.start, self.end)


@dataclass(frozen=True)
class SequenceSpec:
    """Fixed per-segment lengths of the assembled template.

    Masked-diffusion decoding needs every target-region length known up
    front, so variable-length content (instruction, reasoning, action code)
    is padded to these limits. subgoal_tokens=0 or reasoning_len=0 drops
    that segment entirely.
    """

    n_images: int
    image_tokens: int
    instruction_len: int
    state_len: int
    subgoal_tokens: int
    reasoning_len: int
    action_slots: int

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("need at least one observation image")
        for name in ("image_tokens", "instruction_len", "state_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.subgoal_tokens < 0 or self.reasoning_len < 0:
            raise ValueError("segment lengths cannot be negative")
        # Slots hold the BPE code plus its [EOA] terminator.
        if self.action_slots < 2:
            raise ValueError("action_slots must be >= 2")

    @property
    def boundary(self) -> int:
        """End of the state span: everything before is the known prefix B1."""
        obs = 1 + self.n_images * (self.image_tokens + 2)  # [BOS] + M x [BOI]..[EOI]
        return obs + self.instruction_len + self.state_len

    @property
    def length(self) -> int:
        n = self.boundary
        if self.subgoal_tokens:
            n += self.subgoal_tokens + 2
        if self.reasoning_len:
            n += self.reasoning_len
        n += 1 + self.action_slots + 1  # [BOA] + slots + [EOS]
        return n

    def spans(self) -> tuple[Span, ...]:
        spans = []
        pos = 0
        for m in range(self.n_images):
            # The leading [BOS] is attributed to the first image span.
            start = pos
            pos += (1 if m == 0 else 0) + 1 + self.image_tokens + 1
            spans.append(Span(f"obs_image_{m}", start, pos, SEGMENT_IMAGE))
        spans.append(Span("instruction", pos, pos + self.instruction_len, SEGMENT_TEXT))
        pos += self.instruction_len
        spans.append(Span("state", pos, pos + self.state_len, SEGMENT_TEXT))
        pos += self.state_len
        if self.subgoal_tokens:
            spans.append(Span("subgoal", pos, pos + self.subgoal_tokens + 2, SEGMENT_IMAGE))
            pos += self.subgoal_tokens + 2
        if self.reasoning_len:
            spans.append(Span("reasoning", pos, pos + self.reasoning_len, SEGMENT_TEXT))
            pos += self.reasoning_len
        spans.append(Span("action", pos, pos + 1 + self.action_slots + 1, SEGMENT_ACTION))
        return tuple(spans)


@dataclass(frozen=True)
class TokenSequence:
    """Assembled flat ids plus the span table and block boundary."""

    ids: np.ndarray
    spans: tuple[Span, ...]
    boundary: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        ids.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        if self.spans[0].start != 0 or self.spans[-1].end != ids.shape[0]:
            raise ValueError("spans do not tile the sequence")
        for prev, cur in zip(self.spans, self.spans[1:]):
            if cur.start != prev.end:
                raise ValueError(f"gap between spans {prev.name} and {cur.name}")
        if not 0 <= self.boundary <= ids.shape[0]:
            raise ValueError(f"block boundary {self.boundary} outside sequence")

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    def span(self, name: str) -> Span:
        for span in self.spans:
            if span.name == name:
                return span
        raise KeyError(f"no span named {name!r}")

    def has_span(self, name: str) -> bool:
        return any(span.name == name for span in self.spans)


@dataclass(frozen=True)
class EpisodeParts:
    """Per-segment local ids (indices within each modality's own range)."""

    obs_images: tuple[np.ndarray, ...]
    instruction: tuple[int, ...]
    state: tuple[int, ...]
    subgoal: np.ndarray | None
    reasoning: tuple[int, ...] | None
    action: tuple[int, ...]


@dataclass(frozen=True)
class AttentionMask:
    """L x L allowance matrix (true = query row may attend to key column)."""

    matrix: np.ndarray
    boundary: int

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=bool)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"mask must be square, got {matrix.shape}")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
        if not 0 <= self.boundary <= matrix.shape[0]:
            raise ValueError("boundary outside matrix")

    @property
    def length(self) -> int:
        return int(self.matrix.shape[0])


def block_mask_matrix(length: int, boundary: int) -> np.ndarray:
    """mask[i][j] = block(j) <= block(i), block 1 = [0, boundary), block 2 = rest."""
    if not 0 <= boundary <= length:
        raise ValueError(f"boundary {boundary} outside [0, {length}]")
    block = (np.arange(length) >= boundary).astype(np.int8)  # 0 = B1, 1 = B2
    return block[None, :] <= block[:, None]


def build_block_mask(seq: TokenSequence) -> AttentionMask:
    return AttentionMask(block_mask_matrix(seq.length, seq.boundary), seq.boundary)


def build_full_mask(length: int) -> AttentionMask:
    return AttentionMask(np.ones((length, length), dtype=bool), 0)


def _check_local(name: str, values, size: int, pos: int | None = None) -> None:
    arr = np.asarray(values)
    if arr.size and (arr.min() < 0 or arr.max() >= size):
        where = f" at position {pos}" if pos is not None else ""
        raise ValueError(f"{name}{where}: local id outside [0, {size})")


def assemble(parts: EpisodeParts, layout: VocabLayout, spec: SequenceSpec) -> TokenSequence:
    """Pack per-segment local ids into the flat global-id template."""
    if len(parts.obs_images) != spec.n_images:
        raise ValueError(f"expected {spec.n_images} observation images, got {len(parts.obs_images)}")
    for m, img in enumerate(parts.obs_images):
        if len(img) != spec.image_tokens:
            raise ValueError(f"obs image {m} has {len(img)} tokens, expected {spec.image_tokens}")
        _check_local(f"obs image {m}", img, layout.image_size)
    if not 1 <= len(parts.instruction) <= spec.instruction_len:
        raise ValueError(f"instruction length {len(parts.instruction)} outside [1, {spec.instruction_len}]")
    _check_local("instruction", parts.instruction, layout.text_size)
    if len(parts.state) != spec.state_len:
        raise ValueError(f"state has {len(parts.state)} tokens, expected {spec.state_len}")
    _check_local("state", parts.state, layout.text_size)
    if spec.subgoal_tokens:
        if parts.subgoal is None or len(parts.subgoal) != spec.subgoal_tokens:
            raise ValueError(f"subgoal must have exactly {spec.subgoal_tokens} tokens")
        _check_local("subgoal", parts.subgoal, layout.image_size)
    elif parts.subgoal is not None:
        raise ValueError("subgoal provided but the template omits it")
    if spec.reasoning_len:
        if not parts.reasoning or not 1 <= len(parts.reasoning) <= spec.reasoning_len:
            raise ValueError(f"reasoning length outside [1, {spec.reasoning_len}]")
        _check_local("reasoning", parts.reasoning, layout.text_size)
    elif parts.reasoning:
        raise ValueError("reasoning provided but the template omits it")
    if not 1 <= len(parts.action) <= spec.action_slots - 1:
        raise ValueError(f"action code length {len(parts.action)} outside [1, {spec.action_slots - 1}]")
    _check_local("action", parts.action, layout.action_size)

    bos, eos = layout.special_id("[BOS]"), layout.special_id("[EOS]")
    boi, eoi = layout.special_id("[BOI]"), layout.special_id("[EOI]")
    boa, eoa = layout.special_id("[BOA]"), layout.special_id("[EOA]")
    pad = layout.pad_id
    img_off, act_off = layout.image_offset, layout.action_offset

    ids: list[int] = [bos]
    for img in parts.obs_images:
        ids.append(boi)
        ids.extend(int(i) + img_off for i in img)
        ids.append(eoi)
    ids.extend(int(i) for i in parts.instruction)
    ids.extend([pad] * (spec.instruction_len - len(parts.instruction)))
    ids.extend(int(i) for i in parts.state)
    if spec.subgoal_tokens:
        ids.append(boi)
        ids.extend(int(i) + img_off for i in parts.subgoal)
        ids.append(eoi)
    if spec.reasoning_len:
        ids.extend(int(i) for i in parts.reasoning)
        ids.extend([pad] * (spec.reasoning_len - len(parts.reasoning)))
    ids.append(boa)
    ids.extend(int(i) + act_off for i in parts.action)
    ids.append(eoa)
    ids.extend([pad] * (spec.action_slots - len(parts.action) - 1))
    ids.append(eos)
    return TokenSequence(ids=np.array(ids, dtype=np.int64), spans=spec.spans(), boundary=spec.boundary)


def assemble_inference_template(
    obs_images, instruction, state, layout: VocabLayout, spec: SequenceSpec
) -> TokenSequence:
    """Template with the known prefix filled in and all targets set to [MASK].

    The structural specials of the target block ([BOI]/[EOI] around the
    subgoal, [BOA], [EOS]) are fixed scaffold, not generated.
    """
    placeholder = EpisodeParts(
        obs_images=tuple(np.asarray(img) for img in obs_images),
        instruction=tuple(instruction),
        state=tuple(state),
        subgoal=np.zeros(spec.subgoal_tokens, dtype=np.int64) if spec.subgoal_tokens else None,
        reasoning=(0,) if spec.reasoning_len else None,
        action=(0,),
    )
    seq = assemble(placeholder, layout, spec)
    ids = seq.ids.copy()
    for positions in target_positions(spec).values():
        ids[positions] = layout.mask_id
    return TokenSequence(ids=ids, spans=seq.spans, boundary=seq.boundary)


def target_positions(spec: SequenceSpec) -> dict[str, np.ndarray]:
    """Generated-content positions per target segment (scaffold excluded).

    Action slots include the positions of the BPE code, its [EOA]
    terminator, and any trailing [PAD]s, but not [BOA] or [EOS].
    """
    out: dict[str, np.ndarray] = {}
    for span in spec.spans():
        if span.name == "subgoal":
            out["subgoal"] = np.arange(span.start + 1, span.end - 1)
        elif span.name == "reasoning":
            out["reasoning"] = span.positions()
        elif span.name == "action":
            out["action"] = np.arange(span.start + 1, span.end - 1)
    return out


def segment_allowed_ids(layout: VocabLayout, segment: str) -> np.ndarray:
    """Global ids a generated position of the given segment may take."""
    if segment == "subgoal":
        return np.array(layout.modality_range("image"), dtype=np.int64)
    if segment == "reasoning":
        return np.array(layout.modality_range("text"), dtype=np.int64)
    if segment == "action":
        action = np.array(layout.modality_range("action"), dtype=np.int64)
        extras = np.array([layout.special_id("[EOA]"), layout.pad_id], dtype=np.int64)
        return np.concatenate([action, extras])
    raise ValueError(f"unknown target segment {segment!r}")


def maskable_positions(
    seq: TokenSequence, spec: SequenceSpec, layout: VocabLayout, include_prefix: bool = False
) -> np.ndarray:
    """Positions eligible for forward masking: target content, never [PAD].

    With include_prefix, prefix content (observation patches, instruction,
    state) joins the region; structural specials stay untouchable either way
    except [EOA], which the model must learn to place.
    """
    positions = list(target_positions(spec).values())
    if include_prefix:
        for span in seq.spans:
            if span.name.startswith("obs_image_"):
                start = span.start + (2 if span.start == 0 else 1)
                positions.append(np.arange(start, span.end - 1))
            elif span.name in ("instruction", "state"):
                positions.append(span.positions())
    merged = np.concatenate(positions)
    merged.sort()
    # [PAD] fills unused fixed-length slots and is never a prediction target.
    return merged[seq.ids[merged] != layout.pad_id]


def dump_spans(seq: TokenSequence) -> str:
    """Debug dump: one line per span `name start end modality`."""
    return "\n".join(f"{s.name} {s.start} {s.end} {s.modality}" for s in seq.spans) + "\n"


class ParseError(ValueError):
    """Sequence violates the template; position pinpoints the first offense."""

    def __init__(self, position: int, message: str):
        super().__init__(f"position {position}: {message}")
        self.position = position


def _expect_special(ids: np.ndarray, pos: int, layout: VocabLayout, name: str) -> None:
    if ids[pos] != layout.special_id(name):
        raise ParseError(pos, f"expected {name}, found id {int(ids[pos])}")


def parse(seq: TokenSequence, layout: VocabLayout, spec: SequenceSpec) -> EpisodeParts:
    """Strict inverse of assemble; raises ParseError at the first violation."""
    ids = np.asarray(seq.ids, dtype=np.int64)
    if ids.shape[0] != spec.length:
        raise ParseError(0, f"sequence length {ids.shape[0]}, template needs {spec.length}")
    if ids.min() < 0 or ids.max() >= layout.total_size:
        bad = int(np.flatnonzero((ids < 0) | (ids >= layout.total_size))[0])
        raise ParseError(bad, f"id {int(ids[bad])} outside the vocabulary")
    pad = layout.pad_id
    img_off, act_off = layout.image_offset, layout.action_offset

    def text_locals(span: Span, positions: np.ndarray, what: str) -> list[int]:
        out = []
        for p in positions:
            tid = int(ids[p])
            if layout.modality_of(tid) != "text" or layout.is_special(tid):
                raise ParseError(int(p), f"{what} expects a text token, found id {tid}")
            out.append(tid)
        return out

    _expect_special(ids, 0, layout, "[BOS]")
    obs_images = []
    for m in range(spec.n_images):
        span = next(s for s in seq.spans if s.name == f"obs_image_{m}")
        start = span.start + (1 if m == 0 else 0)
        _expect_special(ids, start, layout, "[BOI]")
        _expect_special(ids, span.end - 1, layout, "[EOI]")
        body = ids[start + 1 : span.end - 1]
        for off, tid in enumerate(body):
            if layout.modality_of(int(tid)) != "image":
                raise ParseError(start + 1 + off, f"observation image expects image tokens, found id {int(tid)}")
        obs_images.append((body - img_off).astype(np.int64))

    instr_span = seq.span("instruction")
    instr_body = ids[instr_span.start : instr_span.end]
    non_pad = np.flatnonzero(instr_body != pad)
    n_instr = int(non_pad[-1]) + 1 if non_pad.size else 0
    if n_instr == 0:
        raise ParseError(instr_span.start, "empty instruction")
    if np.any(instr_body[:n_instr] == pad):
        bad = instr_span.start + int(np.flatnonzero(instr_body[:n_instr] == pad)[0])
        raise ParseError(bad, "[PAD] inside instruction content")
    instruction = text_locals(instr_span, np.arange(instr_span.start, instr_span.start + n_instr), "instruction")

    state_span = seq.span("state")
    state = text_locals(state_span, state_span.positions(), "state")

    subgoal = None
    if spec.subgoal_tokens:
        span = seq.span("subgoal")
        _expect_special(ids, span.start, layout, "[BOI]")
        _expect_special(ids, span.end - 1, layout, "[EOI]")
        body = ids[span.start + 1 : span.end - 1]
        for off, tid in enumerate(body):
            if layout.modality_of(int(tid)) != "image":
                raise ParseError(span.start + 1 + off, f"subgoal expects image tokens, found id {int(tid)}")
        subgoal = (body - img_off).astype(np.int64)

    reasoning = None
    if spec.reasoning_len:
        span = seq.span("reasoning")
        body = ids[span.start : span.end]
        non_pad = np.flatnonzero(body != pad)
        n_reason = int(non_pad[-1]) + 1 if non_pad.size else 0
        if n_reason == 0:
            raise ParseError(span.start, "empty reasoning segment")
        if np.any(body[:n_reason] == pad):
            bad = span.start + int(np.flatnonzero(body[:n_reason] == pad)[0])
            raise ParseError(bad, "[PAD] inside reasoning content")
        reasoning = tuple(text_locals(span, np.arange(span.start, span.start + n_reason), "reasoning"))

    act_span = seq.span("action")
    _expect_special(ids, act_span.start, layout, "[BOA]")
    _expect_special(ids, act_span.end - 1, layout, "[EOS]")
    slots = ids[act_span.start + 1 : act_span.end - 1]
    eoa = layout.special_id("[EOA]")
    eoa_hits = np.flatnonzero(slots == eoa)
    if eoa_hits.size == 0:
        raise ParseError(act_span.start + 1, "action slots missing [EOA]")
    k = int(eoa_hits[0])
    if k == 0:
        raise ParseError(act_span.start + 1, "empty action code")
    for off in range(k):
        tid = int(slots[off])
        if layout.modality_of(tid) != "action":
            raise ParseError(act_span.start + 1 + off, f"action code expects action tokens, found id {tid}")
    for off in range(k + 1, slots.shape[0]):
        if int(slots[off]) != pad:
            raise ParseError(act_span.start + 1 + off, f"expected [PAD] after [EOA], found id {int(slots[off])}")
    action = tuple(int(t) - act_off for t in slots[:k])

    return EpisodeParts(
        obs_images=tuple(obs_images),
        instruction=tuple(instruction),
        state=tuple(state),
        subgoal=subgoal,
        reasoning=reasoning,
        action=action,
    )


def extract_action(ids: np.ndarray, layout: VocabLayout, spec: SequenceSpec) -> list[int]:
    """Lenient action readout for generated sequences.

    Reads action slots up to the first [EOA] (or all slots if none) and
    returns local action ids; anything after [EOA] is ignored. Raises
    ValueError if the code prefix contains a non-action id.
    """
    span = next(s for s in spec.spans() if s.name == "action")
    slots = np.asarray(ids)[span.start + 1 : span.end - 1]
    eoa = layout.special_id("[EOA]")
    hits = np.flatnonzero(slots == eoa)
    code = slots[: int(hits[0])] if hits.size else slots
    out = []
    for tid in code:
        if layout.modality_of(int(tid)) != "action":
            raise ValueError(f"generated action code contains non-action id {int(tid)}")
        out.append(int(tid) - layout.action_offset)
    if not out:
        raise ValueError("generated action code is empty")
    return out


def extract_subgoal(ids: np.ndarray, layout: VocabLayout, spec: SequenceSpec) -> np.ndarray:
    """Subgoal image local indices from a generated sequence."""
    if not spec.subgoal_tokens:
        raise ValueError("template has no subgoal segment")
    span = next(s for s in spec.spans() if s.name == "subgoal")
    body = np.asarray(ids)[span.start + 1 : span.end - 1]
    for off, tid in enumerate(body):
        if layout.modality_of(int(tid)) != "image":
            raise ValueError(f"subgoal position {span.start + 1 + off} holds non-image id {int(tid)}")
    return (body - layout.image_offset).astype(np.int64)
