"""Synthetic pick-and-place gridworld with a scripted expert.

An 8x8 grid holds colored blocks and a tray (the right column). The gripper
moves at most one cell per axis per step, picks with grip > 0.5, releases
with grip < -0.5. Episodes are generated by a greedy scripted expert and
carry everything the multimodal training template needs: rendered frames,
an instruction string, compact proprioceptive state, per-phase reasoning
strings, and real-valued action chunks. Rendering is a pure function of
state (position-dithered so the patch codec sees a rich patch corpus), and
replaying an episode's actions reproduces its frames pixel-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

GRID = 8
CELL_PX = 4
IMAGE_PX = GRID * CELL_PX  # 32
HORIZON = 50
BIN_PICK_HORIZON = 120
DEFAULT_CHUNK = 5

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
_COLOR_RGB = np.array(
    [
        (200, 40, 40),
        (40, 170, 60),
        (45, 80, 200),
        (220, 200, 40),
        (150, 60, 180),
        (230, 140, 30),
    ],
    dtype=np.int16,
)
_BG_RGB = np.array((235, 235, 235), dtype=np.int16)
_TRAY_RGB = np.array((176, 176, 176), dtype=np.int16)
_BORDER_RGB = np.array((30, 30, 30), dtype=np.int16)

ALL_INSTRUCTION = "move all blocks to the tray"
DONE_REASONING = "done"

# Word-level text vocabulary (token = word). State tokens live in reserved
# ranges above the words so both fit the text modality of the vocab layout.
WORDS = (
    "all", "block", "blocks", "blue", "done", "green", "in", "move", "orange",
    "pick", "place", "purple", "red", "the", "to", "tray", "up", "yellow",
)
_WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
STATE_X_BASE = 64
STATE_Y_BASE = 96
STATE_HOLD_BASE = 128
TEXT_ID_SPACE = 192  # every text id this module emits is below this


def encode_words(sentence: str) -> tuple[int, ...]:
    try:
        return tuple(_WORD_TO_ID[w] for w in sentence.split())
    except KeyError as exc:
        raise ValueError(f"word outside the vocabulary: {exc.args[0]!r}") from None


def decode_words(ids) -> str:
    out = []
    for i in ids:
        if not 0 <= int(i) < len(WORDS):
            raise ValueError(f"text id {int(i)} is not a word")
        out.append(WORDS[int(i)])
    return " ".join(out)


@dataclass(frozen=True)
class ObjectState:
    color: int  # index into COLORS
    x: int
    y: int


@dataclass(frozen=True)
class WorldState:
    objects: tuple[ObjectState, ...]
    gripper: tuple[int, int]
    holding: int | None = None  # index into objects
    step_index: int = 0
    grid: int = GRID

    def __post_init__(self):
        g = self.grid
        gx, gy = self.gripper
        if not (0 <= gx < g and 0 <= gy < g):
            raise ValueError(f"gripper {self.gripper} outside the {g}x{g} grid")
        cells = []
        for i, obj in enumerate(self.objects):
            if not (0 <= obj.color < len(COLORS)):
                raise ValueError(f"object {i} has unknown color {obj.color}")
            if not (0 <= obj.x < g and 0 <= obj.y < g):
                raise ValueError(f"object {i} outside the grid")
            if i != self.holding:  # the held object rides the gripper
                cells.append((obj.x, obj.y))
        if len(set(cells)) != len(cells):
            raise ValueError("resting objects overlap")
        if self.holding is not None:
            if not 0 <= self.holding < len(self.objects):
                raise ValueError("holding index out of range")
            held = self.objects[self.holding]
            if (held.x, held.y) != self.gripper:
                raise ValueError("held object must ride the gripper")

    def tray_cells(self) -> frozenset[tuple[int, int]]:
        x = self.grid - 1
        return frozenset((x, y) for y in range(self.grid))

    def on_tray(self, obj: ObjectState) -> bool:
        return obj.x == self.grid - 1

    def object_at(self, cell: tuple[int, int]) -> int | None:
        for i, obj in enumerate(self.objects):
            if i != self.holding and (obj.x, obj.y) == cell:
                return i
        return None

    def delivered(self, i: int) -> bool:
        return i != self.holding and self.on_tray(self.objects[i])


def step(state: WorldState, action) -> WorldState:
    """Apply one (dx, dy, grip) action; invalid picks/releases are no-ops."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be 3 finite reals, got {action!r}")
    dx = int(np.clip(np.floor(a[0] + 0.5), -1, 1))
    dy = int(np.clip(np.floor(a[1] + 0.5), -1, 1))
    g = state.grid
    gx = min(max(state.gripper[0] + dx, 0), g - 1)
    gy = min(max(state.gripper[1] + dy, 0), g - 1)
    objects = list(state.objects)
    holding = state.holding
    if holding is not None:
        objects[holding] = replace(objects[holding], x=gx, y=gy)
    grip = float(a[2])
    if grip > 0.5 and holding is None:
        probe = WorldState(tuple(objects), (gx, gy), None, state.step_index, g)
        target = probe.object_at((gx, gy))
        if target is not None:
            holding = target
    elif grip < -0.5 and holding is not None:
        occupied = any(
            i != holding and (o.x, o.y) == (gx, gy) for i, o in enumerate(objects)
        )
        if not occupied:
            holding = None
    return WorldState(tuple(objects), (gx, gy), holding, state.step_index + 1, g)


# ---- instructions and goals ----------------------------------------------------------


def single_instruction(color_id: int) -> str:
    return f"move the {COLORS[color_id]} block to the tray"


def parse_instruction(text: str) -> tuple[str, int | None]:
    """Returns ("single", color_id) or ("all", None)."""
    if text == ALL_INSTRUCTION:
        return "all", None
    words = text.split()
    if len(words) == 7 and words[:2] == ["move", "the"] and words[3:] == [
        "block", "to", "the", "tray"
    ]:
        if words[2] not in COLORS:
            raise ValueError(f"unknown color {words[2]!r}")
        return "single", COLORS.index(words[2])
    raise ValueError(f"unrecognized instruction {text!r}")


def is_success(state: WorldState, instruction: str) -> bool:
    kind, color = parse_instruction(instruction)
    if kind == "single":
        return any(
            state.delivered(i)
            for i, o in enumerate(state.objects)
            if o.color == color
        )
    return all(state.delivered(i) for i in range(len(state.objects)))


def encode_state(state: WorldState) -> tuple[int, int, int]:
    """Three text tokens: gripper x, gripper y, held color (or empty)."""
    held = 0 if state.holding is None else 1 + state.objects[state.holding].color
    return (
        STATE_X_BASE + state.gripper[0],
        STATE_Y_BASE + state.gripper[1],
        STATE_HOLD_BASE + held,
    )


# ---- rendering -------------------------------------------------------------------------


def _dither(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Deterministic per-pixel brightness offset in {-2..2} (u8 counts).

    An integer hash of the pixel coordinates, so every grid cell gets its
    own 4x4 texture; that keeps the patch corpus rich enough to train a
    full-size codebook while staying visually near-flat.
    """
    h = px.astype(np.uint64) * np.uint64(374761393)
    h += py.astype(np.uint64) * np.uint64(668265263)
    h ^= (px * py).astype(np.uint64) * np.uint64(2246822519)
    h ^= h >> np.uint64(13)
    h *= np.uint64(3266489917)
    h ^= h >> np.uint64(16)
    return (h % np.uint64(5)).astype(np.int16) - 2


def render(state: WorldState) -> np.ndarray:
    """(32, 32, 3) uint8 image; pure function of the state."""
    g = state.grid
    size = g * CELL_PX
    img = np.empty((size, size, 3), dtype=np.int16)
    img[:, :] = _BG_RGB
    tray_x0 = (g - 1) * CELL_PX
    img[:, tray_x0:] = _TRAY_RGB

    def cell_box(x, y):
        return slice(y * CELL_PX, (y + 1) * CELL_PX), slice(x * CELL_PX, (x + 1) * CELL_PX)

    for i, obj in enumerate(state.objects):
        if i == state.holding:
            continue
        rows, cols = cell_box(obj.x, obj.y)
        img[rows, cols] = _COLOR_RGB[obj.color]
    gx, gy = state.gripper
    rows, cols = cell_box(gx, gy)
    if state.holding is not None:
        img[rows, cols] = _COLOR_RGB[state.objects[state.holding].color]
    box = img[rows, cols]
    box[0, :] = _BORDER_RGB
    box[-1, :] = _BORDER_RGB
    box[:, 0] = _BORDER_RGB
    box[:, -1] = _BORDER_RGB

    py, px = np.mgrid[0:size, 0:size]
    img += _dither(px, py)[:, :, None]
    return np.clip(img, 0, 255).astype(np.uint8)


def frame_to_float(frame: np.ndarray) -> np.ndarray:
    """uint8 frame to the [0,1] float image the patch codec consumes."""
    return frame.astype(np.float32) / 255.0


# ---- scripted expert -------------------------------------------------------------------


def _toward(src: tuple[int, int], dst: tuple[int, int]) -> tuple[int, int]:
    return (int(np.sign(dst[0] - src[0])), int(np.sign(dst[1] - src[1])))


def _free_tray_cell(state: WorldState, near_y: int) -> tuple[int, int]:
    x = state.grid - 1
    free = [
        y for y in range(state.grid)
        if state.object_at((x, y)) is None
    ]
    if not free:
        raise ValueError("tray is full")
    best = min(free, key=lambda y: (abs(y - near_y), y))
    return (x, best)


def _remaining(state: WorldState, color: int | None) -> list[int]:
    out = []
    for i, obj in enumerate(state.objects):
        if color is not None and obj.color != color:
            continue
        if not state.delivered(i):
            out.append(i)
    return out


def expert_action(
    state: WorldState, instruction: str, target: int | None = None
) -> tuple[np.ndarray, str, int]:
    """Greedy next action, its reasoning string, and the object it pursues.

    With target None the nearest outstanding object is chosen (stable
    tie-break), which keeps repeated stateless calls converging.
    """
    kind, color = parse_instruction(instruction)
    if state.holding is not None:
        target = state.holding
    else:
        remaining = _remaining(state, color)
        if not remaining:
            return np.zeros(3, dtype=np.float32), DONE_REASONING, -1
        if target is None or target not in remaining:
            gx, gy = state.gripper
            target = min(
                remaining,
                key=lambda i: (
                    max(abs(state.objects[i].x - gx), abs(state.objects[i].y - gy)),
                    i,
                ),
            )
    obj = state.objects[target]
    color_name = COLORS[obj.color]
    if state.holding is None:
        reasoning = f"pick up the {color_name} block"
        if (obj.x, obj.y) == state.gripper:
            return np.array([0, 0, 1], dtype=np.float32), reasoning, target
        dx, dy = _toward(state.gripper, (obj.x, obj.y))
        return np.array([dx, dy, 0], dtype=np.float32), reasoning, target
    reasoning = f"place the {color_name} block in the tray"
    goal = _free_tray_cell(state, state.gripper[1])
    if state.gripper == goal:
        return np.array([0, 0, -1], dtype=np.float32), reasoning, target
    dx, dy = _toward(state.gripper, goal)
    return np.array([dx, dy, 0], dtype=np.float32), reasoning, target


@dataclass(frozen=True)
class Episode:
    """One rollout: frames/states/actions plus the textual annotations."""

    instruction: str
    frames: tuple[np.ndarray, ...]  # uint8 (32, 32, 3), one per state
    states: tuple[WorldState, ...]
    actions: np.ndarray  # (T, 3) float32
    reasoning: tuple[str, ...]  # one per frame (phase active at that time)
    success_step: int | None  # first step index at which success held
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if len(self.frames) != len(self.states) or len(self.reasoning) != len(self.frames):
            raise ValueError("frames, states, and reasoning must align")
        if self.actions.shape != (len(self.frames) - 1, 3):
            raise ValueError("need exactly len(frames) - 1 actions")

    @property
    def n_steps(self) -> int:
        return int(self.actions.shape[0])

    @property
    def success(self) -> bool:
        return self.success_step is not None


def expert_rollout(
    initial: WorldState,
    instruction: str,
    rng: np.random.Generator | int | None = None,
    horizon: int | None = None,
    min_actions: int = DEFAULT_CHUNK,
) -> Episode:
    """Run the scripted expert to success, then pad with no-op actions.

    For the bin-picking instruction the delivery order is drawn from rng,
    so identical layouts yield genuinely multimodal action data. The
    episode is padded with zero actions until it holds at least
    min_actions steps, keeping every episode chunkable.
    """
    kind, color = parse_instruction(instruction)
    if kind == "single" and not any(o.color == color for o in initial.objects):
        raise ValueError(f"no {COLORS[color]} object on the board")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if horizon is None:
        horizon = HORIZON if kind == "single" else BIN_PICK_HORIZON

    states = [initial]
    frames = [render(initial)]
    actions: list[np.ndarray] = []
    reasoning: list[str] = []
    success_step = 0 if is_success(initial, instruction) else None
    target: int | None = None
    state = initial
    while success_step is None and len(actions) < horizon:
        if state.holding is None:
            remaining = _remaining(state, color)
            if target is None or target not in remaining:
                if not remaining:
                    break
                target = int(rng.choice(remaining)) if kind == "all" else remaining[0]
        action, phase, target = expert_action(state, instruction, target)
        state = step(state, action)
        actions.append(action)
        reasoning.append(phase)
        states.append(state)
        frames.append(render(state))
        if is_success(state, instruction):
            success_step = len(actions)
    while len(actions) < min_actions:
        action = np.zeros(3, dtype=np.float32)
        state = step(state, action)
        actions.append(action)
        reasoning.append(DONE_REASONING)
        states.append(state)
        frames.append(render(state))
    reasoning.append(DONE_REASONING if success_step is not None else reasoning[-1])
    return Episode(
        instruction=instruction,
        frames=tuple(frames),
        states=tuple(states),
        actions=np.array(actions, dtype=np.float32).reshape(-1, 3),
        reasoning=tuple(reasoning),
        success_step=success_step,
    )


# ---- layout generation -----------------------------------------------------------------


def random_layout(
    rng: np.random.Generator,
    n_objects: int,
    distinct_colors: bool = False,
) -> WorldState:
    """Objects on distinct non-tray cells, gripper anywhere off the tray."""
    g = GRID
    cells = [(x, y) for x in range(g - 1) for y in range(g)]
    idx = rng.choice(len(cells), size=n_objects + 1, replace=False)
    if distinct_colors:
        colors = rng.choice(len(COLORS), size=n_objects, replace=False)
    else:
        colors = rng.integers(0, len(COLORS), size=n_objects)
    objects = tuple(
        ObjectState(int(c), *cells[i]) for c, i in zip(colors, idx[:-1])
    )
    return WorldState(objects=objects, gripper=cells[idx[-1]])


def random_task(
    rng: np.random.Generator, kind: str = "single"
) -> tuple[WorldState, str]:
    """A solvable layout plus its instruction.

    single: 2-5 objects with distinct colors, one of them the named target.
    all (bin picking): 3-5 objects, any colors.
    """
    if kind == "single":
        n = int(rng.integers(2, 6))
        state = random_layout(rng, n, distinct_colors=True)
        target = int(rng.integers(0, n))
        return state, single_instruction(state.objects[target].color)
    if kind == "all":
        n = int(rng.integers(3, 6))
        return random_layout(rng, n), ALL_INSTRUCTION
    raise ValueError(f"unknown task kind {kind!r}")


# ---- chunked training examples ---------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    """Raw (untokenized) pieces of one chunk-level training item."""

    obs_frame: np.ndarray  # uint8
    instruction: str
    state: WorldState
    subgoal_frame: np.ndarray  # uint8, a true future frame
    subgoal_index: int
    reasoning: str
    action_chunk: np.ndarray  # (C, 3) float32


def make_training_example(
    episode: Episode,
    t0: int,
    chunk: int | None = None,
    rng: np.random.Generator | None = None,
) -> TrainingExample:
    """Chunk starting at t0; subgoal is the frame ~one chunk ahead.

    rng jitters the subgoal offset uniformly over [0.9C, 1.1C] (rounded,
    clamped to the final frame); rng=None pins it to exactly C.
    """
    c = episode.chunk if chunk is None else chunk
    if not 0 <= t0 <= episode.n_steps - c:
        raise ValueError(
            f"chunk [{t0}, {t0 + c}) overruns the {episode.n_steps}-step episode"
        )
    u = float(c) if rng is None else float(rng.uniform(0.9 * c, 1.1 * c))
    offset = int(np.floor(u + 0.5))
    subgoal_index = min(t0 + offset, len(episode.frames) - 1)
    return TrainingExample(
        obs_frame=episode.frames[t0],
        instruction=episode.instruction,
        state=episode.states[t0],
        subgoal_frame=episode.frames[subgoal_index],
        subgoal_index=subgoal_index,
        reasoning=episode.reasoning[t0],
        action_chunk=np.array(episode.actions[t0 : t0 + c], dtype=np.float32),
    )


# ---- dataset file ----------------------------------------------------------------------

DATASET_MAGIC = b"MDDS"
DATASET_VERSION = 1


def _write_str(out: bytearray, text: str) -> None:
    raw = text.encode("utf-8")
    out += struct.pack("<I", len(raw))
    out += raw


def _read_str(blob: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    return blob[off : off + n].decode("utf-8"), off + n


def save_episodes(path, episodes: list[Episode]) -> None:
    out = bytearray()
    out += DATASET_MAGIC
    out += struct.pack("<IIHH", DATASET_VERSION, len(episodes), GRID, IMAGE_PX)
    for ep in episodes:
        _write_str(out, ep.instruction)
        init = ep.states[0]
        out += struct.pack("<B", len(init.objects))
        for obj in init.objects:
            out += struct.pack("<BBB", obj.color, obj.x, obj.y)
        out += struct.pack("<BB", *init.gripper)
        out += struct.pack("<I", 0xFFFFFFFF if ep.success_step is None else ep.success_step)
        out += struct.pack("<I", len(ep.frames))
        for frame in ep.frames:
            out += frame.tobytes()
        out += struct.pack("<I", ep.n_steps)
        out += np.ascontiguousarray(ep.actions, dtype="<f4").tobytes()
        out += struct.pack("<I", len(ep.reasoning))
        for text in ep.reasoning:
            _write_str(out, text)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_episodes(path) -> list[Episode]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not an episode dataset (bad magic)")
    version, count, grid, px = struct.unpack_from("<IIHH", blob, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    if grid != GRID or px != IMAGE_PX:
        raise ValueError(f"{path}: geometry {grid}/{px} does not match this build")
    off = 16
    episodes = []
    frame_bytes = px * px * 3
    for _ in range(count):
        instruction, off = _read_str(blob, off)
        (n_obj,) = struct.unpack_from("<B", blob, off)
        off += 1
        objects = []
        for _ in range(n_obj):
            c, x, y = struct.unpack_from("<BBB", blob, off)
            off += 3
            objects.append(ObjectState(c, x, y))
        gx, gy = struct.unpack_from("<BB", blob, off)
        off += 2
        (success_raw,) = struct.unpack_from("<I", blob, off)
        off += 4
        (n_frames,) = struct.unpack_from("<I", blob, off)
        off += 4
        frames = []
        for _ in range(n_frames):
            arr = np.frombuffer(blob, dtype=np.uint8, count=frame_bytes, offset=off)
            frames.append(arr.reshape(px, px, 3).copy())
            off += frame_bytes
        (n_actions,) = struct.unpack_from("<I", blob, off)
        off += 4
        actions = np.frombuffer(blob, dtype="<f4", count=n_actions * 3, offset=off)
        actions = actions.reshape(n_actions, 3).astype(np.float32)
        off += n_actions * 12
        (n_reason,) = struct.unpack_from("<I", blob, off)
        off += 4
        reasoning = []
        for _ in range(n_reason):
            text, off = _read_str(blob, off)
            reasoning.append(text)
        state = WorldState(objects=tuple(objects), gripper=(gx, gy))
        states = [state]
        for a in actions:
            state = step(state, a)
            states.append(state)
        episodes.append(
            Episode(
                instruction=instruction,
                frames=tuple(frames),
                states=tuple(states),
                actions=actions,
                reasoning=tuple(reasoning),
                success_step=None if success_raw == 0xFFFFFFFF else int(success_raw),
            )
        )
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after the last episode")
    return episodes


def generate_dataset(
    n_episodes: int, seed: int, task: str = "single"
) -> list[Episode]:
    """Expert episodes on random solvable layouts; deterministic per seed."""
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(n_episodes):
        state, instruction = random_task(rng, task)
        episodes.append(expert_rollout(state, instruction, rng))
    return episodes


# ---- closed-loop evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    n_episodes: int
    n_success: int
    mean_steps: float  # over successful episodes (nan if none)
    flagged: int  # episodes that emitted non-finite actions
    steps: tuple[int, ...]  # per-episode step count at termination
    succeeded: tuple[bool, ...]

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_episodes


def evaluate_policy(
    policy,
    n_episodes: int,
    seed: int,
    task: str = "single",
    horizon: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> EvalResult:
    """Closed loop: render -> policy -> execute chunk -> repeat.

    policy(observations) receives a list of (frame uint8, instruction,
    WorldState) for every still-running episode and returns a matching list
    of (chunk, 3) float action arrays. Episodes run in lockstep so batched
    policies amortize model calls. Non-finite actions fail that episode and
    are counted in `flagged`.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if horizon is None:
        horizon = HORIZON if task == "single" else BIN_PICK_HORIZON
    rng = np.random.default_rng(seed)
    tasks = [random_task(rng, task) for _ in range(n_episodes)]
    states = [t[0] for t in tasks]
    instructions = [t[1] for t in tasks]
    done = [is_success(s, i) for s, i in zip(states, instructions)]
    succeeded = list(done)
    steps_used = [0] * n_episodes
    flagged = [False] * n_episodes

    while True:
        active = [i for i in range(n_episodes) if not done[i]]
        if not active:
            break
        obs = [(render(states[i]), instructions[i], states[i]) for i in active]
        chunks = policy(obs)
        if len(chunks) != len(active):
            raise ValueError("policy returned a mismatched number of chunks")
        for i, raw in zip(active, chunks):
            arr = np.asarray(raw, dtype=np.float64)
            if arr.shape != (chunk, 3) or not np.all(np.isfinite(arr)):
                flagged[i] = True
                done[i] = True
                continue
            for a in arr:
                states[i] = step(states[i], a)
                steps_used[i] += 1
                if is_success(states[i], instructions[i]):
                    succeeded[i] = True
                    done[i] = True
                    break
                if steps_used[i] >= horizon:
                    done[i] = True
                    break

    wins = [s for s, ok in zip(steps_used, succeeded) if ok]
    return EvalResult(
        n_episodes=n_episodes,
        n_success=sum(succeeded),
        mean_steps=float(np.mean(wins)) if wins else float("nan"),
        flagged=sum(flagged),
        steps=tuple(steps_used),
        succeeded=tuple(succeeded),
    )


def expert_policy(chunk: int = DEFAULT_CHUNK):
    """Oracle policy: simulates the greedy expert chunk steps ahead."""

    def policy(observations):
        out = []
        for _, instruction, state in observations:
            acts = []
            sim = state
            target = None
            for _ in range(chunk):
                action, _, target = expert_action(sim, instruction, target)
                sim = step(sim, action)
                acts.append(action)
            out.append(np.stack(acts))
        return out

    return policy


def random_policy(seed: int, chunk: int = DEFAULT_CHUNK):
    """Uniform random actions: the floor baseline."""
    rng = np.random.default_rng(seed)

    def policy(observations):
        return [
            rng.uniform([-1, -1, -1], [1, 1, 1], size=(chunk, 3)).astype(np.float32)
            for _ in observations
        ]

    return policy


def zero_policy(chunk: int = DEFAULT_CHUNK):
    def policy(observations):
        return [np.zeros((chunk, 3), dtype=np.float32) for _ in observations]

    return policy
