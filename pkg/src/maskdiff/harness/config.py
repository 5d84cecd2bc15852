"""Run configuration: a flat key=value text format with section prefixes.

One line per setting (`section.key = value`), `#` comments, no nesting, no
quoting. Snapshots are canonical (fixed key order, one normalized rendering
per value), so a dumped config is bit-exact reproducible and diffs cleanly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..diffusion import InferenceConfig, SampleSchedule
from ..model import ModelConfig
from ..sequence import SequenceSpec
from ..toyworld import IMAGE_PX

MODES = ("mm_cot", "vanilla")
TASKS = ("single", "all")

# Template limits shared by every desk run (word sentences fit in 8 tokens,
# state is gripper x/y plus the held-object flag). Action slots fit the
# worst-case uncompressed code (chunk_len x 3 dims = 15 symbols) plus its
# terminator, so BPE compression is an optimization, never a requirement.
INSTRUCTION_LEN = 8
STATE_LEN = 3
REASONING_LEN = 8
ACTION_SLOTS = 16


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a desk run; defaults reproduce the standard recipe."""

    # run
    mode: str = "mm_cot"
    seed: int = 0
    # data
    data_episodes: int = 500
    data_seed: int = 1
    data_task: str = "single"
    chunk: int = 5
    # image codec
    codebook_size: int = 256
    codebook_iters: int = 25
    codebook_seed: int = 0
    patch_size: int = 4
    # action tokenizer
    bpe_vocab: int = 128
    quant_scale: float = 10.0
    max_magnitude: int = 48
    # model
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 256
    # training
    train_steps: int = 1200
    batch_size: int = 16
    lr: float = 1.5e-3
    lr_decay: bool = True
    cond_dropout: float = 0.0
    full_mask_frac: float = 0.0
    mask_prefix: bool = False
    # sampling
    sample_steps: int = 16
    sample_schedule: str = "cosine"
    temperature: float = 1.0
    cfg_weight: float = 1.0
    # inference acceleration
    attention: str = "block"
    cache: str = "prefix+response"
    refresh: int = 4
    order: str = "joint"
    # evaluation
    eval_episodes: int = 30
    eval_seed: int = 7
    eval_task: str = "single"
    eval_horizon: int = 0  # 0 = task default
    # explicit artifact locations; empty = resolved inside the run directory
    dataset_path: str = ""
    codebook_path: str = ""
    norm_path: str = ""
    bpe_path: str = ""
    model_path: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"run.mode must be one of {MODES}, got {self.mode!r}")
        if self.data_task not in TASKS or self.eval_task not in TASKS:
            raise ValueError(f"tasks must be one of {TASKS}")
        for name in (
            "data_episodes", "chunk", "codebook_size", "codebook_iters",
            "patch_size", "bpe_vocab", "max_magnitude", "train_steps",
            "batch_size", "sample_steps", "eval_episodes",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{_FLAT_OF[name]} must be >= 1")
        if self.lr <= 0 or self.quant_scale <= 0:
            raise ValueError("train.lr and actions.scale must be > 0")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("train.cond_dropout must be in [0, 1]")
        if not 0.0 <= self.full_mask_frac <= 1.0:
            raise ValueError("train.full_mask_frac must be in [0, 1]")
        if self.eval_horizon < 0:
            raise ValueError("eval.horizon must be >= 0 (0 = task default)")
        if IMAGE_PX % self.patch_size:
            raise ValueError(f"codec.patch_size must divide the {IMAGE_PX}px frame")
        # These constructors own the detailed validation (including the
        # incompatible-combo rules: caching requires the blockwise mask).
        self.inference()
        self.schedule()
        self.model_config(vocab_size=8)

    # ---- derived objects -----------------------------------------------

    def sequence_spec(self) -> SequenceSpec:
        """Template geometry for this run's mode."""
        image_tokens = (IMAGE_PX // self.patch_size) ** 2
        with_cot = self.mode == "mm_cot"
        return SequenceSpec(
            n_images=1,
            image_tokens=image_tokens,
            instruction_len=INSTRUCTION_LEN,
            state_len=STATE_LEN,
            subgoal_tokens=image_tokens if with_cot else 0,
            reasoning_len=REASONING_LEN if with_cot else 0,
            action_slots=ACTION_SLOTS,
        )

    def model_config(self, vocab_size: int, seed: int | None = None) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_len=self.max_len,
            vocab_size=vocab_size,
            seed=self.seed if seed is None else seed,
        )

    def schedule(self, seed: int = 0) -> SampleSchedule:
        return SampleSchedule(
            steps=self.sample_steps,
            schedule=self.sample_schedule,
            temperature=self.temperature,
            cfg_weight=self.cfg_weight,
            seed=seed,
        )

    def inference(self) -> InferenceConfig:
        return InferenceConfig(
            attention=self.attention,
            cache=self.cache,
            refresh_interval=self.refresh,
            order=self.order,
        )


# ---- flat key table ------------------------------------------------------

_KEYS: dict[str, str] = {
    "run.mode": "mode",
    "run.seed": "seed",
    "data.episodes": "data_episodes",
    "data.seed": "data_seed",
    "data.task": "data_task",
    "data.chunk": "chunk",
    "codec.codebook_size": "codebook_size",
    "codec.iters": "codebook_iters",
    "codec.seed": "codebook_seed",
    "codec.patch_size": "patch_size",
    "actions.bpe_vocab": "bpe_vocab",
    "actions.scale": "quant_scale",
    "actions.max_magnitude": "max_magnitude",
    "model.n_layers": "n_layers",
    "model.d_model": "d_model",
    "model.n_heads": "n_heads",
    "model.d_ff": "d_ff",
    "model.max_len": "max_len",
    "train.steps": "train_steps",
    "train.batch_size": "batch_size",
    "train.lr": "lr",
    "train.lr_decay": "lr_decay",
    "train.cond_dropout": "cond_dropout",
    "train.full_mask_frac": "full_mask_frac",
    "train.mask_prefix": "mask_prefix",
    "sample.steps": "sample_steps",
    "sample.schedule": "sample_schedule",
    "sample.temperature": "temperature",
    "sample.cfg_weight": "cfg_weight",
    "infer.attention": "attention",
    "infer.cache": "cache",
    "infer.refresh": "refresh",
    "infer.order": "order",
    "eval.episodes": "eval_episodes",
    "eval.seed": "eval_seed",
    "eval.task": "eval_task",
    "eval.horizon": "eval_horizon",
    "files.dataset": "dataset_path",
    "files.codebook": "codebook_path",
    "files.norm": "norm_path",
    "files.bpe": "bpe_path",
    "files.model": "model_path",
}
_FLAT_OF = {field: flat for flat, field in _KEYS.items()}
_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_FILE_KEYS = tuple(k for k in _KEYS if k.startswith("files."))


def _parse_value(flat_key: str, raw: str):
    kind = _TYPES[_KEYS[flat_key]]
    raw = raw.strip()
    if kind == "bool":
        if raw not in ("true", "false"):
            raise ValueError(f"{flat_key}: expected true or false, got {raw!r}")
        return raw == "true"
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{flat_key}: expected an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{flat_key}: expected a number, got {raw!r}") from None
    return raw


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Canonical snapshot: fixed key order, normalized values."""
    lines = [f"{flat} = {_render_value(getattr(cfg, field))}" for flat, field in _KEYS.items()]
    return "\n".join(lines) + "\n"


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse flat key=value text; later `overrides` (field name -> value) win."""
    values: dict[str, object] = {}
    seen: set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw_line.strip()!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[_KEYS[key]] = _parse_value(key, raw)
    if overrides:
        values.update(overrides)
    return RunConfig(**values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a config file; explicit artifact paths must exist and are
    resolved relative to the config file's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file does not exist: {path}")
    cfg = parse_config(path.read_text(), overrides)
    resolved: dict[str, str] = {}
    for flat in _FILE_KEYS:
        field = _KEYS[flat]
        value = getattr(cfg, field)
        if not value:
            continue
        target = Path(value)
        if not target.is_absolute():
            target = path.parent / target
        if not target.exists():
            raise FileNotFoundError(f"{flat} references a missing file: {target}")
        resolved[field] = str(target)
    return dataclasses.replace(cfg, **resolved) if resolved else cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
