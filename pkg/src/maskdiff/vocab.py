"""Flat token-id space shared by text, image, and action modalities.

All modalities live in one contiguous id range so a single model head can
predict any of them. Ordering is fixed: text ids first, then image ids,
then action ids, then (unless folded into text) the special tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

LAYOUT_FILE_VERSION = 1

# Canonical special-token order. [PAD] exists purely for fixed-length
# batching and is never a loss target.
SPECIAL_TOKENS = ("[BOS]", "[EOS]", "[BOI]", "[EOI]", "[BOA]", "[EOA]", "[MASK]", "[PAD]")

MODALITIES = ("text", "image", "action", "special")


@dataclass(frozen=True)
class LayoutProfile:
    """Sizing knobs for a VocabLayout."""

    text_size: int
    image_size: int
    action_size: int
    specials: tuple[str, ...] = SPECIAL_TOKENS
    # Large pretrained stacks reserve special ids inside the text range;
    # standalone profiles append them after the action range.
    specials_in_text: bool = False


# The published configuration: 126,464 text ids (specials folded in),
# an 8,192-entry image codebook, and a 2,048-id action vocabulary,
# totalling 136,704.
PUBLISHED_PROFILE = LayoutProfile(
    text_size=126_464, image_size=8_192, action_size=2_048, specials_in_text=True
)

# Desk-scale profile: small enough for exhaustive id round-trip tests.
DESK_PROFILE = LayoutProfile(text_size=512, image_size=256, action_size=128)


@dataclass(frozen=True)
class VocabLayout:
    """Partition of [0, total_size) into per-modality id ranges.

    Immutable after construction and safe to share across threads.
    """

    text_size: int
    image_size: int
    action_size: int
    specials: tuple[str, ...]
    specials_in_text: bool
    _special_ids: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        for name, size in (
            ("text_size", self.text_size),
            ("image_size", self.image_size),
            ("action_size", self.action_size),
        ):
            if size < 1:
                raise ValueError(f"{name} must be >= 1, got {size}")
        if len(set(self.specials)) != len(self.specials):
            raise ValueError(f"duplicate special token names: {self.specials}")
        if self.specials_in_text and len(self.specials) > self.text_size:
            raise ValueError("more specials than text ids to fold them into")
        if self.specials_in_text:
            # Folded specials occupy the top of the text range, mirroring the
            # convention of reserving rarely-used ids at the end.
            base = self.text_size - len(self.specials)
        else:
            base = self.text_size + self.image_size + self.action_size
        self._special_ids.update({name: base + i for i, name in enumerate(self.specials)})

    @property
    def total_size(self) -> int:
        n_special = 0 if self.specials_in_text else len(self.specials)
        return self.text_size + self.image_size + self.action_size + n_special

    @property
    def image_offset(self) -> int:
        return self.text_size

    @property
    def action_offset(self) -> int:
        return self.text_size + self.image_size

    def modality_range(self, modality: str) -> range:
        if modality == "text":
            return range(0, self.text_size)
        if modality == "image":
            return range(self.image_offset, self.image_offset + self.image_size)
        if modality == "action":
            return range(self.action_offset, self.action_offset + self.action_size)
        if modality == "special":
            if self.specials_in_text:
                return range(0, 0)
            start = self.action_offset + self.action_size
            return range(start, start + len(self.specials))
        raise ValueError(f"unknown modality {modality!r}")

    def to_global(self, modality: str, local_index: int) -> int:
        r = self.modality_range(modality)
        if not 0 <= local_index < len(r):
            raise ValueError(
                f"{modality} local index {local_index} out of range [0, {len(r)})"
            )
        return r.start + local_index

    def to_local(self, token_id: int) -> tuple[str, int]:
        if not 0 <= token_id < self.total_size:
            raise ValueError(f"token id {token_id} out of range [0, {self.total_size})")
        for modality in MODALITIES:
            r = self.modality_range(modality)
            if token_id in r:
                return modality, token_id - r.start
        raise AssertionError("unreachable: ranges tile the id space")

    def modality_of(self, token_id: int) -> str:
        return self.to_local(token_id)[0]

    def special_id(self, name: str) -> int:
        try:
            return self._special_ids[name]
        except KeyError:
            raise ValueError(f"unknown special token {name!r}") from None

    @property
    def mask_id(self) -> int:
        return self.special_id("[MASK]")

    @property
    def pad_id(self) -> int:
        return self.special_id("[PAD]")

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids.values()


def build_layout(profile: LayoutProfile) -> VocabLayout:
    """Build a layout from a profile; deterministic and fully validated."""
    return VocabLayout(
        text_size=profile.text_size,
        image_size=profile.image_size,
        action_size=profile.action_size,
        specials=tuple(profile.specials),
        specials_in_text=profile.specials_in_text,
    )


def desk_layout() -> VocabLayout:
    return build_layout(DESK_PROFILE)


def published_layout() -> VocabLayout:
    return build_layout(PUBLISHED_PROFILE)


def dump_layout(layout: VocabLayout) -> str:
    """Serialize to the line-oriented layout file format."""
    lines = [
        f"version={LAYOUT_FILE_VERSION}",
        f"text_size={layout.text_size}",
        f"image_size={layout.image_size}",
        f"action_size={layout.action_size}",
        f"specials_in_text={int(layout.specials_in_text)}",
    ]
    lines += [f"special.{i}={name}" for i, name in enumerate(layout.specials)]
    return "\n".join(lines) + "\n"


def parse_layout(text: str) -> VocabLayout:
    fields: dict[str, str] = {}
    specials: dict[int, str] = {}
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("version="):
        raise ValueError("layout file must start with a version line")
    for ln in lines:
        key, sep, value = ln.partition("=")
        if not sep:
            raise ValueError(f"malformed layout line: {ln!r}")
        if key.startswith("special."):
            specials[int(key.split(".", 1)[1])] = value
        else:
            fields[key] = value
    version = int(fields["version"])
    if version != LAYOUT_FILE_VERSION:
        raise ValueError(f"unsupported layout file version {version}")
    names = tuple(specials[i] for i in sorted(specials))
    if sorted(specials) != list(range(len(specials))):
        raise ValueError("special token indices must be contiguous from 0")
    return VocabLayout(
        text_size=int(fields["text_size"]),
        image_size=int(fields["image_size"]),
        action_size=int(fields["action_size"]),
        specials=names,
        specials_in_text=bool(int(fields.get("specials_in_text", "0"))),
    )


def save_layout(layout: VocabLayout, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_layout(layout))


def load_layout(path) -> VocabLayout:
    with open(path) as fh:
        return parse_layout(fh.read())
