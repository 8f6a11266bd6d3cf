"""Unified token id space for text bytes, image codes and special markers.

Layout (fixed, bit-exact)::

    0 Pad  1 BOS  2 EOS  3 SOI  4 EOI  5 EOL  6 UserMark  7 AssistantMark  8 EndOfTurn
    9 .. 8+max_side                      HeightInd(1..max_side)
    9+max_side .. 8+2*max_side           WidthInd(1..max_side)
    9+2*max_side ..                      Text(0..text_size-1)
    9+2*max_side+text_size ..            ImageCode(0..codebook_size-1)

Indicator values are in patch units.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

FORMAT_VERSION = 1

PAD, BOS, EOS, SOI, EOI, EOL, USER, ASSISTANT, END_OF_TURN = range(9)
NUM_SPECIALS = 9


class Role(enum.Enum):
    PAD = "Pad"
    BOS = "BOS"
    EOS = "EOS"
    SOI = "SOI"
    EOI = "EOI"
    EOL = "EOL"
    USER = "UserMark"
    ASSISTANT = "AssistantMark"
    END_OF_TURN = "EndOfTurn"
    HEIGHT = "HeightInd"
    WIDTH = "WidthInd"
    TEXT = "Text"
    CODE = "ImageCode"


_SPECIAL_ROLES = (
    Role.PAD,
    Role.BOS,
    Role.EOS,
    Role.SOI,
    Role.EOI,
    Role.EOL,
    Role.USER,
    Role.ASSISTANT,
    Role.END_OF_TURN,
)


class Axis(enum.Enum):
    HEIGHT = "height"
    WIDTH = "width"


@dataclass(frozen=True)
class TokenRole:
    """Role of a token id. ``value`` is the indicator value, text index or code index."""

    kind: Role
    value: int | None = None

    def __str__(self) -> str:
        return self.kind.value if self.value is None else f"{self.kind.value}({self.value})"


@dataclass(frozen=True)
class VocabManifest:
    text_size: int
    codebook_size: int
    max_side: int
    patch_px: int

    def __post_init__(self):
        for name in ("text_size", "codebook_size", "max_side", "patch_px"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def height_base(self) -> int:
        return NUM_SPECIALS

    @property
    def width_base(self) -> int:
        return NUM_SPECIALS + self.max_side

    @property
    def text_base(self) -> int:
        return NUM_SPECIALS + 2 * self.max_side

    @property
    def code_base(self) -> int:
        return self.text_base + self.text_size

    @property
    def total(self) -> int:
        return self.code_base + self.codebook_size

    def block_sizes(self) -> dict[str, int]:
        return {
            "special": NUM_SPECIALS,
            "height": self.max_side,
            "width": self.max_side,
            "text": self.text_size,
            "code": self.codebook_size,
        }

    # -- id constructors -------------------------------------------------
    def code_token(self, index: int) -> int:
        if not 0 <= index < self.codebook_size:
            raise ValueError(f"image code {index} outside [0, {self.codebook_size})")
        return self.code_base + index

    def text_token(self, index: int) -> int:
        if not 0 <= index < self.text_size:
            raise ValueError(f"text index {index} outside [0, {self.text_size})")
        return self.text_base + index

    def is_code(self, token: int) -> bool:
        return self.code_base <= token < self.total

    def is_text(self, token: int) -> bool:
        return self.text_base <= token < self.code_base

    def code_of(self, token: int) -> int:
        if not self.is_code(token):
            raise ValueError(f"token {token} is not an image code")
        return token - self.code_base

    # -- text ------------------------------------------------------------
    def encode_text(self, text: str) -> list[int]:
        """Byte-level tokenization; bytes fold modulo ``text_size`` when it is below 256."""
        return [self.text_base + (b % self.text_size) for b in text.encode("utf-8")]

    def decode_text(self, tokens) -> str:
        data = bytes((t - self.text_base) % 256 for t in tokens if self.is_text(t))
        return data.decode("utf-8", errors="replace")

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "VocabManifest":
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format_version {version!r}")
        return cls(
            text_size=data["text_size"],
            codebook_size=data["codebook_size"],
            max_side=data["max_side"],
            patch_px=data["patch_px"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "VocabManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_vocab(text_size: int = 256, codebook_size: int = 8192, max_side: int = 16, patch_px: int = 8) -> VocabManifest:
    return VocabManifest(text_size, codebook_size, max_side, patch_px)


def classify(manifest: VocabManifest, token: int) -> TokenRole:
    if not isinstance(token, int) or isinstance(token, bool):
        token = int(token)
    if token < 0 or token >= manifest.total:
        raise ValueError(f"token id {token} outside [0, {manifest.total})")
    if token < NUM_SPECIALS:
        return TokenRole(_SPECIAL_ROLES[token])
    if token < manifest.width_base:
        return TokenRole(Role.HEIGHT, token - manifest.height_base + 1)
    if token < manifest.text_base:
        return TokenRole(Role.WIDTH, token - manifest.width_base + 1)
    if token < manifest.code_base:
        return TokenRole(Role.TEXT, token - manifest.text_base)
    return TokenRole(Role.CODE, token - manifest.code_base)


def indicator_token(manifest: VocabManifest, axis: Axis | str, value: int) -> int:
    axis = Axis(axis)
    if not 1 <= value <= manifest.max_side:
        raise ValueError(f"{axis.value} indicator {value} outside [1, {manifest.max_side}]")
    base = manifest.height_base if axis is Axis.HEIGHT else manifest.width_base
    return base + value - 1


def role_label(manifest: VocabManifest, token: int) -> str:
    """Coarse role name used in reports (indicator/text/code values dropped)."""
    return classify(manifest, token).kind.value
