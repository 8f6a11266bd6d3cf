"""Unambiguous image serialization.

An image span is ``SOI H(h) W(w) (code*w EOL)*h EOI``: the shape is known from
the first three tokens, and every row (including the last) is closed by EOL.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .vocab import EOI, EOL, SOI, Axis, Role, VocabManifest, classify, indicator_token

SEG_TEXT = "text"
SEG_IMAGE = "image"
SEG_STRUCT = "struct"

PROMPT_TEMPLATE = "Generate an image of {width}x{height} according to the following prompt:\n{description}"


@dataclass(frozen=True)
class ImageTokenGrid:
    height: int
    width: int
    codes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid shape must be positive, got {self.height}x{self.width}")
        if len(self.codes) != self.height * self.width:
            raise ValueError(f"expected {self.height * self.width} codes, got {len(self.codes)}")

    def rows(self) -> list[tuple[int, ...]]:
        w = self.width
        return [self.codes[r * w : (r + 1) * w] for r in range(self.height)]

    def check(self, manifest: VocabManifest) -> None:
        if self.height > manifest.max_side or self.width > manifest.max_side:
            raise ValueError(f"grid {self.height}x{self.width} exceeds max_side {manifest.max_side}")
        bad = [c for c in self.codes if not 0 <= c < manifest.codebook_size]
        if bad:
            raise ValueError(f"codes outside [0, {manifest.codebook_size}): {bad[:5]}")


@dataclass
class MultimodalSequence:
    tokens: list[int] = field(default_factory=list)
    loss_mask: list[bool] = field(default_factory=list)
    segments: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.tokens) == len(self.loss_mask) == len(self.segments):
            raise ValueError("tokens, loss_mask and segments must have equal length")

    def __len__(self) -> int:
        return len(self.tokens)

    def extend(self, tokens: Sequence[int], segments: Sequence[str], loss: bool) -> None:
        if len(tokens) != len(segments):
            raise ValueError("tokens and segments must have equal length")
        self.tokens.extend(tokens)
        self.segments.extend(segments)
        self.loss_mask.extend([loss] * len(tokens))


class UniRepError(ValueError):
    """Malformed image span; ``position`` is the offending token index."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class MissingIndicator(UniRepError):
    pass


class RowOverrun(UniRepError):
    pass


class MissingEol(UniRepError):
    pass


class MissingEoi(UniRepError):
    pass


class ForeignToken(UniRepError):
    pass


class Truncated(UniRepError):
    pass


def encode_grid(manifest: VocabManifest, grid: ImageTokenGrid) -> list[int]:
    grid.check(manifest)
    out = [
        SOI,
        indicator_token(manifest, Axis.HEIGHT, grid.height),
        indicator_token(manifest, Axis.WIDTH, grid.width),
    ]
    base = manifest.code_base
    for row in grid.rows():
        out.extend(base + c for c in row)
        out.append(EOL)
    out.append(EOI)
    return out


def grid_segments(grid: ImageTokenGrid) -> list[str]:
    return [SEG_STRUCT] * 3 + ([SEG_IMAGE] * grid.width + [SEG_STRUCT]) * grid.height + [SEG_STRUCT]


def span_length(height: int, width: int) -> int:
    return 3 + height * (width + 1) + 1


def parse_image(manifest: VocabManifest, tokens: Sequence[int], start: int = 0) -> tuple[ImageTokenGrid, int]:
    """Parse the span starting at ``tokens[start]`` (must be SOI).

    Returns the grid and the index one past EOI. The shape comes from the
    indicator tokens alone; code values are never consulted.
    """
    n = len(tokens)

    def at(i: int) -> int:
        if i >= n:
            raise Truncated("sequence ended inside image span", i)
        return tokens[i]

    if at(start) != SOI:
        raise ValueError(f"expected SOI at position {start}, got {tokens[start]}")
    h_role = classify(manifest, at(start + 1))
    if h_role.kind is not Role.HEIGHT:
        raise MissingIndicator(f"expected height indicator, got {h_role}", start + 1)
    w_role = classify(manifest, at(start + 2))
    if w_role.kind is not Role.WIDTH:
        raise MissingIndicator(f"expected width indicator, got {w_role}", start + 2)
    height, width = h_role.value, w_role.value

    codes: list[int] = []
    i = start + 3
    for _ in range(height):
        for _ in range(width):
            tok = at(i)
            if not manifest.is_code(tok):
                raise ForeignToken(f"expected image code, got {classify(manifest, tok)}", i)
            codes.append(tok - manifest.code_base)
            i += 1
        tok = at(i)
        if tok != EOL:
            if manifest.is_code(tok):
                raise RowOverrun(f"row longer than declared width {width}", i)
            raise MissingEol(f"expected EOL, got {classify(manifest, tok)}", i)
        i += 1
    tok = at(i)
    if tok != EOI:
        raise MissingEoi(f"expected EOI after {height} rows, got {classify(manifest, tok)}", i)
    return ImageTokenGrid(height, width, codes), i + 1


def build_t2i_prompt(width_px: int, height_px: int, description: str, patch_px: int = 1) -> str:
    if width_px < 1 or height_px < 1:
        raise ValueError("image dimensions must be positive")
    if width_px % patch_px or height_px % patch_px:
        raise ValueError(f"{width_px}x{height_px} is not a multiple of patch size {patch_px}")
    return PROMPT_TEMPLATE.format(width=width_px, height=height_px, description=description)


@dataclass(frozen=True)
class SpanReport:
    start: int
    end: int | None
    ok: bool
    error: str | None = None
    error_position: int | None = None
    shape: tuple[int, int] | None = None


@dataclass(frozen=True)
class ValidationReport:
    spans: tuple[SpanReport, ...]

    @property
    def well_formed(self) -> bool:
        return all(s.ok for s in self.spans)

    def to_dict(self) -> dict:
        return {
            "well_formed": self.well_formed,
            "spans": [
                {
                    "start": s.start,
                    "end": s.end,
                    "ok": s.ok,
                    "error": s.error,
                    "error_position": s.error_position,
                    "shape": list(s.shape) if s.shape else None,
                }
                for s in self.spans
            ],
        }


def validate(manifest: VocabManifest, tokens: Sequence[int]) -> ValidationReport:
    spans = []
    i = 0
    n = len(tokens)
    while i < n:
        if tokens[i] != SOI:
            i += 1
            continue
        try:
            grid, end = parse_image(manifest, tokens, i)
        except UniRepError as err:
            spans.append(SpanReport(i, None, False, type(err).__name__, err.position))
            i += 1
            continue
        spans.append(SpanReport(i, end, True, shape=(grid.height, grid.width)))
        i = end
    return ValidationReport(tuple(spans))


def find_spans(manifest: VocabManifest, tokens: Sequence[int]) -> list[tuple[int, int, ImageTokenGrid]]:
    """(start, end, grid) for every well-formed span."""
    found = []
    for span in validate(manifest, tokens).spans:
        if span.ok:
            grid, _ = parse_image(manifest, tokens, span.start)
            found.append((span.start, span.end, grid))
    return found
