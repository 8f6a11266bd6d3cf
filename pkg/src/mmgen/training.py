"""Dialog formatting with response-only loss masks, context drop, length
clustering and the staged finetuning loop."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .imagecodec import Codebook, RasterImage, encode_image
from .model import AdamWState, DecoderLM, adamw_step, loss, named_params
from .resolution import ResolutionBucket, fit_image, match_bucket
from .unirep import (
    SEG_STRUCT,
    SEG_TEXT,
    MultimodalSequence,
    build_t2i_prompt,
    encode_grid,
    grid_segments,
)
from .vocab import ASSISTANT, BOS, END_OF_TURN, PAD, SOI, USER, VocabManifest

log = logging.getLogger(__name__)


# -- records ----------------------------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    image: RasterImage


@dataclass(frozen=True)
class PromptPart:
    """Resolution-aware generation prompt.

    Without explicit dimensions it takes the bucket matched for the first image
    of the following assistant turn.
    """

    description: str
    width_px: int | None = None
    height_px: int | None = None


@dataclass(frozen=True)
class Turn:
    role: str  # "user" | "assistant"
    parts: tuple

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass(frozen=True)
class DialogRecord:
    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValueError("empty dialog")
        for i, turn in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise ValueError(f"turn {i} should be {expected}, got {turn.role}")
        if not any(t.role == "assistant" for t in self.turns):
            raise ValueError("dialog needs at least one assistant turn")


class TaskKind(enum.Enum):
    TEXT_TO_IMAGE = "text-to-image"
    CAPTIONING = "captioning"
    EDITING = "editing"
    DENSE_PREDICTION = "dense-prediction"
    SPATIAL_CONDITIONAL = "spatial-conditional"
    MULTIVIEW = "multiview"


CAPTION_INSTRUCTION = "Describe the image."
DENSE_INSTRUCTION = "Predict the {target} map of the image."
SPATIAL_INSTRUCTION = "Generate an image according to the {condition} map and the following prompt:\n{text}"
MULTIVIEW_INSTRUCTION = "Generate {k} views of the object according to the following prompt:\n{text}"


@dataclass(frozen=True)
class TaskRecord:
    """One training example before dialog formatting.

    ``text`` holds the prompt, caption, dense target name or edit instructions
    (a list for multi-turn editing); ``condition`` names the spatial condition.
    """

    kind: TaskKind
    text: str | tuple[str, ...] = ""
    inputs: tuple[RasterImage, ...] = ()
    targets: tuple[RasterImage, ...] = ()
    condition: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "targets", tuple(self.targets))
        if isinstance(self.text, list):
            object.__setattr__(self, "text", tuple(self.text))
        k = self.kind
        if k is TaskKind.MULTIVIEW and len(self.targets) < 2:
            raise ValueError("multiview needs k >= 2 target views")
        if k in (TaskKind.CAPTIONING, TaskKind.DENSE_PREDICTION, TaskKind.SPATIAL_CONDITIONAL, TaskKind.EDITING) and not self.inputs:
            raise ValueError(f"{k.value} needs an input image")
        if k is not TaskKind.CAPTIONING and not self.targets:
            raise ValueError(f"{k.value} needs a target image")


def task_to_dialog(record: TaskRecord) -> DialogRecord:
    k = record.kind
    if k is TaskKind.TEXT_TO_IMAGE:
        turns = [Turn("user", [PromptPart(record.text)]), Turn("assistant", [ImagePart(record.targets[0])])]
    elif k is TaskKind.CAPTIONING:
        turns = [
            Turn("user", [ImagePart(record.inputs[0]), TextPart(CAPTION_INSTRUCTION)]),
            Turn("assistant", [TextPart(record.text)]),
        ]
    elif k is TaskKind.EDITING:
        instructions = (record.text,) if isinstance(record.text, str) else record.text
        if len(instructions) != len(record.targets):
            raise ValueError("editing needs one target image per instruction")
        turns = []
        for i, (instruction, target) in enumerate(zip(instructions, record.targets)):
            user = [ImagePart(record.inputs[0]), TextPart(instruction)] if i == 0 else [TextPart(instruction)]
            turns += [Turn("user", user), Turn("assistant", [ImagePart(target)])]
    elif k is TaskKind.DENSE_PREDICTION:
        turns = [
            Turn("user", [ImagePart(record.inputs[0]), TextPart(DENSE_INSTRUCTION.format(target=record.text))]),
            Turn("assistant", [ImagePart(record.targets[0])]),
        ]
    elif k is TaskKind.SPATIAL_CONDITIONAL:
        text = SPATIAL_INSTRUCTION.format(condition=record.condition or "condition", text=record.text)
        turns = [
            Turn("user", [ImagePart(record.inputs[0]), TextPart(text)]),
            Turn("assistant", [ImagePart(record.targets[0])]),
        ]
    else:
        text = MULTIVIEW_INSTRUCTION.format(k=len(record.targets), text=record.text)
        turns = [Turn("user", [TextPart(text)]), Turn("assistant", [ImagePart(t) for t in record.targets])]
    return DialogRecord(tuple(turns))


# -- formatting -------------------------------------------------------------


@dataclass(frozen=True)
class ImageTokenizer:
    """Bundles what image parts need: codebook plus the active stage's buckets."""

    manifest: VocabManifest
    codebook: Codebook
    buckets: tuple[ResolutionBucket, ...]

    def bucket_for(self, image: RasterImage) -> ResolutionBucket:
        bucket = match_bucket(image.width, image.height, self.buckets)
        rows, cols = bucket.grid_shape(self.manifest.patch_px)
        if rows > self.manifest.max_side or cols > self.manifest.max_side:
            raise ValueError(f"bucket {bucket} exceeds max_side {self.manifest.max_side}")
        return bucket

    def tokens(self, image: RasterImage) -> tuple[list[int], list[str]]:
        fitted = fit_image(image, self.bucket_for(image))
        grid = encode_image(fitted, self.codebook, self.manifest.max_side)
        return encode_grid(self.manifest, grid), grid_segments(grid)


def _prompt_text(part: PromptPart, next_turn: Turn | None, images: ImageTokenizer | None) -> str:
    patch = images.manifest.patch_px if images else 1
    if part.width_px is not None and part.height_px is not None:
        return build_t2i_prompt(part.width_px, part.height_px, part.description, patch)
    target = None
    if next_turn is not None:
        target = next((p.image for p in next_turn.parts if isinstance(p, ImagePart)), None)
    if target is None or images is None:
        raise ValueError("prompt part needs explicit dimensions or a following assistant image")
    bucket = images.bucket_for(target)
    return build_t2i_prompt(bucket.width_px, bucket.height_px, part.description, patch)


def format_dialog(manifest: VocabManifest, record: DialogRecord, images: ImageTokenizer | None = None) -> MultimodalSequence:
    """BOS, then per turn: role marker, content, EndOfTurn.

    The loss mask covers assistant content and the assistant's EndOfTurn only.
    """
    seq = MultimodalSequence()
    seq.extend([BOS], [SEG_STRUCT], loss=False)
    turns = record.turns
    for i, turn in enumerate(turns):
        is_reply = turn.role == "assistant"
        seq.extend([ASSISTANT if is_reply else USER], [SEG_STRUCT], loss=False)
        for part in turn.parts:
            if isinstance(part, TextPart):
                toks = manifest.encode_text(part.text)
                seq.extend(toks, [SEG_TEXT] * len(toks), loss=is_reply)
            elif isinstance(part, PromptPart):
                nxt = turns[i + 1] if i + 1 < len(turns) else None
                toks = manifest.encode_text(_prompt_text(part, nxt, images))
                seq.extend(toks, [SEG_TEXT] * len(toks), loss=is_reply)
            elif isinstance(part, ImagePart):
                if images is None:
                    raise ValueError("image part without an image tokenizer")
                toks, segs = images.tokens(part.image)
                seq.extend(toks, segs, loss=is_reply)
            else:
                raise TypeError(f"unknown content part {part!r}")
        seq.extend([END_OF_TURN], [SEG_STRUCT], loss=is_reply)
    return seq


def format_task(manifest: VocabManifest, record: TaskRecord, images: ImageTokenizer | None = None) -> MultimodalSequence:
    return format_dialog(manifest, task_to_dialog(record), images)


def t2i_prompt_tokens(manifest: VocabManifest, description: str, width_px: int, height_px: int) -> list[int]:
    """Inference prompt: the user turn plus the assistant marker, ready for generation."""
    text = build_t2i_prompt(width_px, height_px, description, manifest.patch_px)
    return [BOS, USER, *manifest.encode_text(text), END_OF_TURN, ASSISTANT]


# -- augmentation and batching ----------------------------------------------


def apply_context_drop(seq: MultimodalSequence, p: float, rng: np.random.Generator) -> MultimodalSequence:
    """With probability ``p``, remove everything strictly between BOS and the first SOI."""
    try:
        first = seq.tokens.index(SOI)
    except ValueError:
        return seq
    if first <= 1 or rng.random() >= p:
        return seq
    return MultimodalSequence(
        seq.tokens[:1] + seq.tokens[first:],
        seq.loss_mask[:1] + seq.loss_mask[first:],
        seq.segments[:1] + seq.segments[first:],
    )


@dataclass
class PackedBatch:
    indices: list[int]
    sequences: list[MultimodalSequence]

    @property
    def max_len(self) -> int:
        return max(len(s) for s in self.sequences)

    @property
    def min_len(self) -> int:
        return min(len(s) for s in self.sequences)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(inputs, targets, mask), right-padded to the batch max; mask is false on padding."""
        width = self.max_len
        toks = torch.full((len(self.sequences), width), PAD, dtype=torch.long)
        mask = torch.zeros((len(self.sequences), width), dtype=torch.bool)
        for row, s in enumerate(self.sequences):
            toks[row, : len(s)] = torch.tensor(s.tokens)
            mask[row, : len(s)] = torch.tensor(s.loss_mask)
        return toks[:, :-1], toks[:, 1:], mask[:, 1:]


def cluster_batches(seqs: Sequence[MultimodalSequence], batch_size: int) -> list[PackedBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not seqs:
        raise ValueError("no sequences to batch")
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
    return [
        PackedBatch(chunk, [seqs[i] for i in chunk])
        for chunk in (order[k : k + batch_size] for k in range(0, len(order), batch_size))
    ]


# -- training loop ----------------------------------------------------------


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainHyper:
    lr: float = 2e-5
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    z_weight: float = 1e-5
    drop_p: float = 0.1
    batch_size: int = 8
    steps: int = 100
    seed: int = 0


@dataclass
class StepMetrics:
    stage: int
    step: int
    ce: float
    zloss: float
    total: float
    mean_abs_logz: float
    max_abs_logit: float
    tokens: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StageResult:
    stage: int
    metrics: list[StepMetrics] = field(default_factory=list)
    opt_state: AdamWState | None = None


def run_stage(
    model: DecoderLM,
    dataset: Sequence[MultimodalSequence],
    hyper: TrainHyper,
    stage: int = 0,
    opt_state: AdamWState | None = None,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> StageResult:
    """Train ``model`` in place for ``hyper.steps`` optimizer steps.

    Every epoch redraws context drops, re-clusters by length and shuffles batch
    order. Metrics are measured before each update.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([hyper.seed, stage])
    torch.manual_seed(hyper.seed * 1000 + stage)
    state = opt_state if opt_state is not None else AdamWState()
    params = named_params(model)
    result = StageResult(stage, opt_state=state)
    model.train()
    step = 0
    try:
        while step < hyper.steps:
            epoch = [apply_context_drop(s, hyper.drop_p, rng) for s in dataset]
            batches = cluster_batches(epoch, hyper.batch_size)
            for b in rng.permutation(len(batches)):
                if step >= hyper.steps:
                    break
                inputs, targets, mask = batches[b].tensors()
                model.zero_grad(set_to_none=True)
                out = loss(model(inputs), targets, mask, hyper.z_weight)
                ce, total = float(out.ce.detach()), float(out.total.detach())
                if not math.isfinite(ce) or not math.isfinite(total):
                    raise TrainingDiverged(f"non-finite loss at stage {stage} step {step}")
                out.total.backward()
                grads = {n: p.grad if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
                adamw_step(params, grads, state, hyper.lr, hyper.weight_decay, hyper.betas)
                m = StepMetrics(
                    stage, step, ce, float(out.zloss.detach()), total,
                    out.mean_abs_logz, out.max_abs_logit, int(mask.sum()),
                )
                result.metrics.append(m)
                if on_step is not None:
                    on_step(m)
                step += 1
    finally:
        model.zero_grad(set_to_none=True)
        model.eval()
    return result


def run_plan(
    model: DecoderLM,
    stage_datasets: Sequence[Sequence[MultimodalSequence]],
    hyper: TrainHyper | Sequence[TrainHyper],
    on_stage_end: Callable[[StageResult], None] | None = None,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> list[StageResult]:
    """Progressive stages; each stage starts from the previous stage's weights
    with a fresh optimizer state."""
    hypers = [hyper] * len(stage_datasets) if isinstance(hyper, TrainHyper) else list(hyper)
    results = []
    for i, (data, h) in enumerate(zip(stage_datasets, hypers)):
        res = run_stage(model, data, h, stage=i, on_step=on_step)
        log.info("stage %d done: ce %.4f -> %.4f", i, res.metrics[0].ce, res.metrics[-1].ce)
        results.append(res)
        if on_stage_end is not None:
            on_stage_end(res)
    return results


# -- synthetic desk data ----------------------------------------------------

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}


def stripe_image(width: int, height: int, first, second, period: int, vertical: bool = True) -> RasterImage:
    px = np.empty((height, width, 3))
    axis = np.arange(width if vertical else height)
    band = (axis // period) % 2 == 0
    for i, on in enumerate(band):
        value = np.asarray(first if on else second, dtype=np.float64)
        if vertical:
            px[:, i] = value
        else:
            px[i, :] = value
    return RasterImage(px)


def color_records(width_px: int, height_px: int, colors: Sequence[str] | None = None) -> list[TaskRecord]:
    names = list(colors) if colors is not None else list(COLORS)
    return [
        TaskRecord(TaskKind.TEXT_TO_IMAGE, name, targets=(RasterImage.solid(width_px, height_px, COLORS[name]),))
        for name in names
    ]


def stripe_records(width_px: int, height_px: int, period: int) -> list[TaskRecord]:
    pairs = [("red", "blue"), ("green", "black"), ("yellow", "magenta"), ("white", "cyan")]
    return [
        TaskRecord(
            TaskKind.TEXT_TO_IMAGE,
            f"{a} and {b} stripes",
            targets=(stripe_image(width_px, height_px, COLORS[a], COLORS[b], period),),
        )
        for a, b in pairs
    ]


def caption_records(width_px: int, height_px: int) -> list[TaskRecord]:
    return [
        TaskRecord(TaskKind.CAPTIONING, f"a {name} square", inputs=(RasterImage.solid(width_px, height_px, rgb),))
        for name, rgb in COLORS.items()
    ]


def palette_images(patch_px: int) -> list[RasterImage]:
    """One patch per desk color, for building the desk codebook."""
    return [RasterImage.solid(patch_px, patch_px, rgb) for rgb in COLORS.values()]
