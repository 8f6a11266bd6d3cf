"""Status-aware sampling with classifier-free guidance and grammar constraints.

Two sampler configurations are kept: one for text and one for image codes.
Sampling switches to the image configuration once SOI has been emitted and
back after EOI. While inside an image, a second (unconditional) stream that
only sees ``[BOS, SOI, ...]`` supplies the logits for guidance.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import DecoderLM, ForwardCache
from .unirep import validate
from .vocab import BOS, EOI, EOL, EOS, PAD, SOI, Role, VocabManifest, classify


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 1.0
    top_k: int = 5
    cfg_scale: float = 0.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "top_k": self.top_k, "cfg_scale": self.cfg_scale}


TEXT_DEFAULTS = DecodeParams(temperature=1.0, top_k=5, cfg_scale=0.0)
IMAGE_DEFAULTS = DecodeParams(temperature=1.0, top_k=2000, cfg_scale=4.0)


class Mode(enum.Enum):
    TEXT = "text"
    IMAGE = "image"


class Expect(enum.Enum):
    FREE = "free"
    HEIGHT = "height"
    WIDTH = "width"
    CODE = "code"
    EOL = "eol"
    EOI = "eoi"


def cfg_combine(cond, uncond, scale: float):
    """``cond + scale * (cond - uncond)``; works on numpy arrays or tensors."""
    if len(cond) != len(uncond):
        raise ValueError(f"logit length mismatch: {len(cond)} vs {len(uncond)}")
    if scale == 0:
        return cond
    return cond + scale * (cond - uncond)


@dataclass
class DecodeState:
    """Grammar cursor. ``violations`` counts tokens that broke the image grammar
    (only possible when sampling is unconstrained)."""

    mode: Mode = Mode.TEXT
    expect: Expect = Expect.FREE
    declared_h: int = 0
    declared_w: int = 0
    row: int = 0
    col: int = 0
    violations: int = 0

    def advance(self, manifest: VocabManifest, token: int) -> None:
        role = classify(manifest, token)
        if self.mode is Mode.TEXT:
            if token == SOI:
                self.mode, self.expect = Mode.IMAGE, Expect.HEIGHT
                self.declared_h = self.declared_w = self.row = self.col = 0
            elif token in (EOI, EOL) or role.kind in (Role.HEIGHT, Role.WIDTH, Role.CODE):
                self.violations += 1
            return
        if token == EOI:
            if self.expect is not Expect.EOI:
                self.violations += 1
            self.mode, self.expect = Mode.TEXT, Expect.FREE
            return
        e = self.expect
        if e is Expect.HEIGHT and role.kind is Role.HEIGHT:
            self.declared_h, self.expect = role.value, Expect.WIDTH
        elif e is Expect.WIDTH and role.kind is Role.WIDTH:
            self.declared_w, self.expect = role.value, Expect.CODE
        elif e is Expect.CODE and role.kind is Role.CODE:
            self.col += 1
            if self.col == self.declared_w:
                self.expect = Expect.EOL
        elif e is Expect.EOL and token == EOL:
            self.row += 1
            self.col = 0
            self.expect = Expect.EOI if self.row == self.declared_h else Expect.CODE
        else:
            self.violations += 1

    def check(self) -> None:
        if self.mode is Mode.TEXT and self.expect is not Expect.FREE:
            raise ValueError("text mode with an image expectation")
        if self.mode is Mode.IMAGE and self.expect is Expect.FREE:
            raise ValueError("image mode without an expectation")
        if self.expect in (Expect.CODE, Expect.EOL, Expect.EOI):
            if not (1 <= self.declared_h and 1 <= self.declared_w):
                raise ValueError("cursor past indicators without a declared shape")
            if self.col > self.declared_w or self.row > self.declared_h:
                raise ValueError("cursor beyond declared bounds")


def constraint_mask(state: DecodeState, manifest: VocabManifest) -> np.ndarray:
    """Boolean array over the vocabulary of tokens the grammar permits next."""
    state.check()
    allowed = np.zeros(manifest.total, dtype=bool)
    e = state.expect
    if e is Expect.HEIGHT:
        allowed[manifest.height_base : manifest.width_base] = True
    elif e is Expect.WIDTH:
        allowed[manifest.width_base : manifest.text_base] = True
    elif e is Expect.CODE:
        allowed[manifest.code_base : manifest.total] = True
    elif e is Expect.EOL:
        allowed[EOL] = True
    elif e is Expect.EOI:
        allowed[EOI] = True
    else:
        allowed[: manifest.code_base] = True
        allowed[[PAD, EOI, EOL]] = False
        allowed[manifest.height_base : manifest.text_base] = False
    return allowed


def sampling_probs(logits, params: DecodeParams, allowed=None) -> np.ndarray:
    """Distribution sampled by ``sample_step``: constraint mask, then top-k,
    then temperature, then softmax. Ties at the k-th place keep lower ids."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single logit vector")
    if allowed is None:
        allowed = np.ones(x.shape, dtype=bool)
    else:
        allowed = np.asarray(allowed, dtype=bool)
    candidates = np.flatnonzero(allowed)
    if candidates.size == 0:
        raise ValueError("empty allowed set")
    if not np.all(np.isfinite(x[candidates])):
        raise ValueError("non-finite logits among allowed tokens")
    k = min(params.top_k, candidates.size)
    order = np.argsort(-x[candidates], kind="stable")[:k]
    keep = candidates[order]
    z = x[keep] / params.temperature
    z = np.exp(z - z.max())
    probs = np.zeros_like(x)
    probs[keep] = z / z.sum()
    return probs


def sample_step(logits, params: DecodeParams, allowed, rng: np.random.Generator) -> int:
    probs = sampling_probs(logits, params, allowed)
    cdf = np.cumsum(probs)
    # side="right" skips zero-probability entries (their cdf equals the previous one)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


# -- streams ----------------------------------------------------------------


class _Stream:
    """One model context. With ``use_cache`` it keeps a KV cache; otherwise the
    full context is recomputed each step (reference path)."""

    def __init__(self, model: DecoderLM, tokens: Sequence[int], use_cache: bool):
        self.model = model
        self.use_cache = use_cache
        self.tokens = list(tokens)
        self.cache = ForwardCache(model.config) if use_cache else None
        self.last_logits = self._run(self.tokens)

    @torch.no_grad()
    def _run(self, new: Sequence[int]) -> np.ndarray:
        if self.use_cache:
            out = self.model(torch.tensor([list(new)], dtype=torch.long), self.cache)
        else:
            out = self.model(torch.tensor([self.tokens], dtype=torch.long))
        return out[0, -1].double().numpy().copy()

    def push(self, token: int) -> None:
        self.tokens.append(token)
        self.last_logits = self._run([token])


@dataclass
class TraceStep:
    token: int
    mode: Mode
    params: DecodeParams
    logit: float  # conditional logit of the sampled token


@dataclass
class GenerationResult:
    prompt: list[int]
    tokens: list[int]
    modes: list[Mode]
    seed: int
    text_params: DecodeParams
    image_params: DecodeParams
    constrained: bool
    trace: list[TraceStep] = field(default_factory=list)
    stop_reason: str = "max_tokens"
    truncated_image: bool = False

    @property
    def sequence(self) -> list[int]:
        return self.prompt + self.tokens

    def well_formed(self, manifest: VocabManifest) -> bool:
        return not self.truncated_image and validate(manifest, self.sequence).well_formed

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "tokens": self.tokens,
            "modes": [m.value for m in self.modes],
            "seed": self.seed,
            "text_params": self.text_params.to_dict(),
            "image_params": self.image_params.to_dict(),
            "constrained": self.constrained,
            "stop_reason": self.stop_reason,
            "truncated_image": self.truncated_image,
        }


def _unconditional_context(tokens: Sequence[int]) -> list[int]:
    start = len(tokens) - 1 - list(reversed(tokens)).index(SOI)
    return [BOS, *tokens[start:]]


@torch.no_grad()
def generate(
    model: DecoderLM,
    manifest: VocabManifest,
    prompt: Sequence[int],
    text_params: DecodeParams = TEXT_DEFAULTS,
    image_params: DecodeParams = IMAGE_DEFAULTS,
    seed: int = 0,
    max_tokens: int = 256,
    constrained: bool = True,
    use_cache: bool = True,
    observer=None,
) -> GenerationResult:
    """Sample up to ``max_tokens`` tokens after ``prompt``.

    The unconditional stream exists only while inside an image and only when
    ``image_params.cfg_scale`` is non-zero (at scale 0 guidance is the identity).
    Generation stops at EOS in text mode. ``observer(cond_tokens, uncond_tokens)``,
    if given, is called before every sampling step (``uncond_tokens`` is None
    without guidance).
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("empty prompt")
    if len(prompt) + max_tokens > model.config.max_seq:
        raise ValueError(f"prompt ({len(prompt)}) + max_tokens ({max_tokens}) exceeds max_seq {model.config.max_seq}")
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed)

    state = DecodeState()
    for t in prompt:
        state.advance(manifest, t)
    if state.violations:
        raise ValueError("prompt is not well-formed")

    guided = image_params.cfg_scale != 0
    cond = _Stream(model, prompt, use_cache)
    uncond = _Stream(model, _unconditional_context(prompt), use_cache) if guided and state.mode is Mode.IMAGE else None

    result = GenerationResult(prompt, [], [], seed, text_params, image_params, constrained)
    for _ in range(max_tokens):
        mode = state.mode
        if observer is not None:
            observer(list(cond.tokens), list(uncond.tokens) if uncond else None)
        if mode is Mode.IMAGE:
            params = image_params
            logits = cfg_combine(cond.last_logits, uncond.last_logits, params.cfg_scale) if uncond else cond.last_logits
        else:
            params = text_params
            logits = cond.last_logits
        allowed = constraint_mask(state, manifest) if constrained else None
        token = sample_step(logits, params, allowed, rng)

        result.tokens.append(token)
        result.modes.append(mode)
        result.trace.append(TraceStep(token, mode, params, float(cond.last_logits[token])))
        state.advance(manifest, token)

        if mode is Mode.TEXT and token == EOS:
            result.stop_reason = "eos"
            break
        if len(result.tokens) == max_tokens:
            break
        cond.push(token)
        if state.mode is Mode.IMAGE:
            if token == SOI:
                uncond = _Stream(model, [BOS, SOI], use_cache) if guided else None
            elif uncond is not None:
                uncond.push(token)
        else:
            uncond = None

    result.truncated_image = state.mode is Mode.IMAGE
    if result.truncated_image:
        result.stop_reason = "max_tokens_in_image"
    model.train(was_training)
    return result
