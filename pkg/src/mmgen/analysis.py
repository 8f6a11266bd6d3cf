"""Reports: attention profile of the last image token, decoding sweeps, and
logit-magnitude comparison between training runs."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoding import DecodeParams, TEXT_DEFAULTS, generate
from .imagecodec import Codebook, decode_grid, write_ppm
from .model import DecoderLM, attention_probe
from .training import StepMetrics, t2i_prompt_tokens
from .unirep import find_spans
from .vocab import SOI, VocabManifest, role_label

SUMMARY_ROLES = ("SOI", "EOL", "HeightInd", "WidthInd", "ImageCode", "Text", "Other")


# -- attention --------------------------------------------------------------


@dataclass
class AttnReport:
    query_position: int
    tokens: list[int]
    labels: list[str]
    scores: list[float]  # head/layer average; zero after the query (causal)
    per_layer: np.ndarray  # (layers, query_position + 1), averaged over heads
    max_row_error: float  # max |sum(row) - 1| over every layer/head row
    role_summary: dict[str, dict]

    def __len__(self) -> int:
        return len(self.scores)

    def to_table(self) -> str:
        lines = ["position\ttoken\trole\tscore"]
        lines += [f"{i}\t{t}\t{r}\t{s:.6f}" for i, (t, r, s) in enumerate(zip(self.tokens, self.labels, self.scores))]
        lines += ["", "role\tcount\tmean_score\ttotal_score"]
        for role, row in self.role_summary.items():
            lines.append(f"{role}\t{row['count']}\t{row['mean']:.6f}\t{row['total']:.6f}")
        return "\n".join(lines) + "\n"


def attn_report(model: DecoderLM, manifest: VocabManifest, tokens: Sequence[int]) -> AttnReport:
    """Probe attention from the last image-code token of the last complete image span."""
    tokens = [int(t) for t in tokens]
    spans = find_spans(manifest, tokens)
    if not spans:
        raise ValueError("sequence contains no complete image span")
    _, end, _ = spans[-1]
    query = end - 3  # ... code EOL EOI
    probe = attention_probe(model, tokens, query, manifest)
    per_head = probe.per_head.double().numpy()
    avg = probe.average.double().numpy()
    scores = [float(avg[i]) if i <= query else 0.0 for i in range(len(tokens))]
    labels = [role_label(manifest, t) for t in tokens]

    summary = {}
    for role in SUMMARY_ROLES:
        idx = [
            i for i in range(query + 1)
            if labels[i] == role or (role == "Other" and labels[i] not in SUMMARY_ROLES)
        ]
        total = float(sum(avg[i] for i in idx))
        summary[role] = {"count": len(idx), "mean": total / len(idx) if idx else 0.0, "total": total}
    return AttnReport(
        query_position=query,
        tokens=tokens,
        labels=labels,
        scores=scores,
        per_layer=per_head.mean(axis=1),
        max_row_error=float(np.abs(per_head.sum(axis=-1) - 1.0).max()),
        role_summary=summary,
    )


# -- decoding sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    prompt: str
    width_px: int
    height_px: int
    temperatures: tuple[float, ...] = (0.7, 1.0)
    top_ks: tuple[int, ...] = (50, 2000)
    cfg_scales: tuple[float, ...] = (4.0,)
    seeds: tuple[int, ...] = (0,)
    text_params: DecodeParams = TEXT_DEFAULTS
    max_tokens: int = 300
    prefill_soi: bool = True

    def __post_init__(self):
        for name in ("temperatures", "top_ks", "cfg_scales", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    def cells(self) -> list[tuple[float, int, float, int]]:
        return list(itertools.product(self.temperatures, self.top_ks, self.cfg_scales, self.seeds))


@dataclass
class SweepRow:
    temperature: float
    top_k: int
    cfg_scale: float
    seed: int
    well_formed: bool
    distinct_codes: int
    mean_abs_logit: float
    image: str | None
    error: str | None = None


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)

    def to_table(self) -> str:
        lines = ["temperature\ttop_k\tcfg_scale\tseed\twell_formed\tdistinct_codes\tmean_abs_logit\timage\terror"]
        for r in self.rows:
            lines.append(
                f"{r.temperature:g}\t{r.top_k}\t{r.cfg_scale:g}\t{r.seed}\t{int(r.well_formed)}\t"
                f"{r.distinct_codes}\t{r.mean_abs_logit:.6f}\t{r.image or '-'}\t{r.error or '-'}"
            )
        return "\n".join(lines) + "\n"


def sweep(
    model: DecoderLM,
    manifest: VocabManifest,
    codebook: Codebook,
    spec: SweepSpec,
    out_dir=None,
) -> SweepReport:
    """One constrained generation per (temperature, top_k, cfg, seed) cell.

    Images and ``sweep.tsv`` go to ``out_dir`` when given. A failing cell is
    recorded with its error and the sweep continues.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    prompt = t2i_prompt_tokens(manifest, spec.prompt, spec.width_px, spec.height_px)
    if spec.prefill_soi:
        prompt = prompt + [SOI]
    report = SweepReport()
    for i, (temp, k, cfg, seed) in enumerate(spec.cells()):
        try:
            res = generate(
                model, manifest, prompt, spec.text_params, DecodeParams(temp, k, cfg),
                seed=seed, max_tokens=spec.max_tokens, constrained=True,
            )
            seq = res.sequence
            spans = find_spans(manifest, seq)
            image_path = None
            distinct = 0
            if spans:
                grid = spans[0][2]
                distinct = len(set(grid.codes))
                if out is not None:
                    image_path = f"cell{i:04d}_T{temp:g}_k{k}_cfg{cfg:g}_s{seed}.ppm"
                    write_ppm(out / image_path, decode_grid(grid, codebook))
            image_logits = [abs(s.logit) for s in res.trace if s.mode.value == "image"]
            report.rows.append(
                SweepRow(temp, k, cfg, seed, res.well_formed(manifest) and bool(spans), distinct,
                         float(np.mean(image_logits)) if image_logits else 0.0, image_path)
            )
        except Exception as err:  # recorded per cell
            report.rows.append(SweepRow(temp, k, cfg, seed, False, 0, 0.0, None, f"{type(err).__name__}: {err}"))
    if out is not None:
        (out / "sweep.tsv").write_text(report.to_table())
    return report


def topk_trend(report: SweepReport) -> dict:
    """Mean distinct-code count per top_k and the fraction of adjacent top_k
    steps where that mean does not decrease."""
    by_k: dict[int, list[int]] = {}
    for r in report.rows:
        if r.error is None:
            by_k.setdefault(r.top_k, []).append(r.distinct_codes)
    ks = sorted(by_k)
    means = {k: float(np.mean(by_k[k])) for k in ks}
    steps = list(zip(ks, ks[1:]))
    frac = sum(means[b] >= means[a] for a, b in steps) / len(steps) if steps else 1.0
    return {"mean_distinct": means, "non_decreasing_fraction": frac}


# -- z-loss / logit magnitude -----------------------------------------------


@dataclass
class LogitComparison:
    steps: int
    rows: list[tuple[int, float, float, float, float]]  # step, zloss_a, zloss_b, max_a, max_b
    final_mean_a: float
    final_mean_b: float
    final_max_a: float
    final_max_b: float

    @property
    def ratio(self) -> float:
        """final mean (log Z)^2 of B over A."""
        if self.final_mean_a == 0:
            return 1.0 if self.final_mean_b == 0 else float("inf")
        return self.final_mean_b / self.final_mean_a

    def to_table(self) -> str:
        lines = ["step\tlogz_sq_a\tlogz_sq_b\tmax_logit_a\tmax_logit_b"]
        lines += [f"{s}\t{a:.6f}\t{b:.6f}\t{ma:.6f}\t{mb:.6f}" for s, a, b, ma, mb in self.rows]
        lines.append(f"final\t{self.final_mean_a:.6f}\t{self.final_mean_b:.6f}\t{self.final_max_a:.6f}\t{self.final_max_b:.6f}")
        return "\n".join(lines) + "\n"


def logit_magnitude_report(a: Sequence[StepMetrics], b: Sequence[StepMetrics], tail: int = 100) -> LogitComparison:
    """Compare per-step mean (log Z)^2 and max |logit| of two runs over their last ``tail`` aligned steps."""
    if len(a) != len(b):
        warnings.warn(f"metric streams differ in length ({len(a)} vs {len(b)}); aligning to the shorter", stacklevel=2)
    n = min(len(a), len(b))
    if n == 0:
        raise ValueError("empty metric stream")
    rows = [(a[i].step, a[i].zloss, b[i].zloss, a[i].max_abs_logit, b[i].max_abs_logit) for i in range(n)]
    last = rows[max(0, n - tail):]
    return LogitComparison(
        steps=n,
        rows=rows,
        final_mean_a=float(np.mean([r[1] for r in last])),
        final_mean_b=float(np.mean([r[2] for r in last])),
        final_max_a=float(np.mean([r[3] for r in last])),
        final_max_b=float(np.mean([r[4] for r in last])),
    )
