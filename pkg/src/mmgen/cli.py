"""Command-line entry point.

Every subcommand works on a run directory holding ``config.json``,
``manifest.json``, ``codebook.npz`` and stage checkpoints. The directory is
``--out`` when given, otherwise ``$MMGEN_OUTPUT_ROOT/run-<config hash>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, training
from .config import ConfigError, RunConfig
from .decoding import DecodeParams, generate
from .imagecodec import Codebook, RasterImage, build_codebook, decode_grid, read_ppm, write_ppm
from .model import init_params, load_checkpoint, save_checkpoint
from .unirep import find_spans, validate
from .vocab import VocabManifest

log = logging.getLogger("mmgen")

OUTPUT_ROOT_ENV = "MMGEN_OUTPUT_ROOT"


# -- io helpers -------------------------------------------------------------


def write_sequences(path, seqs) -> None:
    with open(path, "w") as fh:
        for toks in seqs:
            fh.write(" ".join(str(int(t)) for t in toks) + "\n")


def read_sequences(path) -> list[list[int]]:
    return [[int(t) for t in line.split()] for line in Path(path).read_text().splitlines() if line.strip()]


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_seed(getattr(args, "seed", None)).check()


def run_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        path = root / f"run-{cfg.digest()[:12]}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _side_for(stage, patch_px: int) -> int:
    return max(patch_px, patch_px * round(math.sqrt(stage.target_area) / patch_px))


def synthetic_records(kinds: list[str], width_px: int, height_px: int, patch_px: int) -> list[training.TaskRecord]:
    out = []
    for kind in kinds:
        if kind == "colors":
            out += training.color_records(width_px, height_px)
        elif kind == "stripes":
            out += training.stripe_records(width_px, height_px, period=patch_px)
        elif kind == "captions":
            out += training.caption_records(width_px, height_px)
        else:
            raise ValueError(f"unknown synthetic dataset {kind!r}")
    return out


def load_dataset(path) -> list[training.TaskRecord]:
    """JSONL records ``{"task", "text", "inputs", "targets", "condition"}``; image
    paths are PPM files relative to the dataset file."""
    base = Path(path).parent
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        records.append(
            training.TaskRecord(
                kind=training.TaskKind(r["task"]),
                text=r.get("text", ""),
                inputs=tuple(read_ppm(base / p) for p in r.get("inputs", [])),
                targets=tuple(read_ppm(base / p) for p in r.get("targets", [])),
                condition=r.get("condition", ""),
            )
        )
    return records


def stage_records(args, cfg: RunConfig, stage_index: int) -> list[training.TaskRecord]:
    if args.dataset:
        return load_dataset(args.dataset)
    manifest = cfg.manifest()
    side = _side_for(cfg.stage_plan().stages[stage_index], manifest.patch_px)
    return synthetic_records(args.synthetic.split(","), side, side, manifest.patch_px)


def ensure_codebook(cfg: RunConfig, out: Path, images: list[RasterImage]) -> Codebook:
    path = Path(cfg.codebook_path) if cfg.codebook_path else out / "codebook.npz"
    if path.exists():
        return Codebook.load(path)
    manifest = cfg.manifest()
    cb = build_codebook(images, manifest.codebook_size, manifest.patch_px, seed=cfg.seed)
    cb.save(out / "codebook.npz")
    return cb


def record_images(records) -> list[RasterImage]:
    return [im for r in records for im in (*r.inputs, *r.targets)]


def load_run(run: Path, checkpoint: str | None):
    manifest = VocabManifest.load(run / "manifest.json")
    codebook = Codebook.load(run / "codebook.npz")
    if checkpoint is None:
        stages = sorted(run.glob("stage*.pt"), key=lambda p: int(p.stem[5:]))
        if not stages:
            raise FileNotFoundError(f"no stage checkpoints in {run}")
        checkpoint = stages[-1]
    model, _, blob = load_checkpoint(checkpoint)
    if blob["manifest_digest"] not in (None, manifest.digest()):
        raise ValueError("checkpoint was trained against a different vocabulary manifest")
    cfg = RunConfig.load(run / "config.json") if (run / "config.json").exists() else RunConfig()
    return manifest, codebook, model, cfg


# -- subcommands ------------------------------------------------------------


def cmd_vocab_build(args) -> dict:
    cfg = load_config(args)
    out = run_dir(args, cfg)
    manifest = cfg.manifest()
    manifest.save(out / "manifest.json")
    return {"manifest": str(out / "manifest.json"), "total": manifest.total, "blocks": manifest.block_sizes()}


def cmd_codebook_build(args) -> dict:
    cfg = load_config(args)
    out = run_dir(args, cfg)
    manifest = cfg.manifest()
    if args.images:
        images = [read_ppm(p) for p in args.images]
    else:
        side = _side_for(cfg.stage_plan().stages[0], manifest.patch_px)
        images = record_images(synthetic_records(args.synthetic.split(","), side, side, manifest.patch_px))
    cb = build_codebook(images, manifest.codebook_size, manifest.patch_px, seed=cfg.seed)
    cb.save(out / "codebook.npz")
    return {"codebook": str(out / "codebook.npz"), "entries": cb.size}


def _format_stage(args, cfg, out, stage_index):
    manifest = cfg.manifest()
    records = stage_records(args, cfg, stage_index)
    codebook = ensure_codebook(cfg, out, record_images(records))
    buckets = cfg.stage_plan().stages[stage_index].buckets
    images = training.ImageTokenizer(manifest, codebook, buckets)
    return [training.format_task(manifest, r, images) for r in records]


def cmd_tokenize(args) -> dict:
    cfg = load_config(args)
    out = run_dir(args, cfg)
    cfg.manifest().save(out / "manifest.json")
    seqs = _format_stage(args, cfg, out, args.stage)
    write_sequences(out / f"tokens_stage{args.stage}.txt", [s.tokens for s in seqs])
    with open(out / f"masks_stage{args.stage}.txt", "w") as fh:
        for s in seqs:
            fh.write("".join("1" if m else "0" for m in s.loss_mask) + "\n")
    return {"sequences": len(seqs), "tokens": str(out / f"tokens_stage{args.stage}.txt")}


def cmd_train(args) -> dict:
    cfg = load_config(args)
    out = run_dir(args, cfg)
    cfg.save(out / "config.json")
    manifest = cfg.manifest()
    manifest.save(out / "manifest.json")
    plan = cfg.stage_plan()
    datasets = [_format_stage(args, cfg, out, i) for i in range(len(plan.stages))]
    model = init_params(cfg.model_config())
    checkpoints = []
    with open(out / "metrics.jsonl", "w") as metrics_fh:

        def on_step(m):
            metrics_fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")

        def on_stage_end(res):
            path = out / f"stage{res.stage}.pt"
            save_checkpoint(path, model, res.opt_state, manifest.digest(), {"stage": res.stage})
            checkpoints.append(str(path))

        results = training.run_plan(
            model, datasets, [cfg.hyper(i) for i in range(len(datasets))], on_stage_end, on_step
        )
    return {
        "checkpoints": checkpoints,
        "stages": [{"stage": r.stage, "ce_first": r.metrics[0].ce, "ce_last": r.metrics[-1].ce} for r in results],
    }


def _decode_params(base: DecodeParams, temperature=None, top_k=None, cfg=None) -> DecodeParams:
    return DecodeParams(
        base.temperature if temperature is None else temperature,
        base.top_k if top_k is None else top_k,
        base.cfg_scale if cfg is None else cfg,
    )


def cmd_generate(args) -> dict:
    run = Path(args.run)
    manifest, codebook, model, cfg = load_run(run, args.checkpoint)
    seed = cfg.seed if args.seed is None else args.seed
    prompt = training.t2i_prompt_tokens(manifest, args.prompt, args.width, args.height)
    text_params = _decode_params(cfg.text_params(), top_k=args.text_top_k)
    image_params = _decode_params(cfg.image_params(), args.temperature, args.top_k, args.cfg)
    res = generate(
        model, manifest, prompt, text_params, image_params, seed=seed,
        max_tokens=args.max_tokens, constrained=not args.unconstrained,
    )
    out = Path(args.out) if args.out else run / "generations"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"gen_s{seed}"
    write_sequences(out / f"{stem}.tokens.txt", [res.sequence])
    (out / f"{stem}.json").write_text(json.dumps(res.to_dict(), sort_keys=True) + "\n")
    images = []
    for i, (_, _, grid) in enumerate(find_spans(manifest, res.sequence)):
        path = out / f"{stem}_img{i}.ppm"
        write_ppm(path, decode_grid(grid, codebook))
        images.append(str(path))
    return {"tokens": len(res.tokens), "stop_reason": res.stop_reason, "well_formed": res.well_formed(manifest), "images": images}


def cmd_parse(args) -> dict:
    if args.manifest:
        manifest = VocabManifest.load(args.manifest)
    else:
        manifest = load_config(args).manifest()
    reports = [validate(manifest, seq).to_dict() for seq in read_sequences(args.tokens)]
    ok = all(r["well_formed"] for r in reports)
    result = {"sequences": len(reports), "all_ok": ok, "reports": reports}
    if not ok:
        raise _Reported(result)
    return result


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _ints(text):
    return tuple(int(x) for x in text.split(","))


def cmd_sweep(args) -> dict:
    run = Path(args.run)
    manifest, codebook, model, cfg = load_run(run, args.checkpoint)
    spec = analysis.SweepSpec(
        prompt=args.prompt, width_px=args.width, height_px=args.height,
        temperatures=_floats(args.temperatures), top_ks=_ints(args.top_ks),
        cfg_scales=_floats(args.cfgs), seeds=_ints(args.seeds),
        text_params=cfg.text_params(), max_tokens=args.max_tokens,
    )
    out = Path(args.out) if args.out else run / "sweep"
    report = analysis.sweep(model, manifest, codebook, spec, out)
    return {"rows": len(report.rows), "table": str(out / "sweep.tsv"), "trend": analysis.topk_trend(report)}


def cmd_attn(args) -> dict:
    run = Path(args.run)
    manifest, _, model, _ = load_run(run, args.checkpoint)
    seq = read_sequences(args.tokens)[args.line]
    report = analysis.attn_report(model, manifest, seq)
    out = Path(args.out) if args.out else run / "attn.tsv"
    out.write_text(report.to_table())
    return {"report": str(out), "query_position": report.query_position, "role_summary": report.role_summary}


class _Reported(Exception):
    """Result printed as-is with a non-zero exit code."""

    def __init__(self, payload: dict):
        super().__init__("command reported failures")
        self.payload = payload


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmgen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="run configuration (JSON); defaults when omitted")
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("vocab-build", help="write the vocabulary manifest")
    common(sp)
    sp.set_defaults(func=cmd_vocab_build)

    sp = sub.add_parser("codebook-build", help="k-means patch codebook")
    common(sp)
    sp.add_argument("--images", nargs="*", help="PPM images; synthetic desk data when omitted")
    sp.add_argument("--synthetic", default="colors,stripes")
    sp.set_defaults(func=cmd_codebook_build)

    for name, func, helptext in (
        ("tokenize", cmd_tokenize, "format a dataset into token/mask files"),
        ("train", cmd_train, "staged training; one checkpoint per stage"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--dataset", help="dataset manifest (JSONL)")
        sp.add_argument("--synthetic", default="colors", help="comma list of colors,stripes,captions")
        if name == "tokenize":
            sp.add_argument("--stage", type=int, default=0)
        sp.set_defaults(func=func)

    sp = sub.add_parser("generate", help="sample from a trained run")
    common(sp, config=False)
    sp.add_argument("--run", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--top-k", type=int)
    sp.add_argument("--text-top-k", type=int)
    sp.add_argument("--cfg", type=float)
    sp.add_argument("--max-tokens", type=int, default=320)
    sp.add_argument("--unconstrained", action="store_true")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("parse", help="validate token sequences")
    common(sp, out=False)
    sp.add_argument("--manifest")
    sp.add_argument("--tokens", required=True)
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("sweep", help="decoding hyperparameter sweep")
    common(sp, config=False)
    sp.add_argument("--run", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--temperatures", default="0.7,1.0")
    sp.add_argument("--top-ks", default="50,2000")
    sp.add_argument("--cfgs", default="4.0")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--max-tokens", type=int, default=320)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("attn", help="attention profile of the last image token")
    common(sp, config=False)
    sp.add_argument("--run", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--line", type=int, default=0)
    sp.set_defaults(func=cmd_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except _Reported as rep:
        print(json.dumps(rep.payload, sort_keys=True))
        return 1
    except ConfigError as err:
        print(json.dumps({"error": "ConfigError", "message": str(err), "violations": err.violations}), file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, OSError, KeyError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=_jsonable))
    return 0


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
