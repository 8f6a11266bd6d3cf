import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mmgen.imagecodec import RasterImage, build_codebook
from mmgen.model import ModelConfig, init_params
from mmgen.resolution import ResolutionBucket
from mmgen.training import (
    COLORS,
    DialogRecord,
    ImagePart,
    ImageTokenizer,
    PromptPart,
    TaskKind,
    TaskRecord,
    TextPart,
    TrainHyper,
    Turn,
    apply_context_drop,
    caption_records,
    cluster_batches,
    color_records,
    format_dialog,
    format_task,
    palette_images,
    run_plan,
    run_stage,
    stripe_records,
    t2i_prompt_tokens,
)
from mmgen.unirep import MultimodalSequence, build_t2i_prompt, validate
from mmgen.vocab import ASSISTANT, BOS, END_OF_TURN, EOI, SOI, USER, build_vocab


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(256, 8, 8, 8)


@pytest.fixture(scope="module")
def tokenizer(vocab):
    cb = build_codebook(palette_images(8), 8, 8)
    buckets = (ResolutionBucket(16, 16), ResolutionBucket(32, 16), ResolutionBucket(16, 32))
    return ImageTokenizer(vocab, cb, buckets)


def solid(w, h, name="red"):
    return RasterImage.solid(w, h, COLORS[name])


def test_hi_yo_mask(vocab):
    rec = DialogRecord((Turn("user", [TextPart("hi")]), Turn("assistant", [TextPart("yo")])))
    seq = format_dialog(vocab, rec)
    t = vocab.text_token
    assert seq.tokens == [BOS, USER, t(ord("h")), t(ord("i")), END_OF_TURN, ASSISTANT, t(ord("y")), t(ord("o")), END_OF_TURN]
    assert seq.loss_mask == [False] * 6 + [True] * 3


def test_t2i_prompt_uses_matched_bucket(vocab, tokenizer):
    # a 40x18 image matches the 32x16 bucket, not its raw size
    rec = TaskRecord(TaskKind.TEXT_TO_IMAGE, "a red thing", targets=(solid(40, 18),))
    seq = format_task(vocab, rec, tokenizer)
    first_eot = seq.tokens.index(END_OF_TURN)
    user_text = vocab.decode_text(seq.tokens[2:first_eot])
    assert user_text == build_t2i_prompt(32, 16, "a red thing", 8)
    assert "32x16" in user_text and "40x18" not in user_text
    assert t2i_prompt_tokens(vocab, "a red thing", 32, 16) == seq.tokens[: first_eot + 2]
    rep = validate(vocab, seq.tokens)
    assert rep.well_formed and [s.shape for s in rep.spans] == [(2, 4)]


def test_dialog_needs_assistant_turn():
    with pytest.raises(ValueError):
        DialogRecord((Turn("user", [TextPart("hi")]),))
    with pytest.raises(ValueError):
        DialogRecord(())
    with pytest.raises(ValueError):
        DialogRecord((Turn("assistant", [TextPart("hi")]), Turn("user", [TextPart("x")])))


def test_image_without_tokenizer(vocab):
    rec = DialogRecord((Turn("user", [ImagePart(solid(16, 16))]), Turn("assistant", [TextPart("x")])))
    with pytest.raises(ValueError):
        format_dialog(vocab, rec)


def test_oversized_bucket_rejected(vocab):
    cb = build_codebook(palette_images(8), 8, 8)
    tok = ImageTokenizer(vocab, cb, (ResolutionBucket(128, 16),))
    with pytest.raises(ValueError):
        tok.tokens(solid(128, 16))


def test_multiview_three_spans(vocab, tokenizer):
    rec = TaskRecord(TaskKind.MULTIVIEW, "a cube", targets=(solid(16, 16), solid(16, 16, "blue"), solid(16, 16, "green")))
    seq = format_task(vocab, rec, tokenizer)
    start = seq.tokens.index(ASSISTANT)
    reply = seq.tokens[start:]
    assert reply.count(SOI) == 3 and reply.count(EOI) == 3
    assert SOI not in seq.tokens[:start]
    rep = validate(vocab, seq.tokens)
    assert rep.well_formed and len(rep.spans) == 3


def test_multiview_needs_two_views():
    with pytest.raises(ValueError):
        TaskRecord(TaskKind.MULTIVIEW, "x", targets=(solid(16, 16),))


def test_editing_template(vocab, tokenizer):
    rec = TaskRecord(TaskKind.EDITING, "make it blue", inputs=(solid(16, 16),), targets=(solid(16, 16, "blue"),))
    seq = format_task(vocab, rec, tokenizer)
    split = seq.tokens.index(ASSISTANT)
    user, reply = seq.tokens[:split], seq.tokens[split:]
    assert user.count(SOI) == 1 and user[2] == SOI
    after = user[user.index(EOI) + 1 : -1]
    assert vocab.decode_text(after) == "make it blue"
    assert reply.count(SOI) == 1 and reply[1] == SOI and reply[-2] == EOI


def test_multiturn_editing_masks_each_reply(vocab, tokenizer):
    rec = TaskRecord(
        TaskKind.EDITING, ("make it blue", "now green"),
        inputs=(solid(16, 16),), targets=(solid(16, 16, "blue"), solid(16, 16, "green")),
    )
    seq = format_task(vocab, rec, tokenizer)
    assert seq.tokens.count(ASSISTANT) == 2 and seq.tokens.count(SOI) == 3
    _check_response_only(seq)


def test_captioning_mask_only_text(vocab, tokenizer):
    rec = caption_records(16, 16)[0]
    seq = format_task(vocab, rec, tokenizer)
    masked = [t for t, m in zip(seq.tokens, seq.loss_mask) if m]
    assert masked[-1] == END_OF_TURN
    assert all(vocab.is_text(t) for t in masked[:-1])
    assert vocab.decode_text(masked[:-1]) == "a red square"


def test_dense_and_spatial_templates(vocab, tokenizer):
    dense = TaskRecord(TaskKind.DENSE_PREDICTION, "depth", inputs=(solid(16, 16),), targets=(solid(16, 16, "white"),))
    spatial = TaskRecord(TaskKind.SPATIAL_CONDITIONAL, "a cat", inputs=(solid(16, 16),), targets=(solid(16, 16),), condition="edge")
    for rec in (dense, spatial):
        seq = format_task(vocab, rec, tokenizer)
        assert validate(vocab, seq.tokens).well_formed
        assert seq.tokens.count(SOI) == 2
        _check_response_only(seq)


def _check_response_only(seq):
    in_reply = False
    for tok, m in zip(seq.tokens, seq.loss_mask):
        if tok == ASSISTANT:
            in_reply = True
            assert not m
            continue
        if tok == USER:
            in_reply = False
        if not in_reply:
            assert not m
        else:
            assert m
        if tok == END_OF_TURN:
            in_reply = False


def _all_desk_records():
    return color_records(16, 16) + stripe_records(32, 16, 8) + caption_records(16, 32)


def test_all_formatted_sequences_validate(vocab, tokenizer):
    for rec in _all_desk_records():
        seq = format_task(vocab, rec, tokenizer)
        assert validate(vocab, seq.tokens).well_formed
        assert len(seq.tokens) == len(seq.loss_mask) == len(seq.segments)
        _check_response_only(seq)


def test_context_drop_edges(vocab, tokenizer):
    seq = format_task(vocab, color_records(16, 16)[0], tokenizer)
    rng = np.random.default_rng(0)
    assert apply_context_drop(seq, 0.0, rng) is seq
    dropped = apply_context_drop(seq, 1.0, rng)
    assert dropped.tokens[:2] == [BOS, SOI]
    k = seq.tokens.index(SOI)
    assert dropped.tokens[1:] == seq.tokens[k:]
    assert dropped.loss_mask[1:] == seq.loss_mask[k:]
    text_only = format_dialog(vocab, DialogRecord((Turn("user", [TextPart("a")]), Turn("assistant", [TextPart("b")]))))
    assert apply_context_drop(text_only, 1.0, rng) is text_only


def test_context_drop_rate(vocab, tokenizer):
    seq = format_task(vocab, color_records(16, 16)[0], tokenizer)
    rng = np.random.default_rng(1234)
    n = 10_000
    drops = sum(apply_context_drop(seq, 0.1, rng) is not seq for _ in range(n))
    assert abs(drops / n - 0.1) <= 0.01


@settings(deadline=None, max_examples=40)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=6), st.integers(0, 30), st.booleans())
def test_context_drop_preserves_bos_and_suffix(prefix, tail, drop):
    seq = MultimodalSequence([BOS] + [10 + p for p in prefix] + [SOI] + [10 + tail], [False] * (len(prefix) + 2) + [True], ["s"] * (len(prefix) + 3))
    out = apply_context_drop(seq, 1.0 if drop else 0.0, np.random.default_rng(0))
    k = seq.tokens.index(SOI)
    assert out.tokens[0] == BOS
    assert out.tokens[-(len(seq.tokens) - k):] == seq.tokens[k:]


def _seqs(lengths):
    return [MultimodalSequence([BOS] + [9] * (n - 1), [True] * n, ["t"] * n) for n in lengths]


def test_cluster_batches_example():
    batches = cluster_batches(_seqs([10, 98, 12, 100, 11, 99]), 3)
    assert [sorted(len(s) for s in b.sequences) for b in batches] == [[10, 11, 12], [98, 99, 100]]
    assert [b.indices for b in batches] == [[0, 4, 2], [1, 5, 3]]
    assert [(b.min_len, b.max_len) for b in batches] == [(10, 12), (98, 100)]


def test_cluster_batches_edges():
    assert len(cluster_batches(_seqs([5, 3, 4]), 1)) == 3
    same = cluster_batches(_seqs([7] * 5), 2)
    assert all(b.max_len == b.min_len for b in same)
    assert [b.indices for b in same] == [[0, 1], [2, 3], [4]]
    with pytest.raises(ValueError):
        cluster_batches([], 2)
    with pytest.raises(ValueError):
        cluster_batches(_seqs([3]), 0)


@settings(deadline=None, max_examples=60)
@given(st.lists(st.integers(2, 40), min_size=1, max_size=25), st.integers(1, 8))
def test_cluster_batches_is_a_partition(lengths, size):
    batches = cluster_batches(_seqs(lengths), size)
    idx = [i for b in batches for i in b.indices]
    assert sorted(idx) == list(range(len(lengths)))
    assert sorted(len(s) for b in batches for s in b.sequences) == sorted(lengths)
    assert all(len(b.indices) == size for b in batches[:-1])
    # sorted-chunk oracle: batch k holds ranks k*size .. (k+1)*size-1
    ranks = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    assert idx == ranks


def test_packed_tensors_pad_with_mask_false():
    b = cluster_batches(_seqs([3, 5]), 2)[0]
    inp, tgt, mask = b.tensors()
    assert inp.shape == tgt.shape == mask.shape == (2, 4)
    assert mask[0].tolist() == [True, True, False, False]
    assert mask[1].all()


def _tiny_model(vocab, seed=0):
    return init_params(ModelConfig(layers=1, heads=2, model_dim=16, vocab_total=vocab.total, max_seq=160, seed=seed))


def test_run_stage_lr_zero(vocab, tokenizer):
    data = [format_task(vocab, r, tokenizer) for r in color_records(16, 16)]
    for wd in (0.0, 0.1):
        m = _tiny_model(vocab)
        before = {n: p.detach().clone() for n, p in m.named_parameters()}
        run_stage(m, data, TrainHyper(lr=0.0, weight_decay=wd, steps=3, batch_size=4))
        for n, p in m.named_parameters():
            assert torch.equal(p.detach(), before[n]), n


def test_run_stage_learns(vocab, tokenizer):
    data = [format_task(vocab, r, tokenizer) for r in color_records(16, 16)]
    m = _tiny_model(vocab)
    res = run_stage(m, data, TrainHyper(lr=3e-3, steps=200, batch_size=8, drop_p=0.0))
    assert len(res.metrics) == 200
    assert res.metrics[-1].ce < 0.5 * res.metrics[0].ce
    assert all(np.isfinite(x.ce) for x in res.metrics)


def test_run_stage_deterministic(vocab, tokenizer):
    data = [format_task(vocab, r, tokenizer) for r in color_records(16, 16)]
    runs = []
    for _ in range(2):
        m = _tiny_model(vocab)
        runs.append([x.total for x in run_stage(m, data, TrainHyper(lr=1e-3, steps=6, batch_size=3)).metrics])
    assert runs[0] == runs[1]


def test_run_plan_tags_stages(vocab, tokenizer):
    datasets = [[format_task(vocab, r, tokenizer) for r in color_records(w, h)] for w, h in [(16, 16), (32, 16), (16, 32)]]
    seen = []
    m = _tiny_model(vocab)
    results = run_plan(m, datasets, TrainHyper(lr=1e-3, steps=4, batch_size=4), on_step=lambda x: seen.append(x.stage))
    assert [r.stage for r in results] == [0, 1, 2]
    assert seen == [0] * 4 + [1] * 4 + [2] * 4
    assert all(r.opt_state.step == 4 for r in results)
