"""Acceptance criteria 1-7, one test each.

Every test records a pass/fail line through the ``report`` fixture; the lines
are printed in the terminal summary.  Run only this suite with
``pytest -m acceptance``.
"""

import itertools
import statistics
import time

import numpy as np
import pytest

from mabicap import mabi as mb
from mabicap import metrics
from mabicap import retoucher as rt
from mabicap import tensor as T
from mabicap import training as tr
from mabicap.checkpoint import from_bytes, load_checkpoint, to_bytes
from mabicap.cli import build_parser
from mabicap.config import LAMBDA_SWEEP, Config
from mabicap.data import gen_synthetic
from mabicap.decoding import beam_decode, greedy_decode
from mabicap.gradcheck import check_gradients
from mabicap.vocab import END, START

from test_metrics import TOY, oracle_bleu, oracle_cider, oracle_rouge

pytestmark = pytest.mark.acceptance

# sweep setup shared by criteria 5 and 6
SWEEP_ITEMS = 300
SWEEP_DATA_SEED = 0
SWEEP_SEEDS = range(5)
SWEEP_CFG = Config(hidden=32, embed_dim=16, feat_dim=16, lr=0.01, optimizer="adam", batch_size=32,
                   max_epochs=25, patience=5, beam=3)
SWEEP_LIMIT_S = 30 * 60
RETOUCH_LAMBDA = 0.01


def tiny_cfg(**kw):
    return Config(**{**dict(hidden=6, embed_dim=4, feat_dim=4, att_hidden=4, max_len=6), **kw})


# ---------------------------------------------------------------- 1: gradients


def test_criterion_1_gradients(report):
    start = time.perf_counter()
    g = np.random.default_rng(1)
    V, RAW, N, T_ = 8, 5, 4, 3
    cfg = tiny_cfg(lam=0.5)
    model = mb.MabiNet(V, RAW, cfg, g)
    batch = [(g.normal(size=(N, RAW)), [START, *g.integers(3, V, size=T_), END]) for _ in range(2)]
    mabi_err = check_gradients(lambda: mb.batch_loss(model, batch)[0], model.parameters())

    dec = rt.CrossModalDecoder(model, cfg, g)
    examples = [(f, rt.build_pool(g.integers(3, V, size=2), g.integers(3, V, size=3), dec).tokens, toks)
                for f, toks in batch]
    dec_err = check_gradients(lambda: rt.batch_loss(dec, examples), dec.parameters())
    elapsed = time.perf_counter() - start

    worst = max(max(mabi_err.values()), max(dec_err.values()))
    ok = worst < 1e-4 and elapsed < 60
    report(1, ok, f"max relative error {worst:.2e} (limit 1e-4) over {len(mabi_err) + len(dec_err)} "
                  f"parameter tensors, {elapsed:.1f}s (limit 60s)")
    assert worst < 1e-4, {**mabi_err, **{"dec." + k: v for k, v in dec_err.items()}}
    assert elapsed < 60


# ---------------------------------------------------------------- 2: structure


def test_criterion_2_structural_invariants(report):
    g = np.random.default_rng(2)
    V, RAW, T_ = 9, 5, 4
    cfg = tiny_cfg(lam=0.0)
    model = mb.MabiNet(V, RAW, cfg, g)
    feats = g.normal(size=(3, 6, RAW))
    toks = np.array([[START, *g.integers(3, V, size=T_), END] for _ in range(3)])
    checks = {}

    # attention weights are distributions
    trace = mb.forward_pass(model, feats, toks)
    sums = [a.data.sum(-1) for a in [*trace.alpha_f.values(), *trace.alpha_b.values()]]
    dec = rt.CrossModalDecoder(model, cfg, g)
    res = rt.retouch(dec, feats[0], [3, 4], [5, 6, 7], beam=3)
    sums += [res.alphas.sum(-1), res.betas.sum(-1)]
    checks["attention sums to 1"] = all(np.allclose(s, 1.0, rtol=0, atol=1e-12) for s in sums)

    # construction loss compares shifted pairs only
    expected = [p for t in range(1, T_ + 1) for p in (("h_anb", t - 1, "h_f", t), ("h_anf", t, "h_b", t - 1))]
    manual = sum(float(((trace.h_anb[t - 1].data - trace.h_f[t].data) ** 2).sum()
                       + ((trace.h_anf[t].data - trace.h_b[t - 1].data) ** 2).sum()) for t in range(1, T_ + 1))
    l2 = mb.loss_l2(trace).item()
    checks["L2 index alignment"] = mb.l2_pairs(trace) == expected and abs(l2 - manual) <= 1e-12 * max(1, manual)

    # total loss is affine in lambda
    l1_t, l2_t = mb.loss_l1(trace, toks), mb.loss_l2(trace)
    affine = all(
        mb.loss_total(l1_t, l2_t, lam).item() == l1_t.item() + lam * l2_t.item()
        and abs((mb.loss_total(l1_t, l2_t, lam).item() - mb.loss_total(l1_t, l2_t, 0.0).item()) - lam * l2_t.item())
        <= 1e-12 * max(1.0, l1_t.item())
        for lam in LAMBDA_SWEEP
    )
    checks["loss affine in lambda"] = affine

    # lambda = 0: forward gradients ignore the backward stack, aid networks get nothing
    batch = [(feats[i], toks[i].tolist()) for i in range(3)]

    def grads(zero_backward):
        m = mb.MabiNet(V, RAW, cfg, np.random.default_rng(5))
        if zero_backward:
            for k, p in m.parameters().items():
                if k.startswith(("bwd.", "bwd_head.")):
                    p.data[...] = 0.0
        m.zero_grad()
        T.backward(mb.batch_loss(m, batch)[0])
        return m.parameters()

    def cross_grads(forward):
        m = mb.MabiNet(V, RAW, cfg, np.random.default_rng(5))
        tr_ = mb.forward_pass(m, feats, toks)
        loss = (T.nll_loss(tr_.p_f_all, toks[:, 1:]) if forward else T.nll_loss(tr_.p_b_all, toks[:, :-1]))
        T.backward(loss)
        other = ("bwd.", "bwd_head.") if forward else ("fwd.", "fwd_head.")
        return all(p.grad is None or not p.grad.any() for k, p in m.parameters().items() if k.startswith(other))

    checks["zero cross-gradients"] = cross_grads(True) and cross_grads(False)

    a, b = grads(False), grads(True)
    fwd_keys = [k for k in a if k.startswith(("fwd.", "fwd_head."))]
    checks["lambda=0 decouples directions"] = all(np.array_equal(a[k].grad, b[k].grad) for k in fwd_keys)
    checks["lambda=0 aid networks untouched"] = all(
        a[k].grad is None or not a[k].grad.any() for k in a if k.startswith(("an_f.", "an_b.")))

    ok = all(checks.values())
    report(2, ok, ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok, checks


# ---------------------------------------------------------------- 3: metrics


def test_criterion_3_metric_oracles(report):
    diffs = {
        "BLEU": max(abs(a - b) for a, b in zip(metrics.bleu(TOY), oracle_bleu(TOY))),
        "ROUGE-L": abs(metrics.rouge_l(TOY) - oracle_rouge(TOY)),
        "CIDEr": abs(metrics.cider(TOY) - oracle_cider(TOY)),
    }
    same = [(c, [c]) for c, _ in TOY]
    scores = metrics.evaluate(same)
    identical = max(abs(scores[k] - 100.0) for k in ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L"))
    worst = max(max(diffs.values()), identical)
    ok = worst <= 1e-6
    report(3, ok, " ".join(f"{k} |diff| {v:.1e}" for k, v in diffs.items())
           + f", identical captions: BLEU/ROUGE-L deviation from 100 {identical:.1e} (limit 1e-6)")
    assert ok, (diffs, identical)


# ---------------------------------------------------------------- 4: decoding


def test_criterion_4_beam_search(report):
    V, RAW = 6, 5
    cfg = tiny_cfg()
    greedy_match = 0
    for seed in range(20):
        g = np.random.default_rng(100 + seed)
        model = mb.MabiNet(V, RAW, cfg, g)
        feats = g.normal(size=(4, RAW))
        for forward in (True, False):
            step, state = mb.make_step_fn(model, feats, forward)
            first, last = (START, END) if forward else (END, START)
            a = greedy_decode(step, state, first, last, cfg.max_len)
            b = beam_decode(step, state, 1, first, last, cfg.max_len)
            greedy_match += int(a.tokens == b.tokens and a.score == b.score)

    exhaustive_match = 0
    for seed in range(20):
        g = np.random.default_rng(200 + seed)
        model = mb.MabiNet(V, RAW, cfg, g)
        step, state = mb.make_step_fn(model, g.normal(size=(4, RAW)), True)
        best = None
        for length in (1, 2):
            for seq in itertools.product(range(V), repeat=length):
                if seq[-1] != END or END in seq[:-1]:
                    continue
                st, score, prev = state, 0.0, START
                for tok in seq:
                    logp, st = step(prev, st)
                    score += float(logp[tok])
                    prev = tok
                if best is None or score > best[0]:
                    best = (score, [START, *seq])
        res = beam_decode(step, state, V, START, END, 2)
        exhaustive_match += int(res.finished and res.tokens == best[1] and abs(res.score - best[0]) < 1e-12)

    caption_default = build_parser().parse_args(["caption", "--data", "d", "--checkpoint", "c"]).beam
    default_ok = Config().beam == 3 and caption_default == 3
    ok = greedy_match == 40 and exhaustive_match == 20 and default_ok
    report(4, ok, f"width 1 == greedy {greedy_match}/40 decodes, full width == exhaustive "
                  f"{exhaustive_match}/20 models, default width {Config().beam}")
    assert ok


# ---------------------------------------------------------------- 5 & 6: sweep


@pytest.fixture(scope="module")
def sweep():
    splits = gen_synthetic(SWEEP_ITEMS, SWEEP_DATA_SEED)
    start = time.perf_counter()
    rows, raw = tr.run_ablation(SWEEP_CFG, splits, LAMBDA_SWEEP, SWEEP_SEEDS, split="val", beam=1,
                                keep_models=True)
    return splits, rows, raw, time.perf_counter() - start


def test_criterion_5_lambda_sweep(report, sweep):
    _, rows, _, elapsed = sweep
    med = {r["lambda"]: r["CIDEr"] for r in rows}
    best = max(med.values())
    ok_default = med[RETOUCH_LAMBDA] >= med[0.0]
    ok_top = med[0.1] < best
    ok = ok_default and ok_top and elapsed < SWEEP_LIMIT_S
    table = " ".join(f"{lam:g}:{v:.2f}" for lam, v in med.items())
    report(5, ok, f"median val CIDEr {table}; lambda 0.01 >= lambda 0: {ok_default}; "
                  f"lambda 0.1 not best: {ok_top}; {elapsed:.0f}s")
    print("lambda sweep (median forward val CIDEr over seeds):", table)
    assert ok


def test_criterion_6_retoucher(report, sweep):
    splits, _, raw, _ = sweep
    test_items = splits["test"]
    final, pair_best = [], []
    for run in raw:
        if run["lambda"] != RETOUCH_LAMBDA:
            continue
        model, vocab = run["model"], run["vocab"]
        res = tr.train_retoucher(model, vocab, splits, model.cfg, pair_beam=SWEEP_CFG.beam)
        pairs = tr.pregenerate(model, test_items, SWEEP_CFG.beam)
        s_f = metrics.cider(tr.corpus_of([p[0] for p in pairs], test_items, vocab))
        s_b = metrics.cider(tr.corpus_of([p[1] for p in pairs], test_items, vocab))
        sents = tr.retouch_items(res.decoder, test_items, pairs, SWEEP_CFG.beam)
        final.append(metrics.cider(tr.corpus_of(sents, test_items, vocab)))
        pair_best.append(max(s_f, s_b))
    med_final, med_pair = statistics.median(final), statistics.median(pair_best)
    ok = med_final >= med_pair
    report(6, ok, f"median test CIDEr retouched {med_final:.2f} vs max(S_f, S_b) {med_pair:.2f} "
                  f"over {len(final)} seeds")
    print("retouched:", [round(x, 2) for x in final], "max(S_f, S_b):", [round(x, 2) for x in pair_best])
    assert ok


# ---------------------------------------------------------------- 7: engineering


def test_criterion_7_checkpoints_and_resume(report, tmp_path):
    splits = gen_synthetic(40, 3)
    cfg = tiny_cfg(vocab_threshold=1, max_len=12, batch_size=8, max_epochs=3, patience=5,
                   optimizer="adam", lr=0.01)
    full = tr.train_loop(cfg, splits, tmp_path / "full")
    part = tr.train_loop(cfg, splits, tmp_path / "split", stop_after=1)
    resumed = tr.train_loop(cfg, splits, tmp_path / "split", resume=tmp_path / "split" / "last.ckpt")

    blob = (tmp_path / "full" / "best.ckpt").read_bytes()
    byte_identical = to_bytes(from_bytes(blob)) == blob
    ckpt = load_checkpoint(tmp_path / "full" / "best.ckpt")
    reloaded, _ = tr.load_mabi(ckpt)
    bit_exact_load = all(np.array_equal(p.data, q.data) for p, q in
                         zip(full.model.parameters().values(), reloaded.parameters().values()))
    resume_exact = (not part.completed and resumed.history == full.history
                    and all(np.array_equal(p.data, q.data) for p, q in
                            zip(full.model.parameters().values(), resumed.model.parameters().values()))
                    and all((tmp_path / "full" / n).read_bytes() == (tmp_path / "split" / n).read_bytes()
                            for n in ("last.ckpt", "best.ckpt", "train_log.csv")))
    ok = byte_identical and bit_exact_load and resume_exact
    report(7, ok, f"save/load/save byte-identical: {byte_identical}, reload bit-exact: {bit_exact_load}, "
                  f"split run == uninterrupted run: {resume_exact}")
    assert ok
