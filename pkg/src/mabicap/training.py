"""Training orchestration: batching, early stopping, checkpoints, evaluation, ablation."""

from __future__ import annotations

import csv
import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import mabi as mb
from . import metrics
from . import retoucher as rt
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, restore, save_checkpoint, snapshot
from .config import Config
from .data import DatasetItem
from .errors import ConfigError
from .mabi import MabiNet, Sentence
from .vocab import Vocabulary, build_vocab, tokenize

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lambda", "seed", "loss", "l1", "l2", "val_CIDEr", "val_BLEU-4", "best_epoch")


def eval_workers() -> int:
    try:
        return max(1, int(os.environ.get("MABICAP_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    workers = workers or eval_workers()
    if workers == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- data plumbing


def caption_pairs(items: Sequence[DatasetItem], vocab: Vocabulary) -> list[tuple[np.ndarray, list[int]]]:
    return [(it.features, vocab.encode_caption(c)) for it in items for c in it.captions]


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches whose members share one sequence length."""
    order = rng.permutation(len(lengths))
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(lengths[i], []).append(int(i))
    batches = [b[k : k + batch_size] for _, b in sorted(buckets.items()) for k in range(0, len(b), batch_size)]
    return [batches[j] for j in rng.permutation(len(batches))]


def corpus_of(sentences: Sequence[Sentence], items: Sequence[DatasetItem], vocab: Vocabulary):
    return [(vocab.decode(s.tokens), [tokenize(c) for c in it.captions]) for s, it in zip(sentences, items)]


def decode_items(model: MabiNet, items: Sequence[DatasetItem], forward: bool = True, beam: int = 1) -> list[Sentence]:
    return parallel_map(lambda it: mb.decode_direction(model, it.features, forward, beam), items)


# ---------------------------------------------------------------- early stopping


@dataclass
class EarlyStopper:
    """Stop once the score sits below the best seen for ``patience`` epochs running."""

    patience: int = 1
    best: float = -np.inf
    best_epoch: int = 0
    bad: int = 0

    def update(self, score: float, epoch: int) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return True, False
        if score < self.best:
            self.bad += 1
        return False, self.bad >= self.patience

    def to_dict(self) -> dict:
        return {"patience": self.patience, "best": self.best, "best_epoch": self.best_epoch, "bad": self.bad}


# ---------------------------------------------------------------- checkpoints


def mabi_checkpoint(model: MabiNet, vocab: Vocabulary, step: int, rng: np.random.Generator | None,
                    train_state: dict | None = None, optimizer=None) -> Checkpoint:
    meta = {"kind": "mabi", "vocab": vocab.to_dict(), "raw_dim": model.raw_dim}
    if train_state is not None:
        meta["train_state"] = train_state
    params = snapshot(model.parameters(), "mabi.")
    if optimizer is not None:
        # optimizer moments travel with the resumable checkpoint only
        params.update({"opt." + k: v.copy() for k, v in optimizer.state_arrays().items()})
        meta["optimizer_step"] = optimizer.t
    return Checkpoint(params, model.cfg.to_dict(), step,
                      rng.bit_generator.state if rng is not None else None, meta)


def load_mabi(ckpt: Checkpoint | str | Path) -> tuple[MabiNet, Vocabulary]:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = Config.from_dict(ckpt.config)
    vocab = Vocabulary.from_dict(ckpt.meta["vocab"])
    model = MabiNet(len(vocab), ckpt.meta["raw_dim"], cfg, None)
    restore(model.parameters(), ckpt.params, "mabi.")
    return model, vocab


def combined_checkpoint(dec: rt.CrossModalDecoder, vocab: Vocabulary, step: int = 0,
                        train_state: dict | None = None) -> Checkpoint:
    base = mabi_checkpoint(dec.mabi, vocab, 0, None)
    base.params.update(snapshot(dec.parameters(), "retoucher."))
    base.meta["kind"] = "mabi+retoucher"
    base.step = step
    if train_state is not None:
        base.meta["retoucher_state"] = train_state
    return base


def load_any(path: str | Path) -> tuple[MabiNet, Vocabulary, rt.CrossModalDecoder | None]:
    ckpt = load_checkpoint(path)
    model, vocab = load_mabi(ckpt)
    dec = None
    if any(k.startswith("retoucher.") for k in ckpt.params):
        dec = rt.CrossModalDecoder(model, model.cfg, None)
        restore(dec.parameters(), ckpt.params, "retoucher.")
    return model, vocab, dec


# ---------------------------------------------------------------- MaBi training


@dataclass
class TrainResult:
    model: MabiNet
    vocab: Vocabulary
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_cider: float = 0.0
    stopped_early: bool = False
    completed: bool = True


class _CsvLog:
    def __init__(self, path: Path | None, append: bool):
        self.path = path
        if path is not None and not (append and path.exists()):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in LOG_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def train_loop(cfg: Config, splits: dict[str, list[DatasetItem]], out_dir: str | Path | None = None,
               resume: str | Path | None = None, stop_after: int | None = None) -> TrainResult:
    """Train the mutual-aid network with early stopping on validation CIDEr.

    ``out_dir`` receives ``last.ckpt`` (after every epoch), ``best.ckpt`` and
    ``train_log.csv``.  ``resume`` continues from a ``last.ckpt``;
    ``stop_after`` interrupts the run after that epoch (used to test resumes).
    """
    if not splits.get("val"):
        raise ConfigError("training needs a validation split for early stopping")
    train_items = splits["train"]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model, vocab = load_mabi(ckpt)
        cfg = model.cfg
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        state = ckpt.meta["train_state"]
        step, start_epoch = ckpt.step, state["epoch"] + 1
        stopper = EarlyStopper(**state["stopper"])
        history = state["history"]
        best_params = load_checkpoint(out / "best.ckpt").params if out is not None else None
        optimizer = T.make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
        optimizer.load_state({k[4:]: v for k, v in ckpt.params.items() if k.startswith("opt.")},
                             ckpt.meta.get("optimizer_step", 0))
    else:
        vocab = build_vocab([c for it in train_items for c in it.captions], cfg.vocab_threshold)
        rng = np.random.default_rng(cfg.seed)
        model = MabiNet(len(vocab), train_items[0].features.shape[1], cfg, rng)
        step, start_epoch = 0, 1
        stopper = EarlyStopper(cfg.patience)
        history, best_params = [], None
        optimizer = T.make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)

    params = model.parameters()
    pairs = caption_pairs(train_items, vocab)
    lengths = [len(toks) for _, toks in pairs]
    csv_log = _CsvLog(out / "train_log.csv" if out is not None else None, append=resume is not None)
    stopped = False

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        sums = np.zeros(3)
        batches = length_batches(lengths, cfg.batch_size, rng)
        for b in batches:
            res = mb.train_step(model, [pairs[i] for i in b], optimizer=optimizer)
            sums += (res["loss"], res["l1"], res["l2"])
            step += 1
        sents = decode_items(model, splits["val"], True, 1)
        scores = metrics.evaluate(corpus_of(sents, splits["val"], vocab))
        improved, stopped = stopper.update(scores["CIDEr"], epoch)
        if improved:
            best_params = snapshot(params, "mabi.")
            if out is not None:
                save_checkpoint(mabi_checkpoint(model, vocab, step, None), out / "best.ckpt")
        row = {"epoch": epoch, "lambda": cfg.lam, "seed": cfg.seed,
               "loss": sums[0] / len(batches), "l1": sums[1] / len(batches), "l2": sums[2] / len(batches),
               "val_CIDEr": scores["CIDEr"], "val_BLEU-4": scores["BLEU-4"], "best_epoch": stopper.best_epoch}
        history.append(row)
        csv_log.write(row)
        log.info("epoch %d loss %.4f val CIDEr %.2f", epoch, row["loss"], scores["CIDEr"])
        if out is not None:
            state = {"epoch": epoch, "stopper": stopper.to_dict(), "history": history}
            save_checkpoint(mabi_checkpoint(model, vocab, step, rng, state, optimizer), out / "last.ckpt")
        if stopped:
            break
        if stop_after is not None and epoch >= stop_after and epoch < cfg.max_epochs:
            return TrainResult(model, vocab, history, stopper.best_epoch, stopper.best, False, completed=False)

    if best_params is not None:
        restore(params, best_params, "mabi.")
    return TrainResult(model, vocab, history, stopper.best_epoch, stopper.best, stopped)


# ---------------------------------------------------------------- retoucher training


@dataclass
class RetouchTrainResult:
    decoder: rt.CrossModalDecoder
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_cider: float = 0.0


def pregenerate(model: MabiNet, items: Sequence[DatasetItem], beam: int) -> list[tuple[Sentence, Sentence]]:
    return parallel_map(lambda it: mb.generate_pair(model, it.features, beam), items)


def retouch_items(dec: rt.CrossModalDecoder, items, pairs, beam: int = 1) -> list[Sentence]:
    return parallel_map(lambda ip: rt.retouch(dec, ip[0].features, ip[1][0], ip[1][1], beam).sentence,
                        list(zip(items, pairs)))


def train_retoucher(model: MabiNet, vocab: Vocabulary, splits: dict[str, list[DatasetItem]],
                    cfg: Config | None = None, out_dir: str | Path | None = None,
                    pair_beam: int | None = None) -> RetouchTrainResult:
    """Second phase: fit the cross-modal decoder with the MaBi network frozen."""
    cfg = cfg or model.cfg
    train_items = splits.get("train") or []
    if not train_items:
        raise ConfigError("retoucher training needs a nonempty train split")
    if not splits.get("val"):
        raise ConfigError("retoucher training needs a validation split for early stopping")
    pair_beam = pair_beam or cfg.beam
    rng = np.random.default_rng(cfg.seed + 7919)
    dec = rt.CrossModalDecoder(model, cfg, rng)
    params = dec.parameters()
    optimizer = T.make_optimizer(cfg.optimizer, params, cfg.retoucher_lr or cfg.lr)
    epochs = cfg.retoucher_epochs or cfg.max_epochs

    train_pairs = pregenerate(model, train_items, pair_beam)
    val_pairs = pregenerate(model, splits["val"], pair_beam)
    examples = []
    for it, (s_f, s_b) in zip(train_items, train_pairs):
        pool = rt.build_pool(s_f, s_b, dec).tokens
        for cap in it.captions:
            examples.append((it.features, pool, vocab.encode_caption(cap)))
    lengths = [len(e[2]) for e in examples]

    stopper = EarlyStopper(cfg.patience)
    best, history = snapshot(params), []
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, epochs + 1):
        losses = [rt.train_step(dec, [examples[i] for i in b], optimizer=optimizer)
                  for b in length_batches(lengths, cfg.batch_size, rng)]
        sents = retouch_items(dec, splits["val"], val_pairs, 1)
        val = metrics.cider(corpus_of(sents, splits["val"], vocab))
        improved, stop = stopper.update(val, epoch)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_CIDEr": val})
        log.info("retoucher epoch %d loss %.4f val CIDEr %.2f", epoch, history[-1]["loss"], val)
        if improved:
            best = snapshot(params)
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(combined_checkpoint(dec, vocab, epoch), out / "retoucher.ckpt")
        if stop:
            break
    restore(params, best)
    return RetouchTrainResult(dec, history, stopper.best_epoch, stopper.best)


# ---------------------------------------------------------------- evaluation & ablation


def evaluate_mabi(model: MabiNet, vocab: Vocabulary, items: Sequence[DatasetItem], beam: int = 1,
                  forward: bool = True) -> dict[str, float]:
    return metrics.evaluate(corpus_of(decode_items(model, items, forward, beam), items, vocab))


def run_ablation(cfg: Config, splits: dict[str, list[DatasetItem]], lambdas: Sequence[float],
                 seeds: Sequence[int], split: str = "val", beam: int | None = None,
                 on_run: Callable[[dict], None] | None = None,
                 keep_models: bool = False) -> tuple[list[dict], list[dict]]:
    """Train one model per (lambda, seed); return per-lambda median rows and raw runs.

    With ``keep_models`` each raw run also carries its trained ``model`` and ``vocab``.
    """
    beam = beam or cfg.beam
    raw = []
    for lam in lambdas:
        for seed in seeds:
            res = train_loop(cfg.replace(lam=lam, seed=seed), splits)
            rec = {"lambda": lam, "seed": seed, "best_epoch": res.best_epoch,
                   "forward": evaluate_mabi(res.model, res.vocab, splits[split], beam, True),
                   "backward": evaluate_mabi(res.model, res.vocab, splits[split], beam, False)}
            if keep_models:
                rec["model"], rec["vocab"] = res.model, res.vocab
            raw.append(rec)
            if on_run is not None:
                on_run(rec)
    rows = []
    for lam in lambdas:
        runs = [r for r in raw if r["lambda"] == lam]
        row = {"lambda": lam}
        for col in metrics.COLUMNS:
            row[col] = statistics.median(r["forward"][col] for r in runs)
        rows.append(row)
    return rows, raw


def _cell(column: str, value):
    if column == "lambda":
        return f"{value:g}"
    return f"{value:.4f}" if isinstance(value, float) else value


def write_table(rows: Sequence[dict], columns: Sequence[str], path_or_fh) -> None:
    own = isinstance(path_or_fh, (str, Path))
    fh = open(path_or_fh, "w", newline="") if own else path_or_fh
    try:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(c, r[c]) for c in columns])
    finally:
        if own:
            fh.close()
