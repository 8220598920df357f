"""Command-line interface: ``mabicap <subcommand> [flags]``.

Exit status is 0 on success, 2 for usage errors (argparse) and 1 when a
command fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from . import retoucher as rt
from . import training as tr
from .config import LAMBDA_SWEEP, Config
from .data import SPLITS, gen_synthetic, load_dataset, load_splits, save_dataset
from .errors import ConfigError
from .mabi import attention_weights, generate_pair
from .vocab import SPECIALS, tokenize

log = logging.getLogger("mabicap")
SPECIAL_IDS = set(range(len(SPECIALS)))


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    overrides = {
        "seed": getattr(args, "seed", None),
        "lam": getattr(args, "lam", None),
        "beam": getattr(args, "beam", None),
        "max_len": getattr(args, "max_len", None),
        "patience": getattr(args, "patience", None),
    }
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def _items(path: str, split: str):
    p = Path(path)
    if p.is_file():
        return load_dataset(p)
    splits = load_splits(p)
    if split not in splits:
        raise ConfigError(f"{path}: no {split}.jsonl")
    return splits[split]


def _write_attention(path: Path, weights: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "index", "weight"])
        for step, row in enumerate(weights, 1):
            for i, v in enumerate(row):
                w.writerow([step, i, repr(float(v))])


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    splits = gen_synthetic(args.count, args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        save_dataset(splits[name], out / f"{name}.jsonl")
        print(f"{name}: {len(splits[name])} items -> {out / f'{name}.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    res = tr.train_loop(cfg, load_splits(args.data), args.out, resume=args.resume)
    print(f"best epoch {res.best_epoch} val CIDEr {res.best_cider:.4f}"
          f"{' (stopped early)' if res.stopped_early else ''}")
    print(f"checkpoints in {args.out}")
    return 0


def cmd_train_retoucher(args) -> int:
    model, vocab, _ = tr.load_any(args.checkpoint)
    cfg = _config(args) if args.config else model.cfg
    for key in ("seed", "beam", "patience"):
        if getattr(args, key, None) is not None:
            cfg = cfg.replace(**{key: getattr(args, key)})
    res = tr.train_retoucher(model, vocab, load_splits(args.data), cfg, args.out)
    print(f"best epoch {res.best_epoch} val CIDEr {res.best_cider:.4f}")
    print(f"checkpoint {Path(args.out) / 'retoucher.ckpt'}")
    return 0


def _beam_rows(item_id: str, direction: str, sentence, vocab, reverse: bool = False):
    for rank, hyp in enumerate(sentence.beam, 1):
        toks = [t for t in hyp.tokens if t not in SPECIAL_IDS]
        if reverse:
            toks = toks[::-1]
        yield [item_id, direction, rank, repr(float(hyp.score)), int(hyp.finished), vocab.to_text(toks)]


def cmd_caption(args) -> int:
    model, vocab, dec = tr.load_any(args.checkpoint)
    items = _items(args.data, args.split)
    beam_fh = open(args.dump_beam, "w", newline="") if args.dump_beam else None
    beam_out = csv.writer(beam_fh) if beam_fh else None
    if beam_out:
        beam_out.writerow(["id", "sentence", "rank", "score", "finished", "text"])
    att_dir = Path(args.attention_out) if args.attention_out else None
    if att_dir is not None:
        att_dir.mkdir(parents=True, exist_ok=True)
    w = csv.writer(sys.stdout)
    w.writerow(["id", "forward", "backward", "final"])
    for it in items:
        s_f, s_b = generate_pair(model, it.features, args.beam, args.max_len)
        final = ""
        if beam_out:
            beam_out.writerows(_beam_rows(it.id, "forward", s_f, vocab))
            beam_out.writerows(_beam_rows(it.id, "backward", s_b, vocab, reverse=True))
        if dec is not None:
            res = rt.retouch(dec, it.features, s_f, s_b, args.beam, args.max_len)
            final = vocab.to_text(res.sentence.tokens)
            if beam_out:
                beam_out.writerows(_beam_rows(it.id, "final", res.sentence, vocab))
            if att_dir is not None:
                _write_attention(att_dir / f"{it.id}.visual.csv", res.alphas)
                _write_attention(att_dir / f"{it.id}.semantic.csv", res.betas)
        elif att_dir is not None:
            _write_attention(att_dir / f"{it.id}.forward.csv", attention_weights(model, it.features, s_f, True))
        w.writerow([it.id, vocab.to_text(s_f.tokens), vocab.to_text(s_b.tokens), final])
    if beam_fh:
        beam_fh.close()
    return 0


def _read_candidates(path: str, column: str) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames or column not in reader.fieldnames:
            raise ConfigError(f"{path}: needs an 'id' column and a {column!r} column")
        return {row["id"]: row[column] for row in reader}


def cmd_eval(args) -> int:
    items = _items(args.data, args.split)
    if args.candidates:
        cands = _read_candidates(args.candidates, args.column)
        missing = [it.id for it in items if it.id not in cands]
        if missing:
            raise ConfigError(f"no candidate for {len(missing)} item(s), e.g. {missing[0]}")
        corpus = [(tokenize(cands[it.id]), [tokenize(c) for c in it.captions]) for it in items]
    elif args.checkpoint:
        model, vocab, dec = tr.load_any(args.checkpoint)
        beam = args.beam
        if args.column == "final":
            if dec is None:
                raise ConfigError("checkpoint has no retoucher; use --column forward or backward")
            pairs = tr.pregenerate(model, items, beam)
            sents = tr.retouch_items(dec, items, pairs, beam)
        else:
            sents = tr.decode_items(model, items, args.column == "forward", beam)
        corpus = tr.corpus_of(sents, items, vocab)
    else:
        raise ConfigError("eval needs --candidates or --checkpoint")
    tr.write_table([metrics.evaluate(corpus)], metrics.COLUMNS, sys.stdout)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    splits = load_splits(args.data)
    seeds = args.seeds if args.seeds else [cfg.seed]

    def progress(rec):
        log.info("lambda %g seed %d forward CIDEr %.3f", rec["lambda"], rec["seed"], rec["forward"]["CIDEr"])

    rows, _ = tr.run_ablation(cfg, splits, args.lambdas, seeds, split=args.split, beam=args.beam,
                              on_run=progress)
    columns = ("lambda", *metrics.COLUMNS)
    tr.write_table(rows, columns, args.out if args.out else sys.stdout)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mabicap", description="Mutual-aid bidirectional LSTM captioning")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True):
        if data:
            p.add_argument("--data", required=True, help="dataset directory or .jsonl file")
        if config:
            p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="write a synthetic train/val/test dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the mutual-aid network")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, help="construction-loss weight")
    p.add_argument("--patience", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-retoucher", help="train the cross-modal decoder on a frozen network")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam", type=int, help="beam width for the pre-generated sentences")
    p.add_argument("--patience", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_retoucher)

    p = sub.add_parser("caption", help="caption items; prints id, forward, backward, final as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", help="split to use when --data is a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-len", type=int)
    p.add_argument("--attention-out", help="directory for per-item attention weight CSVs")
    p.add_argument("--dump-beam", help="CSV path listing every final beam hypothesis with its score")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="metric row (CSV) for candidates or a checkpoint")
    p.add_argument("--data", required=True, help="references")
    p.add_argument("--split", default="test")
    p.add_argument("--candidates", help="CSV with an id column and a caption column")
    p.add_argument("--column", default="final", help="candidate column / which sentence to score")
    p.add_argument("--checkpoint")
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="lambda sweep; one CSV row per lambda (median over seeds)")
    common(p)
    p.add_argument("--lambdas", type=_floats, default=list(LAMBDA_SWEEP))
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds (default: --seed or config seed)")
    p.add_argument("--patience", type=int)
    p.add_argument("--beam", type=int, default=1, help="beam used when scoring each run")
    p.add_argument("--split", default="val")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        print(f"mabicap {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
