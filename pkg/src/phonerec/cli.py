"""Command-line pipelines: gen-corpus, train, finetune, decode, eval.

Every run writes a run.meta file next to its outputs recording the resolved
configuration and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import load_model, save_model
from .corpus import DEFAULT_SPLITS, SplitSpec, generate_split
from .dataset_io import read_dataset, write_dataset
from .decoding import DecodeConfig, attention_beam_search, decode_utterance, \
    dump_hypotheses, max_len_for_task
from .evaluation import UtteranceResult, align, bucket_report, per, write_eval_report
from .models import build_model
from .phones import build_alphabet
from .training import fit, transfer_finetune


def _write_meta(out_dir: Path, subcommand: str, seed, extra: dict):
    meta = {"command": subcommand}
    if seed is not None:
        meta["seed"] = seed
    meta.update(extra)
    cfgmod.write_kv_file(out_dir / "run.meta", cfgmod.describe(meta))


def _info(msg: str):
    print(msg, file=sys.stderr)


def cmd_gen_corpus(args) -> int:
    kv = cfgmod.parse_kv_file(args.config) if args.config else {}
    corpus_kw = {}
    for key, text in kv.items():
        if key not in cfgmod.CORPUS_KEYS:
            raise cfgmod.ConfigError(f"unknown gen-corpus config key {key!r}")
        corpus_kw[key] = cfgmod.coerce(key, text, cfgmod.CORPUS_KEYS[key])
    feature_dim = corpus_kw.pop("feature_dim", 80)
    alphabet = build_alphabet()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"feature_dim": feature_dim}
    for spec in DEFAULT_SPLITS:
        size_key = spec.name.replace("-", "_") + "_size"
        size = corpus_kw.get(size_key, spec.size)
        spec = SplitSpec(spec.name, size, spec.domain, spec.task, spec.with_miscues)
        utts = generate_split(alphabet, spec, seed=args.seed, feature_dim=feature_dim)
        write_dataset(utts, out / spec.name, alphabet)
        meta[size_key] = size
        _info(f"gen-corpus: wrote {size} utterances to {out / spec.name}")
    _write_meta(out, "gen-corpus", args.seed, meta)
    return 0


def _train_common(args, stage: str, model, family: str, train_kw: dict):
    alphabet = build_alphabet()
    train_utts = read_dataset(args.train_data, alphabet)
    valid_utts = read_dataset(args.valid_data, alphabet)
    if family.startswith("transformer"):
        train_kw.setdefault("d_model", model.config.d_model)
    tc = cfgmod.make_train_config(family, stage, train_kw, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = fit if stage == "train" else transfer_finetune
    result = runner(model, train_utts, valid_utts, tc, log_path=out / "train_log.tsv")
    model.load_state(result.best_state)
    save_model(out / "model.ckpt", model)
    meta = {"family": family, "train_data": args.train_data,
            "valid_data": args.valid_data, "best_epoch": result.best_epoch,
            "best_valid_loss": f"{result.best_valid:.6f}"}
    meta.update({k: v for k, v in dataclasses.asdict(tc).items()})
    _write_meta(out, stage, args.seed, meta)
    _info(f"{stage}: best epoch {result.best_epoch} "
          f"(valid loss {result.best_valid:.4f}) -> {out / 'model.ckpt'}")
    return 0


def cmd_train(args) -> int:
    family, model_cfg, train_kw, _ = cfgmod.load_config(args.config, args.family)
    model = build_model(family, model_cfg, seed=args.seed)
    return _train_common(args, "train", model, family, train_kw)


def cmd_finetune(args) -> int:
    model = load_model(args.source)
    if args.family and model.family != args.family:
        raise ValueError(f"checkpoint family {model.family!r} does not match "
                         f"--family {args.family!r}")
    train_kw = {}
    if args.config:
        _, _, train_kw, _ = cfgmod.load_config(args.config, model.family)
    return _train_common(args, "finetune", model, model.family, train_kw)


def cmd_decode(args) -> int:
    alphabet = build_alphabet()
    model = load_model(args.ckpt)
    branch = args.branch or ("enc" if model.family == "rnn-ctc" else "dec")
    utts = read_dataset(args.data, alphabet)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    dump_rows = []
    for i, utt in enumerate(utts):
        max_len = args.max_len or max_len_for_task(utt.task)
        dc = DecodeConfig(beam_size=args.beam, max_len=max_len, output_branch=branch)
        labels = decode_utterance(model, utt.features.frames, dc)
        rows.append((utt.id, labels))
        if args.dump_hyps:
            if branch == "dec":
                ranked = attention_beam_search(model, utt.features.frames, dc)
            else:
                from .ctc import ctc_prefix_beam_search
                from .phones import BLANK_ID
                ranked = ctc_prefix_beam_search(
                    model.ctc_logprobs(utt.features.frames), BLANK_ID,
                    dc.beam_size, max_len=dc.max_len)
            for rank, hyp in enumerate(ranked, start=1):
                dump_rows.append((utt.id, rank, hyp.log_prob, hyp.labels))
        if (i + 1) % 50 == 0:
            _info(f"decode: {i + 1}/{len(utts)} utterances")
    with open(out / "hyps.tsv", "w", encoding="utf-8") as fh:
        for utt_id, labels in rows:
            fh.write(f"{utt_id}\t{' '.join(alphabet.symbol_of(i) for i in labels)}\n")
    if dump_rows:
        dump_hypotheses(out / "all_hyps.tsv", dump_rows, alphabet)
    _write_meta(out, "decode", args.seed,
                {"ckpt": args.ckpt, "data": args.data, "branch": branch,
                 "beam": args.beam, "max_len": args.max_len or "per-task"})
    _info(f"decode: wrote {len(rows)} hypotheses to {out / 'hyps.tsv'}")
    return 0


def _read_hyps(path, alphabet):
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path} line {lineno}: expected 2 columns, got {len(cols)}")
            utt_id, text = cols
            hyps[utt_id] = tuple(alphabet.id_of(s) for s in text.split())
    return hyps


def cmd_eval(args) -> int:
    alphabet = build_alphabet()
    utts = read_dataset(args.data, alphabet)
    hyps = _read_hyps(args.hyps, alphabet)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for utt in utts:
        if utt.id not in hyps:
            raise ValueError(f"no hypothesis for utterance {utt.id}")
        counts, _ = align(tuple(utt.read.ids), hyps[utt.id])
        results.append(UtteranceResult(utt.id, utt.task, len(utt.miscues), counts))
    write_eval_report(out / "report.tsv", results)
    pooled = results[0].counts
    for r in results[1:]:
        pooled = pooled + r.counts
    _write_meta(out, "eval", args.seed, {"data": args.data, "hyps": args.hyps})
    print(f"PER {per(pooled):.4f} over {len(results)} utterances "
          f"({pooled.reference_length} reference phones)")
    by_task = bucket_report(results, "task")
    for task in sorted(by_task):
        print(f"  {task}: PER {by_task[task].per:.4f} "
              f"({by_task[task].utterances} utts)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phonerec",
        description="Phone recognition pipelines on a synthetic read-speech corpus")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic dataset splits")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a family on adult data")
    p.add_argument("--family", choices=["rnn-ctc", "las", "las-ctc",
                                        "transformer", "transformer-ctc"])
    p.add_argument("--config", default=None)
    p.add_argument("--train-data", required=True)
    p.add_argument("--valid-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="whole-model transfer to child data")
    p.add_argument("--source", required=True, help="source checkpoint path")
    p.add_argument("--family", default=None, help="expected checkpoint family")
    p.add_argument("--config", default=None)
    p.add_argument("--train-data", required=True)
    p.add_argument("--valid-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="decode a dataset with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branch", choices=["enc", "dec"], default=None)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None,
                   help="override the per-task default (word 30, sentence 130)")
    p.add_argument("--dump-hyps", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
