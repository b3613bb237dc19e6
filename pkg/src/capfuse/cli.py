"""``capfuse`` command line: data generation, vocabularies, training, evaluation, captioning.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, parse_dims
from .data import (DataError, Vocab, build_vocab, encode_captions, gen_synthetic, read_captions,
                   read_features, records_to_captions, tokenize, write_captions, write_features)
from .tensor import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("capfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--profile", choices=["desk", "paper"], help="built-in defaults (desk)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--jobs", type=int, default=None, help="decode worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="capfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic MMFC + captions corpus")
    sub.add_parser("build-vocab", parents=[common], help="build the word vocabulary from captions")
    sub.add_parser("build-attrs", parents=[common], help="build the attribute vocabulary")

    t = sub.add_parser("train", parents=[common], help="run the staged training schedule")
    t.add_argument("--decoder", choices=["topdown", "xlan"])
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", parents=[common], help="decode and score an ensemble of checkpoints")
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--split", choices=["val", "train", "all"], default="val")
    e.add_argument("--beam", type=int)
    e.add_argument("--no-figures", action="store_true")

    c = sub.add_parser("caption", parents=[common], help="caption one video")
    c.add_argument("--video-id", required=True)
    c.add_argument("--checkpoints", nargs="+", required=True)
    c.add_argument("--beam", type=int)
    c.add_argument("--no-figures", action="store_true")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.profile:
        cfg.update({"profile": args.profile})
    cfg.apply_env()
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    cfg.update(pairs)
    if getattr(args, "decoder", None):
        cfg.update({"model.decoder": args.decoder})
    if args.jobs is not None:
        cfg.update({"eval.jobs": args.jobs})
    if getattr(args, "beam", None) is not None:
        cfg.update({"decode.beam": args.beam})
    return cfg.validate()


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"required file not found: {p}")
    return p


def _corpus(cfg):
    caps = read_captions(_need(cfg["paths.captions"]))
    return [tokenize(c, cfg["data.max_words"]) for cs in caps.values() for c in cs]


def _load_split(cfg, vocab: Vocab, split: str = "all"):
    from .training import Dataset
    bundles = read_features(_need(cfg["paths.features"]))
    caps = read_captions(_need(cfg["paths.captions"]))
    missing = [b.video_id for b in bundles if b.video_id not in caps]
    if missing:
        raise DataError(f"no captions for videos: {', '.join(missing)}")
    by_id = {r.video_id: r for r in encode_captions(caps, vocab, cfg["data.max_words"])}
    records = [by_id[b.video_id] for b in bundles]
    n_val = cfg["data.n_val"]
    if n_val >= len(bundles):
        raise DataError(f"data.n_val={n_val} leaves no training videos out of {len(bundles)}")
    cut = len(bundles) - n_val
    if split == "train":
        return Dataset(bundles[:cut], records[:cut])
    if split == "val":
        return Dataset(bundles[cut:], records[cut:])
    return Dataset(bundles, records)


def cmd_gen_data(cfg) -> int:
    n = cfg["data.n_videos"] + cfg["data.n_val"]
    bundles, records, vocab = gen_synthetic(
        cfg["seed"], n_videos=n, n_frames=cfg["data.n_frames"],
        modality_dims=parse_dims(cfg["data.modalities"]), vocab_size=cfg["data.vocab_size"],
        max_caption_len=cfg["data.max_caption_len"], prob_dims=parse_dims(cfg["data.prob_modalities"]),
        noise=cfg["data.noise"])
    for key in ("paths.features", "paths.captions"):
        Path(cfg[key]).parent.mkdir(parents=True, exist_ok=True)
    write_features(bundles, cfg["paths.features"])
    write_captions(cfg["paths.captions"], records_to_captions(records, vocab))
    print(f"features\t{cfg['paths.features']}\t{len(bundles)} videos")
    print(f"captions\t{cfg['paths.captions']}\t{sum(len(r.references) for r in records)} references")
    return EXIT_OK


def cmd_build_vocab(cfg) -> int:
    vocab = build_vocab(_corpus(cfg), min_count=cfg["data.min_count"])
    Path(cfg["paths.vocab"]).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(cfg["paths.vocab"])
    print(f"vocab\t{cfg['paths.vocab']}\t{len(vocab)} entries\t{vocab.content_hash()}")
    return EXIT_OK


def cmd_build_attrs(cfg) -> int:
    from .semantic import build_attribute_vocab
    k = cfg["model.semantic_k"]
    if k < 1:
        raise ConfigError("model.semantic_k is 0; the semantic head is disabled")
    try:
        attrs = build_attribute_vocab(_corpus(cfg), k=k)
    except ValueError as e:
        raise DataError(str(e)) from None
    Path(cfg["paths.attributes"]).parent.mkdir(parents=True, exist_ok=True)
    attrs.save(cfg["paths.attributes"])
    print(f"attributes\t{cfg['paths.attributes']}\t{len(attrs)} entries")
    return EXIT_OK


def _run_dir(cfg) -> Path:
    return Path(cfg["paths.checkpoints"]) / cfg["model.decoder"]


def cmd_train(cfg, resume=None) -> int:
    from .plots import training_curve
    from .semantic import AttributeVocab
    from .training import read_log, run_stage_schedule
    vocab = Vocab.load(_need(cfg["paths.vocab"]))
    train, val = _load_split(cfg, vocab, "train"), _load_split(cfg, vocab, "val")
    attrs = AttributeVocab.load(_need(cfg["paths.attributes"])) if cfg["model.semantic_k"] else None
    dims = {k: v.shape[1] for k, v in train.bundles[0].modalities.items()}
    model_cfg = cfg.model_config(dims, len(vocab))
    run_dir = _run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.txt")
    log_path = run_dir / "train_log.jsonl"
    result = run_stage_schedule(train, val, cfg.schedule(), model_cfg, seed=cfg["seed"], vocab=vocab,
                                attrs=attrs, resume=resume and _need(resume), log_path=log_path,
                                ckpt_dir=run_dir)
    figure = training_curve(read_log(log_path), Path(cfg["paths.figures"]) / f"training_{cfg['model.decoder']}.png")
    for rec in result.log:
        print(f"{rec.stage}\t{rec.epoch}\t{rec.lr:.1e}\t{rec.loss:.6f}\t{rec.val_cider:.6f}")
    print(f"checkpoint\t{run_dir / 'final.ckpt'}")
    print(f"figure\t{figure}")
    return EXIT_OK


def _models(cfg, paths, vocab):
    from .inference import load_model
    return [load_model(_need(p), vocab.content_hash()) for p in paths]


def cmd_eval(cfg, checkpoints, split="val", figures=True) -> int:
    from .inference import ensemble_eval
    vocab = Vocab.load(_need(cfg["paths.vocab"]))
    data = _load_split(cfg, vocab, split)
    models = _models(cfg, checkpoints, vocab)
    kw = dict(beam=cfg["decode.beam"], max_len=cfg["decode.max_len"], jobs=cfg["eval.jobs"])
    scores, captions = ensemble_eval(models, data.bundles, data.records, vocab, **kw)
    report = dict(scores)
    blocks = {"ensemble": scores}
    if len(models) > 1:
        report["runs"] = []
        for i, (path, m) in enumerate(zip(checkpoints, models)):
            s, _ = ensemble_eval([m], data.bundles, data.records, vocab, **kw)
            report["runs"].append({"checkpoint": str(path), **s})
            blocks[f"{i}:{Path(path).parent.name}/{Path(path).stem}"] = s
    out = Path(cfg["paths.report"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cap_path = Path(cfg["paths.captions_out"])
    with cap_path.open("w", encoding="utf-8") as fh:
        for vid, text in captions.items():
            fh.write(json.dumps({"video_id": vid, "caption": text}, ensure_ascii=False) + "\n")
    for name in ("bleu4", "rouge_l", "cider_d", "meteor_exact"):
        print(f"{name}\t{scores[name]:.6f}")
    print(f"report\t{out}")
    print(f"captions\t{cap_path}")
    if figures:
        from .plots import metric_bars
        print(f"figure\t{metric_bars(blocks, Path(cfg['paths.figures']) / 'metrics.png')}")
    return EXIT_OK


def cmd_caption(cfg, video_id, checkpoints, figures=True) -> int:
    from .inference import decode_all
    vocab = Vocab.load(_need(cfg["paths.vocab"]))
    bundles = {b.video_id: b for b in read_features(_need(cfg["paths.features"]))}
    if video_id not in bundles:
        raise DataError(f"video id {video_id!r} not in {cfg['paths.features']}")
    models = _models(cfg, checkpoints, vocab)
    bundle = bundles[video_id]
    ids = decode_all(models, [bundle], beam=cfg["decode.beam"], max_len=cfg["decode.max_len"],
                     length_alpha=cfg["decode.length_alpha"])[0]
    words = vocab.decode(ids)
    print(f"{video_id}\t{' '.join(words)}")
    if figures:
        from .plots import attention_heatmap
        # replay the caption under teacher forcing to read the first model's modality weights
        _, weights = _forced_weights(models[0], bundle, ids)
        path = Path(cfg["paths.figures"]) / f"attention_{video_id}.png"
        names = list(models[0].config.fused_names)
        print(f"figure\t{attention_heatmap(weights, names, words, path, title=video_id)}")
    return EXIT_OK


def _forced_weights(model, bundle, ids):
    import numpy as np

    from . import tensor as T
    from .data import BOS, EOS
    seq = [BOS] + list(ids)
    rows = []
    with T.no_grad():
        enc, _ = model.encode(model.collate([bundle]))
        state = model.init_state(1)
        for tok in seq:
            out = model.step(state, np.array([tok]), enc)
            state = out.state
            rows.append(out.fused.weights.data[0].astype(np.float64))
    return seq[1:] + [EOS], np.stack(rows)


def cmd_gradcheck() -> int:
    from .gradcheck import TOLERANCE, run_suite
    results = run_suite(verbose=print)
    failed = [k for k, v in results.items() if not v < TOLERANCE]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "build-vocab":
            return cmd_build_vocab(cfg)
        if args.command == "build-attrs":
            return cmd_build_attrs(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoints, args.split, not args.no_figures)
        if args.command == "caption":
            return cmd_caption(cfg, args.video_id, args.checkpoints, not args.no_figures)
        if args.command == "gradcheck":
            return cmd_gradcheck()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # shape and vocabulary mismatches between data and checkpoints
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    parser.print_usage(sys.stderr)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
