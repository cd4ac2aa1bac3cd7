"""Command-line entry points.

    ramehr synth      write a synthetic benchmark into the working directory
    ramehr ingest     merge passage/triplet files into one corpus
    ramehr index      embed the corpus into a flat vector index
    ramehr retrieve   top-k passages for every vocabulary code
    ramehr summarize  fill the summary cache for every vocabulary code
    ramehr train      co-train both models, write checkpoints and a log
    ramehr evaluate   score a split with saved checkpoints

Settings come from ``--config`` (one JSON document) and flags; flags win.
Exit codes: 0 ok, 1 usage/config, 2 data, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from ramehr.corpus import ingest, load_corpus
from ramehr.ehr import TaskSpec, load_dataset, load_vocab, split_indices
from ramehr.errors import ConfigError, DataError, RamEhrError
from ramehr.pipeline import (RunConfig, load_run_config, make_client, make_embedder, make_trainer, prepare,
                             summarize_vocab)
from ramehr.retrieval import VectorIndex, build_index, topk
from ramehr.summarizer import SummaryCache
from ramehr.synth import SynthConfig, generate

log = logging.getLogger("ramehr")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--workdir", default=".", help="directory that relative paths resolve against")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="passages retrieved per code")
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-aug", type=float)
    p.add_argument("--lr-local", type=float)
    p.add_argument("--client", choices=("stub", "http"))
    p.add_argument("--embedder", choices=("hash", "file"))
    p.add_argument("--embedder-file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ramehr", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    common = _common()
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark")
    s.add_argument("--patients", type=int, default=SynthConfig.num_patients)
    s.add_argument("--labels", type=int, default=SynthConfig.num_labels)
    s.add_argument("--rho-c", type=float, default=SynthConfig.cooccurrence_signal)
    s.add_argument("--rho-k", type=float, default=SynthConfig.knowledge_signal)
    i = sub.add_parser("ingest", parents=[common], help="build the corpus store")
    i.add_argument("sources", nargs="*", help="passage/triplet JSONL files (default: from config)")
    sub.add_parser("index", parents=[common], help="build the vector index")
    sub.add_parser("retrieve", parents=[common], help="write top-k hits for every code")
    sub.add_parser("summarize", parents=[common], help="populate the summary cache")
    sub.add_parser("train", parents=[common], help="co-train and save checkpoints")
    e = sub.add_parser("evaluate", parents=[common], help="evaluate saved checkpoints")
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--which", choices=("blend", "aug", "local"), default="blend")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    train = {}
    for flag, key in (("seed", "seed"), ("beta", "beta"), ("lam", "lam"), ("epochs", "epochs"),
                      ("lr_aug", "lr_aug"), ("lr_local", "lr_local")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    changes = {}
    if train:
        changes["train"] = dataclasses.replace(cfg.train, **train)
    for flag in ("k", "client", "embedder", "embedder_file"):
        if getattr(args, flag) is not None:
            changes[flag] = getattr(args, flag)
    return cfg.replace(**changes) if changes else cfg


def _path(cfg: RunConfig, args, name: str) -> Path:
    return cfg.paths.resolve(name, args.workdir)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_inputs(cfg: RunConfig, args):
    vocab = load_vocab(_need(_path(cfg, args, "vocab"), "vocabulary"))
    task = TaskSpec.load(_need(_path(cfg, args, "task"), "task file"))
    return vocab, task


# -- commands ------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> None:
    scfg = SynthConfig(num_patients=args.patients, num_labels=args.labels, cooccurrence_signal=args.rho_c,
                       knowledge_signal=args.rho_k, seed=cfg.train.seed)
    bench = generate(scfg)
    Path(args.workdir).mkdir(parents=True, exist_ok=True)
    bench.write(args.workdir)
    print(f"wrote {len(bench.dataset)} patients, {len(bench.vocab)} codes, "
          f"{len(bench.passages)} passages, {len(bench.triplets)} triplets to {args.workdir}")


def cmd_ingest(cfg: RunConfig, args) -> None:
    sources = args.sources or [str(Path(args.workdir) / s) for s in cfg.paths.sources]
    corpus = ingest([_need(Path(s), "corpus source") for s in sources])
    out = _path(cfg, args, "corpus")
    corpus.save(out)
    print(f"corpus: {len(corpus)} passages -> {out}")


def cmd_index(cfg: RunConfig, args) -> None:
    corpus = load_corpus(_need(_path(cfg, args, "corpus"), "corpus"))
    index = build_index(corpus, make_embedder(cfg))
    out = _path(cfg, args, "index")
    index.save(out)
    print(f"index: {len(index)} vectors of dim {index.dim} -> {out}")


def cmd_retrieve(cfg: RunConfig, args) -> None:
    vocab = load_vocab(_need(_path(cfg, args, "vocab"), "vocabulary"))
    index = VectorIndex.load(_need(_path(cfg, args, "index"), "index"))
    emb = make_embedder(cfg)
    out = _path(cfg, args, "retrieval")
    with open(out, "w", encoding="utf-8") as fh:
        for code in vocab:
            fh.write(json.dumps(topk(index, emb, code.name, cfg.k, query_code=code.id).to_json()) + "\n")
    print(f"retrieval: {len(vocab)} codes, k={cfg.k} -> {out}")


def cmd_summarize(cfg: RunConfig, args) -> None:
    vocab, task = _load_inputs(cfg, args)
    corpus = load_corpus(_need(_path(cfg, args, "corpus"), "corpus"))
    index = VectorIndex.load(_need(_path(cfg, args, "index"), "index"))
    cache_path = _path(cfg, args, "cache")
    cache = SummaryCache(cache_path)
    before = len(cache)
    summarize_vocab(list(vocab), task, corpus, index, make_embedder(cfg), make_client(cfg), cache, cfg)
    print(f"summaries: {len(cache) - before} new, {len(cache)} cached -> {cache_path}")


def _prepared(cfg: RunConfig, args):
    vocab, task = _load_inputs(cfg, args)
    ds = load_dataset(_need(_path(cfg, args, "dataset"), "dataset"), vocab, task)
    cache = SummaryCache(_need(_path(cfg, args, "cache"), "summary cache"))
    texts = cache.texts_for(task.name)
    if not texts:
        raise DataError(f"summary cache has no entries for task {task.name!r}; run summarize first")
    data = prepare(ds, texts, cfg)
    return data, split_indices(len(data), cfg.split, cfg.train.seed)


def cmd_train(cfg: RunConfig, args) -> None:
    data, (tr, va, _) = _prepared(cfg, args)
    trainer = make_trainer(data, cfg)
    trainer.fit(tr, va)
    ckpt = _path(cfg, args, "checkpoints")
    trainer.save(ckpt)
    trainer.write_log(ckpt / "train_log.csv")
    _write_json(ckpt / "run_config.json", cfg.to_json())
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.steps} steps; val AUROC {last.get('val_auroc')}; checkpoints -> {ckpt}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    ckpt = _path(cfg, args, "checkpoints")
    for name in ("aug.ckpt", "local.ckpt", "run_config.json"):
        _need(ckpt / name, "checkpoint file")
    # architecture and split come from the run that produced the checkpoints
    trained = RunConfig.from_json(json.loads((ckpt / "run_config.json").read_text(encoding="utf-8")))
    cfg = cfg.replace(aug=trained.aug, local=trained.local, split=trained.split, tokenizer_seed=trained.tokenizer_seed,
                      train=dataclasses.replace(cfg.train, seed=trained.train.seed))
    data, splits = _prepared(cfg, args)
    trainer = make_trainer(data, cfg)
    trainer.load(ckpt)
    report = trainer.evaluate(splits[SPLITS.index(args.split)], args.which)
    out = _path(cfg, args, "report")
    report.save(out)
    print(json.dumps({"acc": report.acc, "auroc": report.auroc, "aupr": report.aupr, "macro_f1": report.macro_f1},
                     sort_keys=True))


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "index": cmd_index, "retrieve": cmd_retrieve,
            "summarize": cmd_summarize, "train": cmd_train, "evaluate": cmd_evaluate}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.cmd](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except RamEhrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
