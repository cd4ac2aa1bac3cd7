"""Validation grid over the blend weight and the consistency weight on the synthetic benchmark.

    python scripts/grid_beta_lambda.py --betas 0.2 0.4 0.6 --lambdas 0 1 5 [--epochs 3]

Each cell is one co-training run scored by macro AUROC of the blend on the
validation split; the chosen cell is then scored once on the test split.
"""

import argparse
import dataclasses
import sys

from ramehr.cotrain import select_hyperparams
from ramehr.ehr import split_indices
from ramehr.pipeline import RunConfig, make_client, make_embedder, make_trainer, prepare, summarize_vocab
from ramehr.retrieval import build_index
from ramehr.summarizer import SummaryCache
from ramehr.synth import SynthConfig, generate


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--betas", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 1.0, 5.0])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--patients", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    run = RunConfig()
    run = run.replace(train=dataclasses.replace(run.train, epochs=args.epochs, seed=args.seed))
    bench = generate(SynthConfig(num_patients=args.patients, seed=args.seed))
    corpus = bench.corpus()
    emb = make_embedder(run)
    texts = summarize_vocab(list(bench.vocab), bench.task, corpus, build_index(corpus, emb), emb,
                            make_client(run), SummaryCache(None), run)
    data = prepare(bench.dataset, texts, run)
    tr, va, te = split_indices(len(data), run.split, args.seed)

    def val_auroc(beta, lam):
        trainer = make_trainer(data, run, beta=beta, lam=lam)
        trainer.fit(tr)
        score = trainer.score(va)
        print(f"beta={beta:<5} lambda={lam:<5} val AUROC {score:.4f}", flush=True)
        return score

    best = select_hyperparams(args.betas, args.lambdas, val_auroc, run.train)
    trainer = make_trainer(data, run.replace(train=best))
    trainer.fit(tr)
    print(f"selected beta={best.beta} lambda={best.lam}; test AUROC {trainer.evaluate(te).auroc:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
