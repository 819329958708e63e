"""Short decorrelation A/B.

Same seed, same corpus, with and without the cross-level covariance penalty.
The acceptance suite runs the full 2,000-step version; this one is sized for
a quick look and prints the per-level covariance norms side by side.

    python demos/03_decorrelation_ab.py --steps 400
"""
import argparse
import time

import numpy as np
import torch

from rqmotion.config import RunConfig
from rqmotion.data import CorpusSpec, synthesize_corpus
from rqmotion.metrics import recon_report
from rqmotion.training import VQTrainer

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=400)
ap.add_argument("--train", type=int, default=100)
args = ap.parse_args()
torch.set_num_threads(1)

spec = CorpusSpec.default(train_count=args.train, eval_count=20)
ds = synthesize_corpus(spec, 0)
results = {}
for lam in (0.0, 0.1):
    cfg = RunConfig()
    cfg.corpus = spec
    cfg.train_vq.steps = args.steps
    cfg.train_vq.lam = lam
    cfg.train_vq.eval_every = 0
    t = time.time()
    vq = VQTrainer(cfg, ds).run()
    results[lam] = recon_report(vq, ds.eval, ds.stats)
    print(f"lambda={lam}: {time.time() - t:.0f}s")

print(f"\n{'levels':>8} {'lambda=0':>10} {'lambda=0.1':>11}")
for level, (a, b) in enumerate(zip(results[0.0].cov_norms, results[0.1].cov_norms)):
    print(f"{level}->{level + 1:<5} {a:>10.4f} {b:>11.4f}")
off, on = np.mean(results[0.0].cov_norms), np.mean(results[0.1].cov_norms)
print(f"{'mean':>8} {off:>10.4f} {on:>11.4f}   ({off / on:.1f}x lower)")
print(f"eval recon L1: {results[0.0].l1:.4f} vs {results[0.1].l1:.4f}")
