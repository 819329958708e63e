"""Residual quantizer walkthrough on the synthetic corpus.

Trains a small quantizer for a few hundred steps, then looks at how much of
the latent each level explains, how the codes are used, and what a round trip
through the token grid costs.

    python demos/01_quantizer_walkthrough.py --steps 300
"""
import argparse

import numpy as np
import torch

from rqmotion.config import RunConfig
from rqmotion.data import CorpusSpec, normalize, synthesize_corpus
from rqmotion.metrics import codebook_stats, recon_report
from rqmotion.training import VQTrainer

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
torch.set_num_threads(1)

# %% a small corpus: five archetypes, captions come with each clip
cfg = RunConfig()
cfg.corpus = CorpusSpec.default(train_count=64, eval_count=16, min_frames=48, max_frames=96)
cfg.train_vq.steps = args.steps
cfg.train_vq.batch = 16
cfg.train_vq.eval_every = 0
ds = synthesize_corpus(cfg.corpus, args.seed)
print(f"{len(ds.train)} train clips, {len(ds.eval)} eval clips, {ds.dim} features per frame")
for seq in ds.train[:3]:
    print(f"  {seq.length:>3} frames  {seq.caption}")

# %% train
trainer = VQTrainer(cfg, ds)
for _ in range(args.steps):
    row = trainer.train_step()
    if trainer.step % 50 == 0:
        print(f"step {trainer.step:>4}  recon {row['recon']:.4f}  cov(0,1) {row['cov_l0_l1']:.3f}  "
              f"resets {row['resets']}")
vq = trainer.model.eval()

# %% each level should shave off a chunk of what is left
rep = recon_report(vq, ds.eval, ds.stats)
print("\nmean residual norm before each level:")
for level, norm in enumerate(rep.residual_norms):
    print(f"  r^{level}: {norm:.4f}")
print(f"eval recon L1 {rep.l1:.4f}")

# %% code usage: perplexity near K means codes are spread out, near 1 means collapse
books = codebook_stats(vq, ds.eval, ds.stats)
for level, (ppl, dead) in enumerate(zip(books.perplexity, books.dead)):
    print(f"  level {level}: perplexity {ppl:6.2f} / {vq.codebook_size}, unused on eval {dead}")

# %% the token path and the latent path decode to the same frames
clip = torch.from_numpy(normalize(ds.eval[0], ds.stats).frames)
with torch.no_grad():
    grid = vq.tokenize(clip)
    direct, _ = vq(clip)
    via_tokens = vq.decode_tokens(grid)
print(f"\ngrid shape {tuple(grid.shape)} for a {clip.shape[0]}-frame clip")
print("token path == latent path:", torch.equal(direct, via_tokens))

# %% coarse-to-fine: decode using only the first k levels
with torch.no_grad():
    phis = vq.quantizer.quantize_all(vq.encode(clip)).phis
for k in range(1, vq.levels + 1):
    with torch.no_grad():
        partial = vq.decode(sum(phis[:k]))
    print(f"  first {k} level(s): L1 {np.abs(partial.numpy() - clip.numpy()).mean():.4f}")
