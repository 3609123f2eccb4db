"""
Masked-patch pretraining, then fine-tuning
==========================================

Pretrain the nano encoder on unlabeled synthetic clips (tones, chirps,
noise bursts), then fine-tune a linear classifier from the pretrained
weights and from a fresh initialization, and compare test accuracy.

The default budget is small so the script finishes in a few minutes.
``--steps 1200 --labeled 30`` matches the setting used by the acceptance
suite, which takes around 11 minutes on one core.

    python3 demos/03_pretrain_then_finetune.py --steps 200
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from ssamba import features as ft
from ssamba import model as m
from ssamba import synthetic as syn
from ssamba import training as tr

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=200)
parser.add_argument("--clips", type=int, default=600, help="unlabeled pretraining clips")
parser.add_argument("--labeled", type=int, default=30, help="labeled training clips")
parser.add_argument("--out", default=None)
args = parser.parse_args()


def corpus(n, seed, stats=None, prefix="c"):
    clips, labels = syn.three_class_dataset(n, 2.0, seed=seed)
    specs = [ft.log_mel(ft.Waveform(c)) for c in clips]
    return tr.PatchCorpus.from_spectrograms(specs, [f"{prefix}{i}" for i in range(n)], stats), labels


config = m.preset("nano", max_time_patches=13)      # 2 s clips -> 13 time groups, 104 patches
unlabeled, _ = corpus(args.clips, seed=2, prefix="u")
print(f"pretraining on {len(unlabeled)} clips of {unlabeled.M} patches")

out = Path(args.out or tempfile.mkdtemp(prefix="ssamba-demo-"))
pcfg = tr.PretrainConfig(lr=1e-3, batch_size=8, max_steps=args.steps, max_epochs=1000,
                         eval_every=min(100, args.steps), seed=0)
result = tr.pretrain(unlabeled, pcfg, config, out_dir=out)
for e in result.run.evals:
    print(f"  step {e['step']:5d}  val loss {e['value']:.4f}")
run = tr.load_checkpoint(out / "best.ckpt")

# %%
labeled, labels = corpus(300, seed=1, stats=(run.norm_mean, run.norm_std))
data = tr.LabeledSet(labeled, labels)
train, test = data.subset(np.arange(args.labeled)), data.subset(np.arange(150, 300))

for seed in range(3):
    fcfg = tr.FinetuneConfig(num_classes=3, lr=1e-3, epochs=10, batch_size=8, seed=seed)
    pre = tr.finetune(run, train, fcfg, test).metrics["accuracy"]
    scratch = tr.finetune(m.EncoderModel.init(config, seed + 100), train, fcfg, test).metrics["accuracy"]
    print(f"seed {seed}: pretrained {pre:.3f}  from scratch {scratch:.3f}")

print("checkpoints and CSV logs in", out)
