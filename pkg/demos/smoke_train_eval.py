"""Short training run on the synthetic shapes corpus, then a held-out report.

Uses the smoke configuration (64 px, base width 16) for a few hundred steps, so
it finishes in a few minutes on one CPU core.  Pass a step count to change it.

    python3 demos/smoke_train_eval.py [steps]
"""
import sys

from wain.data import ShapesCorpus
from wain.evaluate import evaluate
from wain.train import Trainer, holdout_psnr, smoke_config

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
trainer = Trainer(smoke_config("demo_out/smoke", total_steps=steps))
log = trainer.run()
first, last = log.records[0], log.records[-1]
print(f"step {first['step']}: total {first['total']:.3f}   step {last['step']}: total {last['total']:.3f}")

holdout = ShapesCorpus(32, 64, seed=10_007)
ours, fill = holdout_psnr(trainer.G, holdout)
print(f"masked-region PSNR: model {ours:.2f} dB, per-channel mean fill {fill:.2f} dB")

report = evaluate(trainer.G.eval(), holdout, buckets=("10-20", "30-40"), seed=1)
print(report.to_table())
