"""
Training a deformation generator for a few minutes
==================================================

The critic learns to tell healthy from modified diseased images; the
generator learns a smooth field that makes diseased images look healthy.
The field's effect, compared against the known disease change, is scored
with masked NCC. A run this short gives a rough field; the acceptance
suite trains longer.
"""

from pathlib import Path

import torch

from deform_attrib.evaluation import evaluate
from deform_attrib.models import modify
from deform_attrib.synthdata import Corpus, SyntheticSpec, generate_corpus
from deform_attrib.train import TrainConfig, Trainer
from deform_attrib.viz import QuiverStyle, render_quiver, side_by_side

out = Path(__file__).with_name("output")
root = out / "train_corpus"
if not (root / "manifest.csv").exists():
    generate_corpus(SyntheticSpec(n_val_pairs=20, n_test_pairs=20), root)
corpus = Corpus.load(root)

# 100 critic updates per generator update; 2 epochs of 13 generator updates
cfg = TrainConfig(mode="defi", epochs=2, base_channels=8, final_layer_scale=100.0)
trainer = Trainer(cfg, corpus.train0, corpus.train1, corpus.val, run_dir=out / "run")
state = trainer.fit()
for row in state.history:
    print(f"epoch {row['epoch']}: critic {row['critic_loss']:.3f}, val NCC {row['val_ncc']:.3f}")

report = evaluate(trainer.generator, corpus.test)
print(f"test NCC {report.mean:.3f} over {len(report.subject_means)} subjects")

pair = corpus.test[0]
x1 = torch.from_numpy(pair.x1)[None, None]
with torch.no_grad():
    healed, field = modify(trainer.generator, x1)
healed, field = healed[0, 0].numpy(), field[0].numpy()
(out / "trained_quiver.svg").write_text(render_quiver(pair.x1, field, QuiverStyle(scale=5.0)))
side_by_side(pair.x1, healed, healed - pair.x1, out / "trained_panel.png")
