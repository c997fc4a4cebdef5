"""
Overfitting a tiny synthetic set
================================

Train the attention model with the Adam then SGD schedule on eight tracks and
watch the training loss fall. Augmentation is off so memorisation is easy.
"""

import tempfile
from pathlib import Path

from moodtheme.augment import AugmentConfig
from moodtheme.model import ModelConfig
from moodtheme.spectro import load_manifest
from moodtheme.synthetic import make_dataset
from moodtheme.train import TrainConfig, train_loop

root = Path(tempfile.mkdtemp())
train = load_manifest(make_dataset(root, n_tracks=8, n_labels=4, bands=32, frames=256, seed=0),
                      root / "tags.txt", "train")

mcfg = ModelConfig.attention_variant(4, bands=32, input_frames=256, n_segments=4, segment_frames=64,
                                     embed_dim=128, n_heads=4)
tcfg = TrainConfig.submission2(max_epochs=40, switch_epoch=20, input_frames=256, batch_size=8,
                               early_stop_patience=100, augment=AugmentConfig.disabled())
result = train_loop(tcfg, mcfg, train, train, out_dir=root / "run")

for rec in result.history.records[::5] + [result.history.records[-1]]:
    print(f"epoch {rec.epoch:3d}  {rec.optimizer:<13} lr {rec.lr:.0e}  train {rec.train_loss:.4f}  "
          f"valid {rec.val_loss:.4f}")
print("outputs in", root / "run")
print(sorted(p.name for p in (root / "run").iterdir())[:6])
