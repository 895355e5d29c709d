"""Train a small network on a quarter-scale phantom set and score the test split.

Run with ``python demos/train_small.py [epochs]``. Takes a couple of minutes
on one core.
"""

import sys

import numpy as np

from atlasreg.engine import TrainConfig, train_amortized
from atlasreg.evaluation import dice_atlas
from atlasreg.net import NetConfig
from atlasreg.phantom import PhantomSpec, make_dataset

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
spec = PhantomSpec().scaled(0.25)
data = make_dataset(spec, 12)

res = train_amortized(data, NetConfig(base_channels=4), TrainConfig(epochs=epochs, lr=1e-3))
for row in res.epoch_log:
    print("epoch %2d  val loss %.5f  val dice %.4f" % (
        row["epoch"], row["val_loss_mean"], row["val_dice_atlas"]))

zero = np.zeros(spec.dims + (3,))
for cid in res.split[2]:
    c = data.cases[cid]
    u = res.best_net.forward_volume(c.image)
    print("%s  dice identity %.4f  net %.4f" % (
        cid, dice_atlas(c.gt_mask, zero, data.mask), dice_atlas(c.gt_mask, u, data.mask)))
