"""
Watching features collapse onto the frame
=========================================

Tracks the four collapse measurements while a small model trains on the
source domain, then shows the fully collapsed reference case.
"""

# %%
import numpy as np

from eianet import RunConfig, data, train_source
from eianet.etf import build_etf
from eianet.nc import nc_from_features

source, _ = data.generate(K=4, per_class=100, shift_spec="none", seed=2)
cfg = RunConfig(K=4, d=16, epochs_source=20, batch_size=32, seed=2)
_, records = train_source(cfg, source)

# %%
# nc1 is within-class spread relative to between-class spread. nc3 is the
# mean cosine between class means and their prototypes. Training should push
# nc1 down and nc3 up.
print("epoch  train   nc1     nc2     nc3     nc4")
for r in records[::4]:
    print(f"{r['epoch']:5d}  {r['source_train_acc']:.2f}  {r['nc1']:.4f}  {r['nc2']:.4f}  {r['nc3']:.4f}  {r['nc4']:.2f}")

# %%
# Reference point: features sitting exactly on their prototypes.
etf = build_etf(4, 8, 2)
y = np.repeat(np.arange(4), 5)
print(nc_from_features(etf.E.data.T[y], y, etf))
