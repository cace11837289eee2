"""
Training on synthetic traffic
=============================

Generate a week of periodic sensor readings, window it, fit a one-layer model
and compare it against the last-value persistence forecast.
"""

import numpy as np

from fastersts import FasterSTS, ModelConfig
from fastersts.data import persistence_forecast, split_and_window, synth_generate
from fastersts.training import train

cfg = ModelConfig(N=8, H=16, d_e=4, num_layers=1, epochs=40, patience=10, seed=0)

# 2016 five-minute steps is one week
ds = synth_generate(cfg.N, 2016, seed=0)
tr, va, te, stats = split_and_window(ds, cfg)
print(f"windows: train {len(tr)}, val {len(va)}, test {len(te)}; mean {stats.mean:.1f} std {stats.std:.1f}")

model = FasterSTS(cfg)
print("parameters", model.parameter_count())

report = train(model, tr, va, stats, te, cfg)
for e in report.epochs[::5]:
    print(f"epoch {e['epoch']:>3}  train MAE {e['train_mae']:6.2f}  val MAE {e['val_mae']:6.2f}")
print("best epoch", report.best_epoch)

pred, truth = persistence_forecast(te)
print(f"test MAE {report.test['average']['mae']:.2f} vs persistence {np.mean(np.abs(pred - truth)):.2f}")
for h in ("horizon_3", "horizon_6", "horizon_12"):
    m = report.test[h]
    print(f"{h:<11} MAE {m['mae']:.2f}  RMSE {m['rmse']:.2f}")
