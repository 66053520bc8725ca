"""Simulated Lego-board scans
=============================

Build the nine calibrated scenarios and look at how badly each one distorts
the inter-point distances.
"""
import numpy as np

from emtcycle.geometry import dataset_rmse
from emtcycle.presets import TABLE1, table1_datasets

datasets = table1_datasets(seed=0)
targets = {s.env_id: s.target_rmse for s in TABLE1}

for d in datasets:
    rmse, std = dataset_rmse(d, "all_pairs")
    print(f"{d.env_id:<14} {d.role:<10} rmse {rmse:.3f} mm (target {targets[d.env_id]:.3f})"
          f"  std {std:.3f}")

# the raw displacement between measured and true position grows towards the C-arm
near = datasets[6]
shift = near.values[:, :3] - near.true_positions
print("mean |shift| per axis at 7 cm:", np.abs(shift).mean(axis=0).round(2))

# quality values rise with distortion
for d in datasets:
    print(f"{d.env_id:<14} mean q {d.values[:, 3].mean():.3f}")
