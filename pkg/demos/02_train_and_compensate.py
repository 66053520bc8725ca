"""Train a small ensemble and compensate
========================================

A short run (few epochs, three members) that finishes in well under a
minute. Pass ``full`` on the command line for the default 200 epochs and
ten members.
"""
import sys

from emtcycle.cyclegan import TrainConfig
from emtcycle.evaluation import evaluate, run_pipeline, sigma_pred, split_roles
from emtcycle.neuralnet import TrainSchedule
from emtcycle.presets import table1_datasets

full = "full" in sys.argv[1:]
config = TrainConfig(seed=0) if full else TrainConfig(
    seed=0, schedule=TrainSchedule(total_epochs=40, decay_start_epoch=20))
members = 10 if full else 3

datasets = table1_datasets(seed=0)
ens = run_pipeline(datasets, config, member_count=members)
_, _, evals = split_roles(datasets)

for stage in ("raw", "cyclegan", "cyclegan_ft"):
    rows = evaluate(ens, evals, stage)
    cells = "  ".join(f"{r.env_id} {r.rmse:.3f}" for r in rows)
    sp = sigma_pred(ens, evals, stage)
    print(f"{stage:<12} {cells}" + ("" if sp is None else f"  sigma_pred {sp:.3f}"))

ens.save("demo_ensemble.json")
print("saved demo_ensemble.json; try:")
print("  echo 10,12,9.6,0.5,0,0,0 | emtcycle compensate --model demo_ensemble.json")
