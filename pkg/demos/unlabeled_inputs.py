"""Cheap inputs, expensive labels: adding unlabeled dosing schedules.

The plug-in part of the one-step estimator only needs inputs, so it can be
averaged over many unlabeled schedules while the residual correction stays on
the labeled subjects.  This demo reads the cached unlabeled-size sweep and
prints how the RMSE falls as unlabeled inputs are added.

Run:  python demos/unlabeled_inputs.py   (needs results/ from the table2_pk_ppi config)
"""
from pathlib import Path

from dope.harness import ExperimentConfig, aggregate_rmse, cells, read_csv

root = Path(__file__).resolve().parents[1]
cfg = ExperimentConfig.load(root / "configs" / "table2_pk_ppi.json")
path = root / cfg.out_dir / Path(cfg.csv_path()).name
if not path.exists():
    raise SystemExit(f"{path} missing; run: dope experiment --config configs/table2_pk_ppi.json")

grouped = cells(read_csv(path))
print("unlabeled n   plug-in RMSE x100   one-step RMSE x100")
for n2 in cfg.sweep_values:
    plug = aggregate_rmse(grouped[("plugin", "soft_cmax", n2)])
    dope = aggregate_rmse(grouped[("dope", "soft_cmax", n2)])
    print(f"{int(n2):11d}   {100 * plug[0]:8.2f} +- {100 * plug[1]:.2f}   {100 * dope[0]:8.2f} +- {100 * dope[1]:.2f}")
