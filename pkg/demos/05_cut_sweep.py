"""Move the cut through every layer boundary and see where training breaks.

Uses ``demos/configs/sweep.toml``; the same table comes out of
``fedsplit sweep-cut demos/configs/sweep.toml``.
"""

from pathlib import Path

from fedsplit import config, experiment

cfg = config.load_config(Path(__file__).parent / "configs" / "sweep.toml")
rows = experiment.sweep_cut(cfg, seed=0)
print(f"{'cut':>4}  {'boundary':<16}{'server params':>14}{'accuracy':>10}  status")
for r in rows:
    print(f"{r.cut:>4}  {r.boundary:<16}{r.server_params:>14}{r.metric:>10.4f}  {r.status}")
