"""Sweep the label-space size K and the noise level mu.

Uses the experiment harness, so each point is one full train+attack run on
the same split and seed. Records land in $SPLITLAB_OUT (default ./runs).
"""

from splitlab.experiment import DataSpec, ExperimentConfig, cmd_sweep
from splitlab.secdt import DefenseConfig

cfg = ExperimentConfig(data=DataSpec(n=4000), epochs=10,
                       defense=DefenseConfig(K=2, norm_standard="mean", mu=0.0))

_, rows = cmd_sweep(cfg, "dimension", [2, 4, 8, 16], write=False)
for r in rows:
    print(r)

cfg.defense = DefenseConfig(K=20, norm_standard="mean", mu=0.0)
_, rows = cmd_sweep(cfg, "noise", [0.0, 0.2, 0.5, 0.8], write=False)
for r in rows:
    print(r)
