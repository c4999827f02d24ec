"""A reduced evaluation grid: two label ratios, three modes, two seeds."""

from ssvtcn.data import SynthConfig, synth_generate
from ssvtcn.evaluation import run_grid

records = synth_generate(SynthConfig())
grid = run_grid(
    records,
    ratios=(0.2, 0.4),
    seeds=(0, 1),
    progress=lambda c: print(f"  ratio {c.ratio} {c.mode:<10} seed {c.seed}: "
                             f"{'failed' if c.report is None else f'{100 * c.report.avg_f1:.2f}'}"),
)
print()
print(grid.to_table())
