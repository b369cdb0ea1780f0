"""
The four architectures on the synthetic benchmark
=================================================

Trains PM1-PM4 on the default fleet (50 vehicles, 180 days) and compares
them with the persistence baseline, then continues PM4 with ten rounds of
cross-validation transfer. Takes roughly four minutes on one core.

Pass a seed as the first argument to try another fleet.
"""

import sys

from tripforecast.benchmark import run_benchmark

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
result = run_benchmark(seed=seed, log=print)

###############################################################################
# Lower is better. PM4 should beat PM1, and everything should beat
# persistence, which ignores all but the last trip.

print(f"\n{'model':<12}{'error %':>10}")
for name, err in result.errors().items():
    print(f"{name:<12}{err:>10.2f}")
print(f"\ntotal {result.wall_clock_s:.0f} s")
