"""The three generation strategies under an unreliable swarm.

Dual-cache recovery keeps per-step traffic constant and survives failures by
replaying the failed stage's history onto a replacement; restart loses all
progress on any failure; cache-less resends everything each step but only
retries the failed step.
"""

from swarmpipe import ModelConfig, reference_generate
from swarmpipe.client import Strategy
from swarmpipe.netsim import NetProfile
from swarmpipe.swarm import build_sim_swarm

cfg = ModelConfig(seed=1)
oracle = reference_generate(cfg, [3, 1, 4], 96)
print("oracle tail:", oracle[-8:])

for p in (0.0, 0.01):
    print(f"\n--- failure rate {p} ---")
    for strategy in Strategy:
        swarm = build_sim_swarm(cfg, n_stages=4, replicas=2, seed=7,
                                profile=NetProfile(failure_prob=p))
        res = swarm.client().generate([3, 1, 4], 96, strategy=strategy)
        c = res.counters
        print(f"{strategy.value:11s} tokens==oracle: {res.tokens == oracle}  "
              f"sim {res.elapsed_s:7.1f}s  msgs {c.messages:5d}  "
              f"recoveries {c.recoveries}  restarts {c.restarts}")

# the dual cache at work: each recovery replayed exactly the failed stage's
# history (t rows x hidden x 4 bytes)
swarm = build_sim_swarm(cfg, seed=3, profile=NetProfile(failure_prob=0.01))
res = swarm.client().generate([3, 1, 4], 96)
print("\nrestore events (stage, history length, payload bytes):")
for (a, b, t, nbytes) in res.counters.restore_events:
    print(f"  blocks [{a},{b})  t={t:3d}  {nbytes} bytes = t x 64 x 4")
