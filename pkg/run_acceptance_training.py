"""Pre-populate runs/acceptance/ so the slow acceptance tests only read caches.

Runs sequentially; safe to re-invoke (finished runs and cached transfer
results are skipped).
"""

import sys
import time

sys.path.insert(0, "tests")

from test_acceptance import (TRANSFER_STREAMS, cached_transfer, learning_run,
                             transfer_base_run, variant_run)

STEPS = [
    ("learn_vanilla", lambda: learning_run("vanilla")),
    ("learn_equivariant", lambda: learning_run("equivariant")),
    ("transfer_vanilla", lambda: transfer_base_run("vanilla")),
    ("transfer_equivariant", lambda: transfer_base_run("equivariant")),
    ("prioritized_vanilla", lambda: variant_run("prioritized", "vanilla")),
    ("prioritized_equivariant", lambda: variant_run("prioritized", "equivariant")),
    ("dueling_vanilla", lambda: variant_run("dueling", "vanilla")),
    ("dueling_equivariant", lambda: variant_run("dueling", "equivariant")),
]

for name, step in STEPS:
    t0 = time.monotonic()
    out = step()
    print(f"{name}: done in {time.monotonic() - t0:.0f}s -> {out}", flush=True)

for model in ("vanilla", "equivariant"):
    run = f"runs/acceptance/transfer_{model}"
    for label in ("r", "r2", "r3"):
        for seed in range(5):
            for stream in range(TRANSFER_STREAMS):
                t0 = time.monotonic()
                res = cached_transfer(run, model, label, seed, stream=stream)
                print(f"transfer {model}/{label}/seed{seed}/stream{stream}: retention "
                      f"{res['retention']:.3f} in {time.monotonic() - t0:.0f}s",
                      flush=True)
print("all runs ready")
