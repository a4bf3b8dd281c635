"""
Four ways to train on the same split
====================================

Centralized pooling, the hierarchical split model trained end to end, the
self-taught protocol, and the encrypted baseline, all on the cancer table.
The encrypted baseline runs two epochs on one seed so the script finishes in
about a minute. Pass a number on the command line to change the seed count.
"""

import sys

from stfl.runner import ExperimentConfig, report, run_experiment

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
seeds = list(range(n_seeds))

reports = []
for method in ("centralized", "hierarchical", "stfl"):
    reports += run_experiment(ExperimentConfig(method=method, seeds=seeds))
reports += run_experiment(ExperimentConfig(method="centralized", all_data=True, seeds=seeds))
# the encrypted baseline is slow; two epochs are enough to see the time gap
reports += run_experiment(ExperimentConfig(method="baseline", seeds=seeds[:1], epochs=2))

text, _ = report(reports)
print(text)

# %%
# A frozen guest versus an end-to-end one.
for r in reports:
    if "guest_fingerprints_before" in r.extras:
        same = r.extras["guest_fingerprints_before"] == r.extras["guest_fingerprints_after"]
        print(f"{r.method:<14} seed {r.seed}: guest parameters {'unchanged' if same else 'updated'}")
