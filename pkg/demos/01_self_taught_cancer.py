"""
Self-taught vertical training on the breast-cancer table
=========================================================

A host holds the labels and the first 15 measurements, a guest holds the
other 15. The guest trains a VAE on rows the host never sees, freezes it, and
from then on only answers latent requests. The host trains a small classifier
on its own columns plus the guest's latent means.
"""

import numpy as np

from stfl.data import PartitionSpec, VerticalSplitSpec, compute_stats, load_cancer, partition, standardize, vertical_split
from stfl.nn import TrainConfig
from stfl.runner import compute_metrics
from stfl.stfl import GuestParty, HostParty, guest_selftrain, joint_train, predict, stfl_setup

SEED = 0

# %%
# Split the columns between the parties, then the rows into a self-taught set
# (guest only), a training set and a test set.
table = load_cancer()
host_all, (guest_all,) = vertical_split(table, VerticalSplitSpec.default(table.feature_names))
taught_ids, train_ids, test_ids = partition(table.ids, PartitionSpec(seed=SEED))
print(f"host columns {host_all.n_features}, guest columns {guest_all.n_features}")
print(f"rows: self-taught {len(taught_ids)}, train {len(train_ids)}, test {len(test_ids)}")

# Each side standardizes with statistics from data it is allowed to use.
host_data = standardize(host_all.subset(train_ids + test_ids), compute_stats(host_all.subset(train_ids)))
guest_stats = compute_stats(guest_all.subset(taught_ids))
guest = GuestParty(1, standardize(guest_all.subset(train_ids + test_ids), guest_stats),
                   standardize(guest_all.subset(taught_ids), guest_stats), seed=SEED)

# %%
# Guest pre-training. The loss curve is the VAE objective per row.
vae = guest_selftrain(guest, TrainConfig(epochs=100, rng_seed=SEED))
curve = [e.total for e in vae.training_log]
print(f"VAE loss {curve[0]:.3f} -> {curve[-1]:.3f}; latent width {guest.latent_width}")
frozen = guest.fingerprint()

# %%
# Setup: schema exchange, ID alignment by private set intersection, and the
# master model sized to host columns plus latent width.
host = HostParty(host_data, seed=SEED)
host.connect([guest], record=True)
setup = stfl_setup(host)
print(f"aligned {len(setup.aligned_ids)} ids, master input width {setup.input_width}")

# %%
# Joint training touches only the host's model.
result = joint_train(host, train_ids, TrainConfig(epochs=100, rng_seed=SEED), guests=[guest])
print(f"trained in {result.seconds:.3f}s, final loss {result.history[-1].loss:.4f}")
assert guest.fingerprint() == frozen

probs = predict(host, test_ids)[:, 0]
y = host_data.labels[host_data.row_indices(test_ids)]
m = compute_metrics(probs, y)
print(f"test accuracy {100 * m.accuracy:.2f}%")
print("confusion (rows true 0/1, cols predicted 0/1):", m.confusion)

# %%
# Everything that crossed the wire, by message type.
kinds = {}
for _, msg in host.links[0].channel.records:
    kinds[msg.type.name] = kinds.get(msg.type.name, 0) + 1
print(kinds)
host.close()
