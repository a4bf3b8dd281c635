"""
The encrypted two-party baseline, step by step
==============================================

The guest owns a Paillier key pair. The host only ever sees its interactive
weights with the guest's accumulated noise folded in, and the guest only
sees logits and gradients hidden behind fresh masks. A plaintext model run in
lock-step shows the masked protocol computes the same thing.
"""

import time

import numpy as np

from stfl.baseline import PlaintextReference, baseline_backward_round, baseline_forward_round, build_federation
from stfl.data import PartyDataset
from stfl.paillier import RandomSource, add_cipher, keygen, mul_plain

# %%
# Paillier in three lines: add two ciphertexts, scale one by a plaintext.
pub, priv = keygen(512, RandomSource("demo"))
a, b = pub.encrypt(1.5), pub.encrypt(-0.25)
print(priv.decrypt(add_cipher(a, b)), priv.decrypt(mul_plain(a, 3.0)))

# %%
# A toy vertical task: 16 rows, 3 host columns with labels, 4 guest columns.
rng = np.random.default_rng(0)
ids = [f"r{i}" for i in range(16)]
xh, xg = rng.normal(size=(16, 3)), rng.normal(size=(16, 4))
y = (xh[:, 0] + xg[:, 1] > 0).astype(float)
host = PartyDataset(ids, xh, ["h1", "h2", "h3"], y)
guest = PartyDataset(ids, xg, ["g1", "g2", "g3", "g4"])

fed = build_federation(host, guest, learning_rate=0.1, seed=1, record=True)
ref = PlaintextReference.mirror(fed.host, fed.guest)

# %%
# Ten steps of the masked protocol next to the plaintext mirror.
for step in range(10):
    out = baseline_forward_round(fed, ids)
    z_plain, _ = ref.step(xh, xg, y)
    loss = baseline_backward_round(fed, y)
    w_gap = np.max(np.abs(fed.host.w_tilde - fed.guest.eps_acc - ref.w_h))
    print(f"step {step}: loss {loss:.4f}  |z - z_plain| {np.max(np.abs(out.logits - z_plain)):.1e}  "
          f"|W - W_plain| {w_gap:.1e}")

# The host's copy is far from the true weights; only the guest can remove the noise.
print("host-held weights minus true weights:", np.round(np.max(np.abs(fed.host.w_tilde - ref.w_h)), 3))
print("message types used:", sorted({m.type.name for _, m in fed.channel.records}))

# %%
# The cost of all this: one batch of 128 rows through the encrypted path.
big = PartyDataset([f"b{i}" for i in range(128)], rng.normal(size=(128, 15)),
                   [f"h{i}" for i in range(15)], rng.integers(0, 2, 128).astype(float))
big_guest = PartyDataset(big.ids, rng.normal(size=(128, 15)), [f"g{i}" for i in range(15)])
fed2 = build_federation(big, big_guest, seed=2)
start = time.perf_counter()
baseline_forward_round(fed2, big.ids)
baseline_backward_round(fed2, big.labels)
print(f"one encrypted batch of 128: {time.perf_counter() - start:.2f}s")
fed.close()
fed2.close()
