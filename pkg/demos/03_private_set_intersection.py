"""
Aligning IDs without revealing the rest
=======================================

Both parties hash their IDs into a prime-order group and raise them to a
secret exponent. Blinding commutes, so doubly blinded values match exactly
when the IDs do, and nothing else is learned.
"""

from stfl.paillier import RandomSource
from stfl.psi import MODP_1536, EmptyIntersectionError, psi_intersect, random_scalar

group = MODP_1536
rng = RandomSource(0)

# %%
# Commutativity of blinding on one ID.
h = group.hash_to_group("patient-42")
a, b = random_scalar(rng, group), random_scalar(rng, group)
print(group.exp(group.exp(h, a), b) == group.exp(group.exp(h, b), a))

# %%
# Two ID lists with a planted overlap.
host_ids = [f"p{i:04d}" for i in range(0, 300)]
guest_ids = [f"p{i:04d}" for i in range(200, 450)]
common = psi_intersect(host_ids, guest_ids, mode="blinded", group=group, rng=rng)
print(f"{len(common)} shared ids, first {common[:3]}")
assert common == sorted(set(host_ids) & set(guest_ids))

# %%
# No overlap is an error, not an empty training set.
try:
    psi_intersect(["x1", "x2"], ["y1"], group=group, rng=rng)
except EmptyIntersectionError as exc:
    print("aborted:", exc)
