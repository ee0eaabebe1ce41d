"""
Oversampling in a learned latent space
======================================

A small 3D autoencoder is fitted on training volumes only. Minority classes
are then topped up by interpolating between a latent code and one of its
same-class neighbours, and the synthetic codes are decoded back to volumes.
"""

import numpy as np

from gbmbench.balance import CodeSource, LatentCode, latent_smote, train_autoencoder
from gbmbench.cohort import CLASS_ORDER, phantom_volume
from gbmbench.prep import PrepConfig, preprocess
from gbmbench.volume import Volume, to_model_layout

# an imbalanced training split: 8 progression, 4 pseudoprogression, 2 stable
counts = {CLASS_ORDER[0]: 8, CLASS_ORDER[1]: 4, CLASS_ORDER[2]: 2}
cfg = PrepConfig(target_dims=(32, 32, 32))
ids, arrays, outcomes = [], [], []
for cls, n in counts.items():
    for i in range(n):
        raw = phantom_volume(cls, 1, np.random.default_rng([len(ids), 3]), size=48)
        vol = preprocess(Volume(raw, np.diag([2.0, 2.0, 2.0, 1.0])), cfg)
        ids.append(f"{cls.value[:3]}{i}")
        arrays.append(to_model_layout(vol.data)[0].astype(np.float32))
        outcomes.append(cls)

# %%
# Fit the autoencoder and embed the real samples.

ae = train_autoencoder(arrays, seed=21, epochs=20)
z = ae.encode(arrays)
print("latent codes:", z.shape)

# %%
# Latent SMOTE brings every class up to the majority count. Each synthetic
# code remembers its two parents and the interpolation weight.

codes = [LatentCode(p, o, z[i], CodeSource.REAL) for i, (p, o) in enumerate(zip(ids, outcomes))]
plan = latent_smote(codes, k=5, seed=21)
print("before:", {c.value: n for c, n in plan.counts_before.items()})
print("after: ", {c.value: n for c, n in plan.counts_after.items()})
for code in plan.synthetic[:3]:
    print(code.sample_id, "from", code.parents)

decoded = ae.decode(np.stack([c.vector for c in plan.synthetic]))
print("decoded synthetic volumes:", decoded.shape)
