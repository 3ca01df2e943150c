# %% [markdown]
# # Document-scaled cross-attention
#
# The decoder scores every source position, takes a softmax inside each
# document, and rescales each document by a softmax over the scores of the
# `<s>` tokens. A document's total weight is therefore exactly its scaling
# weight.

# %%
import numpy as np

from hiersum.model import doc_scaled_softmax
from hiersum.tensor import Tensor, masked_softmax

doc_index = np.array([[0, 0, 1]])
sod_mask = np.array([[True, False, True]])
pad_mask = np.zeros((1, 3), dtype=bool)
scores = Tensor(np.array([[[[1.0, 0.0, 0.0]]]]))   # [batch, head, step, source]

records = []
weights = doc_scaled_softmax(scores, doc_index, sod_mask, pad_mask, record=records)
rec = records[0]
print("per-document softmax", np.round(rec.per_doc_weights[0, 0, 0], 4))
print("document scaling    ", np.round(rec.doc_scaling[0, 0, 0], 4))
print("final weights       ", np.round(weights.data[0, 0, 0], 4))

# %% [markdown]
# Compare with the plain softmax over the same scores: the second document
# gets more weight here because it is a single token.

# %%
plain = masked_softmax(scores, None)
print("plain softmax       ", np.round(plain.data[0, 0, 0], 4))

# %% [markdown]
# The operation has its own backward pass. A quick finite-difference check:

# %%
from hiersum.tensor import check_gradients

rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(1, 2, 2, 3)), requires_grad=True, name="scores")
proj = rng.normal(size=a.shape)
print(check_gradients(lambda: (doc_scaled_softmax(a, doc_index, sod_mask, pad_mask) * proj).sum(), [a]))
