# %% [markdown]
# # Batches and encoder masks
#
# Several documents are concatenated into one source sequence. Each document
# starts with a `<s>` token and, with position restart on, its positions count
# from zero again.

# %%
import numpy as np

from hiersum import BatchConfig, RawExample, build_vocab, make_batch
from hiersum.masks import full_mask, hierarchical_mask

example = RawExample(("the cat sat", "a dog"), "cat and dog")
vocab = build_vocab([example])
batch = make_batch([example], vocab, BatchConfig(use_sod=True, pos_restart=True))

print("tokens   ", [vocab.itos[i] for i in batch.input_ids[0]])
print("doc index", batch.doc_index[0].tolist())
print("positions", batch.position_ids[0].tolist())
print("sod flags", batch.sod_mask[0].astype(int).tolist())

# %% [markdown]
# Under the hierarchical mask an ordinary token only sees its own document.
# The `<s>` tokens also see each other, which is how information crosses
# document boundaries in the encoder.

# %%
hier = hierarchical_mask(batch.doc_index[0], batch.sod_mask[0], batch.pad_mask[0])
full = full_mask(batch.pad_mask[0])
print(hier.astype(int))
print("allowed cells: hierarchical", int(hier.sum()), "full", int(full.sum()))

# %% [markdown]
# Turning position restart off gives one running position index instead.

# %%
flat = make_batch([example], vocab, BatchConfig(use_sod=True, pos_restart=False))
print("positions", flat.position_ids[0].tolist())
assert np.array_equal(flat.input_ids, batch.input_ids)
