"""
Nearest-codeword quantization and the EMA codebook
==================================================

Builds a small codebook, quantizes a cloud of tokens, and watches the
moving-average update pull codewords onto the clusters they own.
"""

import numpy as np

from vqssl import vq

rng = np.random.default_rng(0)

# three 2-d clusters of tokens, and a codebook that starts near the origin
centers = np.array([[2.0, 0.0], [-1.0, 1.7], [-1.0, -1.7]])
tokens = np.concatenate([c + 0.2 * rng.standard_normal((200, 2)) for c in centers])
book = vq.init_codebook(4, 2, rng, decay=0.9)
print("initial codewords\n", book.entries.round(2))

# assign + quantize: every token is replaced by its nearest codeword
res = vq.quantize(tokens, book)
print("commit loss", round(float(res.commit_loss), 3), " perplexity", round(res.perplexity, 2))

# repeated EMA updates: assigned codewords drift toward their cluster means,
# unassigned ones stay put
for step in range(60):
    idx = vq.assign(tokens, book.entries)
    vq.ema_update(book, tokens, idx)
    if step % 20 == 19:
        res = vq.quantize(tokens, book)
        print(f"step {step + 1:3d}  commit {res.commit_loss:.4f}  perplexity {res.perplexity:.2f}")

print("final codewords\n", book.entries.round(2))

# ties go to the lowest index, so duplicated codewords never split their tokens
dup = np.array([[1.0, 1.0], [1.0, 1.0], [5.0, 5.0]])
print("tie-break", vq.assign(np.array([[1.0, 1.0], [0.9, 1.2]]), dup))
