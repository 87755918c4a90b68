"""
Where the deliberation decoder looks
====================================

Replays a refined caption and prints, for every generated word, the
head-averaged attention over the draft tokens.  Pass a checkpoint written
by ``cmadm train`` and the corpus it was trained on to inspect a real
model; without arguments a small model is trained first.
"""

import sys

import numpy as np

from cmadm.data import generate_corpus, read_corpus
from cmadm.experiments import load_model
from cmadm.inference import attention_trace
from cmadm.training import DESK_CONFIG, train

if len(sys.argv) == 3:
    model, vocab = load_model(sys.argv[1])
    scene = read_corpus(sys.argv[2])[0]
else:
    items = generate_corpus(120, 7)
    res = train(items, DESK_CONFIG.replace(xe_epochs=5, scst_epochs=0), stage="xe")
    model, vocab, scene = res.model, res.vocab, generate_corpus(1, 7, start=120)[0]

records = attention_trace(model, scene.features, vocab)
print("draft  :", records[0]["draft"])
print("refined:", records[0]["refined"])

# %%
# Average the heads for each step and show the three most attended slots.
steps = sorted({r["step"] for r in records})
for t in steps:
    rows = [r for r in records if r["step"] == t and r["modality"] == "textual"]
    w = np.mean([r["weights"] for r in rows], axis=0)
    tokens = rows[0]["tokens"]
    top = np.argsort(w)[::-1][:3]
    print(f"{rows[0]['word']:>10s} <- " + ", ".join(f"{tokens[i]}@{i}:{w[i]:.2f}" for i in top))
