"""
Scoring captions
================

BLEU-1..4, ROUGE-L and CIDEr-D over a toy corpus.  CIDEr-D weights
n-grams by document frequency across the reference sets, so a word that
appears in every image's references contributes little.
"""

from cmadm.metrics import CorpusIdf, bleu, cider_d, evaluation_report, rouge_l

refs = [
    ["a red dog left of a blue cup", "a red dog beside a blue cup", "a dog and a cup"],
    ["a white cat above a black box", "a white cat on a black box", "a cat and a box"],
    ["a green bus near a yellow tree", "a green bus by a yellow tree", "a bus and a tree"],
]
good = ["a red dog beside a blue cup", "a white cat on a black box", "a green bus by a yellow tree"]
vague = ["a dog and a thing", "a cat and a thing", "a bus and a thing"]

for name, cands in [("specific", good), ("vague", vague)]:
    report = evaluation_report(cands, refs)
    print(name, {k: round(v, 3) for k, v in report.items()})

# %%
# Individual pieces.
print("BLEU-1..4:", [round(b, 3) for b in bleu(good[:1], refs[:1])])
print("ROUGE-L  :", round(rouge_l(good[0], refs[0]), 3))

# %%
# The reward used in self-critical training freezes the IDF statistics on the
# training references; scoring under a different IDF changes the numbers.
frozen = CorpusIdf.build(refs + [["a dog", "a cup"]] * 5)
print("batch IDF CIDEr-D :", round(cider_d(good, refs)[0], 3))
print("frozen IDF CIDEr-D:", round(cider_d(good, refs, frozen)[0], 3))
