"""Walk through one synthetic sample: the scene, the referring expression, the reasoning target,
and how the three rewards score a correct answer, a wrong class and a missing [SEG]."""
import numpy as np

from refavs.domain import detokenize, tokenize
from refavs.reflective import TRIGGER_PHRASES, build_reflective_path
from refavs.rewards import score_path
from refavs.synthgen import generate_split

sample = generate_split(0, "train", 1)[0]
print("reference :", sample.reference.text)
print("target    :", sample.gt_class.name, f"({int(sample.gt_mask.sum())} pixels)")
print("reasoning :", detokenize(sample.cot_target.tokens))
print()

good = score_path(sample.cot_target.tokens, sample.gt_mask, sample.gt_mask, sample.gt_class)
print("gold path, gold mask      ->", good)

wrong_class = "cello" if sample.gt_class.name != "cello" else "violin"
wrong = tokenize(detokenize(sample.cot_target.tokens).replace(sample.gt_class.name, wrong_class))
half = sample.gt_mask.copy()
cols = np.flatnonzero(half.any(axis=0))
half[:, : cols[len(cols) // 2]] = False
print("wrong class, partial mask ->", score_path(wrong, half, sample.gt_mask, sample.gt_class))

no_seg = sample.cot_target.tokens[:-1]
print("no [SEG] token            ->", score_path(no_seg, None, sample.gt_mask, sample.gt_class))

fixed = build_reflective_path(wrong, TRIGGER_PHRASES[0], sample.cot_target.tokens)
print()
print("reflective path:", detokenize(fixed.tokens))
print("reflective score ->", score_path(fixed.tokens, sample.gt_mask, sample.gt_mask, sample.gt_class))
