# The evaluation metrics on a few hand-made pairs.
from clinsum.metrics import bleu, evaluate, jaccard, meteor_lite, rouge_l, rouge_n

ref = "patient reports rash and itching , referred to dermatology".split()
pairs = {
    "identical": ref,
    "shuffled": list(reversed(ref)),
    "partial": "patient reports rash , referred to dermatology".split(),
    "short": "rash".split(),
}
for name, cand in pairs.items():
    print(f"{name:10s} BLEU={bleu([cand], [ref])['bleu']:.4f}  R-1={rouge_n(cand, ref, 1)['f1']:.4f}  "
          f"R-L={rouge_l(cand, ref)['f1']:.4f}  METEOR={meteor_lite(cand, ref):.4f}  "
          f"Jaccard={jaccard(cand, ref):.4f}")

# word order matters to BLEU but not to Jaccard
report = evaluate(list(pairs.values()), [ref] * len(pairs), ["derm", "derm", "cardio", "derm"], ["derm"] * 4)
print()
print(report.table())
