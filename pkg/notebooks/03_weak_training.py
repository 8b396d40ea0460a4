"""
Training from transcripts only
==============================

Pretrain on clean synthetic lines, then continue on distorted lines whose
boxes are hidden. Pseudo boxes accumulate in the store as predictions
start to match the transcripts. This is a cut-down version of the toy
ablation in weakseg.ablation; expect roughly a quarter of an hour.
"""

from weakseg.ablation import AblationSettings, build_data, run_seed

s = AblationSettings(n_real=200, n_val=60, pretrain_iterations=800, train_iterations=800)
data = build_data(s)
bank, lm, real, val = data
print("real lines", len(real), "boxes hidden:", all(r.boxes is None for r in real))

res = run_seed(0, s, data, variants=["weak_conr", "text_length"])
for name, r in res.items():
    print("%-12s AR %.3f  CR %.3f  F1 %.3f" % (name, r["AR"], r["CR"], r.get("seg_f1", 0.0)))
