"""Numerically check the one-step descent condition on random quadratics.

For a pair of quadratic losses that share a minimiser neighbourhood, one
gradient step on the auxiliary loss lowers the main loss whenever the two
gradients have a positive inner product and the step is small enough.  A
few trials are printed in full, then the aggregate over 1000.

    python3 demos/descent_check.py
"""

from ssfa_lab import theory

rows = theory.lemma1_trials(1000, seed=0)
for pair, _, v in rows[:5]:
    print(f"d={len(pair.a):2d} <g_m,g_s>={v.inner:.3f} eta={v.eta:.4f} (limit {v.eta_limit:.4f}) "
          f"main {v.main_before:.4f} -> {v.main_after:.4f}")
held = sum(bool(v.decrease_held) for _, _, v in rows)
print(f"decrease held in {held}/{len(rows)} trials")

sets = theory.empirical_trials(100, seed=0)
print(f"empirical-risk version held in {sum(bool(v.decrease_held) for _, _, v in sets)}/{len(sets)} datasets")
