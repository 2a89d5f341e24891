"""Train plain FixMatch and the adapted variant on one mismatched bundle.

The labeled set comes from clean digit-style glyphs while the unlabeled pool
mixes in corrupted domains.  Both runs share the bundle and seed, so any gap
in the UL column comes from the adaptation step.  Short runs (600 steps) keep
this under a couple of minutes; the acceptance suite uses 3000.

    python3 demos/mismatch_walkthrough.py
"""

from ssfa_lab import data, engine, harness

bundle = data.make_bundle(400, mixture=data.MixtureSpec.from_ratio(1.0), seed=0)
print(f"bundle {bundle.digest()[:12]}: {len(bundle.labeled)} labeled, "
      f"{len(bundle.unlabeled)} unlabeled "
      f"(domains {', '.join(bundle.domain_names)})")

base = engine.TrainConfig(steps=600)
for method in (harness.FIXMATCH, harness.SSFA_ROT):
    config = method.config(base, seed=0)
    params, history = engine.train(config, bundle)
    scores = {p: harness.evaluate(params, bundle, p, config) for p in harness.PROTOCOLS}
    last = history[-1]
    print(f"{method.name:9s} " + " ".join(f"{k}={v:.3f}" for k, v in scores.items())
          + f"  final mask rate {last.mask_rate:.2f}")
