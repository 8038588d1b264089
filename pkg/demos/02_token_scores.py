"""Scoring tokens of a rollout batch and picking the reasoning/perception sets.

Each sampled token gets two numbers: the top-p entropy of the distribution it
was drawn from, and how much its log-prob moves when the grid is blanked out.
The top fractions of each become the two token sets, and the weight mask
combines them.

Run: python3 demos/02_token_scores.py
"""
import numpy as np

from tor_rlvr import analysis as an
from tor_rlvr import policy as pl
from tor_rlvr import scoring as sc
from tor_rlvr import selection as sel
from tor_rlvr import synthtask as st

task = st.TaskConfig()
params = pl.init_params(pl.PolicyConfig(), task, seed=0)
params = pl.format_warmup(params, steps=200, seed=1)

samples = [st.generate_sample(k, task) for k in range(8)]
batch = pl.sample_rollouts(params, samples, group_size=8, top_p=0.95, rng_seed=0)
table = sc.build_score_table(batch, params, proxies=sc.PROXIES)
print(f"{batch.n_rollouts} rollouts, {len(table)} scored tokens")

# one rollout, token by token
n = 0
print("\nrollout 0:", st.decode(batch.response(n)))
rows = np.nonzero((table.b == 0) & (table.i == 0))[0]
for k in rows:
    print(f"  t={table.t[k]}  {st.token_string(table.token[k]):>9}  "
          f"entropy {table.entropy[k]:.3f}  sensitivity {table.sensitivity[k]:.3f}")

cfg = sel.SelectionConfig(alpha_r=0.3, alpha_p=0.3, gamma_r=1.0, gamma_p=0.5)
tr = sel.select_tokens(table, "entropy", cfg.alpha_r)
tp = sel.select_tokens(table, "sensitivity", cfg.alpha_p)
mask = sel.build_weight_mask(tr, tp, cfg, batch)
print(f"\n|T_r| = {len(tr)}, |T_p| = {len(tp)}, overlap ratio {an.overlap_ratio(tr, tp):.3f}")
print("mask weights used:", sorted(float(w) for w in np.unique(mask) if w))

for field in ("entropy", "sensitivity"):
    rep = an.distribution_report(table, field)
    print(field, "thresholds", {f: round(v, 4) for f, v in rep.thresholds.items()})

mat = an.proxy_comparison(table)
print("\nrank correlation of perception proxies")
print("         " + " ".join(f"{f[:10]:>10}" for f in an.PROXY_FIELDS))
for f, row in zip(an.PROXY_FIELDS, mat):
    print(f"{f[:10]:>10} " + " ".join(f"{v:10.3f}" for v in row))
