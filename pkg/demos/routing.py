"""Top-K routing on a handful of tokens: who gets picked, with what weight, and what it costs."""

import numpy as np

from perft.core import Rng, constant
from perft.moe import Router, dispatch_fractions, load_balance_loss, route, router_z_loss

rng = Rng(0)
router = Router(constant(rng.child("router").normal((8, 4))))
tokens = constant(rng.child("tokens").normal((6, 8)))

for renorm in (False, True):
    ro = route(router, tokens, K=2, renormalize=renorm)
    print(f"renormalize={renorm}")
    for t in range(tokens.rows):
        picks = ", ".join(f"e{i}:{ro.gate_weights.data[t, i]:.3f}" for i in ro.selected[t])
        print(f"  token {t}: {picks}")

ro = route(router, tokens, K=2)
print("dispatch fractions", np.round(dispatch_fractions(ro.selected, 4), 3))
print(f"load-balance loss {load_balance_loss(ro).item():.4f}")
print(f"router z-loss     {router_z_loss(ro.logits).item():.4f}")
