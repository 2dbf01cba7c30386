"""Every adaptation strategy on the same frozen layer: output shift, trainable count, reductions."""

import numpy as np

from perft.core import Matrix, Rng, constant
from perft.moe import MoeLayerConfig
from perft.strategies import PeftStrategyConfig, PerftRouter, init_layer, layer_forward

cfg = MoeLayerConfig(D=8, D_ffn=16, N=4, K=2)
x = constant(Rng(1).normal((5, 8)))


def layer(variant, **kw):
    l = init_layer(cfg, PeftStrategyConfig(variant, **kw), Rng(2))
    for j, a in enumerate(l.adapters + [m for m in (l.lora_q, l.lora_v, l.gate_lora) if m]):
        a.W_up.data[...] = Rng(3).child(j).normal(a.W_up.shape, 0.3)  # pretend training happened
    return l


base = layer_forward(layer("none"), x)[0].data
print(f"{'variant':<14}{'trainable':>10}{'|shift|':>10}")
for variant, kw in [("perft_r", dict(M=4, K_tilde=1, D_B=4)), ("perft_e", dict(D_B=4)),
                    ("perft_d", dict(M=2, D_B=4)), ("perft_s", dict(D_B=4)),
                    ("baseline_qv", dict(D_B=4)), ("baseline_gate", dict(D_B=4))]:
    l = layer(variant, **kw)
    n = sum(p.data.size for p in l.named_parameters().values() if p.requires_grad)
    shift = np.abs(layer_forward(l, x)[0].data - base).max()
    print(f"{variant:<14}{n:>10}{shift:>10.4f}")

# a routed adapter bank that reuses the frozen router behaves exactly like per-expert adapters
e, r = layer("perft_e", D_B=4), layer("perft_r", M=4, K_tilde=2, D_B=4)
for a, b in zip(e.adapters, r.adapters):
    b.W_down.data[...], b.W_up.data[...] = a.W_down.data, a.W_up.data
r.peft_router = PerftRouter(Matrix(e.router.W_g.data.copy()))
gap = np.abs(layer_forward(e, x)[0].data - layer_forward(r, x)[0].data).max()
print(f"perft_r with the frozen router vs perft_e: max |diff| = {gap:.1e}")
