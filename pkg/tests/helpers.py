"""Shared builders for the test suite."""

from perft.core import Matrix, Rng
from perft.moe import MoeLayerConfig
from perft.strategies import PeftStrategyConfig, build_model, init_layer

ADAPTED_VARIANTS = ("perft_r", "perft_e", "perft_d", "perft_s", "baseline_qv", "baseline_gate")


def strategy_for(variant, M=2, K_tilde=1, D_B=2, **kw):
    return PeftStrategyConfig(variant, M=M, K_tilde=K_tilde, D_B=D_B, **kw)


def perturb_adapters(layer, rng, std=0.5):
    """Give zero-initialised up-projections random values so adapters contribute."""
    mods = list(layer.adapters) + [m for m in (layer.lora_q, layer.lora_v, layer.gate_lora) if m is not None]
    for j, a in enumerate(mods):
        a.W_up.data[...] = rng.child("up", j).normal(a.W_up.shape, std)
    return layer


def make_layer(variant, seed=0, D=6, D_ffn=5, N=3, K=2, M=2, K_tilde=1, D_B=2, trained=True,
               renormalize=False, **kw):
    cfg = MoeLayerConfig(D, D_ffn, N, K, renormalize_gates=renormalize)
    layer = init_layer(cfg, strategy_for(variant, M, K_tilde, D_B, **kw), Rng(seed))
    if trained:
        perturb_adapters(layer, Rng(seed).child("trained"))
    return layer


def toy_model(variant, seed=0, num_classes=4, **kw):
    cfg = MoeLayerConfig(16, 32, 4, 2)
    return build_model(cfg, 2, strategy_for(variant, **kw), seed, num_classes)


def random_tokens(seed, T, D, std=1.0):
    return Matrix(Rng(seed).child("tokens").normal((T, D), std))
