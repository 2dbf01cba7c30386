"""Composing bottleneck adapters with a frozen MoE transformer layer.

Variants
--------
``perft_r``        M adapters behind their own top-K̃ router, added in parallel to the MoE.
``perft_e``        one adapter per FFN expert, weighted by the MoE's own gates.
``perft_d``        M adapters that are always on, no router.
``perft_s``        a single always-on adapter.
``baseline_qv``    LoRA on the attention query and value projections.
``baseline_gate``  LoRA on the MoE router matrix.
``none``           the frozen layer as is.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import ARCHS, BottleneckAdapter, adapter_forward, init_adapter
from .core import (
    Matrix,
    Rng,
    ShapeError,
    add,
    constant,
    init_matrix,
    matmul,
    mul,
    rms_norm,
    scale,
    softmax,
    transpose,
    zeros,
)
from .moe import (
    ConfigError,
    FfnExpert,
    MoeLayerConfig,
    Router,
    RouterOutput,
    combine,
    ffn_forward,
    init_expert,
    init_router,
    load_balance_loss,
    route,
    router_z_loss,
)

VARIANTS = ("perft_r", "perft_e", "perft_d", "perft_s", "baseline_qv", "baseline_gate", "none")


@dataclass(frozen=True)
class PeftStrategyConfig:
    """Which adaptation strategy a layer uses and how its adapters are shaped.

    ``M`` and ``K_tilde`` are read by ``perft_r`` (both) and ``perft_d`` (M
    only); ``perft_e`` always uses one adapter per FFN expert.  ``D_B`` doubles
    as the LoRA rank for the two baselines.  ``renormalize_peft_gates=None``
    follows the MoE router's policy.
    """

    variant: str = "none"
    M: int = 1
    K_tilde: int = 1
    D_B: int = 4
    arch: str = "lora"
    alpha: float | None = None
    renormalize_peft_gates: bool | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: must be one of {VARIANTS} (got {self.variant!r})")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch: must be one of {ARCHS} (got {self.arch!r})")
        if self.D_B < 1:
            raise ConfigError(f"D_B: must be >= 1 (got {self.D_B})")
        if self.M < 1:
            raise ConfigError(f"M: must be >= 1 (got {self.M})")
        if self.variant == "perft_r" and not 1 <= self.K_tilde <= self.M:
            raise ConfigError(f"K_tilde: must satisfy 1 <= K_tilde <= M (got K_tilde={self.K_tilde}, M={self.M})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout: must be in [0, 1) (got {self.dropout})")

    def num_adapters(self, N: int) -> int:
        return {"perft_r": self.M, "perft_d": self.M, "perft_e": N, "perft_s": 1}.get(self.variant, 0)


@dataclass
class PerftRouter:
    W_g: Matrix

    @property
    def num_experts(self) -> int:
        return self.W_g.cols


@dataclass
class AuxLosses:
    lb_moe: Matrix
    z_moe: Matrix
    lb_peft: Matrix

    def total(self) -> Matrix:
        return add(add(self.lb_moe, self.z_moe), self.lb_peft)

    def values(self) -> dict[str, float]:
        return {"lb_moe": self.lb_moe.item(), "z_moe": self.z_moe.item(), "lb_peft": self.lb_peft.item()}


@dataclass
class TransformerLayer:
    W_q: Matrix
    W_k: Matrix
    W_v: Matrix
    W_o: Matrix
    experts: list[FfnExpert]
    router: Router
    moe_cfg: MoeLayerConfig
    strategy: PeftStrategyConfig = field(default_factory=PeftStrategyConfig)
    adapters: list[BottleneckAdapter] = field(default_factory=list)
    peft_router: PerftRouter | None = None
    lora_q: BottleneckAdapter | None = None
    lora_v: BottleneckAdapter | None = None
    gate_lora: BottleneckAdapter | None = None
    pre_norm: bool = False
    causal: bool = False

    @property
    def D(self) -> int:
        return self.W_q.rows

    @property
    def peft_renormalize(self) -> bool:
        r = self.strategy.renormalize_peft_gates
        return self.moe_cfg.renormalize_gates if r is None else r

    def named_parameters(self) -> dict[str, Matrix]:
        out = {f"attn.{k}": getattr(self, k) for k in ("W_q", "W_k", "W_v", "W_o")}
        for tag, a in (("attn.lora_q", self.lora_q), ("attn.lora_v", self.lora_v)):
            if a is not None:
                out.update({f"{tag}.{k}": v for k, v in a.parameters().items()})
        for i, e in enumerate(self.experts):
            out.update({f"experts.{i}.{k}": v for k, v in e.parameters().items()})
        out["router.W_g"] = self.router.W_g
        if self.gate_lora is not None:
            out.update({f"router.lora.{k}": v for k, v in self.gate_lora.parameters().items()})
        for j, a in enumerate(self.adapters):
            out.update({f"peft.{j}.{k}": v for k, v in a.parameters().items()})
        if self.peft_router is not None:
            out["peft_router.W_g"] = self.peft_router.W_g
        return out


def init_layer(moe_cfg: MoeLayerConfig, strategy: PeftStrategyConfig, rng: Rng,
               pre_norm: bool = False, causal: bool = False) -> TransformerLayer:
    """Random frozen base weights (from ``rng.child('base')``) plus fresh adaptation state.

    Base and adaptation state draw from separate substreams, so every variant
    built from the same ``rng`` shares the identical frozen base.
    """
    D, N = moe_cfg.D, moe_cfg.N
    base = rng.child("base")
    attn = {k: init_matrix(D, D, "scaled_normal", base.child("attn", k), std=D ** -0.5)
            for k in ("W_q", "W_k", "W_v", "W_o")}
    experts = [init_expert(D, moe_cfg.D_ffn, base.child("expert", i), moe_cfg.ffn_form) for i in range(N)]
    layer = TransformerLayer(**attn, experts=experts, router=init_router(D, N, base.child("router")),
                             moe_cfg=moe_cfg, strategy=strategy, pre_norm=pre_norm, causal=causal)
    attach_strategy(layer, strategy, rng.child("peft"))
    return layer


def attach_strategy(layer: TransformerLayer, strategy: PeftStrategyConfig, rng: Rng) -> None:
    """Replace the layer's adaptation state with freshly initialised modules for ``strategy``."""
    D, N, s = layer.D, layer.moe_cfg.N, strategy
    layer.strategy = s
    layer.adapters, layer.peft_router = [], None
    layer.lora_q = layer.lora_v = layer.gate_lora = None
    n = s.num_adapters(N)
    layer.adapters = [init_adapter(D, s.D_B, s.arch, s.alpha, rng.child("adapter", j)) for j in range(n)]
    if s.variant == "perft_r":
        # small random router so top-K̃ is not decided by index ties
        layer.peft_router = PerftRouter(
            init_matrix(D, s.M, "scaled_normal", rng.child("peft_router"), std=D ** -0.5, requires_grad=True))
    elif s.variant == "baseline_qv":
        layer.lora_q = init_adapter(D, s.D_B, "lora", s.alpha, rng.child("lora_q"))
        layer.lora_v = init_adapter(D, s.D_B, "lora", s.alpha, rng.child("lora_v"))
    elif s.variant == "baseline_gate":
        layer.gate_lora = init_adapter(D, s.D_B, "lora", s.alpha, rng.child("lora_gate"), d_out=N)


# -- attention ----------------------------------------------------------------------

def sequence_mask(n_rows: int, seq_len: int | None, causal: bool) -> np.ndarray | None:
    """Boolean attention mask keeping tokens inside their own sequence (and the past, if causal)."""
    if seq_len is None or seq_len >= n_rows:
        if not causal:
            return None
        return np.tril(np.ones((n_rows, n_rows), dtype=bool))
    if n_rows % seq_len:
        raise ShapeError(f"{n_rows} rows is not a whole number of length-{seq_len} sequences")
    seq = np.arange(n_rows) // seq_len
    mask = seq[:, None] == seq[None, :]
    if causal:
        mask &= np.tril(np.ones((n_rows, n_rows), dtype=bool))
    return mask


def _project(x: Matrix, W: Matrix, lora: BottleneckAdapter | None) -> Matrix:
    y = matmul(x, W)
    if lora is not None:
        y = add(y, adapter_forward(lora, x))
    return y


def attention_forward(layer: TransformerLayer, x: Matrix, causal: bool | None = None,
                      seq_len: int | None = None) -> Matrix:
    """Single-head scaled dot-product attention, without the residual.

    Rows of ``x`` are tokens; with ``seq_len`` set they are split into
    consecutive sequences that do not attend to each other.
    """
    if x.cols != layer.D:
        raise ShapeError(f"attention_forward: input width {x.cols} != model width {layer.D}")
    causal = layer.causal if causal is None else causal
    q = _project(x, layer.W_q, layer.lora_q)
    k = matmul(x, layer.W_k)
    v = _project(x, layer.W_v, layer.lora_v)
    scores = scale(matmul(q, transpose(k)), layer.D ** -0.5)
    attn = softmax(scores, sequence_mask(x.rows, seq_len, causal))
    return matmul(matmul(attn, v), layer.W_o)


# -- FFN-side strategies --------------------------------------------------------------

def _zero_scalar() -> Matrix:
    return zeros(1, 1)


def _dropout(y: Matrix, rate: float, rng: Rng | None) -> Matrix:
    if rate == 0.0 or rng is None:
        return y
    keep = (rng.random(y.shape) >= rate) / (1.0 - rate)
    return mul(y, constant(keep))


def _adapter_fn(layer: TransformerLayer, a: BottleneckAdapter, rng: Rng | None):
    rate = layer.strategy.dropout
    return lambda u: _dropout(adapter_forward(a, u), rate, rng)


def _normed(layer: TransformerLayer, h: Matrix) -> Matrix:
    return rms_norm(h) if layer.pre_norm else h


def _base_moe(layer: TransformerLayer, u: Matrix):
    delta = None
    if layer.gate_lora is not None:
        delta = adapter_forward(layer.gate_lora, u)
    ro = route(layer.router, u, layer.moe_cfg.K, layer.moe_cfg.renormalize_gates, delta)
    out = combine(ro, u, [lambda x, e=e: ffn_forward(e, x) for e in layer.experts])
    return out, ro


def _moe_aux(ro: RouterOutput, lb_peft: Matrix | None = None) -> AuxLosses:
    return AuxLosses(load_balance_loss(ro), router_z_loss(ro.logits),
                     _zero_scalar() if lb_peft is None else lb_peft)


def _require(layer: TransformerLayer, variant: str) -> None:
    if layer.strategy.variant != variant:
        raise ConfigError(f"variant: layer is configured as {layer.strategy.variant!r}, not {variant!r}")


def plain_moe_forward(layer: TransformerLayer, h: Matrix, rng: Rng | None = None):
    """MoE output plus residual, with no FFN-side adapters (also used by the baselines)."""
    moe_out, ro = _base_moe(layer, _normed(layer, h))
    return add(moe_out, h), _moe_aux(ro), {"moe": ro, "peft": None}


def perft_forward(layer: TransformerLayer, h: Matrix, rng: Rng | None = None):
    """MoE output + Σ_j G̃_j(h) Δ_j(h) + h, with G̃ routed over the layer's own PEFT router."""
    _require(layer, "perft_r")
    s = layer.strategy
    if len(layer.adapters) != s.M or layer.peft_router is None or layer.peft_router.num_experts != s.M:
        raise ConfigError(f"M: perft_r layer needs {s.M} adapters and a matching router")
    u = _normed(layer, h)
    moe_out, ro = _base_moe(layer, u)
    pro = route(Router(layer.peft_router.W_g), u, s.K_tilde, layer.peft_renormalize)
    peft_out = combine(pro, u, [_adapter_fn(layer, a, rng) for a in layer.adapters])
    x = add(add(moe_out, peft_out), h)
    return x, _moe_aux(ro, load_balance_loss(pro)), {"moe": ro, "peft": pro}


def perft_e_forward(layer: TransformerLayer, h: Matrix, rng: Rng | None = None):
    """Σ_i G_i(h) (E_i + Δ_i)(h) + h in a single routing pass over the pretrained router."""
    _require(layer, "perft_e")
    N = layer.moe_cfg.N
    if len(layer.adapters) != N:
        raise ConfigError(f"M: perft_e needs one adapter per expert ({N}), got {len(layer.adapters)}")
    u = _normed(layer, h)
    ro = route(layer.router, u, layer.moe_cfg.K, layer.moe_cfg.renormalize_gates)

    def embedded(e, a):
        fa = _adapter_fn(layer, a, rng)
        return lambda x: add(ffn_forward(e, x), fa(x))

    out = combine(ro, u, [embedded(e, a) for e, a in zip(layer.experts, layer.adapters)])
    return add(out, h), _moe_aux(ro), {"moe": ro, "peft": None}


def perft_d_forward(layer: TransformerLayer, h: Matrix, rng: Rng | None = None):
    """MoE output + Σ_j Δ_j(h) + h; every adapter sees every token."""
    _require(layer, "perft_d")
    return _shared_forward(layer, h, rng)


def perft_s_forward(layer: TransformerLayer, h: Matrix, rng: Rng | None = None):
    """MoE output + Δ_0(h) + h."""
    _require(layer, "perft_s")
    if len(layer.adapters) != 1:
        raise ConfigError(f"M: perft_s uses exactly one adapter, got {len(layer.adapters)}")
    return _shared_forward(layer, h, rng)


def _shared_forward(layer, h, rng):
    u = _normed(layer, h)
    moe_out, ro = _base_moe(layer, u)
    shared = None
    for a in layer.adapters:
        y = _adapter_fn(layer, a, rng)(u)
        shared = y if shared is None else add(shared, y)
    x = add(add(moe_out, shared), h)
    return x, _moe_aux(ro), {"moe": ro, "peft": None}


_STRATEGY_FORWARD = {
    "perft_r": perft_forward,
    "perft_e": perft_e_forward,
    "perft_d": perft_d_forward,
    "perft_s": perft_s_forward,
    "baseline_qv": plain_moe_forward,
    "baseline_gate": plain_moe_forward,
    "none": plain_moe_forward,
}


def layer_forward(layer: TransformerLayer, x_prev: Matrix, seq_len: int | None = None,
                  rng: Rng | None = None):
    """h = SelfAttn(x) + x, then x' = strategy FFN block(h) (which adds h back)."""
    h = add(attention_forward(layer, _normed(layer, x_prev), seq_len=seq_len), x_prev)
    return _STRATEGY_FORWARD[layer.strategy.variant](layer, h, rng)


# -- whole model ---------------------------------------------------------------------------

@dataclass
class PerftModel:
    """A stack of layers and, for classification, a linear readout over mean-pooled tokens."""

    layers: list[TransformerLayer]
    readout: Matrix | None = None

    @property
    def D(self) -> int:
        return self.layers[0].D

    @property
    def strategy(self) -> PeftStrategyConfig:
        return self.layers[0].strategy

    def named_parameters(self) -> dict[str, Matrix]:
        out = {}
        for l, layer in enumerate(self.layers):
            out.update({f"layers.{l}.{k}": v for k, v in layer.named_parameters().items()})
        if self.readout is not None:
            out["readout.W"] = self.readout
        return out

    def trainable(self) -> dict[str, Matrix]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def frozen(self) -> dict[str, Matrix]:
        return {k: v for k, v in self.named_parameters().items() if not v.requires_grad}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def forward(self, x: Matrix, seq_len: int | None = None, rng: Rng | None = None):
        """Run every layer; returns (final hidden, summed aux losses, per-layer stats)."""
        aux_sum, stats = None, []
        for l, layer in enumerate(self.layers):
            x, aux, st = layer_forward(layer, x, seq_len, None if rng is None else rng.child("layer", l))
            stats.append(st)
            aux_sum = aux if aux_sum is None else AuxLosses(
                add(aux_sum.lb_moe, aux.lb_moe), add(aux_sum.z_moe, aux.z_moe), add(aux_sum.lb_peft, aux.lb_peft))
        return x, aux_sum, stats

    def logits(self, hidden: Matrix, seq_len: int) -> Matrix:
        """Mean-pool each length-``seq_len`` block of rows and apply the readout."""
        n_seq = hidden.rows // seq_len
        pool = np.kron(np.eye(n_seq), np.full((1, seq_len), 1.0 / seq_len))
        return matmul(matmul(constant(pool), hidden), self.readout)


def build_model(moe_cfg: MoeLayerConfig, num_layers: int, strategy: PeftStrategyConfig, seed: int,
                num_classes: int | None = None, pre_norm: bool = False, causal: bool = False) -> PerftModel:
    """Frozen random base + strategy adapters; readout (if any) starts at zero and is trainable."""
    if num_layers < 1:
        raise ConfigError(f"L: must be >= 1 (got {num_layers})")
    rng = Rng(seed)
    layers = [init_layer(moe_cfg, strategy, rng.child("layer", l), pre_norm, causal) for l in range(num_layers)]
    readout = None
    if num_classes is not None:
        readout = init_matrix(moe_cfg.D, num_classes, "zeros", requires_grad=True)
    return PerftModel(layers, readout)


def with_strategy(model: PerftModel, strategy: PeftStrategyConfig, seed: int) -> PerftModel:
    """Same frozen base weights (shared, not copied), new adaptation state."""
    rng = Rng(seed)
    layers = []
    for l, layer in enumerate(model.layers):
        new = replace(layer, adapters=[], peft_router=None, lora_q=None, lora_v=None, gate_lora=None)
        attach_strategy(new, strategy, rng.child("layer", l).child("peft"))
        layers.append(new)
    readout = None
    if model.readout is not None:
        readout = Matrix(np.zeros(model.readout.shape), requires_grad=True)
    return PerftModel(layers, readout)
