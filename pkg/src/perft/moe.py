"""Sparse mixture-of-experts feed-forward block.

Experts are plain two-matrix FFNs or GLUs.  The router scores every token
against each expert vector (a column of ``W_g``), takes a softmax over all
experts and keeps the top-K probabilities; only the kept experts are evaluated
for that token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Matrix,
    Rng,
    ShapeError,
    add,
    constant,
    init_matrix,
    logsumexp,
    matmul,
    mean_all,
    mul,
    reciprocal,
    row_sum,
    scale,
    scale_rows,
    scatter_rows,
    silu,
    softmax,
    square,
    take_cols,
    take_rows,
    top_k_rows,
    zeros,
)

FFN_FORMS = ("vanilla", "glu")


class ConfigError(ValueError):
    """Invalid layer or strategy configuration."""


@dataclass(frozen=True)
class MoeLayerConfig:
    D: int
    D_ffn: int
    N: int
    K: int
    ffn_form: str = "vanilla"
    renormalize_gates: bool = False

    def __post_init__(self):
        if self.D < 1:
            raise ConfigError(f"D: must be >= 1 (got {self.D})")
        if self.D_ffn < 1:
            raise ConfigError(f"D_ffn: must be >= 1 (got {self.D_ffn})")
        if self.N < 1:
            raise ConfigError(f"N: must be >= 1 (got {self.N})")
        if not 1 <= self.K <= self.N:
            raise ConfigError(f"K: must satisfy 1 <= K <= N (got K={self.K}, N={self.N})")
        if self.ffn_form not in FFN_FORMS:
            raise ConfigError(f"ffn_form: must be one of {FFN_FORMS} (got {self.ffn_form!r})")


@dataclass
class FfnExpert:
    W_up: Matrix
    W_down: Matrix
    W_gate: Matrix | None = None

    def __post_init__(self):
        D, D_ffn = self.W_up.shape
        if self.W_down.shape != (D_ffn, D):
            raise ShapeError(f"W_down must be {(D_ffn, D)}, got {self.W_down.shape}")
        if self.W_gate is not None and self.W_gate.shape != self.W_up.shape:
            raise ShapeError(f"W_gate must match W_up {self.W_up.shape}, got {self.W_gate.shape}")

    @property
    def D(self) -> int:
        return self.W_up.rows

    def parameters(self) -> dict[str, Matrix]:
        out = {"W_up": self.W_up, "W_down": self.W_down}
        if self.W_gate is not None:
            out["W_gate"] = self.W_gate
        return out


@dataclass
class Router:
    W_g: Matrix

    @property
    def num_experts(self) -> int:
        return self.W_g.cols


@dataclass
class RouterOutput:
    """Per-token routing decision.

    ``logits`` are the affinity scores h·W_g, ``probs`` their softmax,
    ``gate_weights`` the probabilities kept by top-K (optionally renormalised)
    with zeros elsewhere, and ``selected`` the (T, K) chosen expert indices in
    ascending order.
    """

    logits: Matrix
    probs: Matrix
    gate_weights: Matrix
    selected: np.ndarray

    @property
    def num_tokens(self) -> int:
        return self.logits.rows

    @property
    def num_experts(self) -> int:
        return self.logits.cols

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    def dispatch_mask(self) -> np.ndarray:
        mask = np.zeros(self.logits.shape, dtype=bool)
        np.put_along_axis(mask, self.selected, True, axis=1)
        return mask


def init_expert(D: int, D_ffn: int, rng: Rng, ffn_form: str = "vanilla") -> FfnExpert:
    W_up = init_matrix(D, D_ffn, "scaled_normal", rng.child("W_up"), std=D ** -0.5)
    W_down = init_matrix(D_ffn, D, "scaled_normal", rng.child("W_down"), std=D_ffn ** -0.5)
    W_gate = None
    if ffn_form == "glu":
        W_gate = init_matrix(D, D_ffn, "scaled_normal", rng.child("W_gate"), std=D ** -0.5)
    return FfnExpert(W_up, W_down, W_gate)


def init_router(D: int, N: int, rng: Rng) -> Router:
    return Router(init_matrix(D, N, "scaled_normal", rng, std=D ** -0.5))


def ffn_forward(expert: FfnExpert, h: Matrix) -> Matrix:
    """σ(h W_up) W_down, or (σ(h W_up) ⊙ h W_gate) W_down for the GLU form."""
    if h.cols != expert.D:
        raise ShapeError(f"ffn_forward: input width {h.cols} != expert width {expert.D}")
    act = silu(matmul(h, expert.W_up))
    if expert.W_gate is not None:
        act = mul(act, matmul(h, expert.W_gate))
    return matmul(act, expert.W_down)


def route(router: Router, h: Matrix, K: int, renormalize: bool = False,
          logit_delta: Matrix | None = None) -> RouterOutput:
    """Softmax over all experts, then keep the top-K probabilities per token.

    ``logit_delta`` is added to the logits before the softmax (used by the
    router-LoRA baseline).  Selection is non-differentiable; gradients flow
    through the kept probabilities only.
    """
    if h.cols != router.W_g.rows:
        raise ShapeError(f"route: input width {h.cols} != router width {router.W_g.rows}")
    N = router.num_experts
    if not 1 <= K <= N:
        raise ValueError(f"route: K={K} outside [1, {N}]")
    logits = matmul(h, router.W_g)
    if logit_delta is not None:
        logits = add(logits, logit_delta)
    probs = softmax(logits)
    selected = top_k_rows(probs.data, K)
    if K == N:
        gates = probs
    else:
        keep = np.zeros(probs.shape)
        np.put_along_axis(keep, selected, 1.0, axis=1)
        gates = mul(probs, constant(keep))
    if renormalize:
        gates = scale_rows(gates, reciprocal(row_sum(gates)))
    return RouterOutput(logits, probs, gates, selected)


def combine(ro: RouterOutput, h: Matrix, expert_fns) -> Matrix:
    """Σ_i G_i(h_t) · expert_fns[i](h_t) over each token's selected experts.

    Experts are visited in index order and each one only sees the tokens routed
    to it; unselected experts are never called.
    """
    T = h.rows
    out = None
    for i, fn in enumerate(expert_fns):
        rows = np.flatnonzero((ro.selected == i).any(axis=1))
        if rows.size == 0:
            continue
        y = fn(take_rows(h, rows))
        g = take_rows(take_cols(ro.gate_weights, [i]), rows)
        term = scatter_rows(scale_rows(y, g), rows, T)
        out = term if out is None else add(out, term)
    if out is None:
        out = zeros(T, h.cols)
    return out


def moe_forward(experts: list[FfnExpert], router: Router, h: Matrix,
                cfg: MoeLayerConfig, logit_delta: Matrix | None = None) -> tuple[Matrix, RouterOutput]:
    if len(experts) != cfg.N:
        raise ConfigError(f"N: config says {cfg.N} experts, got {len(experts)}")
    ro = route(router, h, cfg.K, cfg.renormalize_gates, logit_delta)
    fns = [lambda x, e=e: ffn_forward(e, x) for e in experts]
    return combine(ro, h, fns), ro


def dispatch_fractions(selected: np.ndarray, N: int) -> np.ndarray:
    """Fraction of token-slots sent to each expert (sums to 1)."""
    counts = np.bincount(np.asarray(selected).ravel(), minlength=N).astype(float)
    return counts / counts.sum()


def load_balance_loss(ro: RouterOutput, N: int | None = None) -> Matrix:
    """N · Σ_i f_i · P_i with f from hard dispatch and P the mean router probability.

    Differentiable through P only.
    """
    N = ro.num_experts if N is None else N
    T = ro.num_tokens
    f = dispatch_fractions(ro.selected, N)
    mean_p = matmul(constant(np.full((1, T), 1.0 / T)), ro.probs)
    return scale(matmul(mean_p, constant(f.reshape(-1, 1))), float(N))


def router_z_loss(logits: Matrix) -> Matrix:
    """Mean over tokens of the squared log-partition of the router logits."""
    return mean_all(square(logsumexp(logits)))
