"""Bottleneck adaptation blocks: LoRA and parallel adapters."""

from __future__ import annotations

from dataclasses import dataclass

from .core import Matrix, Rng, ShapeError, init_matrix, matmul, scale, silu

ARCHS = ("lora", "parallel_adapter")


@dataclass
class BottleneckAdapter:
    """Down-projection to ``D_B`` dims, optional SiLU, up-projection back out.

    ``alpha`` only matters for LoRA, whose output is scaled by ``alpha / D_B``.
    """

    W_down: Matrix
    W_up: Matrix
    arch: str = "lora"
    alpha: float | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.W_down.cols != self.W_up.rows:
            raise ShapeError(f"bottleneck mismatch: W_down {self.W_down.shape}, W_up {self.W_up.shape}")
        if self.alpha is None:
            self.alpha = 2.0 * self.D_B

    @property
    def D(self) -> int:
        return self.W_down.rows

    @property
    def D_B(self) -> int:
        return self.W_down.cols

    @property
    def d_out(self) -> int:
        return self.W_up.cols

    @property
    def scaling(self) -> float:
        return self.alpha / self.D_B

    def parameters(self) -> dict[str, Matrix]:
        return {"W_down": self.W_down, "W_up": self.W_up}


def init_adapter(D: int, D_B: int, arch: str = "lora", alpha: float | None = None,
                 rng: Rng | None = None, d_out: int | None = None,
                 requires_grad: bool = True) -> BottleneckAdapter:
    """W_down ~ N(0, 1/D), W_up = 0, so a fresh adapter contributes exactly nothing."""
    if D < 1 or D_B < 1:
        raise ValueError(f"adapter dims must be positive (D={D}, D_B={D_B})")
    d_out = D if d_out is None else d_out
    W_down = init_matrix(D, D_B, "scaled_normal", rng, std=D ** -0.5, requires_grad=requires_grad)
    W_up = init_matrix(D_B, d_out, "zeros", requires_grad=requires_grad)
    return BottleneckAdapter(W_down, W_up, arch, alpha)


def adapter_forward(a: BottleneckAdapter, h: Matrix) -> Matrix:
    if h.cols != a.D:
        raise ShapeError(f"adapter_forward: input width {h.cols} != adapter width {a.D}")
    z = matmul(h, a.W_down)
    if a.arch == "lora":
        return scale(matmul(z, a.W_up), a.scaling)
    return matmul(silu(z), a.W_up)


def adapter_param_count(a: BottleneckAdapter) -> int:
    return a.D * a.D_B + a.D_B * a.d_out
