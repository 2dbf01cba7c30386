"""Parameter accounting, routing statistics and key/expert-vector geometry."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import constant, graph_leaves, sum_all
from .moe import ConfigError, dispatch_fractions

COUNT_MODES = ("perft_r", "perft_e", "perft_d", "perft_s", "baseline_qv", "baseline_gate", "none")

OLMOE_ACTIVATED_TOTAL = 1.28e9


@dataclass(frozen=True)
class CountDims:
    """Symbolic model description, enough to count parameters without building tensors.

    ``model_activated_total`` overrides the computed total (used for real
    backbones whose embeddings and other blocks are not modelled here).
    """

    L: int
    D: int
    N: int
    K: int
    D_ffn: int | None = None
    D_B: int | None = None
    M: int | None = None
    K_tilde: int | None = None
    ffn_form: str = "vanilla"
    model_activated_total: float | None = None


@dataclass
class ParamReport:
    trainable_total: int
    trainable_activated_per_token: int
    model_activated_total: float
    activated_efficiency: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _need(dims: CountDims, *names: str) -> None:
    for n in names:
        v = getattr(dims, n)
        if v is None:
            raise ConfigError(f"{n}: required for this count mode")
        if v < 1:
            raise ConfigError(f"{n}: must be >= 1 (got {v})")


def _closed_form(dims: CountDims, mode: str) -> tuple[int, int]:
    """(trainable total, trainable activated per token) for one strategy."""
    L, D = dims.L, dims.D
    if mode == "none":
        return 0, 0
    _need(dims, "D_B")
    r = dims.D_B
    if mode == "baseline_qv":
        n = L * 2 * 2 * D * r
        return n, n
    if mode == "baseline_gate":
        n = L * (D * r + r * dims.N)
        return n, n
    if mode == "perft_s":
        n = L * 2 * D * r
        return n, n
    if mode == "perft_d":
        _need(dims, "M")
        n = L * dims.M * 2 * D * r
        return n, n
    if mode == "perft_e":
        return L * dims.N * 2 * D * r, L * dims.K * 2 * D * r
    if mode == "perft_r":
        _need(dims, "M", "K_tilde")
        if dims.K_tilde > dims.M:
            raise ConfigError(f"K_tilde: must be <= M (got K_tilde={dims.K_tilde}, M={dims.M})")
        return L * (dims.M * 2 * D * r + D * dims.M), L * (dims.K_tilde * 2 * D * r + D * dims.M)
    raise ConfigError(f"mode: must be one of {COUNT_MODES} (got {mode!r})")


def base_activated(dims: CountDims) -> int:
    """Frozen parameters one token passes through: attention, router and K experts per layer."""
    _need(dims, "D_ffn")
    per_expert = (3 if dims.ffn_form == "glu" else 2) * dims.D * dims.D_ffn
    return dims.L * (4 * dims.D * dims.D + dims.D * dims.N + dims.K * per_expert)


def count_params(source, mode: str | None = None) -> ParamReport:
    """Trainable / activated-trainable counts and their share of all activated parameters.

    ``source`` is a :class:`CountDims` or a live model (whose own strategy is
    used when ``mode`` is omitted).  Without an explicit
    ``model_activated_total`` the denominator is the frozen activated count
    plus the activated trainable count.
    """
    if not isinstance(source, CountDims):
        dims, model_mode = dims_of(source)
        mode = mode or model_mode
    else:
        dims = source
    if mode is None:
        raise ConfigError("mode: required when counting from dimensions")
    for n in ("L", "D", "N", "K"):
        _need(dims, n)
    total, active = _closed_form(dims, mode)
    denom = dims.model_activated_total
    if denom is None:
        denom = base_activated(dims) + active
    return ParamReport(total, active, denom, 100.0 * active / denom)


def dims_of(model) -> tuple[CountDims, str]:
    layer = model.layers[0]
    s, cfg = layer.strategy, layer.moe_cfg
    dims = CountDims(L=len(model.layers), D=cfg.D, N=cfg.N, K=cfg.K, D_ffn=cfg.D_ffn, D_B=s.D_B,
                     M=s.num_adapters(cfg.N) or s.M, K_tilde=s.K_tilde, ffn_form=cfg.ffn_form)
    return dims, s.variant


def enumerate_activated(model, probe: np.ndarray) -> tuple[int, int]:
    """Count (trainable, all) parameters touched by a forward pass of one probe token.

    Walks the recorded computation graph, so it is independent of the closed
    forms in :func:`count_params`.  The readout is task plumbing and is
    excluded.
    """
    params = {id(p): (name, p) for name, p in model.named_parameters().items() if not name.startswith("readout")}
    saved = {k: p.requires_grad for k, (_, p) in params.items()}
    try:
        for _, p in params.values():
            p.requires_grad = True
        hidden, _, _ = model.forward(constant(np.asarray(probe, dtype=float).reshape(1, -1)))
        leaves = graph_leaves(sum_all(hidden))
    finally:
        for k, (_, p) in params.items():
            p.requires_grad = saved[k]
    trainable = sum(l.data.size for l in leaves if id(l) in params and saved[id(l)])
    everything = sum(l.data.size for l in leaves if id(l) in params)
    return trainable, everything


# -- routing statistics -----------------------------------------------------------------

@dataclass
class RoutingStats:
    fractions: list[float]
    mean_probs: list[float]
    entropy: float

    @classmethod
    def from_counts(cls, counts: np.ndarray, prob_sum: np.ndarray, n_tokens: int) -> "RoutingStats":
        f = counts / counts.sum()
        nz = f[f > 0]
        return cls(f.tolist(), (prob_sum / n_tokens).tolist(), float(-(nz * np.log(nz)).sum()))


def routing_stats(model, dataset, which: str = "moe", batch_size: int = 64) -> list[RoutingStats]:
    """Per-layer dispatch fractions, mean router probabilities and dispatch entropy (nats)."""
    if which not in ("moe", "peft"):
        raise ConfigError(f"which: must be 'moe' or 'peft' (got {which!r})")
    if which == "peft" and any(l.peft_router is None for l in model.layers):
        raise ConfigError("which: 'peft' needs a PEFT router (variant perft_r)")
    S, T, D = dataset.inputs.shape
    counts = prob_sums = None
    n_tokens = 0
    for start in range(0, S, batch_size):
        block = dataset.inputs[start:start + batch_size]
        _, _, stats = model.forward(constant(block.reshape(-1, D)), seq_len=T)
        ros = [st[which] for st in stats]
        c = [np.bincount(ro.selected.ravel(), minlength=ro.num_experts).astype(float) for ro in ros]
        p = [ro.probs.data.sum(axis=0) for ro in ros]
        counts = c if counts is None else [a + b for a, b in zip(counts, c)]
        prob_sums = p if prob_sums is None else [a + b for a, b in zip(prob_sums, p)]
        n_tokens += block.shape[0] * T
    return [RoutingStats.from_counts(c, p, n_tokens) for c, p in zip(counts, prob_sums)]


# -- vectors -------------------------------------------------------------------------------

VECTOR_KINDS = ("expert_key", "expert_vector", "peft_key", "peft_vector")


@dataclass
class VectorBundle:
    """Labelled D-dimensional vectors taken from one layer.

    ``expert_key``: columns of each expert's W_up (index = expert * D_ffn + column);
    ``expert_vector``: columns of the MoE router;
    ``peft_key``: columns of each adapter's W_down (index = adapter * D_B + column);
    ``peft_vector``: columns of the PEFT router.
    """

    layer: int
    kinds: list[str] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    vectors: list[np.ndarray] = field(default_factory=list)

    def add(self, kind: str, index: int, vec: np.ndarray) -> None:
        self.kinds.append(kind)
        self.indices.append(index)
        self.vectors.append(np.array(vec, dtype=float))

    def select(self, kind: str) -> np.ndarray:
        rows = [v for k, v in zip(self.kinds, self.vectors) if k == kind]
        return np.array(rows).reshape(len(rows), -1)

    def count(self, kind: str) -> int:
        return sum(k == kind for k in self.kinds)

    def matrix(self) -> np.ndarray:
        return np.array(self.vectors)


def extract_vectors(model, layer_index: int) -> VectorBundle:
    if not 0 <= layer_index < len(model.layers):
        raise IndexError(f"layer {layer_index} out of range [0, {len(model.layers)})")
    layer = model.layers[layer_index]
    b = VectorBundle(layer_index)
    for e, expert in enumerate(layer.experts):
        W = expert.W_up.data
        for c in range(W.shape[1]):
            b.add("expert_key", e * W.shape[1] + c, W[:, c])
    for i in range(layer.router.W_g.cols):
        b.add("expert_vector", i, layer.router.W_g.data[:, i])
    for j, a in enumerate(layer.adapters):
        W = a.W_down.data
        for c in range(W.shape[1]):
            b.add("peft_key", j * W.shape[1] + c, W[:, c])
    if layer.peft_router is not None:
        for j in range(layer.peft_router.W_g.cols):
            b.add("peft_vector", j, layer.peft_router.W_g.data[:, j])
    return b


# -- geometry ---------------------------------------------------------------------------------

@dataclass
class PcaResult:
    coords: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray

    def transform(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=float) - self.mean) @ self.components.T


def pca_project(vectors, out_dims: int = 2, transform=None, rank_tol: float = 1e-12) -> PcaResult:
    """Fit principal axes on ``vectors`` and project ``transform`` (default: the fitting set).

    Axes come from an eigendecomposition of the sample covariance.  If fewer
    than ``out_dims`` directions carry variance, the output is narrowed and a
    warning is issued.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < out_dims:
        raise ValueError(f"pca_project: need at least {out_dims} vectors, got {X.shape[0] if X.ndim == 2 else 0}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    total = evals.sum()
    keep = int((evals > rank_tol * max(total, np.finfo(float).tiny)).sum())
    if keep < out_dims:
        warnings.warn(f"covariance has rank {keep}; projecting to {keep} dims instead of {out_dims}",
                      RuntimeWarning, stacklevel=2)
        out_dims = keep
    comps = evecs[:, :out_dims].T
    # fix the sign so results do not depend on the eigensolver's conventions
    signs = np.sign(comps[np.arange(out_dims), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    ratio = evals[:out_dims] / total if total > 0 else np.zeros(out_dims)
    res = PcaResult(np.empty((0, out_dims)), ratio, comps, mean)
    res.coords = res.transform(X if transform is None else transform)
    return res


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosines between rows of ``a`` and rows of ``b``; zero vectors give 0."""
    A, B = np.atleast_2d(np.asarray(a, dtype=float)), np.atleast_2d(np.asarray(b, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"cosine_matrix: vector lengths differ ({A.shape[1]} vs {B.shape[1]})")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    den = np.outer(na, nb)
    out = np.divide(A @ B.T, den, out=np.zeros(den.shape), where=den > 0)
    return np.clip(out, -1.0, 1.0)


# -- export --------------------------------------------------------------------------------

def write_vectors_csv(bundle: VectorBundle, path) -> None:
    D = len(bundle.vectors[0]) if bundle.vectors else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "layer", "index"] + [f"c{i + 1}" for i in range(D)])
        for k, i, v in zip(bundle.kinds, bundle.indices, bundle.vectors):
            w.writerow([k, bundle.layer, i] + [repr(float(x)) for x in v])


def write_pca_csv(bundle: VectorBundle, coords: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "layer", "index"] + [f"c{i + 1}" for i in range(coords.shape[1])])
        for k, i, c in zip(bundle.kinds, bundle.indices, coords):
            w.writerow([k, bundle.layer, i] + [repr(float(x)) for x in c])


def read_vectors_csv(path) -> VectorBundle:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    layer = int(rows[1][1]) if len(rows) > 1 else 0
    b = VectorBundle(layer)
    for r in rows[1:]:
        b.add(r[0], int(r[2]), np.array([float(x) for x in r[3:]]))
    return b


def bundle_pca(bundle: VectorBundle, out_dims: int = 2) -> PcaResult:
    """Fit on the FFN key vectors, then project every vector in the bundle with that fit."""
    return pca_project(bundle.select("expert_key"), out_dims, transform=bundle.matrix())


def dispatch_entropy(f) -> float:
    f = np.asarray(f, dtype=float)
    nz = f[f > 0]
    return float(-(nz * np.log(nz)).sum())


__all__ = [
    "COUNT_MODES", "CountDims", "OLMOE_ACTIVATED_TOTAL", "ParamReport", "PcaResult", "RoutingStats",
    "VectorBundle", "base_activated", "bundle_pca", "cosine_matrix", "count_params", "dims_of",
    "dispatch_entropy", "dispatch_fractions", "enumerate_activated", "extract_vectors", "pca_project",
    "read_vectors_csv", "routing_stats", "write_pca_csv", "write_vectors_csv",
]
