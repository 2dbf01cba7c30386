import itertools
import json
import math
import warnings

import numpy as np
import numpy.testing as npt
import pytest

from helpers import ADAPTED_VARIANTS, perturb_adapters, strategy_for, toy_model
from perft.analysis import (CountDims, ParamReport, base_activated, bundle_pca, cosine_matrix, count_params,
                            dims_of, dispatch_entropy, enumerate_activated, extract_vectors, pca_project,
                            read_vectors_csv, routing_stats, write_pca_csv, write_vectors_csv)
from perft.core import Rng, constant
from perft.moe import ConfigError, MoeLayerConfig, route
from perft.strategies import build_model
from perft.training import SyntheticTaskSpec, generate_task

OLMOE = dict(L=16, D=2048, N=64, K=8, D_ffn=1024, model_activated_total=1.28e9)


# -- parameter accounting -----------------------------------------------------------------

@pytest.mark.parametrize("r, count, pct", [(4, 524_288, 0.041), (16, 2_097_152, 0.164), (64, 8_388_608, 0.654)])
def test_baseline_qv_reference_rows(r, count, pct):
    rep = count_params(CountDims(**OLMOE, D_B=r), "baseline_qv")
    assert rep.trainable_activated_per_token == rep.trainable_total == count
    assert rep.activated_efficiency == pytest.approx(pct, rel=5e-3)


def test_closed_forms_by_hand():
    d = CountDims(L=3, D=10, N=4, K=2, D_ffn=7, D_B=2, M=5, K_tilde=2)
    assert count_params(d, "perft_r").trainable_total == 3 * (5 * 2 * 10 * 2 + 10 * 5)
    assert count_params(d, "perft_r").trainable_activated_per_token == 3 * (2 * 2 * 10 * 2 + 10 * 5)
    assert count_params(d, "perft_e").trainable_total == 3 * 4 * 2 * 10 * 2
    assert count_params(d, "perft_e").trainable_activated_per_token == 3 * 2 * 2 * 10 * 2
    assert count_params(d, "perft_d").trainable_activated_per_token == 3 * 5 * 2 * 10 * 2
    assert count_params(d, "perft_s").trainable_activated_per_token == 3 * 2 * 10 * 2
    assert count_params(d, "baseline_gate").trainable_total == 3 * (10 * 2 + 2 * 4)
    assert count_params(d, "none").trainable_total == 0
    assert base_activated(d) == 3 * (4 * 100 + 10 * 4 + 2 * 2 * 10 * 7)


def test_tiny_perft_s_and_rejections():
    assert count_params(CountDims(L=1, D=2, N=2, K=1, D_ffn=2, D_B=1), "perft_s").trainable_total == 4
    for mode in ADAPTED_VARIANTS:
        with pytest.raises(ConfigError, match="D_B"):
            count_params(CountDims(L=1, D=2, N=2, K=1, D_ffn=2, D_B=0, M=1, K_tilde=1), mode)
    with pytest.raises(ConfigError, match="M"):
        count_params(CountDims(L=1, D=2, N=2, K=1, D_ffn=2, D_B=1), "perft_d")
    with pytest.raises(ConfigError, match="mode"):
        count_params(CountDims(L=1, D=2, N=2, K=1, D_ffn=2, D_B=1), "prefix")


def test_report_invariants_and_json():
    rep = count_params(CountDims(**OLMOE, D_B=4, M=4, K_tilde=1), "perft_r")
    assert rep.trainable_activated_per_token <= rep.trainable_total
    assert rep.activated_efficiency == pytest.approx(100 * rep.trainable_activated_per_token / 1.28e9, rel=1e-9)
    assert json.loads(rep.to_json())["trainable_total"] == rep.trainable_total


def test_routed_count_at_reference_dimensions():
    # one 4-wide adapter picked from one, plus its router column, in each of 16 layers
    rep = count_params(CountDims(**OLMOE, D_B=4, M=1, K_tilde=1), "perft_r")
    assert rep.trainable_activated_per_token == 16 * (2 * 2048 * 4 + 2048) == 294_912


GRID = [(L, N, M, D_B) for L, N, M, D_B in itertools.product((1, 2), (2, 4), (1, 2, 4), (1, 2, 4))]


@pytest.mark.parametrize("variant", ADAPTED_VARIANTS)
def test_closed_forms_match_live_enumeration(variant):
    for L, N, M, D_B in GRID:
        K = max(1, N // 2)
        K_tilde = max(1, M // 2)
        model = build_model(MoeLayerConfig(6, 5, N, K), L, strategy_for(variant, M=M, K_tilde=K_tilde, D_B=D_B),
                            seed=L * 100 + N * 10 + M)
        for l, layer in enumerate(model.layers):
            perturb_adapters(layer, Rng(7).child(l))
        probe = Rng(1).normal(6)
        trainable, everything = enumerate_activated(model, probe)
        rep = count_params(model)
        assert trainable == rep.trainable_activated_per_token, (variant, L, N, M, D_B)
        assert everything == rep.model_activated_total, (variant, L, N, M, D_B)
        assert rep.trainable_total == sum(p.data.size for p in model.trainable().values())


def test_dims_of_round_trip():
    model = toy_model("perft_e", D_B=2)
    dims, mode = dims_of(model)
    assert mode == "perft_e" and dims.M == 4 and dims.L == 2


# -- routing statistics -------------------------------------------------------------------

def _dataset(samples=24, T=4, seed=0):
    return generate_task(SyntheticTaskSpec(D=16, T=T, samples=samples, seed=seed))


def test_uniform_logits_give_uniform_dispatch_with_full_activation():
    model = build_model(MoeLayerConfig(16, 32, 4, 4), 1, strategy_for("none"), 0, 4)
    model.layers[0].router.W_g.data[...] = 0.0
    (st,) = routing_stats(model, _dataset())
    npt.assert_allclose(st.fractions, [0.25] * 4, atol=1e-12)
    npt.assert_allclose(st.mean_probs, [0.25] * 4, atol=1e-12)
    assert st.entropy == pytest.approx(math.log(4), abs=1e-9)


def test_uniform_logits_with_top_k_fall_back_to_lowest_indices():
    model = build_model(MoeLayerConfig(16, 32, 4, 2), 1, strategy_for("none"), 0, 4)
    model.layers[0].router.W_g.data[...] = 0.0
    (st,) = routing_stats(model, _dataset())
    assert st.fractions == [0.5, 0.5, 0.0, 0.0]


def test_collapsed_router_has_zero_entropy():
    model = build_model(MoeLayerConfig(16, 32, 4, 1), 1, strategy_for("none"), 0, 4)
    W = np.zeros((16, 4))
    W[:, 3] = 1.0
    model.layers[0].router.W_g.data[...] = W
    ds = _dataset()
    ds.inputs[...] = np.abs(ds.inputs) + 1.0  # every token scores expert 3 highest
    (st,) = routing_stats(model, ds)
    assert st.fractions == [0.0, 0.0, 0.0, 1.0]
    assert st.entropy == 0.0


def test_routing_stats_replay_oracle_and_shuffle_invariance():
    model = toy_model("perft_r", M=4, D_B=4)
    ds = _dataset(samples=30)
    stats = routing_stats(model, ds, "moe", batch_size=8)
    peft = routing_stats(model, ds, "peft")
    S, T, D = ds.inputs.shape
    counts = [np.zeros(4), np.zeros(4)]
    pcounts = [np.zeros(4), np.zeros(4)]
    for s in range(S):
        _, _, logs = model.forward(constant(ds.inputs[s]), seq_len=T)
        for l, log in enumerate(logs):
            for row in log["moe"].selected:
                counts[l][row] += 1
            for row in log["peft"].selected:
                pcounts[l][row] += 1
    for l in range(2):
        npt.assert_allclose(stats[l].fractions, counts[l] / counts[l].sum(), atol=1e-12)
        npt.assert_allclose(peft[l].fractions, pcounts[l] / pcounts[l].sum(), atol=1e-12)
        assert sum(stats[l].fractions) == pytest.approx(1.0, abs=1e-9)
        assert stats[l].entropy <= math.log(4) + 1e-12
    shuffled = ds.subset(Rng(3).permutation(S))
    for a, b in zip(stats, routing_stats(model, shuffled, "moe", batch_size=5)):
        npt.assert_allclose(a.fractions, b.fractions, atol=1e-12)


def test_peft_stats_need_a_peft_router():
    with pytest.raises(ConfigError, match="^which:"):
        routing_stats(toy_model("perft_s"), _dataset(), "peft")


def test_dispatch_entropy():
    assert dispatch_entropy([1, 0, 0]) == 0.0
    assert dispatch_entropy([0.5, 0.5]) == pytest.approx(math.log(2))


# -- vectors ------------------------------------------------------------------------------

def test_bundle_counts_and_copies():
    model = toy_model("perft_r", M=4, D_B=2)
    b = extract_vectors(model, 1)
    assert (b.count("expert_key"), b.count("expert_vector"), b.count("peft_key"), b.count("peft_vector")) \
        == (4 * 32, 4, 4 * 2, 4)
    assert all(v.shape == (16,) for v in b.vectors)
    b.vectors[0][0] += 1.0
    assert model.layers[1].experts[0].W_up.data[0, 0] != b.vectors[0][0]


def test_expert_vectors_reproduce_router_logits():
    model = toy_model("perft_r", M=4, D_B=2)
    b = extract_vectors(model, 0)
    h = Rng(4).normal((5, 16))
    ro = route(model.layers[0].router, constant(h), 2)
    npt.assert_allclose(h @ b.select("expert_vector").T, ro.logits.data, rtol=0, atol=1e-13)


def test_perft_s_bundle_has_no_peft_router_vectors():
    b = extract_vectors(toy_model("perft_s"), 0)
    assert b.count("peft_vector") == 0 and b.count("peft_key") == 2


def test_extract_rejects_bad_layer():
    with pytest.raises(IndexError):
        extract_vectors(toy_model("none"), 2)


def test_vector_csv_round_trip(tmp_path):
    b = extract_vectors(toy_model("perft_r", M=2, D_B=2), 0)
    write_vectors_csv(b, tmp_path / "v.csv")
    back = read_vectors_csv(tmp_path / "v.csv")
    assert back.kinds == b.kinds and back.indices == b.indices
    assert back.matrix().tobytes() == b.matrix().tobytes()
    pca = bundle_pca(b)
    write_pca_csv(b, pca.coords, tmp_path / "p.csv")
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "kind,layer,index,c1,c2"


# -- PCA and cosines ----------------------------------------------------------------------

def test_pca_points_on_a_line():
    t = np.linspace(-2, 3, 12)[:, None]
    pts = np.array([1.0, -2.0, 0.5]) * t + np.array([4.0, 0.0, 1.0])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = pca_project(pts, 2)
    assert res.explained_ratio[0] >= 1 - 1e-9
    assert res.coords.shape == (12, 1)
    assert any("rank 1" in str(w.message) for w in caught)


def test_pca_fit_set_is_centred():
    X = Rng(5).normal((20, 4)) + 3.0
    res = pca_project(X, 2)
    npt.assert_allclose(res.coords.mean(axis=0), 0.0, atol=1e-9)
    assert (np.diff(res.explained_ratio) <= 0).all() and res.explained_ratio.sum() <= 1 + 1e-9


def test_pca_reconstruction_matches_svd_oracle():
    X = Rng(6).normal((10, 5))
    res = pca_project(X, 2)
    recon = res.coords @ res.components + res.mean
    Xc = X - X.mean(axis=0)
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    oracle = (U[:, :2] * s[:2]) @ Vt[:2] + X.mean(axis=0)
    assert np.linalg.norm(X - recon) == pytest.approx(np.linalg.norm(X - oracle), rel=1e-10)
    npt.assert_allclose(res.explained_ratio, s[:2] ** 2 / (s ** 2).sum(), rtol=1e-10)


def test_pca_transforms_a_different_set():
    X = Rng(7).normal((15, 4))
    Y = Rng(8).normal((3, 4))
    res = pca_project(X, 2, transform=Y)
    npt.assert_allclose(res.coords, (Y - X.mean(axis=0)) @ res.components.T, atol=1e-14)
    with pytest.raises(ValueError):
        pca_project(X[:1], 2)


def test_cosine_matrix():
    E = np.eye(3)
    npt.assert_allclose(cosine_matrix(E, E), E, atol=1e-15)
    A = Rng(9).normal((4, 6))
    B = Rng(10).normal((2, 6))
    direct = [[a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for b in B] for a in A]
    npt.assert_allclose(cosine_matrix(A, B), direct, atol=1e-14)
    npt.assert_allclose(np.diag(cosine_matrix(A, A)), 1.0, atol=1e-14)
    assert cosine_matrix(np.zeros((1, 6)), B).tolist() == [[0.0, 0.0]]
    with pytest.raises(ValueError):
        cosine_matrix(A, np.ones((1, 5)))


def test_param_report_dataclass_roundtrip():
    rep = ParamReport(10, 5, 100.0, 5.0)
    assert json.loads(rep.to_json()) == {"trainable_total": 10, "trainable_activated_per_token": 5,
                                         "model_activated_total": 100.0, "activated_efficiency": 5.0}
