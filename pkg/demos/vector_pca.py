"""Project expert keys, router vectors and adapter keys of a trained layer onto a shared PCA plane."""

import numpy as np

from perft.analysis import bundle_pca, cosine_matrix, extract_vectors
from perft.cli import model_from_config
from perft.config import parse_config
from perft.training import generate_task, train

cfg = parse_config({"preset": "toy", "strategy": {"variant": "perft_r", "M": 4, "K_tilde": 1, "D_B": 4},
                    "task": {"samples": 128}, "train": {"lr": 1e-2, "warmup_steps": 10, "epochs": 4}})
model = model_from_config(cfg)
train(model, generate_task(cfg.task), cfg.train)

bundle = extract_vectors(model, 1)
pca = bundle_pca(bundle)
print("explained variance of the key-space plane", np.round(pca.explained_ratio, 3))
kinds = np.array(bundle.kinds)
for kind in ("expert_key", "expert_vector", "peft_key", "peft_vector"):
    c = pca.coords[kinds == kind]
    print(f"{kind:<14} n={len(c):<4} centroid ({c[:, 0].mean():+.3f}, {c[:, 1].mean():+.3f})")
cos = cosine_matrix(bundle.select("peft_vector"), bundle.select("expert_vector"))
print("cosine(peft router, moe router):")
print(np.round(cos, 2))
