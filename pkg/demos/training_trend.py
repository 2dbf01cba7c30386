"""Train a frozen toy backbone with three strategies on the clustered task and compare losses."""

import sys

from perft.cli import model_from_config
from perft.config import parse_config
from perft.training import evaluate, generate_task, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
task = {"num_clusters": 4, "noise_std": 0.1, "T": 8, "samples": 256}
schedule = {"lr": 1e-3, "warmup_steps": 100, "batch_size": 16, "epochs": 10, "aux_coef": 0.01}

for name, strategy in [("frozen + readout", {"variant": "none"}),
                       ("perft_r top1/4", {"variant": "perft_r", "M": 4, "K_tilde": 1, "D_B": 4}),
                       ("perft_d 2 x D_B=2", {"variant": "perft_d", "M": 2, "D_B": 2})]:
    cfg = parse_config({"preset": "toy", "strategy": strategy, "task": task, "train": schedule}, seed=seed)
    model, ds = model_from_config(cfg), generate_task(cfg.task)
    hist = train(model, ds, cfg.train)
    ev = evaluate(model, ds)
    print(f"{name:<20} first {hist[0].task_loss:.4f}  final {ev['loss']:.4f}  acc {ev['accuracy']:.3f}")
