"""Experiment configuration files.

An experiment config is a JSON object with these keys (all optional except
where a preset does not supply them):

``preset``       ``"toy"`` or ``"olmoe-dims"``; fills in the ``model`` section.
``model``        ``L D D_ffn N K ffn_form renormalize_gates pre_norm causal seed
                 model_activated_total``
``strategy``     ``variant M K_tilde D_B arch alpha renormalize_peft_gates dropout``
``task``         ``kind num_clusters D T samples noise_std mean_scale seed``
``train``        ``lr warmup_steps batch_size epochs aux_coef weight_decay seed``
``output_dir``   where ``train`` writes its artifacts.

Unknown keys anywhere are errors.  ``task.D`` defaults to ``model.D`` and must
match it when given.  The ``olmoe-dims`` preset is for counting only.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .analysis import OLMOE_ACTIVATED_TOTAL, CountDims
from .moe import ConfigError, MoeLayerConfig
from .strategies import PeftStrategyConfig
from .training import SyntheticTaskSpec, TrainConfig

MODEL_KEYS = ("L", "D", "D_ffn", "N", "K", "ffn_form", "renormalize_gates", "pre_norm", "causal", "seed",
              "model_activated_total")
TOP_KEYS = ("preset", "model", "strategy", "task", "train", "output_dir")

PRESETS = {
    "toy": {"L": 2, "D": 16, "D_ffn": 32, "N": 4, "K": 2},
    # OLMoE-1B-7B public dimensions; only usable for parameter counting
    "olmoe-dims": {"L": 16, "D": 2048, "D_ffn": 1024, "N": 64, "K": 8, "ffn_form": "glu",
                   "model_activated_total": OLMOE_ACTIVATED_TOTAL},
}
COUNTING_ONLY = {"olmoe-dims"}


@dataclass(frozen=True)
class ModelSection:
    L: int = 2
    D: int = 16
    D_ffn: int = 32
    N: int = 4
    K: int = 2
    ffn_form: str = "vanilla"
    renormalize_gates: bool = False
    pre_norm: bool = False
    causal: bool = False
    seed: int = 0
    model_activated_total: float | None = None

    def moe_config(self) -> MoeLayerConfig:
        return MoeLayerConfig(self.D, self.D_ffn, self.N, self.K, self.ffn_form, self.renormalize_gates)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection
    strategy: PeftStrategyConfig
    task: SyntheticTaskSpec
    train: TrainConfig
    preset: str | None = None
    output_dir: str | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def counting_only(self) -> bool:
        return self.preset in COUNTING_ONLY

    def count_dims(self) -> CountDims:
        m, s = self.model, self.strategy
        M = m.N if s.variant == "perft_e" else s.M
        return CountDims(L=m.L, D=m.D, N=m.N, K=m.K, D_ffn=m.D_ffn, D_B=s.D_B, M=M, K_tilde=s.K_tilde,
                         ffn_form=m.ffn_form, model_activated_total=m.model_activated_total)

    def to_dict(self) -> dict:
        """Fully resolved config (every field explicit), suitable for re-loading."""
        task = asdict(self.task)
        train = asdict(self.train)
        train.pop("betas"), train.pop("adam_eps")
        out = {"model": asdict(self.model), "strategy": asdict(self.strategy), "task": task, "train": train}
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: must be a JSON object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key")


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


_INT_FIELDS = {"L", "D", "D_ffn", "N", "K", "seed", "M", "K_tilde", "D_B", "num_clusters", "T", "samples",
               "warmup_steps", "batch_size", "epochs"}


def _check_types(section: str, values: dict) -> None:
    for k, v in values.items():
        if k in _INT_FIELDS and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{section}.{k}: must be an integer (got {v!r})")


def parse_config(raw: dict, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    """Validate a decoded JSON config; ``seed`` overrides the model, task and train seeds."""
    _check_keys("config", raw, TOP_KEYS)
    raw = copy.deepcopy(raw)
    preset = raw.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"preset: must be one of {sorted(PRESETS)} (got {preset!r})")
    model_vals = dict(PRESETS.get(preset, {}))
    given = raw.get("model", {})
    _check_keys("model", given, MODEL_KEYS)
    model_vals.update(given)
    strategy_vals = raw.get("strategy", {})
    _check_keys("strategy", strategy_vals, [f.name for f in fields(PeftStrategyConfig)])
    task_vals = raw.get("task", {})
    _check_keys("task", task_vals, [f.name for f in fields(SyntheticTaskSpec)])
    train_vals = raw.get("train", {})
    _check_keys("train", train_vals, [f.name for f in fields(TrainConfig) if f.name not in ("betas", "adam_eps")])
    for name, vals in (("model", model_vals), ("strategy", strategy_vals), ("task", task_vals),
                       ("train", train_vals)):
        _check_types(name, vals)
    if seed is not None:
        model_vals["seed"] = task_vals["seed"] = train_vals["seed"] = seed

    model = _build("model", ModelSection, model_vals)
    try:
        model.moe_config()
    except ConfigError as exc:
        raise ConfigError(f"model.{exc}") from None
    if model.L < 1:
        raise ConfigError(f"model.L: must be >= 1 (got {model.L})")
    strategy = _build("strategy", PeftStrategyConfig, strategy_vals)
    if "D" in task_vals and task_vals["D"] != model.D:
        raise ConfigError(f"task.D: must equal model.D ({model.D}), got {task_vals['D']}")
    task_vals["D"] = model.D
    task = _build("task", SyntheticTaskSpec, task_vals)
    train = _build("train", TrainConfig, train_vals)
    out = output_dir if output_dir is not None else raw.get("output_dir")
    return ExperimentConfig(model, strategy, task, train, preset, out, raw)


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {path}: {exc}") from None
    return parse_config(raw, seed, output_dir)
