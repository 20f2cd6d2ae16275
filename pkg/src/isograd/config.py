"""Plain-text key=value run configuration with namespaced keys.

Every key has a documented default matching the training recipe, so an
empty config reproduces it (modulo grid size).  Unknown keys are errors.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .initialization import FitConfig
from .loss import LossWeights
from .render import RenderConfig
from .train import TrainConfig

# key -> (type tag, default); tags: int, float, bool, floats (comma list)
SCHEMA = {
    "fit.iters": ("int", 1000),
    "fit.batch_rays": ("int", 5000),
    "fit.lr_sigma": ("float", 0.5),
    "fit.lr_sh": ("float", 0.01),
    "fit.step_size": ("float", 0.5),
    "fit.tv_lambda": ("float", 1e-5),
    "fit.sigma_init": ("float", 0.1),
    "fit.sh_init_dc": ("float", 1.7725),
    "fit.target_err": ("float", 0.05),
    "fit.seed": ("int", 0),
    "fit.resolution": ("int", 64),
    "fit.bbox": ("floats", (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)),

    "init.tau_sigma": ("floats", (10.0, 30.0, 50.0, 70.0, 90.0)),
    "init.s_sigma": ("float", 0.05),
    "init.prune_threshold": ("float", 5.0),

    "train.iters": ("int", 50000),
    "train.batch_rays": ("int", 5000),
    "train.lr_delta_start": ("float", 1e-5),
    "train.lr_delta_end": ("float", 1e-5),
    "train.lr_sigma_start": ("float", 1e-2),
    "train.lr_sigma_end": ("float", 1e-3),
    "train.lr_sh": ("float", 1e-3),
    "train.delay_iters": ("int", 25000),
    "train.delay_mult": ("float", 0.01),
    "train.a_start": ("float", 5.0),
    "train.a_end": ("float", 2.0),
    "train.a_anneal_iters": ("int", 10000),
    "train.rmsprop_decay": ("float", 0.95),
    "train.rmsprop_eps": ("float", 1e-8),
    "train.seed": ("int", 0),
    "train.deterministic": ("bool", True),
    "train.log_every": ("int", 100),
    "train.checkpoint_every": ("int", 0),

    "loss.lambda_c": ("float", 1e-6),
    "loss.lambda_n": ("float", 1e-6),
    "loss.lambda_delta": ("float", 1e-3),
    "loss.lambda_H": ("float", 1e-4),
    "loss.lambda_alpha": ("float", 1e-9),
    "loss.lambda_ek": ("float", 0.0),
    "loss.lambda_c_cutoff_iters": ("int", 10000),

    "render.background": ("floats", (1.0, 1.0, 1.0)),
    "render.cull_backfaces": ("bool", True),
}


def _parse_value(key: str, tag: str, raw: str):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tag == "floats":
            return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise FormatError(f"config key {key!r}: cannot parse {raw!r} as {tag}") from None
    raise FormatError(f"config key {key!r}: unknown type tag {tag}")


class RunConfig:
    """Parsed configuration; values fall back to the schema defaults."""

    def __init__(self, values: dict | None = None):
        self.values = dict(values or {})
        for key in self.values:
            if key not in SCHEMA:
                raise FormatError(f"unknown config key {key!r}")

    @classmethod
    def load(cls, path) -> "RunConfig":
        values = {}
        for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in SCHEMA:
                raise FormatError(f"{path}:{ln}: unknown config key {key!r}")
            values[key] = _parse_value(key, SCHEMA[key][0], raw)
        return cls(values)

    def get(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        return self.values.get(key, SCHEMA[key][1])

    def fit_config(self) -> FitConfig:
        return FitConfig(iters=self.get("fit.iters"),
                         batch_rays=self.get("fit.batch_rays"),
                         lr_sigma=self.get("fit.lr_sigma"),
                         lr_sh=self.get("fit.lr_sh"),
                         step_size=self.get("fit.step_size"),
                         tv_lambda=self.get("fit.tv_lambda"),
                         sigma_init=self.get("fit.sigma_init"),
                         sh_init_dc=self.get("fit.sh_init_dc"),
                         target_err=self.get("fit.target_err"),
                         seed=self.get("fit.seed"))

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_c=self.get("loss.lambda_c"),
                           lambda_n=self.get("loss.lambda_n"),
                           lambda_delta=self.get("loss.lambda_delta"),
                           lambda_H=self.get("loss.lambda_H"),
                           lambda_alpha=self.get("loss.lambda_alpha"),
                           lambda_ek=self.get("loss.lambda_ek"),
                           lambda_c_cutoff_iters=self.get("loss.lambda_c_cutoff_iters"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(iters=self.get("train.iters"),
                           batch_rays=self.get("train.batch_rays"),
                           lr_delta_start=self.get("train.lr_delta_start"),
                           lr_delta_end=self.get("train.lr_delta_end"),
                           lr_sigma_start=self.get("train.lr_sigma_start"),
                           lr_sigma_end=self.get("train.lr_sigma_end"),
                           lr_sh=self.get("train.lr_sh"),
                           delay_iters=self.get("train.delay_iters"),
                           delay_mult=self.get("train.delay_mult"),
                           a_start=self.get("train.a_start"),
                           a_end=self.get("train.a_end"),
                           a_anneal_iters=self.get("train.a_anneal_iters"),
                           rmsprop_decay=self.get("train.rmsprop_decay"),
                           rmsprop_eps=self.get("train.rmsprop_eps"),
                           seed=self.get("train.seed"),
                           weights=self.loss_weights(),
                           cull_backfaces=self.get("render.cull_backfaces"),
                           deterministic=self.get("train.deterministic"),
                           log_every=self.get("train.log_every"),
                           checkpoint_every=self.get("train.checkpoint_every"))

    def render_config(self) -> RenderConfig:
        return RenderConfig(a=self.get("train.a_end"),
                            background=np.asarray(self.get("render.background")),
                            cull_backfaces=self.get("render.cull_backfaces"))
