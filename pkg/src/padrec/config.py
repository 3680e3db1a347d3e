"""Flat key = value run configuration with a validated schema.

The file format is one `key = value` pair per line, `#` comments allowed.
Flags override file values; every run writes the fully-resolved mapping to
resolved_config.json so results are reproducible from that file alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .model import ModelConfig
from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(float(x) for x in s.split(","))


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "precision": (str, "f64"),
    "threads": (int, 1),
    "eval.k": (int, 10),
    "data.interactions": (str, ""),
    "data.text": (str, ""),
    "data.text_index": (str, ""),
    "data.text_strict": (_parse_bool, True),
    "model.d_c": (int, 64),
    "model.encoder": (str, "attention"),
    "model.layers": (int, 2),
    "model.heads": (int, 2),
    "model.max_len": (int, 23),
    "model.dropout": (float, 0.1),
    "model.buckets": (int, 10),
    "model.bucket_dim": (int, 8),
    "model.gate_hidden": (int, 16),
    "model.mlp_hidden": (int, 128),
    "train.lr": (float, 1e-3),
    "train.batch_size": (int, 16),
    "train.gamma": (float, 0.2),
    "train.weight_decay": (float, 0.1),
    "train.patience": (int, 10),
    "train.max_epochs": (int, 50),
    "pretrain.max_epochs": (int, 0),   # 0: inherit train.max_epochs
    "align.max_epochs": (int, 0),
    "finetune.max_epochs": (int, 0),
    "train.alignment_variant": (str, "rec_anchored"),
    "train.experts": (str, "id,align,llm"),
    "train.gating": (str, "frequency_aware"),
    "train.eval_batch": (int, 256),
    "kernel.kind": (str, "gaussian"),
    "kernel.bandwidths": (_parse_floats, ()),
    "kernel.betas": (_parse_floats, ()),
    "infonce.temperature": (float, 0.2),
    "mmd.estimator": (str, "biased"),
}


@dataclass
class RunConfig:
    values: dict

    @staticmethod
    def defaults() -> "RunConfig":
        return RunConfig({k: d for k, (_, d) in SCHEMA.items()})

    @staticmethod
    def from_file(path: str | None, overrides: dict | None = None
                  ) -> "RunConfig":
        cfg = RunConfig.defaults()
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(
                            f"{path}:{lineno}: expected 'key = value'")
                    key, value = (part.strip() for part in line.split("=", 1))
                    cfg.set(key, value, where=f"{path}:{lineno}")
        for key, value in (overrides or {}).items():
            cfg.set(key, value, where="flag")
        cfg.validate()
        return cfg

    def set(self, key: str, value, where: str = "") -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(value) if isinstance(value, str) else value
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        if v["precision"] not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if v["model.encoder"] not in ("attention", "gru"):
            raise ConfigError("model.encoder must be attention or gru")
        if v["train.alignment_variant"] not in (
                "none", "non_anchored", "rec_anchored", "rec_anchored_frozen"):
            raise ConfigError(
                f"unknown alignment variant {v['train.alignment_variant']!r}")
        if v["kernel.kind"] not in (
                "gaussian", "laplacian", "linear", "cosine", "infonce"):
            raise ConfigError(f"unknown kernel kind {v['kernel.kind']!r}")
        if v["train.gating"] not in ("frequency_aware", "global_learned"):
            raise ConfigError(f"unknown gating {v['train.gating']!r}")
        experts = self.experts()
        if not experts or any(e not in ("id", "align", "llm") for e in experts):
            raise ConfigError(f"bad expert mask {v['train.experts']!r}")
        try:
            self.model_config()
            self.train_config("pretrain")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def experts(self) -> tuple[str, ...]:
        return tuple(e.strip() for e in self.values["train.experts"].split(",")
                     if e.strip())

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            d_c=v["model.d_c"],
            encoder=v["model.encoder"],
            layers=v["model.layers"],
            heads=v["model.heads"],
            max_len=v["model.max_len"],
            dropout=v["model.dropout"],
            n_buckets=v["model.buckets"],
            bucket_dim=v["model.bucket_dim"],
            gate_hidden=v["model.gate_hidden"],
            mlp_hidden=v["model.mlp_hidden"],
            experts=self.experts(),
            gating=v["train.gating"],
        )

    def train_config(self, phase: str) -> TrainConfig:
        v = self.values
        max_epochs = v.get(f"{phase}.max_epochs", 0) or v["train.max_epochs"]
        return TrainConfig(
            lr=v["train.lr"],
            batch_size=v["train.batch_size"],
            gamma=v["train.gamma"],
            weight_decay=v["train.weight_decay"],
            patience=v["train.patience"],
            max_epochs=max_epochs,
            seed=v["seed"],
            eval_k=v["eval.k"],
            alignment_variant=v["train.alignment_variant"],
            kernel_kind=v["kernel.kind"],
            bandwidths=v["kernel.bandwidths"],
            betas=v["kernel.betas"],
            infonce_temperature=v["infonce.temperature"],
            mmd_estimator=v["mmd.estimator"],
            experts=self.experts(),
            gating=v["train.gating"],
            eval_batch=v["train.eval_batch"],
        )

    def write_resolved(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {k: list(v) if isinstance(v, tuple) else v
                 for k, v in sorted(self.values.items())},
                fh, indent=2)
            fh.write("\n")
