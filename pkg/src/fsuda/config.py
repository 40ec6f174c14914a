"""Run configuration: one flat, typed key-value namespace for every knob.

Configs load from plain text files (`key = value` lines, `#` comments),
accept `--set key=value` overrides, reject unknown keys, and expose a
content digest that all output artifacts embed.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass


@dataclass
class RunConfig:
    # feature and network dimensions
    raw_dim: int = 64
    token_dim: int = 64
    n_dsp: int = 4            # domain-shared prompt tokens
    n_tsp: int = 2            # task-specific prompt tokens
    n_img: int = 4            # token chunks the raw feature is lifted into
    backbone_hidden: int = 128
    backbone_out: int = 128
    head_out: int = 32
    # init scale of the trainable head; keeps embedding distances O(1) so the
    # Gaussian similarity kernel has contrast before any training
    head_init_gain: float = 10.0

    # episode shape
    way_count: int = 5
    shot_count: int = 1
    query_count: int = 15

    # meta-training
    epochs: int = 1
    episodes_per_epoch: int = 500
    learning_rate: float = 0.005
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_nan_skips: int = 10

    # outer loss
    lambda_d: float = 0.01
    lambda_f: float = 0.01
    gamma_clf_init: float = 1.0
    gamma_adapter_init: float = 1000.0
    lambda_s_init: float = 1.0
    lf_soft_assignment: bool = False
    lf_soft_temperature: float = 0.05
    lf_on_raw_target: bool = False
    # divide the scatter pool by its RMS norm (in-graph): the raw trade-off
    # rewards unbounded embedding growth when the head is purely linear
    lf_normalize_scale: bool = True

    # similarity normalization
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6

    # evaluation
    num_test_tasks: int = 200
    timing_reps: int = 1
    workers: int = 0          # 0 = available parallelism

    # randomness
    seed: int = 0

    # data source
    data_mode: str = "synthetic"   # synthetic | files
    source_file: str = ""
    target_file: str = ""

    # synthetic data
    synth_classes: int = 28
    synth_per_class: int = 40
    synth_class_sep: float = 1.0
    synth_sigma_within: float = 0.15
    # class means live in the first synth_signal_dim coordinates (0 = all);
    # the complement carries pure within-class noise of std
    # synth_sigma_complement (0 = same as synth_sigma_within)
    synth_signal_dim: int = 16
    synth_sigma_complement: float = 0.8
    shift_rotation_strength: float = 0.5
    shift_translation: float = 1.0
    shift_noise_sigma: float = 0.1
    shift_signal_leak: float = 0.15

    # class split (over the source label universe)
    split_train_classes: int = 20
    split_val_classes: int = 0
    split_test_classes: int = 8

    # ablation switches
    disable_prompts: bool = False
    disable_shared_prompt: bool = False
    disable_task_prompt: bool = False
    disable_adapter: bool = False
    disable_lf: bool = False
    disable_ld: bool = False

    # behavior flags
    train_cls_token: bool = False
    restrict_train_target: bool = False

    out_dir: str = "runs/run0"

    # derived ---------------------------------------------------------
    @property
    def shared_prompts_enabled(self) -> bool:
        return not (self.disable_prompts or self.disable_shared_prompt)

    @property
    def task_prompts_enabled(self) -> bool:
        return not (self.disable_prompts or self.disable_task_prompt)

    def validate(self) -> "RunConfig":
        pos_int = [
            "raw_dim", "token_dim", "backbone_hidden", "backbone_out", "head_out",
            "way_count", "shot_count", "query_count", "sinkhorn_iters",
            "num_test_tasks", "timing_reps", "synth_classes", "synth_per_class",
        ]
        for key in pos_int:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        nonneg_int = [
            "n_dsp", "n_tsp", "n_img", "epochs", "episodes_per_epoch",
            "max_nan_skips", "workers", "seed", "split_train_classes",
            "split_val_classes", "split_test_classes",
        ]
        for key in nonneg_int:
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        pos_float = [
            "learning_rate", "adam_eps", "gamma_clf_init", "gamma_adapter_init",
            "lf_soft_temperature", "head_init_gain",
        ]
        for key in pos_float:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0, got {getattr(self, key)}")
        nonneg_float = [
            "lambda_d", "lambda_f", "lambda_s_init", "sinkhorn_tol",
            "synth_class_sep", "synth_sigma_within", "synth_sigma_complement",
            "shift_rotation_strength", "shift_translation", "shift_noise_sigma",
            "shift_signal_leak",
        ]
        for key in nonneg_float:
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        for key in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, key)
            if not 0.0 <= beta < 1.0:
                raise ConfigError(f"{key} must lie in [0, 1), got {beta}")
        if self.raw_dim < 2:
            raise ConfigError(f"raw_dim must be >= 2, got {self.raw_dim}")
        if not 0 <= self.synth_signal_dim <= self.raw_dim:
            raise ConfigError(
                f"synth_signal_dim must lie in [0, raw_dim={self.raw_dim}], "
                f"got {self.synth_signal_dim}"
            )
        if not 0.0 <= self.shift_signal_leak <= 1.0:
            raise ConfigError(
                f"shift_signal_leak must lie in [0, 1], got {self.shift_signal_leak}"
            )
        if self.data_mode not in ("synthetic", "files"):
            raise ConfigError(f"data_mode must be synthetic|files, got {self.data_mode!r}")
        if self.data_mode == "files":
            if not self.source_file:
                raise ConfigError("source_file is required when data_mode = files")
            if not self.target_file:
                raise ConfigError("target_file is required when data_mode = files")
        split_total = (
            self.split_train_classes + self.split_val_classes + self.split_test_classes
        )
        if self.data_mode == "synthetic" and split_total != self.synth_classes:
            raise ConfigError(
                "split_train_classes + split_val_classes + split_test_classes "
                f"= {split_total} must equal synth_classes = {self.synth_classes}"
            )
        if self.split_train_classes < self.way_count:
            raise ConfigError(
                f"split_train_classes = {self.split_train_classes} is below "
                f"way_count = {self.way_count}"
            )
        if self.data_mode == "synthetic" and self.synth_per_class < self.shot_count + self.query_count:
            raise ConfigError(
                f"synth_per_class = {self.synth_per_class} is below "
                f"shot_count + query_count = {self.shot_count + self.query_count}"
            )
        if not self.out_dir:
            raise ConfigError("out_dir must be non-empty")
        return self

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    # operational keys that do not define the experiment: excluded from the
    # digest so artifacts stay byte-identical across output locations and
    # parallelism settings
    _DIGEST_EXCLUDED = ("out_dir", "workers", "timing_reps")

    def digest(self) -> str:
        lines = [
            f"{f.name} = {_format_value(getattr(self, f.name))}"
            for f in dataclasses.fields(self)
            if f.name not in self._DIGEST_EXCLUDED
        ]
        return hashlib.sha256(("\n".join(lines) + "\n").encode("utf-8")).hexdigest()

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


def paper_scale() -> RunConfig:
    """Published-scale dimensions and schedule (expensive; desk runs use
    the defaults)."""
    return RunConfig(
        raw_dim=512,
        token_dim=768,
        n_dsp=4,
        n_tsp=2,
        n_img=4,
        backbone_hidden=512,
        backbone_out=512,
        head_out=128,
        epochs=10,
        episodes_per_epoch=1000,
        num_test_tasks=3600,
        synth_classes=308,
        split_train_classes=217,
        split_val_classes=43,
        split_test_classes=48,
    )


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _FIELDS[key].type
    raw = raw.strip()
    try:
        if typ == "bool" or typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "int" or typ is int:
            return int(raw)
        if typ == "float" or typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        updates[key] = _coerce(key, raw)
    return dataclasses.replace(cfg, **updates)


def load_config(path, overrides=()) -> RunConfig:
    """Load a config file (optional) and apply `key=value` override strings."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        cfg = dataclasses.replace(cfg, **{key.strip(): _coerce(key.strip(), raw)})
    return cfg.validate()
