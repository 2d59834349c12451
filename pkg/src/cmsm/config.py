"""Flat ``key = value`` run configuration with documented defaults.

Sections are expressed as key prefixes (``sim.``, ``train.``, ``sample.``,
``eval.``).  Unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .phantom import PhantomSpec
from .sampling import SamplerConfig
from .training import NoiseSchedule, TrainConfig


class ConfigError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (default, parser, help text)
SCHEMA: dict[str, tuple] = {
    "seed": (1234, int, "global RNG seed; the --seed flag overrides it"),
    # dataset simulation
    "sim.height": (32, int, "phantom height in pixels (power of two)"),
    "sim.width": (32, int, "phantom width in pixels (power of two)"),
    "sim.coils": (4, int, "number of simulated receive coils"),
    "sim.train_records": (200, int, "training records to simulate (>= 1)"),
    "sim.test_records": (10, int, "held-out test records to simulate (>= 1)"),
    "sim.ellipses": (6, int, "random ellipses per phantom"),
    "sim.intensity_min": (0.3, float, "lower bound of ellipse intensities"),
    "sim.intensity_max": (1.0, float, "upper bound of ellipse intensities"),
    "sim.phase_scale": (8.0, float, "smoothness of the phantom phase field, in pixels"),
    "sim.noise": (0.01, float, "per-component k-space noise standard deviation"),
    "sim.acceleration": (4.0, float, "undersampling factor of acquisition masks"),
    "sim.acs_width": (4, int, "fully sampled center columns in every mask"),
    "sim.out_dir": ("data", str, "directory receiving train.cmsd and test.cmsd"),
    # training
    "train.dataset": ("data/train.cmsd", str, "training dataset path"),
    "train.iterations": (5000, int, "optimizer iterations"),
    "train.learning_rate": (0.001, float, "Adam learning rate for both networks"),
    "train.batch": (1, int, "records per optimizer step"),
    "train.smoothness": (1000.0, float, "weight of the coil-map smoothness penalty"),
    "train.acceleration": (4.0, float, "mask law recorded for inference defaults"),
    "train.sigma_min": (0.01, float, "smallest training/sampling noise level"),
    "train.sigma_max": (10.0, float, "largest training/sampling noise level"),
    "train.width": (32, int, "conv channels of both networks"),
    "train.log_every": (100, int, "iterations between training-log rows"),
    "train.checkpoint_every": (1000, int, "iterations between checkpoint writes (0 = end only)"),
    "train.checkpoint": ("model.cmsm", str, "output checkpoint path"),
    "train.log": ("train_log.csv", str, "output training-log CSV path"),
    # reconstruction / sampling
    "sample.dataset": ("data/test.cmsd", str, "test dataset path"),
    "sample.checkpoint": ("model.cmsm", str, "checkpoint consumed by reconstruction"),
    "sample.ensemble": (10, int, "random subsample branches per sampler step"),
    "sample.step_size": (2.0, float, "data-consistency step size (1 = replacement)"),
    "sample.steps": (100, int, "sampler noise levels"),
    "sample.acceleration": (4.0, float, "ensemble mask acceleration (defaults to the trained law)"),
    "sample.acs_width": (4, int, "ensemble mask ACS width (defaults to the trained law)"),
    "sample.recalibrate_every": (0, int, "re-estimate coil maps every K steps (0 = once)"),
    "sample.tv_weight": (0.002, float, "TV baseline regularization weight"),
    "sample.tv_iterations": (200, int, "TV baseline outer iterations"),
    "sample.tv_step": (1.0, float, "TV baseline gradient step size"),
    "sample.out_dir": ("recon", str, "directory receiving images and metrics.csv"),
    # evaluation
    "eval.inputs": ("recon/metrics.csv", str, "comma-separated metric CSV paths"),
    "eval.out": ("summary.csv", str, "aggregate CSV output path"),
}


@dataclass
class RunConfig:
    values: dict
    explicit: frozenset = field(default_factory=frozenset)

    def __getitem__(self, key: str):
        return self.values[key]

    def was_set(self, key: str) -> bool:
        return key in self.explicit

    # typed views ----------------------------------------------------------

    def phantom_spec(self) -> PhantomSpec:
        try:
            return PhantomSpec(
                height=self["sim.height"],
                width=self["sim.width"],
                n_ellipses=self["sim.ellipses"],
                intensity_min=self["sim.intensity_min"],
                intensity_max=self["sim.intensity_max"],
                phase_scale=self["sim.phase_scale"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self) -> NoiseSchedule:
        try:
            return NoiseSchedule(
                sigma_min=self["train.sigma_min"],
                sigma_max=self["train.sigma_max"],
                steps=self["sample.steps"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(
                iterations=self["train.iterations"],
                learning_rate=self["train.learning_rate"],
                batch_size=self["train.batch"],
                smoothness_weight=self["train.smoothness"],
                mask_acceleration=self["train.acceleration"],
                schedule=self.schedule(),
                seed=seed,
                log_every=self["train.log_every"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sampler_config(
        self, seed: int, acceleration: float | None = None, acs_width: int | None = None
    ) -> SamplerConfig:
        try:
            return SamplerConfig(
                ensemble_size=self["sample.ensemble"],
                step_size=self["sample.step_size"],
                steps=self["sample.steps"],
                acceleration=(
                    acceleration if acceleration is not None else self["sample.acceleration"]
                ),
                acs_width=acs_width if acs_width is not None else self["sample.acs_width"],
                seed=seed,
                recalibrate_every=self["sample.recalibrate_every"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    values = {key: default for key, (default, _, _) in SCHEMA.items()}
    explicit = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        _, parser, _ = SCHEMA[key]
        try:
            parsed = _parse_bool(value) if parser is bool else parser(value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
        values[key] = parsed
        explicit.add(key)
    return RunConfig(values, frozenset(explicit))


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, origin=path)


def describe_keys() -> str:
    lines = ["configuration keys (key = default): "]
    for key, (default, _, help_text) in SCHEMA.items():
        lines.append(f"  {key} = {default!r}")
        lines.append(f"      {help_text}")
    return "\n".join(lines)
