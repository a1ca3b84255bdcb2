"""Configuration files, analysis experiments, and CSV emission.

Experiments: uncertainty/plasticity grid maps, robustness sweeps over
model bias, hyperparameter sweeps, and the tailored-collection ablation.
Plot rendering is out of scope; CSV files are the contract.
"""

from __future__ import annotations

import configparser
import copy
import csv
import dataclasses
import os
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint as ckpt, orchestrator, policy as pol
from .dynamics import PerturbationConfig, TrainConfig, ensemble_std
from .errors import ConfigurationError
from .metaopt import TrpoConfig
from .orchestrator import RunConfig

Array = np.ndarray

PROBE_ACTIONS = np.array([[0.0, 0.0], [0.1, 0.0], [-0.1, 0.0], [0.0, 0.1], [0.0, -0.1]])


# -- config files ----------------------------------------------------------


def _coerce(value: str, target_type):
    if target_type is bool:
        lowered = value.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"cannot parse boolean from {value!r}")
    if target_type is tuple:
        return tuple(int(v) for v in value.replace("(", "").replace(")", "").split(",") if v.strip())
    return target_type(value)


_SECTION_TARGETS = {
    "run": (RunConfig, None),
    "trpo": (TrpoConfig, "trpo"),
    "model": (TrainConfig, "model_train"),
    "perturbation": (PerturbationConfig, "perturbation"),
}

_RUN_FIELD_TYPES = {
    f.name: (tuple if f.name in ("model_hidden", "policy_hidden") else f.type)
    for f in dataclasses.fields(RunConfig)
}


def _apply_kv(settings: dict, section: str, key: str, value: str) -> None:
    if section not in _SECTION_TARGETS:
        raise ConfigurationError(f"unknown config section {section!r}")
    cls, _ = _SECTION_TARGETS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if section == "run" and key == "env":
        key = "env_id"
    if key not in fields:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    ftype = fields[key].type
    if isinstance(ftype, str):  # postponed annotations
        ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(
            ftype.split("|")[0].strip(), str
        )
    if key in ("model_hidden", "policy_hidden"):
        ftype = tuple
    settings.setdefault(section, {})[key] = _coerce(value, ftype)


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an INI-style file plus `section.key=value`
    overrides. Every field of every section is overridable."""
    settings: dict[str, dict] = {}
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigurationError(f"cannot read config file {path!r}")
        for section in parser.sections():
            for key, value in parser.items(section):
                _apply_kv(settings, section, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        dotted, value = item.split("=", 1)
        if "." in dotted:
            section, key = dotted.split(".", 1)
        else:
            section, key = "run", dotted
        _apply_kv(settings, section, key, value)

    kwargs = dict(settings.get("run", {}))
    if "trpo" in settings:
        kwargs["trpo"] = TrpoConfig(**settings["trpo"])
    if "model" in settings:
        kwargs["model_train"] = TrainConfig(**settings["model"])
    if "perturbation" in settings:
        pert = dict(settings["perturbation"])
        enabled = pert.pop("enabled", True)
        if enabled:
            kwargs["perturbation"] = PerturbationConfig(**pert)
    return RunConfig(**kwargs)


# -- rank correlation -------------------------------------------------------


def _average_ranks(values: Array) -> Array:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Array, y: Array) -> float:
    """Spearman rank correlation with average ranks; nan if either series
    is constant (correlation undefined)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return float("nan")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))


# -- uncertainty / plasticity map -------------------------------------------


@dataclass
class GridMap:
    xs: Array
    ys: Array
    std: Array  # (res, res)
    kl: Array  # (res, res)
    spearman_rho: float


def uncertainty_map(checkpoint_path, resolution: int = 20, csv_path=None) -> GridMap:
    """Grid over [-2,2]^2: per-cell ensemble prediction std (mean over
    coordinates and a fixed probe-action set) and per-cell mean KL between
    the pre-update policy and each adapted policy."""
    data = ckpt.load_checkpoint(checkpoint_path) if isinstance(checkpoint_path, (str, os.PathLike)) else checkpoint_path
    if data["env_id"] != "point2d":
        raise ConfigurationError("uncertainty maps are defined for point2d checkpoints")
    policy = data["policy"]
    adapted = [policy.with_params(t) for t in data["adapted"]]
    ensemble = data["ensemble"]
    centers = np.linspace(-2.0, 2.0, resolution + 1)
    centers = 0.5 * (centers[:-1] + centers[1:])
    std_map = np.zeros((resolution, resolution))
    kl_map = np.zeros((resolution, resolution))
    for i, y in enumerate(centers):
        for j, x in enumerate(centers):
            state = np.array([x, y])
            states = np.repeat(state[None, :], len(PROBE_ACTIONS), axis=0)
            std_map[i, j] = float(np.mean(ensemble_std(ensemble, states, PROBE_ACTIONS)))
            if adapted:
                kl_map[i, j] = float(
                    np.mean([pol.mean_kl(policy, q, state[None, :]) for q in adapted])
                )
    rho = spearman(std_map.ravel(), kl_map.ravel())
    grid = GridMap(centers, centers, std_map, kl_map, rho)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "ensemble_std", "mean_kl"])
            for i, y in enumerate(centers):
                for j, x in enumerate(centers):
                    writer.writerow(
                        [
                            repr(float(x)),
                            repr(float(y)),
                            repr(float(std_map[i, j])),
                            repr(float(kl_map[i, j])),
                        ]
                    )
    return grid


# -- experiment sweeps -------------------------------------------------------


def _run_setting(config: RunConfig, out_dir: str, label: str, quiet: bool = True):
    run_dir = os.path.join(out_dir, label)
    _, records, _, _ = orchestrator.run(config, out_dir=run_dir, quiet=quiet)
    return records


def robustness_sweep(
    base_config: RunConfig,
    b_max_list: list[float],
    seeds: list[int],
    out_dir: str,
    noise_std: float = 0.1,
    quiet: bool = True,
) -> dict:
    """MB meta-optimization vs the alpha=0 baseline under biased/noisy
    models, shared seeds per setting. One curve CSV per (method, b_max,
    seed) lands under out_dir."""
    if not b_max_list:
        raise ConfigurationError("b_max_list must be non-empty")
    results: dict = {}
    for b_max in b_max_list:
        for method, alpha in (("adaptive", base_config.alpha), ("no_adaptation", 0.0)):
            for seed in seeds:
                config = replace(
                    base_config,
                    alpha=alpha,
                    seed=seed,
                    perturbation=PerturbationConfig(b_max=b_max, noise_std=noise_std),
                )
                label = f"robustness_{method}_bmax{b_max:g}_seed{seed}"
                records = _run_setting(config, out_dir, label, quiet=quiet)
                results[(method, b_max, seed)] = records
    return results


SWEEP_AXES = ("alpha", "ensemble_size", "meta_steps")


def sweep(
    base_config: RunConfig,
    axis: str,
    values: list,
    seeds: list[int],
    out_dir: str,
    quiet: bool = True,
) -> dict:
    """One run per (value, seed) along a hyperparameter axis, shared seeds."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigurationError("sweep values must be non-empty")
    results: dict = {}
    for value in values:
        for seed in seeds:
            if axis == "alpha":
                config = replace(base_config, alpha=float(value), seed=seed)
            elif axis == "ensemble_size":
                config = replace(base_config, n_models=int(value), seed=seed)
            else:
                config = replace(base_config, meta_steps_per_iter=int(value), seed=seed)
            label = f"sweep_{axis}_{value:g}_seed{seed}"
            results[(value, seed)] = _run_setting(config, out_dir, label, quiet=quiet)
    return results


def ablate_exploration(
    base_config: RunConfig, seeds: list[int], out_dir: str, quiet: bool = True
) -> dict:
    """Paired runs with and without tailored data collection, shared seeds.
    Reports both curves and the final-return ratio."""
    results: dict = {}
    for tailored in (True, False):
        for seed in seeds:
            config = replace(base_config, tailored_collection=tailored, seed=seed)
            label = f"ablation_tailored-{str(tailored).lower()}_seed{seed}"
            results[(tailored, seed)] = _run_setting(config, out_dir, label, quiet=quiet)
    final_tailored = np.mean([results[(True, s)][-1].avg_return for s in seeds])
    final_plain = np.mean([results[(False, s)][-1].avg_return for s in seeds])
    results["final_return_ratio"] = float(final_tailored / final_plain) if final_plain else np.nan
    return results
