"""Checkpoint container for policy, adapted parameters, and model ensemble.

A single .npz file holds every float64 array exactly plus a JSON metadata
blob, so round trips are bit-identical.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import MlpSpec, ParameterVector
from .dynamics import DynamicsModel, ModelEnsemble, Normalizer, PerturbationConfig
from .errors import ConfigurationError
from .policy import GaussianPolicy

FORMAT_VERSION = 1


def _spec_meta(spec: MlpSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_sizes": list(spec.hidden_sizes),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
        "weight_normalized": spec.weight_normalized,
    }


def _spec_from_meta(meta: dict) -> MlpSpec:
    return MlpSpec(
        meta["input_dim"],
        tuple(meta["hidden_sizes"]),
        meta["output_dim"],
        meta["activation"],
        meta["weight_normalized"],
    )


def save_checkpoint(
    path,
    env_id: str,
    iteration: int,
    policy: GaussianPolicy,
    adapted: list[ParameterVector],
    alpha: float,
    ensemble: ModelEnsemble,
    extra: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {"policy.theta": policy.params.values}
    for k, theta_k in enumerate(adapted):
        arrays[f"policy.adapted{k}"] = theta_k.values
    for k, model in enumerate(ensemble.models):
        arrays[f"model{k}.params"] = model.params.values
        arrays[f"model{k}.in_mean"] = model.in_norm.mean
        arrays[f"model{k}.in_std"] = model.in_norm.std
        arrays[f"model{k}.out_mean"] = model.out_norm.mean
        arrays[f"model{k}.out_std"] = model.out_norm.std
    arrays["ensemble.biases"] = ensemble.biases
    meta = {
        "format_version": FORMAT_VERSION,
        "env_id": env_id,
        "iteration": iteration,
        "alpha": alpha,
        "n_adapted": len(adapted),
        "n_models": len(ensemble.models),
        "policy_spec": _spec_meta(policy.mlp),
        "model_spec": _spec_meta(ensemble.models[0].spec),
        "perturbation": (
            None
            if ensemble.perturbation is None
            else {"b_max": ensemble.perturbation.b_max, "noise_std": ensemble.perturbation.noise_std}
        ),
        "extra": extra or {},
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    data = np.load(path)
    meta = json.loads(bytes(data["meta_json"]).decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError("unsupported checkpoint format version")
    policy_spec = _spec_from_meta(meta["policy_spec"])
    layout = GaussianPolicy.param_layout(policy_spec)
    policy = GaussianPolicy(policy_spec, ParameterVector(data["policy.theta"], layout))
    adapted = [
        ParameterVector(data[f"policy.adapted{k}"], layout) for k in range(meta["n_adapted"])
    ]
    model_spec = _spec_from_meta(meta["model_spec"])
    model_layout = model_spec.param_layout()
    models = [
        DynamicsModel(
            model_spec,
            ParameterVector(data[f"model{k}.params"], model_layout),
            Normalizer(data[f"model{k}.in_mean"], data[f"model{k}.in_std"]),
            Normalizer(data[f"model{k}.out_mean"], data[f"model{k}.out_std"]),
        )
        for k in range(meta["n_models"])
    ]
    perturbation = (
        None
        if meta["perturbation"] is None
        else PerturbationConfig(meta["perturbation"]["b_max"], meta["perturbation"]["noise_std"])
    )
    ensemble = ModelEnsemble(models, perturbation=perturbation, biases=data["ensemble.biases"])
    return {
        "env_id": meta["env_id"],
        "iteration": meta["iteration"],
        "alpha": meta["alpha"],
        "policy": policy,
        "adapted": adapted,
        "ensemble": ensemble,
        "extra": meta["extra"],
    }
