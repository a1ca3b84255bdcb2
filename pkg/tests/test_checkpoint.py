import numpy as np
import pytest

from mbmpo import checkpoint
from mbmpo.dynamics import ModelEnsemble, PerturbationConfig
from mbmpo.errors import ConfigurationError
from mbmpo.policy import GaussianPolicy


def make_state(seed=0, n_models=3, perturbation=None):
    rng = np.random.default_rng(seed)
    policy = GaussianPolicy.initial(2, 2, rng, hidden=(4,))
    adapted = [
        policy.params.with_values(policy.params.values + 0.01 * (k + 1))
        for k in range(n_models)
    ]
    ensemble = ModelEnsemble.initial(2, 2, n_models, rng, hidden=(8,), perturbation=perturbation)
    return policy, adapted, ensemble


def test_round_trip_bit_exact(tmp_path):
    policy, adapted, ensemble = make_state(perturbation=PerturbationConfig(0.5, 0.1))
    path = tmp_path / "ckpt.npz"
    checkpoint.save_checkpoint(
        path, "point2d", 7, policy, adapted, 1e-3, ensemble, extra={"note": "x"}
    )
    loaded = checkpoint.load_checkpoint(path)
    assert loaded["env_id"] == "point2d"
    assert loaded["iteration"] == 7
    assert loaded["alpha"] == 1e-3
    assert loaded["extra"] == {"note": "x"}
    assert np.array_equal(loaded["policy"].params.values, policy.params.values)
    assert loaded["policy"].mlp == policy.mlp
    assert len(loaded["adapted"]) == len(adapted)
    for got, want in zip(loaded["adapted"], adapted):
        assert np.array_equal(got.values, want.values)
    assert len(loaded["ensemble"].models) == len(ensemble.models)
    for got, want in zip(loaded["ensemble"].models, ensemble.models):
        assert np.array_equal(got.params.values, want.params.values)
        assert np.array_equal(got.in_norm.mean, want.in_norm.mean)
        assert np.array_equal(got.in_norm.std, want.in_norm.std)
        assert np.array_equal(got.out_norm.mean, want.out_norm.mean)
        assert np.array_equal(got.out_norm.std, want.out_norm.std)
    assert np.array_equal(loaded["ensemble"].biases, ensemble.biases)
    assert loaded["ensemble"].perturbation == PerturbationConfig(0.5, 0.1)


def test_round_trip_without_perturbation(tmp_path):
    policy, adapted, ensemble = make_state(seed=1)
    path = tmp_path / "ckpt.npz"
    checkpoint.save_checkpoint(path, "pointmass", 0, policy, adapted, 0.0, ensemble)
    loaded = checkpoint.load_checkpoint(path)
    assert loaded["ensemble"].perturbation is None
    assert loaded["extra"] == {}


def test_predictions_survive_round_trip(tmp_path):
    policy, adapted, ensemble = make_state(seed=2)
    path = tmp_path / "ckpt.npz"
    checkpoint.save_checkpoint(path, "point2d", 1, policy, adapted, 1e-3, ensemble)
    loaded = checkpoint.load_checkpoint(path)
    rng = np.random.default_rng(3)
    s = rng.normal(size=2)
    a = rng.normal(size=2)
    for k in range(len(ensemble.models)):
        assert np.array_equal(
            loaded["ensemble"].predict(k, s, a, perturb=False),
            ensemble.predict(k, s, a, perturb=False),
        )
    assert np.array_equal(
        loaded["policy"].mean(s), policy.mean(s)
    )


def test_unsupported_format_version_rejected(tmp_path):
    policy, adapted, ensemble = make_state(seed=4)
    path = tmp_path / "ckpt.npz"
    checkpoint.save_checkpoint(path, "point2d", 1, policy, adapted, 1e-3, ensemble)
    import json

    data = dict(np.load(path))
    meta = json.loads(bytes(data["meta_json"]).decode())
    meta["format_version"] = 999
    data["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    bad = tmp_path / "bad.npz"
    with open(bad, "wb") as fh:
        np.savez(fh, **data)
    with pytest.raises(ConfigurationError):
        checkpoint.load_checkpoint(bad)
