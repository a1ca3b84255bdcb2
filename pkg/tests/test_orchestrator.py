import os

import numpy as np
import pytest

from mbmpo import orchestrator
from mbmpo.checkpoint import load_checkpoint
from mbmpo.dynamics import TrainConfig
from mbmpo.errors import PreconditionError
from mbmpo.orchestrator import PROGRESS_COLUMNS, IterationRecord, RunConfig


def tiny_config(**overrides):
    """Smallest run that still exercises every stage of the loop."""
    base = dict(
        env_id="point2d",
        n_models=2,
        meta_steps_per_iter=2,
        real_transitions_per_iter=120,
        imaginary_transitions=240,
        n_iterations=2,
        eval_episodes=2,
        model_hidden=(16,),
        policy_hidden=(8,),
        model_train=TrainConfig(max_epochs=5),
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


def test_config_validation():
    with pytest.raises(PreconditionError):
        RunConfig(n_models=0)
    with pytest.raises(PreconditionError):
        RunConfig(alpha=-1.0)
    with pytest.raises(PreconditionError):
        RunConfig(imaginary_transitions=0)


def test_real_budget_must_divide_horizon():
    # point2d horizon is 30; 100 is not a multiple
    with pytest.raises(PreconditionError):
        orchestrator.run(tiny_config(real_transitions_per_iter=100))


def test_sample_ledger_exact():
    cfg = tiny_config(n_iterations=3)
    _, records, _, _ = orchestrator.run(cfg)
    for record in records:
        assert record.real_env_samples_total == (record.iteration + 1) * cfg.real_transitions_per_iter
        assert record.buffer_size == record.real_env_samples_total


def test_record_fields_populated():
    cfg = tiny_config()
    policy, records, adapted, ensemble = orchestrator.run(cfg)
    assert len(records) == cfg.n_iterations
    assert len(adapted) == cfg.n_models
    assert len(ensemble.models) == cfg.n_models
    for record in records:
        assert len(record.model_val_losses) == cfg.n_models
        assert np.isfinite(record.avg_return)
        assert record.std_return >= 0.0
        assert 0 <= record.trpo_accepted <= cfg.meta_steps_per_iter
        if record.trpo_accepted:
            assert record.max_accepted_kl <= cfg.trpo.kl_bound + 1e-10
            assert record.min_accepted_improvement >= 0.0


def test_progress_csv_schema_and_checkpoints(tmp_path):
    cfg = tiny_config(checkpoint_every=1)
    orchestrator.run(cfg, out_dir=str(tmp_path))
    lines = (tmp_path / "progress.csv").read_text().strip().split("\n")
    assert lines[0] == ",".join(PROGRESS_COLUMNS)
    assert len(lines) == 1 + cfg.n_iterations
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert len(cells) == len(PROGRESS_COLUMNS)
        assert int(cells[0]) == i
        float(cells[2])  # avg_return parses back
    for i in range(cfg.n_iterations):
        assert os.path.exists(tmp_path / f"checkpoint_{i:04d}.npz")
    loaded = load_checkpoint(tmp_path / f"checkpoint_{cfg.n_iterations - 1:04d}.npz")
    assert loaded["env_id"] == "point2d"
    assert loaded["iteration"] == cfg.n_iterations - 1


def test_same_seed_runs_identical(tmp_path):
    cfg = tiny_config(seed=42)
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    orchestrator.run(cfg, out_dir=str(dir_a))
    orchestrator.run(cfg, out_dir=str(dir_b))
    assert (dir_a / "progress.csv").read_bytes() == (dir_b / "progress.csv").read_bytes()


def test_different_seeds_differ():
    _, rec_a, _, _ = orchestrator.run(tiny_config(seed=1, n_iterations=1))
    _, rec_b, _, _ = orchestrator.run(tiny_config(seed=2, n_iterations=1))
    assert rec_a[0].avg_return != rec_b[0].avg_return


def test_alpha_zero_runs_without_adaptation():
    cfg = tiny_config(alpha=0.0, n_iterations=1)
    policy, records, adapted, _ = orchestrator.run(cfg)
    # with alpha=0 the adapted parameters are the pre-update meta-parameters
    assert records[0].mean_inner_kl == pytest.approx(0.0, abs=1e-12)


def test_evaluate_requires_episodes():
    from mbmpo.envs import make_env
    from mbmpo.policy import GaussianPolicy

    rng = np.random.default_rng(0)
    policy = GaussianPolicy.initial(2, 2, rng, hidden=(4,))
    with pytest.raises(PreconditionError):
        orchestrator.evaluate(policy, make_env("point2d"), 0, rng)


def test_csv_row_round_trips_floats():
    record = IterationRecord(
        iteration=3,
        real_env_samples_total=1800,
        avg_return=-13.123456789012345,
        std_return=2.5,
        model_val_losses=[1e-5, 2e-5],
        mean_inner_kl=3.3e-4,
        trpo_accepted=5,
        buffer_size=1800,
        max_accepted_kl=0.009,
        min_accepted_improvement=1e-6,
    )
    row = record.csv_row()
    assert float(row[2]) == record.avg_return
    assert float(row[4]) == float(np.mean(record.model_val_losses))
