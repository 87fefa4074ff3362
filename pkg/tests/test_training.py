import math

import numpy as np
import pytest

from ruladapt.data import stack_windows
from ruladapt.model import toy_model_config
from ruladapt.synthetic import make_toy_domains
from ruladapt.training import (
    Adam,
    TrainingAbort,
    epoch_plan,
    init_state,
    load_train_checkpoint,
    lr_schedule,
    make_batches,
    make_run_config,
    run_config_from_dict,
    run_experiment,
    save_train_checkpoint,
    steps_per_epoch,
    train,
    train_step,
    variant_weights,
)


def toy_config(variant="lamanet", **overrides):
    defaults = dict(
        source_subset="toy-src", target_subset="toy-tgt",
        window=16, epochs=2, batch_size=32, rc=60.0,
        model=toy_model_config(), seeds=(1,),
    )
    defaults.update(overrides)
    return make_run_config("toy-src", "toy-tgt", variant, **{
        k: v for k, v in defaults.items() if k not in ("source_subset", "target_subset")
    })


@pytest.fixture(scope="module")
def toy_domains():
    return make_toy_domains(seed=1)


# ---------------------------------------------------------------------------
# config plumbing

def test_variant_weight_columns():
    assert variant_weights("lamanet").lambda_m == 0.35
    assert variant_weights("lamanet").lambda_r == 0.2
    assert variant_weights("mmd").lambda_m == 0.2
    assert variant_weights("mmd").lambda_r == 0.0
    assert variant_weights("no_da").lambda_m == 0.0
    with pytest.raises(ValueError):
        variant_weights("bogus")


def test_run_config_validation():
    with pytest.raises(ValueError):
        toy_config(batch_size=33)
    with pytest.raises(ValueError):
        toy_config(variant="bogus")
    with pytest.raises(ValueError):
        toy_config(window=40)  # model window stays 16


def test_run_config_roundtrip_and_unknown_key_rejection():
    config = toy_config()
    again = run_config_from_dict(config.to_dict())
    assert again == config and again.hash == config.hash
    bad = config.to_dict() | {"unknown_field": 1}
    with pytest.raises(ValueError, match="unknown"):
        run_config_from_dict(bad)
    bad_nested = config.to_dict()
    bad_nested["model"]["bogus"] = 2
    with pytest.raises(ValueError, match="unknown"):
        run_config_from_dict(bad_nested)


# ---------------------------------------------------------------------------
# schedule

def test_lr_constant_before_decay_start():
    assert lr_schedule(50, 1e-3, 0.95, 100, steps_per_epoch=540) == 1e-3


def test_lr_drops_at_first_epoch_boundary_after_start():
    assert lr_schedule(540, 1e-3, 0.95, 100, steps_per_epoch=540) == pytest.approx(9.5e-4)
    assert lr_schedule(539, 1e-3, 0.95, 100, steps_per_epoch=540) == 1e-3


def test_lr_gamma_one_is_constant():
    for it in (0, 100, 5000):
        assert lr_schedule(it, 1e-3, 1.0, 100, steps_per_epoch=50) == 1e-3


def test_lr_monotone_nonincreasing():
    values = [lr_schedule(i, 1e-3, 0.9, 30, steps_per_epoch=25) for i in range(300)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_rejects_bad_gamma():
    with pytest.raises(ValueError):
        lr_schedule(0, 1e-3, 1.5, 100, steps_per_epoch=10)


# ---------------------------------------------------------------------------
# batching

def test_make_batches_halves_and_labels(toy_domains):
    source, target = toy_domains
    batches = list(make_batches(source, target, 32, np.random.default_rng(0)))
    expected = steps_per_epoch(len(source.train_windows), len(target.train_windows), 32)
    assert len(batches) == expected
    src_half, tgt_half = batches[0]
    assert len(src_half) == len(tgt_half) == 16
    assert all(w.rul_scaled is not None for w in src_half)
    assert all(w.rul_scaled is None for w in tgt_half)


def test_make_batches_deterministic_per_seed(toy_domains):
    source, target = toy_domains

    def ends(seed):
        return [
            [w.end_cycle for w in src]
            for src, _ in make_batches(source, target, 32, np.random.default_rng(seed))
        ]

    assert ends(5) == ends(5)
    assert ends(5) != ends(6)


def test_make_batches_rejects_odd_batch(toy_domains):
    source, target = toy_domains
    with pytest.raises(ValueError):
        next(make_batches(source, target, 33, np.random.default_rng(0)))


def test_epoch_plan_resamples_smaller_pool():
    rng = np.random.default_rng(0)
    src, tgt = epoch_plan(100, 40, 10, rng)
    assert len(src) == len(tgt) == 100
    assert sorted(src.tolist()) == list(range(100))  # larger pool seen exactly once
    assert set(tgt.tolist()) <= set(range(40))


# ---------------------------------------------------------------------------
# optimizer

def test_adam_moves_against_gradient():
    from ruladapt.autodiff import Tensor

    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam = Adam({"p": p})
    p.grad = np.array([0.5, -0.5])
    before = p.data.copy()
    adam.step({"p": p}, lr=0.01)
    assert p.data[0] < before[0] and p.data[1] > before[1]


def test_adam_leaves_gradient_free_params_in_place():
    from ruladapt.autodiff import Tensor

    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    adam = Adam({"p": p, "q": q})
    p.grad = np.array([1.0])
    adam.step({"p": p, "q": q}, lr=0.1)
    assert q.data[0] == 2.0  # exactly untouched


# ---------------------------------------------------------------------------
# stepping, gating, determinism

def test_no_da_step_touches_only_rul(toy_domains):
    source, target = toy_domains
    config = toy_config("no_da")
    state = init_state(config, 1)
    state.steps_per_epoch = 10
    src_X, src_y = stack_windows(source.train_windows, range(16))
    tgt_X, _ = stack_windows(target.train_windows, range(16))
    record = train_step(state, src_X, src_y, tgt_X)
    assert set(record) >= {"iteration", "lr", "total", "rul"}
    assert "discrepancy" not in record and "recon" not in record


def test_da_only_parameters_have_zero_gradient_before_gate(toy_domains):
    source, target = toy_domains
    config = toy_config("lamanet")
    state = init_state(config, 1)
    state.steps_per_epoch = 10
    src_X, src_y = stack_windows(source.train_windows, range(16))
    tgt_X, _ = stack_windows(target.train_windows, range(16))
    recon_names = [n for n in state.model.params if n.startswith("recon.")]
    recon_before = {n: state.model.params[n].data.copy() for n in recon_names}
    for _ in range(5):  # iterations 0..4, all below da_start=200
        train_step(state, src_X, src_y, tgt_X)
        for name in recon_names:
            grad = state.model.params[name].grad
            assert grad is None or not np.any(grad)
    for name in recon_names:  # zero gradient + zero moments => frozen
        np.testing.assert_array_equal(state.model.params[name].data, recon_before[name])


def test_gate_opens_at_da_start(toy_domains):
    source, target = toy_domains
    config = toy_config("lamanet", da_start=3)
    state = init_state(config, 1)
    state.steps_per_epoch = 10
    src_X, src_y = stack_windows(source.train_windows, range(16))
    tgt_X, _ = stack_windows(target.train_windows, range(16))
    for _ in range(3):
        record = train_step(state, src_X, src_y, tgt_X)
        assert "recon" not in record
    record = train_step(state, src_X, src_y, tgt_X)  # iteration 3: gate open
    assert {"discrepancy", "recon", "smooth"} <= set(record)
    grads = [state.model.params[n].grad for n in state.model.params if n.startswith("recon.")]
    assert any(g is not None and np.any(g) for g in grads)


def test_loss_trajectory_bitwise_deterministic(toy_domains):
    source, target = toy_domains

    def losses(seed):
        state = init_state(toy_config("lamanet", epochs=50), seed)
        train(state, source, target, max_iterations=10)
        return [r["total"] for r in state.history]

    assert losses(1) == losses(1)  # bitwise: floats compared exactly


def test_toy_training_reduces_loss(toy_domains):
    source, target = toy_domains
    state = init_state(toy_config("no_da", epochs=50), 1)
    train(state, source, target, max_iterations=100)
    first = state.history[0]["total"]
    last10 = np.mean([r["total"] for r in state.history[-10:]])
    assert last10 < first


def test_training_abort_carries_term_dump(toy_domains):
    source, target = toy_domains
    config = toy_config("no_da")
    state = init_state(config, 1)
    state.steps_per_epoch = 10
    state.model.params["head.b"].data[:] = np.nan
    src_X, src_y = stack_windows(source.train_windows, range(16))
    tgt_X, _ = stack_windows(target.train_windows, range(16))
    with pytest.raises(TrainingAbort, match="per-term"):
        train_step(state, src_X, src_y, tgt_X)


# ---------------------------------------------------------------------------
# checkpoint resume

def test_checkpoint_resume_is_bitwise(tmp_path, toy_domains):
    source, target = toy_domains
    config = toy_config("lamanet", epochs=50)

    state = init_state(config, 1)
    train(state, source, target, max_iterations=7)  # mid-epoch
    save_train_checkpoint(tmp_path / "ckpt.bin", state)

    resumed = load_train_checkpoint(tmp_path / "ckpt.bin", config)
    train(resumed, source, target, max_iterations=8)
    train(state, source, target, max_iterations=8)

    assert state.history[-1]["total"] == resumed.history[-1]["total"]
    for name, p in state.model.params.items():
        np.testing.assert_array_equal(p.data, resumed.model.params[name].data)


def test_checkpoint_rejects_other_config(tmp_path, toy_domains):
    source, target = toy_domains
    config = toy_config("lamanet")
    state = init_state(config, 1)
    train(state, source, target, max_iterations=2)
    save_train_checkpoint(tmp_path / "ckpt.bin", state)
    other = toy_config("mmd")
    with pytest.raises(ValueError, match="hash"):
        load_train_checkpoint(tmp_path / "ckpt.bin", other)


# ---------------------------------------------------------------------------
# experiment orchestration

def test_run_experiment_emits_full_report(tmp_path, toy_domains):
    source, target = toy_domains
    config = toy_config("no_da", epochs=1, seeds=(1, 2))
    report = run_experiment(
        config, source, target, out_dir=tmp_path / "out", seeds=(1, 2),
        write_latents=False,
    )
    assert len(report.rmse_per_seed) == 2
    assert report.n_test_engines == len(target.test_windows)
    assert math.isfinite(report.rmse_mean) and math.isfinite(report.rmse_sd)
    for seed in (1, 2):
        run_dir = tmp_path / "out" / str(seed)
        for name in ("report.json", "train_log.csv", "checkpoint.bin"):
            assert (run_dir / name).exists()
    assert (tmp_path / "out" / "report.json").exists()
    assert (tmp_path / "out" / "metrics.csv").exists()
