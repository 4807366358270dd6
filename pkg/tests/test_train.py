import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from affect_forge import checkpoint
from affect_forge.autodiff import Tensor
from affect_forge.checkpoint import CheckpointError
from affect_forge.data import synthesize
from affect_forge.model import ModelConfig, build_model
from affect_forge.train import (AdamState, InvalidStateError, NonFiniteLossError, StagePlan, TrainConfig, TrainState,
                                adam_step, clip_grad_norm, load_checkpoint, load_into, pretrain_backbone, run_stage,
                                save_checkpoint)
import affect_forge.train as train_mod

CFG = TrainConfig(batch_size=8)


def tiny_model(backbone="hrnet_lite", seed=0, mode="MTL"):
    return build_model(ModelConfig.for_mode(mode, backbone=backbone, input_size=32), seed)


@pytest.fixture(scope="module")
def samples():
    return synthesize(16, "MTL", seed=0, size=32)


def snapshot(model, prefix=""):
    return {n: t.data.copy() for n, t in model.named_tensors().items() if n.startswith(prefix)}


# --- Adam

def test_adam_zero_gradient_is_a_no_op():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    state = AdamState()
    adam_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.array([0.5, -3.0, 1e-2])
    adam_step({"p": p}, AdamState(lr=5e-4))
    np.testing.assert_allclose(np.abs(p.data), 5e-4 * np.abs(p.grad) / (np.abs(p.grad) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(p.data, -5e-4 * np.sign(p.grad), rtol=1e-5)


def test_adam_converges_on_quadratic():
    # at lr 5e-4 a hundred steps move each coordinate at most 0.05, so use a larger rate
    theta = Tensor(np.zeros(2), requires_grad=True)
    c = np.array([1.0, -1.0])
    state = AdamState(lr=0.05)
    for _ in range(100):
        theta.grad = 2.0 * (theta.data - c)
        adam_step({"theta": theta}, state)
    assert np.linalg.norm(theta.data - c) < 1e-2


@given(st.integers(0, 10 ** 6), st.integers(1, 5))
def test_adam_scale_consistent(seed, steps):
    rng = np.random.default_rng(seed)
    grads = [rng.uniform(1e-3, 1.0, 4) * rng.choice([-1, 1], 4) for _ in range(steps)]
    results = []
    for scale in (1.0, 10.0):
        p = Tensor(np.zeros(4), requires_grad=True)
        state = AdamState(eps=1e-12)
        for g in grads:
            p.grad = scale * g
            adam_step({"p": p}, state)
        results.append(p.data.copy())
    np.testing.assert_allclose(results[1], results[0], rtol=1e-6)


def test_adam_missing_gradient_and_frozen():
    a, b = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
    with pytest.raises(InvalidStateError):
        adam_step({"a": a, "b": b}, AdamState())
    a.grad = np.array([1.0])
    adam_step({"a": a, "b": b}, AdamState(), frozen={"b"})
    assert b.data[0] == 2.0 and a.data[0] != 1.0


def test_clip_grad_norm():
    a, b = Tensor([0.0, 0.0]), Tensor([0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


# --- stage plans

def test_stage_plan_invariants():
    assert StagePlan.default("frozen_backbone", 3).frozen_prefixes == ("backbone.",)
    assert StagePlan.default("joint", 3).frozen_prefixes == ()
    with pytest.raises(ValueError):
        StagePlan("joint", 1, ("backbone.",))
    with pytest.raises(ValueError):
        StagePlan("frozen_backbone", 1, ())
    with pytest.raises(ValueError):
        StagePlan("warmup", 1)


# --- run_stage

def test_zero_epochs_leaves_model_unchanged(samples):
    model = tiny_model()
    before = snapshot(model)
    report = run_stage(model, StagePlan.default("joint", 0), samples, cfg=CFG)
    assert report.epochs == []
    assert all(before[k].tobytes() == v.tobytes() for k, v in snapshot(model).items())


def test_frozen_backbone_bitwise_unchanged(samples):
    model = tiny_model("resnet_lite")
    before = snapshot(model)
    run_stage(model, StagePlan.default("frozen_backbone", 2), samples, samples, CFG)
    after = snapshot(model)
    assert all(before[k].tobytes() == after[k].tobytes() for k in before if k.startswith("backbone."))
    assert any(before[k].tobytes() != after[k].tobytes() for k in before if not k.startswith("backbone."))
    assert all(p.requires_grad for _, p in model.named_parameters())  # flags restored


def test_run_stage_is_deterministic(samples):
    runs = []
    for _ in range(2):
        model = tiny_model()
        runs.append(run_stage(model, StagePlan.default("joint", 2), samples, cfg=CFG, seed=4).losses)
    assert runs[0] == runs[1]


def test_resume_matches_uninterrupted_run(samples, tmp_path):
    plan = StagePlan.default("joint", 4)
    full = tiny_model()
    full_losses = run_stage(full, plan, samples, cfg=CFG, seed=2).losses

    part = tiny_model()
    path = tmp_path / "mid.ckpt"

    def save_at_two(state, record):
        if state.epoch == 2:
            save_checkpoint(part, state, path)

    run_stage(part, StagePlan.default("joint", 2), samples, cfg=CFG, seed=2, on_epoch_end=save_at_two)
    resumed, state, _ = load_checkpoint(path)
    assert state.epoch == 2 and state.global_step == 4
    tail = run_stage(resumed, plan, samples, cfg=CFG, seed=2, state=state).losses
    np.testing.assert_allclose(tail, full_losses[2:], rtol=0, atol=1e-12)
    assert state.global_step == 8
    final = snapshot(full)
    assert all(np.array_equal(final[k], v) for k, v in snapshot(resumed).items())


def test_nan_loss_aborts_with_batch_index(samples, monkeypatch):
    real = train_mod.batch_loss
    calls = []

    def poisoned(model, batch, cfg, weights):
        bundle = real(model, batch, cfg, weights)
        calls.append(1)
        if len(calls) == 2:
            bundle.total = bundle.total * float("nan")
        return bundle

    monkeypatch.setattr(train_mod, "batch_loss", poisoned)
    state = TrainState("joint")
    with pytest.raises(NonFiniteLossError) as err:
        run_stage(tiny_model(), StagePlan.default("joint", 3), samples, cfg=CFG, state=state)
    assert err.value.batch_index == 1 and err.value.epoch == 0
    assert state.global_step == 1


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        run_stage(tiny_model(), StagePlan.default("joint", 1), [], cfg=CFG)


def test_csv_log_rows(samples, tmp_path):
    log = tmp_path / "log.csv"
    run_stage(tiny_model(), StagePlan.default("joint", 2), samples, samples, CFG, log_path=log)
    rows = list(csv.DictReader(log.open()))
    assert list(rows[0]) == ["epoch", "stage", "train_loss", "ccc_v", "ccc_a", "f1_expr", "f1_au", "mtl_score"]
    assert [r["epoch"] for r in rows] == ["1", "2"] and all(r["stage"] == "joint" for r in rows)
    assert all(float(r["mtl_score"]) == pytest.approx(
        (float(r["ccc_v"]) + float(r["ccc_a"])) / 2 + float(r["f1_expr"]) + float(r["f1_au"])) for r in rows)


# --- pretraining

def test_pretrain_then_freeze_keeps_pretrained_weights():
    model = tiny_model("resnet_lite", mode="LSD")
    data = synthesize(16, "LSD", 1, 32)
    start = snapshot(model, "backbone.")
    state = TrainState("pretrain_backbone")
    pretrain_backbone(model, data, 1, cfg=CFG, state=state)
    trained = snapshot(model, "backbone.")
    assert any(start[k].tobytes() != trained[k].tobytes() for k in start)
    assert state.global_step == 2 and state.stage == "pretrain_backbone"
    state = TrainState("frozen_backbone", 0, state.global_step, CFG.new_optimizer())
    run_stage(model, StagePlan.default("frozen_backbone", 2), data, cfg=TrainConfig(batch_size=8, mode="LSD"),
              state=state)
    assert all(trained[k].tobytes() == v.tobytes() for k, v in snapshot(model, "backbone.").items())
    assert state.global_step == 6
    assert not any(n.startswith("head.") for n in model.named_tensors())


def test_pretrain_requires_latents():
    data = synthesize(4, "LSD", 1, 32)
    data[0].latent = None
    with pytest.raises(ValueError):
        pretrain_backbone(tiny_model(), data, 1)


@pytest.mark.slow
def test_geometry_pretrain_loss_halves():
    model = tiny_model("hrnet_lite")
    report = pretrain_backbone(model, synthesize(500, "LSD", 0, 32), 20, seed=0)
    losses = report.losses
    assert losses[-1] <= 0.5 * losses[0], losses


# --- checkpoints

def test_save_load_save_byte_identical(samples, tmp_path):
    model = tiny_model()
    state = TrainState("joint")
    run_stage(model, StagePlan.default("joint", 1), samples, cfg=CFG, state=state)
    save_checkpoint(model, state, tmp_path / "a.ckpt", {"run.mode": "MTL"})
    loaded, st2, cfg = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg["run.mode"] == "MTL" and st2.optimizer.t == state.optimizer.t
    save_checkpoint(loaded, st2, tmp_path / "b.ckpt", {"run.mode": "MTL"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k, v in snapshot(model).items():
        assert v.tobytes() == loaded.named_tensors()[k].data.tobytes()


def test_truncated_checkpoint_rejected(tmp_path):
    model = tiny_model()
    save_checkpoint(model, None, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_failed_load_leaves_model_untouched():
    model = tiny_model()
    before = snapshot(model)
    tensors = {f"model.{k}": v + 1.0 for k, v in before.items()}
    tensors["model.pos_embedding"] = np.zeros((3, 3))
    with pytest.raises(CheckpointError, match="shape"):
        load_into(model, tensors)
    tensors = {f"model.{k}": v + 1.0 for k, v in before.items()}
    tensors["model.extra"] = np.zeros(1)
    with pytest.raises(CheckpointError, match="unknown"):
        load_into(model, tensors)
    assert all(before[k].tobytes() == v.tobytes() for k, v in snapshot(model).items())


def test_checkpoint_format_errors(tmp_path):
    good = checkpoint.encode({"a": "1"}, {"x": np.arange(3.0)})
    assert checkpoint.decode(good)[1]["x"].tolist() == [0, 1, 2]
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.decode(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.decode(good + b"\0")
    stray = checkpoint.encode({}, {"model.x": np.zeros(1), "weird": np.zeros(1)})
    (tmp_path / "s.ckpt").write_bytes(stray)
    with pytest.raises(CheckpointError, match="unknown"):
        load_checkpoint(tmp_path / "s.ckpt")


@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=8), st.text("0123456789 ,.-", max_size=10),
                       max_size=5),
       st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), max_size=4))
def test_checkpoint_codec_round_trip(config, shapes):
    rng = np.random.default_rng(len(shapes))
    tensors = {f"t{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
    cfg, back = checkpoint.decode(checkpoint.encode(config, tensors))
    assert cfg == config
    assert back.keys() == tensors.keys()
    assert all(back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes() for k in tensors)


@pytest.mark.slow
def test_pretrained_backbone_beats_random_init_under_freeze():
    from affect_forge.train import evaluate_model

    def frozen_f1(pretrain, seed):
        model = build_model(ModelConfig.for_mode("LSD", backbone="hrnet_lite", input_size=32), seed)
        if pretrain:
            pretrain_backbone(model, synthesize(500, "LSD", 100 + seed, 32), 5, seed)
        run_stage(model, StagePlan.default("frozen_backbone", 5), synthesize(256, "LSD", 200 + seed, 32), None,
                  TrainConfig(mode="LSD"), seed)
        return evaluate_model(model, synthesize(256, "LSD", 300 + seed, 32), "LSD").lsd_f1

    wins = sum(frozen_f1(True, s) > frozen_f1(False, s) for s in range(3))
    assert wins >= 2
