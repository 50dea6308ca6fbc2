import json
import math

import numpy as np
import pytest

from spt_lab.dataio import SynthSpec, synth_dataset
from spt_lab.errors import ConfigError, DivergenceError
from spt_lab.prompts import PromptSet
from spt_lab.tensor import Tensor, precision
from spt_lab.trainer import OptimizerState, TrainConfig, accuracy, adamw_step, lr_schedule, train
from spt_lab.vit import VitConfig, VitModel


def test_lr_schedule_endpoints_and_midpoint():
    base, final = 5e-3, 1e-8
    assert lr_schedule(0, 100, 10, base) == 0.0
    assert lr_schedule(5, 100, 10, base) == pytest.approx(base / 2)
    assert lr_schedule(10, 100, 10, base) == pytest.approx(base)
    assert lr_schedule(100, 100, 10, base) == pytest.approx(final, abs=1e-20)
    assert lr_schedule(55, 100, 10, base) == pytest.approx((base + final) / 2, abs=1e-12)
    lrs = [lr_schedule(s, 100, 10, base) for s in range(10, 101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=3, warmup_epochs=3)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_adamw_single_scalar_step_by_hand():
    with precision(np.float64):
        p = Tensor(np.array(2.0), requires_grad=True)
        state = OptimizerState.for_params([p])
        g, lr, wd = 0.5, 0.1, 0.01
        adamw_step([p], state, lr, wd, grads=[np.array(g)])
    m = 0.1 * g
    v = 0.001 * g * g
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    expected = 2.0 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data == pytest.approx(expected, abs=1e-12)
    assert state.step == 1


def test_adamw_zero_gradient_cases():
    with precision(np.float64):
        p = Tensor(np.array([1.0, -3.0]), requires_grad=True)
        state = OptimizerState.for_params([p])
        adamw_step([p], state, 0.1, 0.0, grads=[np.zeros(2)])
        np.testing.assert_array_equal(p.data, [1.0, -3.0])
        adamw_step([p], state, 0.1, 0.5, grads=[np.zeros(2)])
        np.testing.assert_allclose(p.data, np.array([1.0, -3.0]) * (1 - 0.05), rtol=1e-15)


def test_adamw_rejects_nonfinite_gradient_naming_parameter():
    p = Tensor(np.ones(2), requires_grad=True, name="prompt.3")
    state = OptimizerState.for_params([p])
    with pytest.raises(DivergenceError, match="prompt.3"):
        adamw_step([p], state, 0.1, 0.0, grads=[np.array([1.0, np.nan])])
    np.testing.assert_array_equal(p.data, [1.0, 1.0])
    assert state.step == 0


SMALL = VitConfig(image_size=8, patch_size=4, dim=8, depth=2, heads=2, num_classes=3)


@pytest.fixture(scope="module")
def task():
    ds = synth_dataset(SynthSpec(classes=3, per_class={"train": 16, "val": 4}, image_size=8,
                                 texture_scale=2, sigma_between=0.3, sigma_within=0.1, seed=0))
    return ds.subset("train"), ds.subset("val")


def fresh(seed=0):
    m = VitModel(VitConfig(**SMALL.__dict__), seed=seed)
    ps = PromptSet.from_arrays("deep", [np.random.default_rng(i).normal(size=(2, 8)) for i in range(2)])
    return m, ps


def test_zero_epochs_leaves_everything(task):
    m, ps = fresh()
    before = ps.arrays()
    rep = train(m, ps, task[0], task[1], TrainConfig(epochs=0, warmup_epochs=0))
    assert rep.records == []
    assert all(np.array_equal(a, b) for a, b in zip(before, ps.arrays()))


def test_zero_lr_keeps_metrics_constant(task):
    m, ps = fresh()
    before = ps.arrays()
    rep = train(m, ps, task[0], task[1], TrainConfig(base_lr=0.0, final_lr=0.0, epochs=3, warmup_epochs=1,
                                                          weight_decay=0.0))
    assert len(set(rep.val_acc)) == 1
    assert all(np.array_equal(a, b) for a, b in zip(before, ps.arrays()))
    assert rep.backbone_digest_before == rep.backbone_digest_after


def test_training_logs_learns_and_keeps_backbone(task, tmp_path):
    m, ps = fresh()
    steps = []
    rep = train(m, ps, task[0], task[1], TrainConfig(base_lr=1e-2, epochs=4, warmup_epochs=1, batch_size=8),
                probe_images=task[1].images[:2], log_path=tmp_path / "train.jsonl", step_losses=steps)
    lines = [json.loads(x) for x in (tmp_path / "train.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2, 3, 4]
    assert set(lines[0]) == {"epoch", "lr", "train_loss", "val_acc"}
    assert np.mean(steps[-3:]) < np.mean(steps[:3])
    assert rep.backbone_digest_before == rep.backbone_digest_after
    assert rep.prompts_digest_before != rep.prompts_digest_after
    assert rep.nmi.epochs == [0, 1, 2, 3, 4]


def test_frozen_prompts_hash_identical(task):
    m, ps = fresh()
    ps.set_frozen(True)
    rep = train(m, ps, task[0], task[1], TrainConfig(base_lr=1e-2, epochs=2, warmup_epochs=1))
    assert rep.prompts_digest_before == rep.prompts_digest_after
    assert rep.backbone_digest_before == rep.backbone_digest_after


def test_cached_head_path_matches_full_forward(task):
    """Frozen prompts train the head on cached features; the first loss must equal a full forward pass."""
    from spt_lab.tensor import cross_entropy
    from spt_lab.vit import forward_logits

    m, ps = fresh()
    ps.set_frozen(True)
    cfg = TrainConfig(base_lr=1e-2, epochs=1, warmup_epochs=0, batch_size=8, seed=5)
    idx = np.random.default_rng(5).permutation(len(task[0]))[:8]
    expected = cross_entropy(forward_logits(task[0].images[idx], m, ps), task[0].labels[idx]).item()
    steps = []
    train(m, ps, task[0], None, cfg, step_losses=steps)
    assert steps[0] == pytest.approx(expected, rel=1e-6)


def test_determinism_float64(task):
    runs = []
    for _ in range(2):
        with precision(np.float64):
            m, ps = fresh()
            steps = []
            train(m, ps, task[0], task[1], TrainConfig(base_lr=1e-2, epochs=2, warmup_epochs=1,
                                                       augment="resize_crop_flip", seed=3), step_losses=steps)
        runs.append(steps)
    assert runs[0] == runs[1]


def test_divergence_aborts_with_partial_report(task, tmp_path):
    m, ps = fresh()

    def poison(epoch, model, prompts):
        model.head_w.data[:] = np.nan

    with pytest.raises(DivergenceError) as info:
        train(m, ps, task[0], task[1], TrainConfig(epochs=3, warmup_epochs=1), log_path=tmp_path / "t.jsonl",
              on_epoch=poison)
    report = info.value.report
    assert report.aborted and len(report.records) == 1
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 1


def test_accuracy_of_zero_head_is_class_zero_rate(task):
    m, _ = fresh()
    m.reset_head(3, std=0)
    val = task[1]
    assert accuracy(m, None, val.images, val.labels) == pytest.approx(np.mean(val.labels == 0))
