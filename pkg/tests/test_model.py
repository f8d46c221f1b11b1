import math
import subprocess
import sys
import urllib.error

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pcos_screen.dataset import ArrayData
from pcos_screen.errors import CheckpointError, ConfigError, PretrainedWeightsError, ShapeError, TrainingDivergedError
from pcos_screen.model import (
    BackboneSpec,
    TrainConfig,
    binary_cross_entropy,
    build_model,
    evaluate_split,
    load_checkpoint,
    predict,
    read_history,
    save_checkpoint,
    train,
)
from pcos_screen.synthetic import separable_arrays

TINY = BackboneSpec("tiny_test", input_size=16)


def _zero_model(spec=TINY):
    model = build_model(spec)
    with torch.no_grad():
        for p in model.module.parameters():
            p.zero_()
    return model


def test_tiny_forward_range():
    model = build_model(TINY, seed=1)
    probs = predict(model, np.zeros((3, 16, 16, 3), np.float32))
    assert len(probs) == 3
    assert all(0.0 < p < 1.0 for p in probs)
    n_layers = sum(isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)) for m in model.module.modules())
    assert n_layers <= 5


@pytest.mark.slow
def test_densenet201_output_shape():
    model = build_model(BackboneSpec("densenet201", pretrained=False))
    assert len(predict(model, np.random.default_rng(0).random((4, 224, 224, 3)))) == 4


def test_resnet50_output_shape_small_input():
    model = build_model(BackboneSpec("resnet50", pretrained=False, input_size=64))
    assert len(predict(model, np.zeros((2, 64, 64, 3), np.float32))) == 2


def test_unavailable_pretrained_weights_raise(monkeypatch):
    import torchvision.models._api as api

    def offline(*a, **k):
        raise urllib.error.URLError("offline")

    monkeypatch.setattr(api, "load_state_dict_from_url", offline)
    with pytest.raises(PretrainedWeightsError, match="unavailable"):
        build_model(BackboneSpec("resnet50", pretrained=True))


_SCRIPT = """
import numpy as np
from pcos_screen.model import BackboneSpec, build_model, predict
m = build_model(BackboneSpec('tiny_test', input_size=16), seed=7)
x = np.linspace(0, 1, 2 * 16 * 16 * 3, dtype=np.float32).reshape(2, 16, 16, 3)
print([float(p).hex() for p in predict(m, x)])
"""


def test_seeded_build_identical_across_processes():
    runs = [subprocess.run([sys.executable, "-c", _SCRIPT], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1]
    m = build_model(TINY, seed=7)
    x = np.linspace(0, 1, 2 * 16 * 16 * 3, dtype=np.float32).reshape(2, 16, 16, 3)
    assert runs[0].strip() == str([float(p).hex() for p in predict(m, x)])


def test_predict_empty_and_shape_errors():
    model = build_model(TINY)
    assert predict(model, np.zeros((0, 16, 16, 3), np.float32)) == []
    with pytest.raises(ShapeError):
        predict(model, np.zeros((1, 8, 8, 3), np.float32))


def test_predict_batch_partition_invariance():
    model = build_model(TINY, seed=2)
    x = np.random.default_rng(0).random((5, 16, 16, 3)).astype(np.float32)
    together = predict(model, x)
    apart = predict(model, x[:2]) + predict(model, x[2:3]) + predict(model, x[3:])
    np.testing.assert_allclose(together, apart, atol=1e-6)


def test_predict_matches_hand_computed_forward():
    model = build_model(TINY)
    conv1, conv2 = model.module.features[0], model.module.features[2]
    head = model.module.head
    head_w = np.array([0.5, -0.25, 0.1, 0.0, 0.3, -0.2, 0.05, 0.4])
    with torch.no_grad():
        conv1.weight.fill_(0.1)
        conv1.bias.fill_(-0.05)
        conv2.weight.fill_(0.02)
        conv2.bias.fill_(0.01)
        head.weight.copy_(torch.tensor(head_w[None], dtype=torch.float32))
        head.bias.fill_(0.3)
    c = 0.6
    a1 = max(0.0, 3 * 3 * 3 * 0.1 * c - 0.05)  # unpadded 3x3 conv over 3 channels
    a2 = max(0.0, 3 * 3 * 8 * 0.02 * a1 + 0.01)
    logit = float(np.float32(head_w).astype(np.float64).sum()) * a2 + 0.3
    expected = 1.0 / (1.0 + math.exp(-logit))
    got = predict(model, np.full((1, 16, 16, 3), c, np.float32))[0]
    assert got == pytest.approx(expected, abs=1e-6)


def test_bce_soft_label_affinity():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, 500)
    yi, yj = rng.integers(0, 2, 500), rng.integers(0, 2, 500)
    lam = rng.random(500)
    mixed = binary_cross_entropy(p, lam * yi + (1 - lam) * yj)
    split = lam * binary_cross_entropy(p, yi) + (1 - lam) * binary_cross_entropy(p, yj)
    np.testing.assert_allclose(mixed, split, atol=1e-9)


def test_head_gradient_matches_finite_differences():
    model = build_model(TINY, seed=3)
    module = model.module.double().eval()
    x = torch.from_numpy(np.random.default_rng(1).random((6, 3, 16, 16)))
    y = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0, 0.3], dtype=torch.float64)

    def loss():
        return F.binary_cross_entropy_with_logits(module(x), y)

    module.zero_grad()
    loss().backward()
    analytic = module.head.weight.grad.clone()[0]
    h = 1e-6
    for k in range(analytic.numel()):
        with torch.no_grad():
            module.head.weight[0, k] += h
            up = loss().item()
            module.head.weight[0, k] -= 2 * h
            down = loss().item()
            module.head.weight[0, k] += h
        numeric = (up - down) / (2 * h)
        assert abs(numeric - analytic[k].item()) <= 1e-4 * max(abs(numeric), 1e-8) + 1e-10


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=5, patience=6)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    assert TrainConfig.for_backbone("resnet50").max_epochs == 67
    assert TrainConfig.for_backbone("densenet201").patience == 15


# -- training -------------------------------------------------------------------


def _balanced(n, size=16, seed=0):
    return separable_arrays(n, size=size, seed=seed)


def test_constant_val_loss_stops_after_patience_plus_one(tmp_path):
    model = _zero_model()
    data = _balanced(8)
    cfg = TrainConfig(batch_size=8, max_epochs=20, patience=3, learning_rate=1e-3)
    history, _ = train(model, data, _balanced(4, seed=1), cfg, tmp_path)
    assert len(history.epochs) == 4
    assert history.stopped_early
    assert {e.val_loss for e in history.epochs} == {math.log(2)}


def test_train_learns_separable_set(tmp_path):
    data = separable_arrays(120, size=16, seed=0)
    tr = ArrayData(data.images[:96], data.labels[:96])
    va = ArrayData(data.images[96:], data.labels[96:])
    cfg = TrainConfig(max_epochs=30, patience=30, learning_rate=1e-3, seed=0)
    history, ckpt = train(build_model(TINY, seed=0), tr, va, cfg, tmp_path)
    assert history.epochs[-1].val_accuracy >= 0.95
    best = history.best
    assert all(best.val_loss <= e.val_loss for e in history.epochs)
    losses = history.checkpoint_losses()
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert ckpt.is_file() and (tmp_path / "checkpoints" / "best.txt").is_file()
    table = read_history(tmp_path / "history.csv")
    assert [r.epoch_index for r in table] == list(range(1, len(history.epochs) + 1))


def test_train_with_mixing_runs_and_is_deterministic(tmp_path):
    data = separable_arrays(40, size=16, seed=0)
    tr, va = ArrayData(data.images[:32], data.labels[:32]), ArrayData(data.images[32:], data.labels[32:])
    cfg = TrainConfig(max_epochs=3, patience=3, learning_rate=1e-3, mixup_alpha=0.25, cutmix_alpha=0.4, seed=4)
    h1, _ = train(build_model(TINY, seed=4), tr, va, cfg, tmp_path / "a")
    h2, _ = train(build_model(TINY, seed=4), tr, va, cfg, tmp_path / "b")
    assert h1.epochs == h2.epochs


def test_train_rejects_empty_split(tmp_path):
    empty = ArrayData(np.zeros((0, 16, 16, 3)), [])
    with pytest.raises(ConfigError):
        train(build_model(TINY), _balanced(4), empty, TrainConfig(max_epochs=1, patience=1), tmp_path)


def test_train_divergence_reports_epoch(tmp_path):
    bad = _balanced(4)
    bad.images[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(build_model(TINY), bad, _balanced(4), TrainConfig(max_epochs=2, patience=1), tmp_path)
    assert info.value.epoch == 1


def test_history_flushed_each_epoch(tmp_path):
    def interrupt(rec):
        if rec.epoch_index == 2:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(build_model(TINY), _balanced(8), _balanced(4, seed=1),
              TrainConfig(max_epochs=10, patience=10, learning_rate=1e-3), tmp_path, on_epoch=interrupt)
    assert len(read_history(tmp_path / "history.csv")) == 2


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(TINY, seed=5)
    x = np.random.default_rng(3).random((4, 16, 16, 3)).astype(np.float32)
    path = save_checkpoint(model, tmp_path / "m.pt")
    loaded = load_checkpoint(path)
    np.testing.assert_allclose(predict(loaded, x), predict(model, x), atol=1e-6)
    assert loaded.spec == model.spec


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="missing.pt"):
        load_checkpoint(tmp_path / "missing.pt")
    (tmp_path / "junk.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="junk.pt"):
        load_checkpoint(tmp_path / "junk.pt")


def test_loaded_checkpoint_reproduces_best_val_loss(tmp_path):
    data = separable_arrays(60, size=16, seed=2)
    tr, va = ArrayData(data.images[:48], data.labels[:48]), ArrayData(data.images[48:], data.labels[48:])
    history, ckpt = train(build_model(TINY, seed=1), tr, va,
                          TrainConfig(max_epochs=8, patience=8, learning_rate=1e-3, seed=1), tmp_path)
    loss, acc, _ = evaluate_split(load_checkpoint(ckpt), va)
    assert loss == pytest.approx(history.best.val_loss, abs=1e-6)
    assert acc == pytest.approx(history.best.val_accuracy, abs=1e-6)
