import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from helpers import linear_head_net, two_stage_net
from igdefense.attacks import AttackConfig, UnsupportedLossError
from igdefense.data import ProbeDataset, make_synthetic
from igdefense.evaluation import robust_accuracy
from igdefense.models import (CheckpointError, ConfigurationError, TrainConfig, TrainingError, ablate_channel,
                              build_model, input_gradient, load_checkpoint, neuron_ablated_forward, save_checkpoint,
                              tap, train_base_model)


def test_split_identity_bitwise(small_model):
    x = torch.rand(100, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(small_model(x), small_model.head(small_model.activations(x)))
        assert torch.equal(small_model(x), small_model.net(x))


@pytest.mark.parametrize("layer,width", [("stage1", 32), ("stage2", 64), ("stage3", 128), ("stage4", 256)])
def test_small_cnn_tap_widths(layer, width):
    t = tap(build_model("small_cnn"), layer)
    assert t.num_neurons == width
    x = torch.rand(3, 1, 16, 16)
    with torch.no_grad():
        a = t.activations(x)
        assert a.shape[1] == width and (a >= 0).all()  # post-ReLU
        assert torch.equal(t.head(a), t(x))


def test_resnet18_penultimate_has_512_neurons():
    t = tap(build_model("resnet18", in_channels=3), "layer4")
    assert t.num_neurons == 512
    x = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(t.head(t.activations(x)), t(x))


def test_unknown_layer_lists_valid_ids():
    with pytest.raises(ConfigurationError, match="stage1"):
        tap(build_model("small_cnn"), "fc7")


def test_ablation_of_neuron_with_zero_outgoing_weights():
    t = linear_head_net(neurons=5, classes=3)
    t.net.fc.weight[:, 2] = 0
    x = torch.rand(7, 1, 4, 4)
    with torch.no_grad():
        assert torch.equal(neuron_ablated_forward(t, x, 2), t(x))


def test_ablation_closed_form_on_linear_head():
    t = linear_head_net(neurons=5, classes=3, seed=1)
    x = torch.rand(9, 1, 4, 4)
    W = t.net.fc.weight
    with torch.no_grad():
        abar = t.activations(x).mean(dim=(2, 3))
        for j in range(5):
            change = t(x) - neuron_ablated_forward(t, x, j)
            assert torch.allclose(change, abar[:, j:j + 1] * W[:, j][None], atol=1e-6)


def test_ablation_linearity_on_three_neurons():
    t = linear_head_net(neurons=3, classes=2, seed=2)
    t.net.fc.bias.zero_()
    x = torch.rand(4, 1, 3, 3)
    with torch.no_grad():
        total = sum(t(x) - neuron_ablated_forward(t, x, j) for j in range(3))
        h0 = t.head(torch.zeros_like(t.activations(x)))
        assert torch.allclose(total, t(x) - h0, atol=1e-6)


def test_ablation_locality_matches_manual_zeroing(small_model):
    x = torch.rand(5, 1, 8, 8)
    with torch.no_grad():
        a = small_model.activations(x)
        assert torch.equal(neuron_ablated_forward(small_model, x, 4), small_model.head(ablate_channel(a, 4)))


@pytest.mark.parametrize("j", [-1, 32])
def test_ablation_index_error(small_model, j):
    with pytest.raises(IndexError):
        neuron_ablated_forward(small_model, torch.rand(1, 1, 8, 8), j)


def test_logistic_gradient_oracle():
    # two-class linear model; logit difference w.x gives the logistic gradient (sigmoid(w.x) - y) w
    t = linear_head_net(neurons=1, classes=2, relu=False, seed=0)
    with torch.no_grad():
        t.net.stages["feat"][0].weight.fill_(1.0)
        t.net.stages["feat"][0].bias.zero_()
        t.net.fc.weight.copy_(torch.tensor([[0.0], [2.0]]))
        t.net.fc.bias.zero_()
    x = torch.rand(6, 1, 2, 2, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([0, 1, 0, 1, 1, 0])
    g = input_gradient(t, x, "ce", y)
    s = 2.0 * x.mean(dim=(1, 2, 3))          # z1 - z0
    w = torch.full((1, 2, 2), 2.0 / 4)       # d s / d x
    expected = (torch.sigmoid(s) - y.float()).view(-1, 1, 1, 1) * w
    assert torch.allclose(g, expected, atol=1e-6)


def test_constant_loss_has_zero_gradient():
    t = linear_head_net()
    with torch.no_grad():
        t.net.fc.weight.zero_()
    g = input_gradient(t, torch.rand(3, 1, 4, 4), "ce", torch.tensor([0, 1, 2]))
    assert torch.count_nonzero(g) == 0


def test_unsupported_loss():
    with pytest.raises(UnsupportedLossError):
        input_gradient(linear_head_net(), torch.rand(1, 1, 4, 4), "hinge", torch.tensor([0]))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_finite_differences(seed):
    t = two_stage_net(seed=seed % 7)
    t.net.double()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 1, 5, 5, generator=g, dtype=torch.float64)
    y = torch.tensor([seed % 4])
    grad = input_gradient(t, x, "ce", y)
    h = 1e-7
    for _ in range(5):
        i = int(torch.randint(0, 25, (1,), generator=g))
        e = torch.zeros(25, dtype=torch.float64)
        e[i] = h
        e = e.view_as(x)
        with torch.no_grad():
            fd = (F.cross_entropy(t(x + e), y) - F.cross_entropy(t(x - e), y)) / (2 * h)
        an = grad.flatten()[i]
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) + 1e-8


def test_standard_training_separable_toy():
    x = torch.zeros(40, 1, 8, 8)
    x[20:] = 1.0
    y = torch.tensor([0] * 20 + [1] * 20)
    ds = ProbeDataset(x, y, "train")
    m = train_base_model("small_cnn", ds, TrainConfig(epochs=5, lr=0.05, batch_size=8), widths=(4, 4, 4, 4))
    with torch.no_grad():
        assert (m(x).argmax(1) == y).all()


def test_training_is_deterministic():
    ds = make_synthetic(num_classes=3, per_class=10, size=8, seed=1)
    cfg = TrainConfig(epochs=2, seed=5)
    a = train_base_model("small_cnn", ds, cfg, widths=(4, 4, 4, 8))
    b = train_base_model("small_cnn", ds, cfg, widths=(4, 4, 4, 8))
    assert a.fingerprint == b.fingerprint


def test_training_divergence_reports_epoch():
    ds = make_synthetic(num_classes=3, per_class=10, size=8, seed=1)
    with pytest.raises(TrainingError, match=r"at epoch \d"):
        train_base_model("small_cnn", ds, TrainConfig(epochs=2, lr=1e30), widths=(4, 4, 4, 8))


def test_training_requires_all_classes():
    ds = make_synthetic(num_classes=3, per_class=5, size=8)
    ds = ProbeDataset(ds.images, ds.labels.clamp(max=1), "train", ["a", "b", "c"])
    with pytest.raises(ConfigurationError, match="lacks classes"):
        train_base_model("small_cnn", ds, TrainConfig(epochs=1))


@pytest.mark.parametrize("kwargs", [{"epsilon": -1.0}, {"epochs": 0}, {"mode": "trades"}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_checkpoint_round_trip(small_model, tmp_path):
    path = tmp_path / "m.pt"
    save_checkpoint(small_model, path, TrainConfig())
    loaded = load_checkpoint(path)
    assert loaded.fingerprint == small_model.fingerprint
    assert loaded.class_names == small_model.class_names
    x = torch.rand(4, 1, 8, 8)
    with torch.no_grad():
        assert torch.equal(loaded(x), small_model(x))
    assert load_checkpoint(path, "stage2").num_neurons == 16


def test_checkpoint_tampering_detected(small_model, tmp_path):
    path = tmp_path / "m.pt"
    save_checkpoint(small_model, path)
    payload = torch.load(path, weights_only=True)
    payload["state_dict"]["fc.bias"] += 1
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_adversarial_training_beats_standard(desk):
    test = desk.test.head(200)
    atk = AttackConfig("pgd", desk.epsilon, {"steps": 20, "random_start": True})
    at_acc, _ = robust_accuracy(desk.model, test, atk)
    std_acc, _ = robust_accuracy(desk.standard, test, atk)
    assert at_acc > std_acc
    assert std_acc <= 5.0
