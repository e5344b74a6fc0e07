import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from fusiondrive.commands import NavCommand
from fusiondrive.model import (
    BranchedPolicy,
    DrivingNet,
    ModelConfig,
    count_parameters,
    load_checkpoint,
    model_summary,
    resnet50_v2_config,
    save_checkpoint,
)


def _net(**kw):
    torch.manual_seed(0)
    return DrivingNet(ModelConfig(**kw)).eval()


def test_command_indices_are_stable():
    assert [int(c) for c in (NavCommand.STRAIGHT, NavCommand.LANE_FOLLOW, NavCommand.TURN_RIGHT, NavCommand.TURN_LEFT)] == [
        0,
        1,
        2,
        3,
    ]
    assert NavCommand.parse("turn_left") is NavCommand.TURN_LEFT
    with pytest.raises(ValueError):
        NavCommand.parse("reverse")


def test_full_scale_shapes():
    cfg = resnet50_v2_config(224)
    assert cfg.decoder_filters == (512, 128, 64, 16, 5) and cfg.decoder_strides == (4, 2, 2, 2, 1)
    net = DrivingNet(cfg).eval()
    with torch.no_grad():
        fmap, latent = net.encode(torch.rand(1, 4, 224, 224))
        assert fmap.shape[2:] == (7, 7) and latent.shape == (1, fmap.shape[1])
        sizes = []
        h = fmap
        for layer in net.decoder.net:
            h = layer(h)
            if isinstance(layer, torch.nn.ConvTranspose2d):
                sizes.append(h.shape[-1])
        assert sizes == [28, 56, 112, 224, 224]
        probs = net.decode_semantics(fmap)
    assert probs.shape == (1, 5, 224, 224)


def test_desk_scale_rgb_only():
    net = _net(input_size=96, input_channels=3)
    fmap, latent = net.encode(torch.rand(2, 3, 96, 96))
    assert fmap.shape[2:] == (3, 3) and latent.shape == (2, net.encoder.out_channels)


@pytest.mark.parametrize("size", [32, 64, 96, 128])
def test_semantic_raster_matches_input_size(size):
    net = _net(input_size=size)
    sem, ctrl = net(torch.rand(1, 4, size, size), NavCommand.LANE_FOLLOW)
    assert sem.shape == (1, 5, size, size) and ctrl.shape == (1, 2)


def test_input_shape_checked():
    net = _net(input_size=64)
    with pytest.raises(ValueError):
        net.encode(torch.rand(1, 3, 64, 64))
    with pytest.raises(ValueError):
        net.encode(torch.rand(1, 4, 96, 96))
    with pytest.raises(ValueError):
        ModelConfig(input_size=100)
    with pytest.raises(ValueError):
        ModelConfig(decoder_filters=(32, 16, 16, 8, 4))


def test_latent_is_spatial_mean(monkeypatch):
    net = _net(input_size=64)
    fmap = torch.full((1, net.encoder.out_channels, 2, 2), 0.7)
    monkeypatch.setattr(net.encoder, "forward", lambda x: fmap)
    _, latent = net.encode(torch.rand(1, 4, 64, 64))
    assert torch.all(latent == 0.7)
    torch.manual_seed(1)
    fmap = torch.rand(2, net.encoder.out_channels, 2, 2)
    _, latent = net.encode(torch.rand(2, 4, 64, 64))
    assert torch.allclose(latent, fmap.mean(dim=(2, 3)))


@given(st.integers(0, 1000))
def test_semantics_on_simplex(seed):
    torch.manual_seed(seed)
    net = DrivingNet(ModelConfig(input_size=32)).eval()
    with torch.no_grad():
        probs = net.decode_semantics(net.encode(torch.rand(2, 4, 32, 32) * 5)[0])
    assert torch.all(probs >= 0)
    assert torch.allclose(probs.sum(1), torch.ones(2, 32, 32), atol=1e-6)


def test_zero_final_layer_gives_uniform():
    net = _net(input_size=32)
    last = net.decoder.net[-1]
    torch.nn.init.zeros_(last.weight)
    torch.nn.init.zeros_(last.bias)
    with torch.no_grad():
        probs = net.decode_semantics(net.encode(torch.rand(1, 4, 32, 32))[0])
    assert torch.allclose(probs, torch.full_like(probs, 0.2), atol=1e-7)


def test_branch_isolation_on_weights():
    net = _net(input_size=32)
    latent = torch.rand(3, net.encoder.out_channels)
    before = net.policy_forward(latent, NavCommand.TURN_LEFT).detach().clone()
    with torch.no_grad():
        for c in (0, 1, 2):
            for p in net.policy.branches[c].parameters():
                p.add_(torch.randn_like(p))
    assert torch.equal(net.policy_forward(latent, NavCommand.TURN_LEFT), before)


def test_zero_branch_outputs_neutral():
    net = _net(input_size=32)
    with torch.no_grad():
        for p in net.policy.parameters():
            p.zero_()
    out = net.policy_forward(torch.rand(4, net.encoder.out_channels), NavCommand.STRAIGHT)
    assert torch.equal(out, torch.tensor([[0.0, 0.5]] * 4))


def test_unknown_command_rejected():
    net = _net(input_size=32)
    with pytest.raises(ValueError):
        net.policy_forward(torch.rand(1, net.encoder.out_channels), 4)


def _branch_oracle(branch, z):
    """Direct evaluation of linear -> relu -> linear -> (tanh, sigmoid) in numpy."""
    l1, l2 = branch.net[0], branch.net[3]
    h = np.maximum(0.0, l1.weight.detach().numpy() @ z + l1.bias.detach().numpy())
    o = l2.weight.detach().numpy() @ h + l2.bias.detach().numpy()
    return np.array([np.tanh(o[0]), 1.0 / (1.0 + np.exp(-o[1]))])


def test_turn_branches_evaluated_directly():
    torch.manual_seed(4)
    policy = BranchedPolicy(2, (2,), 0.5).eval()
    z = np.array([0.3, -0.8], dtype=np.float32)
    outs = {}
    for cmd in (NavCommand.TURN_LEFT, NavCommand.TURN_RIGHT):
        got = policy(torch.from_numpy(z)[None], torch.tensor([int(cmd)]))[0].detach().numpy()
        assert np.allclose(got, _branch_oracle(policy.branches[int(cmd)], z), atol=1e-6)
        outs[cmd] = got
    assert not np.allclose(outs[NavCommand.TURN_LEFT], outs[NavCommand.TURN_RIGHT])


def test_mixed_commands_in_one_batch():
    net = _net(input_size=32)
    latent = torch.rand(4, net.encoder.out_channels)
    cmds = torch.tensor([0, 3, 1, 3])
    mixed = net.policy_forward(latent, cmds)
    for i, c in enumerate(cmds.tolist()):
        assert torch.allclose(mixed[i], net.policy_forward(latent[i : i + 1], c)[0])


def test_forward_is_composition():
    net = _net(input_size=64)
    x = torch.rand(2, 4, 64, 64)
    with torch.no_grad():
        sem, ctrl = net(x, NavCommand.LANE_FOLLOW)
        fmap, latent = net.encode(x)
        assert torch.equal(sem, net.decode_semantics(fmap))
        assert torch.equal(ctrl, net.policy_forward(latent, NavCommand.LANE_FOLLOW))


def test_ablation_variants():
    msf = _net(input_size=64, use_decoder=False)
    sem, ctrl = msf(torch.rand(1, 4, 64, 64), NavCommand.STRAIGHT)
    assert sem is None and ctrl.shape == (1, 2)
    with pytest.raises(RuntimeError):
        msf.decode_semantics(torch.zeros(1, msf.encoder.out_channels, 2, 2))
    su = _net(input_size=64, input_channels=3)
    sem, _ = su(torch.rand(1, 3, 64, 64), NavCommand.STRAIGHT)
    assert sem.shape == (1, 5, 64, 64)


def test_inactive_branch_gradients_are_zero():
    net = _net(input_size=32)
    net.train()
    sem, ctrl = net(torch.rand(4, 4, 32, 32), torch.full((4,), 2))
    (ctrl.sum() + sem.sum()).backward()
    for c, branch in enumerate(net.policy.branches):
        for p in branch.parameters():
            if c == 2:
                assert p.grad is not None and p.grad.abs().sum() > 0
            else:
                assert p.grad is None or torch.count_nonzero(p.grad) == 0


def test_inference_bit_identical():
    net = _net(input_size=64)
    x = torch.rand(3, 4, 64, 64)
    a = net(x, NavCommand.TURN_RIGHT)
    b = net(x, NavCommand.TURN_RIGHT)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_desk_scale_parameter_budget():
    net = DrivingNet(ModelConfig())
    assert count_parameters(net) <= 200_000
    assert "total" in model_summary(net)


def test_checkpoint_round_trip(tmp_path):
    net = _net(input_size=64, input_channels=3)
    save_checkpoint(tmp_path / "m.pt", net, {"epoch": 3, "val_loss": 0.5})
    back, meta = load_checkpoint(tmp_path / "m.pt")
    assert meta == {"epoch": 3, "val_loss": 0.5} and back.config == net.config
    x = torch.rand(1, 3, 64, 64)
    assert torch.equal(back(x, 1)[1], net(x, 1)[1])
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")
