import numpy as np
import pytest

from distillvol import nn, tensor as T
from distillvol.losses import combined_loss
from distillvol.nn import ResidualBlock, default_config
from distillvol.tensor import Tensor


def _count_blocks(modules):
    return sum(isinstance(m, ResidualBlock) for block in modules for m in block.modules())


def test_res_unet_block_census():
    net = nn.build_res_unet(default_config("res_unet", 8))
    assert _count_blocks([b for level in net.encoder_blocks for b in level]) == 9
    assert [len(level) for level in net.encoder_blocks] == [1, 2, 2, 4]
    assert _count_blocks(net.decoder_blocks) == 3


def test_builders_reject_wrong_pairings():
    with pytest.raises(ValueError, match="group"):
        nn.build_res_unet(default_config("unet", 8))
    with pytest.raises(ValueError, match="levels == 4"):
        nn.build_res_unet(default_config("res_unet", 8, levels=3))
    with pytest.raises(ValueError, match="unknown architecture"):
        default_config("vnet")
    with pytest.raises(ValueError, match="divisible"):
        nn.build_res_unet(default_config("res_unet", 6))


def test_default_configs_pair_norms_and_activations():
    assert default_config("unet").norm_spec == "instance"
    assert default_config("unet").activation_spec == ("leaky_relu", 1e-2)
    assert default_config("res_unet").norm_spec == ("group", 8)
    assert default_config("cascaded_unet").activation_spec == ("relu",)


@pytest.mark.parametrize("arch", nn.ARCHITECTURES)
def test_divisibility_is_checked(arch):
    net = nn.build_network(arch, default_config(arch, 8, levels=4 if arch == "res_unet" else 3))
    bad = net.divisor + 2
    with pytest.raises(ValueError, match="divisible"):
        net(Tensor(np.zeros((1, 4, bad, net.divisor, net.divisor), np.float32)))


def test_cascade_divisor_accounts_for_stages():
    net = nn.build_cascaded_unet(default_config("cascaded_unet", 4, levels=3), stages=3)
    assert net.divisor == 2 ** (2 + 2)
    assert len(net.stages) == 3
    assert len(net.stages[0].encoders) == 4


def test_cascade_first_stage_sees_downsampled_input():
    net = nn.build_cascaded_unet(default_config("cascaded_unet", 4, levels=2))
    x = Tensor(np.zeros((1, 4, 8, 8, 8), np.float32))
    first = net.stage_inputs(x, None, 0)
    assert len(first) == 4 and first[0].shape == (1, 1, 4, 4, 4)
    later = net.stage_inputs(x, Tensor(np.zeros((1, 3, 4, 4, 4), np.float32)), 1)
    assert later[0].shape == (1, 4, 8, 8, 8)


def test_state_dict_round_trip_and_mismatch(tmp_path):
    a = nn.build_unet(default_config("unet", 4), seed=1)
    b = nn.build_unet(default_config("unet", 4), seed=2)
    a.save(tmp_path / "a.dvw")
    b.load(tmp_path / "a.dvw")
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    other = nn.build_res_unet(default_config("res_unet", 8))
    with pytest.raises(ValueError) as err:
        other.load(tmp_path / "a.dvw")
    assert "a.dvw" in str(err.value) and "res_unet" in str(err.value)


def test_checkpoint_sidecar(tmp_path):
    net = nn.build_cascaded_unet(default_config("cascaded_unet", 4, levels=2))
    net.input_extent = (16, 16, 16)
    nn.save_checkpoint(net, tmp_path / "c.dvw")
    back = nn.load_checkpoint(tmp_path / "c.dvw")
    assert back.arch == "cascaded_unet" and back.cfg == net.cfg
    assert back.input_extent == (16, 16, 16)


def test_same_seed_same_weights():
    a = nn.build_res_unet(default_config("res_unet", 8), seed=3)
    b = nn.build_res_unet(default_config("res_unet", 8), seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


# -- sliding-window inference -------------------------------------------------------


def test_full_volume_constant_stub():
    stub = lambda x: Tensor(np.zeros((x.shape[0], 3) + x.shape[2:], np.float32))
    probs = nn.forward_full_volume(stub, np.ones((4, 10, 12, 9), np.float32), patch=(8, 8, 8))
    assert probs.shape == (3, 10, 12, 9)
    np.testing.assert_array_equal(probs, 0.5)


def test_full_volume_tiles_average_logits():
    # logit = first input channel, so any tiling reproduces the input exactly
    stub = lambda x: Tensor(np.repeat(x.data[:, :1], 3, axis=1))
    image = np.random.default_rng(0).standard_normal((4, 12, 12, 12)).astype(np.float32)
    probs = nn.forward_full_volume(stub, image, patch=(8, 8, 8), overlap=0.5)
    expected = 1 / (1 + np.exp(-image[0].astype(np.float64)))
    np.testing.assert_allclose(probs[0], expected, rtol=1e-5)


def test_full_volume_pads_to_divisor():
    net = nn.build_unet(default_config("unet", 2, levels=3))
    probs = nn.forward_full_volume(net, np.zeros((4, 6, 7, 5), np.float32))
    assert probs.shape == (3, 6, 7, 5)
    assert np.all((probs >= 0) & (probs <= 1))


# -- contracts at the test profile (base 8, 32^3) ------------------------------------


@pytest.mark.parametrize("arch", nn.ARCHITECTURES)
def test_shape_and_gradient_reach_every_parameter(arch):
    net = nn.build_network(arch, default_config(arch, 8), seed=0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 4, 32, 32, 32)).astype(np.float32))
    out = net(x)
    assert out.shape == (1, 3, 32, 32, 32)
    target = (rng.uniform(size=out.shape) > 0.7).astype(np.float32)
    combined_loss(T.sigmoid(out), target).total.backward()
    dead = [name for name, p in net.named_parameters() if p.grad is None or not np.any(p.grad != 0)]
    assert not dead
