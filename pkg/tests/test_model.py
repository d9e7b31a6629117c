import numpy as np
import pytest
import torch

from grass.contrastive import batch_loss
from grass.errors import ConfigError, ModelError, UsageError
from grass.model import EncoderSpec, GrassNet, ProjectorSpec, grad_wrt_feature, parameter_hash

from oracles import central_difference


def smooth_net(seed, size=32):
    """Tiny model whose loss is smooth in F (no ReLU in the head), so finite differences are valid."""
    torch.manual_seed(seed)
    return GrassNet(EncoderSpec(input_size=size, width=8, feature_dim=16), ProjectorSpec(output_dim=8, hidden_dims=())).double()


def fd_relative_error(seed, n=4, k=2, samples=300):
    net = smooth_net(seed)
    x = torch.rand(n * k, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    feat, proj = net(x)
    loss, _ = batch_loss(proj.reshape(n, k, -1))
    analytic = grad_wrt_feature(loss, feat).numpy().reshape(-1)

    def loss_of(f):
        with torch.no_grad():
            return batch_loss(net.project(torch.from_numpy(f)).reshape(n, k, -1))[0].item()

    idx = np.random.default_rng(seed).choice(feat.numel(), samples, replace=False)
    numeric = central_difference(loss_of, feat.detach().numpy(), 1e-3, idx)
    a = analytic[idx]
    return np.max(np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12))


def test_feature_shape():
    net = GrassNet(EncoderSpec(stride=8, feature_dim=32))
    feat = net.encode(torch.rand(2, 3, 64, 64))
    assert feat.shape == (2, 32, 8, 8)
    assert net.feature_shape(64, 64) == (32, 8, 8)


def test_odd_size_rounds_up():
    net = GrassNet(EncoderSpec(stride=4, input_size=30))
    assert net.encode(torch.rand(1, 3, 30, 30)).shape[-2:] == (8, 8)


def test_zero_input_bias_free():
    net = GrassNet(EncoderSpec(bias=False))
    assert (net.encode(torch.zeros(2, 3, 64, 64)) == 0).all()


def test_deterministic_forward():
    net = GrassNet()
    net.eval()
    x = torch.rand(3, 3, 64, 64)
    a, fa = net(x)
    b, fb = net(x)
    assert torch.equal(a, b) and torch.equal(fa, fb)


def test_projection_unit_norm():
    net = GrassNet()
    _, f = net(torch.rand(5, 3, 64, 64) * 10)
    assert torch.allclose(f.norm(dim=-1), torch.ones(5), atol=1e-6)


def test_shape_mismatch():
    net = GrassNet()
    with pytest.raises(ModelError):
        net.encode(torch.rand(1, 3, 32, 32))
    with pytest.raises(ModelError):
        net.encode(torch.rand(1, 1, 64, 64))


def test_invalid_specs():
    with pytest.raises(ConfigError):
        EncoderSpec(architecture="vit")
    with pytest.raises(ConfigError):
        EncoderSpec(stride=6)


def test_resnet_profile():
    net = GrassNet(EncoderSpec(architecture="resnet-style", depth=18, stride=32, feature_dim=64, input_size=64))
    feat, f = net(torch.rand(2, 3, 64, 64))
    assert feat.shape == (2, 64, 2, 2)
    assert f.shape == (2, 64)


def test_grad_of_sum_is_ones():
    net = GrassNet()
    feat = net.encode(torch.rand(2, 3, 64, 64))
    assert torch.equal(grad_wrt_feature(feat.sum(), feat), torch.ones_like(feat))


def test_grad_of_zero_loss_is_zero():
    net = GrassNet()
    feat, f = net(torch.rand(2, 3, 64, 64))
    assert (grad_wrt_feature((0 * f).sum(), feat) == 0).all()


def test_grad_leaves_parameters_alone():
    net = GrassNet()
    feat, f = net(torch.rand(4, 3, 64, 64))
    before = parameter_hash(net)
    grad_wrt_feature(batch_loss(f.reshape(2, 2, -1))[0], feat)
    assert all(p.grad is None for p in net.parameters())
    assert parameter_hash(net) == before


def test_detached_feature_rejected():
    net = GrassNet()
    feat, f = net(torch.rand(4, 3, 64, 64))
    loss = batch_loss(f.reshape(2, 2, -1))[0]
    with pytest.raises(UsageError):
        grad_wrt_feature(loss, feat.detach())
    other = torch.zeros(3, requires_grad=True)
    with pytest.raises(UsageError):
        grad_wrt_feature(loss, other)


@pytest.mark.parametrize("seed", range(5))
def test_finite_difference_agreement(seed):
    assert fd_relative_error(seed) < 1e-4


def test_default_head_gradcheck():
    # ReLU/BN head is only piecewise smooth; gradcheck's tiny step stays off the kinks
    torch.manual_seed(0)
    net = GrassNet(EncoderSpec(input_size=16, width=4, feature_dim=6), ProjectorSpec(output_dim=5, hidden_dims=(7,))).double()
    feat = net.encode(torch.rand(6, 3, 16, 16, dtype=torch.float64)).detach().requires_grad_(True)
    assert torch.autograd.gradcheck(lambda f: batch_loss(net.project(f).reshape(3, 2, -1))[0], (feat,), eps=1e-6, atol=1e-7)


def test_loss_to_instance_derivative_is_one_over_nk():
    net = smooth_net(0)
    n, k = 3, 2
    feat, f = net(torch.rand(n * k, 3, 32, 32, dtype=torch.float64))
    L, per = batch_loss(f.reshape(n, k, -1))
    (d,) = torch.autograd.grad(L, per, retain_graph=True)
    assert torch.equal(d, torch.full_like(per, 1 / (n * k)))
    # chain rule: dL/dF = 1/(NK) * sum_ij dl_ij/dF
    gL = grad_wrt_feature(L, feat, retain_graph=True)
    total = sum(torch.autograd.grad(per[i, j], feat, retain_graph=True)[0] for i in range(n) for j in range(k))
    assert torch.allclose(gL, total / (n * k), atol=1e-15)
