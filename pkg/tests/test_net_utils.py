"""
Test suite for net_utils.py

Covers:
- Network registry lookup
- MlpSpec / GluSpec validation and forward passes
- Argmax labels
- Conversion to and from torch modules
"""

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import numpy as np
import pytest
import torch
import src.net_utils as net_utils
from src.actint import Activation
from src.errors import InvalidInputError


def _mlp(rng, d=3, h=5, o=2, act="relu"):
    return net_utils.MlpSpec(
        rng.standard_normal((h, d)), rng.standard_normal(h), rng.standard_normal((o, h)), rng.standard_normal(o), act
    )


def test_get_network_info_supported():
    """Test registry info for supported network kinds."""
    for kind in net_utils.NETWORK_REGISTRY:
        info = net_utils.get_network_info(kind)
        assert "tensors" in info and "display_name" in info


def test_get_network_info_unsupported():
    """Test that unknown network kinds are rejected."""
    with pytest.raises(ValueError):
        net_utils.get_network_info("transformer")


def test_mlp_shape_validation():
    """Test MLP shape validation."""
    with pytest.raises(InvalidInputError):
        net_utils.MlpSpec(np.ones((4, 3)), np.ones(4), np.ones((2, 5)), np.ones(2))
    with pytest.raises(InvalidInputError):
        net_utils.MlpSpec(np.ones((4, 3)), np.ones(3), np.ones((2, 4)), np.ones(2))
    with pytest.raises(InvalidInputError):
        net_utils.MlpSpec(np.ones((4, 3)), np.ones(4), np.ones((2, 4)), [np.inf, 0.0])


def test_mlp_forward():
    """Test the MLP forward pass."""
    rng = np.random.default_rng(0)
    net = _mlp(rng)
    x = rng.standard_normal((7, 3))
    expected = np.maximum(x @ net.w1.T + net.b1, 0.0) @ net.w2.T + net.b2
    assert np.allclose(net.forward(x), expected)
    assert (net.d, net.hidden, net.outputs) == (3, 5, 2)
    with pytest.raises(InvalidInputError):
        net.forward(np.ones((2, 4)))


def test_glu_defaults_and_forward():
    """Test GLU output-map defaults and the forward pass."""
    rng = np.random.default_rng(1)
    w, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    b, c = rng.standard_normal(4), rng.standard_normal(4)
    glu = net_utils.GluSpec(w, v, b, c)
    assert glu.act is Activation.IDENTITY
    assert np.array_equal(glu.w_out, np.eye(4)) and glu.outputs == 4
    x = rng.standard_normal((6, 3))
    assert np.allclose(glu.forward(x), (x @ w.T + b) * (x @ v.T + c))
    head = net_utils.GluSpec(w, v, b, c, "relu", w_out=np.ones((2, 4)), b_out=[1.0, -1.0])
    gate = np.maximum(x @ w.T + b, 0.0) * (x @ v.T + c)
    assert np.allclose(head.forward(x), gate @ np.ones((4, 2)) + [1.0, -1.0])
    with pytest.raises(InvalidInputError):
        net_utils.GluSpec(w, v[:, :2], b, c)


def test_network_kind_and_labels():
    """Test network kind detection and argmax labels."""
    rng = np.random.default_rng(2)
    net = _mlp(rng)
    assert net_utils.network_kind(net) == "mlp"
    with pytest.raises(InvalidInputError):
        net_utils.network_kind("net")
    x = rng.standard_normal((10, 3))
    assert np.array_equal(net_utils.predict_labels(net, x), np.argmax(net.forward(x), axis=1))


@pytest.mark.parametrize("act", ["relu", "gelu", "identity"])
def test_torch_round_trip(act):
    """Test conversion to and from torch modules."""
    rng = np.random.default_rng(3)
    net = _mlp(rng, act=act)
    module = net_utils.build_torch_mlp(net)
    x = rng.standard_normal((8, 3))
    with torch.no_grad():
        out = module(torch.from_numpy(x)).numpy()
    assert np.allclose(out, net.forward(x), atol=1e-12)
    back = net_utils.mlp_from_torch(module, act)
    assert np.array_equal(back.w1, net.w1) and np.array_equal(back.b2, net.b2)


def test_mlp_from_state_dict_requires_two_layers():
    """Test that a one-layer state dict is rejected."""
    with pytest.raises(InvalidInputError):
        net_utils.mlp_from_state_dict({"0.weight": torch.zeros(2, 2), "0.bias": torch.zeros(2)})
