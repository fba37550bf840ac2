"""
net_utils.py

Network specifications for single-hidden-layer MLPs and gated linear units.
- MlpSpec / GluSpec with shape validation and numpy forward passes
- Registry of supported network kinds and their tensor names
- Conversion to and from torch.nn modules (CPU, float64)
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

try:
    import torch
    import torch.nn as nn
except ImportError:
    torch = None

from src.actint import Activation
from src.errors import InvalidInputError

# Registry of supported network kinds and the tensors that define them
NETWORK_REGISTRY = {
    "mlp": {
        "display_name": "Single-hidden-layer MLP",
        "tensors": ("w1", "b1", "w2", "b2"),
        "notes": "f(x) = w2 act(w1 x + b1) + b2",
    },
    "glu": {
        "display_name": "Gated linear unit",
        "tensors": ("w", "v", "b", "c"),
        "optional": ("w_out", "b_out"),
        "notes": "GLU(x) = act(w x + b) * (v x + c), optionally followed by w_out, b_out",
    },
}


def get_network_info(kind: str) -> dict:
    """Return registry info for a network kind."""
    if kind not in NETWORK_REGISTRY:
        message = f"Unsupported network kind: {kind}. Supported: {list(NETWORK_REGISTRY.keys())}"
        logging.error(message)
        raise InvalidInputError(message)
    return NETWORK_REGISTRY[kind]


def _fail(message: str):
    logging.error(message)
    raise InvalidInputError(message)


def _matrix(value, name: str) -> np.ndarray:
    a = np.array(value, dtype=np.float64, ndmin=2)
    if a.ndim != 2:
        _fail(f"{name} must be a matrix, got shape {a.shape}.")
    if not np.all(np.isfinite(a)):
        _fail(f"{name} has non-finite entries.")
    return a


def _vector(value, name: str, length: int) -> np.ndarray:
    a = np.array(value, dtype=np.float64).reshape(-1)
    if a.size != length:
        _fail(f"{name} has length {a.size}, expected {length}.")
    if not np.all(np.isfinite(a)):
        _fail(f"{name} has non-finite entries.")
    return a


def _check_inputs(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        _fail(f"Inputs must have shape (n, {d}), got {x.shape}.")
    return x


@dataclass(frozen=True)
class MlpSpec:
    """f(x) = w2 act(w1 x + b1) + b2, column-vector convention."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    act: Activation = Activation.RELU

    def __post_init__(self):
        w1 = _matrix(self.w1, "w1")
        w2 = _matrix(self.w2, "w2")
        if w2.shape[1] != w1.shape[0]:
            _fail(f"w2 has {w2.shape[1]} columns but w1 has {w1.shape[0]} rows.")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b1", _vector(self.b1, "b1", w1.shape[0]))
        object.__setattr__(self, "b2", _vector(self.b2, "b2", w2.shape[0]))
        object.__setattr__(self, "act", Activation.parse(self.act))

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def outputs(self) -> int:
        return self.w2.shape[0]

    def forward(self, x) -> np.ndarray:
        """(n, d) inputs -> (n, o) outputs."""
        x = _check_inputs(x, self.d)
        return self.act.apply(x @ self.w1.T + self.b1) @ self.w2.T + self.b2


@dataclass(frozen=True)
class GluSpec:
    """GLU(x) = act(w x + b) * (v x + c), then the optional affine map w_out, b_out."""

    w: np.ndarray
    v: np.ndarray
    b: np.ndarray
    c: np.ndarray
    act: Activation = Activation.IDENTITY
    w_out: Optional[np.ndarray] = None
    b_out: Optional[np.ndarray] = None

    def __post_init__(self):
        w = _matrix(self.w, "w")
        v = _matrix(self.v, "v")
        if v.shape != w.shape:
            _fail(f"v has shape {v.shape} but w has {w.shape}.")
        h = w.shape[0]
        w_out = np.eye(h) if self.w_out is None else _matrix(self.w_out, "w_out")
        if w_out.shape[1] != h:
            _fail(f"w_out has {w_out.shape[1]} columns, expected {h}.")
        b_out = np.zeros(w_out.shape[0]) if self.b_out is None else _vector(self.b_out, "b_out", w_out.shape[0])
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "b", _vector(self.b, "b", h))
        object.__setattr__(self, "c", _vector(self.c, "c", h))
        object.__setattr__(self, "act", Activation.parse(self.act))
        object.__setattr__(self, "w_out", w_out)
        object.__setattr__(self, "b_out", b_out)

    @property
    def d(self) -> int:
        return self.w.shape[1]

    @property
    def hidden(self) -> int:
        return self.w.shape[0]

    @property
    def outputs(self) -> int:
        return self.w_out.shape[0]

    def gate_values(self, x) -> np.ndarray:
        """The GLU activations before the output map, (n, h)."""
        x = _check_inputs(x, self.d)
        return self.act.apply(x @ self.w.T + self.b) * (x @ self.v.T + self.c)

    def forward(self, x) -> np.ndarray:
        return self.gate_values(x) @ self.w_out.T + self.b_out


def network_kind(net) -> str:
    if isinstance(net, MlpSpec):
        return "mlp"
    if isinstance(net, GluSpec):
        return "glu"
    _fail(f"Expected MlpSpec or GluSpec, got {type(net).__name__}.")


def predict_labels(net, x) -> np.ndarray:
    """Argmax class of the network outputs treated as logits."""
    return np.argmax(net.forward(x), axis=1)


def _require_torch():
    if torch is None:
        logging.error("PyTorch is required for torch conversion.")
        raise ImportError("PyTorch is not installed.")


def build_torch_mlp(net: MlpSpec) -> "nn.Module":
    """
    Instantiate a float64 torch module computing the same function as net.

    Args:
        net (MlpSpec): Network weights.

    Returns:
        torch.nn.Module: Sequential(Linear, activation, Linear).
    """
    _require_torch()
    if not isinstance(net, MlpSpec):
        raise TypeError("build_torch_mlp expects an MlpSpec.")
    acts = {
        Activation.RELU: nn.ReLU,
        Activation.GELU: nn.GELU,
        Activation.IDENTITY: nn.Identity,
    }
    module = nn.Sequential(
        nn.Linear(net.d, net.hidden),
        acts[net.act](),
        nn.Linear(net.hidden, net.outputs),
    ).double()
    with torch.no_grad():
        module[0].weight.copy_(torch.from_numpy(net.w1))
        module[0].bias.copy_(torch.from_numpy(net.b1))
        module[2].weight.copy_(torch.from_numpy(net.w2))
        module[2].bias.copy_(torch.from_numpy(net.b2))
    return module


def mlp_from_state_dict(state_dict: dict, act=Activation.RELU) -> MlpSpec:
    """
    Read the first two Linear layers of a state_dict into an MlpSpec.

    Works for Sequential(Linear, act, Linear) and any module whose first two
    weight/bias pairs (in insertion order) are the hidden and output layers.
    """
    weights = [k for k, t in state_dict.items() if k.endswith("weight") and getattr(t, "ndim", 0) == 2]
    if len(weights) < 2:
        _fail(f"state_dict has {len(weights)} matrix weights; need 2 for an MLP.")
    tensors = []
    for key in weights[:2]:
        bias_key = key[: -len("weight")] + "bias"
        if bias_key not in state_dict:
            _fail(f"state_dict is missing {bias_key}.")
        tensors.append((state_dict[key], state_dict[bias_key]))

    def as_numpy(t):
        return t.detach().cpu().double().numpy() if hasattr(t, "detach") else np.asarray(t, dtype=np.float64)

    (w1, b1), (w2, b2) = tensors
    return MlpSpec(as_numpy(w1), as_numpy(b1), as_numpy(w2), as_numpy(b2), act)


def mlp_from_torch(module: "nn.Module", act=Activation.RELU) -> MlpSpec:
    """Snapshot a torch MLP into an MlpSpec."""
    _require_torch()
    if not isinstance(module, nn.Module):
        raise TypeError("mlp_from_torch expects a torch.nn.Module.")
    return mlp_from_state_dict(module.state_dict(), act)
