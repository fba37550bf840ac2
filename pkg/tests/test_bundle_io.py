"""
Test suite for bundle_io.py

Covers:
- Tensor bundle write/read (bit-exact values, float32 upconversion, empty bundles)
- Format errors: bad magic, truncation, duplicates, overlaps, bad dtype
- Network, approximant and distribution IO
- Network bundle layout driven by the network registry
"""

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import json
import struct
import numpy as np
import pytest
import src.bundle_io as bundle_io
from src.actint import Activation
from src.approx import LinearApproximant, QuadraticApproximant
from src.errors import BundleFormatError, InvalidInputError
from src.gauss import Gaussian, GaussianMixture
from src.net_utils import NETWORK_REGISTRY, GluSpec, MlpSpec


def _raw(manifest, blob=b""):
    header = json.dumps(manifest).encode("utf-8")
    return bundle_io.MAGIC + struct.pack("<I", len(header)) + header + blob


def test_write_read_is_bit_exact(tmp_path):
    """Test that bundle values survive a write and read bit for bit."""
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "scalar": np.array(2.5)}
    path = str(tmp_path / "t.bin")
    bundle_io.bundle_write(path, tensors)
    bundle = bundle_io.bundle_read(path)
    assert bundle.names() == ["a", "b", "scalar"]
    out = bundle.tensors()
    for name, value in tensors.items():
        assert out[name].shape == value.shape
        assert out[name].tobytes() == value.astype(np.float64).tobytes()


def test_float32_upconverts_and_empty_bundle(tmp_path):
    """Test float32 upconversion and empty tensors and bundles."""
    path = str(tmp_path / "f.bin")
    bundle_io.bundle_write(path, {"x": np.array([0.1, 0.2], dtype=np.float32), "e": np.zeros((0, 3))})
    out = bundle_io.bundle_read(path).tensors()
    assert out["x"].dtype == np.float64
    assert np.array_equal(out["x"], np.array([0.1, 0.2], dtype=np.float32).astype(np.float64))
    assert out["e"].shape == (0, 3)
    empty = bundle_io.decode_bundle(bundle_io.encode_bundle({}))
    assert empty.manifest == [] and empty.tensors() == {}


def test_bad_magic():
    """Test that a wrong magic header is rejected."""
    data = bytearray(bundle_io.encode_bundle({"a": [1.0]}))
    data[0:8] = b"NOTMAGIC"
    with pytest.raises(BundleFormatError, match="byte 0"):
        bundle_io.decode_bundle(bytes(data))


def test_truncated_file():
    """Test that truncated headers and blobs are rejected."""
    data = bundle_io.encode_bundle({"a": np.arange(10.0)})
    with pytest.raises(BundleFormatError) as info:
        bundle_io.decode_bundle(data[:-8])
    assert str(len(data) - 8) in str(info.value)
    with pytest.raises(BundleFormatError, match="header"):
        bundle_io.decode_bundle(data[:5])
    with pytest.raises(BundleFormatError, match="manifest"):
        bundle_io.decode_bundle(data[:20])


def test_duplicate_names():
    """Test that duplicate tensor names are rejected."""
    with pytest.raises(BundleFormatError):
        bundle_io.encode_bundle([("a", [1.0]), ("a", [2.0])])
    entry = {"name": "a", "dtype": "f64", "shape": [1], "offset": 0}
    with pytest.raises(BundleFormatError, match="Duplicate"):
        bundle_io.decode_bundle(_raw([entry, dict(entry, offset=8)], struct.pack("<2d", 1.0, 2.0)))


def test_overlap_and_length_mismatch():
    """Test rejection of overlapping ranges, blob length mismatch and unknown dtypes."""
    a = {"name": "a", "dtype": "f64", "shape": [2], "offset": 0}
    b = {"name": "b", "dtype": "f64", "shape": [2], "offset": 8}
    with pytest.raises(BundleFormatError, match="overlap"):
        bundle_io.decode_bundle(_raw([a, b], struct.pack("<3d", 1.0, 2.0, 3.0)))
    with pytest.raises(BundleFormatError, match="mismatch"):
        bundle_io.decode_bundle(_raw([a], struct.pack("<3d", 1.0, 2.0, 3.0)))
    with pytest.raises(BundleFormatError, match="dtype"):
        bundle_io.decode_bundle(_raw([dict(a, dtype="f32")], struct.pack("<2d", 1.0, 2.0)))


def test_net_round_trip(tmp_path):
    """Test saving and loading MLP and GLU networks."""
    rng = np.random.default_rng(1)
    mlp = MlpSpec(rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal((2, 4)), rng.standard_normal(2), "gelu")
    path = str(tmp_path / "mlp.bin")
    bundle_io.save_net(path, mlp)
    loaded = bundle_io.load_net(path)
    assert isinstance(loaded, MlpSpec) and loaded.act is Activation.GELU
    assert np.array_equal(loaded.w1, mlp.w1)

    glu = GluSpec(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2), rng.standard_normal(2))
    bundle_io.save_net(path, glu)
    loaded = bundle_io.load_net(path)
    assert isinstance(loaded, GluSpec) and loaded.act is Activation.IDENTITY
    assert np.array_equal(loaded.w_out, np.eye(2))


def test_load_net_rejects_other_bundles(tmp_path):
    """Test that non-network and incomplete bundles are rejected."""
    path = str(tmp_path / "x.bin")
    bundle_io.bundle_write(path, {"alpha": [1.0]})
    with pytest.raises(BundleFormatError):
        bundle_io.load_net(path)
    bundle_io.bundle_write(path, {"w1": np.ones((2, 2)), "b1": np.ones(2)})
    with pytest.raises(BundleFormatError, match="missing"):
        bundle_io.load_net(path)


def test_approximant_round_trip(tmp_path):
    """Test saving and loading linear and quadratic approximants."""
    rng = np.random.default_rng(2)
    path = str(tmp_path / "a.bin")
    lin = LinearApproximant(rng.standard_normal(2), rng.standard_normal((3, 2)))
    bundle_io.save_approximant(path, lin)
    loaded = bundle_io.load_approximant(path)
    assert isinstance(loaded, LinearApproximant) and np.array_equal(loaded.beta, lin.beta)
    q = rng.standard_normal((2, 3, 3))
    quad = QuadraticApproximant(rng.standard_normal(2), rng.standard_normal((3, 2)), q + q.transpose(0, 2, 1))
    bundle_io.save_approximant(path, quad)
    loaded = bundle_io.load_approximant(path)
    assert isinstance(loaded, QuadraticApproximant) and np.array_equal(loaded.q, quad.q)


@pytest.mark.parametrize("suffix", [".json", ".bin"])
def test_distribution_round_trip(tmp_path, suffix):
    """Test saving and loading Gaussian and mixture distributions."""
    mixture = GaussianMixture(
        [0.25, 0.75], (Gaussian([0.0, 1.0], [[1.0, 0.2], [0.2, 2.0]]), Gaussian([1.0, -1.0], np.eye(2)))
    )
    path = str(tmp_path / f"dist{suffix}")
    bundle_io.save_distribution(path, mixture)
    loaded = bundle_io.load_distribution(path)
    assert isinstance(loaded, GaussianMixture)
    assert np.array_equal(loaded.weights, mixture.weights)
    assert np.array_equal(loaded.components[0].cov, mixture.components[0].cov)
    bundle_io.save_distribution(path, Gaussian([1.0], [[2.0]]))
    assert isinstance(bundle_io.load_distribution(path), Gaussian)


def test_standard_json_distribution(tmp_path):
    """Test the standard-normal JSON distribution shorthand."""
    path = tmp_path / "std.json"
    path.write_text(json.dumps({"standard": 3}))
    assert bundle_io.load_distribution(str(path)).is_standard()
    path.write_text(json.dumps({"foo": 1}))
    with pytest.raises(InvalidInputError):
        bundle_io.load_distribution(str(path))


@pytest.mark.parametrize("kind", ["mlp", "glu"])
def test_net_bundle_follows_registry(tmp_path, kind):
    """Test that network bundles hold exactly the registry tensors plus the activation code."""
    rng = np.random.default_rng(5)
    if kind == "mlp":
        net = MlpSpec(rng.standard_normal((3, 2)), rng.standard_normal(3), rng.standard_normal((2, 3)), np.zeros(2))
    else:
        net = GluSpec(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), np.zeros(2), np.ones(2), "relu")
    info = NETWORK_REGISTRY[kind]
    path = str(tmp_path / f"{kind}.bin")
    bundle_io.save_net(path, net)
    names = set(bundle_io.bundle_read(path).tensors())
    assert names == set(info["tensors"]) | set(info.get("optional", ())) | {"act"}
    loaded = bundle_io.load_net(path)
    assert type(loaded) is type(net) and loaded.act is net.act
    with pytest.raises(InvalidInputError):
        bundle_io.save_net(path, object())
