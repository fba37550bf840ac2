"""
bundle_io.py

Tensor bundle file format and IO for networks, approximants and distributions.

Layout: 8-byte magic b"PLYAPX01", uint32 little-endian manifest length, UTF-8 JSON
manifest (list of {name, dtype, shape, offset}), then the raw little-endian float64
row-major blob. Offsets are relative to the start of the blob.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np

from src.actint import ACTIVATION_CODES, Activation
from src.approx import LinearApproximant, QuadraticApproximant
from src.errors import BundleFormatError, InvalidInputError
from src.gauss import Gaussian, GaussianMixture, as_mixture
from src.net_utils import NETWORK_REGISTRY, GluSpec, MlpSpec, get_network_info, network_kind

MAGIC = b"PLYAPX01"
HEADER_SIZE = len(MAGIC) + 4
DTYPE = "f64"
_WIRE = np.dtype("<f8")
_ACTIVATION_BY_CODE = {code: act for act, code in ACTIVATION_CODES.items()}

TensorSet = Union[Dict[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]


def _format_error(message: str):
    logging.error(message)
    raise BundleFormatError(message)


@dataclass
class TensorBundle:
    manifest: List[dict]
    blob: bytes

    def names(self) -> List[str]:
        return [entry["name"] for entry in self.manifest]

    def get(self, name: str) -> np.ndarray:
        for entry in self.manifest:
            if entry["name"] == name:
                count = int(np.prod(entry["shape"], dtype=np.int64))
                if count == 0:
                    return np.zeros(entry["shape"])
                flat = np.frombuffer(self.blob, dtype=_WIRE, count=count, offset=entry["offset"])
                return flat.astype(np.float64).reshape(entry["shape"])
        _format_error(f"Bundle has no tensor named '{name}'.")

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: self.get(name) for name in self.names()}


def encode_bundle(tensors: TensorSet) -> bytes:
    """Serialize named tensors (float32 and integer inputs upconvert to float64)."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    manifest, chunks, offset, seen = [], [], 0, set()
    for name, value in items:
        if name in seen:
            _format_error(f"Duplicate tensor name '{name}'.")
        seen.add(name)
        arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64)).astype(_WIRE, copy=False)
        manifest.append({"name": name, "dtype": DTYPE, "shape": list(arr.shape), "offset": offset})
        data = arr.tobytes(order="C")
        chunks.append(data)
        offset += len(data)
    header = json.dumps(manifest).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_bundle(data: bytes) -> TensorBundle:
    """
    Parse and validate bundle bytes.

    Raises:
        BundleFormatError: Bad magic, truncation, malformed manifest, duplicate names,
            out-of-bounds or overlapping tensors; messages carry byte offsets.
    """
    if len(data) < HEADER_SIZE:
        _format_error(f"Truncated header: expected at least {HEADER_SIZE} bytes, got {len(data)}.")
    if data[: len(MAGIC)] != MAGIC:
        _format_error(f"Bad magic at byte 0: expected {MAGIC!r}, got {bytes(data[:len(MAGIC)])!r}.")
    (length,) = struct.unpack("<I", data[len(MAGIC):HEADER_SIZE])
    blob_start = HEADER_SIZE + length
    if len(data) < blob_start:
        _format_error(f"Truncated manifest at byte {HEADER_SIZE}: expected {length} bytes, got {len(data) - HEADER_SIZE}.")
    try:
        manifest = json.loads(data[HEADER_SIZE:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        _format_error(f"Malformed manifest at byte {HEADER_SIZE}: {e}")
    if not isinstance(manifest, list):
        _format_error(f"Manifest at byte {HEADER_SIZE} must be a list.")

    blob = bytes(data[blob_start:])
    names, spans = set(), []
    for entry in manifest:
        if not isinstance(entry, dict) or not {"name", "dtype", "shape", "offset"} <= set(entry):
            _format_error(f"Malformed manifest entry {entry!r}.")
        name, shape, offset = entry["name"], entry["shape"], entry["offset"]
        if name in names:
            _format_error(f"Duplicate tensor name '{name}'.")
        names.add(name)
        if entry["dtype"] != DTYPE:
            _format_error(f"Tensor '{name}' has unsupported dtype {entry['dtype']!r}.")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            _format_error(f"Tensor '{name}' has invalid shape {shape!r}.")
        if not isinstance(offset, int) or offset < 0:
            _format_error(f"Tensor '{name}' has invalid offset {offset!r}.")
        size = int(np.prod(shape, dtype=np.int64)) * _WIRE.itemsize
        if offset + size > len(blob):
            _format_error(
                f"Tensor '{name}' spans bytes {blob_start + offset}..{blob_start + offset + size} "
                f"but the file has {len(data)} bytes."
            )
        spans.append((offset, offset + size, name))
    spans.sort()
    for (_, end, first), (start, _, second) in zip(spans, spans[1:]):
        if start < end:
            _format_error(f"Tensors '{first}' and '{second}' overlap at byte {blob_start + start}.")
    expected = sum(end - start for start, end, _ in spans)
    if expected != len(blob):
        _format_error(f"Blob length mismatch: manifest expects {expected} bytes, found {len(blob)}.")
    return TensorBundle(manifest=manifest, blob=blob)


def bundle_write(path: str, tensors: TensorSet):
    data = encode_bundle(tensors)
    with open(path, "wb") as fh:
        fh.write(data)
    logging.debug(f"Wrote bundle {path} ({len(data)} bytes)")


def bundle_read(path: str) -> TensorBundle:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        logging.error(f"Failed to read bundle {path}: {e}")
        raise InvalidInputError(f"Failed to read bundle {path}: {e}")
    return decode_bundle(data)


def _require(tensors: Dict[str, np.ndarray], names: Tuple[str, ...], what: str):
    missing = [n for n in names if n not in tensors]
    if missing:
        _format_error(f"{what} bundle is missing tensors {missing}.")


def _activation(tensors: Dict[str, np.ndarray], default: Activation) -> Activation:
    if "act" not in tensors:
        return default
    code = int(tensors["act"].reshape(-1)[0])
    if code not in _ACTIVATION_BY_CODE:
        _format_error(f"Unknown activation code {code}.")
    return _ACTIVATION_BY_CODE[code]


_NET_CLASSES = {"mlp": MlpSpec, "glu": GluSpec}
_DEFAULT_ACTIVATION = {"mlp": Activation.RELU, "glu": Activation.IDENTITY}


def _net_tensor_names(kind: str) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    info = get_network_info(kind)
    return tuple(info["tensors"]), tuple(info.get("optional", ()))


def save_net(path: str, net):
    """Write the registry tensors of an MlpSpec or GluSpec plus its activation code."""
    required, optional = _net_tensor_names(network_kind(net))
    tensors = {name: getattr(net, name) for name in required + optional}
    tensors["act"] = [float(ACTIVATION_CODES[net.act])]
    bundle_write(path, tensors)


def load_net(path: str):
    """Build the network whose registry entry's leading tensor is present (w1 for MLP, w for GLU)."""
    tensors = bundle_read(path).tensors()
    for kind in NETWORK_REGISTRY:
        required, optional = _net_tensor_names(kind)
        if required[0] not in tensors:
            continue
        _require(tensors, required, get_network_info(kind)["display_name"])
        return _NET_CLASSES[kind](
            *(tensors[name] for name in required),
            _activation(tensors, _DEFAULT_ACTIVATION[kind]),
            *(tensors.get(name) for name in optional),
        )
    _format_error(f"Bundle {path} does not describe a network (tensors: {sorted(tensors)}).")


def save_approximant(path: str, approx):
    if isinstance(approx, QuadraticApproximant):
        bundle_write(path, {"gamma": approx.gamma, "beta": approx.beta, "q": approx.q})
    elif isinstance(approx, LinearApproximant):
        bundle_write(path, {"alpha": approx.alpha, "beta": approx.beta})
    else:
        raise TypeError(f"Cannot save approximant of type {type(approx).__name__}.")


def load_approximant(path: str):
    tensors = bundle_read(path).tensors()
    if "q" in tensors:
        _require(tensors, ("gamma", "beta", "q"), "Quadratic approximant")
        return QuadraticApproximant(tensors["gamma"], tensors["beta"], tensors["q"], {"kind": "quadratic"})
    if "alpha" in tensors:
        _require(tensors, ("alpha", "beta"), "Linear approximant")
        return LinearApproximant(tensors["alpha"], tensors["beta"], {"kind": "linear"})
    _format_error(f"Bundle {path} does not describe an approximant (tensors: {sorted(tensors)}).")


def _is_json(path: str) -> bool:
    return os.path.splitext(path)[1].lower() == ".json"


def save_distribution(path: str, dist):
    """JSON for *.json paths (means/covs inline), tensor bundle otherwise."""
    if _is_json(path):
        if isinstance(dist, Gaussian):
            payload = {"mean": dist.mean.tolist(), "cov": dist.cov.tolist()}
        else:
            payload = {
                "weights": dist.weights.tolist(),
                "components": [{"mean": c.mean.tolist(), "cov": c.cov.tolist()} for c in dist.components],
            }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        return
    mixture = as_mixture(dist)
    bundle_write(
        path,
        {
            "weights": mixture.weights,
            "means": np.stack([c.mean for c in mixture.components]),
            "covs": np.stack([c.cov for c in mixture.components]),
        },
    )


def load_distribution(path: str):
    """
    Read a Gaussian or GaussianMixture.

    JSON forms: {"mean", "cov"}, {"weights", "components": [{"mean", "cov"}, ...]},
    or {"standard": d} for N(0, I_d). Single-component bundles load as a Gaussian.
    """
    if _is_json(path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            logging.error(f"Failed to read distribution {path}: {e}")
            raise InvalidInputError(f"Failed to read distribution {path}: {e}")
        if "standard" in payload:
            return Gaussian.standard(int(payload["standard"]))
        if "components" in payload:
            components = tuple(Gaussian(c["mean"], c["cov"]) for c in payload["components"])
            return GaussianMixture(payload.get("weights", np.full(len(components), 1.0 / len(components))), components)
        if "mean" in payload and "cov" in payload:
            return Gaussian(payload["mean"], payload["cov"])
        logging.error(f"Distribution file {path} has none of 'standard', 'components', 'mean'/'cov'.")
        raise InvalidInputError(f"Unrecognized distribution file {path}.")
    tensors = bundle_read(path).tensors()
    _require(tensors, ("weights", "means", "covs"), "Distribution")
    components = tuple(Gaussian(m, c) for m, c in zip(tensors["means"], tensors["covs"]))
    if len(components) == 1:
        return components[0]
    return GaussianMixture(tensors["weights"], components)
