"""Binary checkpoints of named tensors.

Layout: the magic b"FLOWMC01", then for every tensor a little-endian u64
name length, the UTF-8 name, a u64 rank, one u64 per dimension and the
values as little-endian float64 in C order.
"""

from pathlib import Path
from typing import Dict, Union
import logging
import struct
import numpy as np

from flowmc.coupling import CouplingLayer
from flowmc.errors import FormatError
from flowmc.flow import NormalizingFlow
from flowmc.models import PartitionScheme, Precision, TransformKind
from flowmc.nnet import Mlp
from flowmc.schemas import ConditioningFeature, FlowSpec, parse_model
from flowmc.transforms import make_transform

logger = logging.getLogger(__name__)

MAGIC = b"FLOWMC01"
_U64 = struct.Struct("<Q")

_KINDS = list(TransformKind)
_PARTITIONS = list(PartitionScheme)
_PRECISIONS = list(Precision)


def write_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f8")
        chunks.append(_U64.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U64.pack(array.ndim))
        chunks.extend(_U64.pack(d) for d in array.shape)
        chunks.append(array.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}")
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a flowmc checkpoint")
    pos = len(MAGIC)

    def take(count: int) -> bytes:
        nonlocal pos
        if pos + count > len(data):
            raise FormatError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + count]
        pos += count
        return chunk

    tensors: Dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = _U64.unpack(take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = _U64.unpack(take(8))
        shape = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    return tensors


def flow_tensors(flow: NormalizingFlow) -> Dict[str, np.ndarray]:
    spec = flow.spec
    header = [
        spec.dim,
        spec.n_layers,
        _KINDS.index(spec.kind),
        spec.bins,
        _PARTITIONS.index(spec.partition),
        spec.encoding_bins or 0,
        spec.outer_width,
        spec.nesting,
        int(spec.skips),
        _PRECISIONS.index(spec.precision),
        int(spec.enforce_coverage),
    ]
    tensors: Dict[str, np.ndarray] = {"flow.header": np.array(header, dtype=np.float64)}
    for feature in spec.conditioning:
        tensors[f"flow.cond.{feature.name}"] = np.array([feature.low, feature.high])
    for i, layer in enumerate(flow.layers):
        net = layer.net
        tensors[f"layer{i}.mask_b"] = layer.mask_b.astype(np.float64)
        tensors[f"layer{i}.arch"] = np.array(net.layer_widths, dtype=np.float64)
        tensors[f"layer{i}.skips"] = np.array(net.skip_links, dtype=np.float64).reshape(-1, 2)
        for name, value in zip(net.parameter_names(), net.parameters()):
            tensors[f"layer{i}.{name}"] = value
    return tensors


def _int(value: float) -> int:
    return int(round(float(value)))


def flow_from_tensors(tensors: Dict[str, np.ndarray]) -> NormalizingFlow:
    try:
        header = [_int(v) for v in tensors["flow.header"]]
        dim, n_layers, kind, bins, partition, blob_bins, outer, nesting, skips, precision, coverage = header
        conditioning = [
            ConditioningFeature(name=key[len("flow.cond."):], low=float(v[0]), high=float(v[1]))
            for key, v in tensors.items()
            if key.startswith("flow.cond.")
        ]
        spec = parse_model(FlowSpec, {
            "dim": dim,
            "n_layers": n_layers,
            "kind": _KINDS[kind],
            "bins": bins,
            "partition": _PARTITIONS[partition],
            "one_blob": blob_bins > 0,
            "one_blob_bins": blob_bins if blob_bins > 0 else 32,
            "outer_width": outer,
            "nesting": nesting,
            "skips": bool(skips),
            "precision": _PRECISIONS[precision],
            "enforce_coverage": bool(coverage),
            "conditioning": conditioning,
        })
        layers = []
        for i in range(n_layers):
            widths = [_int(w) for w in tensors[f"layer{i}.arch"]]
            links = [(_int(s), _int(d)) for s, d in tensors[f"layer{i}.skips"]]
            n = len(widths) - 1
            weights = [tensors[f"layer{i}.W{j}"] for j in range(n)]
            biases = [tensors[f"layer{i}.b{j}"] for j in range(n)]
            net = Mlp(widths, weights, biases, links, dtype=spec.precision.value)
            mask_b = [_int(v) for v in tensors[f"layer{i}.mask_b"]]
            layers.append(CouplingLayer(dim, mask_b, make_transform(spec.kind, bins), net,
                                        spec.encoding_bins, len(conditioning)))
    except KeyError as e:
        raise FormatError(f"checkpoint is missing tensor {e.args[0]}")
    except (IndexError, ValueError) as e:
        raise FormatError(f"malformed flow checkpoint: {e}")
    return NormalizingFlow(spec, layers)


def save_flow(path: Union[str, Path], flow: NormalizingFlow) -> None:
    write_checkpoint(path, flow_tensors(flow))
    logger.info(f"Saved {flow.parameter_count()} flow parameters to {path}")


def load_flow(path: Union[str, Path]) -> NormalizingFlow:
    return flow_from_tensors(read_checkpoint(path))
