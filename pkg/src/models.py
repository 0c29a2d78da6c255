"""
Network definitions for the victim, the substitute and the DNN-SYN generator.

A network is an ordered list of ``LayerSpec`` entries plus the named
parameter tensors the dense and conv layers own. Shapes are inferred once at
build time; an incompatible stack fails there, not on first forward.

Checkpoint layout (little endian):
    magic "ESL1" | u32 class_count | u32 ndim, u32 dims... (per-sample input
    shape) | u32 layer_count, per layer u8 kind + 8 x i32 size fields |
    u32 param_count, per param u16 name_len, name, u32 ndim, u32 dims...,
    float64 data
"""

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import Config
from src.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    DimensionError,
    DomainError,
)
from src.tensor_autograd import (
    Tensor,
    add,
    concat,
    conv2d,
    flatten,
    matmul,
    maxpool2d,
    no_grad,
    relu,
    reshape,
    softmax,
    tanh,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv2d", "relu", "tanh", "flatten", "maxpool2d")
ZOO = ("linear", "mlp-small", "mlp-large", "cnn-small")

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 0

    @classmethod
    def dense(cls, in_features: int, out_features: int) -> "LayerSpec":
        return cls("dense", in_features=in_features, out_features=out_features)

    @classmethod
    def conv(
        cls, in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: int = 0
    ) -> "LayerSpec":
        return cls(
            "conv2d",
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=kernel,
            stride=stride,
            padding=padding,
        )

    @classmethod
    def activation(cls, kind: str) -> "LayerSpec":
        return cls(kind)

    @classmethod
    def maxpool(cls, size: int) -> "LayerSpec":
        return cls("maxpool2d", pool=size)

    def size_fields(self) -> Tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "kind")

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name != "kind" and value != f.default:
                out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "LayerSpec":
        if raw.get("kind") not in LAYER_KINDS:
            raise DimensionError(f"unknown layer kind {raw.get('kind')!r}")
        return cls(**raw)


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Shape) -> List[Shape]:
    """Per-sample output shape after every layer; raises on incompatibility."""
    shapes: List[Shape] = []
    current = tuple(input_shape)
    for index, layer in enumerate(layers):
        where = f"layer {index} ({layer.kind})"
        if layer.kind not in LAYER_KINDS:
            raise DimensionError(f"{where}: unknown kind")
        if layer.kind == "dense":
            if len(current) != 1 or current[0] != layer.in_features:
                raise DimensionError(f"{where}: expects ({layer.in_features},), got {current}")
            current = (layer.out_features,)
        elif layer.kind == "conv2d":
            if len(current) != 3 or current[0] != layer.in_channels:
                raise DimensionError(f"{where}: expects {layer.in_channels} channels, got {current}")
            h, w = current[1] + 2 * layer.padding, current[2] + 2 * layer.padding
            if layer.kernel > h or layer.kernel > w or layer.stride < 1:
                raise DimensionError(f"{where}: kernel {layer.kernel} does not fit {current}")
            current = (
                layer.out_channels,
                (h - layer.kernel) // layer.stride + 1,
                (w - layer.kernel) // layer.stride + 1,
            )
        elif layer.kind == "maxpool2d":
            if len(current) != 3 or layer.pool < 1 or current[1] % layer.pool or current[2] % layer.pool:
                raise DimensionError(f"{where}: pool {layer.pool} does not tile {current}")
            current = (current[0], current[1] // layer.pool, current[2] // layer.pool)
        elif layer.kind == "flatten":
            current = (int(np.prod(current)),)
        shapes.append(current)
    return shapes


@dataclass
class Network:
    layers: List[LayerSpec]
    input_shape: Shape
    class_count: int
    params: Dict[str, Tensor] = field(default_factory=dict)
    name: str = ""

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, x: Union[Tensor, np.ndarray], upto: Optional[int] = None) -> Tensor:
        """Logits [n, K]; with ``upto`` the activation after layers[:upto]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != tuple(self.input_shape):
            raise DimensionError(
                f"{self.name or 'network'}: input {x.shape[1:]} != expected {tuple(self.input_shape)}"
            )
        out = x
        for index, layer in enumerate(self.layers[:upto]):
            if layer.kind == "dense":
                out = add(matmul(out, self.params[f"layer{index}.weight"]), self.params[f"layer{index}.bias"])
            elif layer.kind == "conv2d":
                out = conv2d(out, self.params[f"layer{index}.weight"], layer.stride, layer.padding)
                out = add(out, reshape(self.params[f"layer{index}.bias"], (1, layer.out_channels, 1, 1)))
            elif layer.kind == "relu":
                out = relu(out)
            elif layer.kind == "tanh":
                out = tanh(out)
            elif layer.kind == "flatten":
                out = flatten(out)
            elif layer.kind == "maxpool2d":
                out = maxpool2d(out, layer.pool)
        return out

    __call__ = forward

    def frozen(self) -> "Network":
        """Read-only view: same storage, gradients never flow into it."""
        return Network(
            layers=list(self.layers),
            input_shape=self.input_shape,
            class_count=self.class_count,
            params={k: p.detach() for k, p in self.params.items()},
            name=self.name,
        )

    def copy(self) -> "Network":
        return Network(
            layers=list(self.layers),
            input_shape=self.input_shape,
            class_count=self.class_count,
            params={k: Tensor(p.data.copy(), requires_grad=p.requires_grad) for k, p in self.params.items()},
            name=self.name,
        )

    def feature_tap(self) -> int:
        """Index of the last dense layer; features are its input."""
        dense = [i for i, layer in enumerate(self.layers) if layer.kind == "dense"]
        if not dense:
            raise DimensionError("network has no dense layer to tap")
        return dense[-1]


def forward(net: Network, x: Union[Tensor, np.ndarray]) -> Tensor:
    return net.forward(x)


def predict_proba(net: Network, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    with no_grad():
        chunks = [
            softmax(net.forward(x[start:start + batch_size]).data)
            for start in range(0, len(x), batch_size)
        ]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, net.class_count))


def predict_classes(net: Network, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    return predict_proba(net, x, batch_size).argmax(axis=1)


def build_network(
    layers: Sequence[LayerSpec],
    seed: int,
    input_shape: Shape,
    name: str = "",
) -> Network:
    """Fan-in scaled (Kaiming) Gaussian weights, zero biases."""
    layers = list(layers)
    shapes = infer_shapes(layers, input_shape)
    if not shapes or len(shapes[-1]) != 1:
        raise DimensionError(f"network must end in a vector output, got {shapes[-1:] or 'nothing'}")
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for index, layer in enumerate(layers):
        if layer.kind == "dense":
            fan_in = layer.in_features
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.in_features, layer.out_features))
            bias = np.zeros(layer.out_features)
        elif layer.kind == "conv2d":
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            weight = rng.normal(
                0.0,
                np.sqrt(2.0 / fan_in),
                size=(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
            )
            bias = np.zeros(layer.out_channels)
        else:
            continue
        params[f"layer{index}.weight"] = Tensor(weight, requires_grad=True)
        params[f"layer{index}.bias"] = Tensor(bias, requires_grad=True)
    return Network(
        layers=layers,
        input_shape=tuple(input_shape),
        class_count=shapes[-1][0],
        params=params,
        name=name,
    )


def zoo_layers(arch: str, input_shape: Shape, class_count: int) -> List[LayerSpec]:
    """Desk-scale model zoo."""
    input_shape = tuple(input_shape)
    flat = int(np.prod(input_shape))
    prefix = [LayerSpec.activation("flatten")] if len(input_shape) > 1 else []
    if arch == "linear":
        return prefix + [LayerSpec.dense(flat, class_count)]
    if arch in ("mlp-small", "mlp-large"):
        width = 64 if arch == "mlp-small" else 256
        return prefix + [
            LayerSpec.dense(flat, width),
            LayerSpec.activation("relu"),
            LayerSpec.dense(width, width),
            LayerSpec.activation("relu"),
            LayerSpec.dense(width, class_count),
        ]
    if arch == "cnn-small":
        if len(input_shape) != 3:
            raise DimensionError(f"cnn-small needs image input, got {input_shape}")
        channels, h, w = input_shape
        return [
            LayerSpec.conv(channels, 8, 3, padding=1),
            LayerSpec.activation("relu"),
            LayerSpec.maxpool(2),
            LayerSpec.conv(8, 16, 3, padding=1),
            LayerSpec.activation("relu"),
            LayerSpec.maxpool(2),
            LayerSpec.activation("flatten"),
            LayerSpec.dense(16 * (h // 4) * (w // 4), 32),
            LayerSpec.activation("relu"),
            LayerSpec.dense(32, class_count),
        ]
    raise DimensionError(f"unknown architecture {arch!r}; choose from {ZOO}")


def build_zoo_network(arch: str, input_shape: Shape, class_count: int, seed: int) -> Network:
    return build_network(zoo_layers(arch, input_shape, class_count), seed, input_shape, name=arch)


# ---------------------------------------------------------------------------
# generator


@dataclass
class GeneratorNetwork:
    network: Network
    latent_dim: int
    class_count: int
    output_shape: Shape

    def parameters(self) -> List[Tensor]:
        return self.network.parameters()


def build_generator(
    latent_dim: int,
    class_count: int,
    output_shape: Shape,
    hidden: int = 128,
    seed: int = 0,
) -> GeneratorNetwork:
    """MLP conditional generator: [z ; one-hot] -> hidden -> tanh image."""
    out_size = int(np.prod(output_shape))
    layers = [
        LayerSpec.dense(latent_dim + class_count, hidden),
        LayerSpec.activation("relu"),
        LayerSpec.dense(hidden, out_size),
        LayerSpec.activation("tanh"),
    ]
    net = build_network(layers, seed, (latent_dim + class_count,), name="generator")
    return GeneratorNetwork(
        network=net,
        latent_dim=latent_dim,
        class_count=class_count,
        output_shape=tuple(output_shape),
    )


def generate(g: GeneratorNetwork, z: Union[Tensor, np.ndarray], labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[1] != g.class_count:
        raise DimensionError(f"labels must be [n, {g.class_count}], got {labels.shape}")
    if not (np.isin(labels, (0.0, 1.0)).all() and (labels.sum(axis=1) == 1.0).all()):
        raise DomainError("generator labels must be one-hot rows")
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape != (labels.shape[0], g.latent_dim):
        raise DimensionError(f"latent batch {z.shape} does not match labels {labels.shape}")
    flat = g.network.forward(concat([z, Tensor(labels)], axis=1))
    return reshape(flat, (labels.shape[0],) + g.output_shape)


# ---------------------------------------------------------------------------
# checkpoints

_KIND_CODES = {kind: code for code, kind in enumerate(LAYER_KINDS)}


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        values = struct.unpack_from(fmt, self.blob, self.offset)
        self.offset += size
        return values

    def floats(self, count: int) -> np.ndarray:
        size = 8 * count
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = np.frombuffer(self.blob, dtype="<f8", count=count, offset=self.offset).astype(np.float64)
        self.offset += size
        return out


def save_checkpoint(net: Network, path: Union[str, Path]) -> None:
    path = Path(path)
    chunks = [Config.CHECKPOINT_MAGIC, struct.pack("<I", net.class_count)]
    chunks.append(struct.pack("<I", len(net.input_shape)))
    chunks.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    chunks.append(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        chunks.append(struct.pack("<B8i", _KIND_CODES[layer.kind], *layer.size_fields()))
    chunks.append(struct.pack("<I", len(net.params)))
    for name, tensor in net.params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(tensor.data.astype("<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info("Saved checkpoint %s (%d parameters)", path, net.parameter_count())


def load_checkpoint(
    path: Union[str, Path],
    expected_layers: Optional[Sequence[LayerSpec]] = None,
    expected_input_shape: Optional[Shape] = None,
) -> Network:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        logger.error("Failed to read checkpoint %s: %s", path, e)
        raise CheckpointError(f"{path}: {e}") from e
    magic = Config.CHECKPOINT_MAGIC
    if len(blob) < len(magic) or blob[:3] != magic[:3]:
        raise CheckpointError(f"{path}: corrupt header")
    if blob[:4] != magic:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {blob[3:4]!r}")

    reader = _Reader(blob, path)
    reader.offset = len(magic)
    (class_count,) = reader.unpack("<I")
    (ndim,) = reader.unpack("<I")
    input_shape = reader.unpack(f"<{ndim}I")
    (layer_count,) = reader.unpack("<I")
    layers = []
    for _ in range(layer_count):
        code, *sizes = reader.unpack("<B8i")
        if code >= len(LAYER_KINDS):
            raise CheckpointError(f"{path}: unknown layer code {code}")
        layers.append(LayerSpec(LAYER_KINDS[code], *sizes))

    if expected_layers is not None and list(expected_layers) != layers:
        raise CheckpointShapeError(f"{path}: layer table does not match the expected architecture")
    if expected_input_shape is not None and tuple(expected_input_shape) != tuple(input_shape):
        raise CheckpointShapeError(f"{path}: input shape {input_shape} != {tuple(expected_input_shape)}")

    try:
        template = build_network(layers, 0, input_shape)
    except DimensionError as e:
        raise CheckpointShapeError(f"{path}: {e}") from e

    (param_count,) = reader.unpack("<I")
    params: Dict[str, Tensor] = {}
    for _ in range(param_count):
        (name_len,) = reader.unpack("<H")
        name = bytes(reader.unpack(f"<{name_len}s")[0]).decode("utf-8")
        (p_ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{p_ndim}I")
        data = reader.floats(int(np.prod(shape)) if shape else 1).reshape(shape)
        expected = template.params.get(name)
        if expected is None or expected.shape != tuple(shape):
            raise CheckpointShapeError(f"{path}: parameter {name} has shape {shape}")
        params[name] = Tensor(data, requires_grad=True)
    if set(params) != set(template.params) or class_count != template.class_count:
        raise CheckpointShapeError(f"{path}: parameter table does not match the layer table")
    if reader.offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameters")

    logger.info("Loaded checkpoint %s", path)
    return Network(layers=layers, input_shape=tuple(input_shape), class_count=class_count, params=params)
