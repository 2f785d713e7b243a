"""Network assembly, losses, gradients, and the Adam optimizer.

The architecture is a 3D VGG-style chain of four convolutional groups (conv(s)
+ max pool + batch norm + relu), a 64-unit dense layer with relu and dropout,
and a single output unit.  Detectors append a sigmoid so the output is a
probability; regressors emit the linear value directly.  Filter counts
(64, 128, 256, 512) can be divided down by ``width_divisor`` for cheap CPU
training without changing the layer structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericFailure
from .layers import BatchNorm, Conv3d, Dense, Dropout, Flatten, MaxPool3d, Relu, Sigmoid

DETECTOR = "detector"
REGRESSOR = "regressor"

BASE_WIDTHS = (64, 128, 256, 512)
POOLS = ((2, 2, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2))


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative architecture description (serialized into model files)."""

    mode: str = DETECTOR
    input_dims: tuple[int, int, int] = (32, 32, 16)
    in_channels: int = 1
    width_divisor: int = 8
    convs_per_group: tuple[int, int, int, int] = (1, 1, 2, 2)
    dense_units: int = 64
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.mode not in (DETECTOR, REGRESSOR):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 1 <= len(self.convs_per_group) <= len(BASE_WIDTHS):
            raise ValueError(f"need 1..{len(BASE_WIDTHS)} conv groups, "
                             f"got {self.convs_per_group}")
        object.__setattr__(self, "input_dims", tuple(self.input_dims))
        object.__setattr__(self, "convs_per_group", tuple(self.convs_per_group))

    @property
    def n_groups(self) -> int:
        return len(self.convs_per_group)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, w // self.width_divisor) for w in BASE_WIDTHS[:self.n_groups])

    @property
    def pools(self) -> tuple[tuple[int, int, int], ...]:
        return POOLS[:self.n_groups]

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        """Spatial extents after the pooling stages."""
        x, y, z = self.input_dims
        for px, py, pz in self.pools:
            if x % px or y % py or z % pz:
                raise ValueError(f"input dims {self.input_dims} not divisible through pools")
            x, y, z = x // px, y // py, z // pz
        return x, y, z

    @property
    def feature_len(self) -> int:
        x, y, z = self.feature_dims
        return x * y * z * self.widths[-1]

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "input_dims": list(self.input_dims),
            "in_channels": self.in_channels,
            "width_divisor": self.width_divisor,
            "convs_per_group": list(self.convs_per_group),
            "dense_units": self.dense_units,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(
            mode=d["mode"],
            input_dims=tuple(d["input_dims"]),
            in_channels=d["in_channels"],
            width_divisor=d["width_divisor"],
            convs_per_group=tuple(d["convs_per_group"]),
            dense_units=d["dense_units"],
            dropout_rate=d["dropout_rate"],
        )


class Network:
    """Executable layer chain for a NetworkSpec."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        layers = []
        in_ch = spec.in_channels
        for g, (width, n_convs, pool) in enumerate(
                zip(spec.widths, spec.convs_per_group, spec.pools), start=1):
            for c in range(1, n_convs + 1):
                layers.append(Conv3d(f"g{g}.conv{c}", in_ch, width))
                in_ch = width
            layers.append(MaxPool3d(f"g{g}.pool", pool))
            layers.append(BatchNorm(f"g{g}.bn", width))
            layers.append(Relu(f"g{g}.relu"))
        layers.append(Flatten("flatten"))
        self.n_feature_layers = len(layers)
        layers.append(Dense("fc1", spec.feature_len, spec.dense_units))
        layers.append(Relu("fc1.relu"))
        layers.append(Dropout("fc1.dropout", spec.dropout_rate))
        layers.append(Dense("out", spec.dense_units, 1))
        if spec.mode == DETECTOR:
            layers.append(Sigmoid("out.sigmoid"))
        self.layers = layers

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def grad_free_params(self) -> set[str]:
        names = set()
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                names.update(layer.grad_free_params())
        return names

    def init_params(self, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            layer.init(rng, params, dtype)
        return params

    def _check_input(self, x: np.ndarray):
        expect = (*self.spec.input_dims, self.spec.in_channels)
        if x.ndim != 5 or x.shape[1:] != expect:
            raise ValueError(f"input shape {x.shape} does not match (B, {expect})")

    def forward(self, params, x, mode="infer", rng=None, check_finite=False):
        """Run the whole chain; returns (output, caches) with caches usable by backward."""
        self._check_input(x)
        caches: dict = {}
        for layer in self.layers:
            x = layer.forward(x, params, mode, rng, caches)
            if check_finite and not np.isfinite(x).all():
                raise NumericFailure(f"non-finite activation after layer {layer.name}")
        return x, caches

    def backward(self, params, caches, dout):
        """Reverse-mode gradients for every trainable parameter."""
        grads: dict[str, np.ndarray] = {}
        for layer in reversed(self.layers):
            dout = layer.backward(dout, params, caches, grads)
        return grads

    def forward_features(self, params, x) -> np.ndarray:
        """Infer-mode pass through the convolutional groups only, flattened."""
        self._check_input(x)
        caches: dict = {}
        for layer in self.layers[:self.n_feature_layers]:
            x = layer.forward(x, params, "infer", None, caches)
        return x


@dataclass
class ModelParams:
    """Named tensors plus the architecture they belong to."""

    spec: NetworkSpec
    tensors: dict[str, np.ndarray]

    @property
    def mode(self) -> str:
        return self.spec.mode

    def network(self) -> Network:
        return Network(self.spec)

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int, dtype=np.float32) -> "ModelParams":
        return cls(spec, Network(spec).init_params(seed, dtype))


def model_forward(model: ModelParams, batch: np.ndarray, mode: str = "infer",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Forward pass returning one scalar per batch row (probability or regression value)."""
    out, _ = model.network().forward(model.tensors, batch, mode, rng)
    return out[:, 0]


BCE = "bce"
SQUARED_ERROR = "squared_error"
_P_EPS = 1e-7


def loss_and_gradients(model: ModelParams, batch: np.ndarray, targets: np.ndarray,
                       loss: str, rng: np.random.Generator | None = None):
    """Mean loss over the batch and gradients for every trainable tensor."""
    net = model.network()
    out, caches = net.forward(model.tensors, batch, "train", rng, check_finite=True)
    p = out[:, 0]
    t = np.asarray(targets, p.dtype)
    if t.shape != p.shape:
        raise ValueError(f"targets shape {t.shape} does not match outputs {p.shape}")
    n = p.shape[0]
    if loss == BCE:
        pc = np.clip(p, _P_EPS, 1.0 - _P_EPS)
        value = float(-np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc)))
        dp = (pc - t) / (pc * (1 - pc)) / n
    elif loss == SQUARED_ERROR:
        value = float(np.mean((p - t) ** 2))
        dp = 2.0 * (p - t) / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    grads = net.backward(model.tensors, caches, dp[:, None].astype(p.dtype))
    return value, grads


@dataclass
class AdamState:
    """First/second moment accumulators for Adam."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g, dtype=np.float64)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(g, dtype=np.float64)
        g64 = g.astype(np.float64)
        m *= b1
        m += (1 - b1) * g64
        v *= b2
        v += (1 - b2) * g64 * g64
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        params[name] = (params[name] - update).astype(params[name].dtype)
