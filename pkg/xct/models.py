# xct/models.py

"""
Generator, conditional discriminator and volume classifier.

Models are plain containers of named parameter leaves; a forward pass is a
function of the parameters and its inputs, built from registered autodiff
ops. Parameter names carry a model prefix (``g.``, ``d.``, ``c.``) so one
checkpoint can hold several models.

Generator, for a side S divisible by 8::

    x (b,1,S,S) ─conv2d s2─► e1 (S/2) ─conv2d s2─► e2 (S/4) ─conv2d s2─► e3 (S/8)
    e3 replicated along depth ─► v (S/8)³
    v ─convT s2─► ⊕ replicate(e2) ─conv3d─► (S/4)³
      ─convT s2─► ⊕ replicate(e1) ─conv3d─► (S/2)³
      ─convT s2─► ⊕ replicate(x)  ─conv3d─► S³ ─conv3d, sigmoid─► (b,1,S,S,S)

The 2D→3D bridge replicates each encoder map along depth, the simplest
shape-correct reading of "skip connections between a 2D encoder and a 3D
decoder".
"""

from __future__ import annotations

from typing import Mapping, Sequence
from typing_extensions import Self

import numpy as np

from autodiff import ContractViolation, Node, as_tensor, conv2d, conv3d, conv3d_transposed, no_grad, ops
from xct.config import ClassifierConfig, ModelConfig


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Model:
    """Named parameter leaves."""

    prefix: str

    def __init__(self, params: Mapping[str, Node]):
        self.params: dict[str, Node] = dict(params)

    def _param(self, name: str) -> Node:
        return self.params[f"{self.prefix}.{name}"]

    def _add(self, name: str, value: np.ndarray):
        full = f"{self.prefix}.{name}"
        self.params[full] = Node.leaf(value, requires_grad=True, name=full)

    def _add_conv(self, rng: np.random.Generator, name: str, shape: tuple[int, ...], std: float | None = None):
        """Kernel ``name.w`` of ``shape`` plus a zero bias ``name.b`` sized by ``shape[0]``."""
        fan_in = int(np.prod(shape[1:]))
        w = rng.normal(0.0, std, size=shape) if std is not None else _he_normal(rng, shape, fan_in)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(shape[0]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        missing = sorted(set(self.params) - set(state))
        if missing:
            raise ContractViolation(f"{type(self).__name__}: state is missing {missing}")

        for name, node in self.params.items():
            value = np.asarray(state[name])
            if value.shape != node.value.shape:
                raise ContractViolation(
                    f"{name}: stored shape {value.shape} does not match model shape {node.value.shape}"
                )
            node.value = as_tensor(value)

    def parameter_count(self) -> int:
        return sum(node.value.size for node in self.params.values())


# ----------------------------
# Generator
# ----------------------------


class GeneratorModel(Model):
    prefix = "g"

    def __init__(self, side: int, channels: Sequence[int], leaky_slope: float, params=()):
        super().__init__(dict(params))
        if side % 8:
            raise ContractViolation(f"generator side must be divisible by 8, got {side}")
        self.side = side
        self.channels = tuple(channels)
        self.leaky_slope = leaky_slope

    @property
    def decoder_channels(self) -> tuple[int, int, int]:
        """Widths at S/4, S/2 and S."""
        c1, c2, _ = self.channels
        return c2, c1, max(c1 // 2, 4)

    @classmethod
    def create(cls, side: int, config: ModelConfig, rng: np.random.Generator) -> Self:
        g = cls(side, config.encoder_channels, config.leaky_slope)
        c1, c2, c3 = g.channels

        for i, (cin, cout) in enumerate(zip((1, c1, c2), (c1, c2, c3))):
            g._add_conv(rng, f"enc{i}", (cout, cin, 4, 4))

        skips = (c2, c1, 1)
        cin = c3
        for i, (cout, skip) in enumerate(zip(g.decoder_channels, skips)):
            # transposed kernels are (cin, cout, k...); the bias follows cout
            w = _he_normal(rng, (cin, cout, 2, 2, 2), cin * 8)
            g._add(f"up{i}.w", w)
            g._add(f"up{i}.b", np.zeros(cout))
            g._add_conv(rng, f"fuse{i}", (cout, cout + skip, 3, 3, 3))
            cin = cout

        g._add_conv(rng, "head", (1, cin, 3, 3, 3))
        return g

    def forward(self, x: Node) -> Node:
        if x.value.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.side, self.side):
            raise ContractViolation(
                f"generator expects (batch, 1, {self.side}, {self.side}), got {x.shape}"
            )

        slope = self.leaky_slope
        h = x
        encoded = [x]
        for i in range(3):
            h = conv2d(h, self._param(f"enc{i}.w"), stride=2, padding=1)
            h = ops.leaky_relu(ops.bias_add(h, self._param(f"enc{i}.b")), slope)
            encoded.append(h)

        v = ops.replicate(encoded[3], axis=2, count=encoded[3].shape[-1])
        for i, skip in enumerate(reversed(encoded[:3])):
            up = conv3d_transposed(v, self._param(f"up{i}.w"), stride=2)
            up = ops.leaky_relu(ops.bias_add(up, self._param(f"up{i}.b")), slope)
            bridged = ops.replicate(skip, axis=2, count=skip.shape[-1])
            v = conv3d(ops.concat([up, bridged], axis=1), self._param(f"fuse{i}.w"), padding=1)
            v = ops.leaky_relu(ops.bias_add(v, self._param(f"fuse{i}.b")), slope)

        out = conv3d(v, self._param("head.w"), padding=1)
        return ops.sigmoid(ops.bias_add(out, self._param("head.b")))

    def reconstruct(self, xrays: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """(n, 1, S, S) x-rays → (n, 1, S, S, S) volumes, without recording."""
        outputs = []
        with no_grad():
            for start in range(0, len(xrays), batch_size):
                outputs.append(self.forward(ops.constant(xrays[start : start + batch_size])).value)
        if not outputs:
            return np.zeros((0, 1, self.side, self.side, self.side), dtype=as_tensor(0).dtype)
        return np.concatenate(outputs)


# ----------------------------
# Discriminator
# ----------------------------


class DiscriminatorModel(Model):
    """3D PatchGAN conditioned on the x-ray, broadcast along depth as a second channel."""

    prefix = "d"

    def __init__(self, channels: Sequence[int], leaky_slope: float, params=()):
        super().__init__(dict(params))
        self.channels = tuple(channels)
        self.leaky_slope = leaky_slope

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> Self:
        d = cls(config.discriminator_channels, config.leaky_slope)
        cin = 2
        for i, cout in enumerate(d.channels):
            d._add_conv(rng, f"block{i}", (cout, cin, 4, 4, 4), std=0.02)
            cin = cout
        d._add_conv(rng, "head", (1, cin, 3, 3, 3), std=0.02)
        return d

    def forward(self, v: Node, x: Node) -> Node:
        if v.value.ndim != 5 or x.value.ndim != 4:
            raise ContractViolation(
                f"discriminator expects a (b,1,D,H,W) volume and a (b,1,H,W) x-ray, got {v.shape} and {x.shape}"
            )
        if v.shape[0] != x.shape[0] or v.shape[1] != 1 or x.shape[1] != 1 or v.shape[3:] != x.shape[2:]:
            raise ContractViolation(
                f"discriminator: volume {v.shape} and x-ray {x.shape} do not share batch and face"
            )

        h = ops.concat([v, ops.replicate(x, axis=2, count=v.shape[2])], axis=1)
        for i in range(len(self.channels)):
            h = conv3d(h, self._param(f"block{i}.w"), stride=2, padding=1)
            h = ops.leaky_relu(ops.bias_add(h, self._param(f"block{i}.b")), self.leaky_slope)

        return ops.bias_add(conv3d(h, self._param("head.w"), padding=1), self._param("head.b"))


# ----------------------------
# Classifier
# ----------------------------


# Normalized attenuation of soft tissue and lung lies in [0, 0.5]; centered and
# scaled before the first block.
_INPUT_SHIFT = -0.25
_INPUT_SCALE = 4.0


def _max_pool2(x: Node) -> Node:
    """2×2×2 max pooling with stride 2, one axis at a time within rank 5."""
    b, c, d, h, w = x.shape
    x = ops.max_along_axis(ops.reshape(x, (b, c, d // 2, 2, h * w)), 3)
    x = ops.max_along_axis(ops.reshape(x, (b, c * (d // 2), h // 2, 2, w)), 3)
    x = ops.max_along_axis(ops.reshape(x, (b, c * (d // 2) * (h // 2), w // 2, 2)), 3)
    return ops.reshape(x, (b, c, d // 2, h // 2, w // 2))


class ClassifierModel(Model):
    """Four conv3d blocks with max-pool downsampling, global average pooling, FC hidden, dropout, FC 3."""

    prefix = "c"

    def __init__(self, channels: Sequence[int], hidden: int, dropout: float, n_classes: int = 3, params=()):
        super().__init__(dict(params))
        self.channels = tuple(channels)
        self.hidden = hidden
        self.dropout = dropout
        self.n_classes = n_classes

    @classmethod
    def create(cls, config: ClassifierConfig, rng: np.random.Generator, n_classes: int = 3) -> Self:
        c = cls(config.channels, config.hidden, config.dropout, n_classes)
        cin = 1
        for i, cout in enumerate(c.channels):
            c._add_conv(rng, f"block{i}", (cout, cin, 3, 3, 3))
            cin = cout

        c._add("fc0.w", _he_normal(rng, (cin, c.hidden), cin))
        c._add("fc0.b", np.zeros(c.hidden))
        c._add("fc1.w", rng.normal(0.0, 0.01, size=(c.hidden, n_classes)))
        c._add("fc1.b", np.zeros(n_classes))
        return c

    def logits(self, v: Node, *, rng: np.random.Generator | None = None) -> Node:
        """Class scores; dropout is active only when ``rng`` is given."""
        if v.value.ndim != 5 or v.shape[1] != 1:
            raise ContractViolation(f"classifier expects (batch, 1, D, H, W), got {v.shape}")
        if any(n % 16 for n in v.shape[2:]):
            raise ContractViolation(f"classifier needs spatial dims divisible by 16, got {v.shape[2:]}")

        h = ops.mul_scalar(ops.add_scalar(v, _INPUT_SHIFT), _INPUT_SCALE)
        for i in range(len(self.channels)):
            h = conv3d(h, self._param(f"block{i}.w"), padding=1)
            h = _max_pool2(ops.relu(ops.bias_add(h, self._param(f"block{i}.b"))))

        b, c = h.shape[:2]
        h = ops.mean_along_axis(ops.reshape(h, (b, c, int(np.prod(h.shape[2:])))), 2)
        h = ops.relu(ops.bias_add(ops.matmul(h, self._param("fc0.w")), self._param("fc0.b")))
        if rng is not None:
            h = ops.dropout(h, self.dropout, rng)
        return ops.bias_add(ops.matmul(h, self._param("fc1.w")), self._param("fc1.b"))

    def predict(self, volumes: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Most probable class index per volume of a (n, 1, D, H, W) array."""
        predictions = []
        with no_grad():
            for start in range(0, len(volumes), batch_size):
                probs = classifier_forward(self, ops.constant(volumes[start : start + batch_size])).value
                predictions.append(np.argmax(probs, axis=1))
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


# ----------------------------
# Forward passes
# ----------------------------


def generator_forward(g: GeneratorModel, x: Node) -> Node:
    return g.forward(x)


def discriminator_forward(d: DiscriminatorModel, v: Node, x: Node) -> Node:
    return d.forward(v, x)


def classifier_forward(c: ClassifierModel, v: Node) -> Node:
    """Per-sample class probabilities (batch, 3), in inference mode."""
    return ops.softmax(c.logits(v))
