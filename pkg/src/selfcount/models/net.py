"""Small convolutional counter with hand-written reverse-mode gradients.

Layout (channel widths configurable)::

    input 1ch
      block1: conv3x3 -> relu -> conv3x3 -> relu -> maxpool2     (stride 2)
      block2: conv3x3 -> relu -> conv3x3 -> relu -> maxpool2     (stride 4)
      block3: conv3x3 -> relu -> conv3x3 -> relu                 (stride 4)
    rotation head: conv -> relu -> conv -> relu -> global avg pool -> linear
    density head:  concat(block2, block3) -> conv -> relu -> conv -> relu

Arrays are NCHW. Every layer exposes ``forward(x, *params) -> (y, cache)`` and
``backward(dy, cache, *params) -> (dx, param_grads)``. The network records the
caches of its last forward pass on a tape; :meth:`Network.backward` replays
that tape in reverse.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from selfcount.domain.grid import DensityMap
from selfcount.processing.vision import GrayImage

logger = logging.getLogger(__name__)

OUTPUT_STRIDE = 4
FEN_PREFIX = "fen."
ROT_PREFIX = "rot."
DENSITY_PREFIX = "density."

Grads = Dict[str, np.ndarray]


class StaleTapeError(RuntimeError):
    """Backward called without a matching forward pass."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Conv2d:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    @staticmethod
    def forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(f"conv expects (B, {w.shape[1]}, H, W) input, got {x.shape}")
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = sliding_window_view(padded, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
        y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # B, H, W, O
        y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(y), padded

    @staticmethod
    def backward(
        dy: np.ndarray, padded: np.ndarray, w: np.ndarray, b: np.ndarray
    ) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
        cols = sliding_window_view(padded, (3, 3), axis=(2, 3))
        dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))  # O, C, 3, 3
        db = dy.sum(axis=(0, 2, 3))
        dy_cols = sliding_window_view(
            np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1))), (3, 3), axis=(2, 3)
        )
        flipped = w[:, :, ::-1, ::-1]
        dx = np.tensordot(dy_cols, flipped, axes=([1, 4, 5], [0, 2, 3]))  # B, H, W, C
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), (dw, db)


class ReLU:
    @staticmethod
    def forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    @staticmethod
    def backward(dy: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, Tuple[()]]:
        return dy * mask, ()


class MaxPool2d:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""

    @staticmethod
    def forward(x: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, Tuple[int, ...]]]:
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pooling needs even spatial dims, got {h}x{w}")
        windows = (
            x.reshape(b, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h // 2, w // 2, 4)
        )
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    @staticmethod
    def backward(
        dy: np.ndarray, cache: Tuple[np.ndarray, Tuple[int, ...]]
    ) -> Tuple[np.ndarray, Tuple[()]]:
        idx, shape = cache
        b, c, h, w = shape
        windows = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(windows, idx[..., None], dy[..., None], axis=-1)
        dx = (
            windows.reshape(b, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )
        return dx, ()


class GlobalAvgPool:
    @staticmethod
    def forward(x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
        return x.mean(axis=(2, 3)), x.shape

    @staticmethod
    def backward(dy: np.ndarray, shape: Tuple[int, ...]) -> Tuple[np.ndarray, Tuple[()]]:
        b, c, h, w = shape
        dx = np.broadcast_to(dy[:, :, None, None] / (h * w), shape)
        return np.array(dx), ()


class Linear:
    """Fully connected layer, ``w`` shaped (out, in)."""

    @staticmethod
    def forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(f"linear expects (B, {w.shape[1]}) input, got {x.shape}")
        return x @ w.T + b, x

    @staticmethod
    def backward(
        dy: np.ndarray, x: np.ndarray, w: np.ndarray, b: np.ndarray
    ) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
        return dy @ w, (dy.T @ x, dy.sum(axis=0))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

# (layer, parameter name or None)
_Step = Tuple[type, Optional[str]]


def _conv_relu(name: str) -> List[_Step]:
    return [(Conv2d, name), (ReLU, None)]


_BLOCK12: List[_Step] = [
    *_conv_relu("fen.block1.conv1"),
    *_conv_relu("fen.block1.conv2"),
    (MaxPool2d, None),
    *_conv_relu("fen.block2.conv1"),
    *_conv_relu("fen.block2.conv2"),
    (MaxPool2d, None),
]
_BLOCK3: List[_Step] = [*_conv_relu("fen.block3.conv1"), *_conv_relu("fen.block3.conv2")]
_ROT_CONVS: List[_Step] = [
    *_conv_relu("rot.conv1"),
    *_conv_relu("rot.conv2"),
    (GlobalAvgPool, None),
]
_DENSITY: List[_Step] = [*_conv_relu("density.conv1"), *_conv_relu("density.conv2")]


@dataclass
class _Tape:
    kind: str
    version: int
    output_shape: Tuple[int, ...]
    fen_caches: Optional[Tuple[list, list]]
    head_caches: list
    fc_cache: Optional[np.ndarray] = None
    f3_channels: int = 0


@dataclass
class Network:
    """Parameters, trainable flags and optimizer state of the counter.

    ``params`` maps ``"<part>.<layer>.w"`` / ``".b"`` names to arrays. Build a
    fresh network with :meth:`initialize`.
    """

    params: Dict[str, np.ndarray]
    use_skip: bool = True
    rotation_classes: int = 4
    trainable: Dict[str, bool] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    version: int = 0
    _tape: Optional[_Tape] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for name in self.params:
            self.trainable.setdefault(name, True)

    @classmethod
    def initialize(
        cls,
        seed: int,
        width1: int = 16,
        width2: int = 32,
        width3: int = 64,
        rot_width: int = 64,
        head_width: int = 16,
        use_skip: bool = True,
        rotation_classes: int = 4,
        dtype: Union[type, np.dtype] = np.float32,
    ) -> "Network":
        """He-initialized network; identical seeds give identical weights."""
        rng = np.random.default_rng(seed)
        head_in = width2 + width3 if use_skip else width3
        convs = [
            ("fen.block1.conv1", 1, width1),
            ("fen.block1.conv2", width1, width1),
            ("fen.block2.conv1", width1, width2),
            ("fen.block2.conv2", width2, width2),
            ("fen.block3.conv1", width2, width3),
            ("fen.block3.conv2", width3, width3),
            ("rot.conv1", width3, rot_width),
            ("rot.conv2", rot_width, rot_width),
            ("density.conv1", head_in, head_width),
            ("density.conv2", head_width, 1),
        ]
        params: Dict[str, np.ndarray] = {}
        for name, c_in, c_out in convs:
            std = np.sqrt(2.0 / (c_in * 9))
            params[f"{name}.w"] = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)
            params[f"{name}.b"] = np.zeros(c_out, dtype=dtype)
        std = np.sqrt(1.0 / rot_width)
        params["rot.fc.w"] = (
            rng.standard_normal((rotation_classes, rot_width)) * std
        ).astype(dtype)
        params["rot.fc.b"] = np.zeros(rotation_classes, dtype=dtype)
        return cls(params=params, use_skip=use_skip, rotation_classes=rotation_classes)

    # -- parameter bookkeeping ------------------------------------------------

    def names(self, prefix: str = "") -> List[str]:
        return [name for name in self.params if name.startswith(prefix)]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name in self.names(prefix):
            self.trainable[name] = flag

    def freeze(self, prefix: str = FEN_PREFIX) -> None:
        self.set_trainable(prefix, False)

    def copy(self) -> "Network":
        return Network(
            params={k: v.copy() for k, v in self.params.items()},
            use_skip=self.use_skip,
            rotation_classes=self.rotation_classes,
            trainable=dict(self.trainable),
        )

    def _p(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        return self.params[f"{name}.w"], self.params[f"{name}.b"]

    @property
    def dtype(self) -> np.dtype:
        return self.params["fen.block1.conv1.w"].dtype

    # -- forward ----------------------------------------------------------------

    def _run(self, steps: Sequence[_Step], x: np.ndarray) -> Tuple[np.ndarray, list]:
        caches = []
        for layer, name in steps:
            if name is None:
                x, cache = layer.forward(x)
            else:
                x, cache = layer.forward(x, *self._p(name))
            caches.append(cache)
        return x, caches

    def _as_input(self, images: Union[np.ndarray, Sequence[GrayImage]]) -> np.ndarray:
        if isinstance(images, np.ndarray):
            x = images
        else:
            x = np.stack([img.as_float() for img in images])
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, H, W) or (B, 1, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ValueError(f"input sides must be divisible by {OUTPUT_STRIDE}, got {h}x{w}")
        return x.astype(self.dtype, copy=False)

    def fen_features(
        self, images: Union[np.ndarray, Sequence[GrayImage]]
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Block-2 and block-3 features, without recording a tape."""
        x = self._as_input(images)
        f2, _ = self._run(_BLOCK12, x)
        f3, _ = self._run(_BLOCK3, f2)
        return f2, f3

    def forward_rotation(self, images: Union[np.ndarray, Sequence[GrayImage]]) -> np.ndarray:
        """Rotation logits, shaped (B, rotation_classes)."""
        x = self._as_input(images)
        f2, c12 = self._run(_BLOCK12, x)
        f3, c3 = self._run(_BLOCK3, f2)
        pooled, head = self._run(_ROT_CONVS, f3)
        logits, fc_cache = Linear.forward(pooled, *self._p("rot.fc"))
        self._tape = _Tape(
            kind="rotation",
            version=self.version,
            output_shape=logits.shape,
            fen_caches=(c12, c3),
            head_caches=head,
            fc_cache=fc_cache,
        )
        return logits

    def forward_density(self, images: Union[np.ndarray, Sequence[GrayImage]]) -> np.ndarray:
        """Non-negative density maps, shaped (B, H / 4, W / 4)."""
        x = self._as_input(images)
        f2, c12 = self._run(_BLOCK12, x)
        f3, c3 = self._run(_BLOCK3, f2)
        return self._density_head(f2, f3, fen_caches=(c12, c3))

    def forward_density_from_features(self, f2: np.ndarray, f3: np.ndarray) -> np.ndarray:
        """Density head on precomputed FEN features; backward reaches the head only."""
        dtype = self.dtype
        return self._density_head(f2.astype(dtype, copy=False), f3.astype(dtype, copy=False), None)

    def _density_head(
        self, f2: np.ndarray, f3: np.ndarray, fen_caches: Optional[Tuple[list, list]]
    ) -> np.ndarray:
        features = np.concatenate([f2, f3], axis=1) if self.use_skip else f3
        out, head = self._run(_DENSITY, features)
        self._tape = _Tape(
            kind="density",
            version=self.version,
            output_shape=out.shape,
            fen_caches=fen_caches,
            head_caches=head,
            f3_channels=f3.shape[1],
        )
        return out[:, 0]

    # -- backward ---------------------------------------------------------------

    def _unwind(
        self, steps: Sequence[_Step], caches: list, dy: np.ndarray, grads: Grads
    ) -> np.ndarray:
        for (layer, name), cache in zip(reversed(steps), reversed(caches)):
            if name is None:
                dy, _ = layer.backward(dy, cache)
            else:
                dy, (dw, db) = layer.backward(dy, cache, *self._p(name))
                if self.trainable[f"{name}.w"]:
                    grads[f"{name}.w"] = dw
                if self.trainable[f"{name}.b"]:
                    grads[f"{name}.b"] = db
        return dy

    def _fen_trainable(self) -> bool:
        return any(self.trainable[name] for name in self.names(FEN_PREFIX))

    def backward(self, upstream: np.ndarray) -> Grads:
        """Gradients of ``sum(upstream * output)`` for every trainable parameter.

        ``upstream`` matches the output of the last forward call (logits, or
        density maps with or without the channel axis). Frozen parameters
        get no entry.
        """
        tape = self._tape
        if tape is None:
            raise StaleTapeError("backward called before any forward pass")
        if tape.version != self.version:
            raise StaleTapeError(
                f"tape recorded at version {tape.version}, parameters now at {self.version}"
            )
        dy = np.asarray(upstream, dtype=self.dtype)
        if tape.kind == "density" and dy.ndim == 3:
            dy = dy[:, None]
        if dy.shape != tape.output_shape:
            raise ValueError(f"upstream shape {dy.shape} does not match output {tape.output_shape}")

        grads: Grads = {}
        if tape.kind == "rotation":
            dpooled, (dw, db) = Linear.backward(dy, tape.fc_cache, *self._p("rot.fc"))
            if self.trainable["rot.fc.w"]:
                grads["rot.fc.w"] = dw
            if self.trainable["rot.fc.b"]:
                grads["rot.fc.b"] = db
            df3 = self._unwind(_ROT_CONVS, tape.head_caches, dpooled, grads)
            df2 = np.zeros(0)
        else:
            dfeatures = self._unwind(_DENSITY, tape.head_caches, dy, grads)
            if self.use_skip:
                split = dfeatures.shape[1] - tape.f3_channels
                df2, df3 = dfeatures[:, :split], dfeatures[:, split:]
            else:
                df2, df3 = np.zeros(0), dfeatures

        if tape.fen_caches is not None and self._fen_trainable():
            c12, c3 = tape.fen_caches
            dblock3_in = self._unwind(_BLOCK3, c3, df3, grads)
            if df2.size:
                dblock3_in = dblock3_in + df2
            self._unwind(_BLOCK12, c12, dblock3_in, grads)
        return grads

    # -- optimizer --------------------------------------------------------------

    def sgd_step(self, grads: Grads, lr: float, momentum: float = 0.0) -> None:
        """Momentum SGD, ``v = momentum * v + g``, ``p -= lr * v``.

        Frozen parameters are never touched, even when a gradient is supplied.
        """
        for name, grad in grads.items():
            if name not in self.params:
                raise ValueError(f"gradient for unknown parameter {name!r}")
            if grad.shape != self.params[name].shape:
                raise ValueError(
                    f"gradient for {name} has shape {grad.shape}, "
                    f"expected {self.params[name].shape}"
                )
        for name, grad in grads.items():
            if not self.trainable[name]:
                continue
            param = self.params[name]
            v = self.velocity.get(name)
            v = grad.astype(param.dtype) if v is None else momentum * v + grad
            self.velocity[name] = v.astype(param.dtype)
            self.params[name] = (param - lr * self.velocity[name]).astype(param.dtype)
        self.version += 1


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def forward_rotation(net: Network, crop: GrayImage) -> np.ndarray:
    return net.forward_rotation([crop])[0]


def forward_density(net: Network, crop: GrayImage) -> DensityMap:
    return DensityMap(net.forward_density([crop])[0].astype(np.float64))


def backward(net: Network, upstream: np.ndarray) -> Grads:
    return net.backward(upstream)


def sgd_step(net: Network, grads: Grads, lr: float, momentum: float = 0.0) -> Network:
    net.sgd_step(grads, lr, momentum)
    return net


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=int)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    batch = np.arange(logits.shape[0])
    loss = float(-log_probs[batch, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[batch, labels] -= 1.0
    return loss, dlogits / logits.shape[0]


def mean_feature_maps(net: Network, img: GrayImage) -> List[np.ndarray]:
    """Channel-mean activation of each FEN block output, block 1 first."""
    x = net._as_input([img])
    out1, _ = net._run(_BLOCK12[:5], x)
    out2, _ = net._run(_BLOCK12[5:], out1)
    out3, _ = net._run(_BLOCK3, out2)
    return [block[0].mean(axis=0).astype(np.float64) for block in (out1, out2, out3)]


def parameter_count(net: Network, prefix: str = "", trainable_only: bool = False) -> int:
    return int(
        sum(
            p.size
            for name, p in net.params.items()
            if name.startswith(prefix) and (net.trainable[name] or not trainable_only)
        )
    )


def parameter_digest(net: Network, names: Iterable[str]) -> str:
    """Hex digest over the raw bytes of the named parameters."""
    digest = hashlib.sha256()
    for name in sorted(names):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(net.params[name]).tobytes())
    return digest.hexdigest()
