"""Toy-scale FastFCN: halving backbone, JPU head, classifiers and SGD.

The network maps an ``(n, 3, H, W)`` image batch to per-pixel logits over
the K land-cover classes. Stage ``i`` of the backbone (``i = 1..5``) is a
stride-2 convolution followed by a regular convolution, so ``Conv_i`` sits
at output stride ``2**i``. The JPU head fuses Conv3..Conv5 back at stride 8.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .nn import ConvLayer, ConvSpec, NumericalError, ShapeError
from .raster import NUM_CLASSES, ClassMask, Raster


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    stage_channels: tuple = (8, 16, 32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) != 5:
            raise ValueError("backbone needs exactly five stages")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage channels must be ascending")


@dataclass(frozen=True)
class JPUConfig:
    fused_width: int = 16
    dilation_rates: tuple = (1, 2, 4, 8)
    # channels of the fused output; None means "same as Conv5"
    out_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(d) for d in self.dilation_rates))
        if self.fused_width < 1 or not self.dilation_rates or min(self.dilation_rates) < 1:
            raise ValueError(f"invalid JPU config {self}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 0.01
    aux_weight: float = 0.2
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.aux_weight <= 1.0:
            raise ValueError("aux_weight must lie in [0, 1]")


class _Conv:
    """Conv layer with optional ReLU that remembers what backward needs."""

    def __init__(self, layer: ConvLayer, relu: bool = True):
        self.layer = layer
        self.relu = relu
        self._x = None
        self._y = None

    def forward(self, x):
        y = nn.conv2d_forward(x, self.layer)
        self._x = x
        if self.relu:
            y = nn.relu(y)
            self._y = y
        return y

    def backward(self, g):
        if self.relu:
            g = g * (self._y > 0)
        gx, gw, gb = nn.conv2d_backward(self._x, self.layer, g)
        self.layer.weight.grad += gw
        self.layer.bias.grad += gb
        return gx


def image_to_tensor(images) -> np.ndarray:
    """uint8 ``(n, H, W, 3)`` (or one Raster) -> float32 ``(n, 3, H, W)`` in [-1, 1]."""
    if isinstance(images, Raster):
        images = images.data[None]
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=nn.DTYPE) / np.float32(127.5) - np.float32(1.0)


class FastFCN:
    def __init__(self, backbone: BackboneConfig | None = None, jpu: JPUConfig | None = None,
                 num_classes: int = NUM_CLASSES, seed: int = 0, dtype=nn.DTYPE):
        self.backbone_config = backbone or BackboneConfig()
        self.jpu_config = jpu or JPUConfig()
        self.num_classes = num_classes
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        def conv(cin, cout, k=3, stride=1, dilation=1, relu=True):
            pad = dilation * (k - 1) // 2
            return _Conv(ConvLayer(ConvSpec(cin, cout, k, stride, dilation, pad), rng=rng, dtype=dtype), relu)

        ch = (self.backbone_config.input_channels,) + self.backbone_config.stage_channels
        self.stages = [[conv(ch[i], ch[i + 1], stride=2), conv(ch[i + 1], ch[i + 1])] for i in range(5)]

        jc = self.jpu_config
        w = jc.fused_width
        self.proj = [conv(ch[3], w), conv(ch[4], w), conv(ch[5], w)]
        self.branches = [conv(3 * w, w, dilation=d) for d in jc.dilation_rates]
        self.fused_channels = jc.out_channels or ch[5]
        self.fuse = conv(len(jc.dilation_rates) * w, self.fused_channels, k=1)
        self.classifier = conv(self.fused_channels, num_classes, k=1, relu=False)
        self.aux_classifier = conv(ch[4], num_classes, k=1, relu=False)
        self._cache = {}

    # parameters ---------------------------------------------------------

    def named_layers(self) -> dict[str, ConvLayer]:
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            for j, c in enumerate(stage):
                out[f"conv{i}.{j}"] = c.layer
        for name, c in zip(("proj3", "proj4", "proj5"), self.proj):
            out[f"jpu.{name}"] = c.layer
        for d, c in zip(self.jpu_config.dilation_rates, self.branches):
            out[f"jpu.dilated{d}"] = c.layer
        out["jpu.fuse"] = self.fuse.layer
        out["classifier"] = self.classifier.layer
        out["aux_classifier"] = self.aux_classifier.layer
        return out

    def params(self) -> list[nn.Param]:
        return [p for layer in self.named_layers().values() for p in layer.params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype) -> "FastFCN":
        """Copy of the model with every parameter cast to ``dtype``."""
        clone = FastFCN(self.backbone_config, self.jpu_config, self.num_classes, self.seed, dtype)
        for (_, src), (_, dst) in zip(self.named_layers().items(), clone.named_layers().items()):
            dst.weight.value[...] = src.weight.value
            dst.bias.value[...] = src.bias.value
        return clone

    # forward ------------------------------------------------------------

    def backbone_forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Conv1..Conv5 feature maps at output strides 2, 4, 8, 16, 32."""
        nn._check_nchw(x)
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} is not divisible by 32")
        if x.shape[1] != self.backbone_config.input_channels:
            raise ShapeError(f"expected {self.backbone_config.input_channels} input channels, got {x.shape[1]}")
        feats = []
        for stage in self.stages:
            for c in stage:
                x = c.forward(x)
            feats.append(x)
        return feats

    def jpu_forward(self, conv3, conv4, conv5) -> np.ndarray:
        h3, w3 = conv3.shape[2:]
        if conv4.shape[2:] != (h3 // 2, w3 // 2) or conv5.shape[2:] != (h3 // 4, w3 // 4) or h3 % 4 or w3 % 4:
            raise ShapeError(
                f"JPU inputs must have 4:2:1 spatial sizes, got {conv3.shape[2:]}, {conv4.shape[2:]}, {conv5.shape[2:]}"
            )
        p3 = self.proj[0].forward(conv3)
        p4 = self.proj[1].forward(conv4)
        p5 = self.proj[2].forward(conv5)
        cat = np.concatenate(
            [p3, nn.upsample_bilinear(p4, h3, w3), nn.upsample_bilinear(p5, h3, w3)], axis=1
        )
        multi = np.concatenate([b.forward(cat) for b in self.branches], axis=1)
        self._cache["jpu_sizes"] = (p4.shape[2:], p5.shape[2:])
        return self.fuse.forward(multi)

    def _jpu_backward(self, g):
        w = self.jpu_config.fused_width
        gm = self.fuse.backward(g)
        gcat = 0
        for i, b in enumerate(self.branches):
            gcat = gcat + b.backward(np.ascontiguousarray(gm[:, i * w : (i + 1) * w]))
        (h4, w4), (h5, w5) = self._cache["jpu_sizes"]
        g3 = self.proj[0].backward(np.ascontiguousarray(gcat[:, :w]))
        g4 = self.proj[1].backward(nn.upsample_bilinear_backward(gcat[:, w : 2 * w], h4, w4))
        g5 = self.proj[2].backward(nn.upsample_bilinear_backward(gcat[:, 2 * w :], h5, w5))
        return g3, g4, g5

    def dilated_reference_forward(self, x: np.ndarray) -> np.ndarray:
        """DilatedFCN path: stages 4 and 5 at stride 1 with dilation 2 and 4.

        Reuses the backbone weights; the result sits at output stride 8 and is
        what the JPU output stands in for. Forward only.
        """
        nn._check_nchw(x)
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} is not divisible by 32")
        for stage in self.stages[:3]:
            for c in stage:
                x = nn.relu(nn.conv2d_forward(x, c.layer))
        for stage, d in zip(self.stages[3:], (2, 4)):
            for c in stage:
                s = c.layer.spec
                dilated = ConvSpec(s.in_channels, s.out_channels, s.kernel, 1, d, d * (s.kernel - 1) // 2)
                layer = ConvLayer(dilated, c.layer.weight.value, c.layer.bias.value, dtype=x.dtype)
                x = nn.relu(nn.conv2d_forward(x, layer))
        return x

    def forward_logits(self, x: np.ndarray):
        """Main and auxiliary logits, both ``(n, K, H, W)``."""
        h, w = x.shape[2:]
        c1, c2, c3, c4, c5 = self.backbone_forward(x)
        fused = self.jpu_forward(c3, c4, c5)
        main_small = self.classifier.forward(fused)
        aux_small = self.aux_classifier.forward(c4)
        self._cache["small"] = (main_small.shape[2:], aux_small.shape[2:])
        return nn.upsample_bilinear(main_small, h, w), nn.upsample_bilinear(aux_small, h, w)

    def backward(self, g_main, g_aux):
        """Accumulate parameter gradients for the last :meth:`forward_logits` call."""
        (hm, wm), (ha, wa) = self._cache["small"]
        g_fused = self.classifier.backward(nn.upsample_bilinear_backward(g_main, hm, wm))
        g_c4_aux = self.aux_classifier.backward(nn.upsample_bilinear_backward(g_aux, ha, wa))
        g3, g4, g5 = self._jpu_backward(g_fused)
        g4 = g4 + g_c4_aux
        stage_grads = {3: g3, 4: g4, 5: g5}
        g = None
        for i in range(5, 0, -1):
            if i in stage_grads:
                g = stage_grads[i] if g is None else g + stage_grads[i]
            for c in reversed(self.stages[i - 1]):
                g = c.backward(g)
        return g

    def loss(self, x, masks, aux_weight: float):
        """Forward pass and loss terms; leaves the cache ready for :meth:`backward`."""
        main, aux = self.forward_logits(x)
        lm = nn.softmax_xent(main, masks, ignore_label=0)
        la = nn.softmax_xent(aux, masks, ignore_label=0)
        return lm.loss + aux_weight * la.loss, lm, la

    def loss_and_grad(self, x, masks, aux_weight: float) -> float:
        self.zero_grad()
        total, lm, la = self.loss(x, masks, aux_weight)
        self.backward(lm.grad, (aux_weight * la.grad).astype(lm.grad.dtype))
        return total


def train_step(model: FastFCN, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig) -> float:
    """One SGD step with L2 weight decay; returns the loss before the update."""
    masks = np.asarray(masks)
    if images.shape[0] != masks.shape[0] or images.shape[2:] != masks.shape[1:]:
        raise ShapeError(f"image batch {images.shape} and mask batch {masks.shape} disagree")
    total = model.loss_and_grad(images, masks, cfg.aux_weight)
    if not np.isfinite(total):
        raise NumericalError(f"non-finite loss {total}")
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for p in model.params():
        p.value -= lr * (p.grad + wd * p.value)
    return total


def predict_logits(model: FastFCN, x: np.ndarray) -> np.ndarray:
    main, _ = model.forward_logits(x)
    return main


def logits_to_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes (lowest index wins ties), shifted to labels 1..K."""
    return (np.argmax(logits, axis=1) + 1).astype(np.uint8)


def predict(model: FastFCN, image: Raster) -> ClassMask:
    if image.channels != 3:
        raise ShapeError(f"predict needs a 3-channel raster, got {image.channels}")
    if image.width % 32 or image.height % 32:
        raise ShapeError(f"image size {image.width}x{image.height} is not divisible by 32")
    labels = logits_to_labels(predict_logits(model, image_to_tensor(image)))[0]
    return ClassMask(labels)


def predict_batch(model: FastFCN, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Labels ``(n, H, W)`` for a uint8 image stack ``(n, H, W, 3)``."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(logits_to_labels(predict_logits(model, image_to_tensor(images[i : i + batch_size]))))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3], np.uint8)


def config_dict(model: FastFCN) -> dict:
    return {
        "backbone": asdict(model.backbone_config),
        "jpu": asdict(model.jpu_config),
        "num_classes": model.num_classes,
        "seed": model.seed,
    }
