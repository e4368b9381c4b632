"""Tiny conv segmentation network, K-view student/teacher ensemble, rotations."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

HIDDEN = 8
LAYERS = (("conv1", 3), ("conv2", 3), ("conv3", 1))


@dataclass(frozen=True)
class Transform:
    """Rotation of the last two axes by ``r`` quarter turns."""

    r: int = 0

    @classmethod
    def random(cls, rng):
        return cls(int(rng.integers(4)))

    def inverse(self):
        return Transform((-self.r) % 4)

    def __call__(self, x):
        return apply_transform(self, x)


def apply_transform(t, x):
    """Exact quarter-turn rotation of the spatial axes; channels untouched."""
    if isinstance(x, Tensor):
        return T.rot90(x, t.r)
    x = np.asarray(x)
    if t.r % 2 and x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"odd quarter-turn needs square spatial dims, got {x.shape[-2:]}")
    return np.ascontiguousarray(np.rot90(x, t.r % 4, axes=(-2, -1)))


class SegNetTiny:
    """conv3x3(1->8)+relu, conv3x3(8->8)+relu, conv1x1(8->C)."""

    def __init__(self, params, n_classes):
        self.params = params
        self.n_classes = n_classes

    @classmethod
    def initialize(cls, rng, n_classes=2, requires_grad=True):
        shapes = {
            "conv1": (HIDDEN, 1, 3, 3),
            "conv2": (HIDDEN, HIDDEN, 3, 3),
            "conv3": (n_classes, HIDDEN, 1, 1),
        }
        params = {}
        for name, _ in LAYERS:
            shape = shapes[name]
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad)
            params[f"{name}.bias"] = Tensor(np.zeros(shape[0]), requires_grad)
        return cls(params, n_classes)

    def copy(self, requires_grad=None):
        flag = lambda t: t.requires_grad if requires_grad is None else requires_grad
        return SegNetTiny(
            {k: Tensor(v.data.copy(), flag(v)) for k, v in self.params.items()}, self.n_classes
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def logits(self, image):
        h = T.as_tensor(image)
        for i, (name, _) in enumerate(LAYERS):
            h = T.conv2d(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
            if i < len(LAYERS) - 1:
                h = T.relu(h)
        return h

    def __call__(self, image):
        return forward(self, image)


def forward(net, image):
    """Class probability map for a [1,H,W] image (or an [N,1,H,W] batch)."""
    image = T.as_tensor(image)
    if not np.all(np.isfinite(image.data)):
        raise T.NumericalError("non-finite input image")
    return T.softmax_channels(net.logits(image))


@dataclass
class ViewEnsemble:
    students: list
    teachers: list
    seed: int = 0
    seed_offsets: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.students)

    @property
    def n_classes(self):
        return self.students[0].n_classes


def init(seed, n_classes=2, k=2):
    """K independently initialized students (seed + view index), teachers copied."""
    if k < 1:
        raise ValueError("need at least one view")
    students = [SegNetTiny.initialize(np.random.default_rng(seed + v), n_classes) for v in range(k)]
    teachers = [s.copy(requires_grad=False) for s in students]
    return ViewEnsemble(students, teachers, seed, list(range(k)))


def soft_vote(preds):
    """Elementwise mean of K probability maps."""
    if not preds:
        raise ValueError("soft_vote needs at least one prediction")
    arrs = [p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in preds]
    for a in arrs[1:]:
        if a.shape != arrs[0].shape:
            raise ShapeError(f"shape mismatch: {arrs[0].shape} vs {a.shape}")
    if len(arrs) == 1:
        return arrs[0].copy()
    return np.mean(arrs, axis=0)
