"""Backbone assembly, directional branch networks, and descriptor extraction.

A branch network is one backbone (stem conv block, then alternating dense
units and max pools), one directional pooling layer, one spatial
normalization layer and, during training, a bias-free linear classifier on
the flattened normalized map.  The four branches are independent networks
with their own weights; their features are concatenated only at extraction
time, always in the fixed order h, v, d, a.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import ConvBlock, DenseUnit, MaxPool2D
from .pooling import DIRECTIONS, DirectionalPool, SpatialNorm

BRANCH_ORDER = DIRECTIONS  # "hvda"

# (channels, leaky-relu slope) per stage of the full 128x128 profile; the
# final unit uses slope 0 (plain ReLU) and every max pool halves h and w.
FULL_UNITS = ((64, 0.15), (128, 0.15), (192, 0.15), (256, 0.15), (320, 0.0))


@dataclass(frozen=True)
class NetworkConfig:
    profile: str
    input_size: int
    stem_channels: int
    unit_channels: tuple
    unit_slopes: tuple
    stem_slope: float = 0.15
    in_channels: int = 3
    sn_window: int = 4
    branches: str = BRANCH_ORDER
    n_classes: int = 0
    normalize_descriptor: bool = False  # optional whole-descriptor L2 norm

    def __post_init__(self):
        if len(self.unit_channels) != len(self.unit_slopes):
            raise ValueError("unit_channels and unit_slopes lengths differ")
        bad = [b for b in self.branches if b not in BRANCH_ORDER]
        if bad or not self.branches:
            raise ValueError(f"branches must be a non-empty subset of {BRANCH_ORDER!r}")
        if self.final_map_size < 4:
            raise ValueError(
                f"configuration ends with a {self.final_map_size}x{self.final_map_size} map; need >= 4x4"
            )

    @property
    def n_stages(self) -> int:
        return len(self.unit_channels)

    @property
    def final_map_size(self) -> int:
        return self.input_size // (2**self.n_stages)

    @property
    def final_channels(self) -> int:
        return self.unit_channels[-1]

    def branch_length(self, direction: str) -> int:
        d = self.final_map_size
        return d if direction in "hv" else 2 * d - 1

    def branch_dim(self, direction: str) -> int:
        return self.branch_length(direction) * self.final_channels

    @property
    def descriptor_dim(self) -> int:
        return sum(self.branch_dim(b) for b in BRANCH_ORDER if b in self.branches)

    def descriptor_slices(self) -> dict:
        """Byte layout of the concatenated descriptor: branch -> slice."""
        slices, off = {}, 0
        for b in BRANCH_ORDER:
            if b in self.branches:
                dim = self.branch_dim(b)
                slices[b] = slice(off, off + dim)
                off += dim
        return slices


def full_config(n_classes=0, branches=BRANCH_ORDER, normalize_descriptor=False) -> NetworkConfig:
    """The recommended 128x128 configuration (descriptor dim 7040)."""
    return NetworkConfig(
        profile="full",
        input_size=128,
        stem_channels=64,
        unit_channels=tuple(c for c, _ in FULL_UNITS),
        unit_slopes=tuple(s for _, s in FULL_UNITS),
        branches=branches,
        n_classes=n_classes,
        normalize_descriptor=normalize_descriptor,
    )


def toy_config(seed_channels=8, input_size=32, n_classes=0, branches=BRANCH_ORDER) -> NetworkConfig:
    """Desk-scale profile: same structure, fewer stages and channels.

    input_size 32 gives three unit/pool stages, 64 gives four; either way
    the final map is 4x4, so descriptor arithmetic matches the full profile
    with the reduced channel count.
    """
    if input_size not in (32, 64):
        raise ValueError("toy profile supports input sizes 32 and 64")
    stages = {32: 3, 64: 4}[input_size]
    channels = tuple(seed_channels * (i + 1) for i in range(stages))
    slopes = (0.15,) * (stages - 1) + (0.0,)
    return NetworkConfig(
        profile="toy",
        input_size=input_size,
        stem_channels=seed_channels,
        unit_channels=channels,
        unit_slopes=slopes,
        branches=branches,
        n_classes=n_classes,
    )


def expected_shapes(config: NetworkConfig) -> list:
    """Declared (name, (h, w, c)) rows for the backbone and the four pools.

    The vertical pool row is the pre-transposition shape (1, d, c); it is
    stored transposed to (d, 1, c) in memory.
    """
    rows = [("stem", (config.input_size, config.input_size, config.stem_channels))]
    size = config.input_size
    for i, c in enumerate(config.unit_channels, start=1):
        rows.append((f"unit{i}", (size, size, c)))
        size //= 2
        rows.append((f"pool{i}", (size, size, c)))
    d, c = config.final_map_size, config.final_channels
    rows.append(("row_pool", (d, 1, c)))
    rows.append(("col_pool", (1, d, c)))
    rows.append(("diag_pool", (2 * d - 1, 1, c)))
    rows.append(("antidiag_pool", (2 * d - 1, 1, c)))
    return rows


class BranchNetwork:
    """One directional feature network; see the module docstring."""

    def __init__(self, config: NetworkConfig, direction: str, rng=None, init_std=0.01):
        if direction not in BRANCH_ORDER:
            raise ValueError(f"unknown direction {direction!r}")
        self.config = config
        self.direction = direction
        self.stem = ConvBlock(
            config.in_channels, config.stem_channels, config.stem_slope, rng=rng, init_std=init_std
        )
        self.units = []
        self.pools = []
        c_in = config.stem_channels
        for c_out, slope in zip(config.unit_channels, config.unit_slopes):
            self.units.append(DenseUnit(c_in, c_out, slope, rng=rng, init_std=init_std))
            self.pools.append(MaxPool2D())
            c_in = c_out
        self.dir_pool = DirectionalPool(direction)
        self.sn = SpatialNorm(config.sn_window)
        if config.n_classes > 0:
            dim = config.branch_dim(direction)
            if rng is None:
                self.classifier = np.zeros((dim, config.n_classes))
            else:
                self.classifier = rng.normal(0.0, init_std, size=(dim, config.n_classes))
        else:
            self.classifier = None
        self.g_classifier = None
        self._feats = None
        self._map_shape = None
        self._expected = {name: shape for name, shape in expected_shapes(config)}

    def _check(self, name, out):
        want = self._expected[name]
        got = out.shape[1:]
        if got != want:
            raise AssertionError(f"{name}: produced {got}, declared {want}")

    def backbone_forward(self, x: np.ndarray, train: bool = False, shapes=None) -> np.ndarray:
        n, h, w, c = x.shape
        if (h, w, c) != (self.config.input_size, self.config.input_size, self.config.in_channels):
            raise ValueError(
                f"expected input (n, {self.config.input_size}, {self.config.input_size}, "
                f"{self.config.in_channels}), got {x.shape}"
            )
        out = self.stem.forward(x, train)
        self._check("stem", out)
        if shapes is not None:
            shapes.append(("stem", out.shape[1:]))
        for i, (unit, pool) in enumerate(zip(self.units, self.pools), start=1):
            out = unit.forward(out, train)
            self._check(f"unit{i}", out)
            if shapes is not None:
                shapes.append((f"unit{i}", out.shape[1:]))
            out = pool.forward(out)
            self._check(f"pool{i}", out)
            if shapes is not None:
                shapes.append((f"pool{i}", out.shape[1:]))
        return out

    def forward_features(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Flattened, spatially normalized directional map: (n, L*c)."""
        base = self.backbone_forward(x, train)
        normed = self.sn.forward(self.dir_pool.forward(base))
        self._map_shape = normed.shape
        self._feats = normed.reshape(x.shape[0], -1)
        return self._feats

    def forward_logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if self.classifier is None:
            raise RuntimeError("network was built without a classifier")
        return self.forward_features(x, train) @ self.classifier

    def backward_features(self, grad_feats: np.ndarray) -> np.ndarray:
        g = self.sn.backward(grad_feats.reshape(self._map_shape))
        g = self.dir_pool.backward(g)
        for unit, pool in zip(reversed(self.units), reversed(self.pools)):
            g = pool.backward(g)
            g = unit.backward(g)
        return self.stem.backward(g)

    def backward_logits(self, grad_logits: np.ndarray) -> np.ndarray:
        """Backprop from d(loss)/d(logits); leaves gradients on the layers."""
        self.g_classifier = self._feats.T @ grad_logits
        return self.backward_features(grad_logits @ self.classifier.T)

    def _modules(self):
        mods = [("stem", self.stem)]
        mods += [(f"unit{i}", u) for i, u in enumerate(self.units, start=1)]
        return mods

    def named_params(self):
        out = [(f"{tag}.{n}", p) for tag, mod in self._modules() for n, p in mod.params()]
        if self.classifier is not None:
            out.append(("classifier.W", self.classifier))
        return out

    def named_grads(self):
        out = [(f"{tag}.{n}", g) for tag, mod in self._modules() for n, g in mod.grads()]
        if self.classifier is not None:
            out.append(("classifier.W", self.g_classifier))
        return out

    def named_state(self):
        """Everything the model file persists: params plus BN running stats."""
        out = list(self.named_params())
        out += [(f"{tag}.{n}", s) for tag, mod in self._modules() for n, s in mod.state()]
        return out

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.named_params()])

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([g.ravel() for _, g in self.named_grads()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        off = 0
        for _, p in self.named_params():
            p[...] = vec[off : off + p.size].reshape(p.shape)
            off += p.size
        if off != vec.size:
            raise ValueError(f"vector has {vec.size} entries, network takes {off}")


def branch_rng(seed: int, direction: str, stream: int):
    """Deterministic per-branch, per-purpose RNG (stream 0 = weight init)."""
    return np.random.default_rng([int(seed), BRANCH_ORDER.index(direction), int(stream)])


class DirectionalModel:
    """The enabled branch networks plus descriptor concatenation."""

    def __init__(self, config: NetworkConfig, branches: dict):
        self.config = config
        self.branches = branches  # direction -> BranchNetwork, canonical order

    @classmethod
    def build(cls, config: NetworkConfig, seed: int = 0, init_std: float = 0.01):
        nets = {}
        for b in BRANCH_ORDER:
            if b in config.branches:
                nets[b] = BranchNetwork(config, b, rng=branch_rng(seed, b, 0), init_std=init_std)
        return cls(config, nets)

    @classmethod
    def empty(cls, config: NetworkConfig):
        """Zero-initialized model, used when loading weights from a file."""
        nets = {}
        for b in BRANCH_ORDER:
            if b in config.branches:
                nets[b] = BranchNetwork(config, b, rng=None)
        return cls(config, nets)

    def extract(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Concatenated descriptor per image, branches in h, v, d, a order."""
        chunks = []
        for lo in range(0, images.shape[0], batch_size):
            x = images[lo : lo + batch_size]
            feats = [net.forward_features(x, train=False) for net in self.branches.values()]
            chunks.append(np.concatenate(feats, axis=1))
        desc = np.concatenate(chunks, axis=0)
        if self.config.normalize_descriptor:
            norms = np.linalg.norm(desc, axis=1, keepdims=True)
            desc = desc / np.maximum(norms, 1e-12)
        return desc

    def descriptor_slices(self) -> dict:
        return self.config.descriptor_slices()


def with_classes(config: NetworkConfig, n_classes: int) -> NetworkConfig:
    return replace(config, n_classes=n_classes)
