"""Standard gradient-check suite over every layer kind plus a toy network.

Each check builds a scalar probe loss (a fixed random linear functional of
the layer output, or the training objective for the network), computes the
analytic gradient once, and hands both to the central-difference oracle.

Tolerances: operators whose probe loss is linear or quadratic in the
coordinates (convolution, max pooling away from ties, the directional
pools) are held to 1e-8 relative error and checked with a large step,
since the central difference has no truncation error there, only roundoff.
Smooth nonlinear layers are held to 1e-6 at step 1e-5, and the full
network objective to the tolerance passed in (1e-5 by default).

Layers containing a leaky ReLU or an argmax are only piecewise smooth, so
those checks hand the oracle a region fingerprint (activation sign masks
and pooling argmaxes); probes that straddle a region boundary are invalid
for central differences and get skipped.
"""

from __future__ import annotations

import numpy as np

from . import gradcheck
from .layers import BatchNorm, Conv2D, ConvBlock, DenseUnit, LeakyReLU, MaxPool2D
from .network import BranchNetwork, toy_config, with_classes
from .pooling import DirectionalPool, SpatialNorm
from .training import softmax_l2_loss

TOL_LINEAR = 1e-8
TOL_NONLINEAR = 1e-6
TOL_NETWORK = 1e-5

STEP_LINEAR = 1e-2
STEP_SMOOTH = 1e-5


def layer_probe(forward, backward, param_arrays, x0, rng, *, n_outputs_like):
    """Build (f, theta0, analytic) for loss = <forward(x), R> with fixed R.

    theta is the concatenation of the input with every parameter array, so
    one check covers input and parameter gradients together.
    """
    r = rng.standard_normal(n_outputs_like.shape)

    x_buf = x0.copy()
    theta0 = gradcheck.pack([x0] + list(param_arrays))

    def f(theta):
        gradcheck.unpack_into(theta, [x_buf] + list(param_arrays))
        return float((forward(x_buf) * r).sum())

    f(theta0)  # forward state at theta0 for the analytic backward pass
    grad_arrays = backward(r)
    analytic = gradcheck.pack(list(grad_arrays))
    f(theta0)  # leave parameters as we found them
    return f, theta0, analytic


def _mask_bytes(block: ConvBlock) -> bytes:
    return (block.act._mask == 1.0).tobytes()


def _unit_fingerprint(unit: DenseUnit) -> bytes:
    return b"".join(_mask_bytes(b) for b in (unit.block_a, unit.block_b, unit.block_c))


def dead_bias_mask(named_params, lead: int) -> np.ndarray:
    """Exclusion mask for conv biases that sit directly under a batch norm.

    BN subtracts the per-channel mean, so those biases have exactly zero
    true gradient; a relative-error probe there only compares rounding
    noise against rounding noise.  The live-bias path is covered by the
    standalone convolution check.  `lead` counts coordinates (e.g. the
    probe input) packed ahead of the parameters.
    """
    sizes = [lead] + [p.size for _, p in named_params]
    mask = np.zeros(sum(sizes), dtype=bool)
    off = lead
    for name, p in named_params:
        if name.endswith("conv.b"):
            mask[off : off + p.size] = True
        off += p.size
    return mask


def _check(f, theta, analytic, tol, seed, *, n_probes=200, step=STEP_SMOOTH,
           exclude=None, fingerprint=None):
    return gradcheck.check_gradients(
        f,
        theta,
        analytic,
        tolerance=tol,
        n_probes=n_probes,
        step=step,
        rng=np.random.default_rng(seed),
        exclude=exclude,
        fingerprint=fingerprint,
    )


def check_conv(seed=0, tol=TOL_LINEAR):
    rng = np.random.default_rng(seed)
    layer = Conv2D(3, 4, rng=rng, init_std=0.5)
    x0 = rng.standard_normal((2, 6, 6, 3))
    f, theta, analytic = layer_probe(
        layer.forward,
        lambda r: (layer.backward(r), layer.gW, layer.gb),
        [layer.W, layer.b],
        x0,
        rng,
        n_outputs_like=layer.forward(x0),
    )
    # loss is quadratic in (x, W, b) jointly: central differences are exact
    return _check(f, theta, analytic, tol, seed, step=STEP_LINEAR)


def check_batchnorm(seed=1, tol=TOL_NONLINEAR):
    rng = np.random.default_rng(seed)
    layer = BatchNorm(3)
    layer.gamma[:] = rng.normal(1.0, 0.3, 3)
    layer.beta[:] = rng.normal(0.0, 0.3, 3)
    x0 = rng.standard_normal((4, 5, 5, 3))
    f, theta, analytic = layer_probe(
        lambda x: layer.forward(x, train=True),
        lambda r: (layer.backward(r), layer.ggamma, layer.gbeta),
        [layer.gamma, layer.beta],
        x0,
        rng,
        n_outputs_like=layer.forward(x0, train=True),
    )
    return _check(f, theta, analytic, tol, seed)


def check_leaky_relu(seed=2, tol=TOL_NONLINEAR, slope=0.15):
    rng = np.random.default_rng(seed)
    layer = LeakyReLU(slope)
    x0 = rng.standard_normal((2, 7, 7, 3))
    f, theta, analytic = layer_probe(
        layer.forward, lambda r: (layer.backward(r),), [], x0, rng,
        n_outputs_like=layer.forward(x0),
    )
    # central differences are invalid across the kink at 0
    exclude = np.abs(theta) < 10 * STEP_SMOOTH
    return _check(f, theta, analytic, tol, seed, exclude=exclude)


def check_maxpool(seed=3, tol=TOL_LINEAR):
    rng = np.random.default_rng(seed)
    layer = MaxPool2D()
    x0 = rng.standard_normal((2, 9, 9, 3))
    f, theta, analytic = layer_probe(
        layer.forward, lambda r: (layer.backward(r),), [], x0, rng,
        n_outputs_like=layer.forward(x0),
    )
    fingerprint = lambda: layer._cache[0].tobytes()
    return _check(f, theta, analytic, tol, seed, fingerprint=fingerprint)


def check_conv_block(seed=4, tol=TOL_NONLINEAR):
    rng = np.random.default_rng(seed)
    block = ConvBlock(2, 3, slope=0.15, rng=rng, init_std=0.5)
    x0 = rng.standard_normal((2, 6, 6, 2))
    named = block.params()
    f, theta, analytic = layer_probe(
        lambda x: block.forward(x, train=True),
        lambda r: (block.backward(r), *[g for _, g in block.grads()]),
        [p for _, p in named],
        x0,
        rng,
        n_outputs_like=block.forward(x0, train=True),
    )
    return _check(
        f, theta, analytic, tol, seed,
        exclude=dead_bias_mask(named, x0.size),
        fingerprint=lambda: _mask_bytes(block),
    )


def check_dense_unit(seed=5, tol=TOL_NONLINEAR):
    rng = np.random.default_rng(seed)
    unit = DenseUnit(2, 2, slope=0.15, rng=rng, init_std=0.5)
    x0 = rng.standard_normal((1, 4, 4, 2))
    named = unit.params()
    f, theta, analytic = layer_probe(
        lambda x: unit.forward(x, train=True),
        lambda r: (unit.backward(r), *[g for _, g in unit.grads()]),
        [p for _, p in named],
        x0,
        rng,
        n_outputs_like=unit.forward(x0, train=True),
    )
    return _check(
        f, theta, analytic, tol, seed,
        exclude=dead_bias_mask(named, x0.size),
        fingerprint=lambda: _unit_fingerprint(unit),
    )


def check_directional(direction, seed=6, tol=TOL_LINEAR, d=8, c=4):
    rng = np.random.default_rng(seed)
    layer = DirectionalPool(direction)
    x0 = rng.standard_normal((2, d, d, c))
    f, theta, analytic = layer_probe(
        layer.forward, lambda r: (layer.backward(r),), [], x0, rng,
        n_outputs_like=layer.forward(x0),
    )
    # pooling is linear, so any step works; a large one drowns the roundoff
    return _check(f, theta, analytic, tol, seed, step=0.1)


def check_spatial_norm(seed=7, tol=TOL_NONLINEAR):
    rng = np.random.default_rng(seed)
    layer = SpatialNorm(4)
    x0 = rng.standard_normal((3, 7, 1, 10))
    f, theta, analytic = layer_probe(
        layer.forward, lambda r: (layer.backward(r),), [], x0, rng,
        n_outputs_like=layer.forward(x0),
    )
    return _check(f, theta, analytic, tol, seed)


def network_fingerprint(net: BranchNetwork) -> bytes:
    parts = [_mask_bytes(net.stem)]
    parts += [_unit_fingerprint(u) for u in net.units]
    parts += [p._cache[0].tobytes() for p in net.pools]
    return b"".join(parts)


def network_probe(seed=8, n_images=2, n_classes=3):
    """(f, theta0, analytic, net) for the training objective of a toy branch."""
    rng = np.random.default_rng(seed)
    config = with_classes(toy_config(seed_channels=2, input_size=32), n_classes)
    net = BranchNetwork(config, "d", rng=np.random.default_rng(seed + 1), init_std=0.05)
    x0 = rng.uniform(0.0, 1.0, size=(n_images, 32, 32, 3))
    y = rng.integers(0, n_classes, size=n_images)
    alpha = 0.005

    def f(theta):
        net.set_param_vector(theta)
        logits = net.forward_logits(x0, train=True)
        loss, _, _ = softmax_l2_loss(logits, y, net.classifier, alpha)
        return loss

    theta0 = net.param_vector()
    f(theta0)
    logits = net.forward_logits(x0, train=True)
    _, grad_logits, grad_reg = softmax_l2_loss(logits, y, net.classifier, alpha)
    net.backward_logits(grad_logits)
    net.g_classifier += grad_reg
    analytic = net.grad_vector()
    net.set_param_vector(theta0)
    return f, theta0, analytic, net


def check_network(seed=8, tol=TOL_NETWORK, n_probes=200):
    f, theta, analytic, net = network_probe(seed)
    return _check(
        f, theta, analytic, tol, seed, n_probes=n_probes,
        exclude=dead_bias_mask(net.named_params(), 0),
        fingerprint=lambda: network_fingerprint(net),
    )


def run_suite(network_tolerance=TOL_NETWORK, seed=0):
    """Run every check; returns [(name, GradCheckReport), ...]."""
    results = [
        ("conv2d", check_conv(seed)),
        ("batchnorm", check_batchnorm(seed + 1)),
        ("leaky_relu", check_leaky_relu(seed + 2)),
        ("maxpool", check_maxpool(seed + 3)),
        ("conv_block", check_conv_block(seed + 4)),
        ("dense_unit", check_dense_unit(seed + 5)),
    ]
    for direction in "hvda":
        results.append((f"pool_{direction}", check_directional(direction, seed + 6)))
    results.append(("spatial_norm", check_spatial_norm(seed + 7)))
    results.append(("toy_network", check_network(seed + 8, tol=network_tolerance)))
    return results
