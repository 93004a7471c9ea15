"""Central finite-difference checks of the analytic backward passes.

The suites here back both the test-suite and ``modconn gradcheck``.  All
checks run in float64 with a fixed random linear probe as the loss, so the
finite-difference estimate is independent of the reverse-mode code path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

EPS = 1e-3
RTOL = 1e-3
# absolute floor on the denominator: entries whose true derivative is below this
# are compared in absolute terms (float64 round-off and O(eps^2) truncation)
ABS_FLOOR = 1e-6
# spread of pre-activations at the block and graph check points (see _spread)
KINK_SCALE = 10.0


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int
    worst: str = ""
    tolerance: float = RTOL

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: max rel err {self.max_rel_error:.2e} over {self.checked} entries {self.worst}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    name: str,
    loss_fn: Callable[[], Tensor],
    wrt: Sequence[tuple[str, Tensor]],
    eps: float = EPS,
    tolerance: float = RTOL,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckResult:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the computation from the current tensor values
    on every call.  ``wrt`` lists the (label, tensor) pairs to perturb; every
    entry is checked unless ``max_entries`` caps the per-tensor sample.
    """
    for _, t in wrt:
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    loss.backward()
    worst_err, worst_at, checked = 0.0, "", 0
    for label, t in wrt:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(indices.size)
        for pos, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(loss_fn().data)
            flat[i] = orig - eps
            minus = float(loss_fn().data)
            flat[i] = orig
            numeric[pos] = (plus - minus) / (2 * eps)
        err = relative_error(analytic.reshape(-1)[indices], numeric)
        checked += indices.size
        if err.size and err.max() > worst_err:
            k = int(err.argmax())
            worst_err = float(err.max())
            worst_at = f"({label}[{int(indices[k])}]: analytic {analytic.reshape(-1)[indices[k]]:.6g}, numeric {numeric[k]:.6g})"
        t.grad = None
    result = GradcheckResult(name, worst_err, checked, worst_at, tolerance)
    logger.debug("%s", result)
    return result


def _spread(params, rng, scale: float, affine: float | None = None):
    """Move a block's parameters to a point where pre-activations are spread over O(scale).

    Batch norm makes each conv-BN pair invariant to the conv filter scale, so
    scaling filters, BN affine terms and inputs by ``scale`` shrinks the
    relative size of an ``EPS`` step by the same factor; the difference
    quotient then almost never straddles a ReLU kink.  ``affine`` (default
    ``scale``) sets the output spread separately.
    """
    affine = scale if affine is None else affine
    for role, t in params.tensors.items():
        if role.startswith("conv"):
            t.data = scale * t.data
        elif role.endswith("scale"):
            t.data = affine * (1.0 + 0.2 * rng.standard_normal(t.shape))
        elif role.endswith("shift"):
            t.data = affine * 0.2 * rng.standard_normal(t.shape)
    return params


def _probe(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def op_suite(seed: int = 0) -> list[GradcheckResult]:
    """One finite-difference check per tensor op."""
    rng = np.random.default_rng(seed)
    results = []

    x = _leaf(rng, 2, 3, 8, 8)
    w = _leaf(rng, 4, 3, 3, 3, scale=0.5)
    r = _probe((2, 4, 8, 8), rng)
    results.append(check_gradients("conv2d 3x3 pad1", lambda: T.weighted_sum(T.conv2d(x, w, 1, 1), r), [("x", x), ("w", w)]))

    r2 = _probe((2, 4, 4, 4), rng)
    results.append(check_gradients("conv2d 3x3 stride2", lambda: T.weighted_sum(T.conv2d(x, w, 2, 1), r2), [("x", x), ("w", w)]))

    w1 = _leaf(rng, 5, 3, 1, 1)
    r3 = _probe((2, 5, 4, 4), rng)
    results.append(check_gradients("conv2d 1x1 stride2", lambda: T.weighted_sum(T.conv2d(x, w1, 2, 0), r3), [("x", x), ("w", w1)]))

    xb = _leaf(rng, 4, 3, 4, 4)
    gamma = Tensor(1.0 + 0.3 * rng.standard_normal(3), requires_grad=True)
    beta = _leaf(rng, 3)
    rb = _probe(xb.shape, rng)
    state = T.BatchNormState.fresh(3, np.float64)
    results.append(
        check_gradients(
            "batchnorm train",
            lambda: T.weighted_sum(T.batchnorm(xb, gamma, beta, state, training=True), rb),
            [("x", xb), ("scale", gamma), ("shift", beta)],
        )
    )
    state.running_var[...] = 0.5 + rng.random(3)
    state.running_mean[...] = rng.standard_normal(3)
    results.append(
        check_gradients(
            "batchnorm eval",
            lambda: T.weighted_sum(T.batchnorm(xb, gamma, beta, state, training=False), rb),
            [("x", xb), ("scale", gamma), ("shift", beta)],
        )
    )

    # keep inputs away from the kink so the difference quotient is well defined
    xr = Tensor(rng.choice([-1.0, 1.0], size=(2, 3, 4, 4)) * (0.1 + rng.random((2, 3, 4, 4))), requires_grad=True)
    rr = _probe(xr.shape, rng)
    results.append(check_gradients("relu", lambda: T.weighted_sum(T.relu(xr), rr), [("x", xr)]))

    a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4)
    ra = _probe(a.shape, rng)
    results.append(check_gradients("add", lambda: T.weighted_sum(T.add(a, b), ra), [("a", a), ("b", b)]))

    c = _leaf(rng, 2, 3, 4, 4)
    results.append(check_gradients("mean_tensors", lambda: T.weighted_sum(T.mean_tensors([a, b, c]), ra), [("a", a), ("c", c)]))

    rg = _probe((2, 3), rng)
    results.append(check_gradients("global_avg_pool", lambda: T.weighted_sum(T.global_avg_pool(a), rg), [("x", a)]))

    xl, wl, bl = _leaf(rng, 4, 6), _leaf(rng, 5, 6), _leaf(rng, 5)
    rl = _probe((4, 5), rng)
    results.append(check_gradients("linear", lambda: T.weighted_sum(T.linear(xl, wl, bl), rl), [("x", xl), ("w", wl), ("b", bl)]))

    logits = _leaf(rng, 6, 10)
    labels = rng.integers(0, 10, size=6)
    results.append(check_gradients("softmax_xent", lambda: T.softmax_xent(logits, labels), [("logits", logits)]))

    xd = _leaf(rng, 2, 3, 8, 8)
    rd = _probe((2, 3, 4, 4), rng)
    results.append(check_gradients("avg_downsample", lambda: T.weighted_sum(T.avg_downsample(xd, 2), rd), [("x", xd)]))

    rp = _probe((2, 7, 8, 8), rng)
    results.append(check_gradients("zero_pad_channels", lambda: T.weighted_sum(T.zero_pad_channels(xd, 7), rp), [("x", xd)]))
    return results


def block_suite(seed: int = 1, scale: float = KINK_SCALE) -> list[GradcheckResult]:
    """Finite-difference checks of both block kinds (train-mode batch norm)."""
    from .blocks import BlockSpec, bottleneck_branch_forward, basic_block_forward, init_block

    rng = np.random.default_rng(seed)
    results = []
    for spec, fwd, name in (
        (BlockSpec("basic", 4, 4), basic_block_forward, "basic block 4->4"),
        (BlockSpec("basic", 4, 8, stride=2), basic_block_forward, "basic block 4->8 stride2"),
        (BlockSpec("bottleneck", 4, 8, width=2), bottleneck_branch_forward, "bottleneck branch 4-2-8"),
    ):
        params = _spread(init_block(spec, rng, dtype=np.float64), rng, scale)
        x = Tensor(scale * rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
        out_shape = fwd(x, params, training=True).shape
        probe = _probe(out_shape, rng)
        wrt = [("x", x)] + list(params.tensors.items())
        results.append(check_gradients(name, lambda: T.weighted_sum(fwd(x, params, training=True), probe), wrt))
    return results


def graph_suite(seed: int = 2, scale: float = KINK_SCALE) -> list[GradcheckResult]:
    """Finite-difference check of a full 3-module masked graph, every weight and mask-weighted input."""
    from .graph import ArchSpec, build_resnet_masked, build_resnext_masked, graph_forward

    rng = np.random.default_rng(seed)
    results = []
    specs = [
        ArchSpec(family="resnet", num_modules=3, fan_in=1, num_classes=3, stage_channels=(4,), image_size=4, stem_channels=4),
        ArchSpec(
            family="resnext", num_modules=3, fan_in=2, cardinality=3, bottleneck_width=1,
            num_classes=3, stage_channels=(4, 8), image_size=4, stem_channels=2, module_stages=(0, 1, 1),
        ),
    ]
    for spec in specs:
        build = build_resnet_masked if spec.family == "resnet" else build_resnext_masked
        g = build(spec, seed=seed)
        g.astype(np.float64)
        _spread(g.stem, rng, scale)
        for block in g.blocks.values():
            _spread(block.params, rng, scale)
        for proj in g.projections.values():
            proj.weight.data = scale * proj.weight.data
        sample_rng = np.random.default_rng(seed + 10)
        for mask in g.learned_masks():
            mask.binary[:] = 0
            mask.binary[sample_rng.choice(mask.size, size=mask.fan_in, replace=False)] = 1
        x = scale * rng.standard_normal((3, 3, spec.image_size, spec.image_size))
        probe = _probe((3, spec.num_classes), rng)

        def loss_fn(g=g, x=x, probe=probe):
            return _probed(graph_forward(g, x, mode="train", sample=False), probe).loss

        wrt = [(name, t) for name, t in g.named_parameters()]
        results.append(check_gradients(f"3-module {spec.family} graph (weights)", loss_fn, wrt))
        results.append(_mask_gradient_check(g, x, probe, f"3-module {spec.family} graph (mask gradients)"))
    return results


def _probed(result, probe):
    """Replace the loss of a forward result by a fixed linear probe of the logits."""
    result.loss = T.weighted_sum(result.logits, probe)
    return result


def _mask_gradient_check(g, x, probe, name: str) -> GradcheckResult:
    """Mask gradients vs differences of the loss with relaxed, continuous mask values."""
    from .graph import graph_backward, graph_forward

    def loss(override=None) -> float:
        return _probed(graph_forward(g, x, mode="train", sample=False, mask_override=override), probe).loss.item()

    grads = graph_backward(g, _probed(graph_forward(g, x, mode="train", sample=False), probe))
    worst, worst_at, checked = 0.0, "", 0
    for mask in g.learned_masks():
        base = mask.binary.astype(np.float64)
        for k in range(mask.size):
            weights = base.copy()
            weights[k] += EPS
            plus = loss({mask.consumer: weights})
            weights[k] -= 2 * EPS
            minus = loss({mask.consumer: weights})
            numeric = (plus - minus) / (2 * EPS)
            analytic = grads.masks[mask.consumer][k]
            err = float(relative_error(np.array([analytic]), np.array([numeric]))[0])
            checked += 1
            if err > worst:
                worst, worst_at = err, f"({mask.consumer}[{k}]: analytic {analytic:.6g}, numeric {numeric:.6g})"
    for _, t in g.named_parameters():
        t.grad = None
    return GradcheckResult(name, worst, checked, worst_at)


def run_all() -> list[GradcheckResult]:
    return op_suite() + block_suite() + graph_suite()
