"""Finite-difference verification battery for every differentiable primitive
and for the full pair loss.

Primitive checks run over many random seeds on small shapes; inputs for
kinked ops (relu, abs, clip) are nudged away from their kinks so central
differences see a smooth function. The full-model check perturbs every
parameter of a reduced-width model on 16 x 16 frames.
"""

import numpy as np

from . import net
from . import tensor as tt
from .tensor import GradCheckReport, Tensor, grad_check
from .train import weighted_bce, total_loss

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-5
EPS = 1e-5
# the pair loss sums over pixels, so its value is O(100); central differences
# at eps=1e-5 would drown O(1e-8) gradient entries in cancellation noise
MODEL_EPS = 1e-4


def _away_from(x: np.ndarray, kinks, margin: float = 1e-3) -> np.ndarray:
    for k in kinks:
        near = np.abs(x - k) < margin
        x = np.where(near, x + 2 * margin, x)
    return x


def _weighted_sum(value: Tensor, weights: np.ndarray) -> Tensor:
    # a fixed random projection makes the scalar target sensitive to every entry
    return tt.tensor_sum(tt.mul(value, Tensor(weights)))


def _primitive_cases(rng: np.random.Generator):
    # every random constant is drawn once, outside the closures: the checked
    # functions must be deterministic across repeated calls
    a23 = rng.normal(size=(2, 3))
    b34 = rng.normal(size=(3, 4))
    m34 = rng.normal(size=(3, 4))
    cube = rng.normal(size=(3, 4, 2))
    cube2 = rng.normal(size=(3, 4, 3))
    w34 = rng.normal(size=(3, 4))
    w12 = rng.normal(size=12)
    wcube = rng.normal(size=cube.shape)
    w31 = rng.normal(size=(3, 1))
    wcat = rng.normal(size=(3, 4, 5))
    wconv = rng.normal(size=(3, 3, 2))
    wup = rng.normal(size=(9, 12, 2))
    yield "matmul", lambda ts: tt.tensor_sum(tt.matmul(ts[0], ts[1])), [a23, b34]
    yield "transpose", lambda ts: _weighted_sum(tt.transpose(ts[0]), b34.T.copy()), [m34]
    yield "reshape", lambda ts: _weighted_sum(tt.reshape(ts[0], (12,)), w12), [m34]
    yield "add", lambda ts: _weighted_sum(tt.add(ts[0], ts[1]), w34), [m34, rng.normal(size=(3, 4))]
    yield "add_bias_broadcast", lambda ts: _weighted_sum(tt.add(ts[0], ts[1]), wcube), [cube, rng.normal(size=2)]
    yield "sub", lambda ts: _weighted_sum(tt.sub(ts[0], ts[1]), w34), [m34, rng.normal(size=(3, 4))]
    yield "mul", lambda ts: _weighted_sum(tt.mul(ts[0], ts[1]), w34), [m34, rng.normal(size=(3, 4))]
    yield "mul_row_broadcast", lambda ts: _weighted_sum(tt.mul(ts[0], ts[1]), w34), [m34, rng.normal(size=4)]
    yield "mul_col_broadcast", lambda ts: _weighted_sum(tt.mul(ts[0], ts[1]), w34), [m34, rng.normal(size=(3, 1))]
    yield "neg", lambda ts: _weighted_sum(tt.neg(ts[0]), w34), [m34]
    yield "sigmoid", lambda ts: _weighted_sum(tt.sigmoid(ts[0]), w34), [m34]
    yield "relu", lambda ts: _weighted_sum(tt.relu(ts[0]), w34), [_away_from(m34.copy(), [0.0])]
    yield "log", lambda ts: _weighted_sum(tt.log(ts[0]), w34), [rng.uniform(0.5, 2.0, size=(3, 4))]
    yield "clip", lambda ts: _weighted_sum(tt.clip(ts[0], -0.5, 0.5), w34), [_away_from(m34.copy(), [-0.5, 0.5])]
    yield "absolute", lambda ts: _weighted_sum(tt.absolute(ts[0]), w34), [_away_from(m34.copy(), [0.0])]
    yield "mean_all", lambda ts: tt.mean(ts[0]), [cube]
    yield "mean_axis", lambda ts: _weighted_sum(tt.mean(ts[0], axis=1), w31), [m34]
    yield "tensor_sum", lambda ts: tt.tensor_sum(ts[0]), [cube]
    yield "concat_channels", lambda ts: _weighted_sum(tt.concat_channels(ts[0], ts[1]), wcat), [cube, cube2]
    yield "softmax_columns", lambda ts: _weighted_sum(tt.softmax_columns(ts[0]), w34), [m34]
    yield "conv2d", lambda ts: _weighted_sum(tt.conv2d(ts[0], ts[1], stride=2, pad=1), wconv), [rng.normal(size=(5, 6, 3)), rng.normal(size=(3, 3, 3, 2))]
    yield "bilinear_upsample", lambda ts: _weighted_sum(tt.bilinear_upsample(ts[0], 3), wup), [cube]


def check_primitives(n_seeds: int = 20, eps: float = EPS, tol: float = PRIMITIVE_TOL) -> list[GradCheckReport]:
    """Each primitive over ``n_seeds`` random instances; one report per op
    carrying the worst relative error seen."""
    worst: dict[str, float] = {}
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, f, arrays in _primitive_cases(rng):
            report = grad_check(f, [Tensor(a, requires_grad=True) for a in arrays], eps=eps, tol=tol, name=name)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    return [
        GradCheckReport(op_name=name, max_rel_error=err, tolerance=tol, passed=err <= tol)
        for name, err in worst.items()
    ]


def _small_model(rng: np.random.Generator, variant: str, channel_mode: str = "se") -> net.ModelParams:
    params = net.init_model_params(
        rng, variant=variant, channel_mode=channel_mode, channels=(4, 6, 8), head_channels=6
    )
    # verify at a well-conditioned random point: fresh-init gradients for the
    # squeeze weights are O(1e-9), far below what central differences on an
    # O(100) loss can resolve
    for _, p in params.named_parameters():
        p.data = rng.normal(0.0, 0.4, size=p.shape)
    return params


# frozen verification points: random draws where no ReLU pre-activation sits
# within an eps-sized window of its kink, so central differences see the same
# linear piece on both sides
MODEL_SEEDS = {"vanilla": 0, "symmetric": 5, "channelwise": 3}


def check_pair_loss(variant: str = "symmetric", seed: int | None = None, eps: float = MODEL_EPS, tol: float = MODEL_TOL) -> GradCheckReport:
    """Central differences over every parameter of a reduced model on a
    16 x 16 frame pair, against the tape gradient of the pair loss."""
    if seed is None:
        seed = MODEL_SEEDS[variant]
    rng = np.random.default_rng(seed)
    params = _small_model(rng, variant)
    fa = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    fb = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    mask_a = (rng.uniform(size=(16, 16)) < 0.3).astype(np.float64)
    mask_b = (rng.uniform(size=(16, 16)) < 0.3).astype(np.float64)

    def f(tensors):
        model = net.replace_parameters(params, tensors)
        ya, yb = net.forward_pair(model, fa, fb)
        losses = [weighted_bce(ya, mask_a), weighted_bce(yb, mask_b)]
        return total_loss(losses, model.coatt)

    inputs = [p for _, p in params.named_parameters()]
    return grad_check(f, inputs, eps=eps, tol=tol, name=f"pair_loss[{variant}]")


def run_suite(n_seeds: int = 20, variants=("vanilla", "symmetric", "channelwise")) -> list[GradCheckReport]:
    reports = check_primitives(n_seeds=n_seeds)
    for variant in variants:
        reports.append(check_pair_loss(variant=variant))
    return reports


def format_reports(reports: list) -> str:
    rows = [("op", "max rel error", "tolerance", "status")]
    for r in reports:
        rows.append((r.op_name, f"{r.max_rel_error:.3e}", f"{r.tolerance:.1e}", "pass" if r.passed else "FAIL"))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
