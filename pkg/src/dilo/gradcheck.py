"""Central finite-difference checks of every op and of the full toy models.

The error reported for one check is ``max|analytic - numeric| / max|numeric|``
over all checked entries, i.e. relative to the gradient's own scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .amortized import loss_L2
from .latentopt import loss_L1
from .nets import DiLONetwork, NetConfig, adain

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_entries: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_function(name: str, fn, inputs: list[dc.Tensor], h: float = STEP) -> CheckResult:
    """Compare ``d sum(fn(*inputs) * probe) / d inputs`` against central differences.

    A fixed random probe turns any output into a scalar.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    rng = np.random.Generator(np.random.Philox(12345))
    out0 = fn(*inputs).data
    probe = rng.uniform(-1.0, 1.0, out0.shape)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * probe))

    with dc.Graph() as g:
        out = fn(*inputs)
        loss = dc.sum_over_axis(dc.reshape(dc.mul(out, probe), (-1,)), 0) if out.ndim else dc.mul(out, probe)
        g.backward(loss)
    analytic, numeric = [], []
    for t in inputs:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = scalar()
            flat[i] = orig - h
            f_minus = scalar()
            flat[i] = orig
            num.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)
        analytic.append(grad.ravel())
        numeric.append(num.ravel())
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    return CheckResult(name, _rel_error(a, n), a.size)


def _rand(rng, *shape) -> dc.Tensor:
    return dc.Tensor(rng.uniform(-2.0, 2.0, shape))


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.Generator(np.random.Philox(seed))
    pos = lambda *s: dc.Tensor(rng.uniform(0.5, 2.0, s))  # noqa: E731
    cases = [
        ("matmul", dc.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 2)]),
        ("matmul(batched)", dc.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)]),
        ("add", dc.add, [_rand(rng, 3, 4), _rand(rng, 4)]),
        ("sub", dc.sub, [_rand(rng, 3, 1), _rand(rng, 3, 4)]),
        ("elementwise_mul", dc.mul, [_rand(rng, 3, 4), _rand(rng, 3, 4)]),
        ("div", dc.div, [_rand(rng, 3, 4), pos(3, 4)]),
        ("scalar_mul", lambda a: dc.scalar_mul(a, -1.7), [_rand(rng, 5)]),
        ("leaky_relu", lambda a: dc.leaky_relu(a, 0.02), [_rand(rng, 4, 5)]),
        ("relu", dc.relu, [_rand(rng, 4, 5)]),
        ("sqrt", dc.sqrt, [pos(6)]),
        ("mean_over_axis", lambda a: dc.mean_over_axis(a, 1), [_rand(rng, 3, 4)]),
        ("sum_over_axis", lambda a: dc.sum_over_axis(a, 0, keepdims=True), [_rand(rng, 3, 4)]),
        ("variance_over_axis", lambda a: dc.variance_over_axis(a, -1), [_rand(rng, 3, 5)]),
        ("std_over_axis", lambda a: dc.std_over_axis(a, 0), [_rand(rng, 5, 3)]),
        ("max_over_axis", lambda a: dc.max_over_axis(a, 0), [_rand(rng, 4, 3)]),
        ("broadcast", lambda a: dc.broadcast(a, (4, 3)), [_rand(rng, 1, 3)]),
        ("reshape", lambda a: dc.reshape(a, (6, 2)), [_rand(rng, 3, 4)]),
        ("transpose", lambda a: dc.transpose(a, (1, 0, 2)), [_rand(rng, 2, 3, 4)]),
        ("concat", lambda a, b: dc.concat([a, b], axis=1), [_rand(rng, 2, 3), _rand(rng, 2, 2)]),
        ("take", lambda a: dc.take(a, [0, 2, 0, 1], axis=0), [_rand(rng, 3, 4)]),
        ("sum_of_squares", dc.sum_of_squares, [_rand(rng, 3, 4)]),
        ("pairwise_distance", dc.pairwise_distance, [_rand(rng, 2, 5, 3)]),
        ("adain", lambda h, g, b: adain(h, g, b, 1e-5), [_rand(rng, 3, 6), _rand(rng, 3, 6), _rand(rng, 3, 6)]),
    ]
    return [check_function(name, fn, inputs) for name, fn, inputs in cases]


def toy_config() -> NetConfig:
    return NetConfig(n_points=6, d_s=4, d_z=4, front_widths=(8,), adain_widths=(4, 8), point_channels=2,
                     point_widths=(8,), modulator_width=8, enc_point_widths=(4, 8, 8), enc_head_widths=(8,),
                     transform_widths=(4,))


def toy_network(seed: int = 0, jitter: float = 0.3) -> DiLONetwork:
    """Toy model with every parameter moved off its initial value."""
    net = DiLONetwork(toy_config(), seed=seed)
    rng = np.random.Generator(np.random.Philox(seed + 99))
    for _, p in net.named_parameters():
        p.data = p.data + rng.normal(0.0, jitter, p.shape)
    return net


def _param_check(name: str, net: DiLONetwork, loss_fn, extra: list[dc.Tensor]) -> CheckResult:
    params = [p for _, p in net.named_parameters()]
    return check_function(name, lambda *_: loss_fn(), params + extra)


def model_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.Generator(np.random.Philox(seed + 7))
    net = toy_network(seed)
    cfg = net.cfg
    X = rng.normal(0.0, 1.0, (2, cfg.n_points, 3))
    z = dc.Tensor(rng.normal(0.0, 1.0, (2, cfg.d_z)))
    s = dc.Tensor(rng.normal(0.0, 1.0, (2, cfg.d_s)))
    noise = rng.normal(0.0, 0.1, (2, cfg.d_z))
    z_star = rng.normal(0.0, 1.0, (2, cfg.d_z))
    s_star = rng.normal(0.0, 1.0, (2, cfg.d_s))
    xt = dc.Tensor(X)
    results = [
        _param_check("generator+modulator (L1)", net,
                     lambda: loss_L1(net, X, z, s, 0.1, 0.1, noise=noise), [z, s]),
        _param_check("encoders+generator (L2)", net,
                     lambda: loss_L2(net, X, z_star, s_star), []),
        check_function("encode_s wrt points", lambda x: net.encode_s(x), [xt]),
        check_function("generate wrt codes", lambda a, b: net.generate(a, b), [z, s]),
    ]
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + model_checks(seed)
