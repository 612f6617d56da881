"""Stage 1: joint optimisation of latent codes, generator and modulator.

Shape codes live one row per group and every instance of the group indexes
that same row, so sharing is structural rather than enforced by copying.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .geometry import recon_loss_batch
from .nets import DiLONetwork

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


@dataclass
class Stage1Config:
    lam: float = 1e-3
    sigma: float = 0.0
    lr_net: float = 3e-3
    lr_latent: float = 3e-3
    lr_min: float = 1e-5
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self):
        if self.lam < 0 or self.sigma < 0:
            raise ValueError("lam and sigma must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def sigma2(self) -> float:
        return self.sigma ** 2

    def to_dict(self) -> dict:
        return asdict(self)


class LatentTable:
    """Per-group shape codes and per-instance deformation codes with Adam moments."""

    def __init__(self, instance_ids, group_of, d_s: int, d_z: int):
        self.instance_ids = list(instance_ids)
        self.group_ids = list(dict.fromkeys(group_of))
        gpos = {g: k for k, g in enumerate(self.group_ids)}
        self.instance_group = np.array([gpos[g] for g in group_of], dtype=np.int64)
        self._ipos = {iid: k for k, iid in enumerate(self.instance_ids)}
        self._gpos = gpos
        self.d_s, self.d_z = d_s, d_z
        G, N = len(self.group_ids), len(self.instance_ids)
        self.shape_codes = np.zeros((G, d_s))
        self.deform_codes = np.zeros((N, d_z))
        self.shape_m = np.zeros((G, d_s))
        self.shape_v = np.zeros((G, d_s))
        self.shape_steps = np.zeros(G, dtype=np.int64)
        self.deform_m = np.zeros((N, d_z))
        self.deform_v = np.zeros((N, d_z))
        self.deform_steps = np.zeros(N, dtype=np.int64)

    @property
    def N(self) -> int:
        return len(self.instance_ids)

    def instance_index(self, instance_id: str) -> int:
        try:
            return self._ipos[instance_id]
        except KeyError:
            raise KeyError(f"no stage-1 code for instance {instance_id!r}") from None

    def group_of(self, instance_id: str) -> str:
        return self.group_ids[self.instance_group[self.instance_index(instance_id)]]

    def shape_code(self, key: str) -> np.ndarray:
        """Shape code of a group id, or of the group an instance id belongs to (a view)."""
        if key in self._gpos:
            return self.shape_codes[self._gpos[key]]
        return self.shape_codes[self.instance_group[self.instance_index(key)]]

    def deform_code(self, instance_id: str) -> np.ndarray:
        return self.deform_codes[self.instance_index(instance_id)]

    def codes_for(self, index) -> tuple[np.ndarray, np.ndarray]:
        """``(z, s)`` rows for instance positions ``index``."""
        index = np.asarray(index)
        return self.deform_codes[index], self.shape_codes[self.instance_group[index]]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "shape_codes": self.shape_codes, "deform_codes": self.deform_codes,
            "shape_m": self.shape_m, "shape_v": self.shape_v,
            "shape_steps": self.shape_steps.astype(np.float64),
            "deform_m": self.deform_m, "deform_v": self.deform_v,
            "deform_steps": self.deform_steps.astype(np.float64),
        }

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, value in arrays.items():
            cur = getattr(self, key)
            if cur.shape != value.shape:
                raise dc.DimensionError(f"latents {key}: stored shape {value.shape} != {cur.shape}")
            if key.endswith("steps"):
                setattr(self, key, value.astype(np.int64))
            else:
                setattr(self, key, np.array(value, dtype=np.float64))

    def copy(self) -> "LatentTable":
        other = LatentTable(self.instance_ids, [self.group_ids[g] for g in self.instance_group], self.d_s, self.d_z)
        other.load_arrays({k: v.copy() for k, v in self.arrays().items()})
        return other


def init_latents(manifest, d_s: int, d_z: int, seed: int, scale: float = 0.01) -> LatentTable:
    """Draw every code i.i.d. from N(0, scale^2).

    ``manifest`` is a sequence of ``(instance_id, group_id)`` pairs.
    """
    pairs = [(str(i), str(g)) for i, g in manifest]
    ids = [p[0] for p in pairs]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ManifestError(f"duplicate instance ids: {dup[:5]}")
    table = LatentTable(ids, [p[1] for p in pairs], d_s, d_z)
    rng = np.random.Generator(np.random.Philox(seed))
    table.shape_codes = rng.normal(0.0, scale, table.shape_codes.shape)
    table.deform_codes = rng.normal(0.0, scale, table.deform_codes.shape)
    return table


def adam_rows(values, m, v, steps, rows, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Adam update restricted to ``rows``; each row keeps its own step counter."""
    if not np.all(np.isfinite(grads)):
        raise dc.NonFiniteError(f"non-finite latent gradient in rows {rows[:5]}")
    steps[rows] += 1
    t = steps[rows][:, None].astype(np.float64)
    m[rows] = beta1 * m[rows] + (1.0 - beta1) * grads
    v[rows] = beta2 * v[rows] + (1.0 - beta2) * grads * grads
    m_hat = m[rows] / (1.0 - beta1 ** t)
    v_hat = v[rows] / (1.0 - beta2 ** t)
    values[rows] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def loss_L1(net: DiLONetwork, X, Z, S, lam: float, sigma: float, rng=None, noise=None) -> dc.Tensor:
    """Batch-mean of ``recon(g(z + eps, s), x) + lam * ||z||^2``.

    ``Z`` and ``S`` are ``(B, d)`` tensors (leaves or gathered views). The noise
    is drawn from ``rng`` unless given explicitly; it is a constant to autodiff.
    """
    Z = Z if isinstance(Z, dc.Tensor) else dc.Tensor(Z)
    if noise is None:
        noise = rng.normal(0.0, sigma, Z.shape) if (sigma > 0 and rng is not None) else np.zeros(Z.shape)
    Y = net.generate(dc.add(Z, noise), S)
    rec = recon_loss_batch(Y, X)
    reg = dc.sum_over_axis(dc.mul(Z, Z), -1)
    per = dc.add(rec, dc.scalar_mul(reg, lam))
    return dc.mean_over_axis(per, 0)


def _net_states(params) -> list[dc.AdamState]:
    return [dc.AdamState.zeros_like(p.data) for _, p in params]


def train_stage1(dataset, net: DiLONetwork, cfg: Stage1Config, latents: LatentTable | None = None,
                 net_states=None, callback=None):
    """Run stage 1; returns ``(net, latents, curve, net_states)``.

    ``curve`` is a list of dicts ``{epoch, mean_L1, lr_net, lr_latent}``.
    """
    X = np.asarray(dataset.clouds, dtype=np.float64)
    if X.shape[1] != net.cfg.n_points:
        raise dc.DimensionError(f"dataset V={X.shape[1]} but network built for V={net.cfg.n_points}")
    if latents is None:
        latents = init_latents(zip(dataset.ids, dataset.groups), net.cfg.d_s, net.cfg.d_z,
                               cfg.seed, cfg.init_scale)
    params = net.named_parameters(["generator", "modulator"])
    if net_states is None:
        net_states = _net_states(params)
    names = [n for n, _ in params]
    sched_net = dc.CosineSchedule(cfg.lr_net, cfg.lr_min, cfg.epochs)
    sched_lat = dc.CosineSchedule(cfg.lr_latent, cfg.lr_min, cfg.epochs)
    rng = np.random.Generator(np.random.Philox(cfg.seed + 1))
    N = X.shape[0]
    curve = []
    for epoch in range(cfg.epochs):
        lr_net, lr_lat = dc.lr_at(sched_net, epoch), dc.lr_at(sched_lat, epoch)
        order = rng.permutation(N)
        total = 0.0
        for b0 in range(0, N, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            groups, inv = np.unique(latents.instance_group[idx], return_inverse=True)
            Z = dc.Tensor(latents.deform_codes[idx], requires_grad=True)
            S = dc.Tensor(latents.shape_codes[groups], requires_grad=True)
            net.zero_grad()
            with dc.Graph() as graph:
                loss = loss_L1(net, X[idx], Z, dc.take(S, inv), cfg.lam, cfg.sigma, rng)
                if not np.isfinite(loss.item()):
                    raise dc.NonFiniteError(f"stage 1: non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
                graph.backward(loss)
            dc.adam_step([p.data for _, p in params], [p.grad for _, p in params], net_states, lr_net, names)
            adam_rows(latents.deform_codes, latents.deform_m, latents.deform_v, latents.deform_steps,
                      idx, Z.grad, lr_lat)
            adam_rows(latents.shape_codes, latents.shape_m, latents.shape_v, latents.shape_steps,
                      groups, S.grad, lr_lat)
            total += loss.item() * len(idx)
        row = {"epoch": epoch + 1, "mean_L1": total / N, "lr_net": lr_net, "lr_latent": lr_lat}
        curve.append(row)
        logger.info("stage1 epoch %d mean L1 %.6g", epoch + 1, row["mean_L1"])
        if callback is not None:
            callback(row)
    return net, latents, curve, net_states
