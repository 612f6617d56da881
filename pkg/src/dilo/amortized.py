"""Stage 2: train the shape and deformation encoders against frozen stage-1 codes."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .geometry import recon_loss_batch
from .latentopt import LatentTable
from .nets import DiLONetwork, is_trainable

logger = logging.getLogger(__name__)


@dataclass
class Stage2Config:
    lr_enc: float = 1e-3
    lr_net: float = 1e-4
    lr_min: float = 1e-5
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    w_recon: float = 1.0
    w_dis_z: float = 1e5
    w_dis_s: float = 1e5
    # ablation: no latent-optimisation targets, encoders learn from reconstruction alone
    skip_stage1: bool = False

    def __post_init__(self):
        if min(self.w_recon, self.w_dis_z, self.w_dis_s) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _mse_rows(pred: dc.Tensor, target: np.ndarray) -> dc.Tensor:
    diff = dc.sub(pred, target)
    return dc.mean_over_axis(dc.mul(diff, diff), -1)


def loss_L2(net: DiLONetwork, X, z_star, s_star, w_recon=1.0, w_dis_z=1.0, w_dis_s=1.0) -> dc.Tensor:
    """Batch-mean of the encoder reconstruction term plus both code-distance terms.

    The code distance is the mean squared error over code dimensions.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    zp, sp = net.encode_z(X), net.encode_s(X)
    terms = []
    if w_recon:
        terms.append(dc.scalar_mul(recon_loss_batch(net.generate(zp, sp), X), w_recon))
    if w_dis_z:
        terms.append(dc.scalar_mul(_mse_rows(zp, np.asarray(z_star).reshape(zp.shape)), w_dis_z))
    if w_dis_s:
        terms.append(dc.scalar_mul(_mse_rows(sp, np.asarray(s_star).reshape(sp.shape)), w_dis_s))
    if not terms:
        return dc.Tensor(0.0)
    per = terms[0]
    for t in terms[1:]:
        per = dc.add(per, t)
    return dc.mean_over_axis(per, 0)


def train_stage2(dataset, net: DiLONetwork, latents: LatentTable | None, cfg: Stage2Config, callback=None):
    """Fit both encoders and keep tuning the generator and modulator.

    Adam moments start fresh. ``latents`` is only read. Returns
    ``(net, curve, states)`` where ``curve`` rows are
    ``{epoch, mean_L2, lr_enc, lr_net}``.
    """
    X = np.asarray(dataset.clouds, dtype=np.float64)
    if X.shape[1] != net.cfg.n_points:
        raise dc.DimensionError(f"dataset V={X.shape[1]} but network built for V={net.cfg.n_points}")
    w_dis_z, w_dis_s = cfg.w_dis_z, cfg.w_dis_s
    if cfg.skip_stage1:
        w_dis_z = w_dis_s = 0.0
        z_star = np.zeros((len(X), net.cfg.d_z))
        s_star = np.zeros((len(X), net.cfg.d_s))
    else:
        if latents is None:
            raise ValueError("stage 2 needs stage-1 latents unless skip_stage1 is set")
        rows = np.array([latents.instance_index(i) for i in dataset.ids])
        z_star, s_star = latents.codes_for(rows)
        z_star, s_star = z_star.copy(), s_star.copy()
        net.enc_z.set_output_affine(z_star)
        net.enc_s.set_output_affine(s_star)

    enc = [(n, p) for n, p in net.named_parameters(["enc_s", "enc_z"]) if is_trainable(n)]
    gen = net.named_parameters(["generator", "modulator"])
    enc_states = [dc.AdamState.zeros_like(p.data) for _, p in enc]
    gen_states = [dc.AdamState.zeros_like(p.data) for _, p in gen]
    sched_enc = dc.CosineSchedule(cfg.lr_enc, cfg.lr_min, cfg.epochs)
    sched_net = dc.CosineSchedule(cfg.lr_net, cfg.lr_min, cfg.epochs)
    rng = np.random.Generator(np.random.Philox(cfg.seed + 2))
    N = len(X)
    curve = []
    for epoch in range(cfg.epochs):
        lr_enc, lr_net = dc.lr_at(sched_enc, epoch), dc.lr_at(sched_net, epoch)
        order = rng.permutation(N)
        total = 0.0
        for b0 in range(0, N, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            net.zero_grad()
            with dc.Graph() as graph:
                loss = loss_L2(net, X[idx], z_star[idx], s_star[idx], cfg.w_recon, w_dis_z, w_dis_s)
                if not np.isfinite(loss.item()):
                    raise dc.NonFiniteError(f"stage 2: non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
                graph.backward(loss)
            dc.adam_step([p.data for _, p in enc], [p.grad for _, p in enc], enc_states, lr_enc,
                         [n for n, _ in enc])
            if cfg.w_recon:
                dc.adam_step([p.data for _, p in gen], [p.grad for _, p in gen], gen_states, lr_net,
                             [n for n, _ in gen])
            total += loss.item() * len(idx)
        row = {"epoch": epoch + 1, "mean_L2": total / N, "lr_enc": lr_enc, "lr_net": lr_net}
        curve.append(row)
        logger.info("stage2 epoch %d mean L2 %.6g", epoch + 1, row["mean_L2"])
        if callback is not None:
            callback(row)
    return net, curve, {"enc": enc_states, "gen": gen_states}
