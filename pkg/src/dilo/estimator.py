"""Scikit-learn style front end for the two-stage shape/deformation model."""
from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .amortized import Stage2Config, train_stage2
from .checkpoint import Checkpoint, load_checkpoint, params_digest, save_checkpoint
from .config import RunConfig
from .geometry import recon_loss
from .latentopt import Stage1Config, train_stage1
from .nets import DiLONetwork, NetConfig
from .synthdata import MeshDataset
from .validation import check_cloud_batch, check_codes


class DiLO(TransformerMixin, BaseEstimator):
    """Learn a shape code per group and a deformation code per instance, then
    amortize both into point-cloud encoders.

    ``fit(X, groups)`` takes ``(N, V, 3)`` clouds with one group label each.
    ``transform`` returns ``[z | s]`` rows (deformation code first), and
    ``inverse_transform`` decodes such rows back into clouds.

    Parameters left as ``None`` take the library defaults of
    :class:`NetConfig`, :class:`Stage1Config` and :class:`Stage2Config`.
    """

    def __init__(self, d_s: int = 16, d_z: int = 16, net_options: dict | None = None,
                 stage1_options: dict | None = None, stage2_options: dict | None = None,
                 epochs_stage1: int = 200, epochs_stage2: int = 200, seed: int = 0, verbose: bool = False):
        self.d_s = d_s
        self.d_z = d_z
        self.net_options = net_options
        self.stage1_options = stage1_options
        self.stage2_options = stage2_options
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.seed = seed
        self.verbose = verbose

    def _configs(self, n_points: int) -> RunConfig:
        net = NetConfig(**{**(self.net_options or {}), "n_points": n_points, "d_s": self.d_s, "d_z": self.d_z})
        s1 = Stage1Config(**{**(self.stage1_options or {}), "epochs": self.epochs_stage1, "seed": self.seed})
        s2 = Stage2Config(**{**(self.stage2_options or {}), "epochs": self.epochs_stage2, "seed": self.seed})
        return RunConfig(net=net, stage1=s1, stage2=s2, seed=self.seed)

    def fit(self, X, groups, ids=None):
        X = check_cloud_batch(X)
        groups = [str(g) for g in np.asarray(groups).ravel()]
        if len(groups) != len(X):
            raise ValueError(f"groups has {len(groups)} labels for {len(X)} clouds")
        ids = [f"i{k:05d}" for k in range(len(X))] if ids is None else [str(i) for i in ids]
        data = MeshDataset(X, ids, groups, np.zeros(len(X), dtype=np.int64), ["train"] * len(X))
        self.run_config_ = self._configs(X.shape[1])
        log = print if self.verbose else None
        net = DiLONetwork(self.run_config_.net, seed=self.seed)
        t0 = time.perf_counter()
        net, self.latents_, self.curve_stage1_, _ = train_stage1(data, net, self.run_config_.stage1, callback=log)
        t1 = time.perf_counter()
        self.net_, self.curve_stage2_, _ = train_stage2(data, net, self.latents_, self.run_config_.stage2,
                                                        callback=log)
        self.timings_ = {"stage1": t1 - t0, "stage2": time.perf_counter() - t1}
        self.n_points_ = X.shape[1]
        return self

    def _X(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return check_cloud_batch(X, n_points=self.n_points_)

    def encode_deform(self, X) -> np.ndarray:
        return self.net_.encode_z(self._X(X)).data

    def encode_shape(self, X) -> np.ndarray:
        return self.net_.encode_s(self._X(X)).data

    def transform(self, X) -> np.ndarray:
        X = self._X(X)
        return np.hstack([self.net_.encode_z(X).data, self.net_.encode_s(X).data])

    def inverse_transform(self, codes) -> np.ndarray:
        check_is_fitted(self, "net_")
        cfg = self.net_.cfg
        codes = check_codes(codes, cfg.d_z + cfg.d_s)
        return self.net_.generate(codes[:, :cfg.d_z], codes[:, cfg.d_z:]).data

    def reconstruct(self, X) -> np.ndarray:
        return self.inverse_transform(self.transform(X))

    def transfer(self, X_shape, X_deform) -> np.ndarray:
        """Pose the identity of each ``X_shape`` cloud like the matching ``X_deform`` cloud."""
        Xs, Xd = self._X(X_shape), self._X(X_deform)
        if len(Xs) != len(Xd):
            raise ValueError(f"{len(Xs)} shape sources but {len(Xd)} deformation sources")
        return self.net_.generate(self.net_.encode_z(Xd).data, self.net_.encode_s(Xs).data).data

    def score(self, X, y=None) -> float:
        """Negated mean reconstruction loss (higher is better)."""
        X = self._X(X)
        rec = self.reconstruct(X)
        return -float(np.mean([recon_loss(r, x) for r, x in zip(rec, X)]))

    def save(self, directory, parent: str | None = None) -> None:
        check_is_fitted(self, "net_")
        save_checkpoint(Checkpoint(2, self.run_config_.to_dict(), self.net_.state_arrays(),
                                   latents=self.latents_, parent=parent), directory)

    @classmethod
    def from_checkpoint(cls, directory) -> "DiLO":
        ckpt = load_checkpoint(directory)
        run = RunConfig.from_dict(ckpt.config)
        est = cls(d_s=run.net.d_s, d_z=run.net.d_z, epochs_stage1=run.stage1.epochs,
                  epochs_stage2=run.stage2.epochs, seed=run.seed)
        est.run_config_ = run
        est.net_ = DiLONetwork(run.net, seed=run.seed)
        est.net_.load_arrays(ckpt.params)
        est.latents_ = ckpt.latents
        est.n_points_ = run.net.n_points
        est.checkpoint_digest_ = params_digest(directory)
        return est
