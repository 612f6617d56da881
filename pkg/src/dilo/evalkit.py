"""Deformation transfer, transfer-accuracy reports and disentanglement scoring."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import chamfer, pmd, procrustes_align
from .validation import check_cloud_batch, check_codes

REPORT_SCALE = 1e3


@dataclass(frozen=True)
class TransferPair:
    shape_source: str
    deform_source: str
    ground_truth: str | None = None

    def __post_init__(self):
        if self.shape_source == self.deform_source:
            raise ValueError(f"shape and deformation source are the same instance {self.shape_source!r}")


def read_pairs(path) -> list[TransferPair]:
    return [TransferPair(p["shape_source"], p["deform_source"], p.get("ground_truth"))
            for p in json.loads(Path(path).read_text())]


def write_pairs(pairs, path) -> None:
    out = []
    for p in pairs:
        d = {"shape_source": p.shape_source, "deform_source": p.deform_source}
        if p.ground_truth is not None:
            d["ground_truth"] = p.ground_truth
        out.append(d)
    Path(path).write_text(json.dumps(out, indent=1))


def sample_pairs(dataset, n_pairs: int, seed: int = 0) -> list[TransferPair]:
    """Draw ``n_pairs`` distinct (shape source, deformation source) pairs from different groups."""
    groups = np.asarray(dataset.groups)
    if len(set(groups.tolist())) < 2:
        raise ValueError("transfer pairs need at least two shape groups")
    n_possible = int(sum(np.sum(groups != g) for g in groups))
    if n_pairs > n_possible:
        raise ValueError(f"asked for {n_pairs} pairs but only {n_possible} cross-group pairs exist")
    rng = np.random.Generator(np.random.Philox(seed))
    seen, pairs = set(), []
    while len(pairs) < n_pairs:
        a, b = rng.choice(len(groups), 2, replace=False)
        if groups[a] == groups[b] or (a, b) in seen:
            continue
        seen.add((a, b))
        pairs.append(TransferPair(dataset.ids[a], dataset.ids[b]))
    return pairs


def transfer(net, x_shape, x_deform) -> np.ndarray:
    """Identity of ``x_shape`` in the pose of ``x_deform``; batches allowed."""
    xs = check_cloud_batch(x_shape, "x_shape", net.cfg.n_points)
    xd = check_cloud_batch(x_deform, "x_deform", net.cfg.n_points)
    out = net.generate(net.encode_z(xd), net.encode_s(xs)).data
    return out[0] if np.ndim(x_shape) == 2 else out


def reconstruct(net, x) -> np.ndarray:
    return transfer(net, x, x)


@dataclass
class TransferReport:
    pmd: np.ndarray
    cd: np.ndarray
    aligned: bool = False

    @property
    def mean_pmd(self) -> float:
        return float(np.mean(self.pmd))

    @property
    def mean_cd(self) -> float:
        return float(np.mean(self.cd))

    def format(self) -> str:
        unit = f"(x1e-{int(np.log10(REPORT_SCALE))})"
        return (f"pairs  PMD {unit}  CD {unit}\n"
                f"{len(self.pmd):5d}  {self.mean_pmd * REPORT_SCALE:10.2f}  {self.mean_cd * REPORT_SCALE:9.2f}")

    def to_csv(self, path, ids=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "pmd", "cd"])
            for k, (a, b) in enumerate(zip(self.pmd, self.cd)):
                w.writerow([ids[k] if ids else k, repr(float(a)), repr(float(b))])
            w.writerow(["mean", repr(self.mean_pmd), repr(self.mean_cd)])


def format_metric(raw: float) -> str:
    return f"{raw * REPORT_SCALE:.2f}"


def score_predictions(predictions, targets, align: bool = False, allow_reflection: bool = False) -> TransferReport:
    """PMD and Chamfer per prediction/target pair, optionally after rigid alignment."""
    predictions, targets = list(predictions), list(targets)
    if not predictions:
        raise ValueError("no transfer pairs to evaluate")
    p_out, c_out = [], []
    for y, gt in zip(predictions, targets):
        if align:
            y = procrustes_align(y, gt, allow_reflection=allow_reflection)
        p_out.append(pmd(y, gt))
        c_out.append(chamfer(y, gt))
    return TransferReport(np.array(p_out), np.array(c_out), aligned=align)


def eval_transfer(pairs, net, dataset, align: bool = False, allow_reflection: bool = False) -> TransferReport:
    """Transfer every pair and compare against its ground truth.

    Ground truth comes from the pair's ``ground_truth`` instance when given,
    otherwise from the dataset's analytic factors.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no transfer pairs to evaluate")
    xs = np.stack([dataset.clouds[dataset.index_of(p.shape_source)] for p in pairs])
    xd = np.stack([dataset.clouds[dataset.index_of(p.deform_source)] for p in pairs])
    preds = transfer(net, xs, xd)
    return score_predictions(preds, ground_truths(pairs, dataset), align, allow_reflection)


def ground_truths(pairs, dataset) -> list[np.ndarray]:
    return [dataset.clouds[dataset.index_of(p.ground_truth)] if p.ground_truth
            else dataset.ground_truth(p.shape_source, p.deform_source) for p in pairs]


def eval_baselines(pairs, dataset, align: bool = False, allow_reflection: bool = False) -> dict[str, TransferReport]:
    """Scores of copying either source unchanged as the transfer result."""
    gts = ground_truths(pairs, dataset)
    pick = lambda key: [dataset.clouds[dataset.index_of(getattr(p, key))] for p in pairs]  # noqa: E731
    return {"copy_shape": score_predictions(pick("shape_source"), gts, align, allow_reflection),
            "copy_deform": score_predictions(pick("deform_source"), gts, align, allow_reflection)}


# ----------------------------------------------------------------------------
# linear probe and D_score


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fitted by full-batch gradient descent.

    Features are standardised with training statistics; the L2 penalty ``reg``
    applies to the weights, not the intercepts.
    """

    def __init__(self, reg: float = 1e-3, n_steps: int = 500, lr: float = 0.1, seed: int = 0):
        self.reg = reg
        self.n_steps = n_steps
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X = check_codes(X, name="X")
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("linear probe needs at least 2 classes")
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        Xs = (X - self.mean_) / self.scale_
        n, d = Xs.shape
        k = len(self.classes_)
        onehot = np.eye(k)[yi]
        # zero start: full-batch descent is then order-independent and seed-free
        W = np.zeros((d, k))
        b = np.zeros(k)
        for _ in range(self.n_steps):
            p = _softmax(Xs @ W + b)
            g = (p - onehot) / n
            W -= self.lr * (Xs.T @ g + self.reg * W)
            b -= self.lr * g.sum(axis=0)
        self.coef_, self.intercept_ = W, b
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_codes(X, width=len(self.mean_), name="X")
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fit_linear_probe(codes, labels, reg: float = 1e-3, n_steps: int = 500, lr: float = 0.1, seed: int = 0) -> LinearProbe:
    return LinearProbe(reg=reg, n_steps=n_steps, lr=lr, seed=seed).fit(codes, labels)


@dataclass
class DScoreReport:
    E_factor_given_z: float
    E_factor_given_s: float
    d_score: float = field(init=False)

    def __post_init__(self):
        for v in (self.E_factor_given_z, self.E_factor_given_s):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"predictivity {v} outside [0, 1]")
        self.d_score = abs(self.E_factor_given_z - self.E_factor_given_s)

    def format(self) -> str:
        return (f"E(def|z) {self.E_factor_given_z:.3f}  E(def|s) {self.E_factor_given_s:.3f}  "
                f"D_score {self.d_score:.3f}")

    def to_dict(self) -> dict:
        return {"E_factor_given_z": self.E_factor_given_z, "E_factor_given_s": self.E_factor_given_s,
                "d_score": self.d_score}


def d_score(train_z, train_s, train_labels, test_z, test_s, test_labels, **probe_kw) -> DScoreReport:
    """Probe accuracy of each code for one factor, and their absolute difference."""
    train_labels, test_labels = np.asarray(train_labels), np.asarray(test_labels)
    if not set(train_labels.tolist()) & set(test_labels.tolist()):
        raise ValueError("train and test label sets are disjoint; predictivity is undefined")
    e_z = fit_linear_probe(train_z, train_labels, **probe_kw).accuracy(test_z, test_labels)
    e_s = fit_linear_probe(train_s, train_labels, **probe_kw).accuracy(test_s, test_labels)
    return DScoreReport(e_z, e_s)

