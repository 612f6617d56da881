"""Generator, AdaIN modulator and permutation-invariant point-set encoders.

All networks operate on batches: codes are ``(B, d)`` and clouds ``(B, V, 3)``.
Parameters are float64 :class:`~dilo.diffcore.Tensor` leaves kept in
insertion-ordered dicts so that checkpoints and gradient checks can address
them by name.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass
class NetConfig:
    """Layer widths and normalisation constants for every network."""

    n_points: int = 128
    d_s: int = 16
    d_z: int = 16
    front_widths: tuple[int, ...] = (64,)
    adain_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    point_channels: int = 8
    point_widths: tuple[int, ...] = (64,)
    modulator_width: int = 64
    slope: float = 0.02
    eps_norm: float = 1e-5
    enc_point_widths: tuple[int, ...] = (32, 64, 128, 256)
    enc_head_widths: tuple[int, ...] = (256,)
    input_transform: bool = True
    feature_transform: bool = True
    transform_widths: tuple[int, ...] = (32, 64)

    def __post_init__(self):
        for name in ("front_widths", "adain_widths", "point_widths", "enc_point_widths",
                     "enc_head_widths", "transform_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        positive = [self.n_points, self.d_s, self.d_z, self.point_channels, self.modulator_width]
        positive += list(self.front_widths + self.adain_widths + self.point_widths)
        positive += list(self.enc_point_widths + self.enc_head_widths + self.transform_widths)
        if min(positive) < 1:
            raise dc.DimensionError(f"all widths must be positive: {self}")
        if not self.adain_widths:
            raise dc.DimensionError("the generator needs at least one AdaIN block")
        if self.feature_transform and len(self.enc_point_widths) < 3:
            raise dc.DimensionError("feature transform sits before the third point layer; need >= 3 layers")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")

    @classmethod
    def reference(cls, n_points: int = 128) -> "NetConfig":
        """Full-size widths; far too slow for CPU training but useful for shape checks."""
        return cls(n_points=n_points, d_s=256, d_z=128, front_widths=(512, 1024),
                   adain_widths=(16, 64, 256, 1024, 4096), modulator_width=256,
                   enc_point_widths=(50, 100, 200, 300), enc_head_widths=(500,))

    @property
    def expansion_width(self) -> int:
        return self.n_points * self.point_channels

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


FIXED_SUFFIXES = (".out.scale", ".out.shift")


def is_trainable(name: str) -> bool:
    return not name.endswith(FIXED_SUFFIXES)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 2.0):
    w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
    return w, np.zeros(fan_out)


class Module:
    """Named parameter container."""

    def __init__(self):
        self.params: dict[str, dc.Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> dc.Tensor:
        t = dc.Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _linear(self, rng, name: str, fan_in: int, fan_out: int, gain: float = 2.0) -> None:
        w, b = _linear_init(rng, fan_in, fan_out, gain)
        self._add(f"{name}.W", w)
        self._add(f"{name}.b", b)

    def dense(self, h, name: str) -> dc.Tensor:
        return dc.add(dc.matmul(h, self.params[f"{name}.W"]), self.params[f"{name}.b"])

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adain(h, gamma, beta, eps_norm: float = 1e-5) -> dc.Tensor:
    """Standardise ``h`` over its last (feature) axis, then scale by gamma and shift by beta."""
    h, gamma, beta = (x if isinstance(x, dc.Tensor) else dc.Tensor(x) for x in (h, gamma, beta))
    if not (h.shape[-1] == gamma.shape[-1] == beta.shape[-1]):
        raise dc.DimensionError(f"adain: widths differ h={h.shape} gamma={gamma.shape} beta={beta.shape}")
    if eps_norm < 0:
        raise ValueError("eps_norm must be non-negative")
    mu = dc.mean_over_axis(h, -1, keepdims=True)
    sd = dc.std_over_axis(h, -1, keepdims=True)
    normed = dc.div(dc.sub(h, mu), dc.add(sd, eps_norm))
    return dc.add(dc.mul(gamma, normed), beta)


class Modulator(Module):
    """Maps a shape code to one (gamma, beta) pair per AdaIN block.

    Heads start at zero weight with gamma bias 1 and beta bias 0, so a fresh
    modulator leaves the generator unmodulated whatever the shape code.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self._linear(rng, "mod.trunk", cfg.d_s, cfg.modulator_width)
        for j, w in enumerate(cfg.adain_widths):
            self._add(f"mod.gamma{j}.W", np.zeros((cfg.modulator_width, w)))
            self._add(f"mod.gamma{j}.b", np.ones(w))
            self._add(f"mod.beta{j}.W", np.zeros((cfg.modulator_width, w)))
            self._add(f"mod.beta{j}.b", np.zeros(w))

    def __call__(self, s) -> list[tuple[dc.Tensor, dc.Tensor]]:
        s = s if isinstance(s, dc.Tensor) else dc.Tensor(s)
        if s.shape[-1] != self.cfg.d_s:
            raise dc.DimensionError(f"modulate: shape code width {s.shape[-1]} != d_s={self.cfg.d_s}")
        trunk = dc.leaky_relu(self.dense(s, "mod.trunk"), self.cfg.slope)
        return [(self.dense(trunk, f"mod.gamma{j}"), self.dense(trunk, f"mod.beta{j}"))
                for j in range(len(self.cfg.adain_widths))]


class Generator(Module):
    """Deformation code in, ``(V, 3)`` cloud out; AdaIN blocks take shape modulation."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = (cfg.d_z,) + cfg.front_widths + (cfg.adain_widths[0],)
        for k in range(len(widths) - 1):
            self._linear(rng, f"gen.front{k}", widths[k], widths[k + 1])
        block_out = cfg.adain_widths[1:] + (cfg.expansion_width,)
        for j, (w_in, w_out) in enumerate(zip(cfg.adain_widths, block_out)):
            self._linear(rng, f"gen.block{j}", w_in, w_out)
        pw = (cfg.point_channels,) + cfg.point_widths + (3,)
        for k in range(len(pw) - 1):
            last = k == len(pw) - 2
            self._linear(rng, f"gen.point{k}", pw[k], pw[k + 1], gain=1.0 if last else 2.0)
        self.n_front = len(widths) - 1
        self.n_point = len(pw) - 1

    def __call__(self, z, modulation) -> dc.Tensor:
        cfg = self.cfg
        h = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
        if h.shape[-1] != cfg.d_z:
            raise dc.DimensionError(f"generate: deformation code width {h.shape[-1]} != d_z={cfg.d_z}")
        batch = h.shape[0]
        for k in range(self.n_front):
            h = dc.leaky_relu(self.dense(h, f"gen.front{k}"), cfg.slope)
        for j, (gamma, beta) in enumerate(modulation):
            h = adain(h, gamma, beta, cfg.eps_norm)
            h = dc.leaky_relu(self.dense(h, f"gen.block{j}"), cfg.slope)
        h = dc.reshape(h, (batch, cfg.n_points, cfg.point_channels))
        for k in range(self.n_point):
            h = self.dense(h, f"gen.point{k}")
            if k < self.n_point - 1:
                h = dc.leaky_relu(h, cfg.slope)
        return h


class PointEncoder(Module):
    """Shared per-point MLP, per-sample feature normalisation, max-pool, MLP head."""

    def __init__(self, cfg: NetConfig, out_dim: int, prefix: str, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.out_dim = out_dim
        self.prefix = prefix
        widths = (3,) + cfg.enc_point_widths
        self.n_layers = len(widths) - 1
        if cfg.input_transform:
            self._tnet(rng, f"{prefix}.tin", 3)
        if cfg.feature_transform:
            self._tnet(rng, f"{prefix}.tfeat", widths[2])
        for k in range(self.n_layers):
            self._linear(rng, f"{prefix}.conv{k}", widths[k], widths[k + 1])
            self._add(f"{prefix}.norm{k}.scale", np.ones(widths[k + 1]))
            self._add(f"{prefix}.norm{k}.shift", np.zeros(widths[k + 1]))
        head = (widths[-1],) + cfg.enc_head_widths + (out_dim,)
        self.n_head = len(head) - 1
        for k in range(self.n_head):
            last = k == self.n_head - 1
            self._linear(rng, f"{prefix}.head{k}", head[k], head[k + 1], gain=1.0 if last else 2.0)
        # fixed output affine, set from target statistics before encoder training
        self._add(f"{prefix}.out.scale", np.ones(out_dim))
        self._add(f"{prefix}.out.shift", np.zeros(out_dim))

    def _tnet(self, rng, name: str, dim: int) -> None:
        widths = (dim,) + self.cfg.transform_widths
        for k in range(len(widths) - 1):
            self._linear(rng, f"{name}.mlp{k}", widths[k], widths[k + 1])
        # zero output layer: the learned transform starts as the identity
        self._add(f"{name}.out.W", np.zeros((widths[-1], dim * dim)))
        self._add(f"{name}.out.b", np.zeros(dim * dim))

    def _apply_tnet(self, h: dc.Tensor, name: str) -> dc.Tensor:
        batch, _, dim = h.shape
        t = h
        for k in range(len(self.cfg.transform_widths)):
            t = dc.relu(self.dense(t, f"{name}.mlp{k}"))
        t = dc.max_over_axis(t, -2)
        t = dc.reshape(self.dense(t, f"{name}.out"), (batch, dim, dim))
        t = dc.add(t, np.eye(dim))
        return dc.matmul(h, t)

    def _norm(self, h: dc.Tensor, k: int) -> dc.Tensor:
        mu = dc.mean_over_axis(h, -2, keepdims=True)
        sd = dc.std_over_axis(h, -2, keepdims=True)
        normed = dc.div(dc.sub(h, mu), dc.add(sd, self.cfg.eps_norm))
        p = self.prefix
        return dc.add(dc.mul(normed, self.params[f"{p}.norm{k}.scale"]), self.params[f"{p}.norm{k}.shift"])

    def __call__(self, x) -> dc.Tensor:
        h = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
        if h.ndim == 2:
            h = dc.reshape(h, (1,) + h.shape)
        if h.ndim != 3 or h.shape[-1] != 3 or h.shape[1] < 1:
            raise dc.DimensionError(f"encode: expected (B, V, 3) with V >= 1, got {h.shape}")
        p = self.prefix
        if self.cfg.input_transform:
            h = self._apply_tnet(h, f"{p}.tin")
        for k in range(self.n_layers):
            if k == 2 and self.cfg.feature_transform:
                h = self._apply_tnet(h, f"{p}.tfeat")
            h = dc.relu(self._norm(self.dense(h, f"{p}.conv{k}"), k))
        h = dc.max_over_axis(h, -2)
        for k in range(self.n_head):
            h = self.dense(h, f"{p}.head{k}")
            if k < self.n_head - 1:
                h = dc.relu(h)
        return dc.add(dc.mul(h, self.params[f"{p}.out.scale"]), self.params[f"{p}.out.shift"])

    def set_output_affine(self, targets: np.ndarray) -> None:
        """Map unit-variance head outputs onto the per-dimension spread of ``targets``."""
        t = np.asarray(targets, dtype=np.float64)
        self.params[f"{self.prefix}.out.scale"].data = np.maximum(t.std(axis=0), 1e-8)
        self.params[f"{self.prefix}.out.shift"].data = t.mean(axis=0)


@dataclass
class DiLONetwork:
    """The four networks of the model, built from one seed."""

    cfg: NetConfig
    seed: int = 0
    modulator: Modulator = field(init=False)
    generator: Generator = field(init=False)
    enc_s: PointEncoder = field(init=False)
    enc_z: PointEncoder = field(init=False)

    def __post_init__(self):
        rng = np.random.Generator(np.random.Philox(self.seed))
        self.generator = Generator(self.cfg, rng)
        self.modulator = Modulator(self.cfg, rng)
        self.enc_s = PointEncoder(self.cfg, self.cfg.d_s, "enc_s", rng)
        self.enc_z = PointEncoder(self.cfg, self.cfg.d_z, "enc_z", rng)

    def modules(self) -> dict[str, Module]:
        return {"generator": self.generator, "modulator": self.modulator,
                "enc_s": self.enc_s, "enc_z": self.enc_z}

    def named_parameters(self, which=None) -> list[tuple[str, dc.Tensor]]:
        which = which or list(self.modules())
        out = []
        for key in which:
            out.extend(self.modules()[key].named_parameters())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != t.shape:
                raise dc.DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != model {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for m in self.modules().values():
            m.zero_grad()

    def modulate(self, s):
        return self.modulator(s)

    def generate(self, z, s) -> dc.Tensor:
        return self.generator(z, self.modulator(s))

    def encode_s(self, x) -> dc.Tensor:
        return self.enc_s(x)

    def encode_z(self, x) -> dc.Tensor:
        return self.enc_z(x)
