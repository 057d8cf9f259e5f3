"""Density and color networks, their gradients, and the Adam/EMA optimizer.

All trainable state (hash tables and both MLPs) lives in one flat buffer so
the optimizer and checkpointing see a single array; the grid and layers
hold views into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _fallback
from ._backend import kernels
from .encoding import SH_DIM, HashGrid, HashGridConfig
from .errors import NonFiniteGradient, ShapeMismatch, TapeMismatch

EXPRESSION_DIM = 16
HIDDEN_WIDTH = 64
SIGMA_FEATURES = 16
# exp() of larger log-densities only saturates alpha further
LOG_DENSITY_MAX = 15.0


def constant_expression() -> np.ndarray:
    return np.ones(EXPRESSION_DIM)


def as_expression(code) -> np.ndarray:
    e = np.asarray(code, dtype=np.float64)
    if e.shape != (EXPRESSION_DIM,):
        raise ShapeMismatch(f"expression code must have {EXPRESSION_DIM} entries, got {e.shape}")
    if not np.all(np.isfinite(e)):
        raise ValueError("expression code has non-finite entries")
    return e


@dataclass
class MlpTape:
    owner: int
    acts: list  # input to each layer
    out: np.ndarray  # final output, after the output activation

    def __len__(self) -> int:
        return len(self.out)

    def take(self, idx) -> "MlpTape":
        return MlpTape(self.owner, [a[idx] for a in self.acts], self.out[idx])


class Mlp:
    """ReLU hidden layers; linear or sigmoid output."""

    def __init__(self, widths: list[int], output_activation: str | None = None):
        if output_activation not in (None, "sigmoid"):
            raise ValueError(f"unsupported output activation {output_activation!r}")
        self.widths = list(widths)
        self.output_activation = output_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    def bind(self, arrays: list[np.ndarray]) -> None:
        self.weights = list(arrays[0::2])
        self.biases = list(arrays[1::2])

    def initialize(self, rng: np.random.Generator) -> None:
        for w, b in zip(self.weights, self.biases):
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-limit, limit, w.shape)
            b[...] = 0.0

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeMismatch(f"expected input width {self.widths[0]}, got {x.shape}")
        acts = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            acts.append(h)
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        if self.output_activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
        return h, MlpTape(id(self), acts, h)

    def backward(self, tape: MlpTape, dy: np.ndarray, grads: list[np.ndarray] | None = None):
        """Reverse pass; adds into ``grads`` (same layout as ``bind``) when given.

        Returns (parameter gradients, input gradient).
        """
        if tape.owner != id(self):
            raise TapeMismatch("tape was recorded by a different network")
        if dy.shape != tape.out.shape:
            raise TapeMismatch(f"upstream shape {dy.shape} != output shape {tape.out.shape}")
        if grads is None:
            grads = [np.zeros(s, dtype=self.weights[0].dtype) for s in self.param_shapes()]
        g = dy
        if self.output_activation == "sigmoid":
            g = g * tape.out * (1.0 - tape.out)
        for i in range(len(self.weights) - 1, -1, -1):
            a = tape.acts[i]
            grads[2 * i] += a.T @ g
            grads[2 * i + 1] += g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (a > 0)
        return grads, g


def density_forward(net: Mlp, hash_features, expression):
    """Returns (sigma_features, density, tape) for a batch or a single sample."""
    single = np.ndim(hash_features) == 1
    h = np.atleast_2d(hash_features)
    e = np.atleast_2d(expression)
    if len(e) == 1 and len(h) > 1:
        e = np.broadcast_to(e, (len(h), e.shape[1]))
    if h.shape[0] != e.shape[0]:
        raise ShapeMismatch("feature and expression batch sizes differ")
    x = np.concatenate([h, e.astype(h.dtype)], axis=1)
    sigma_features, tape = net.forward(x)
    density = np.exp(np.minimum(sigma_features[:, 0], LOG_DENSITY_MAX))
    if single:
        return sigma_features[0], density[0], tape
    return sigma_features, density, tape


def color_forward(net: Mlp, sigma_features, dir_encoding):
    single = np.ndim(sigma_features) == 1
    s = np.atleast_2d(sigma_features)
    d = np.atleast_2d(dir_encoding)
    if len(d) == 1 and len(s) > 1:
        d = np.broadcast_to(d, (len(s), d.shape[1]))
    if s.shape[0] != d.shape[0]:
        raise ShapeMismatch("feature and direction batch sizes differ")
    rgb, tape = net.forward(np.concatenate([s, d.astype(s.dtype)], axis=1))
    return (rgb[0], tape) if single else (rgb, tape)


def joint_backward(density_net: Mlp, color_net: Mlp, density_tape: MlpTape, color_tape: MlpTape,
                   g_density, g_rgb, density_grads=None, color_grads=None):
    """Gradients for the density -> color pipeline.

    ``g_density`` is dL/d(density), ``g_rgb`` is dL/d(rgb). The color net's
    gradient w.r.t. its sigma-feature inputs is routed back into the density
    net together with the density path. Returns
    (density param grads, color param grads, dL/d(hash features), dL/d(expression)).
    """
    if len(density_tape) != len(color_tape):
        raise TapeMismatch("density and color tapes cover different samples")
    g_rgb = np.atleast_2d(g_rgb)
    cgrads, g_color_in = color_net.backward(color_tape, g_rgb.astype(color_tape.out.dtype), color_grads)
    g_sigma_feat = g_color_in[:, :SIGMA_FEATURES].copy()
    raw = density_tape.out[:, 0]
    dens = np.exp(np.minimum(raw, LOG_DENSITY_MAX))
    g_sigma_feat[:, 0] += np.atleast_1d(g_density) * np.where(raw < LOG_DENSITY_MAX, dens, 0.0)
    dgrads, g_in = density_net.backward(density_tape, g_sigma_feat.astype(density_tape.out.dtype),
                                        density_grads)
    n_hash = density_net.widths[0] - EXPRESSION_DIM
    return dgrads, cgrads, g_in[:, :n_hash], g_in[:, n_hash:]


class RadianceField:
    """Hash grid + density net + color net over one flat parameter buffer."""

    def __init__(self, grid_config: HashGridConfig, params: np.ndarray | None = None,
                 dtype=np.float32, global_conditioning: bool = False):
        self.grid_config = grid_config
        self.global_conditioning = global_conditioning
        n_hash = grid_config.output_dim
        self.density_net = Mlp([n_hash + EXPRESSION_DIM, HIDDEN_WIDTH, SIGMA_FEATURES])
        self.color_net = Mlp([SIGMA_FEATURES + SH_DIM, HIDDEN_WIDTH, 3], output_activation="sigmoid")
        table_shape = (grid_config.levels, grid_config.table_size, grid_config.features_per_entry)
        self.shapes = [table_shape] + self.density_net.param_shapes() + self.color_net.param_shapes()
        self.size = int(sum(np.prod(s) for s in self.shapes))
        if params is None:
            params = np.zeros(self.size, dtype=dtype)
        if params.shape != (self.size,):
            raise ShapeMismatch(f"parameter buffer has {params.shape}, need ({self.size},)")
        self.params = params
        views = self.split(params)
        self.grid = HashGrid(grid_config, views[0])
        nd = len(self.density_net.param_shapes())
        self.density_net.bind(views[1:1 + nd])
        self.color_net.bind(views[1 + nd:])

    @staticmethod
    def parameter_count(grid_config: HashGridConfig) -> int:
        n_hash = grid_config.output_dim
        tables = grid_config.levels * grid_config.table_size * grid_config.features_per_entry
        dens = (n_hash + EXPRESSION_DIM + 1) * HIDDEN_WIDTH + (HIDDEN_WIDTH + 1) * SIGMA_FEATURES
        col = (SIGMA_FEATURES + SH_DIM + 1) * HIDDEN_WIDTH + (HIDDEN_WIDTH + 1) * 3
        return tables + dens + col

    @property
    def dtype(self):
        return self.params.dtype

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        out, off = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(flat[off:off + n].reshape(s))
            off += n
        return out

    def initialize(self, rng: np.random.Generator) -> None:
        self.grid.initialize(rng)
        self.density_net.initialize(rng)
        self.color_net.initialize(rng)

    def with_params(self, params: np.ndarray) -> "RadianceField":
        return RadianceField(self.grid_config, params, global_conditioning=self.global_conditioning)

    # -- batched evaluation used by the renderer ------------------------------

    def density(self, canon: np.ndarray, expression: np.ndarray):
        feats = self.grid.encode(canon)
        sigma_feat, dens, tape = density_forward(self.density_net, feats, expression)
        return dens.astype(np.float64), {"canon": canon, "dtape": tape, "sigma_feat": sigma_feat}

    def color(self, state: dict, sh: np.ndarray):
        rgb, tape = color_forward(self.color_net, state["sigma_feat"], sh)
        state["ctape"] = tape
        return rgb.astype(np.float64), state

    @staticmethod
    def take(state: dict, idx) -> dict:
        out = {}
        for k, v in state.items():
            out[k] = v.take(idx) if isinstance(v, MlpTape) else v[idx]
        return out

    def backward(self, state: dict, g_density, g_rgb, grad_flat: np.ndarray) -> None:
        """Accumulate parameter gradients of one rendered batch into ``grad_flat``."""
        views = self.split(grad_flat)
        nd = len(self.density_net.param_shapes())
        _, _, g_hash, _ = joint_backward(
            self.density_net, self.color_net, state["dtape"], state["ctape"],
            np.asarray(g_density, dtype=np.float64), g_rgb,
            density_grads=views[1:1 + nd], color_grads=views[1 + nd:],
        )
        self.grid.accumulate_gradient(state["canon"], g_hash, views[0])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    shadow: np.ndarray
    step: int = 0
    lr: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    ema_decay: float = 0.95
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), params.copy(), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> None:
    """Bias-corrected Adam update in place, then the EMA shadow update."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch("parameter, gradient and moment buffers differ in shape")
    impl = kernels if params.dtype == np.float32 else _fallback
    bad = impl.adam_update(params, grads, state.m, state.v, state.shadow, state.lr, state.beta1,
                           state.beta2, state.eps, state.step + 1, state.ema_decay)
    if bad:
        raise NonFiniteGradient(f"{bad} non-finite gradient entries at optimizer step {state.step + 1}",
                                step=state.step + 1)
    state.step += 1
