"""Cross-layer disparity alignment with per-layer coordinate MLPs.

Layer 1 is the fixed reference.  Every later layer ``n`` gets its own
small residual perceptron ``g_n`` over ``(x, y, disparity, r, g, b)`` and
its refined disparity is ``D_n + scale * g_n(...)``.  All nets are trained
jointly with Adam to make adjacent layers agree outside the removed
object's mask.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .raster import DisparityGrid, as_image, as_mask

__all__ = [
    "RefineConfig",
    "RefinementNet",
    "DisparityRefiner",
    "RefineResult",
    "RefinementDiverged",
    "consistency_loss",
    "refine_disparities",
]


class RefinementDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    hidden: int = 64
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 4096
    seed: int = 0
    eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    # cosine decay of the learning rate over the last fraction of steps
    decay_fraction: float = 0.5
    use_removal_masks: bool = False

    def __post_init__(self):
        if min(self.hidden, self.steps, self.batch) < 1 or not (self.lr > 0 and self.eps > 0):
            raise ValueError("refine config values must be positive")
        if not 0.0 <= self.decay_fraction <= 1.0:
            raise ValueError("decay_fraction must be in [0, 1]")

    def to_dict(self):
        return asdict(self)


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


@dataclass
class RefinementNet:
    """6 -> H -> H -> 1 SiLU perceptron whose output is a disparity residual."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    @classmethod
    def initialize(cls, hidden, rng) -> "RefinementNet":
        return cls(
            w1=rng.normal(0.0, np.sqrt(2.0 / 6), (6, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, hidden)),
            b2=np.zeros(hidden),
            w3=np.zeros((hidden, 1)),
            b3=np.zeros(1),
        )

    @property
    def size(self):
        return sum(getattr(self, k).size for k in self.NAMES)

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in self.NAMES])

    @classmethod
    def from_flat(cls, theta, hidden) -> "RefinementNet":
        shapes = [(6, hidden), (hidden,), (hidden, hidden), (hidden,), (hidden, 1), (1,)]
        parts, pos = [], 0
        for shp in shapes:
            n = int(np.prod(shp))
            parts.append(np.asarray(theta[pos:pos + n]).reshape(shp))
            pos += n
        return cls(*parts)

    def forward(self, x):
        z1 = x @ self.w1 + self.b1
        h1, s1 = _silu(z1)
        z2 = h1 @ self.w2 + self.b2
        h2, s2 = _silu(z2)
        out = (h2 @ self.w3 + self.b3)[:, 0]
        return out, (x, z1, s1, h1, z2, s2, h2)

    def backward(self, cache, dout) -> np.ndarray:
        """Flat gradient of ``sum(dout * out)`` with respect to the parameters."""
        x, z1, s1, h1, z2, s2, h2 = cache
        d = dout[:, None]
        gw3 = h2.T @ d
        gb3 = d.sum(axis=0)
        dh2 = d @ self.w3.T
        dz2 = dh2 * (s2 * (1.0 + z2 * (1.0 - s2)))
        gw2 = h1.T @ dz2
        gb2 = dz2.sum(axis=0)
        dh1 = dz2 @ self.w2.T
        dz1 = dh1 * (s1 * (1.0 + z1 * (1.0 - s1)))
        gw1 = x.T @ dz1
        gb1 = dz1.sum(axis=0)
        return np.concatenate([g.ravel() for g in (gw1, gb1, gw2, gb2, gw3, gb3)])


def consistency_loss(refined, masks) -> float:
    """Sum over adjacent pairs of ``(1 - M_n) * |D'_n - D'_{n+1}|``.

    Pixels invalid in either grid of a pair contribute nothing.
    """
    refined = list(refined)
    masks = list(masks)
    if len(masks) < len(refined) - 1:
        raise ValueError("need a mask for every adjacent layer pair")
    total = 0.0
    for n in range(len(refined) - 1):
        a, b = refined[n], refined[n + 1]
        m = as_mask(masks[n])
        if a.shape != b.shape or m.shape != a.shape:
            raise ValueError("dimension mismatch between layers and masks")
        use = a.valid & b.valid & ~m
        total += float(np.sum(np.abs(a.values[use] - b.values[use])))
    return total


@dataclass
class RefineResult:
    disparities: list
    nets: list
    initial_loss: float
    final_loss: float
    loss_trace: list


class DisparityRefiner:
    """Holds the layer data and evaluates the minibatch objective."""

    def __init__(self, disparities, images, masks, cfg: RefineConfig | None = None):
        self.cfg = cfg or RefineConfig()
        self.disp = list(disparities)
        n = len(self.disp)
        if n < 2:
            raise ValueError("refinement needs at least two layers")
        shape = self.disp[0].shape
        if any(d.shape != shape for d in self.disp):
            raise ValueError("all disparity grids must share dimensions")
        masks = [as_mask(m, shape) for m in masks]
        if len(masks) < n - 1:
            raise ValueError("need masks M_1..M_{N-1}")
        images = [as_image(im) for im in images]
        if len(images) != n or any(im.shape[:2] != shape for im in images):
            raise ValueError("need one image per layer with matching dimensions")
        self.shape = shape
        self.masks = masks[: n - 1]
        h, w = shape
        ref = self.disp[0]
        self.scale = float(np.median(ref.values[ref.valid])) if ref.valid.any() else 1.0
        ys, xs = np.mgrid[0:h, 0:w]
        xn = (xs / max(w - 1, 1) * 2.0 - 1.0).ravel()
        yn = (ys / max(h - 1, 1) * 2.0 - 1.0).ravel()
        self.values = [d.values.ravel() for d in self.disp]
        self.features = [
            np.column_stack([xn, yn, v / self.scale, im.reshape(-1, 3)])
            for v, im in zip(self.values, images)
        ]
        self.pairs = []
        for k in range(n - 1):
            use = self.disp[k].valid & self.disp[k + 1].valid & ~self.masks[k]
            self.pairs.append(np.flatnonzero(use.ravel()))
        self.net_size = RefinementNet.initialize(self.cfg.hidden, np.random.default_rng(0)).size

    @property
    def num_layers(self):
        return len(self.disp)

    def initial_params(self) -> np.ndarray:
        rng = np.random.default_rng(self.cfg.seed)
        nets = [RefinementNet.initialize(self.cfg.hidden, rng) for _ in range(self.num_layers - 1)]
        return np.concatenate([net.flat() for net in nets])

    def nets(self, theta):
        k = self.net_size
        return [RefinementNet.from_flat(theta[i * k:(i + 1) * k], self.cfg.hidden) for i in range(self.num_layers - 1)]

    def sample_batch(self, rng):
        return [
            rng.integers(0, len(idx), size=self.cfg.batch) if len(idx) else np.zeros(0, dtype=np.int64)
            for idx in self.pairs
        ]

    def full_batch(self):
        return [np.arange(len(idx)) for idx in self.pairs]

    def _layer_at(self, nets, layer, pix):
        base = self.values[layer][pix]
        if layer == 0:
            return base, None
        out, cache = nets[layer - 1].forward(self.features[layer][pix])
        return base + self.scale * out, cache

    def loss_and_grad(self, theta, batch):
        """Smoothed-L1 minibatch loss (mean per pair, summed) and its gradient."""
        eps = self.cfg.eps
        nets = self.nets(theta)
        grad = np.zeros_like(theta)
        k = self.net_size
        loss = 0.0
        for n, sel in enumerate(batch):
            if len(sel) == 0:
                continue
            pix = self.pairs[n][sel]
            a, cache_a = self._layer_at(nets, n, pix)
            b, cache_b = self._layer_at(nets, n + 1, pix)
            diff = a - b
            root = np.sqrt(diff * diff + eps * eps)
            loss += float(np.mean(root - eps))
            ddiff = diff / root / len(sel)
            if cache_a is not None:
                grad[(n - 1) * k:n * k] += nets[n - 1].backward(cache_a, self.scale * ddiff)
            grad[n * k:(n + 1) * k] += nets[n].backward(cache_b, -self.scale * ddiff)
        return loss, grad

    def refined(self, theta):
        nets = self.nets(theta)
        out = [self.disp[0]]
        for layer in range(1, self.num_layers):
            d = self.disp[layer]
            vals = d.values.copy().ravel()
            pix = np.flatnonzero(d.valid.ravel())
            res, _ = nets[layer - 1].forward(self.features[layer][pix])
            vals[pix] += self.scale * res
            out.append(DisparityGrid(vals.reshape(self.shape), d.valid))
        return out

    def optimize(self, callback=None) -> RefineResult:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed + 1)
        theta = self.initial_params()
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        initial = consistency_loss(self.refined(theta), self.masks)
        trace = []
        smoothed = None
        first_smoothed = None
        decay_start = int(round(cfg.steps * (1.0 - cfg.decay_fraction)))
        for step in range(1, cfg.steps + 1):
            loss, g = self.loss_and_grad(theta, self.sample_batch(rng))
            smoothed = loss if smoothed is None else 0.9 * smoothed + 0.1 * loss
            if first_smoothed is None:
                first_smoothed = smoothed
            if first_smoothed > 0 and smoothed > 10.0 * first_smoothed:
                raise RefinementDiverged(f"smoothed loss {smoothed:.4g} exceeds 10x its start at step {step}")
            trace.append(loss)
            lr = cfg.lr
            if step > decay_start:
                frac = (step - decay_start) / max(cfg.steps - decay_start, 1)
                lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** step)
            vhat = v / (1 - cfg.beta2 ** step)
            theta = theta - lr * mhat / (np.sqrt(vhat) + 1e-8)
            if callback is not None:
                callback(step, loss, theta)
        out = self.refined(theta)
        return RefineResult(out, self.nets(theta), initial, consistency_loss(out, self.masks), trace)


def refine_disparities(disparities, images, masks, cfg: RefineConfig | None = None) -> RefineResult:
    """Align disparity layers 2..N to layer 1; layer 1 is returned untouched."""
    return DisparityRefiner(disparities, images, masks, cfg).optimize()
