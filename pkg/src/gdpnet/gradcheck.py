"""Finite-difference verification of the full training objective.

Instances are drawn at a small model size in double precision.  Draws whose
ReLU pre-activations or Huber residuals sit within ``KINK_MARGIN`` of a kink
are re-drawn, since central differences are ill-defined at subgradient points.
Draws with tanh pre-activations beyond ``TANH_LIMIT`` are re-drawn too: their
gradients fall below the roundoff floor of the difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .model import VARIANTS, GDPNet, ModelConfig
from .numeric import finite_diff_check, make_rng

KINK_MARGIN = 1e-3
TANH_LIMIT = 3.0

GRADCHECK_MODEL = ModelConfig(W=16, D=6, S=2, N=12, latent_dim=8, base_filters=4, hidden=16, pca_rank=6)


@dataclass
class GradcheckConfig:
    model: ModelConfig = field(default_factory=lambda: GRADCHECK_MODEL)
    batch: int = 2
    eps: float = 1e-5
    samples: int = 8
    seeds: int = 20
    variants: str = "abcdef"
    tolerance: float = 1e-4
    lambda1: float = 0.1
    lambda2: float = 10.0
    xi: float = 1.0


class Problem:
    """One random instance of the total loss wired for ``finite_diff_check``."""

    def __init__(self, model: GDPNet, rng: np.random.Generator, batch: int, weights: L.LossWeights, xi: float):
        cfg = model.cfg
        self.model = model
        self.weights = weights
        self.huber = L.HuberParams(xi=xi)
        self.f_t = rng.normal(size=(batch, cfg.W, cfg.D))
        self.f_tm1 = self.f_t + 0.3 * rng.normal(size=(batch, cfg.W, cfg.D))
        self.onehot = np.eye(cfg.S)[rng.integers(0, cfg.S, size=batch)]
        # small geometric scale keeps the loss O(0.1) so that central
        # differences are not swamped by roundoff on small gradients
        self.template = 0.1 * rng.normal(size=(cfg.N, 3))
        self.y_t = self.template + 0.05 * rng.normal(size=(batch, cfg.N, 3))
        self.y_tm1 = self.y_t + 0.01 * rng.normal(size=(batch, cfg.N, 3))
        self.r_hat = rng.normal(size=(batch, cfg.latent_dim))

    def loss(self, params=None, with_grad: bool = False) -> float:
        m = self.model
        p_t, r_t, c_t = m.forward(self.f_t, self.onehot, self.template)
        p_tm1, _, c_tm1 = m.forward(self.f_tm1, self.onehot, self.template)
        lr, g_rec = L.reconstruction_loss(p_t, self.y_t)
        lv, (gv_t, gv_tm1) = L.velocity_loss(p_t, p_tm1, self.y_t, self.y_tm1)
        lc, g_c = L.constraint_loss(r_t, self.r_hat, m.cfg.constraint_mode, self.huber)
        if with_grad:
            w = self.weights
            m.zero_grad()
            m.backward(c_t, g_rec + w.lambda2 * gv_t, w.lambda1 * g_c)
            m.backward(c_tm1, w.lambda2 * gv_tm1)
        return L.total_loss(lr, lc, lv, self.weights)

    def kink_margin(self) -> float:
        """Distance of the nearest ReLU / Huber kink from the current point."""
        return self._conditioning()[0]

    def tanh_peak(self) -> float:
        return self._conditioning()[1]

    def _conditioning(self):
        m = self.model
        margins = []
        peak = 0.0
        for feats in (self.f_t, self.f_tm1):
            r, enc = m.encode(feats, self.onehot)
            margins += [np.min(np.abs(z)) for _, z, _, _ in enc["layers"]]
            _, dec = m.decode(r, self.template)
            peak = max(peak, float(np.max(np.abs(np.arctanh(np.clip(dec["h1"], -1 + 1e-12, 1 - 1e-12))))),
                       float(np.max(np.abs(np.arctanh(np.clip(dec["h2"], -1 + 1e-12, 1 - 1e-12))))))
            if dec["att"] is not None:
                u, q = dec["att"][1], dec["att"][3]
                margins.append(np.min(np.abs(u if dec["att"][5] == "relu" else q)))
            if m.cfg.constraint_mode == "huber" and feats is self.f_t:
                margins.append(np.min(np.abs(np.abs(r - self.r_hat) - self.huber.xi)))
        return float(min(margins)), peak


def make_problem(model_cfg: ModelConfig, seed: int, cfg: GradcheckConfig, max_tries: int = 200) -> Problem:
    weights = L.LossWeights(cfg.lambda1, cfg.lambda2)
    for attempt in range(max_tries):
        rng = make_rng([seed, attempt])
        model = GDPNet(model_cfg, seed=[seed, attempt], dtype=np.float64)
        for p in model.params.values():
            p.value += 0.05 * rng.normal(size=p.shape)
        prob = Problem(model, rng, cfg.batch, weights, cfg.xi)
        margin, peak = prob._conditioning()
        if margin >= KINK_MARGIN and peak <= TANH_LIMIT:
            return prob
    raise RuntimeError(f"no well-conditioned draw after {max_tries} attempts (seed {seed})")


def check_variant(variant: str, seed: int, cfg: GradcheckConfig | None = None) -> float:
    cfg = cfg or GradcheckConfig()
    prob = make_problem(cfg.model.with_variant(variant), seed, cfg)
    prob.loss(with_grad=True)
    return finite_diff_check(prob.loss, prob.model.params, eps=cfg.eps,
                             samples_per_tensor=cfg.samples, rng=make_rng([seed, 7]))


def run_gradcheck(cfg: GradcheckConfig | None = None) -> dict[str, float]:
    """Worst relative error per variant over ``cfg.seeds`` random instances."""
    cfg = cfg or GradcheckConfig()
    if cfg.samples < 1:
        raise ValueError("samples must be >= 1")
    unknown = set(cfg.variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants: {sorted(unknown)}")
    return {v: max(check_variant(v, s, cfg) for s in range(cfg.seeds)) for v in cfg.variants}
