"""Dense-connected speech encoder and attention-gated mesh decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .losses import CONSTRAINT_MODES
from .numeric import (
    ParamTensor,
    ShapeError,
    activation,
    activation_backward,
    conv1d_backward,
    conv1d_forward,
    conv_output_length,
    fc_backward,
    fc_forward,
    make_rng,
    pool_channels_max,
    pool_channels_max_backward,
    pool_time_avg,
    pool_time_avg_backward,
)

N_CONV_LAYERS = 4
ATTENTION_ORDERS = ("paper_literal", "se_standard")

# ablation grid: constraint mode, dense encoder skips, decoder attention
VARIANTS = {
    "a": dict(constraint_mode="none", dense=False, attention=False),
    "b": dict(constraint_mode="hsic", dense=False, attention=False),
    "c": dict(constraint_mode="huber", dense=False, attention=False),
    "d": dict(constraint_mode="hsic", dense=True, attention=False),
    "e": dict(constraint_mode="hsic", dense=False, attention=True),
    "f": dict(constraint_mode="hsic", dense=True, attention=True),
}


@dataclass(frozen=True)
class ModelConfig:
    W: int = 16
    D: int = 29
    S: int = 2
    N: int = 642
    latent_dim: int = 64
    base_filters: int = 32
    hidden: int = 256
    pca_rank: int = 50
    attention_order: str = "paper_literal"
    constraint_mode: str = "hsic"
    dense: bool = True
    attention: bool = True

    def __post_init__(self):
        for f in ("W", "D", "S", "N", "latent_dim", "base_filters", "hidden", "pca_rank"):
            if getattr(self, f) < 1:
                raise ValueError(f"ModelConfig.{f} must be positive, got {getattr(self, f)}")
        if self.attention_order not in ATTENTION_ORDERS:
            raise ValueError(f"unknown attention_order {self.attention_order!r}")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"unknown constraint_mode {self.constraint_mode!r}")
        if self.attention and self.hidden % 2:
            raise ValueError("attention needs an even hidden width")

    def with_variant(self, variant: str) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        return replace(self, **VARIANTS[variant])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def filters(layer: int, cfg: ModelConfig) -> int:
    return cfg.base_filters * 2 ** (layer - 1)


def layer_channels(k: int, cfg: ModelConfig) -> int:
    """Channel count of feature map ``x_k`` (``x_0`` is the conditioned input)."""
    return cfg.D + cfg.S if k == 0 else filters(k, cfg)


def encoder_input_channels(layer: int, cfg: ModelConfig, dense: bool | None = None) -> int:
    """Input width of conv layer ``layer`` (1-based).

    With dense skips every earlier map contributes half its channels after the
    channel-pair max pool.
    """
    if not 1 <= layer <= N_CONV_LAYERS:
        raise ValueError(f"layer index must be in 1..{N_CONV_LAYERS}, got {layer}")
    dense = cfg.dense if dense is None else dense
    c = layer_channels(layer - 1, cfg)
    if dense:
        c += sum(layer_channels(k, cfg) // 2 for k in range(layer - 1))
    return c


def time_lengths(W: int, stride: int = 2) -> list[int]:
    out = [W]
    for _ in range(N_CONV_LAYERS):
        out.append(conv_output_length(out[-1], stride))
    return out


# ---------------------------------------------------------------------------
# Attention gate


def attention_forward(x, w1, w2, order: str = "paper_literal"):
    """Per-feature gate ``x * a``; returns ``(x_tilde, cache)``.

    ``paper_literal``: ``a = relu(W2 sigmoid(W1 x))``;
    ``se_standard``: ``a = sigmoid(W2 relu(W1 x))``.
    """
    x = np.asarray(x)
    w1v = w1.value if isinstance(w1, ParamTensor) else np.asarray(w1)
    w2v = w2.value if isinstance(w2, ParamTensor) else np.asarray(w2)
    c = x.shape[-1]
    if w1v.shape != (c // 2, c) or c % 2:
        raise ShapeError("attention_block", "w1", (c // 2, c), w1v.shape)
    if w2v.shape != (c, c // 2):
        raise ShapeError("attention_block", "w2", (c, c // 2), w2v.shape)
    inner, outer = ("sigmoid", "relu") if order == "paper_literal" else ("relu", "sigmoid")
    if order not in ATTENTION_ORDERS:
        raise ValueError(f"unknown attention order {order!r}")
    u = x @ w1v.T
    s = activation(u, inner)
    q = s @ w2v.T
    a = activation(q, outer)
    return x * a, (x, u, s, q, a, inner, outer)


def attention_backward(grad_y, cache, w1, w2):
    x, u, s, q, a, inner, outer = cache
    w1v = w1.value if isinstance(w1, ParamTensor) else np.asarray(w1)
    w2v = w2.value if isinstance(w2, ParamTensor) else np.asarray(w2)
    grad_x = grad_y * a
    ga = grad_y * x
    gq = activation_backward(ga, q, outer, a)
    g2 = gq.reshape(-1, gq.shape[-1]).T @ s.reshape(-1, s.shape[-1])
    gs = gq @ w2v
    gu = activation_backward(gs, u, inner, s)
    g1 = gu.reshape(-1, gu.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    grad_x = grad_x + gu @ w1v
    if isinstance(w1, ParamTensor):
        w1.grad += g1
    if isinstance(w2, ParamTensor):
        w2.grad += g2
    return grad_x, g1, g2


def attention_block(x, w1, w2, order: str = "paper_literal"):
    return attention_forward(x, w1, w2, order)[0]


# ---------------------------------------------------------------------------
# PCA output layer


def pca_init_output_layer(displacements, rank: int = 50):
    """Principal directions of training displacements as the output-layer weight.

    Returns ``(weight, bias, offset)``: ``weight`` rows are the top ``rank``
    directions scaled by ``singular_value / sqrt(count)``, ``bias`` is zero and
    ``offset`` is the displacement mean, a fixed additive term.
    """
    d = np.asarray(displacements, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError("pca_init_output_layer", "displacements.ndim", 2, d.ndim)
    count, dim = d.shape
    if rank > count:
        raise ValueError(f"pca rank {rank} exceeds displacement count {count}")
    if rank > dim:
        raise ValueError(f"pca rank {rank} exceeds displacement dimension {dim}")
    mean = d.mean(axis=0)
    _, sv, vt = np.linalg.svd(d - mean, full_matrices=False)
    vt = _fix_signs(vt[:rank])
    weight = vt * (sv[:rank, None] / np.sqrt(count))
    return weight, np.zeros(dim), mean


def _fix_signs(rows):
    # deterministic orientation: the largest-magnitude entry of each row is positive
    rows = rows.copy()
    if rows.size:
        idx = np.argmax(np.abs(rows), axis=1)
        signs = np.sign(rows[np.arange(rows.shape[0]), idx])
        signs[signs == 0] = 1
        rows *= signs[:, None]
    return rows


# ---------------------------------------------------------------------------
# The network


class GDPNet:
    """Encoder/decoder with explicit forward caches and hand-derived backward."""

    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ParamTensor] = {}
        self.offset = np.zeros(3 * cfg.N, dtype=self.dtype)
        self._build(make_rng(seed))
        self.audit()

    # -- construction -------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = ParamTensor(np.ascontiguousarray(value, dtype=self.dtype))

    def _build(self, rng):
        cfg = self.cfg
        for layer in range(1, N_CONV_LAYERS + 1):
            cin = encoder_input_channels(layer, cfg)
            cout = filters(layer, cfg)
            self._add(f"conv{layer}.w", rng.normal(0, np.sqrt(2.0 / (3 * cin)), (3, cin, cout)))
            self._add(f"conv{layer}.b", np.zeros(cout))
        flat = time_lengths(cfg.W)[-1] * filters(N_CONV_LAYERS, cfg)
        self._add("enc_fc.w", rng.normal(0, np.sqrt(1.0 / flat), (flat, cfg.latent_dim)))
        self._add("enc_fc.b", np.zeros(cfg.latent_dim))
        self._add("dec_fc1.w", rng.normal(0, np.sqrt(1.0 / cfg.latent_dim), (cfg.latent_dim, cfg.hidden)))
        self._add("dec_fc1.b", np.zeros(cfg.hidden))
        if cfg.attention:
            c = cfg.hidden
            self._add("att.w1", rng.normal(0, np.sqrt(1.0 / c), (c // 2, c)))
            if cfg.attention_order == "paper_literal":
                # gate starts near 1: sigmoid outputs ~0.5 summed over C/2 inputs
                w2 = 4.0 / c + rng.normal(0, 0.1 * np.sqrt(2.0 / c), (c, c // 2))
            else:
                w2 = rng.normal(0, np.sqrt(2.0 / c), (c, c // 2))
            self._add("att.w2", w2)
        self._add("dec_fc2.w", rng.normal(0, np.sqrt(1.0 / cfg.hidden), (cfg.hidden, cfg.pca_rank)))
        self._add("dec_fc2.b", np.zeros(cfg.pca_rank))
        self._add("dec_out.w", rng.normal(0, 0.01, (cfg.pca_rank, 3 * cfg.N)))
        self._add("dec_out.b", np.zeros(3 * cfg.N))

    def audit(self) -> None:
        """Structural check that parameter shapes match the channel bookkeeping."""
        cfg = self.cfg
        for layer in range(1, N_CONV_LAYERS + 1):
            w = self.params[f"conv{layer}.w"]
            expect = (3, encoder_input_channels(layer, cfg), filters(layer, cfg))
            if w.shape != expect:
                raise ShapeError("audit", f"conv{layer}.w", expect, w.shape)
        if ("att.w1" in self.params) != cfg.attention:
            raise ShapeError("audit", "attention", cfg.attention, "att.w1" in self.params)
        if self.params["dec_out.w"].shape != (cfg.pca_rank, 3 * cfg.N):
            raise ShapeError("audit", "dec_out.w", (cfg.pca_rank, 3 * cfg.N), self.params["dec_out.w"].shape)

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def zero_params(self) -> None:
        for p in self.params.values():
            p.value[...] = 0
        self.offset[...] = 0

    def init_output_from_pca(self, displacements) -> None:
        weight, bias, offset = pca_init_output_layer(displacements, self.cfg.pca_rank)
        self.params["dec_out.w"].value[...] = weight
        self.params["dec_out.b"].value[...] = bias
        self.offset[...] = offset

    # -- forward ------------------------------------------------------------

    def _inputs(self, features, onehot):
        cfg = self.cfg
        f = np.asarray(features, dtype=self.dtype)
        if f.ndim == 2:
            f = f[None]
        oh = np.asarray(onehot, dtype=self.dtype)
        if oh.ndim == 1:
            oh = np.broadcast_to(oh, (f.shape[0], oh.shape[0]))
        if f.shape[1:] != (cfg.W, cfg.D):
            raise ShapeError("encoder_forward", "window", (cfg.W, cfg.D), f.shape[1:])
        if oh.shape != (f.shape[0], cfg.S):
            raise ShapeError("encoder_forward", "subject_onehot", (f.shape[0], cfg.S), oh.shape)
        rows = np.broadcast_to(oh[:, None, :], (f.shape[0], cfg.W, cfg.S))
        return np.concatenate([f, rows], axis=-1)

    def encode(self, features, onehot):
        """Speech windows ``(B, W, D)`` plus subject one-hot to latent ``(B, latent)``."""
        cfg = self.cfg
        P = self.params
        xs = [self._inputs(features, onehot)]
        layers = []
        for layer in range(1, N_CONV_LAYERS + 1):
            parts = [xs[-1]]
            skips = []
            if cfg.dense:
                for k in range(layer - 1):
                    factor = 2 ** (layer - 1 - k)
                    tp = pool_time_avg(xs[k], factor)
                    skips.append((k, factor, tp))
                    parts.append(pool_channels_max(tp))
            inp = np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]
            z = conv1d_forward(inp, P[f"conv{layer}.w"], P[f"conv{layer}.b"], stride=2)
            xs.append(activation(z, "relu"))
            layers.append((inp, z, skips, [p.shape[-1] for p in parts]))
        flat = xs[-1].reshape(xs[-1].shape[0], -1)
        r = fc_forward(flat, P["enc_fc.w"], P["enc_fc.b"])
        return r, {"xs": xs, "layers": layers, "flat": flat}

    def decode(self, r, template):
        cfg = self.cfg
        P = self.params
        r = np.asarray(r, dtype=self.dtype)
        template = np.asarray(template, dtype=self.dtype)
        if template.shape[-2:] != (cfg.N, 3):
            raise ShapeError("decoder_forward", "template", (cfg.N, 3), template.shape[-2:])
        z1 = fc_forward(r, P["dec_fc1.w"], P["dec_fc1.b"])
        h1 = np.tanh(z1)
        att = None
        if cfg.attention:
            h1g, att = attention_forward(h1, P["att.w1"], P["att.w2"], cfg.attention_order)
        else:
            h1g = h1
        z2 = fc_forward(h1g, P["dec_fc2.w"], P["dec_fc2.b"])
        h2 = np.tanh(z2)
        disp = fc_forward(h2, P["dec_out.w"], P["dec_out.b"]) + self.offset
        pred = template + disp.reshape(disp.shape[:-1] + (cfg.N, 3))
        return pred, {"r": r, "h1": h1, "att": att, "h1g": h1g, "h2": h2}

    def forward(self, features, onehot, template):
        """Returns ``(prediction, latent, cache)``."""
        r, enc = self.encode(features, onehot)
        pred, dec = self.decode(r, template)
        return pred, r, {"enc": enc, "dec": dec}

    def predict(self, features, onehot, template):
        pred, r, _ = self.forward(features, onehot, template)
        return pred, r

    # -- backward -----------------------------------------------------------

    def backward_decoder(self, cache, grad_pred):
        P = self.params
        g = np.asarray(grad_pred, dtype=self.dtype)
        g = g.reshape(g.shape[:-2] + (3 * self.cfg.N,))
        gh2, _, _ = fc_backward(g, cache["h2"], P["dec_out.w"], P["dec_out.b"])
        gz2 = gh2 * (1 - cache["h2"] ** 2)
        gh1g, _, _ = fc_backward(gz2, cache["h1g"], P["dec_fc2.w"], P["dec_fc2.b"])
        if cache["att"] is not None:
            gh1, _, _ = attention_backward(gh1g, cache["att"], P["att.w1"], P["att.w2"])
        else:
            gh1 = gh1g
        gz1 = gh1 * (1 - cache["h1"] ** 2)
        gr, _, _ = fc_backward(gz1, cache["r"], P["dec_fc1.w"], P["dec_fc1.b"])
        return gr

    def backward_encoder(self, cache, grad_r):
        P = self.params
        xs = cache["xs"]
        gflat, _, _ = fc_backward(grad_r, cache["flat"], P["enc_fc.w"], P["enc_fc.b"])
        gx = [None] * len(xs)
        gx[-1] = gflat.reshape(xs[-1].shape)
        for layer in range(N_CONV_LAYERS, 0, -1):
            inp, z, skips, widths = cache["layers"][layer - 1]
            gz = activation_backward(gx[layer], z, "relu")
            ginp, _, _ = conv1d_backward(gz, inp, P[f"conv{layer}.w"], P[f"conv{layer}.b"], stride=2)
            bounds = np.cumsum([0] + widths)
            direct = ginp[..., bounds[0] : bounds[1]]
            gx[layer - 1] = direct if gx[layer - 1] is None else gx[layer - 1] + direct
            for j, (k, factor, tp) in enumerate(skips):
                gpart = ginp[..., bounds[j + 1] : bounds[j + 2]]
                gtp = pool_channels_max_backward(gpart, tp)
                gk = pool_time_avg_backward(gtp, xs[k].shape[-2], factor)
                gx[k] = gk if gx[k] is None else gx[k] + gk
        return gx[0]

    def backward(self, cache, grad_pred, grad_r=None):
        """Accumulate parameter gradients for ``d loss / d pred`` and ``d loss / d r``."""
        gr = self.backward_decoder(cache["dec"], grad_pred)
        if grad_r is not None:
            gr = gr + np.asarray(grad_r, dtype=self.dtype)
        self.backward_encoder(cache["enc"], gr)

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.params.items()}
        out["dec_out.offset"] = self.offset
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self.params.items():
            v = np.asarray(arrays[name])
            if v.shape != p.shape:
                raise ShapeError("load_state", name, p.shape, v.shape)
            p.value[...] = v
        self.offset[...] = np.asarray(arrays["dec_out.offset"])

    def astype(self, dtype) -> "GDPNet":
        other = GDPNet.__new__(GDPNet)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.params = {n: ParamTensor(p.value.astype(dtype)) for n, p in self.params.items()}
        other.offset = self.offset.astype(dtype)
        return other


def onehot(index: int, size: int, dtype=np.float32) -> np.ndarray:
    if not 0 <= index < size:
        raise IndexError(f"subject index {index} out of range 0..{size - 1}")
    v = np.zeros(size, dtype=dtype)
    v[index] = 1
    return v
