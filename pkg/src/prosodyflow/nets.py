"""Network building blocks for the contour predictors.

All blocks operate on token sequences shaped [batch, tokens, channels] with
an optional [batch, tokens, 1] validity mask. Masked positions stay exactly
zero through every sublayer so that padded batches are bit-identical to
per-utterance computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class NetError(Exception):
    pass


# ---------------------------------------------------------------------------
# Parameter registry
# ---------------------------------------------------------------------------

class Module:
    """Flat named-parameter container with Xavier-uniform initialization."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def _xavier(self, name: str, shape: tuple, rng: np.random.Generator,
                fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._param(name, rng.uniform(-limit, limit, size=shape))

    def _linear(self, name: str, d_in: int, d_out: int, rng, zero: bool = False):
        if zero:
            w = self._param(f"{name}.w", np.zeros((d_in, d_out)))
        else:
            w = self._xavier(f"{name}.w", (d_in, d_out), rng, d_in, d_out)
        b = self._param(f"{name}.b", np.zeros(d_out))
        return w, b

    def _conv(self, name: str, c_in: int, c_out: int, k: int, rng,
              zero: bool = False, depthwise: bool = False):
        shape = (c_out, 1 if depthwise else c_in, k)
        if zero:
            w = self._param(f"{name}.w", np.zeros(shape))
        else:
            w = self._xavier(f"{name}.w", shape, rng, c_in * k, c_out * k)
        b = self._param(f"{name}.b", np.zeros(c_out))
        return w, b

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise NetError(f"parameter mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise NetError(
                    f"parameter {name!r}: shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = np.asarray(arr, dtype=np.float64).copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}


# ---------------------------------------------------------------------------
# Time embedding
# ---------------------------------------------------------------------------

_MAX_FREQ = 100.0


def time_embed(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a flow time in [0, 1].

    Layout is [sin(w_0 t) .. sin(w_{h-1} t), cos(w_0 t) .. cos(w_{h-1} t)]
    with geometrically spaced frequencies from 1 to 100, so t=0 maps to
    all-zero sines and all-one cosines.
    """
    if not 0.0 <= t <= 1.0:
        raise NetError(f"time_embed: t={t} outside [0, 1]")
    if dim < 2 or dim % 2 != 0:
        raise NetError(f"time_embed: dim must be even and >= 2, got {dim}")
    return time_embed_array(np.array([t]), dim)[0]


def time_embed_array(ts: np.ndarray, dim: int) -> np.ndarray:
    """Vectorized ``time_embed`` over a [B] array of times."""
    ts = np.asarray(ts, dtype=np.float64)
    if np.any(ts < 0.0) or np.any(ts > 1.0):
        raise NetError("time_embed: times outside [0, 1]")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = _MAX_FREQ ** (np.arange(half) / (half - 1))
    ang = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _ensure_batched(x: np.ndarray | Tensor, name: str) -> tuple[Tensor, bool]:
    t = ad.as_tensor(x)
    if t.ndim == 2:
        return ad.reshape(t, (1, *t.shape)), True
    if t.ndim == 3:
        return t, False
    raise NetError(f"{name}: expected rank 2 or 3, got shape {t.shape}")


def _depthwise(h: Tensor, w: Tensor, b: Tensor, padding: int, channels: int) -> Tensor:
    ht = ad.transpose(h, (0, 2, 1))
    ht = ad.conv1d(ht, w, b, padding=padding, groups=channels)
    return ad.transpose(ht, (0, 2, 1))


# ---------------------------------------------------------------------------
# Time-conditioned transformer-style stack
# ---------------------------------------------------------------------------

@dataclass
class DiTConfig:
    n_layers: int = 6
    hidden: int = 8
    kernel: int = 5
    noise_dim: int = 8
    condition_dim: int = 32
    time_dim: int = 16
    ff_mult: int = 2
    use_attention: bool = False

    def validate(self):
        if self.n_layers < 1:
            raise NetError("DiTConfig: n_layers must be >= 1")
        if self.kernel % 2 != 1:
            raise NetError("DiTConfig: kernel must be odd")
        if self.noise_dim % 2 != 0:
            raise NetError("DiTConfig: noise_dim must be even")


class DiTStack(Module):
    """Stack of time-conditioned blocks predicting a per-token vector field.

    Each block applies adaptive-layer-norm modulation derived from the time
    embedding, mixes tokens with a depthwise convolution (optionally single
    head self-attention), and runs a pointwise feed-forward. The final
    projection is zero-initialized so an untrained stack outputs zeros.
    """

    def __init__(self, config: DiTConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.in_w, self.in_b = self._linear("in_proj", c.noise_dim, c.hidden, rng)
        self.cond_w, self.cond_b = self._linear("cond_proj", c.condition_dim, c.hidden, rng)
        self.t1_w, self.t1_b = self._linear("time_mlp.0", c.time_dim, c.hidden, rng)
        self.t2_w, self.t2_b = self._linear("time_mlp.1", c.hidden, c.hidden, rng)
        self.blocks = []
        for i in range(c.n_layers):
            blk = {
                # zero-init modulation: all blocks start as identity
                "mod": self._linear(f"blocks.{i}.mod", c.hidden, 6 * c.hidden, rng, zero=True),
                "ff1": self._linear(f"blocks.{i}.ff1", c.hidden, c.ff_mult * c.hidden, rng),
                "ff2": self._linear(f"blocks.{i}.ff2", c.ff_mult * c.hidden, c.hidden, rng),
            }
            if c.use_attention:
                blk["q"] = self._linear(f"blocks.{i}.q", c.hidden, c.hidden, rng)
                blk["k"] = self._linear(f"blocks.{i}.k", c.hidden, c.hidden, rng)
                blk["v"] = self._linear(f"blocks.{i}.v", c.hidden, c.hidden, rng)
            else:
                blk["dw"] = self._conv(f"blocks.{i}.dw", c.hidden, c.hidden, c.kernel,
                                       rng, depthwise=True)
            self.blocks.append(blk)
        self.out_w, self.out_b = self._linear("out_proj", c.hidden, c.noise_dim, rng,
                                              zero=True)

    def forward(self, x, cond, t, mask: np.ndarray | None = None) -> Tensor:
        """Vector field value at (x, cond, t).

        x: [tokens, noise_dim] or [B, tokens, noise_dim]; cond with matching
        token count; t: scalar in [0, 1] or per-batch array [B].
        """
        c = self.config
        x, squeezed = _ensure_batched(x, "dit_forward")
        cond, _ = _ensure_batched(cond, "dit_forward")
        if x.shape[1] != cond.shape[1]:
            raise NetError(
                f"dit_forward: token count mismatch, x has {x.shape[1]} tokens, "
                f"condition has {cond.shape[1]}"
            )
        bsize = x.shape[0]
        ts = np.full(bsize, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        temb = Tensor(time_embed_array(ts, c.time_dim))
        tvec = ad.silu(ad.add(ad.matmul(temb, self.t1_w), self.t1_b))
        tvec = ad.add(ad.matmul(tvec, self.t2_w), self.t2_b)
        tvec = ad.silu(tvec)

        m = None
        if mask is not None:
            m = Tensor(np.asarray(mask, dtype=np.float64).reshape(bsize, -1, 1))

        h = ad.add(ad.add(ad.matmul(x, self.in_w), self.in_b),
                   ad.add(ad.matmul(cond, self.cond_w), self.cond_b))
        if m is not None:
            h = ad.mul(h, m)

        for blk in self.blocks:
            mod = ad.add(ad.matmul(tvec, blk["mod"][0]), blk["mod"][1])
            parts = [ad.reshape(ad.slice_(mod, (slice(None), slice(j * c.hidden, (j + 1) * c.hidden))),
                                (bsize, 1, c.hidden)) for j in range(6)]
            sc1, sh1, g1, sc2, sh2, g2 = parts

            u = ad.scale_shift(ad.layernorm(h), sc1, sh1)
            if m is not None:
                u = ad.mul(u, m)  # keep padded rows zero before token mixing
            if c.use_attention:
                u = self._attend(u, blk, m)
            else:
                u = _depthwise(u, blk["dw"][0], blk["dw"][1], c.kernel // 2, c.hidden)
            if m is not None:
                u = ad.mul(u, m)
            h = ad.add_scaled(h, u, g1)

            v = ad.scale_shift(ad.layernorm(h), sc2, sh2)
            v = ad.add(ad.matmul(v, blk["ff1"][0]), blk["ff1"][1])
            v = ad.gelu(v)
            v = ad.add(ad.matmul(v, blk["ff2"][0]), blk["ff2"][1])
            if m is not None:
                v = ad.mul(v, m)
            h = ad.add_scaled(h, v, g2)

        out = ad.add(ad.matmul(ad.layernorm(h), self.out_w), self.out_b)
        if m is not None:
            out = ad.mul(out, m)
        if squeezed:
            out = ad.reshape(out, out.shape[1:])
        return out

    def _attend(self, u: Tensor, blk, m) -> Tensor:
        c = self.config
        q = ad.add(ad.matmul(u, blk["q"][0]), blk["q"][1])
        k = ad.add(ad.matmul(u, blk["k"][0]), blk["k"][1])
        v = ad.add(ad.matmul(u, blk["v"][0]), blk["v"][1])
        scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c.hidden))
        if m is not None:
            bias = (m.data.reshape(m.data.shape[0], 1, -1) - 1.0) * 1e9
            scores = ad.add(scores, Tensor(bias))
        return ad.bmm(ad.softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# Affine coupling flow
# ---------------------------------------------------------------------------

@dataclass
class CouplingConfig:
    n_layers: int = 6
    noise_dim: int = 8
    condition_dim: int = 32
    hidden: int = 8
    kernel: int = 3
    s_max: float = 5.0
    cond_proj_dim: int = 8  # shared condition projection fed to every layer

    def validate(self):
        if self.noise_dim % 2 != 0 or self.noise_dim < 2:
            raise NetError("CouplingConfig: noise_dim must be even and >= 2")
        if self.n_layers < 1:
            raise NetError("CouplingConfig: n_layers must be >= 1")


class CouplingLayer(Module):
    """One affine coupling: half the channels rescale/shift the other half.

    Scale and shift come from a small conv stack over tokens reading the
    kept channels plus the condition. The raw scale is squashed through
    ``s_max * tanh(raw / s_max)`` so |log-scale| <= s_max and a zero
    initialized net yields the identity map with zero log-determinant.
    """

    def __init__(self, config: CouplingConfig, channel_mask: np.ndarray,
                 rng: np.random.Generator, name: str = "coupling",
                 cond_dim: int | None = None):
        super().__init__()
        config.validate()
        self.config = config
        mask = np.asarray(channel_mask, dtype=np.float64)
        if mask.shape != (config.noise_dim,) or not set(np.unique(mask)) <= {0.0, 1.0}:
            raise NetError("CouplingLayer: mask must be binary over channels")
        if mask.sum() == 0 or mask.sum() == config.noise_dim:
            raise NetError("CouplingLayer: mask must split channels into two nonempty halves")
        self.mask = mask
        c_in = config.noise_dim + (cond_dim if cond_dim is not None
                                   else config.condition_dim)
        self.c1_w, self.c1_b = self._conv(f"{name}.net.0", c_in, config.hidden,
                                          config.kernel, rng)
        self.c2_w, self.c2_b = self._conv(f"{name}.net.1", config.hidden,
                                          2 * config.noise_dim, config.kernel, rng,
                                          zero=True)

    def _nets(self, kept: Tensor, cond: Tensor,
              token_mask: Tensor | None) -> tuple[Tensor, Tensor]:
        c = self.config
        pad = c.kernel // 2
        z = ad.concat([kept, cond], axis=-1)
        z = ad.transpose(z, (0, 2, 1))
        z = ad.conv1d(z, self.c1_w, self.c1_b, padding=pad)
        z = ad.gelu(z)
        if token_mask is not None:
            # keep padded columns zero so the second conv sees true padding
            z = ad.mul(z, ad.transpose(token_mask, (0, 2, 1)))
        z = ad.conv1d(z, self.c2_w, self.c2_b, padding=pad)
        z = ad.transpose(z, (0, 2, 1))
        s_raw = ad.slice_(z, (slice(None), slice(None), slice(0, c.noise_dim)))
        b = ad.slice_(z, (slice(None), slice(None), slice(c.noise_dim, 2 * c.noise_dim)))
        s = ad.mul(ad.tanh(ad.mul(s_raw, 1.0 / c.s_max)), c.s_max)
        return s, b

    def forward(self, x: Tensor, cond: Tensor, token_mask: Tensor | None):
        mask = Tensor(self.mask)
        inv_mask = Tensor(1.0 - self.mask)
        kept = ad.mul(x, mask)
        s, b = self._nets(kept, cond, token_mask)
        y = ad.add(kept, ad.mul(inv_mask, ad.add(ad.mul(x, ad.exp(s)), b)))
        s_eff = ad.mul(s, inv_mask)
        if token_mask is not None:
            y = ad.mul(y, token_mask)
            s_eff = ad.mul(s_eff, token_mask)
        log_det = ad.sum_(s_eff, axis=(1, 2))
        return y, log_det

    def inverse(self, y: Tensor, cond: Tensor, token_mask: Tensor | None) -> Tensor:
        mask = Tensor(self.mask)
        inv_mask = Tensor(1.0 - self.mask)
        kept = ad.mul(y, mask)
        s, b = self._nets(kept, cond, token_mask)
        x = ad.add(kept, ad.mul(inv_mask, ad.mul(ad.sub(y, b), ad.exp(ad.mul(s, -1.0)))))
        if token_mask is not None:
            x = ad.mul(x, token_mask)
        return x


class CouplingStack(Module):
    """Alternating-mask stack of affine couplings with additive log-dets.

    The condition is projected once per pass to ``cond_proj_dim`` channels
    and shared by every layer's scale/shift nets.
    """

    def __init__(self, config: CouplingConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.cp_w, self.cp_b = self._linear("cond_proj", config.condition_dim,
                                            config.cond_proj_dim, rng)
        half = config.noise_dim // 2
        base = np.zeros(config.noise_dim)
        base[:half] = 1.0
        self.layers: list[CouplingLayer] = []
        for i in range(config.n_layers):
            mask = base if i % 2 == 0 else 1.0 - base
            layer = CouplingLayer(config, mask, rng, name=f"layers.{i}",
                                  cond_dim=config.cond_proj_dim)
            self.layers.append(layer)
            self._params.update(layer._params)

    def _project_cond(self, cond: Tensor, tm: Tensor | None) -> Tensor:
        c = ad.add(ad.matmul(cond, self.cp_w), self.cp_b)
        if tm is not None:
            c = ad.mul(c, tm)
        return c

    def forward(self, x, cond, token_mask: np.ndarray | None = None):
        """Data to noise; returns (z, log_det per sequence)."""
        x, squeezed = _ensure_batched(x, "coupling_forward")
        cond, _ = _ensure_batched(cond, "coupling_forward")
        tm = _token_mask_tensor(token_mask, x.shape[0])
        cond_p = self._project_cond(cond, tm)
        total = None
        h = x
        for layer in self.layers:
            h, ld = layer.forward(h, cond_p, tm)
            total = ld if total is None else ad.add(total, ld)
        if squeezed:
            h = ad.reshape(h, h.shape[1:])
        return h, total

    def inverse(self, z, cond, token_mask: np.ndarray | None = None):
        """Noise to data; exact algebraic inverse of ``forward``."""
        z, squeezed = _ensure_batched(z, "coupling_inverse")
        cond, _ = _ensure_batched(cond, "coupling_inverse")
        tm = _token_mask_tensor(token_mask, z.shape[0])
        cond_p = self._project_cond(cond, tm)
        h = z
        for layer in reversed(self.layers):
            h = layer.inverse(h, cond_p, tm)
        if squeezed:
            h = ad.reshape(h, h.shape[1:])
        return h


def _token_mask_tensor(token_mask, bsize) -> Tensor | None:
    if token_mask is None:
        return None
    return Tensor(np.asarray(token_mask, dtype=np.float64).reshape(bsize, -1, 1))


# ---------------------------------------------------------------------------
# Deterministic baseline predictor
# ---------------------------------------------------------------------------

@dataclass
class DetConfig:
    condition_dim: int = 32
    hidden: int = 32
    kernel: int = 3
    out_dim: int = 1
    dropout: float = 0.1


class DetPredictor(Module):
    """Two conv blocks (conv, relu, layernorm, dropout) and a linear head.

    Inference mode is bit-stable; dropout only fires in training mode with
    an explicit rng.
    """

    def __init__(self, config: DetConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config
        self.c1_w, self.c1_b = self._conv("conv.0", c.condition_dim, c.hidden, c.kernel, rng)
        self.ln1_g = self._param("ln.0.g", np.ones(c.hidden))
        self.ln1_b = self._param("ln.0.b", np.zeros(c.hidden))
        self.c2_w, self.c2_b = self._conv("conv.1", c.hidden, c.hidden, c.kernel, rng)
        self.ln2_g = self._param("ln.1.g", np.ones(c.hidden))
        self.ln2_b = self._param("ln.1.b", np.zeros(c.hidden))
        self.head_w, self.head_b = self._linear("head", c.hidden, c.out_dim, rng)

    def forward(self, cond, mask: np.ndarray | None = None,
                training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        c = self.config
        if training and rng is None:
            raise NetError("DetPredictor: training mode requires an rng for dropout")
        cond, squeezed = _ensure_batched(cond, "det_predict")
        m = None
        if mask is not None:
            m = Tensor(np.asarray(mask, dtype=np.float64).reshape(cond.shape[0], -1, 1))
        pad = c.kernel // 2

        h = ad.transpose(cond, (0, 2, 1))
        h = ad.conv1d(h, self.c1_w, self.c1_b, padding=pad)
        h = ad.transpose(h, (0, 2, 1))
        h = ad.relu(h)
        h = ad.layernorm(h, self.ln1_g, self.ln1_b)
        h = ad.dropout(h, c.dropout, rng, training=training)
        if m is not None:
            h = ad.mul(h, m)

        h = ad.transpose(h, (0, 2, 1))
        h = ad.conv1d(h, self.c2_w, self.c2_b, padding=pad)
        h = ad.transpose(h, (0, 2, 1))
        h = ad.relu(h)
        h = ad.layernorm(h, self.ln2_g, self.ln2_b)
        h = ad.dropout(h, c.dropout, rng, training=training)
        if m is not None:
            h = ad.mul(h, m)

        out = ad.add(ad.matmul(h, self.head_w), self.head_b)
        if m is not None:
            out = ad.mul(out, m)
        if squeezed:
            out = ad.reshape(out, out.shape[1:])
        return out
