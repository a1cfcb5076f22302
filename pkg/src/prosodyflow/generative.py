"""Stochastic contour back-ends (NF, CFM, RF) and the deterministic baseline.

All four share one surface: train on (condition, contour) pairs, sample
contours given a condition and a temperature. Scalar contours are lifted
to the model's noise dimensionality by channel replication and projected
back by group averaging.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, no_grad
from .nets import (
    CouplingConfig,
    CouplingStack,
    DetConfig,
    DetPredictor,
    DiTConfig,
    DiTStack,
    Module,
)

KINDS = ("NF", "CFM", "RF", "DET")


class GenerativeError(Exception):
    pass


@dataclass
class SamplerConfig:
    """Sampling controls. temperature=0 zeroes the initial noise, which
    makes the trajectory (and therefore the sample) deterministic."""

    temperature: float = 1.0
    solver_steps: int | None = None
    seed: int = 0

    def validate(self):
        if self.temperature < 0:
            raise GenerativeError(f"temperature must be >= 0, got {self.temperature}")
        if self.solver_steps is not None and self.solver_steps < 1:
            raise GenerativeError("solver_steps must be >= 1")


@dataclass
class FlowModel:
    """One trained back-end: kind, network and sampling defaults."""

    kind: str
    net: Module
    noise_dim: int
    out_dim: int = 1
    sigma_min: float = 1e-4
    solver_steps: int = 12
    share_noise_across_groups: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GenerativeError(f"unknown model kind {self.kind!r}")
        if not 0.0 <= self.sigma_min <= 0.1:
            raise GenerativeError(f"sigma_min must be in [0, 0.1], got {self.sigma_min}")
        if self.solver_steps < 1:
            raise GenerativeError("solver_steps must be >= 1")
        if self.kind != "DET" and self.noise_dim % self.out_dim != 0:
            raise GenerativeError(
                f"noise_dim {self.noise_dim} not divisible by out_dim {self.out_dim}"
            )
        if self.kind == "RF" and "teacher_hash" not in self.metadata:
            raise GenerativeError("RF models must record the teacher checkpoint hash")

    def param_hash(self) -> str:
        """sha256 of the float32 little-endian payload in sorted-name order."""
        h = hashlib.sha256()
        params = self.net.params()
        for name in sorted(params):
            h.update(params[name].data.astype("<f4").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Lifting between scalar contours and the noise space
# ---------------------------------------------------------------------------

def lift_contour(contour: np.ndarray, noise_dim: int) -> np.ndarray:
    """Replicate each of the out_dim scalars into noise_dim/out_dim channels."""
    contour = np.asarray(contour, dtype=np.float64)
    out_dim = contour.shape[-1]
    if noise_dim % out_dim != 0:
        raise GenerativeError(
            f"lift_contour: noise_dim {noise_dim} not divisible by out_dim {out_dim}"
        )
    return np.repeat(contour, noise_dim // out_dim, axis=-1)


def unlift_contour(lifted: np.ndarray, out_dim: int) -> np.ndarray:
    """Average each channel group back down to one scalar per variable."""
    lifted = np.asarray(lifted, dtype=np.float64)
    noise_dim = lifted.shape[-1]
    if noise_dim % out_dim != 0:
        raise GenerativeError(
            f"unlift_contour: noise_dim {noise_dim} not divisible by out_dim {out_dim}"
        )
    group = noise_dim // out_dim
    grouped = lifted.reshape(*lifted.shape[:-1], out_dim, group)
    # anchor on the first channel so replicated groups invert bit-exactly
    first = grouped[..., 0]
    return first + (grouped - first[..., None]).mean(axis=-1)


def draw_noise(model: FlowModel, rng: np.random.Generator, shape_prefix: tuple,
               temperature: float) -> np.ndarray:
    """Initial noise, N(0, temperature^2 I); optionally one draw shared
    across the lifted channel groups (joint-mode coupling of variables)."""
    if temperature == 0.0:
        return np.zeros((*shape_prefix, model.noise_dim))
    if model.share_noise_across_groups and model.out_dim > 1:
        group = model.noise_dim // model.out_dim
        base = rng.standard_normal((*shape_prefix, group))
        noise = np.tile(base, model.out_dim)
    else:
        noise = rng.standard_normal((*shape_prefix, model.noise_dim))
    return temperature * noise


# ---------------------------------------------------------------------------
# Conditional flow matching
# ---------------------------------------------------------------------------

def ot_path(x0: np.ndarray, x1: np.ndarray, t, sigma_min: float):
    """Conditional optimal-transport interpolant and its target field.

    x_t = (1 - (1 - sigma_min) t) x0 + t x1,  u = x1 - (1 - sigma_min) x0.
    ``t`` may be a scalar or a per-batch array broadcast over trailing dims.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise GenerativeError(f"ot_path: t outside [0, 1]")
    while t_arr.ndim < np.ndim(x0):
        t_arr = t_arr[..., None]
    a = 1.0 - (1.0 - sigma_min) * t_arr
    x_t = a * x0 + t_arr * x1
    u = x1 - (1.0 - sigma_min) * x0
    return x_t, u


def _masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return ad.mse(pred, Tensor(target))
    m = np.asarray(mask, dtype=np.float64)[..., None]
    count = m.sum() * pred.shape[-1]
    diff = ad.sub(pred, Tensor(target))
    sq = ad.mul(ad.mul(diff, diff), Tensor(m))
    return ad.mul(ad.sum_(sq), 1.0 / count)


def cfm_pair_loss(model: FlowModel, cond: np.ndarray, x0: np.ndarray,
                  x1: np.ndarray, rng: np.random.Generator,
                  mask: np.ndarray | None = None) -> Tensor:
    """Flow-matching regression loss on a fixed (noise, data) coupling."""
    bsize = x0.shape[0] if x0.ndim == 3 else 1
    t = rng.uniform(0.0, 1.0, size=bsize)
    if x0.ndim == 2:
        t = float(t[0])
    x_t, u = ot_path(x0, x1, t, model.sigma_min)
    v = model.net.forward(x_t, cond, t, mask=mask)
    loss = _masked_mse(v, u, mask)
    if not np.isfinite(loss.data):
        raise GenerativeError(
            f"cfm loss is not finite (kind={model.kind}, "
            f"|x_t|max={np.abs(x_t).max():.3g}, |u|max={np.abs(u).max():.3g})"
        )
    return loss


def cfm_loss(model: FlowModel, cond: np.ndarray, contour_lifted: np.ndarray,
             rng: np.random.Generator, mask: np.ndarray | None = None) -> Tensor:
    """Flow-matching loss with fresh standard-normal noise endpoints."""
    contour_lifted = np.asarray(contour_lifted, dtype=np.float64)
    prefix = contour_lifted.shape[:-1]
    x0 = draw_noise(model, rng, prefix, 1.0)
    return cfm_pair_loss(model, cond, x0, contour_lifted, rng, mask=mask)


# ---------------------------------------------------------------------------
# ODE sampling
# ---------------------------------------------------------------------------

def euler_solve(field, x0: np.ndarray, steps: int) -> np.ndarray:
    """Fixed-step Euler integration of dx/dt = field(x, t) from t=0 to 1.

    ``field`` is either a callable (x, t) -> dx/dt or a FlowModel (in which
    case use ``vector_field`` to bind a condition first).
    """
    if steps < 1:
        raise GenerativeError(f"euler_solve: steps must be >= 1, got {steps}")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        v = field(x, k / steps)
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise ad.NonFiniteError(
                f"euler_solve: non-finite state at step {k + 1}/{steps}"
            )
    return x


def vector_field(model: FlowModel, cond: np.ndarray, mask: np.ndarray | None = None):
    """Bind a condition to an ODE model, yielding a plain (x, t) callable."""
    if model.kind not in ("CFM", "RF"):
        raise GenerativeError(f"vector_field: model kind {model.kind} is not ODE-based")

    def field(x, t):
        with no_grad():
            return model.net.forward(x, cond, t, mask=mask).data

    return field


# ---------------------------------------------------------------------------
# Normalizing-flow likelihood
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def nf_loss(model: FlowModel, cond: np.ndarray, contour_lifted: np.ndarray,
            mask: np.ndarray | None = None) -> Tensor:
    """Negative log-likelihood per token-channel under the coupling flow.

    NLL = -(log N(f(x); 0, I) + log|det J_f(x)|) / (valid tokens * channels).
    """
    lifted = np.asarray(contour_lifted, dtype=np.float64)
    z, log_det = model.net.forward(lifted, cond, token_mask=mask)
    if mask is None:
        count = float(np.prod(lifted.shape[:-1])) * lifted.shape[-1]
        quad = ad.sum_(ad.mul(z, z))
    else:
        m = np.asarray(mask, dtype=np.float64)[..., None]
        count = m.sum() * lifted.shape[-1]
        quad = ad.sum_(ad.mul(ad.mul(z, z), Tensor(m)))
    nll = ad.mul(
        ad.sub(ad.add(ad.mul(quad, 0.5), 0.5 * _LOG_2PI * count), ad.sum_(log_det)),
        1.0 / count,
    )
    if not np.isfinite(nll.data):
        raise GenerativeError("nf loss is not finite")
    return nll


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample(model: FlowModel, cond: np.ndarray, sampler: SamplerConfig) -> np.ndarray:
    """One contour draw, [tokens, out_dim]."""
    return sample_batch(model, cond, sampler, n_draws=1)[0]


def sample_batch(model: FlowModel, cond: np.ndarray, sampler: SamplerConfig,
                 n_draws: int) -> np.ndarray:
    """n_draws contours for one condition, [n_draws, tokens, out_dim].

    ``cond`` is either a single [tokens, D] condition shared by all draws
    or per-draw conditions [n_draws, tokens, D] (the cascade's residual
    updates differ per draw). Durations (when present) come back in the
    log domain; rounding and clamping are the cascade's post-processing
    step.
    """
    sampler.validate()
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 3:
        if cond.shape[0] != n_draws:
            raise GenerativeError(
                f"sample_batch: {cond.shape[0]} per-draw conditions for "
                f"{n_draws} draws"
            )
        cond_tiled = cond
        tokens = cond.shape[1]
    else:
        tokens = cond.shape[0]
        cond_tiled = np.broadcast_to(cond, (n_draws, tokens, cond.shape[-1]))
    rng = np.random.default_rng(sampler.seed)

    if model.kind == "DET":
        with no_grad():
            out = model.net.forward(cond_tiled).data
        return out

    x0 = draw_noise(model, rng, (n_draws, tokens), sampler.temperature)

    if model.kind in ("CFM", "RF"):
        steps = sampler.solver_steps or model.solver_steps
        x1 = euler_solve(vector_field(model, cond_tiled), x0, steps)
    elif model.kind == "NF":
        with no_grad():
            x1 = model.net.inverse(x0, cond_tiled).data
    else:  # pragma: no cover - guarded by __post_init__
        raise GenerativeError(f"unknown kind {model.kind}")
    return unlift_contour(x1, model.out_dim)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def training_loss(model: FlowModel, cond: np.ndarray, target: np.ndarray,
                  rng: np.random.Generator, mask: np.ndarray | None = None,
                  nf_dequant_sigma: float = 0.05) -> Tensor:
    """Kind-appropriate loss for one batch.

    ``target`` is the raw [.., out_dim] contour; lifting happens here. NF
    training adds Gaussian dequantization noise to the replicated channels
    so the lifted data is full-rank (the likelihood of exactly replicated
    channels is degenerate); sampling is unaffected because the group mean
    of the added noise shrinks by 1/group.
    """
    target = np.asarray(target, dtype=np.float64)
    if model.kind == "DET":
        pred = model.net.forward(cond, mask=mask, training=True, rng=rng)
        return _masked_mse(pred, target, mask)
    lifted = lift_contour(target, model.noise_dim)
    if model.kind == "NF":
        if nf_dequant_sigma > 0:
            lifted = lifted + nf_dequant_sigma * rng.standard_normal(lifted.shape)
        return nf_loss(model, cond, lifted, mask=mask)
    return cfm_loss(model, cond, lifted, rng, mask=mask)


def train_model(model: FlowModel, batch_fn, steps: int, lr: float = 1e-3,
                seed: int = 0, nf_dequant_sigma: float = 0.05) -> list[float]:
    """Generic single-model loop: batch_fn(rng) -> (cond, target, mask).

    Returns the per-step loss history. The rng drives batch selection,
    time draws, noise draws and dropout, so a seed fixes the whole run.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(model.net.params(), lr=lr)
    history = []
    for _ in range(steps):
        cond, target, mask = batch_fn(rng)
        loss = training_loss(model, cond, target, rng, mask=mask,
                             nf_dequant_sigma=nf_dequant_sigma)
        backward(loss)
        opt.step()
        history.append(float(loss.data))
    model.metadata.setdefault("training", {})
    model.metadata["training"].update({"steps": steps, "lr": lr, "seed": seed})
    return history


# ---------------------------------------------------------------------------
# ReFlow rectification
# ---------------------------------------------------------------------------

def pad_conds(conds: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length condition sequences with a validity mask."""
    t_max = max(c.shape[0] for c in conds)
    d = conds[0].shape[-1]
    cond = np.zeros((len(conds), t_max, d))
    mask = np.zeros((len(conds), t_max))
    for i, c in enumerate(conds):
        cond[i, :c.shape[0]] = c
        mask[i, :c.shape[0]] = 1.0
    return cond, mask


def generate_couplings(teacher: FlowModel, conds: list[np.ndarray],
                       rng: np.random.Generator, pairs_per_cond: int = 8,
                       ode_steps_teacher: int = 100) -> list[tuple]:
    """Deterministic (noise, endpoint) couplings from a frozen teacher.

    Gaussian draws are pushed once through the teacher with many Euler
    steps; the resulting dataset needs no ground-truth contours. Returns
    (cond, x0, x_det) triples, one per coupling pair.
    """
    couplings = []
    for cond in conds:
        tokens = cond.shape[0]
        x0 = draw_noise(teacher, rng, (pairs_per_cond, tokens), 1.0)
        tiled = np.broadcast_to(cond, (pairs_per_cond, tokens, cond.shape[-1]))
        x_det = euler_solve(vector_field(teacher, tiled), x0, ode_steps_teacher)
        for j in range(pairs_per_cond):
            couplings.append((cond, x0[j], x_det[j]))
    return couplings


def reflow(teacher: FlowModel, conds: list[np.ndarray], rng: np.random.Generator,
           extra_steps: int | None = None, batch_size: int = 32, lr: float = 1e-3,
           ode_steps_teacher: int = 100, pairs_per_cond: int = 8,
           expected_teacher_hash: str | None = None) -> FlowModel:
    """Rectify a converged CFM by retraining on its own deterministic coupling.

    The coupling dataset is generated once from the frozen teacher (many
    Euler steps per solve); the student then continues flow-matching
    training on those fixed (noise, endpoint) pairs, which straightens the
    flow. With extra_steps=0 the student is a parameter-identical copy.

    extra_steps defaults to 10% of the teacher's recorded training steps.
    """
    if teacher.kind != "CFM":
        raise GenerativeError(f"reflow expects a CFM teacher, got {teacher.kind}")
    teacher_hash = teacher.param_hash()
    if expected_teacher_hash is not None and expected_teacher_hash != teacher_hash:
        raise GenerativeError(
            f"teacher checkpoint hash mismatch: expected {expected_teacher_hash}, "
            f"model has {teacher_hash}"
        )
    if extra_steps is None:
        base = teacher.metadata.get("training", {}).get("steps")
        if base is None:
            raise GenerativeError(
                "reflow: extra_steps not given and teacher records no step count"
            )
        extra_steps = max(1, int(round(0.1 * base)))

    student_net = DiTStack(teacher.net.config, np.random.default_rng(0))
    student_net.load_state(teacher.net.state())
    student = FlowModel(
        kind="RF",
        net=student_net,
        noise_dim=teacher.noise_dim,
        out_dim=teacher.out_dim,
        sigma_min=teacher.sigma_min,
        solver_steps=teacher.solver_steps,
        share_noise_across_groups=teacher.share_noise_across_groups,
        metadata={
            **{k: v for k, v in teacher.metadata.items()},
            "teacher_hash": teacher_hash,
            "ode_steps_teacher": ode_steps_teacher,
            "reflow_steps": extra_steps,
        },
    )
    if extra_steps == 0:
        return student

    couplings = generate_couplings(teacher, conds, rng,
                                   pairs_per_cond=pairs_per_cond,
                                   ode_steps_teacher=ode_steps_teacher)
    opt = Adam(student_net.params(), lr=lr)
    for _ in range(extra_steps):
        idx = rng.integers(0, len(couplings), size=batch_size)
        cond, mask = pad_conds([couplings[i][0] for i in idx])
        t_max = cond.shape[1]

        def pad_to(arrs):
            out = np.zeros((batch_size, t_max, teacher.noise_dim))
            for b, a in enumerate(arrs):
                out[b, :a.shape[0]] = a
            return out

        x0 = pad_to([couplings[i][1] for i in idx])
        x_det = pad_to([couplings[i][2] for i in idx])
        loss = cfm_pair_loss(student, cond, x0, x_det, rng, mask=mask)
        backward(loss)
        opt.step()
    return student


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def build_model(kind: str, condition_dim: int, out_dim: int = 1,
                noise_dim: int = 8, hidden: int = 8, n_layers: int = 6,
                kernel: int = 5, sigma_min: float = 1e-4, solver_steps: int = 12,
                share_noise_across_groups: bool = False,
                seed: int = 0, metadata: dict | None = None) -> FlowModel:
    """Construct an untrained model of the given kind with desk defaults."""
    rng = np.random.default_rng(seed)
    if kind in ("CFM", "RF"):
        net = DiTStack(DiTConfig(n_layers=n_layers, hidden=hidden, kernel=kernel,
                                 noise_dim=noise_dim, condition_dim=condition_dim), rng)
    elif kind == "NF":
        net = CouplingStack(CouplingConfig(n_layers=n_layers, noise_dim=noise_dim,
                                           condition_dim=condition_dim,
                                           hidden=hidden), rng)
    elif kind == "DET":
        net = DetPredictor(DetConfig(condition_dim=condition_dim,
                                     hidden=max(hidden, condition_dim),
                                     out_dim=out_dim), rng)
    else:
        raise GenerativeError(f"unknown model kind {kind!r}")
    meta = dict(metadata or {})
    if kind == "RF":
        meta.setdefault("teacher_hash", "untrained")
    return FlowModel(kind=kind, net=net, noise_dim=noise_dim, out_dim=out_dim,
                     sigma_min=sigma_min, solver_steps=solver_steps,
                     share_noise_across_groups=share_noise_across_groups,
                     metadata=meta)
