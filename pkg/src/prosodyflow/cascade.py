"""Predictor composition: sequential cascade with residual conditioning,
or one joint three-channel predictor. Owns contour containers and the
duration rounding contract.

Duration is always predicted last; it reads the final conditioned latent
but never modifies it (it is consumed by upsampling, not by later
predictors). During training, downstream conditioning uses ground-truth
contours (teacher forcing), so corrupting a downstream predictor cannot
change an upstream predictor's loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward
from .generative import (
    FlowModel,
    GenerativeError,
    SamplerConfig,
    build_model,
    sample_batch,
    training_loss,
)

VARIABLES = ("pitch", "energy", "duration")


class CascadeError(Exception):
    pass


# ---------------------------------------------------------------------------
# Contours
# ---------------------------------------------------------------------------

def round_durations(log_duration: np.ndarray) -> np.ndarray:
    """Log-duration to frames: exp, round half up, clamp to >= 1.

    Monotone in the log-duration by construction.
    """
    frames = np.floor(np.exp(np.asarray(log_duration, dtype=np.float64)) + 0.5)
    return np.maximum(frames, 1.0).astype(np.int64)


@dataclass
class ContourSet:
    """Aligned per-token prosody targets for one utterance realization."""

    pitch: np.ndarray
    energy: np.ndarray
    duration: np.ndarray  # integer frames, >= 1

    def __post_init__(self):
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.duration = np.asarray(self.duration)
        if not (self.pitch.shape == self.energy.shape == self.duration.shape):
            raise CascadeError(
                f"contours misaligned: pitch {self.pitch.shape}, "
                f"energy {self.energy.shape}, duration {self.duration.shape}"
            )
        if self.duration.ndim != 1:
            raise CascadeError("contours must be rank-1 per-token sequences")
        if np.any(self.duration < 1) or np.any(self.duration != np.floor(self.duration)):
            raise CascadeError("durations must be integers >= 1")
        self.duration = self.duration.astype(np.int64)

    @property
    def tokens(self) -> int:
        return self.pitch.shape[0]

    def log_duration(self) -> np.ndarray:
        """Training view of durations."""
        return np.log(self.duration.astype(np.float64))

    def value(self, variable: str) -> np.ndarray:
        if variable == "pitch":
            return self.pitch
        if variable == "energy":
            return self.energy
        if variable == "duration":
            return self.duration.astype(np.float64)
        raise CascadeError(f"unknown variable {variable!r}")

    def target(self, variable: str) -> np.ndarray:
        """Training-domain target: log frames for duration, raw otherwise."""
        return self.log_duration() if variable == "duration" else self.value(variable)

    def to_json(self) -> dict:
        return {
            "pitch": self.pitch.tolist(),
            "energy": self.energy.tolist(),
            "duration": self.duration.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ContourSet":
        return cls(pitch=np.array(obj["pitch"]), energy=np.array(obj["energy"]),
                   duration=np.array(obj["duration"]))


# ---------------------------------------------------------------------------
# Cascade bundle
# ---------------------------------------------------------------------------

@dataclass
class Cascade:
    """Predictor ordering plus the trained models and residual projections.

    mode "cascade": one out_dim-1 model per variable, pitch/energy order
    configurable, duration fixed last. mode "joint": a single out_dim-3
    model keyed "joint".
    """

    mode: str
    order: tuple[str, ...]
    models: dict[str, FlowModel]
    projections: dict[str, Tensor] = field(default_factory=dict)
    condition_dim: int = 32
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.order = tuple(self.order)
        if self.mode == "cascade":
            if sorted(self.order) != sorted(VARIABLES):
                raise CascadeError(f"cascade order must permute {VARIABLES}, got {self.order}")
            if self.order[-1] != "duration":
                raise CascadeError("duration must be last in every cascade order")
            missing = set(VARIABLES) - set(self.models)
            if missing:
                raise CascadeError(f"cascade missing models for {sorted(missing)}")
            for var in self.order[:-1]:
                if var not in self.projections:
                    raise CascadeError(f"missing residual projection for {var!r}")
        elif self.mode == "joint":
            if set(self.models) != {"joint"}:
                raise CascadeError("joint mode uses exactly one model keyed 'joint'")
            if self.models["joint"].out_dim != 3:
                raise CascadeError("joint model must have out_dim 3")
        else:
            raise CascadeError(f"unknown cascade mode {self.mode!r}")

    def params(self) -> dict[str, Tensor]:
        merged: dict[str, Tensor] = {}
        for var, model in self.models.items():
            for name, p in model.net.params().items():
                merged[f"{var}.{name}"] = p
        for var, w in self.projections.items():
            merged[f"proj.{var}"] = w
        return merged

    def kinds(self) -> dict[str, str]:
        return {var: m.kind for var, m in self.models.items()}


def build_cascade(kind: str, condition_dim: int = 32, mode: str = "cascade",
                  order: tuple[str, str] = ("energy", "pitch"), seed: int = 0,
                  **model_kwargs) -> Cascade:
    """Fresh untrained cascade; pitch/energy order given, duration appended.

    In joint mode the model is scaled up (noise_dim 12, hidden 14) so its
    parameter count roughly matches the three cascade predictors combined,
    and one noise draw is shared across the three lifted channel groups.
    """
    if mode == "joint":
        joint_kwargs = {"noise_dim": 12, "hidden": 14,
                        "share_noise_across_groups": True, **model_kwargs}
        model = build_model(kind, condition_dim, out_dim=3, seed=seed, **joint_kwargs)
        return Cascade(mode="joint", order=("joint",), models={"joint": model},
                       condition_dim=condition_dim)
    full_order = (*order, "duration")
    models = {}
    projections = {}
    for var in full_order:
        # seed keyed by variable, not cascade position, so both orders
        # start from identical per-variable parameters
        models[var] = build_model(kind, condition_dim, out_dim=1,
                                  seed=seed * 31 + VARIABLES.index(var),
                                  **model_kwargs)
    for var in full_order[:-1]:
        # zero-init: the cascade starts decoupled, orders coincide at init
        projections[var] = Tensor(np.zeros(condition_dim), requires_grad=True,
                                  name=f"proj.{var}")
    return Cascade(mode="cascade", order=full_order, models=models,
                   projections=projections, condition_dim=condition_dim)


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def make_batch(records, rng: np.random.Generator, batch_size: int):
    """Sample utterances (and one realization each) into padded arrays.

    Returns (cond [B,T,D], targets {var: [B,T]} in training domains,
    mask [B,T]).
    """
    idx = rng.integers(0, len(records), size=batch_size)
    picks = []
    for i in idx:
        rec = records[i]
        r = rng.integers(0, len(rec.realizations))
        picks.append((rec, rec.realizations[r]))
    t_max = max(rec.features.shape[0] for rec, _ in picks)
    d = picks[0][0].features.shape[-1]
    cond = np.zeros((batch_size, t_max, d))
    mask = np.zeros((batch_size, t_max))
    targets = {var: np.zeros((batch_size, t_max)) for var in VARIABLES}
    for b, (rec, real) in enumerate(picks):
        t = rec.features.shape[0]
        cond[b, :t] = rec.features
        mask[b, :t] = 1.0
        for var in VARIABLES:
            targets[var][b, :t] = real.target(var)
    return cond, targets, mask


def _project_contour(contour: np.ndarray | Tensor, weight: Tensor) -> Tensor:
    """Scalar contour [B,T] -> additive condition bump [B,T,D]."""
    c = contour if isinstance(contour, Tensor) else Tensor(np.asarray(contour)[..., None])
    return ad.mul(c, weight)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def cascade_train_step(cascade: Cascade, cond: np.ndarray, targets: dict,
                       mask: np.ndarray, opt: Adam, rng: np.random.Generator,
                       nf_dequant_sigma: float = 0.05) -> dict[str, float]:
    """One teacher-forced step over all predictors; returns per-variable losses.

    Downstream conditions are built from ground-truth contours, never from
    predictions, so upstream losses are independent of downstream
    parameters.
    """
    if cond.shape[:2] != mask.shape:
        raise CascadeError(f"condition {cond.shape} misaligned with mask {mask.shape}")
    for var, t in targets.items():
        if t.shape != mask.shape:
            raise CascadeError(f"target {var!r} shape {t.shape} misaligned with mask")

    losses: dict[str, Tensor] = {}
    if cascade.mode == "joint":
        stacked = np.stack([targets[v] for v in VARIABLES], axis=-1)
        losses["joint"] = training_loss(cascade.models["joint"], cond, stacked,
                                        rng, mask=mask,
                                        nf_dequant_sigma=nf_dequant_sigma)
    else:
        # one rng stream per variable, keyed canonically so that the
        # per-variable draws (t, noise, dropout) do not depend on the
        # cascade order; with zero projections the orders then coincide
        var_rngs = {v: np.random.default_rng(rng.integers(2**63)) for v in VARIABLES}
        cur_cond: Tensor | np.ndarray = cond
        for var in cascade.order:
            model = cascade.models[var]
            losses[var] = training_loss(model, cur_cond, targets[var][..., None],
                                        var_rngs[var], mask=mask,
                                        nf_dequant_sigma=nf_dequant_sigma)
            if var != cascade.order[-1]:
                bump = _project_contour(targets[var] * mask, cascade.projections[var])
                cur_cond = ad.add(ad.as_tensor(cur_cond), bump)

    total = None
    for loss in losses.values():
        total = loss if total is None else ad.add(total, loss)
    backward(total)
    opt.step()
    return {var: float(l.data) for var, l in losses.items()}


def train_cascade(cascade: Cascade, records, steps: int, batch_size: int = 32,
                  lr: float = 1e-3, seed: int = 0,
                  nf_dequant_sigma: float = 0.05) -> dict[str, list[float]]:
    """Full training loop; returns per-variable loss histories."""
    rng = np.random.default_rng(seed)
    opt = Adam(cascade.params(), lr=lr)
    history: dict[str, list[float]] = {}
    for _ in range(steps):
        cond, targets, mask = make_batch(records, rng, batch_size)
        losses = cascade_train_step(cascade, cond, targets, mask, opt, rng,
                                    nf_dequant_sigma=nf_dequant_sigma)
        for var, v in losses.items():
            history.setdefault(var, []).append(v)
    run_info = {"steps": steps, "batch_size": batch_size, "lr": lr, "seed": seed}
    cascade.metadata.update(run_info)
    for model in cascade.models.values():
        model.metadata.setdefault("training", {}).update(run_info)
    return history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def cascade_infer(cascade: Cascade, cond: np.ndarray, sampler: SamplerConfig,
                  n_draws: int = 1, capture_conds: dict | None = None) -> list[ContourSet]:
    """Sequential sampling with residual conditioning on sampled contours.

    Each predicted contour is projected and added to the condition before
    the next predictor runs; the duration predictor reads the final latent
    without modifying it. Durations are exp'd, rounded half-up and clamped
    to >= 1. When ``capture_conds`` is a dict it receives, per variable,
    the [n, T, D] condition array that predictor consumed.
    """
    sampler.validate()
    cond = np.asarray(cond, dtype=np.float64)
    if cascade.mode == "joint":
        if capture_conds is not None:
            capture_conds["joint"] = np.broadcast_to(
                cond, (n_draws, cond.shape[0], cond.shape[-1])
            ).copy()
        draws = sample_batch(cascade.models["joint"], cond, sampler, n_draws)
        return [
            ContourSet(pitch=draws[i, :, 0], energy=draws[i, :, 1],
                       duration=round_durations(draws[i, :, 2]))
            for i in range(n_draws)
        ]

    tokens = cond.shape[0]
    cur = np.broadcast_to(cond, (n_draws, tokens, cond.shape[-1])).copy()
    values: dict[str, np.ndarray] = {}
    for i, var in enumerate(cascade.order):
        model = cascade.models[var]
        var_sampler = SamplerConfig(temperature=sampler.temperature,
                                    solver_steps=sampler.solver_steps,
                                    seed=_child_seed(sampler.seed, i))
        if capture_conds is not None:
            capture_conds[var] = cur.copy()
        contour = sample_batch(model, cur, var_sampler, n_draws)[..., 0]  # [n,T]
        values[var] = contour
        if var != cascade.order[-1]:
            cur = cur + contour[..., None] * cascade.projections[var].data
    return [
        ContourSet(pitch=values["pitch"][i], energy=values["energy"][i],
                   duration=round_durations(values["duration"][i]))
        for i in range(n_draws)
    ]


def cascade_reflow(teacher: Cascade, records, rng: np.random.Generator,
                   extra_steps: int | None = None, batch_size: int = 32,
                   lr: float = 1e-3, ode_steps_teacher: int = 100) -> Cascade:
    """Rectify every CFM predictor in a trained bundle.

    Per-variable conditioning streams come from sampling the frozen
    teacher cascade (no ground-truth contours are consumed), so each
    student sees the condition distribution it will face at inference.
    Projections are copied unchanged.
    """
    from .generative import reflow  # local import keeps module load light

    kinds = set(m.kind for m in teacher.models.values())
    if kinds != {"CFM"}:
        raise CascadeError(f"cascade_reflow expects all-CFM predictors, got {sorted(kinds)}")

    cond_streams: dict[str, list[np.ndarray]] = {var: [] for var in teacher.models}
    for u, rec in enumerate(records):
        captured: dict = {}
        seed = _child_seed(int(rng.integers(2**31)), u)
        cascade_infer(teacher, rec.features, SamplerConfig(temperature=1.0, seed=seed),
                      n_draws=1, capture_conds=captured)
        for var, conds in captured.items():
            cond_streams[var].append(conds[0])

    new_models = {}
    for var, model in teacher.models.items():
        new_models[var] = reflow(model, cond_streams[var], rng,
                                 extra_steps=extra_steps, batch_size=batch_size,
                                 lr=lr, ode_steps_teacher=ode_steps_teacher)
    projections = {
        var: Tensor(w.data.copy(), requires_grad=True, name=w.name)
        for var, w in teacher.projections.items()
    }
    return Cascade(mode=teacher.mode, order=teacher.order, models=new_models,
                   projections=projections, condition_dim=teacher.condition_dim,
                   metadata={**teacher.metadata, "rectified": True})


# ---------------------------------------------------------------------------
# Order experiment (Table-1-shaped report)
# ---------------------------------------------------------------------------

@dataclass
class OrderReport:
    """Rows are configurations, columns are per-variable JS divergences."""

    rows: list[tuple[str, dict[str, float]]]

    def as_table(self) -> list[list]:
        out = [["configuration", *[f"{v}_js" for v in VARIABLES]]]
        for name, cols in self.rows:
            out.append([name, *[cols[v] for v in VARIABLES]])
        return out


def order_experiment(corpus, configurations: dict[str, Cascade], eval_hook) -> OrderReport:
    """Evaluate trained configurations into a 3x3 JS table.

    ``configurations`` maps row names (e.g. pitch_first / energy_first /
    joint) to trained cascades; ``eval_hook(cascade, corpus)`` returns
    {"pitch": js, "energy": js, "duration": js}.
    """
    rows = []
    for name, cascade in configurations.items():
        cols = eval_hook(cascade, corpus)
        missing = set(VARIABLES) - set(cols)
        if missing:
            raise CascadeError(f"eval hook omitted variables {sorted(missing)}")
        rows.append((name, {v: float(cols[v]) for v in VARIABLES}))
    return OrderReport(rows=rows)
