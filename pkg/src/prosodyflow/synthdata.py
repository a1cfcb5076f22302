"""Desk-scale synthetic corpus with analytically known conditional laws.

Token classes stand in for phonemes. Per class: pitch follows a
two-component Gaussian mixture (some classes genuinely bimodal), energy a
Gaussian correlated with the pitch draw through a shared latent, and
duration a discretized log-normal mixture whose location shifts with the
pitch residual, so knowing the realized pitch genuinely helps duration
prediction. Class laws are standardized so that pooled pitch/energy have
zero mean and unit variance, keeping per-utterance normalization a small
perturbation.

Multiple realizations of the same utterance share the token sequence and
conditioning but draw contours independently, mirroring many speakers
recording one sentence.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .cascade import ContourSet

FORMAT_VERSION = "toyprosody-v1"

_LAW_STREAM = 101
_EMBED_STREAM = 202
_UTT_STREAM = 303


class CorpusError(Exception):
    pass


# ---------------------------------------------------------------------------
# Specs and laws
# ---------------------------------------------------------------------------

@dataclass
class ToyCorpusSpec:
    n_token_classes: int = 16
    tokens_min: int = 5
    tokens_max: int = 20
    n_utterances: int = 200
    n_realizations_per_utterance: int = 24
    condition_dim: int = 32
    seed: int = 2024
    bimodal_fraction: float = 0.25
    pitch_duration_coupling: float = 0.35

    def validate(self):
        if self.n_token_classes < 1:
            raise CorpusError("n_token_classes must be >= 1")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise CorpusError(
                f"empty token range [{self.tokens_min}, {self.tokens_max}]"
            )
        if self.n_utterances < 1 or self.n_realizations_per_utterance < 1:
            raise CorpusError("utterance and realization counts must be >= 1")
        if self.condition_dim < 1:
            raise CorpusError("condition_dim must be >= 1")
        if not 0.0 <= self.bimodal_fraction <= 1.0:
            raise CorpusError("bimodal_fraction must be in [0, 1]")

    def spec_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class ClassLaw:
    """Analytic conditional law of one token class."""

    pitch_weights: tuple[float, float]
    pitch_means: tuple[float, float]
    pitch_sds: tuple[float, float]
    energy_mean: float
    energy_sd: float
    rho: float  # correlation of the energy latent with the pitch latent
    dur_log_mean: float
    dur_log_sd: float
    bimodal: bool

    def pitch_moments(self) -> tuple[float, float]:
        w = np.array(self.pitch_weights)
        m = np.array(self.pitch_means)
        s = np.array(self.pitch_sds)
        mean = float(w @ m)
        var = float(w @ (s**2 + m**2) - mean**2)
        return mean, np.sqrt(var)


@dataclass
class MixtureDensity:
    """Closed-form 1-D mixture density (Gaussian or log-normal components)."""

    kind: str  # "normal" | "lognormal"
    weights: np.ndarray
    means: np.ndarray  # log-domain location for lognormal
    sds: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sds = np.asarray(self.sds, dtype=np.float64)
        if not np.isclose(self.weights.sum(), 1.0):
            raise CorpusError("mixture weights must sum to 1")
        if np.any(self.sds <= 0):
            raise CorpusError("mixture component variances must be positive")

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        if self.kind == "normal":
            for w, m, s in zip(self.weights, self.means, self.sds):
                z = (x - m) / s
                out += w * np.exp(-0.5 * z * z) / (s * np.sqrt(2 * np.pi))
            return out
        if self.kind == "lognormal":
            pos = x > 0
            xp = np.where(pos, x, 1.0)
            for w, m, s in zip(self.weights, self.means, self.sds):
                z = (np.log(xp) - m) / s
                out += np.where(
                    pos, w * np.exp(-0.5 * z * z) / (xp * s * np.sqrt(2 * np.pi)), 0.0
                )
            return out
        raise CorpusError(f"unknown density kind {self.kind!r}")

    def span(self, k_sigma: float = 8.0) -> tuple[float, float]:
        """Interval containing essentially all mass (for grid construction)."""
        if self.kind == "normal":
            lo = float(np.min(self.means - k_sigma * self.sds))
            hi = float(np.max(self.means + k_sigma * self.sds))
            return lo, hi
        lo = float(np.exp(np.min(self.means - k_sigma * self.sds)))
        hi = float(np.exp(np.max(self.means + k_sigma * self.sds)))
        return max(lo, 1e-9), hi


def build_laws(spec: ToyCorpusSpec) -> list[ClassLaw]:
    """Deterministic per-class laws, standardized at the pooled level."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _LAW_STREAM]))
    n = spec.n_token_classes
    n_bimodal = int(round(spec.bimodal_fraction * n))
    laws = []
    for c in range(n):
        if c < n_bimodal:
            center = rng.uniform(-0.6, 0.6)
            sep = rng.uniform(1.8, 2.6)
            w1 = rng.uniform(0.55, 0.7)
            means = (center - sep / 2, center + sep / 2)
            sds = (rng.uniform(0.25, 0.4), rng.uniform(0.25, 0.4))
            weights = (w1, 1.0 - w1)
            bimodal = True
        else:
            m = rng.uniform(-1.2, 1.2)
            s = rng.uniform(0.35, 0.6)
            means, sds, weights = (m, m), (s, s), (0.5, 0.5)
            bimodal = False
        laws.append(ClassLaw(
            pitch_weights=weights, pitch_means=means, pitch_sds=sds,
            energy_mean=rng.uniform(-1.0, 1.0), energy_sd=rng.uniform(0.4, 0.7),
            rho=rng.uniform(-0.5, 0.8),
            dur_log_mean=rng.uniform(np.log(5.0), np.log(10.0)),
            dur_log_sd=rng.uniform(0.3, 0.45),
            bimodal=bimodal,
        ))

    # standardize pooled pitch/energy over a uniform class mix
    p_means = np.array([law.pitch_moments()[0] for law in laws])
    p_m2 = np.array([
        np.dot(law.pitch_weights,
               np.array(law.pitch_sds) ** 2 + np.array(law.pitch_means) ** 2)
        for law in laws
    ])
    mu_p = p_means.mean()
    sd_p = np.sqrt(p_m2.mean() - mu_p**2)
    e_means = np.array([law.energy_mean for law in laws])
    mu_e = e_means.mean()
    sd_e = np.sqrt(np.mean([law.energy_sd**2 + law.energy_mean**2 for law in laws])
                   - mu_e**2)
    for law in laws:
        law.pitch_means = tuple((np.array(law.pitch_means) - mu_p) / sd_p)
        law.pitch_sds = tuple(np.array(law.pitch_sds) / sd_p)
        law.energy_mean = (law.energy_mean - mu_e) / sd_e
        law.energy_sd = law.energy_sd / sd_e
    return laws


def sample_token(law: ClassLaw, coupling: float, rng: np.random.Generator):
    """One (pitch, energy, duration) draw from a class law."""
    comp = 0 if rng.random() < law.pitch_weights[0] else 1
    z1 = rng.standard_normal()
    pitch = law.pitch_means[comp] + law.pitch_sds[comp] * z1
    z2 = rng.standard_normal()
    energy = law.energy_mean + law.energy_sd * (
        law.rho * z1 + np.sqrt(1.0 - law.rho**2) * z2
    )
    mu_c, sd_c = law.pitch_moments()
    residual = (pitch - mu_c) / sd_c
    log_d = law.dur_log_mean + coupling * residual + law.dur_log_sd * rng.standard_normal()
    duration = max(1, int(np.floor(np.exp(log_d) + 0.5)))
    return pitch, energy, duration


def analytic_pdf(spec: ToyCorpusSpec, token_class: int, variable: str) -> MixtureDensity:
    """Closed-form conditional density of one variable for one class.

    Duration returns the continuous log-normal mixture underlying the
    discretized frame counts (the pitch coupling widens and shifts the
    components per pitch mode).
    """
    laws = build_laws(spec)
    if not 0 <= token_class < len(laws):
        raise CorpusError(f"unknown token class {token_class}")
    law = laws[token_class]
    if variable == "pitch":
        return MixtureDensity("normal", np.array(law.pitch_weights),
                              np.array(law.pitch_means), np.array(law.pitch_sds))
    if variable == "energy":
        return MixtureDensity("normal", np.array([1.0]),
                              np.array([law.energy_mean]), np.array([law.energy_sd]))
    if variable == "duration":
        mu_c, sd_c = law.pitch_moments()
        g = spec.pitch_duration_coupling
        locs, scales = [], []
        for m, s in zip(law.pitch_means, law.pitch_sds):
            locs.append(law.dur_log_mean + g * (m - mu_c) / sd_c)
            scales.append(np.sqrt((g * s / sd_c) ** 2 + law.dur_log_sd**2))
        return MixtureDensity("lognormal", np.array(law.pitch_weights),
                              np.array(locs), np.array(scales))
    raise CorpusError(f"unknown variable {variable!r}")


def unimodal_classes(spec: ToyCorpusSpec) -> list[int]:
    return [c for c, law in enumerate(build_laws(spec)) if not law.bimodal]


# ---------------------------------------------------------------------------
# Conditioning features
# ---------------------------------------------------------------------------

def token_features(spec: ToyCorpusSpec, token_classes: np.ndarray) -> np.ndarray:
    """Deterministic embedding of class ids plus positional features."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _EMBED_STREAM]))
    table = rng.normal(0.0, 1.0, size=(spec.n_token_classes, spec.condition_dim))
    feats = table[np.asarray(token_classes)]
    t = np.arange(len(token_classes))[:, None]
    j = np.arange(spec.condition_dim)[None, :]
    pos = 0.1 * np.sin(t / (1.0 + j))
    return feats + pos


# ---------------------------------------------------------------------------
# Records and corpus
# ---------------------------------------------------------------------------

@dataclass
class UtteranceRecord:
    utterance_id: str
    token_classes: np.ndarray
    features: np.ndarray
    realizations: list[ContourSet]

    def to_json(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "token_classes": self.token_classes.tolist(),
            "features": self.features.tolist(),
            "realizations": [r.to_json() for r in self.realizations],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "UtteranceRecord":
        return cls(
            utterance_id=obj["utterance_id"],
            token_classes=np.array(obj["token_classes"], dtype=np.int64),
            features=np.array(obj["features"], dtype=np.float64),
            realizations=[ContourSet.from_json(r) for r in obj["realizations"]],
        )


@dataclass
class Corpus:
    spec: ToyCorpusSpec
    records: list[UtteranceRecord]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for rec in self.records:
            h.update(json.dumps(rec.to_json(), sort_keys=True).encode())
        return h.hexdigest()


def _normalize(values: np.ndarray) -> np.ndarray:
    """Utterance-level zero-mean unit-variance; skipped for degenerate rows."""
    if values.shape[0] < 2:
        return values
    std = values.std()
    if std < 1e-12:
        return values
    return (values - values.mean()) / std


def generate_corpus(spec: ToyCorpusSpec) -> Corpus:
    """Reproducible corpus: same spec (incl. seed) gives identical bytes."""
    spec.validate()
    laws = build_laws(spec)
    records = []
    for u in range(spec.n_utterances):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _UTT_STREAM, u]))
        tokens = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
        classes = rng.integers(0, spec.n_token_classes, size=tokens)
        feats = token_features(spec, classes)
        realizations = []
        for _ in range(spec.n_realizations_per_utterance):
            pitch = np.empty(tokens)
            energy = np.empty(tokens)
            duration = np.empty(tokens, dtype=np.int64)
            for t, c in enumerate(classes):
                pitch[t], energy[t], duration[t] = sample_token(
                    laws[c], spec.pitch_duration_coupling, rng
                )
            realizations.append(ContourSet(
                pitch=_normalize(pitch), energy=_normalize(energy), duration=duration
            ))
        records.append(UtteranceRecord(
            utterance_id=f"utt-{u:05d}", token_classes=classes, features=feats,
            realizations=realizations,
        ))
    return Corpus(spec=spec, records=records)


# ---------------------------------------------------------------------------
# I/O: line-delimited JSON with an integrity header
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, path) -> None:
    header = {
        "format": FORMAT_VERSION,
        "spec": asdict(corpus.spec),
        "spec_hash": corpus.spec.spec_hash(),
        "n_records": len(corpus.records),
        "corpus_hash": corpus.content_hash(),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in corpus.records:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CorpusError(f"{path}: empty corpus file")
    header = json.loads(lines[0])
    version = header.get("format")
    if version != FORMAT_VERSION:
        raise CorpusError(
            f"{path}: format version {version!r} != expected {FORMAT_VERSION!r}"
        )
    spec = ToyCorpusSpec(**header["spec"])
    if spec.spec_hash() != header.get("spec_hash"):
        raise CorpusError(
            f"{path}: spec hash {header.get('spec_hash')} does not match "
            f"recomputed {spec.spec_hash()}"
        )
    n = header.get("n_records", -1)
    body = lines[1:]
    if len(body) != n:
        raise CorpusError(
            f"{path}: truncated corpus, header promises {n} records, found {len(body)}"
        )
    records = [UtteranceRecord.from_json(json.loads(line)) for line in body]
    corpus = Corpus(spec=spec, records=records)
    actual = corpus.content_hash()
    if actual != header.get("corpus_hash"):
        raise CorpusError(
            f"{path}: corpus hash {header.get('corpus_hash')} does not match "
            f"recomputed {actual}"
        )
    return corpus
