"""End-to-end training and evaluation shared by the CLI and experiments."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import MissingSpec, Sequence, fill_out, inject_missing
from .emission import EmissionModel
from .hmm import DirichletPosterior, DirichletPriors, vbem_fit
from .kernel_init import init_all
from .metrics import cluster_count, munkres_accuracy, timed
from .optim import AdamSettings
from .spectral import SmKernelParams
from .svi import SviConfig, predict_states, svi_fit

log = logging.getLogger(__name__)

METHODS = ("gpsm-vbem", "gpsm-svi", "gpsm-rss-svi")
SCHEMA_VERSION = 1


def module_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named stream, derived from one root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def prepare_segments(seq: Sequence, impute: str = "nfo") -> list[tuple[np.ndarray, np.ndarray]]:
    """Observed ``(x, y)`` per segment; ``"fo"`` fills gaps, ``"nfo"`` drops them."""
    if impute == "fo":
        return fill_out(seq).observed_segments()
    if impute == "nfo":
        return seq.observed_segments()
    raise ValueError(f"impute must be 'fo' or 'nfo', got {impute!r}")


@dataclass
class TrainSettings:
    n_states: int = 8
    n_components: int = 3
    batch_len: int = 10
    batch_count: int = 3
    spectral_points: int = 10
    mc_reps: int = 4
    iterations: int = 80
    adam_step: float = 0.01
    alpha_pi: float = 1.0
    alpha_A: float = 1.0
    rate_offset: float = 10.0
    rate_exponent: float = 0.7
    vbem_tol: float = 1e-5
    impute: str = "nfo"
    init_samples: int = 2000
    accuracy_every: int = 0

    def svi_config(self, method: str, seed: int) -> SviConfig:
        return SviConfig(
            batch_len=self.batch_len, batch_count=self.batch_count, mc_reps=self.mc_reps,
            spectral_points=self.spectral_points, rate_offset=self.rate_offset,
            rate_exponent=self.rate_exponent, adam=AdamSettings(step=self.adam_step),
            iterations=self.iterations, seed=seed,
            emission="sparse" if method == "gpsm-rss-svi" else "exact",
            accuracy_every=self.accuracy_every,
        )


@dataclass
class TrainedModel:
    method: str
    seed: int
    posterior: DirichletPosterior
    priors: DirichletPriors
    model: EmissionModel
    spectral_priors: tuple[SmKernelParams, ...]
    settings: TrainSettings
    trace: list[dict] = field(default_factory=list)
    train_seconds: float = 0.0

    def to_json(self) -> dict:
        def kern(k: SmKernelParams):
            return {"log_weights": k.log_weights.tolist(), "means": k.means.tolist(),
                    "log_stds": k.log_stds.tolist()}
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "seed": self.seed,
            "posterior": {"pi": self.posterior.pi.tolist(), "A": self.posterior.A.tolist()},
            "priors": {"pi": self.priors.pi.tolist(), "A": self.priors.A.tolist()},
            "kernels": [kern(k) for k in self.model.kernels],
            "spectral_priors": [kern(k) for k in self.spectral_priors],
            "log_noise_std": self.model.log_noise_std,
            "settings": asdict(self.settings),
            "train_seconds": self.train_seconds,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainedModel":
        def kern(d):
            return SmKernelParams(np.array(d["log_weights"]), np.array(d["means"]), np.array(d["log_stds"]))
        return cls(
            method=doc["method"], seed=int(doc["seed"]),
            posterior=DirichletPosterior(np.array(doc["posterior"]["pi"]), np.array(doc["posterior"]["A"])),
            priors=DirichletPriors(np.array(doc["priors"]["pi"]), np.array(doc["priors"]["A"])),
            model=EmissionModel(tuple(kern(d) for d in doc["kernels"]), float(doc["log_noise_std"])),
            spectral_priors=tuple(kern(d) for d in doc["spectral_priors"]),
            settings=TrainSettings(**doc["settings"]),
            train_seconds=float(doc.get("train_seconds", 0.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _train(seq: Sequence, method: str, settings: TrainSettings, seed: int, callback=None) -> TrainedModel:
    init = init_all(seq, settings.n_states, settings.n_components, module_rng(seed, "kernel-init"),
                    samples_per_state=settings.init_samples)
    model = EmissionModel(init.kernels, float(np.log(init.noise_std)))
    priors = DirichletPriors.symmetric(settings.n_states, settings.alpha_pi, settings.alpha_A)
    segments = prepare_segments(seq, settings.impute)
    accuracy_fn = None
    if seq.labels is not None and settings.accuracy_every > 0:
        accuracy_fn = lambda pred: munkres_accuracy(pred, seq.labels, settings.n_states)  # noqa: E731

    trace: list[dict] = []

    def trace_append(row: dict) -> None:
        trace.append(row)
        if callback is not None:
            callback(row)

    if method == "gpsm-vbem":
        res = vbem_fit(segments, model, priors, max_iters=settings.iterations, tol=settings.vbem_tol,
                       adam=AdamSettings(step=settings.adam_step), callback=trace_append)
        return TrainedModel(method, seed, res.posterior, priors, res.model, init.priors, settings, trace)
    if method in ("gpsm-svi", "gpsm-rss-svi"):
        config = settings.svi_config(method, seed)
        res = svi_fit(segments, model, priors, config, spectral_priors=init.priors,
                      rng=module_rng(seed, "svi"), accuracy_fn=accuracy_fn, callback=trace_append)
        return TrainedModel(method, seed, res.posterior, priors, res.model, init.priors, settings, trace)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def train(seq: Sequence, method: str, settings: TrainSettings | None = None, seed: int = 0,
          callback=None) -> TrainedModel:
    """Initialize kernels from the data and run the selected trainer.

    ``callback`` receives each diagnostics row while training runs.
    """
    settings = settings or TrainSettings()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    trained, seconds = timed(_train, seq, method, settings, seed, callback)
    trained.train_seconds = seconds
    return trained


def corrupt(seq: Sequence, missing: str | None, seed: int, stream: str) -> Sequence:
    if not missing or missing == "none":
        return seq
    spec = MissingSpec.parse(missing, seed)
    return inject_missing(seq, spec, module_rng(seed, stream))


def evaluate(trained: TrainedModel, test: Sequence, missing: str | None = None,
             impute: str = "nfo", seed: int = 0, emission: str = "exact") -> dict:
    """Label the test chain with frozen globals and score it."""
    test = corrupt(test, missing, seed, "missing-test")
    segments = prepare_segments(test, impute)
    kwargs = {}
    if emission == "sparse":
        counts = [np.full(k.n_components, trained.settings.spectral_points) for k in trained.model.kernels]
        rng = module_rng(seed, "evaluate")
        kwargs = dict(noise=[rng.standard_normal((trained.settings.mc_reps, int(c.sum()))) for c in counts],
                      counts=counts, priors=trained.spectral_priors)
    pred, seconds = timed(predict_states, segments, trained.model, trained.posterior, emission, **kwargs)
    out = {
        "schema_version": SCHEMA_VERSION,
        "method": trained.method,
        "missing": missing or "none",
        "impute": impute,
        "n_segments": len(test),
        "n_clusters": cluster_count(pred),
        "train_seconds": trained.train_seconds,
        "evaluate_seconds": seconds,
        "predicted": (pred + 1).tolist(),
    }
    out["accuracy"] = (munkres_accuracy(pred, test.labels, trained.model.n_states)
                       if test.labels is not None else None)
    return out


def with_impute(settings: TrainSettings, impute: str) -> TrainSettings:
    return replace(settings, impute=impute)
