"""Desk-scale end-to-end experiment on synthetic phantoms.

Trains a periosteal model and two endosteal models (masked input and raw
input) on a small jittered cohort, then cascade-segments held-out phantoms
with both endosteal variants. Models are trained on all training phantoms
without a validation split, and the last-epoch weights are used.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .inference import Segmenter, cascade_segment
from .metrics import MetricsReport, evaluate_pair, mean_structures
from .phantom import DEFAULT_JITTER, PhantomSpec, generate_cohort
from .training import Subject, TrainConfig, train_model
from .volgrid import Spacing3, mask_subset


@dataclass(frozen=True)
class PhantomExperimentConfig:
    n_train: int = 8
    n_test: int = 2
    dims: tuple = (96, 96, 48)
    spacing: tuple = (1.0, 1.0, 1.5)
    cohort_seed: int = 1
    seed: int = 0
    preset: str = "tiny"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-2, epochs=50, patch_size=(64, 64, 32)))
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class VariantOutcome:
    reports: list  # MetricsReport per test phantom
    contained: list  # endosteal subset of periosteal, per test phantom
    seconds: list

    @property
    def mean(self) -> dict:
        return mean_structures(self.reports)


@dataclass
class PhantomExperimentResult:
    masked: VariantOutcome
    unmasked: VariantOutcome
    train_seconds: dict
    final_loss: dict


def _subjects(samples, offset=0):
    return [Subject(f"phantom_{offset + i:03d}", s.intensity, s.periosteal, s.endosteal) for i, s in enumerate(samples)]


def run_phantom_experiment(cfg: PhantomExperimentConfig = PhantomExperimentConfig(), progress=None) -> PhantomExperimentResult:
    samples = generate_cohort(cfg.n_train + cfg.n_test, PhantomSpec(), DEFAULT_JITTER,
                              cfg.cohort_seed, cfg.dims, Spacing3(*cfg.spacing))
    train = _subjects(samples[:cfg.n_train])
    test = samples[cfg.n_train:]

    runs = {"periosteal": ("periosteal", True), "endosteal": ("endosteal", True),
            "endosteal_unmasked": ("endosteal", False)}
    models, seconds, final = {}, {}, {}
    for name, (stage, mask_input) in runs.items():
        t0 = time.perf_counter()
        report = (lambda r, n=name: progress(n, r)) if progress else None
        res = train_model(train, [], stage, cfg.train, cfg.augment, cfg.preset, cfg.seed,
                          mask_input=mask_input, progress=report)
        models[name] = Segmenter(res.model, cfg.train.intensity_offset, cfg.train.intensity_scale)
        seconds[name] = time.perf_counter() - t0
        final[name] = res.log[-1].loss if res.log else None

    outcomes = {}
    for variant, endo, mask_input in (("masked", "endosteal", True), ("unmasked", "endosteal_unmasked", False)):
        out = VariantOutcome([], [], [])
        for s in test:
            r = cascade_segment(models["periosteal"], models[endo], s.intensity, cfg.train.patch_size[2],
                                cfg.train.mask_margin, mask_input)
            rep: MetricsReport = evaluate_pair({"periosteal": r.periosteal, "endosteal": r.endosteal},
                                               {"periosteal": s.periosteal, "endosteal": s.endosteal})
            out.reports.append(rep)
            out.contained.append(mask_subset(r.endosteal, r.periosteal))
            out.seconds.append(sum(r.seconds.values()))
        outcomes[variant] = out
    return PhantomExperimentResult(outcomes["masked"], outcomes["unmasked"], seconds, final)
