"""Experiment harness: configuration, subject split, folds, training runs,
model selection, cascade evaluation and reporting.

Run directory layout written by :func:`run_pipeline`::

    <output_dir>/
        config.ini                  effective configuration
        split.txt                   train/test subject ids
        folds.txt                   "<subject> <fold>" per training subject
        <stage>/fold_<k>/model.ckpt best-validation checkpoint of fold k
        <stage>/fold_<k>/log.csv    epoch, loss, val_dsc, seconds
        <stage>/selected.txt        chosen fold and its validation DSC
        predictions/<subject>/      probability maps, masks, run.txt, metrics.txt
        report.txt                  MetricsReport over the test subjects
        regions.csv                 region volume error table

Subjects live in ``<dataset_dir>/<subject>/`` in the phantom sample format.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .errors import DataMissing, NoFolds, TooFewSubjects
from .inference import Segmenter, cascade_segment
from .metrics import MetricsReport, VolumeErrorRow, evaluate_pair, mean_structures
from .nn.checkpoint import checkpoint_load, checkpoint_save
from .nn.vnet import PRESETS
from .phantom import DEFAULT_JITTER, Jitter, PhantomSample, PhantomSpec, generate_cohort, read_sample, write_sample
from .regions import RegionVolumes, partition, region_volumes, volume_error_table, write_table_csv
from .training import STAGES, Subject, TrainConfig, train_model
from .volgrid import Spacing3, write_mask, write_volume


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_dir: str = "data"
    output_dir: str = "runs"
    split_fraction: float = 0.85
    folds: int = 10
    preset: str = "tiny"
    stage: str = "periosteal"
    seed: int = 0
    # phantom cohort used when the dataset directory is empty
    n_subjects: int = 100
    dims: tuple = (96, 96, 48)
    spacing: tuple = (1.0, 1.0, 1.5)
    # stage-2 input masking; False trains and evaluates the ablation variant
    mask_input: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; have {sorted(PRESETS)}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be >= 2")


SECTIONS = {"experiment": None, "train": "train", "augment": "augment"}


def _convert(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        parts = text.replace(",", " ").split()
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _section_values(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from ``{"section.key": "text"}`` entries."""
    base = base or ExperimentConfig()
    blocks = {"experiment": {}, "train": {}, "augment": {}}
    for dotted, text in values.items():
        section, _, key = dotted.partition(".")
        if section not in blocks:
            raise ValueError(f"unknown config section {section!r}")
        target = base if section == "experiment" else getattr(base, section)
        defaults = _section_values(target)
        if key not in defaults:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        blocks[section][key] = _convert(defaults[key], text)
    train = dataclasses.replace(base.train, **blocks["train"])
    augment = dataclasses.replace(base.augment, **blocks["augment"])
    return dataclasses.replace(base, train=train, augment=augment, **blocks["experiment"])


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read an INI file (optional) then apply ``section.key=value`` overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise DataMissing(f"config file not found: {path}")
        for section in parser.sections():
            for key, text in parser.items(section):
                values[f"{section}.{key}"] = text
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or "." not in key:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        values[key.strip()] = text
    return config_from_mapping(values)


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["experiment"] = {k: _fmt_value(v) for k, v in _section_values(cfg).items()}
    parser["train"] = {k: _fmt_value(v) for k, v in _section_values(cfg.train).items()}
    parser["augment"] = {k: _fmt_value(v) for k, v in _section_values(cfg.augment).items()}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


# -- split and folds --------------------------------------------------------

def split_subjects(ids, fraction: float, seed: int):
    """Seeded shuffle, then round(fraction * n) train ids and the rest test."""
    ids = list(ids)
    if len(ids) < 2:
        raise TooFewSubjects("need at least two subjects to split")
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    order = np.random.default_rng([seed, 1]).permutation(len(ids))
    n_train = min(max(math.floor(fraction * len(ids) + 0.5), 1), len(ids) - 1)
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


@dataclass(frozen=True)
class FoldAssignment:
    ids: tuple
    fold_of: tuple  # fold index per id, same order as ids
    k: int

    def members(self, fold: int) -> list:
        return [i for i, f in zip(self.ids, self.fold_of) if f == fold]

    def training(self, fold: int) -> list:
        return [i for i, f in zip(self.ids, self.fold_of) if f != fold]

    def sizes(self) -> list:
        return [len(self.members(f)) for f in range(self.k)]


def assign_folds(train_ids, k: int, seed: int) -> FoldAssignment:
    """Balanced folds: shuffled position ``p`` goes to fold ``p mod k``."""
    ids = list(train_ids)
    if k < 1 or k > len(ids):
        raise TooFewSubjects(f"cannot make {k} folds from {len(ids)} subjects")
    order = np.random.default_rng([seed, 2]).permutation(len(ids))
    fold_of = [0] * len(ids)
    for pos, i in enumerate(order):
        fold_of[i] = pos % k
    return FoldAssignment(tuple(ids), tuple(fold_of), k)


# -- model selection --------------------------------------------------------

@dataclass
class FoldResult:
    fold: int | None
    val_dsc: float | None
    checkpoint: Path
    log: list = field(default_factory=list)


def select_model(results) -> FoldResult:
    """Highest validation DSC; ties go to the lowest fold index."""
    results = sorted(results, key=lambda r: -1 if r.fold is None else r.fold)
    if not results:
        raise NoFolds("no completed folds to select from")
    best = results[0]
    for r in results[1:]:
        score = -math.inf if r.val_dsc is None else r.val_dsc
        best_score = -math.inf if best.val_dsc is None else best.val_dsc
        if score > best_score:
            best = r
    return best


# -- data -------------------------------------------------------------------

def subject_ids(n: int) -> list[str]:
    return [f"subject_{i:03d}" for i in range(n)]


def ensure_cohort(cfg: ExperimentConfig, jitter: Jitter = DEFAULT_JITTER) -> list[str]:
    """Generate the phantom cohort into ``dataset_dir`` unless it is present."""
    root = Path(cfg.dataset_dir)
    ids = subject_ids(cfg.n_subjects)
    if all((root / i / "spec.txt").exists() for i in ids):
        return ids
    base = PhantomSpec(seed=cfg.seed)
    samples = generate_cohort(cfg.n_subjects, base, jitter, cfg.seed, cfg.dims, Spacing3(*cfg.spacing))
    for sid, s in zip(ids, samples):
        write_sample(s, root / sid)
    return ids


def list_subjects(dataset_dir) -> list[str]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataMissing(f"dataset directory not found: {root}")
    ids = sorted(p.name for p in root.iterdir() if (p / "spec.txt").exists())
    if not ids:
        raise DataMissing(f"no subjects in {root}")
    return ids


def load_sample(dataset_dir, sid) -> PhantomSample:
    path = Path(dataset_dir) / sid
    if not path.is_dir():
        raise DataMissing(f"subject directory not found: {path}")
    return read_sample(path)


def as_subject(sid: str, s: PhantomSample) -> Subject:
    return Subject(sid, s.intensity, s.periosteal, s.endosteal)


def write_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_dsc", "seconds"])
        for r in rows:
            w.writerow([r.epoch, repr(r.loss), "" if r.val_dsc is None else repr(r.val_dsc), f"{r.seconds:.3f}"])


def read_split(path) -> tuple[list, list]:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, rest = line.partition(":")
        out[key.strip()] = rest.split()
    return out.get("train", []), out.get("test", [])


def write_split(train, test, path):
    Path(path).write_text(f"train: {' '.join(train)}\ntest: {' '.join(test)}\n")


def write_folds(fa: FoldAssignment, path):
    Path(path).write_text("".join(f"{i} {f}\n" for i, f in zip(fa.ids, fa.fold_of)))


def read_folds(path) -> FoldAssignment:
    ids, folds = [], []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            sid, f = line.split()
            ids.append(sid)
            folds.append(int(f))
    return FoldAssignment(tuple(ids), tuple(folds), max(folds) + 1)


def train_stage(cfg: ExperimentConfig, fold: int | None, train_ids, folds: FoldAssignment | None = None,
                out_dir=None, resume=None, progress=None) -> FoldResult:
    """Train ``cfg.stage`` on one fold (``None``: all ``train_ids``, no validation).

    Writes ``model.ckpt`` (best validation DSC, or last epoch) and ``log.csv``.
    """
    if fold is None:
        fit_ids, val_ids = list(train_ids), []
    else:
        if folds is None:
            raise ValueError("fold given without a fold assignment")
        fit_ids, val_ids = folds.training(fold), folds.members(fold)
    load = lambda sid: as_subject(sid, load_sample(cfg.dataset_dir, sid))
    fit = [load(s) for s in fit_ids]
    val = [load(s) for s in val_ids]
    model = checkpoint_load(resume) if resume else None
    res = train_model(fit, val, cfg.stage, cfg.train, cfg.augment, cfg.preset, cfg.seed, fold,
                      cfg.mask_input, model=model, progress=progress)
    out = Path(out_dir or Path(cfg.output_dir) / cfg.stage / ("all" if fold is None else f"fold_{fold}"))
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_save(res.model, out / "model.ckpt")
    write_log(res.log, out / "log.csv")
    return FoldResult(fold, res.best_dsc, out / "model.ckpt", res.log)


# -- evaluation -------------------------------------------------------------

def subject_volumes(sample: PhantomSample, peri, endo) -> RegionVolumes:
    part = partition(peri, label_field=sample.region_field)
    return region_volumes(part, peri, endo)


def evaluate_subject(sample: PhantomSample, result) -> tuple[MetricsReport, RegionVolumes, RegionVolumes]:
    pred = {"periosteal": result.periosteal, "endosteal": result.endosteal}
    truth = {"periosteal": sample.periosteal, "endosteal": sample.endosteal}
    report = evaluate_pair(pred, truth)
    v_true = subject_volumes(sample, sample.periosteal, sample.endosteal)
    v_pred = subject_volumes(sample, result.periosteal, result.endosteal)
    report.regions = volume_error_table([v_true], [v_pred])
    report.meta.update({
        "threshold.periosteal": repr(result.thresholds[0]),
        "threshold.endosteal": repr(result.thresholds[1]),
        "seconds.periosteal": f"{result.seconds['periosteal']:.3f}",
        "seconds.endosteal": f"{result.seconds['endosteal']:.3f}",
        "partition": "analytic phantom labels (stand-in)",
    })
    return report, v_true, v_pred


def volumes_from_report(report: MetricsReport) -> tuple[RegionVolumes, RegionVolumes]:
    """Recover (truth, pred) volumes from a single-subject report."""
    r = report.regions
    names = [f.name for f in dataclasses.fields(RegionVolumes) if f.name != "per_label"]
    truth = RegionVolumes(**{n: r[n].truth_mean for n in names})
    pred = RegionVolumes(**{n: r[n].pred_mean for n in names})
    return truth, pred


def summarize(reports: list, truths: list, preds: list, meta=None) -> MetricsReport:
    summary = MetricsReport(mean_structures(reports), volume_error_table(truths, preds), dict(meta or {}))
    summary.meta.setdefault("subjects", str(len(reports)))
    summary.meta.setdefault("partition", "analytic phantom labels (stand-in)")
    return summary


def save_prediction(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(result.periosteal_prob, out / "periosteal_prob.hdr")
    write_volume(result.endosteal_prob, out / "endosteal_prob.hdr")
    write_mask(result.periosteal, out / "periosteal.hdr")
    write_mask(result.endosteal, out / "endosteal.hdr")
    (out / "run.txt").write_text(
        f"threshold.periosteal = {result.thresholds[0]!r}\n"
        f"threshold.endosteal = {result.thresholds[1]!r}\n"
        f"fallback.periosteal = {result.fallbacks[0]}\n"
        f"fallback.endosteal = {result.fallbacks[1]}\n"
        f"seconds.periosteal = {result.seconds['periosteal']:.3f}\n"
        f"seconds.endosteal = {result.seconds['endosteal']:.3f}\n"
    )


@dataclass
class PipelineResult:
    train_ids: list
    test_ids: list
    folds: FoldAssignment
    selected: dict  # stage -> FoldResult
    report: MetricsReport
    subject_reports: dict


def run_pipeline(cfg: ExperimentConfig, progress=None) -> PipelineResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_to_ini(cfg))
    ids = ensure_cohort(cfg)
    train_ids, test_ids = split_subjects(ids, cfg.split_fraction, cfg.seed)
    folds = assign_folds(train_ids, cfg.folds, cfg.seed)
    write_split(train_ids, test_ids, out / "split.txt")
    write_folds(folds, out / "folds.txt")

    selected = {}
    for stage in STAGES:
        scfg = dataclasses.replace(cfg, stage=stage)
        results = []
        for k in range(cfg.folds):
            results.append(train_stage(scfg, k, train_ids, folds, out / stage / f"fold_{k}", progress=progress))
        best = select_model(results)
        (out / stage / "selected.txt").write_text(f"fold = {best.fold}\nval_dsc = {best.val_dsc!r}\n")
        selected[stage] = best

    peri = Segmenter(checkpoint_load(selected["periosteal"].checkpoint), cfg.train.intensity_offset, cfg.train.intensity_scale)
    endo = Segmenter(checkpoint_load(selected["endosteal"].checkpoint), cfg.train.intensity_offset, cfg.train.intensity_scale)
    reports, truths, preds = {}, [], []
    for sid in test_ids:
        sample = load_sample(cfg.dataset_dir, sid)
        res = cascade_segment(peri, endo, sample.intensity, cfg.train.patch_size[2],
                              cfg.train.mask_margin, cfg.mask_input)
        save_prediction(res, out / "predictions" / sid)
        rep, vt, vp = evaluate_subject(sample, res)
        (out / "predictions" / sid / "metrics.txt").write_text(rep.to_text())
        reports[sid] = rep
        truths.append(vt)
        preds.append(vp)
    summary = summarize(list(reports.values()), truths, preds, {"seed": str(cfg.seed)})
    (out / "report.txt").write_text(summary.to_text())
    write_table_csv(summary.regions, out / "regions.csv", summary.meta["partition"])
    return PipelineResult(train_ids, test_ids, folds, selected, summary, reports)
