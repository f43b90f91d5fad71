"""Experiment orchestration: crafting, evaluation, sweeps, CSV output.

Attack success is counted only over images the victim classifies
correctly when clean; already-misclassified images leave the denominator.

Per-image attack jobs are split into fixed-size chunks (the chunk size is
a constant so the worker count never changes numeric results); rows are
assembled in index order and every float is written with ``repr`` so
identical runs produce byte-identical CSV files.  Wall-clock time is kept
on the in-memory report only, never in the CSV.
"""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, run_attack
from .datasets import load_dataset
from .ensembles import EnsembleSpec, EnsembleTarget, longitude_attack
from .errors import ConfigurationError, UndefinedRateError
from .models import Model, classify, load_model
from .transforms import TransformSpec, TransformedTarget

ATTACK_CHUNK = 128
WORKERS_ENV = "TALAB_WORKERS"

CSV_COLUMNS = [
    "run_id",
    "method",
    "tricks",
    "axis",
    "axis_value",
    "surrogate",
    "victim",
    "clean_acc",
    "whitebox_asr",
    "transfer_asr",
    "n_eval",
    "seed",
]

SWEEP_AXES = ("iters", "step_scale", "decay", "copies", "rho")


def success_rate(victim: Model, images, labels, deltas) -> float:
    """Misclassification rate over the victim's clean-correct images."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if not (len(images) == len(labels) == len(deltas)):
        raise ConfigurationError("images, labels and deltas must align")
    _, clean_pred = classify(victim, images)
    eligible = clean_pred == labels
    if not eligible.any():
        raise UndefinedRateError(
            "victim classifies no evaluation image correctly"
        )
    _, adv_pred = classify(victim, images + deltas)
    return float(np.mean(adv_pred[eligible] != labels[eligible]))


@dataclass
class ExperimentConfig:
    surrogates: list[str]
    victims: list[str]
    dataset: str
    attack: AttackConfig = field(default_factory=AttackConfig)
    transform: TransformSpec = field(default_factory=TransformSpec)
    fusion: str = "logit"
    tau: float = 0.1
    ga: bool = False
    ait: bool = False
    ms: bool = False
    conflict_rule: str = "cosine"
    samples: int = 500
    seed: int = 0
    run_id: str = "run"
    output: str | None = None

    def __post_init__(self):
        if not self.surrogates:
            raise ConfigurationError("need at least one surrogate model")
        if not self.victims:
            raise ConfigurationError("need at least one victim model")
        if self.samples < 1:
            raise ConfigurationError("samples must be >= 1")


@dataclass
class AttackReport:
    run_id: str
    method: str
    tricks: str
    surrogate: str
    victim_rates: dict[str, float]
    whitebox_rate: float
    clean_accuracy: dict[str, float]
    eligible_counts: dict[str, int]
    per_image: dict[str, np.ndarray]
    seed: int
    wall_seconds: float

    @property
    def mean_transfer(self) -> float:
        return float(np.mean(list(self.victim_rates.values())))


def tricks_label(config: ExperimentConfig) -> str:
    parts = []
    a = config.attack
    if a.schedule.kind != "identity":
        parts.append(f"sched={a.schedule.kind}")
    if a.rgi:
        parts.append(f"rgi={a.rgi_restarts}")
    if a.dual:
        parts.append(f"dual={a.dual_count}")
    if config.transform.kind != "none":
        parts.append(f"tf={config.transform.kind}")
    if len(config.surrogates) > 1:
        parts.append(f"fusion={config.fusion}")
        for flag, name in ((config.ga, "ga"), (config.ait, "ait"), (config.ms, "ms")):
            if flag:
                parts.append(name)
    return ";".join(parts) if parts else "-"


def _chunk_seed(seed: int, start: int) -> int:
    return int(
        np.random.SeedSequence([int(seed), int(start)]).generate_state(
            1, np.uint64
        )[0]
    )


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        count = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from exc
    return max(1, count)


def craft_deltas(
    config: ExperimentConfig,
    surrogate_models: list[Model],
    images: np.ndarray,
    labels: np.ndarray,
) -> np.ndarray:
    """Run the configured attack over fixed-size chunks of the images."""
    if config.transform.kind != "none" and len(surrogate_models) > 1:
        raise ConfigurationError(
            "copy-averaged transforms apply to single-surrogate attacks; "
            "ensembles use the asynchronous-transform pool instead"
        )

    def attack_chunk(start: int) -> tuple[int, np.ndarray]:
        xs = images[start : start + ATTACK_CHUNK]
        ys = labels[start : start + ATTACK_CHUNK]
        seed = _chunk_seed(config.seed, start)
        if len(surrogate_models) > 1:
            spec = EnsembleSpec(
                models=surrogate_models,
                fusion=config.fusion,
                tau=config.tau,
                ga_enabled=config.ga,
                ait_enabled=config.ait,
                ms_enabled=config.ms,
                conflict_rule=config.conflict_rule,
            )
            if config.fusion == "longitude":
                return start, longitude_attack(
                    spec, xs, ys, config.attack, seed=seed
                )
            target = EnsembleTarget(spec, seed=seed, eps=config.attack.eps)
        elif config.transform.kind != "none":
            target = TransformedTarget(
                surrogate_models[0],
                config.transform,
                seed=seed,
                eps=config.attack.eps,
                pool=images,
                mix_labels=labels,
            )
        else:
            target = surrogate_models[0]
        return start, run_attack(config.attack, target, xs, ys, seed=seed)

    starts = list(range(0, len(images), ATTACK_CHUNK))
    workers = _worker_count()
    deltas = np.zeros_like(images)
    if workers == 1:
        results = [attack_chunk(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(attack_chunk, starts))
    for start, chunk in results:
        deltas[start : start + chunk.shape[0]] = chunk
    return deltas


def run_experiment(config: ExperimentConfig):
    """Craft on the surrogate(s), evaluate every victim, emit CSV rows."""
    began = time.perf_counter()
    data = load_dataset(config.dataset)
    if config.samples > data.count:
        raise ConfigurationError(
            f"requested {config.samples} samples, dataset has {data.count}"
        )
    images = data.images[: config.samples]
    labels = data.labels[: config.samples]
    surrogate_models = [load_model(p) for p in config.surrogates]
    victims = [(_stem(p), load_model(p)) for p in config.victims]

    deltas = craft_deltas(config, surrogate_models, images, labels)

    whitebox = float(
        np.mean(
            [success_rate(m, images, labels, deltas) for m in surrogate_models]
        )
    )
    victim_rates, clean_acc, eligible, per_image = {}, {}, {}, {}
    for name, victim in victims:
        _, clean_pred = classify(victim, images)
        mask = clean_pred == labels
        _, adv_pred = classify(victim, images + deltas)
        clean_acc[name] = float(mask.mean())
        eligible[name] = int(mask.sum())
        if eligible[name] == 0:
            raise UndefinedRateError(f"victim {name} has no clean-correct image")
        victim_rates[name] = float(
            np.mean(adv_pred[mask] != labels[mask])
        )
        per_image[name] = (adv_pred != labels) & mask

    report = AttackReport(
        run_id=config.run_id,
        method=config.attack.method,
        tricks=tricks_label(config),
        surrogate="+".join(_stem(p) for p in config.surrogates),
        victim_rates=victim_rates,
        whitebox_rate=whitebox,
        clean_accuracy=clean_acc,
        eligible_counts=eligible,
        per_image=per_image,
        seed=config.seed,
        wall_seconds=time.perf_counter() - began,
    )
    rows = report_rows(report, axis="-", axis_value="")
    return report, rows


def report_rows(report: AttackReport, axis: str, axis_value) -> list[dict]:
    rows = []
    for name, rate in report.victim_rates.items():
        rows.append(
            {
                "run_id": report.run_id,
                "method": report.method,
                "tricks": report.tricks,
                "axis": axis,
                "axis_value": axis_value,
                "surrogate": report.surrogate,
                "victim": name,
                "clean_acc": report.clean_accuracy[name],
                "whitebox_asr": report.whitebox_rate,
                "transfer_asr": rate,
                "n_eval": report.eligible_counts[name],
                "seed": report.seed,
            }
        )
    mean_row = dict(rows[0])
    mean_row["victim"] = "mean"
    mean_row["clean_acc"] = float(
        np.mean([r["clean_acc"] for r in rows])
    )
    mean_row["transfer_asr"] = float(
        np.mean([r["transfer_asr"] for r in rows])
    )
    mean_row["n_eval"] = float(np.mean([r["n_eval"] for r in rows]))
    rows.append(mean_row)
    return rows


def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "iters":
        return replace(config, attack=replace(config.attack, iters=int(value)))
    if axis == "step_scale":
        return replace(
            config, attack=replace(config.attack, step_scale=float(value))
        )
    if axis == "decay":
        return replace(config, attack=replace(config.attack, decay=float(value)))
    if axis == "copies":
        return replace(
            config, transform=replace(config.transform, copies=int(value))
        )
    if axis == "rho":
        return replace(config, transform=replace(config.transform, rho=float(value)))
    raise ConfigurationError(f"unknown sweep axis {axis!r}")


def sweep(config: ExperimentConfig, axis: str, values) -> list[dict]:
    """One experiment per axis value, shared seed base, long-form rows."""
    values = list(values)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    rows = []
    for value in values:
        sub = _apply_axis(config, axis, value)
        report, _ = run_experiment(sub)
        rows.extend(report_rows(report, axis=axis, axis_value=value))
    return rows


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_format_cell(row[col]) for col in CSV_COLUMNS])
    return buf.getvalue()


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))


def _stem(path) -> str:
    base = os.path.basename(str(path))
    return base.rsplit(".", 1)[0] if "." in base else base
