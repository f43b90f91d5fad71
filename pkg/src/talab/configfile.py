"""Flat key=value experiment configuration with bracketed sections.

Files are standard INI text (parsed with :mod:`configparser`); every key
can be overridden on the command line as ``--<section>.<key> value``.
Numeric values accept plain floats and ``a/b`` fractions (``eps =
16/255``).
"""

from __future__ import annotations

import configparser
from dataclasses import replace

from .attacks import AttackConfig, MethodParams, adjusted_preset
from .errors import ConfigurationError
from .experiments import ExperimentConfig
from .schedules import ScheduleSpec
from .transforms import TransformSpec

SECTIONS = ("attack", "transform", "ensemble", "data", "output")

DEFAULTS: dict[str, dict[str, str]] = {
    "attack": {
        "preset": "none",
        "method": "mifgsm",
        "eps": "16/255",
        "iters": "10",
        "step_scale": "1.0",
        "decay": "1.0",
        "schedule": "identity",
        "schedule_p": "0.6",
        "schedule_direction": "decreasing",
        "normalize_grad": "true",
        "clip_inner": "true",
        "rgi": "false",
        "rgi_restarts": "5",
        "rgi_iters": "5",
        "dual": "false",
        "dual_count": "3",
        "ni_lookahead": "1.6/255",
        "pi_amplification": "2.5",
        "pi_kernel": "3",
        "emi_samples": "11",
        "emi_radius": "7.0",
        "vmi_samples": "20",
        "vmi_radius": "1.5",
        "gimi_pre_iters": "5",
    },
    "transform": {
        "kind": "none",
        "copies": "20",
        "rho": "0.2",
        "dim_pad": "1.1",
        "dim_prob": "0.5",
        "tim_kernel": "5",
        "tim_sigma": "1.5",
        "sim_scales": "5",
        "admix_eta": "0.2",
        "admix_count": "3",
        "ssa_sigma": "1.0",
        "rho_amp": "0.5",
        "dropout_frac": "0.10",
    },
    "ensemble": {
        "fusion": "logit",
        "tau": "0.1",
        "ga": "false",
        "ait": "false",
        "ms": "false",
        "conflict_rule": "cosine",
    },
    "data": {
        "dataset": "",
        "surrogates": "",
        "victims": "",
        "samples": "500",
        "seed": "0",
    },
    "output": {
        "csv": "",
        "run_id": "run",
    },
}


def parse_number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"bad fraction {text!r}") from exc
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"bad number {text!r}") from exc


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"bad boolean {text!r}")


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"bad config file {path}: {exc}") from exc
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}]"
                )
            out.setdefault(section, {})[key] = value
    return out


def merge_settings(*layers) -> dict[str, dict[str, str]]:
    """Later layers override earlier ones; defaults come first."""
    merged = {s: dict(kv) for s, kv in DEFAULTS.items()}
    for layer in layers:
        for section, kv in layer.items():
            merged[section].update(kv)
    return merged


def build_attack_config(settings: dict[str, dict[str, str]]) -> AttackConfig:
    a = settings["attack"]
    if a["preset"] not in ("none", "adjusted"):
        raise ConfigurationError(f"unknown attack preset {a['preset']!r}")
    schedule = ScheduleSpec(
        kind=a["schedule"],
        p=parse_number(a["schedule_p"]),
        direction=a["schedule_direction"],
    )
    params = MethodParams(
        ni_lookahead=parse_number(a["ni_lookahead"]),
        pi_amplification=parse_number(a["pi_amplification"]),
        pi_kernel=int(parse_number(a["pi_kernel"])),
        emi_samples=int(parse_number(a["emi_samples"])),
        emi_radius=parse_number(a["emi_radius"]),
        vmi_samples=int(parse_number(a["vmi_samples"])),
        vmi_radius=parse_number(a["vmi_radius"]),
        gimi_pre_iters=int(parse_number(a["gimi_pre_iters"])),
    )
    config = AttackConfig(
        method=a["method"],
        eps=parse_number(a["eps"]),
        iters=int(parse_number(a["iters"])),
        step_scale=parse_number(a["step_scale"]),
        decay=parse_number(a["decay"]),
        schedule=schedule,
        params=params,
        normalize_grad=parse_bool(a["normalize_grad"]),
        clip_inner=parse_bool(a["clip_inner"]),
        rgi=parse_bool(a["rgi"]),
        rgi_restarts=int(parse_number(a["rgi_restarts"])),
        rgi_iters=int(parse_number(a["rgi_iters"])),
        dual=parse_bool(a["dual"]),
        dual_count=int(parse_number(a["dual_count"])),
    )
    if a["preset"] == "adjusted":
        config = replace(
            adjusted_preset(config.method),
            eps=config.eps,
            schedule=config.schedule,
            normalize_grad=config.normalize_grad,
            clip_inner=config.clip_inner,
            rgi=config.rgi,
            rgi_restarts=config.rgi_restarts,
            rgi_iters=config.rgi_iters,
            dual=config.dual,
            dual_count=config.dual_count,
        )
    return config


def build_transform_spec(settings: dict[str, dict[str, str]]) -> TransformSpec:
    t = settings["transform"]
    return TransformSpec(
        kind=t["kind"],
        copies=int(parse_number(t["copies"])),
        rho=parse_number(t["rho"]),
        dim_pad=parse_number(t["dim_pad"]),
        dim_prob=parse_number(t["dim_prob"]),
        tim_kernel=int(parse_number(t["tim_kernel"])),
        tim_sigma=parse_number(t["tim_sigma"]),
        sim_scales=int(parse_number(t["sim_scales"])),
        admix_eta=parse_number(t["admix_eta"]),
        admix_count=int(parse_number(t["admix_count"])),
        ssa_sigma=parse_number(t["ssa_sigma"]),
        rho_amp=parse_number(t["rho_amp"]),
        dropout_frac=parse_number(t["dropout_frac"]),
    )


def _split_paths(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def build_experiment_config(settings: dict[str, dict[str, str]]) -> ExperimentConfig:
    d = settings["data"]
    e = settings["ensemble"]
    o = settings["output"]
    if not d["dataset"]:
        raise ConfigurationError("data.dataset is required")
    surrogates = _split_paths(d["surrogates"])
    victims = _split_paths(d["victims"])
    return ExperimentConfig(
        surrogates=surrogates,
        victims=victims,
        dataset=d["dataset"],
        attack=build_attack_config(settings),
        transform=build_transform_spec(settings),
        fusion=e["fusion"],
        tau=parse_number(e["tau"]),
        ga=parse_bool(e["ga"]),
        ait=parse_bool(e["ait"]),
        ms=parse_bool(e["ms"]),
        conflict_rule=e["conflict_rule"],
        samples=int(parse_number(d["samples"])),
        seed=int(parse_number(d["seed"])),
        run_id=o["run_id"],
        output=o["csv"] or None,
    )
