"""Run configuration: YAML schema, validation, overrides, object builders.

One config file fully determines a run; CLI flags and API overrides rewrite
keys before validation, and the canonical JSON of the validated config is
hashed into the manifest so reruns are checkable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
import yaml

from .compose import ContextConditionals, LambdaPolicy, ReconStep
from .errors import ConfigError
from .experts import GaussianComponent, GmmExpert
from .fields import constant_field, sinusoid_field
from .flows import AnnealLadder, NoiseSchedule
from .masks import MaskSet, as_mask
from .remote import Endpoint, RemoteExpert
from .svgd import RefinePolicy, SvgdConfig
from .tensorfile import read_tensor

_FIELD_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["constant", "sinusoid", "file"]},
        "value": {"type": "number"},
        "amplitude": {"type": "number"},
        "spatial_period": {"type": "number"},
        "frame_period": {"type": "number"},
        "phase": {"type": "number"},
        "path": {"type": "string"},
    },
    "required": ["kind"],
}

_MASK_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["full", "zeros", "constant", "frames", "file"]},
        "value": {"type": "number"},
        "start": {"type": "integer", "minimum": 0},
        "stop": {"type": "integer", "minimum": 0},
        "path": {"type": "string"},
    },
    "required": ["kind"],
}

_EXPERT_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["gmm", "remote"]},
        "name": {"type": "string"},
        "components": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "weight": {"type": "number", "exclusiveMinimum": 0},
                    "mean": _FIELD_SPEC,
                    "var": {"type": "number", "exclusiveMinimum": 0},
                },
                "required": ["weight", "mean", "var"],
            },
        },
        "host": {"type": "string"},
        "port": {"type": "integer", "minimum": 1, "maximum": 65535},
        "conditioning": {"type": "string"},
        "request": {"enum": ["score", "velocity"]},
        "timeout": {"type": "number", "exclusiveMinimum": 0},
        "mask": _MASK_SPEC,
        "role": {"enum": ["fg", "sim", "none"]},
        "weight": {"type": "number", "minimum": 0},
    },
    "required": ["kind"],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lattice": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "frames": {"type": "integer", "minimum": 1},
                "channels": {"type": "integer", "minimum": 1},
            },
            "required": ["height", "width", "frames", "channels"],
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["rectified_linear", "variance_preserving"]},
                "eps_clamp": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
            },
        },
        "ladder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "grid": {"enum": ["uniform", "extended"]},
            },
            "required": ["steps"],
        },
        "svgd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "particles": {"type": "integer", "minimum": 1},
                "inner_iters": {"type": "integer", "minimum": 1},
                "repulsion": {"type": "boolean"},
                "bandwidth_floor": {"type": "number", "exclusiveMinimum": 0},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "experts": {"type": "array", "minItems": 1, "items": _EXPERT_SPEC},
        "context": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["inversion", "direct"]},
                "reference": _FIELD_SPEC,
                "model_var": {"type": "number", "exclusiveMinimum": 0},
                "import_dir": {"type": "string"},
                "export": {"type": "boolean"},
            },
            "required": ["source", "reference"],
        },
        "lambda_policy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["project_hard", "soft"]},
                "lam": {"type": "number", "minimum": 0},
            },
        },
        "recon": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "step_size": {"type": "number", "exclusiveMinimum": 0},
                "every": {"type": "integer", "minimum": 1},
            },
        },
        "mask_smoothing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": {"type": "integer", "minimum": 0},
                "sigma": {"type": "number", "minimum": 0},
            },
        },
        "refine": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "every": {"type": "integer", "minimum": 1},
                "threshold": {"type": ["number", "null"], "minimum": 0},
            },
        },
        "extension": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "segments": {"type": "integer", "minimum": 1},
                "frames_per_segment": {"type": "integer", "minimum": 2},
                "overlap": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["inversion", "direct"]},
                "context_var": {"type": "number", "exclusiveMinimum": 0},
                "per_segment": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {
                            "mean_shift": {"type": "number"},
                            "steps": {"type": ["integer", "null"], "minimum": 1},
                        },
                    },
                },
            },
            "required": ["segments", "frames_per_segment", "overlap"],
        },
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
    },
    "required": ["lattice", "ladder", "experts", "seed"],
}

_DEFAULTS: dict[str, Any] = {
    "schedule": {"kind": "rectified_linear", "eps_clamp": 1e-3},
    "ladder": {"grid": "uniform"},
    "svgd": {
        "eta": 1e-3,
        "particles": 64,
        "inner_iters": 1,
        "repulsion": True,
        "bandwidth_floor": 1e-8,
        "workers": 1,
    },
    "lambda_policy": {"kind": "project_hard", "lam": 0.0},
    "mask_smoothing": {"radius": 1, "sigma": 0.5},
}


def _merge_defaults(cfg: dict, defaults: dict) -> dict:
    out = dict(cfg)
    for key, value in defaults.items():
        if key not in out:
            out[key] = value
        elif isinstance(value, dict) and isinstance(out[key], dict):
            out[key] = _merge_defaults(out[key], value)
    return out


def parse_override(expr: str) -> tuple[list[str], Any]:
    """Parse a ``path.to.key=value`` override; values are YAML scalars."""
    if "=" not in expr:
        raise ConfigError(f"override {expr!r} is not of the form key=value")
    path, raw = expr.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {expr!r} has an empty key path")
    return keys, yaml.safe_load(raw)


def apply_override(cfg: dict, keys: list[str], value: Any) -> None:
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-mapping key {k!r}")
    if value is None and keys[-1] in node:
        del node[keys[-1]]
    else:
        node[keys[-1]] = value


def normalize_config(raw: dict, overrides: list[str] | None = None) -> dict:
    """Apply overrides and defaults, then schema-validate; returns the config."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = json.loads(json.dumps(raw))  # deep copy, reject non-JSON values early
    for expr in overrides or []:
        keys, value = parse_override(expr)
        apply_override(cfg, keys, value)
    cfg = _merge_defaults(cfg, _DEFAULTS)
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config invalid at {'/'.join(str(p) for p in exc.absolute_path)}: {exc.message}") from exc
    ext = cfg.get("extension")
    if ext is not None and ext["overlap"] >= ext["frames_per_segment"]:
        raise ConfigError("extension overlap must be smaller than frames_per_segment")
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return normalize_config(raw, overrides)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def lattice_shape(cfg: dict) -> tuple[int, int, int, int]:
    lat = cfg["lattice"]
    return (lat["height"], lat["width"], lat["frames"], lat["channels"])


def build_field(spec: dict, shape: tuple[int, int, int, int], base_dir: Path) -> np.ndarray:
    kind = spec["kind"]
    if kind == "constant":
        return constant_field(shape, spec.get("value", 0.0))
    if kind == "sinusoid":
        return sinusoid_field(
            shape,
            amplitude=spec.get("amplitude", 1.0),
            spatial_period=spec.get("spatial_period", 4.0),
            frame_period=spec.get("frame_period", 8.0),
            phase=spec.get("phase", 0.0),
        )
    if kind == "file":
        arr = read_tensor(base_dir / spec["path"])
        if arr.shape != shape:
            raise ConfigError(f"field file {spec['path']} has shape {arr.shape}, lattice is {shape}")
        return arr
    raise ConfigError(f"unknown field kind {kind!r}")


def build_mask(spec: dict | None, shape: tuple[int, int, int, int], base_dir: Path) -> np.ndarray:
    mshape = shape[:3] + (1,)
    if spec is None or spec["kind"] == "full":
        return np.ones(mshape)
    kind = spec["kind"]
    if kind == "zeros":
        return np.zeros(mshape)
    if kind == "constant":
        return as_mask(np.full(mshape, float(spec.get("value", 1.0))))
    if kind == "frames":
        m = np.zeros(mshape)
        m[:, :, spec.get("start", 0) : spec.get("stop", mshape[2]), :] = 1.0
        return m
    if kind == "file":
        arr = read_tensor(base_dir / spec["path"])
        return as_mask(arr, shape=mshape)
    raise ConfigError(f"unknown mask kind {kind!r}")


def build_expert(spec: dict, shape, base_dir: Path, mean_shift: float = 0.0):
    if spec["kind"] == "gmm":
        comps = []
        for c in spec["components"]:
            mean = build_field(c["mean"], shape, base_dir) + mean_shift
            comps.append(GaussianComponent(c["weight"], mean, c["var"]))
        total = sum(c.weight for c in comps)
        comps = tuple(
            GaussianComponent(c.weight / total, c.mean, c.var) for c in comps
        )
        return GmmExpert(comps, name=spec.get("name", "gmm"))
    if spec["kind"] == "remote":
        for key in ("host", "port"):
            if key not in spec:
                raise ConfigError(f"remote expert needs {key!r}")
        expert = RemoteExpert(
            Endpoint(spec["host"], spec["port"]),
            conditioning=spec.get("conditioning", ""),
            kind=spec.get("request", "score"),
            name=spec.get("name", "remote"),
            timeout=spec.get("timeout", 10.0),
        )
        expert.shape = shape
        return expert
    raise ConfigError(f"unknown expert kind {spec['kind']!r}")


@dataclass
class RunSetup:
    """Everything assembled from a validated config except context conditionals."""

    cfg: dict
    shape: tuple[int, int, int, int]
    schedule: NoiseSchedule
    ladder: AnnealLadder
    svgd: SvgdConfig
    experts: list[tuple[Any, np.ndarray, float]]
    masks: MaskSet | None
    lambda_policy: LambdaPolicy
    recon: ReconStep | None
    refine: RefinePolicy | None
    seed: int
    context_cfg: dict | None = None
    context: ContextConditionals | None = field(default=None)


def build_setup(cfg: dict, base_dir: str | Path = ".") -> RunSetup:
    base_dir = Path(base_dir)
    shape = lattice_shape(cfg)
    schedule = NoiseSchedule(kind=cfg["schedule"]["kind"], eps_clamp=cfg["schedule"]["eps_clamp"])
    ladder = AnnealLadder(T=cfg["ladder"]["steps"], schedule=schedule, grid=cfg["ladder"]["grid"])
    sv = cfg["svgd"]
    svgd = SvgdConfig(
        eta=sv["eta"],
        inner_iters=sv["inner_iters"],
        repulsion_enabled=sv["repulsion"],
        bandwidth_floor=sv["bandwidth_floor"],
        workers=sv["workers"],
    )

    experts = []
    fg = np.zeros(shape[:3] + (1,))
    sim = np.zeros(shape[:3] + (1,))
    for spec in cfg["experts"]:
        mask = build_mask(spec.get("mask"), shape, base_dir)
        model = build_expert(spec, shape, base_dir)
        experts.append((model, mask, float(spec.get("weight", 1.0))))
        role = spec.get("role", "none")
        if role == "fg":
            fg = np.maximum(fg, mask)
        elif role == "sim":
            sim = np.maximum(sim, mask)

    masks = None
    if cfg.get("context") is not None:
        masks = MaskSet.from_masks(fg, sim)
        smoothing = cfg["mask_smoothing"]
        if smoothing["radius"] > 0 or smoothing["sigma"] > 0:
            masks = masks.smoothed(smoothing["radius"], smoothing["sigma"])

    lam = cfg["lambda_policy"]
    recon_cfg = cfg.get("recon")
    refine_cfg = cfg.get("refine")
    smoothing = cfg["mask_smoothing"]
    return RunSetup(
        cfg=cfg,
        shape=shape,
        schedule=schedule,
        ladder=ladder,
        svgd=svgd,
        experts=experts,
        masks=masks,
        lambda_policy=LambdaPolicy(kind=lam["kind"], lam=lam.get("lam", 0.0)),
        recon=ReconStep(recon_cfg["step_size"], recon_cfg.get("every", 1)) if recon_cfg else None,
        refine=RefinePolicy(
            every=refine_cfg.get("every", 5),
            threshold=refine_cfg.get("threshold"),
            resmooth_radius=smoothing["radius"],
            resmooth_sigma=smoothing["sigma"],
        )
        if refine_cfg
        else None,
        seed=cfg["seed"],
        context_cfg=cfg.get("context"),
    )
