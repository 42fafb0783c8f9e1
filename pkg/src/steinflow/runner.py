"""Run orchestration: execute configs, persist artifacts, summarize runs.

The runner owns every file write. A run directory holds a ``manifest.json``
from which every artifact (tensors, metrics stream, segment manifests) is
reachable, with content hashes so reruns can be compared byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .compose import CompositeTarget, ContextConditionals, direct_conditionals, model_velocity_field
from .errors import ConfigError
from .experts import GmmExpert, isotropic_expert, product_moments
from .inversion import rf_invert
from .runconfig import RunSetup, build_expert, build_field, build_setup, config_hash, lattice_shape
from .segments import ExtendResult, SegmentPlan, SegmentSpec, extend
from .svgd import SampleResult, anneal_sample
from .tensorfile import read_tensor, write_tensor

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.jsonl"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class Manifest:
    command: str
    config: dict
    run_dir: Path
    artifacts: list[dict]
    extras: dict
    wall_clock_s: float

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "command": self.command,
            "created_utc": _utcnow(),
            "software": {"name": "steinflow", "version": __version__},
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": self.config["seed"],
            "wall_clock_s": self.wall_clock_s,
            "artifacts": self.artifacts,
            "extras": self.extras,
        }

    def write(self) -> Path:
        path = self.run_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _artifact(run_dir: Path, path: Path, kind: str) -> dict:
    return {"path": str(path.relative_to(run_dir)), "sha256": _sha256(path), "kind": kind}


def prepare_context(setup: RunSetup, base_dir: Path) -> ContextConditionals | None:
    """Compute (or import) the per-level context conditionals for a setup."""
    cfg = setup.context_cfg
    if cfg is None:
        return None
    reference = build_field(cfg["reference"], setup.shape, base_dir)
    if "import_dir" in cfg:
        return load_conditionals(base_dir / cfg["import_dir"], cfg["source"], setup.ladder.T)
    if cfg["source"] == "direct":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([setup.seed, 101])))
        return direct_conditionals(reference, setup.ladder, rng)
    model = isotropic_expert(reference, cfg.get("model_var", 0.05), name="context")
    return rf_invert(reference, model_velocity_field(model, setup.schedule), setup.ladder)


def export_conditionals(context: ContextConditionals, directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(context.T + 1):
        p = directory / f"level_{t:04d}.tensor"
        write_tensor(p, context.levels[t])
        paths.append(p)
    meta = directory / "context.json"
    meta.write_text(json.dumps({"source": context.source, "levels": context.T + 1}) + "\n")
    paths.append(meta)
    return paths


def load_conditionals(directory: Path, source: str, T: int) -> ContextConditionals:
    paths = [directory / f"level_{t:04d}.tensor" for t in range(T + 1)]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"context import dir {directory} lacks levels: {missing[:3]}...")
    levels = np.stack([read_tensor(p) for p in paths])
    return ContextConditionals(levels=levels, source=source, reference=levels[0].copy())


def _make_target(setup: RunSetup, context: ContextConditionals | None) -> CompositeTarget:
    return CompositeTarget(
        experts=setup.experts,
        ladder=setup.ladder,
        masks=setup.masks,
        context=context,
        lambda_policy=setup.lambda_policy,
        recon=setup.recon,
    )


def _oracle_extras(setup: RunSetup) -> dict:
    """Product-oracle moments when every expert is a plain Gaussian."""
    models = [m for m, _, _ in setup.experts]
    if not all(isinstance(m, GmmExpert) and len(m.components) == 1 for m in models):
        return {}
    if not all(np.all(mask == 1.0) for _, mask, _ in setup.experts):
        return {}
    mean, var = product_moments(models)
    return {"oracle_mean": float(mean.mean()), "oracle_var": var}


def run_sample(cfg: dict, base_dir: str | Path, output_dir: str | Path) -> Manifest:
    base_dir = Path(base_dir)
    run_dir = Path(output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg, base_dir)
    context = prepare_context(setup, base_dir)
    target = _make_target(setup, context)

    started = time.perf_counter()
    metrics_path = run_dir / METRICS_NAME
    with open(metrics_path, "w") as stream:

        def on_step(record):
            stream.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")
            stream.flush()

        result = anneal_sample(
            target,
            setup.ladder,
            setup.svgd,
            L=cfg["svgd"]["particles"],
            seed=setup.seed,
            on_step=on_step,
            refine=setup.refine,
        )
    wall = time.perf_counter() - started

    artifacts = []
    for i, particle in enumerate(result.ensemble.particles):
        p = run_dir / f"particle_{i:04d}.tensor"
        write_tensor(p, particle)
        artifacts.append(_artifact(run_dir, p, "particle"))
    artifacts.append(_artifact(run_dir, metrics_path, "metrics"))
    if context is not None and setup.context_cfg.get("export", False):
        for p in export_conditionals(context, run_dir / "context"):
            artifacts.append(_artifact(run_dir, p, "context"))

    extras = {"particles": int(result.ensemble.L), **_oracle_extras(setup)}
    manifest = Manifest("sample", cfg, run_dir, artifacts, extras, wall)
    manifest.write()
    return manifest


def _segment_plan(cfg: dict, setup: RunSetup, base_dir: Path) -> SegmentPlan:
    ext = cfg["extension"]
    shape = lattice_shape(cfg)
    if shape[2] != ext["frames_per_segment"]:
        raise ConfigError("lattice frames must equal extension.frames_per_segment")
    per_segment = ext.get("per_segment") or [{} for _ in range(ext["segments"])]
    if len(per_segment) != ext["segments"]:
        raise ConfigError("extension.per_segment length must equal extension.segments")
    segments = []
    for seg in per_segment:
        shift = seg.get("mean_shift", 0.0)
        experts = []
        for spec, (built, mask, weight) in zip(cfg["experts"], setup.experts):
            model = build_expert(spec, shape, base_dir, mean_shift=shift) if shift else built
            experts.append((model, mask, weight))
        segments.append(SegmentSpec(experts=experts, masks=setup.masks, T=seg.get("steps")))
    return SegmentPlan(
        frames_per_segment=ext["frames_per_segment"],
        overlap=ext["overlap"],
        segments=segments,
        context_mode=ext.get("mode", "inversion"),
        context_var=ext.get("context_var", 0.05),
        first_context=None,
    )


def run_extend(cfg: dict, base_dir: str | Path, output_dir: str | Path) -> Manifest:
    if cfg.get("extension") is None:
        raise ConfigError("extend needs an extension section in the config")
    base_dir = Path(base_dir)
    run_dir = Path(output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg, base_dir)
    plan = _segment_plan(cfg, setup, base_dir)
    if setup.context_cfg is not None:
        plan = SegmentPlan(
            frames_per_segment=plan.frames_per_segment,
            overlap=plan.overlap,
            segments=plan.segments,
            context_mode=plan.context_mode,
            context_var=plan.context_var,
            first_context=prepare_context(setup, base_dir),
        )

    started = time.perf_counter()
    result = extend(
        plan,
        setup.ladder,
        setup.svgd,
        L=cfg["svgd"]["particles"],
        seed=setup.seed,
        lambda_policy=setup.lambda_policy,
        recon=setup.recon,
        refine=setup.refine,
    )
    wall = time.perf_counter() - started

    artifacts = []
    seq_path = run_dir / "sequence.tensor"
    write_tensor(seq_path, result.sequence)
    artifacts.append(_artifact(run_dir, seq_path, "sequence"))
    for seg in result.segments:
        seg_dir = run_dir / f"segment_{seg.index:02d}"
        seg_dir.mkdir(exist_ok=True)
        sp = seg_dir / "sample.tensor"
        write_tensor(sp, seg.sample)
        artifacts.append(_artifact(run_dir, sp, "segment-sample"))
        mp = seg_dir / METRICS_NAME
        with open(mp, "w") as f:
            for record in seg.result.records:
                f.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")
        artifacts.append(_artifact(run_dir, mp, "metrics"))
        seg_manifest = seg_dir / MANIFEST_NAME
        seg_manifest.write_text(
            json.dumps(
                {
                    "format": 1,
                    "segment": seg.index,
                    "frames": plan.frames_per_segment,
                    "overlap": plan.overlap,
                    "context_mode": plan.context_mode if seg.index > 0 else "config",
                    "artifacts": ["sample.tensor", METRICS_NAME],
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        artifacts.append(_artifact(run_dir, seg_manifest, "segment-manifest"))

    extras = {
        "segments": plan.count,
        "total_frames": plan.total_frames(),
        "overlap_errors": result.overlap_errors(plan.overlap),
    }
    manifest = Manifest("extend", cfg, run_dir, artifacts, extras, wall)
    manifest.write()
    return manifest


def run_invert(cfg: dict, base_dir: str | Path, output_dir: str | Path) -> Manifest:
    if cfg.get("context") is None:
        raise ConfigError("invert needs a context section in the config")
    base_dir = Path(base_dir)
    run_dir = Path(output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg, base_dir)
    started = time.perf_counter()
    context = prepare_context(setup, base_dir)
    wall = time.perf_counter() - started
    artifacts = [
        _artifact(run_dir, p, "context") for p in export_conditionals(context, run_dir / "context")
    ]
    extras = {"source": context.source, "levels": context.T + 1}
    manifest = Manifest("invert", cfg, run_dir, artifacts, extras, wall)
    manifest.write()
    return manifest


def load_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"{run_dir} is not a run directory (no {MANIFEST_NAME})")
    return json.loads(path.read_text())


def run_metrics(run_dir: str | Path) -> dict:
    """Summarize a finished run into CSV tables next to its artifacts."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    out: dict = {"command": manifest["command"], "tables": {}}

    records = []
    metrics_path = run_dir / METRICS_NAME
    if metrics_path.exists():
        records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line]
    if records:
        traj = run_dir / "density_trajectory.csv"
        with open(traj, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(records[0].keys()))
            w.writeheader()
            w.writerows(records)
        out["tables"]["density_trajectory"] = str(traj)

    if manifest["command"] == "sample":
        particles = sorted(run_dir.glob("particle_*.tensor"))
        stack = np.stack([read_tensor(p) for p in particles])
        mean = float(stack.mean())
        var = float(stack.var(axis=0).mean())
        flat = stack.reshape(stack.shape[0], -1)
        diffs = flat[:, None, :] - flat[None, :, :]
        mpd = float(np.sqrt((diffs**2).sum(-1))[np.triu_indices(len(flat), 1)].mean()) if len(flat) > 1 else 0.0
        summary_rows = [
            {
                "sample_mean": mean,
                "sample_var": var,
                "oracle_mean": manifest["extras"].get("oracle_mean", ""),
                "oracle_var": manifest["extras"].get("oracle_var", ""),
                "mean_pairwise_distance": mpd,
                "particles": len(particles),
            }
        ]
        spath = run_dir / "summary.csv"
        with open(spath, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(summary_rows[0].keys()))
            w.writeheader()
            w.writerows(summary_rows)
        out["tables"]["summary"] = str(spath)
        out["summary"] = summary_rows[0]

    if manifest["command"] == "extend":
        errs = manifest["extras"].get("overlap_errors", [])
        opath = run_dir / "overlap.csv"
        with open(opath, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["boundary", "relative_l2_error"])
            for i, e in enumerate(errs):
                w.writerow([i + 1, e])
        out["tables"]["overlap"] = str(opath)
        out["summary"] = {"overlap_errors": errs}

    return out
