"""Config-driven experiment runners behind the CLI.

Every run is a pure function of (config, seed): outputs are byte-identical
across re-runs, and each output directory carries the resolved config, the
checkpoint hash, and the tool version.  Point batches may be sharded across
worker threads (capped by ``INVLAB_THREADS``); reductions concatenate shard
results in index order, so parallelism never changes outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (MetricsReport, edit_success_rate, make_report, pairwise_l2,
                       write_summary_csv)
from .dataset import Condition, GmmSpec, assign_clusters, default_gmm_spec, write_points_csv
from .diffusion import (NoiseSchedule, ddim_sample, linear_beta_schedule,
                        write_trajectory_csv, Trajectory)
from .errors import CheckpointError, ConfigError
from .flow import FlowGrid, euler_invert, euler_sample
from .inversion import (NoiseMapSet, ddim_invert, editfriendly_invert, flow_invert,
                        renoise_invert, replay_noise_maps, tighten,
                        write_inversion_artifacts, edit_by_condition_swap)
from .network import (CondBatch, ModelParams, TrainConfig, load_checkpoint,
                      save_checkpoint, train_model)
from .numerics import RngStream

KINDS = ("train", "invert", "reconstruct", "edit", "fig3", "table1",
         "sweep-scale", "baseline-random", "report")
METHODS = ("ddim", "renoise", "editfriendly", "flow")


def worker_count() -> int:
    """Worker cap from INVLAB_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("INVLAB_THREADS", "1")))
    except ValueError:
        return 1


def shard_slices(n: int, workers: int) -> list[slice]:
    workers = min(max(workers, 1), n) or 1
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def run_sharded(fn, n: int) -> list:
    """Apply fn(slice) per shard and return results in index order."""
    slices = shard_slices(n, worker_count())
    if len(slices) == 1:
        return [fn(slices[0])]
    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        return list(pool.map(fn, slices))


def _strict(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} section: {exc}") from exc


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_min: float = 1e-3
    beta_max: float = 0.14

    def build(self) -> NoiseSchedule:
        return linear_beta_schedule(self.T, self.beta_min, self.beta_max)


@dataclass
class MethodConfig:
    name: str = "ddim"
    K: int = 4
    averaging: bool = False
    guidance: float = 1.0
    time_arg: str = "current"
    steps: list[int] | None = None

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")


@dataclass
class ConditionConfig:
    mode: str = "null"
    class_id: int | None = None
    scale: float = 0.4

    def build(self, point=None) -> Condition:
        if self.mode == "null":
            return Condition.null()
        if self.mode == "class":
            if self.class_id is None:
                raise ConfigError("condition mode 'class' needs class_id")
            return Condition.for_class(self.class_id)
        if self.mode == "tight":
            if point is None:
                raise ConfigError("condition mode 'tight' anchors on the evaluated point")
            return tighten(None, point, self.scale)
        raise ConfigError(f"unknown condition mode {self.mode!r}")


@dataclass
class EvalConfig:
    n_points: int = 512
    eval_class: int = 5
    edit_target: int | None = None  # default: the class adjacent to eval_class
    radius_multiplier: float = 3.0
    scale_grid: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7])
    tight_scale: float = 0.7
    baseline_scale: float = 0.4
    tight_during_edit: bool = True
    trajectory_subset: int = 8
    renoise_steps: list[int] = field(default_factory=lambda: [25, 50, 75, 100])


@dataclass
class ExperimentConfig:
    kind: str
    out_dir: str = "out"
    seed: int = 0
    seeds: list[int] | None = None
    checkpoint: str | None = None
    train_inline: bool = False
    dataset: GmmSpec | None = None
    train: TrainConfig | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    flow_steps: int = 100
    method: MethodConfig = field(default_factory=MethodConfig)
    condition: ConditionConfig = field(default_factory=ConditionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    report_inputs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" in data and data["dataset"] is not None:
            try:
                data["dataset"] = GmmSpec.from_dict(data["dataset"])
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"invalid dataset section: {exc}") from exc
        if "train" in data and data["train"] is not None:
            tr = dict(data["train"])
            known_tr = {f.name for f in fields(TrainConfig)}
            unknown_tr = set(tr) - known_tr
            if unknown_tr:
                raise ConfigError(f"unknown train keys: {sorted(unknown_tr)}")
            try:
                data["train"] = TrainConfig.from_dict(tr)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid train section: {exc}") from exc
        for name, cls in (("schedule", ScheduleConfig), ("method", MethodConfig),
                          ("condition", ConditionConfig), ("eval", EvalConfig)):
            if name in data and data[name] is not None and not isinstance(data[name], cls):
                data[name] = _strict(cls, data[name], name)
        if "kind" not in data:
            raise ConfigError("config needs a 'kind'")
        try:
            return ExperimentConfig(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.dataset is not None:
            d["dataset"] = self.dataset.to_dict()
        if self.train is not None:
            d["train"] = self.train.to_dict()
        return d

    def resolved_seeds(self) -> list[int]:
        if self.seeds:
            return [int(s) for s in self.seeds]
        return [self.seed, self.seed + 1, self.seed + 2]

    def gmm(self) -> GmmSpec:
        return self.dataset if self.dataset is not None else default_gmm_spec()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_provenance(cfg: ExperimentConfig, out: Path, checkpoint_path=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["seeds"] = cfg.resolved_seeds()
    (out / "config.json").write_text(json.dumps(resolved, sort_keys=True, indent=2))
    run = {
        "kind": cfg.kind,
        "version": __version__,
        "checkpoint_sha256": None if checkpoint_path is None else _sha256(checkpoint_path),
    }
    (out / "run.json").write_text(json.dumps(run, sort_keys=True, indent=2))


def _load_model(cfg: ExperimentConfig, objective: str) -> tuple[ModelParams, Path]:
    """Load the configured checkpoint, or train inline when allowed."""
    if cfg.checkpoint and Path(cfg.checkpoint).exists():
        params, _, _ = load_checkpoint(cfg.checkpoint)
        if params.objective != objective:
            raise CheckpointError(
                f"{cfg.checkpoint}: objective {params.objective!r}, need {objective!r}")
        return params, Path(cfg.checkpoint)
    if not cfg.train_inline:
        raise CheckpointError(
            f"checkpoint {cfg.checkpoint!r} not found and inline training is disabled")
    train_cfg = cfg.train or TrainConfig(objective=objective, seed=cfg.seed)
    if train_cfg.objective != objective:
        raise ConfigError(f"inline training config has objective {train_cfg.objective!r}, "
                          f"but this experiment needs {objective!r}")
    params, state, _ = train_model(train_cfg, cfg.gmm())
    path = Path(cfg.out_dir) / "model.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, state, train_cfg, path)
    return params, path


def held_out_points(spec: GmmSpec, seed: int, n: int,
                    class_id: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation points from a stream disjoint from every training stream."""
    rng = RngStream(seed).child("held-out-eval")
    if class_id is None:
        from .dataset import sample_posterior_arrays
        return sample_posterior_arrays(spec, rng, n)
    pts = spec.center_of(class_id) + spec.component_std * rng.normal((n, spec.dim))
    return pts, np.full(n, class_id, dtype=np.int64)


def _cond_batch(mode: str, pts: np.ndarray, labels: np.ndarray, scale: float,
                eval_class: int | None = None, class_row_override: int | None = None
                ) -> CondBatch:
    n, d = pts.shape
    if mode == "null":
        return CondBatch.from_anchor_rows(np.zeros(n, dtype=np.int64), np.zeros((n, d)), np.zeros(n))
    if mode == "class":
        rows = labels if class_row_override is None else np.full(n, class_row_override, dtype=np.int64)
        return CondBatch.from_anchor_rows(rows, np.zeros((n, d)), np.zeros(n))
    if mode == "tight":
        return CondBatch.from_anchor_rows(np.zeros(n, dtype=np.int64), pts, np.full(n, scale))
    raise ConfigError(f"unknown condition mode {mode!r}")


def diffusion_roundtrip(model, pts: np.ndarray, sched: NoiseSchedule, cond,
                        w: float = 1.0, K: int = 0, steps=None,
                        averaging: bool = False, time_arg: str = "current"
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Invert then re-sample under the same condition: (latents, reconstructions)."""
    def one(sl: slice):
        sub = cond if isinstance(cond, Condition) else CondBatch(
            cond.rows[sl], cond.anchors[sl], cond.scales[sl])
        inv = renoise_invert(model, pts[sl], sched, sub, w=w, K=K, steps=steps,
                             averaging=averaging, time_arg=time_arg)
        rec, _ = ddim_sample(model, inv.z_terminal, sched, sub, w=w, steps=steps)
        return inv.z_terminal, rec

    parts = run_sharded(one, pts.shape[0])
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def flow_roundtrip(model, pts: np.ndarray, grid: FlowGrid, cond, w: float = 1.0
                   ) -> tuple[np.ndarray, np.ndarray]:
    def one(sl: slice):
        sub = cond if isinstance(cond, Condition) else CondBatch(
            cond.rows[sl], cond.anchors[sl], cond.scales[sl])
        z, _ = euler_invert(model, pts[sl], grid, sub, w=w)
        rec, _ = euler_sample(model, z, grid, sub, w=w)
        return z, rec

    parts = run_sharded(one, pts.shape[0])
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def adjacent_class(spec: GmmSpec, class_id: int) -> int:
    ids = sorted(spec.class_ids)
    i = ids.index(class_id)
    return ids[i - 1] if i > 0 else ids[i + 1]


# ---------------------------------------------------------------------------
# Run verbs
# ---------------------------------------------------------------------------


def run_train(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.train or TrainConfig(seed=cfg.seed)
    params, state, history = train_model(train_cfg, cfg.gmm())
    ckpt = out / "model.ckpt"
    save_checkpoint(params, state, train_cfg, ckpt)
    with (out / "history.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, repr(loss)])
    _write_provenance(cfg, out, ckpt)
    return {"checkpoint": str(ckpt), "final_loss": history[-1][1],
            "initial_loss": history[0][1]}


def _invert_points(cfg: ExperimentConfig, model: ModelParams, pts, labels, seed: int):
    """Dispatch on the configured method; returns latents plus per-point results."""
    m = cfg.method
    sched = cfg.schedule.build()
    grid = FlowGrid(cfg.flow_steps)
    mode = cfg.condition.mode
    cond = _cond_batch(mode, pts, labels, cfg.condition.scale,
                       class_row_override=cfg.condition.class_id)
    if m.name == "flow":
        res = flow_invert(model, pts, grid, cond, w=m.guidance)
        return res.z_terminal, res, cond
    if m.name == "editfriendly":
        rng = RngStream(seed).child("editfriendly-noise")
        nms = editfriendly_invert(model, pts, sched, cond, rng, w=m.guidance)
        return nms.x_T, nms, cond
    K = m.K if m.name == "renoise" else 0
    res = renoise_invert(model, pts, sched, cond, w=m.guidance, K=K,
                         averaging=m.averaging, steps=m.steps, time_arg=m.time_arg)
    return res.z_terminal, res, cond


def run_invert(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    objective = "flow_matching" if cfg.method.name == "flow" else "epsilon_prediction"
    model, ckpt = _load_model(cfg, objective)
    spec = cfg.gmm()
    pts, labels = held_out_points(spec, cfg.seed, cfg.eval.n_points)
    latents, result, cond = _invert_points(cfg, model, pts, labels, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_points_csv(out / "sources.csv", pts, labels)
    write_points_csv(out / "latents.csv", latents, labels)
    sidecar = {
        "method": cfg.method.name,
        "condition": {"mode": cfg.condition.mode, "scale": cfg.condition.scale,
                      "class_id": cfg.condition.class_id},
        "guidance": cfg.method.guidance,
        "seed": cfg.seed,
        "residuals": (result.residuals.tolist()
                      if getattr(result, "residuals", None) is not None else None),
    }
    (out / "inversion.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))
    k = min(cfg.eval.trajectory_subset, pts.shape[0])
    if not isinstance(result, NoiseMapSet):
        for i in range(k):
            traj = Trajectory(result.trajectory.states[:, i, :], result.trajectory.times)
            write_trajectory_csv(out / f"traj_{i:03d}.csv", traj)
    _write_provenance(cfg, out, ckpt)
    return {"out": str(out), "n": int(pts.shape[0])}


def run_reconstruct(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    objective = "flow_matching" if cfg.method.name == "flow" else "epsilon_prediction"
    model, ckpt = _load_model(cfg, objective)
    spec = cfg.gmm()
    sched = cfg.schedule.build()
    pts, labels = held_out_points(spec, cfg.seed, cfg.eval.n_points)
    mode = cfg.condition.mode
    cond = _cond_batch(mode, pts, labels, cfg.condition.scale,
                       class_row_override=cfg.condition.class_id)
    if cfg.method.name == "flow":
        latents, recons = flow_roundtrip(model, pts, FlowGrid(cfg.flow_steps), cond,
                                         cfg.method.guidance)
    elif cfg.method.name == "editfriendly":
        rng = RngStream(cfg.seed).child("editfriendly-noise")
        nms = editfriendly_invert(model, pts, sched, cond, rng, w=cfg.method.guidance)
        recons, _ = replay_noise_maps(model, nms, sched)
        latents = nms.x_T
    else:
        K = cfg.method.K if cfg.method.name == "renoise" else 0
        latents, recons = diffusion_roundtrip(model, pts, sched, cond, cfg.method.guidance,
                                              K=K, steps=cfg.method.steps,
                                              averaging=cfg.method.averaging,
                                              time_arg=cfg.method.time_arg)
    report = make_report(cfg.method.name, mode, cfg.condition.scale, cfg.seed,
                         pts, recons, latents, spec)
    out.mkdir(parents=True, exist_ok=True)
    write_points_csv(out / "sources.csv", pts, labels)
    write_points_csv(out / "reconstructions.csv", recons, labels)
    report.write_json(out / "metrics.json")
    write_summary_csv([report], out / "summary.csv")
    _write_provenance(cfg, out, ckpt)
    return {"mean_l2": report.mean_l2, "out": str(out)}


def run_edit(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    objective = "flow_matching" if cfg.method.name == "flow" else "epsilon_prediction"
    model, ckpt = _load_model(cfg, objective)
    spec = cfg.gmm()
    sched = cfg.schedule.build()
    grid = FlowGrid(cfg.flow_steps)
    pts, labels = held_out_points(spec, cfg.seed, cfg.eval.n_points, cfg.eval.eval_class)
    target = cfg.eval.edit_target or adjacent_class(spec, cfg.eval.eval_class)
    latents, result, cond = _invert_points(cfg, model, pts, labels, cfg.seed)
    edited = edit_by_condition_swap(
        model, result, Condition.for_class(target),
        "ddpm" if isinstance(result, NoiseMapSet) else result.sampler_family(),
        w=cfg.method.guidance, sched=sched, grid=grid,
        tight_during_edit=cfg.eval.tight_during_edit)
    success = edit_success_rate(edited, target, spec, cfg.eval.radius_multiplier)
    report = make_report(cfg.method.name, cfg.condition.mode, cfg.condition.scale,
                         cfg.seed, pts, edited, latents, spec, edit_success=success)
    out.mkdir(parents=True, exist_ok=True)
    write_points_csv(out / "edited.csv", edited, np.full(len(edited), target))
    report.write_json(out / "metrics.json")
    write_summary_csv([report], out / "summary.csv")
    _write_provenance(cfg, out, ckpt)
    return {"edit_success": success, "target": target, "out": str(out)}


def run_fig3(cfg: ExperimentConfig) -> dict:
    """Four-panel flow study: prior denoising plus three inversion conditions."""
    from .analysis import trajectory_offsets
    from .svg import SvgStyle, emit_svg_scatter

    out = Path(cfg.out_dir)
    model, ckpt = _load_model(cfg, "flow_matching")
    spec = cfg.gmm()
    grid = FlowGrid(cfg.flow_steps)
    n = cfg.eval.n_points
    k = min(cfg.eval.trajectory_subset, n)
    eval_class = cfg.eval.eval_class
    wrong_class = cfg.eval.edit_target or adjacent_class(spec, eval_class)
    out.mkdir(parents=True, exist_ok=True)

    rng = RngStream(cfg.seed).child("fig3")
    prior = rng.normal((n, spec.dim))
    pts = spec.center_of(eval_class) + spec.component_std * rng.child("points").normal((n, spec.dim))
    labels = np.full(n, eval_class, dtype=np.int64)

    # Panel (a): denoise prior draws under the null condition.
    endpoints, traj_a = euler_sample(model, prior, grid, Condition.null())
    write_points_csv(out / "panel_a_prior.csv", prior, np.zeros(n, dtype=int))
    write_points_csv(out / "panel_a_samples.csv", endpoints, assign_clusters(endpoints, spec))
    emit_svg_scatter(
        {"prior": prior, "reconstructed": endpoints},
        [traj_a.states[:, i, :] for i in range(k)], [],
        SvgStyle(title="denoise from prior (null condition)"), out / "panel_a.svg")

    panels = {"b": Condition.null(), "c": Condition.for_class(eval_class),
              "d": Condition.for_class(wrong_class)}
    reports: dict[str, MetricsReport] = {}
    for name, cond in panels.items():
        z, inv_traj = euler_invert(model, pts, grid, cond)
        rec, den_traj = euler_sample(model, z, grid, cond)
        offs = [trajectory_offsets(Trajectory(inv_traj.states[:, i, :], inv_traj.times),
                                   Trajectory(den_traj.states[:, i, :], den_traj.times))
                for i in range(n)]
        report = make_report("flow", cond.mode, 0.0, cfg.seed, pts, rec, z, spec,
                             offsets_max=float(np.max(offs)))
        reports[name] = report
        write_points_csv(out / f"panel_{name}_points.csv", pts, labels)
        write_points_csv(out / f"panel_{name}_latents.csv", z, labels)
        write_points_csv(out / f"panel_{name}_recon.csv", rec, labels)
        report.write_json(out / f"panel_{name}_metrics.json")
        segments = []
        trajs = []
        for i in range(k):
            trajs.append(inv_traj.states[:, i, :])
            trajs.append(den_traj.states[:, i, :])
            for a, b in zip(inv_traj.states[::-1, i, :], den_traj.states[:, i, :]):
                segments.append((a[:2], b[:2]))
            write_trajectory_csv(out / f"panel_{name}_traj_{i:03d}_invert.csv",
                                 Trajectory(inv_traj.states[:, i, :], inv_traj.times))
            write_trajectory_csv(out / f"panel_{name}_traj_{i:03d}_denoise.csv",
                                 Trajectory(den_traj.states[:, i, :], den_traj.times))
        emit_svg_scatter(
            {"posterior": pts, "inverted": z, "reconstructed": rec}, trajs, segments,
            SvgStyle(title=f"invert + reconstruct ({cond.mode})"), out / f"panel_{name}.svg")

    write_summary_csv([reports[p] for p in sorted(reports)], out / "summary.csv")
    comparison = {
        "l2_null": reports["b"].mean_l2,
        "l2_correct": reports["c"].mean_l2,
        "l2_wrong": reports["d"].mean_l2,
        "trace_null": reports["b"].cloud_stats().trace,
        "trace_correct": reports["c"].cloud_stats().trace,
        "nll_correct": reports["c"].mean_latent_nll,
        "nll_wrong": reports["d"].mean_latent_nll,
        "offsets_max_null": reports["b"].offsets_max,
        "offsets_max_correct": reports["c"].offsets_max,
    }
    (out / "comparison.json").write_text(json.dumps(comparison, sort_keys=True, indent=2))
    _write_provenance(cfg, out, ckpt)
    return comparison


def run_table1(cfg: ExperimentConfig) -> dict:
    """Condition-specificity table: null vs class vs tight round-trip errors."""
    out = Path(cfg.out_dir)
    model, ckpt = _load_model(cfg, "epsilon_prediction")
    spec = cfg.gmm()
    sched = cfg.schedule.build()
    seeds = cfg.resolved_seeds()
    rows = []  # (condition, seed, mean_l2, mean_nll)
    reports = []
    for seed in seeds:
        pts, labels = held_out_points(spec, seed, cfg.eval.n_points)
        for mode, scale in (("null", 0.0), ("class", 0.0), ("tight", cfg.eval.tight_scale)):
            cond = _cond_batch(mode, pts, labels, scale)
            latents, recons = diffusion_roundtrip(model, pts, sched, cond,
                                                  cfg.method.guidance, steps=cfg.method.steps)
            report = make_report("ddim", mode, scale, seed, pts, recons, latents, spec)
            reports.append(report)
            rows.append((mode, seed, report.mean_l2, report.mean_latent_nll))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "table1_per_seed.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["condition", "seed", "mean_l2", "mean_latent_nll"])
        for mode, seed, l2, nll in rows:
            w.writerow([mode, seed, repr(l2), repr(nll)])
    means = {}
    with (out / "table1.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["condition", "mean_l2", "mean_latent_nll"])
        for mode in ("null", "class", "tight"):
            sel = [(l2, nll) for m, _, l2, nll in rows if m == mode]
            l2m = float(np.mean([v[0] for v in sel]))
            nllm = float(np.mean([v[1] for v in sel]))
            means[mode] = l2m
            w.writerow([mode, repr(l2m), repr(nllm)])
    write_summary_csv(reports, out / "summary.csv")
    _write_provenance(cfg, out, ckpt)
    return means


def run_scale_sweep(cfg: ExperimentConfig) -> dict:
    """Reconstruction vs editability across the tight-conditioning scale."""
    from .svg import SvgStyle, emit_svg_curve

    out = Path(cfg.out_dir)
    model, ckpt = _load_model(cfg, "epsilon_prediction")
    spec = cfg.gmm()
    sched = cfg.schedule.build()
    seeds = cfg.resolved_seeds()
    grid = [float(s) for s in cfg.eval.scale_grid]
    target = cfg.eval.edit_target or adjacent_class(spec, cfg.eval.eval_class)
    per_seed = []  # (seed, s, recon_l2, edit_success)
    reports = []
    for seed in seeds:
        pts, labels = held_out_points(spec, seed, cfg.eval.n_points, cfg.eval.eval_class)
        n = pts.shape[0]
        for s in grid:
            cond = _cond_batch("tight", pts, labels, s)
            latents, recons = diffusion_roundtrip(model, pts, sched, cond, cfg.method.guidance,
                                                  steps=cfg.method.steps)
            if cfg.eval.tight_during_edit:
                edit_cond = CondBatch.from_anchor_rows(
                    np.full(n, target, dtype=np.int64), pts, np.full(n, s))
            else:
                edit_cond = _cond_batch("class", pts, labels, 0.0, class_row_override=target)
            edited, _ = ddim_sample(model, latents, sched, edit_cond, cfg.method.guidance,
                                    steps=cfg.method.steps)
            success = edit_success_rate(edited, target, spec, cfg.eval.radius_multiplier)
            report = make_report("ddim", "tight", s, seed, pts, recons, latents, spec,
                                 edit_success=success)
            reports.append(report)
            per_seed.append((seed, s, report.mean_l2, success))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep_per_seed.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "scale", "recon_l2", "edit_success"])
        for seed, s, l2, succ in per_seed:
            w.writerow([seed, repr(s), repr(l2), repr(succ)])
    recon_means = []
    edit_means = []
    with (out / "sweep.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scale"] + [repr(s) for s in grid])
        recon_means = [float(np.mean([l2 for _, s2, l2, _ in per_seed if s2 == s])) for s in grid]
        edit_means = [float(np.mean([e for _, s2, _, e in per_seed if s2 == s])) for s in grid]
        w.writerow(["recon_l2"] + [repr(v) for v in recon_means])
        w.writerow(["edit_success"] + [repr(v) for v in edit_means])
    emit_svg_curve(grid, {"recon_l2": np.array(recon_means),
                          "edit_success": np.array(edit_means)},
                   SvgStyle(title="reconstruction vs editability"), out / "sweep.svg",
                   x_label="tight scale", y_label="value")
    write_summary_csv(reports, out / "summary.csv")
    _write_provenance(cfg, out, ckpt)
    return {"scales": grid, "recon_l2": recon_means, "edit_success": edit_means}


def run_random_noise_baseline(cfg: ExperimentConfig) -> dict:
    """Tight denoising from fresh prior draws vs from tight-inverted latents."""
    out = Path(cfg.out_dir)
    model, ckpt = _load_model(cfg, "epsilon_prediction")
    spec = cfg.gmm()
    sched = cfg.schedule.build()
    s = cfg.eval.baseline_scale
    pts, labels = held_out_points(spec, cfg.seed, cfg.eval.n_points)
    cond = _cond_batch("tight", pts, labels, s)
    latents, rec_inv = diffusion_roundtrip(model, pts, sched, cond, cfg.method.guidance,
                                           steps=cfg.method.steps)
    z_rand = RngStream(cfg.seed).child("baseline-noise").normal(pts.shape)
    rec_rand, _ = ddim_sample(model, z_rand, sched, cond, cfg.method.guidance,
                              steps=cfg.method.steps)
    rep_inv = make_report("tight-inversion", "tight", s, cfg.seed, pts, rec_inv, latents, spec)
    rep_rand = make_report("random-noise", "tight", s, cfg.seed, pts, rec_rand, z_rand, spec)
    out.mkdir(parents=True, exist_ok=True)
    rep_inv.write_json(out / "metrics_tight_inversion.json")
    rep_rand.write_json(out / "metrics_random_noise.json")
    write_summary_csv([rep_inv, rep_rand], out / "summary.csv")
    _write_provenance(cfg, out, ckpt)
    return {"tight_inversion_l2": rep_inv.mean_l2, "random_noise_l2": rep_rand.mean_l2}


def run_report(cfg: ExperimentConfig) -> dict:
    """Aggregate metrics JSONs from earlier runs into one summary CSV."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for src in cfg.report_inputs:
        for path in sorted(Path(src).glob("*.json")):
            if path.name in ("config.json", "run.json", "comparison.json", "inversion.json"):
                continue
            data = json.loads(path.read_text())
            if "mean_l2" not in data:
                continue
            rows.append({"source": str(path), **{k: data.get(k) for k in (
                "method", "condition_mode", "scale", "seed", "mean_l2", "median_l2",
                "mean_latent_nll", "edit_success")}})
    with (out / "report.csv").open("w", newline="") as f:
        w = csv.writer(f)
        cols = ["source", "method", "condition_mode", "scale", "seed", "mean_l2",
                "median_l2", "mean_latent_nll", "edit_success"]
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])
    _write_provenance(cfg, out)
    return {"rows": len(rows), "out": str(out)}


RUNNERS = {
    "train": run_train,
    "invert": run_invert,
    "reconstruct": run_reconstruct,
    "edit": run_edit,
    "fig3": run_fig3,
    "table1": run_table1,
    "sweep-scale": run_scale_sweep,
    "baseline-random": run_random_noise_baseline,
    "report": run_report,
}


def run_experiment(cfg: ExperimentConfig) -> dict:
    return RUNNERS[cfg.kind](cfg)
