"""Experiment configuration, the training harness, and grid search.

Configs are JSON documents with a ``schema_version`` field; unknown keys
are rejected so typos fail loudly.  A run is a pure function of the
config: every random draw (weights, data, shuffling, target sampling,
probes) comes from generators spawned off the single config seed, and the
deterministic metric CSV plus the config echo are enough to reproduce it.

Autoencoder convention throughout: the target of a batch is the batch.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import gen_gaussian_blobs, gen_synthetic_curves, load_idx
from .mlp import init_mlp, batch_loss, forward
from .optim import (
    OptimizerConfig,
    SECOND_ORDER_METHODS,
    fim_error_probe,
    init_train_state,
    train_step,
)
from .records import MetricRecord, emit_csv, emit_plot, emit_timings

__all__ = [
    "SCHEMA_VERSION",
    "ETA_GRID",
    "LAMBDA_GRID",
    "CLIP_GRID",
    "ARCHITECTURES",
    "ProbeSpec",
    "ExperimentConfig",
    "RunResult",
    "load_config",
    "config_from_dict",
    "build_dataset",
    "run_experiment",
    "grid_search",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ETA_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 3e-1, 3e-2, 3e-3, 3e-4)
LAMBDA_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 3e-1, 3e-2, 3e-3, 3e-4)
CLIP_GRID = (1e-2, 1e-3)

# deep autoencoder presets; the desk preset is a shrunken curves network
# sized so exact Fisher blocks stay cheap to materialize in tests
ARCHITECTURES: dict[str, dict] = {
    "mnist": {
        "layer_dims": [784, 1000, 500, 250, 30, 250, 500, 1000, 784],
        "activations": ["relu"] * 7 + ["sigmoid"],
        "loss": "bce",
        "batch_size": 512,
    },
    "faces": {
        "layer_dims": [625, 2000, 1000, 500, 30, 500, 1000, 2000, 625],
        "activations": ["relu"] * 7 + ["linear"],
        "loss": "mse",
        "batch_size": 1024,
    },
    "curves": {
        "layer_dims": [784, 400, 200, 100, 50, 25, 6, 25, 50, 100, 200, 400, 784],
        "activations": ["relu"] * 11 + ["sigmoid"],
        "loss": "bce",
        "batch_size": 256,
    },
    "curves_desk": {
        "layer_dims": [64, 32, 16, 6, 16, 32, 64],
        "activations": ["relu"] * 5 + ["sigmoid"],
        "loss": "bce",
        "batch_size": 64,
    },
}

_DATASETS = ("synthetic_curves", "mnist", "faces_config_only")


@dataclass
class ProbeSpec:
    """Approximation-error probing along the run.

    ``layer`` of None means the layer just past the midpoint of the
    network (bottleneck-adjacent in the autoencoder presets).
    """

    every: int = 1
    layer: int | None = None
    methods: tuple[str, ...] = SECOND_ORDER_METHODS


@dataclass
class ExperimentConfig:
    preset: str = "curves_desk"
    dataset: str = "synthetic_curves"
    layer_dims: list[int] = field(default_factory=list)
    activations: list[str] = field(default_factory=list)
    loss: str = ""
    epochs: int = 10
    n_train: int = 1024
    n_val: int = 256
    side: int = 8
    data_path: str = ""
    val_path: str = ""
    synthetic: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe: ProbeSpec | None = None
    out_dir: str = "runs/out"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(
                f"config schema version {self.schema_version} unsupported "
                f"(expected {SCHEMA_VERSION})"
            )
        if self.dataset not in _DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; choose from {_DATASETS}")
        if self.preset:
            if self.preset not in ARCHITECTURES:
                raise ValueError(f"unknown preset {self.preset!r}")
            arch = ARCHITECTURES[self.preset]
            if not self.layer_dims:
                self.layer_dims = list(arch["layer_dims"])
            if not self.activations:
                self.activations = list(arch["activations"])
            if not self.loss:
                self.loss = arch["loss"]
        if not self.layer_dims or not self.activations or not self.loss:
            raise ValueError("architecture underspecified: need layer_dims, activations, loss")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def default_probe_layer(self) -> int:
        return len(self.layer_dims) // 2 + 1


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricRecord]
    summary: dict
    out_dir: Path


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "optimizer" in raw and isinstance(raw["optimizer"], dict):
        opt_known = set(OptimizerConfig.__dataclass_fields__)
        opt_unknown = set(raw["optimizer"]) - opt_known
        if opt_unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(opt_unknown)}")
        raw["optimizer"] = OptimizerConfig(**raw["optimizer"])
    if "probe" in raw and isinstance(raw["probe"], dict):
        probe = dict(raw["probe"])
        if "methods" in probe:
            probe["methods"] = tuple(probe["methods"])
        raw["probe"] = ProbeSpec(**probe)
    return ExperimentConfig(**raw)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a JSON config file, then apply flat CLI overrides on top."""
    raw = json.loads(Path(path).read_text())
    if overrides:
        opt_fields = set(OptimizerConfig.__dataclass_fields__)
        for key, value in overrides.items():
            if value is None:
                continue
            if key in opt_fields:
                raw.setdefault("optimizer", {})
                if not isinstance(raw["optimizer"], dict):
                    raw["optimizer"] = asdict(raw["optimizer"])
                raw["optimizer"][key] = value
            else:
                raw[key] = value
    return config_from_dict(raw)


def build_dataset(config: ExperimentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (train, val) input matrices for the configured dataset."""
    width = config.layer_dims[0]
    if config.dataset == "synthetic_curves":
        seed = int(rng.integers(2 ** 31))
        data = gen_synthetic_curves(config.n_train + config.n_val, seed, side=config.side)
    elif config.dataset == "faces_config_only":
        if not config.synthetic:
            raise ValueError(
                "the faces corpus is not redistributable; pass synthetic=true "
                "(--synthetic) to train on generated stand-in images"
            )
        seed = int(rng.integers(2 ** 31))
        side = int(round(np.sqrt(width)))
        data = gen_gaussian_blobs(config.n_train + config.n_val, seed, side=side)
    else:
        if not config.data_path:
            raise ValueError("mnist dataset requires data_path pointing at an IDX image file")
        data = load_idx(config.data_path)
        if config.val_path:
            val = load_idx(config.val_path)
            data = data[: config.n_train]
            return data, val[: config.n_val]
        data = data[: config.n_train + config.n_val]
    if data.shape[1] != width:
        raise ValueError(f"dataset width {data.shape[1]} != network input width {width}")
    return data[: config.n_train], data[config.n_train : config.n_train + config.n_val]


def _probe_layer(config: ExperimentConfig) -> int:
    if config.probe is not None and config.probe.layer is not None:
        return config.probe.layer
    return config.default_probe_layer


def run_experiment(config: ExperimentConfig, write_artifacts: bool = True) -> RunResult:
    """Train per the config, recording one metric row per iteration.

    Artifacts written to out_dir: config_echo.json, metrics.csv (fully
    deterministic), timings.csv (wall clock), loss_vs_iteration.svg,
    loss_vs_time.svg, summary.json.
    """
    out_dir = Path(config.out_dir)
    opt = config.optimizer
    ss = np.random.SeedSequence(opt.seed)
    rng_init, rng_data, rng_shuffle, rng_sample, rng_probe = (
        np.random.default_rng(s) for s in ss.spawn(5)
    )
    train, val = build_dataset(config, rng_data)
    model = init_mlp(config.layer_dims, config.activations, config.loss, rng_init)
    state = init_train_state(model, opt, sample_rng=rng_sample)

    bs = opt.batch_size
    if bs > len(train):
        raise ValueError(f"batch size {bs} exceeds training set size {len(train)}")
    batches_per_epoch = len(train) // bs
    probe = config.probe
    probe_layer = _probe_layer(config)

    records: list[MetricRecord] = []
    epoch_train_loss: list[float] = []
    started = time.perf_counter()
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        order = rng_shuffle.permutation(len(train))
        losses = []
        for b in range(batches_per_epoch):
            iteration += 1
            idx = order[b * bs : (b + 1) * bs]
            x = train[idx]
            metrics = train_step(model, (x, x), state, opt)
            losses.append(metrics.loss)
            extra: dict[str, float] = {}
            if metrics.sigma1 is not None:
                for i, (s1, s2, its) in enumerate(
                    zip(metrics.sigma1, metrics.sigma2, metrics.solver_iterations), start=1
                ):
                    extra[f"sigma1_L{i}"] = s1
                    extra[f"sigma2_L{i}"] = s2
                    extra[f"solver_iters_L{i}"] = float(its)
            if probe is not None and (iteration - 1) % probe.every == 0:
                errors = fim_error_probe(
                    model, x, probe_layer, methods=probe.methods, rng=rng_probe,
                    eps=opt.svd_eps,
                )
                for name, err in errors.items():
                    extra[f"err_frob_{name}"] = err.frobenius
                    extra[f"err_spec_{name}"] = err.spectral
            rec = MetricRecord(
                iteration=iteration,
                epoch=epoch,
                train_loss=metrics.loss,
                nu=metrics.nu,
                wall_clock_seconds=time.perf_counter() - started,
                extra=extra,
            )
            records.append(rec)
        if len(val):
            records[-1].val_loss = batch_loss(forward(model, val)[-1], val, config.loss)
        epoch_train_loss.append(float(np.mean(losses)))

    elapsed = time.perf_counter() - started
    summary = {
        "method": opt.method,
        "iterations": iteration,
        "epochs": config.epochs,
        "epoch_train_loss": epoch_train_loss,
        "final_train_loss": epoch_train_loss[-1],
        "final_val_loss": records[-1].val_loss if len(val) else float("nan"),
        "elapsed_seconds": elapsed,
    }
    if write_artifacts:
        out_dir.mkdir(parents=True, exist_ok=True)
        echo = asdict(config)
        (out_dir / "config_echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
        emit_csv(records, out_dir / "metrics.csv")
        emit_timings(records, out_dir / "timings.csv")
        emit_plot(
            records,
            out_dir / "loss_vs_iteration.svg",
            x="iteration",
            series=["train_loss", "val_loss"],
            title=f"{opt.method}: training loss",
        )
        emit_plot(
            records,
            out_dir / "loss_vs_time.svg",
            x="wall_clock_seconds",
            series=["train_loss"],
            title=f"{opt.method}: loss vs wall clock",
        )
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return RunResult(config, records, summary, out_dir)


def grid_search(
    config: ExperimentConfig,
    etas: tuple[float, ...] = ETA_GRID,
    lambdas: tuple[float, ...] = LAMBDA_GRID,
    clips: tuple[float, ...] = CLIP_GRID,
    write_artifacts: bool = False,
) -> dict:
    """Sweep learning rate (and damping/clip for second-order methods).

    Returns a summary dict with one entry per setting and the best one by
    final training loss; divergent runs are recorded, not fatal.
    """
    second_order = config.optimizer.method in SECOND_ORDER_METHODS
    if not second_order:
        lambdas, clips = (config.optimizer.damping,), (config.optimizer.clip,)
    runs = []
    best = None
    for eta in etas:
        for lam in lambdas:
            for clip in clips:
                tag = f"eta{eta:g}_lam{lam:g}_clip{clip:g}"
                sub = replace(
                    config,
                    optimizer=replace(config.optimizer, lr=eta, damping=lam, clip=clip),
                    out_dir=str(Path(config.out_dir) / tag),
                )
                try:
                    result = run_experiment(sub, write_artifacts=write_artifacts)
                    entry = {
                        "eta": eta,
                        "damping": lam,
                        "clip": clip,
                        "final_train_loss": result.summary["final_train_loss"],
                        "epoch_train_loss": result.summary["epoch_train_loss"],
                        "status": "ok",
                    }
                    if best is None or entry["final_train_loss"] < best["final_train_loss"]:
                        best = entry
                except (RuntimeError, FloatingPointError) as exc:
                    logger.warning("grid point %s diverged: %s", tag, exc)
                    entry = {
                        "eta": eta,
                        "damping": lam,
                        "clip": clip,
                        "final_train_loss": float("nan"),
                        "status": f"diverged: {exc}",
                    }
                runs.append(entry)
    out = {"method": config.optimizer.method, "runs": runs, "best": best}
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "gridsearch_summary.json").write_text(json.dumps(out, indent=2, sort_keys=True))
    return out
