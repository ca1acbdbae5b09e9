"""Experiment grid: data, training, alterations, metrics, 1-NN evals and the report.

Every job writes its own files under the output directory and is skipped
when its output already exists, so an interrupted grid can be rerun.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import datagen
from .alterations import AlterationPlan, noise_sequences
from .datagen import Dataset
from .downstream import EncoderInfo, EvalResult, build_report, knn1_accuracy, write_report
from .encoders import Model, load_model, save_model
from .errors import ConfigError
from .metrics import measure, series, write_metrics_json, write_series_csv
from .trajectories import build_trajectories, read_trajectories, write_trajectories
from .training import METHODS, OPTIMIZERS, OptimizerConfig, TrainConfig, default_spec, train

log = logging.getLogger(__name__)

WORKERS_ENV = "RMPROBE_WORKERS"
TASKS = ("rings", "blobs_b")


@dataclass
class GridConfig:
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    dims: list[int] = field(default_factory=lambda: [16, 32, 64])
    optimizers: list[str] = field(default_factory=lambda: list(OPTIMIZERS))
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    alterations: list[str] = field(default_factory=lambda: ["noise"])
    # source data
    input_dim: int = 32
    classes: int = 4
    n_per_class: int = 100
    spread: float = 0.1
    data_seed: int = 0
    measure_samples: int = 40
    # encoders and training
    hidden: list[int] = field(default_factory=lambda: [64])
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.9
    margin: float = 1.0
    temperature: float = 0.5
    aug_strength: float = 0.1
    mask_fraction: float = 0.05
    # alterations
    noise_steps: int = 100
    pgd_iters: int = 30
    pgd_eps: float = 2 / 255
    alter_seed: int = 7
    normalize_embeddings: bool = True
    prc_prefactor: str = "J"
    # transfer tasks
    task_n_per_class: int = 200
    task_classes: int = 3
    rings_noise: float = 0.02
    task_blobs_spread: float = 0.3
    split_seed: int = 0
    out: str = "grid-out"
    workers: int = 0

    def validate(self) -> None:
        for name in ("methods", "dims", "optimizers", "seeds", "alterations"):
            if not getattr(self, name):
                raise ConfigError(f"grid field {name!r} must not be empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected from {METHODS}")
        bad = [o for o in self.optimizers if o not in OPTIMIZERS]
        if bad:
            raise ConfigError(f"unknown optimizers {bad}; expected from {OPTIMIZERS}")
        bad = [a for a in self.alterations if a not in ("noise", "pgd")]
        if bad:
            raise ConfigError(f"unknown alterations {bad}")
        if any(d < 1 for d in self.dims):
            raise ConfigError("embedding dims must be positive")

    def encoder_ids(self) -> list["EncoderJob"]:
        return [EncoderJob(m, d, o, s) for s in self.seeds for m in self.methods
                for d in self.dims for o in self.optimizers]


@dataclass(frozen=True)
class EncoderJob:
    method: str
    dim: int
    optimizer: str
    seed: int

    @property
    def encoder_id(self) -> str:
        return f"{self.method}-d{self.dim}-{self.optimizer}-s{self.seed}"


# ---------------------------------------------------------------- config files

_LIST_FIELDS = {f.name for f in fields(GridConfig) if f.name in
                ("methods", "dims", "optimizers", "seeds", "alterations", "hidden")}


def _convert(name: str, raw: str):
    default = getattr(GridConfig(), name)
    if name in ("dims", "seeds", "hidden"):
        return int(raw)
    if name in _LIST_FIELDS:
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def apply_settings(cfg: GridConfig, pairs: list[tuple[str, str, str]]) -> GridConfig:
    """Apply (key, value, where) settings; list keys accumulate, scalars overwrite."""
    known = {f.name for f in fields(GridConfig)}
    lists: dict[str, list] = {}
    for key, value, where in pairs:
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            v = _convert(key, value)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key!r}: {e}") from None
        if key in _LIST_FIELDS:
            lists.setdefault(key, []).append(v)
        else:
            setattr(cfg, key, v)
    for key, values in lists.items():
        setattr(cfg, key, values)
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        pairs.append((key, value, f"{source}:{lineno}"))
    return pairs


def load_config(path: Optional[str], overrides: list[str] = ()) -> GridConfig:
    pairs = []
    if path is not None:
        pairs += parse_config_text(Path(path).read_text(), str(path))
    file_keys = {k for k, _, _ in pairs}
    override_pairs = []
    for k, item in enumerate(overrides):
        if "=" not in item:
            raise ConfigError(f"--set #{k + 1}: expected key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        override_pairs.append((key, value, f"--set {item}"))
    # a list key given on the command line replaces the file's list entirely
    cli_lists = {k for k, _, _ in override_pairs if k in _LIST_FIELDS}
    pairs = [p for p in pairs if p[0] not in cli_lists or p[0] not in file_keys]
    cfg = apply_settings(GridConfig(), pairs + override_pairs)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- data


@dataclass
class GridData:
    train: Dataset
    measure: Dataset
    tasks: dict[str, Dataset]


def make_data(cfg: GridConfig) -> GridData:
    source = datagen.gen_blobs(cfg.n_per_class, cfg.classes, cfg.input_dim, cfg.spread, cfg.data_seed)
    train_set, held_out = source.train_test_split(0.2, cfg.data_seed)
    n = min(cfg.measure_samples, len(held_out))
    pick = np.sort(np.random.default_rng([cfg.data_seed, 1]).choice(len(held_out), n, replace=False))
    tasks = {
        "rings": datagen.gen_rings(cfg.task_n_per_class, cfg.task_classes, cfg.input_dim,
                                   cfg.rings_noise, cfg.data_seed + 1001),
        # fresh centres: classes the encoders never saw
        "blobs_b": datagen.gen_blobs(cfg.task_n_per_class, cfg.task_classes, cfg.input_dim,
                                     cfg.task_blobs_spread, cfg.data_seed + 2002),
    }
    return GridData(train_set, held_out.subset(pick), tasks)


def write_data(data: GridData, root: Path) -> None:
    d = root / "data"
    d.mkdir(parents=True, exist_ok=True)
    for name, ds in [("train", data.train), ("measure", data.measure), *data.tasks.items()]:
        path = d / f"{name}.csv"
        if not path.exists():
            datagen.write_csv(ds, path)


def read_data(root: Path, task_names) -> GridData:
    d = root / "data"
    return GridData(datagen.read_csv(d / "train.csv"), datagen.read_csv(d / "measure.csv"),
                    {t: datagen.read_csv(d / f"{t}.csv") for t in task_names})


# Per-process caches. Keys carry file stats so a rewritten file is never served stale.
_data_cache: dict = {}
_noise_cache: dict = {}


def _stat_key(root: Path, names) -> tuple:
    out = []
    for name in names:
        st = (root / "data" / f"{name}.csv").stat()
        out.append((name, st.st_mtime_ns, st.st_size))
    return (str(root.resolve()), tuple(out))


def cached_data(root: Path, task_names) -> GridData:
    key = _stat_key(root, ["train", "measure", *task_names])
    if key not in _data_cache:
        _data_cache.clear()
        _data_cache[key] = read_data(root, task_names)
    return _data_cache[key]


def cached_noise(root: Path, measure_set: Dataset, plan: AlterationPlan) -> np.ndarray:
    key = (_stat_key(root, ["measure"]), plan)
    if key not in _noise_cache:
        _noise_cache.clear()
        _noise_cache[key] = noise_sequences(measure_set.inputs, plan)
    return _noise_cache[key]


# ---------------------------------------------------------------- jobs


def alteration_plan(cfg: GridConfig, kind: str) -> AlterationPlan:
    if kind == "noise":
        return AlterationPlan.noise(cfg.noise_steps, master_seed=cfg.alter_seed)
    return AlterationPlan.pgd(cfg.pgd_iters, cfg.pgd_eps, master_seed=cfg.alter_seed,
                              margin=cfg.margin, temperature=cfg.temperature,
                              aug_strength=cfg.aug_strength, mask_fraction=cfg.mask_fraction)


def model_meta(job: EncoderJob) -> dict:
    return {"encoder_id": job.encoder_id, "method": job.method, "embedding_dim": job.dim,
            "optimizer": job.optimizer, "seed": job.seed}


def train_encoder(cfg: GridConfig, job: EncoderJob, data: Dataset) -> tuple[Model, list[float]]:
    spec = default_spec(job.method, cfg.input_dim, job.dim, cfg.hidden, cfg.classes)
    tcfg = TrainConfig(job.method, cfg.epochs, cfg.batch_size, job.seed, cfg.margin,
                       cfg.temperature, cfg.aug_strength, cfg.mask_fraction)
    ocfg = OptimizerConfig(job.optimizer, cfg.learning_rate, cfg.momentum)
    result = train(spec, data, tcfg, ocfg)
    return Model(spec, result.params), result.loss_history


def evaluate_task(model: Model, task: Dataset, split_seed: int) -> float:
    ref, qry = task.train_test_split(0.2, split_seed)
    return knn1_accuracy(model.encode(ref.inputs), ref.labels, model.encode(qry.inputs), qry.labels)


def save_with_meta(model: Model, path: Path, meta: dict) -> None:
    save_model(model, path)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def read_model_meta(path: Path) -> dict:
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else {}


def run_encoder(cfg: GridConfig, job: EncoderJob, root: str) -> str:
    """Train, alter, measure and evaluate one encoder; skips outputs that exist."""
    root = Path(root)
    data = cached_data(root, TASKS)
    eid = job.encoder_id
    model_path = root / "models" / f"{eid}.rmen"
    meta = model_meta(job)
    if not model_path.exists():
        model, history = train_encoder(cfg, job, data.train)
        save_with_meta(model, model_path, {**meta, "loss_history": history})
    model = load_model(model_path)

    for kind in cfg.alterations:
        traj_path = root / "trajectories" / f"{eid}.{kind}.rmtj"
        metrics_path = root / "metrics" / f"{eid}.{kind}.json"
        if not traj_path.exists():
            tmeta = {**{k: str(v) for k, v in meta.items()}, "alteration": kind}
            plan = alteration_plan(cfg, kind)
            altered = cached_noise(root, data.measure, plan) if kind == "noise" else None
            tset = build_trajectories(model, data.measure, plan, loss_kind=job.method,
                                      metadata=tmeta, altered=altered)
            write_trajectories(tset, traj_path)
        if not metrics_path.exists():
            tset = read_trajectories(traj_path)
            record = measure(tset, cfg.prc_prefactor, normalize=cfg.normalize_embeddings)
            write_metrics_json(record, metrics_path, tset.metadata)
            write_series_csv(series(tset, normalize=cfg.normalize_embeddings),
                             root / "series" / f"{eid}.{kind}.csv")

    for task, ds in data.tasks.items():
        eval_path = root / "evals" / f"{eid}.{task}.json"
        if not eval_path.exists():
            acc = evaluate_task(model, ds, cfg.split_seed)
            eval_path.write_text(json.dumps({"encoder_id": eid, "task_id": task, "raw_accuracy": acc}))
    return eid


def collect_report(metrics_dir: Path, evals_dir: Path, alteration: str = "noise"):
    encoders = []
    for p in sorted(Path(metrics_dir).glob("*.json")):
        doc = json.loads(p.read_text())
        if doc.get("alteration") != alteration:
            continue
        enc = doc.get("encoder", {})
        encoders.append(EncoderInfo(enc.get("encoder_id", p.stem.split(".")[0]), doc["RMQM"],
                                    int(enc.get("embedding_dim", 0)), enc.get("method", ""),
                                    enc.get("optimizer", "")))
    evals = []
    for p in sorted(Path(evals_dir).glob("*.json")):
        doc = json.loads(p.read_text())
        evals.append(EvalResult(doc["encoder_id"], doc["task_id"], float(doc["raw_accuracy"])))
    return build_report(encoders, evals)


def worker_count(cfg: GridConfig) -> int:
    if cfg.workers > 0:
        return cfg.workers
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


def run_grid(cfg: GridConfig):
    """Run (or resume) the whole grid and write the correlation report."""
    cfg.validate()
    root = Path(cfg.out)
    for sub in ("models", "trajectories", "metrics", "series", "evals"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_data(make_data(cfg), root)
    (root / "grid.json").write_text(json.dumps(asdict(cfg), indent=2))
    jobs = cfg.encoder_ids()
    n_workers = min(worker_count(cfg), len(jobs))
    if n_workers <= 1:
        for job in jobs:
            log.info("encoder %s", run_encoder(cfg, job, str(root)))
    else:
        with ProcessPoolExecutor(n_workers) as pool:
            futures = [pool.submit(run_encoder, cfg, job, str(root)) for job in jobs]
            for fut in futures:
                log.info("encoder %s", fut.result())
    primary = "noise" if "noise" in cfg.alterations else cfg.alterations[0]
    report = collect_report(root / "metrics", root / "evals", primary)
    write_report(report, root / "report.json", root / "scatter.csv")
    return report
