"""Experiment orchestration: one-to-one matrices and leave-one-out runs.

Every (cell, seed) job owns its random streams, derived from the cell id, the
seed and a stream name.  Cell ids never include the method, so methods run on
the same seed share data order, extractor/label-head initialisation and
domain-head initialisation.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .analysis import TransferMatrix
from .dann import AdaptationState, ArchConfig, TrainBatch, build_model, evaluate_accuracy, train_step
from .diffengine import lr_schedule
from .factorworld import DEFAULT_WORLD, Dataset, World, make_world, sample_domain, split_train_test
from .fpda import FPDA_MODES, AssignmentError, FactorAssignment, fpda_train_step, grouping_from_factor

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

METHODS = ("nodA", "da_no_usv", "da_usv", "fpda")
LAMBDA_GAMMA = 10.0
LR_ALPHA = 10.0
LR_BETA = 0.75
PCA_DDOF = 1
PCA_COMPONENTS = 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- config

_ARCH_KEYS = {"conv_channels", "feature_units", "label_hidden", "domain_hidden", "dropout", "extra_pools"}
_TOP_KEYS = {
    "method",
    "seeds",
    "epochs",
    "batch_size",
    "mu0",
    "world",
    "fixture",
    "assignment",
    "assignment_factor",
    "architecture",
    "output_dir",
    "data_seed",
    "workers",
    "pairs",
    "targets",
    "fpda_mode",
}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    seeds: tuple[int, ...] = (0,)
    epochs: int = 30
    batch_size: int = 32
    mu0: float = 0.3
    world: Mapping[str, Any] | None = None
    fixture: str | None = None
    assignment: Mapping[int, Any] | None = None
    assignment_factor: str | None = None
    architecture: Mapping[str, Any] = field(default_factory=dict)
    output_dir: str = "runs"
    data_seed: int = 0
    workers: int = 1
    pairs: tuple[tuple[int, int], ...] | None = None
    targets: tuple[int, ...] | None = None
    fpda_mode: str = "group"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} is not one of {METHODS}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if self.epochs <= 0:
            raise ConfigError("epochs: must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size: must be positive")
        if not self.mu0 > 0:
            raise ConfigError("mu0: must be positive")
        if self.fpda_mode not in FPDA_MODES:
            raise ConfigError(f"fpda_mode: {self.fpda_mode!r} is not one of {FPDA_MODES}")
        if self.workers <= 0:
            raise ConfigError("workers: must be positive")
        unknown = set(self.architecture) - _ARCH_KEYS
        if unknown:
            raise ConfigError(f"architecture: unknown keys {sorted(unknown)}")
        if self.method == "fpda":
            if self.assignment is None and self.assignment_factor is None:
                raise ConfigError("assignment: method 'fpda' needs an assignment or assignment_factor")
            if self.assignment is not None:
                missing = [d for d in self.world_obj().domain_ids if d not in self.assignment]
                if missing:
                    raise ConfigError(f"assignment: no group for domains {missing}")

    def world_obj(self) -> World:
        return make_world(self.world)

    def resolved_assignment(self) -> FactorAssignment | None:
        if self.method != "fpda":
            return None
        if self.assignment is not None:
            return FactorAssignment.from_mapping(self.assignment, "custom")
        return grouping_from_factor(self.world_obj().domains, self.assignment_factor)

    def arch(self, input_shape, num_classes: int, num_domains: int) -> ArchConfig:
        a = {k: tuple(v) if isinstance(v, list) else v for k, v in self.architecture.items()}
        return ArchConfig(tuple(input_shape), num_classes, num_domains, **a)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["assignment"] is not None:
            d["assignment"] = {str(k): v for k, v in sorted(self.assignment.items())}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list).encode()).hexdigest()


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    if "method" not in raw:
        raise ConfigError("method: required key missing")
    kw = dict(raw)
    if "seeds" in kw:
        kw["seeds"] = tuple(int(s) for s in kw["seeds"])
    if "assignment" in kw:
        try:
            kw["assignment"] = {int(k): v for k, v in kw["assignment"].items()}
        except (AttributeError, ValueError):
            raise ConfigError("assignment: must map domain ids to group labels") from None
    if "pairs" in kw:
        kw["pairs"] = tuple((int(s), int(t)) for s, t in kw["pairs"])
    if "targets" in kw:
        kw["targets"] = tuple(int(t) for t in kw["targets"])
    if "world" in kw:
        try:
            make_world(kw["world"])
        except ValueError as e:
            raise ConfigError(f"world: {e}") from None
    return ExperimentConfig(**kw)


def parse_config(path: str | Path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(raw)


# ------------------------------------------------------------------ streams


def stream(cell_id: str, seed: int, name: str) -> np.random.Generator:
    key = hashlib.sha256(f"{cell_id}|{name}".encode()).digest()
    words = [int.from_bytes(key[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


_DATA_CACHE: dict[str, dict[int, tuple[Dataset, Dataset]]] = {}


def world_data(world_cfg: Mapping[str, Any] | None, data_seed: int) -> dict[int, tuple[Dataset, Dataset]]:
    """Train/test halves per domain; generated once per (world, data seed)."""
    key = json.dumps([world_cfg, data_seed], sort_keys=True, default=list)
    if key not in _DATA_CACHE:
        world = make_world(world_cfg)
        out = {}
        for spec in world.domains:
            ds = sample_domain(world, spec, world.n_per_class, stream(f"data-{spec.id}", data_seed, "world"))
            out[spec.id] = split_train_test(ds, world.chunk)
        _DATA_CACHE[key] = out
    return _DATA_CACHE[key]


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class Job:
    cell_id: str
    sources: tuple[int, ...]
    target: int
    method: str
    seed: int


def _domain_cycler(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def train_cell(cfg: ExperimentConfig, job: Job, data=None) -> float:
    """Train one model for one (cell, seed) and return its target test accuracy."""
    data = data if data is not None else world_data(cfg.world, cfg.data_seed)
    world = cfg.world_obj()
    method = job.method
    usv = method in ("da_usv", "fpda")
    # sources contribute all their images; the target's train half is the unsupervised pool
    pools: dict[int, Dataset] = {s: Dataset.concat(list(data[s])) for s in job.sources}
    if usv:
        pools[job.target] = data[job.target][0]
    participating = tuple(sorted(pools))
    index = {d: i for i, d in enumerate(participating)}
    test = data[job.target][1]

    images0 = next(iter(pools.values())).images
    arch = cfg.arch(images0.shape[1:], world.schema.num_classes, len(participating))
    model = build_model(arch, stream(job.cell_id, job.seed, "init"), stream(job.cell_id, job.seed, "domain-init"))

    assignment = None
    if method == "fpda":
        assignment = cfg.resolved_assignment().restrict(participating)

    # batch_size counts labeled samples per step, so every method takes the same
    # steps over the same source data; the unlabeled pool adds one source's share
    sources = tuple(sorted(job.sources))
    if cfg.batch_size < len(sources):
        raise ConfigError("batch_size: smaller than the number of source domains")
    share = {d: cfg.batch_size // len(sources) for d in sources}
    for d in sources[: cfg.batch_size % len(sources)]:
        share[d] += 1
    if usv:
        share[job.target] = cfg.batch_size // len(sources)
    n_source = sum(len(pools[s]) for s in job.sources)
    per_step = sum(share[s] for s in job.sources)
    steps_per_epoch = math.ceil(n_source / per_step)
    total = steps_per_epoch * cfg.epochs

    shuffle = stream(job.cell_id, job.seed, "shuffle")
    cyclers = {d: _domain_cycler(len(pools[d]), shuffle) for d in participating}
    dropout_rng = stream(job.cell_id, job.seed, "dropout")

    for step in range(total):
        idx = {d: np.fromiter((next(cyclers[d]) for _ in range(share[d])), dtype=np.int64) for d in participating}
        images = np.concatenate([pools[d].images[idx[d]] for d in participating]) - 0.5
        labels = np.concatenate(
            [pools[d].labels[idx[d]] if d != job.target else np.full(share[d], -1) for d in participating]
        )
        dom = np.concatenate([np.full(share[d], index[d]) for d in participating])
        batch = TrainBatch(images, labels, dom)
        mu = lr_schedule(step, total, cfg.mu0)
        if method == "nodA":
            losses = train_step(model, batch, None, mu, rng=dropout_rng)
        elif method == "fpda":
            losses = fpda_train_step(
                model, batch, AdaptationState(step, total), mu, assignment, rng=dropout_rng, mode=cfg.fpda_mode
            )
        else:
            losses = train_step(model, batch, AdaptationState(step, total), mu, rng=dropout_rng)
        if not math.isfinite(losses.label):
            raise FloatingPointError("label loss diverged")
    return evaluate_accuracy(model, Dataset(test.images - 0.5, test.labels, test.domains, "test"))


def _run_job(args) -> tuple[Job, float]:
    cfg, job = args
    try:
        acc = train_cell(cfg, job)
    except FloatingPointError as e:
        log.warning("cell %s seed %d failed: %s", job.cell_id, job.seed, e)
        acc = math.nan
    return job, acc


def run_jobs(cfg: ExperimentConfig, jobs: Sequence[Job]) -> dict[tuple[str, int], float]:
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_run_job, [(cfg, j) for j in jobs]))
    else:
        results = [_run_job((cfg, j)) for j in jobs]
    return {(j.cell_id, j.seed): acc for j, acc in results}


# ------------------------------------------------------------------ results


def aggregate_seeds(values: Iterable[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    v = np.sort(v)  # order-independent summation
    mean = float(v.mean())
    return mean, float(np.sqrt(np.mean((v - mean) ** 2)))


@dataclass(frozen=True)
class ResultRow:
    cell_id: str
    target: int
    method: str
    mean: float
    std: float
    per_seed: tuple[float, ...]
    n_failed: int = 0


@dataclass
class ResultTable:
    rows: list[ResultRow]

    def finite_means(self) -> np.ndarray:
        return np.array([r.mean for r in self.rows if math.isfinite(r.mean)])

    @property
    def avg(self) -> float:
        return float(self.finite_means().mean())

    @property
    def min(self) -> float:
        return float(self.finite_means().min())

    @property
    def max(self) -> float:
        return float(self.finite_means().max())

    @property
    def n_excluded(self) -> int:
        return sum(not math.isfinite(r.mean) for r in self.rows)

    def by_target(self) -> dict[int, ResultRow]:
        return {r.target: r for r in self.rows}


@dataclass
class OneToOneResult:
    matrix: TransferMatrix  # seed means, NaN diagonal
    std: np.ndarray
    per_seed: dict[tuple[int, int], tuple[float, ...]]
    method: str

    def cells(self) -> list[ResultRow]:
        ids = self.matrix.domain_ids
        rows = []
        for (s, t), accs in sorted(self.per_seed.items()):
            i, j = ids.index(s), ids.index(t)
            rows.append(
                ResultRow(pair_id(s, t), t, self.method, float(self.matrix.values[i, j]), float(self.std[i, j]), accs,
                          sum(not math.isfinite(a) for a in accs))
            )
        return rows


def pair_id(s: int, t: int) -> str:
    return f"s{s:03d}-t{t:03d}"


def loo_id(t: int) -> str:
    return f"loo-t{t:03d}"


def _summarise(accs: Sequence[float]) -> tuple[float, float, int]:
    finite = [a for a in accs if math.isfinite(a)]
    failed = len(accs) - len(finite)
    if not finite:
        return math.nan, math.nan, failed
    mean, std = aggregate_seeds(finite)
    return mean, std, failed


def run_one_to_one(cfg: ExperimentConfig) -> OneToOneResult:
    world = cfg.world_obj()
    ids = world.domain_ids
    if len(ids) < 2:
        raise ConfigError("world: one-to-one runs need at least two domains")
    pairs = cfg.pairs or tuple((s, t) for s in ids for t in ids if s != t)
    for s, t in pairs:
        if s == t or s not in ids or t not in ids:
            raise ConfigError(f"pairs: invalid pair {s}->{t}")
    jobs = [Job(pair_id(s, t), (s,), t, cfg.method, seed) for s, t in pairs for seed in cfg.seeds]
    res = run_jobs(cfg, jobs)
    m = len(ids)
    mean = np.full((m, m), np.nan)
    std = np.full((m, m), np.nan)
    per_seed = {}
    for s, t in pairs:
        accs = tuple(res[(pair_id(s, t), seed)] for seed in cfg.seeds)
        per_seed[(s, t)] = accs
        mu, sd, _ = _summarise(accs)
        mean[ids.index(s), ids.index(t)] = mu
        std[ids.index(s), ids.index(t)] = sd
    return OneToOneResult(TransferMatrix(ids, mean, "absent"), std, per_seed, cfg.method)


def run_leave_one_out(cfg: ExperimentConfig) -> ResultTable:
    world = cfg.world_obj()
    ids = world.domain_ids
    if len(ids) < 3:
        raise ConfigError("world: leave-one-out runs need at least three domains")
    targets = cfg.targets or ids
    jobs = [
        Job(loo_id(t), tuple(d for d in ids if d != t), t, cfg.method, seed) for t in targets for seed in cfg.seeds
    ]
    res = run_jobs(cfg, jobs)
    rows = []
    for t in targets:
        accs = tuple(res[(loo_id(t), seed)] for seed in cfg.seeds)
        mean, std, failed = _summarise(accs)
        rows.append(ResultRow(loo_id(t), t, cfg.method, mean, std, accs, failed))
    return ResultTable(sorted(rows, key=lambda r: r.cell_id))


# ---------------------------------------------------------------------- csv


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.4f}"


def emit_csv(result, path: str | Path) -> None:
    """Write a transfer matrix or a result table with sorted rows and 4 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(result, OneToOneResult):
            result = result.matrix
        if isinstance(result, TransferMatrix):
            w.writerow(["source", "target", "accuracy"])
            ids = result.domain_ids
            cells = sorted((pair_id(s, t), i, j) for i, s in enumerate(ids) for j, t in enumerate(ids) if i != j)
            for _, i, j in cells:
                w.writerow([ids[i], ids[j], _fmt(result.values[i, j])])
        elif isinstance(result, ResultTable):
            w.writerow(["cell_id", "target", "method", "mean", "std", "n_seeds", "n_failed"])
            for r in sorted(result.rows, key=lambda r: r.cell_id):
                w.writerow([r.cell_id, r.target, r.method, _fmt(r.mean), _fmt(r.std), len(r.per_seed), r.n_failed])
            method = result.rows[0].method if result.rows else ""
            w.writerow(["Avg", "", method, _fmt(result.avg), "", "", result.n_excluded])
            w.writerow(["Min", "", method, _fmt(result.min), "", "", result.n_excluded])
        else:
            raise TypeError(f"cannot emit {type(result).__name__}")


def load_matrix_csv(path: str | Path) -> TransferMatrix:
    from .factorworld import load_accuracy_fixture

    fx = load_accuracy_fixture(path, left_hand=())
    return TransferMatrix(fx.domain_ids, fx.matrix, "absent")


def write_manifest(cfg: ExperimentConfig, path: str | Path, command: str) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "schedules": {
            "lambda": f"2/(1+exp(-{LAMBDA_GAMMA:g}*p))-1",
            "learning_rate": f"mu0/(1+{LR_ALPHA:g}*p)^{LR_BETA:g}",
            "mu0": cfg.mu0,
        },
        "pca": {"ddof": PCA_DDOF, "n_components": PCA_COMPONENTS, "variance_base": "retained components"},
        "version": __version__,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")
