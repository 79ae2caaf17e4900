"""Experiment orchestration: JSON configs, grid expansion, persisted reports, comparisons.

A config is one JSON document. Any array on a scalar field becomes a grid
axis and the grid is the Cartesian product of all axes; fields that are lists
by nature (seeds, metric_ks, widths, split ratios, c_per_class) never expand.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import DecaConfig
from .data import (SplitSpec, dataset_from_json, dataset_to_json, gen_multiclass_blobs,
                   gen_planted_implicit, load_movielens_100k, split)
from .errors import ComparisonError, ConfigError, SchemaError
from .metrics import disagreement_binary, disagreement_multiclass, rating_bucket_probability
from .models import ModelSpec, build_model, checkpoint_dict
from .tasks import ClassificationTask, RankingTask
from .trainers import (SCHEMA_VERSION, train_deca, train_deca_p, train_deca_p_multiclass,
                       train_ensemble, train_itlm, train_normal, train_tce)

TASKS = ("binary-ranking", "binary-generic", "multi-class")
TRAINERS = ("normal", "deca", "deca_p", "tce", "itlm", "ensemble")
LIST_KEYS = {"seeds", "metric_ks", "widths", "ratios", "c_per_class"}
GAP = "NA"


@dataclass
class ExperimentConfig:
    task: str
    dataset: dict
    trainer: str = "normal"
    model: dict = field(default_factory=dict)
    aux_models: dict = field(default_factory=dict)
    deca: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    metric_ks: list = field(default_factory=lambda: [5, 20])
    eval_negatives: int | None = None  # None ranks every non-train item
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    name: str = "experiment"
    save_checkpoints: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seed list has duplicates")
        if grid_axes(asdict(self)):
            return  # a grid template; cells are validated after expansion
        if self.trainer not in TRAINERS:
            raise ConfigError(f"unknown trainer {self.trainer!r}; expected one of {TRAINERS}")
        binary = self.task != "multi-class"
        if self.trainer in ("deca", "tce") and not binary:
            raise ConfigError(f"trainer {self.trainer} needs a binary task")
        if self.trainer == "itlm" and self.task == "binary-ranking":
            raise ConfigError("trainer itlm is implemented for classification tasks")
        if "generator" not in self.dataset:
            raise ConfigError("dataset spec needs a 'generator' (planted, blobs, movielens, file)")
        gen = self.dataset["generator"]
        ranking_data = gen in ("planted", "movielens")
        if gen not in ("planted", "blobs", "movielens", "file"):
            raise ConfigError(f"unknown generator {gen!r}")
        if gen != "file" and ranking_data != (self.task == "binary-ranking"):
            raise ConfigError(f"generator {gen} does not produce {self.task} data")
        for k in self.metric_ks:
            if int(k) < 1:
                raise ConfigError("metric Ks must be positive")
        if self.eval_negatives is not None and int(self.eval_negatives) < 1:
            raise ConfigError("eval_negatives must be positive or null")
        self.deca_config(self.seeds[0])
        SplitSpec(**self._split_kwargs())

    def _split_kwargs(self) -> dict:
        d = dict(self.split)
        if "ratios" in d:
            d["ratios"] = tuple(d["ratios"])
        return d

    def deca_config(self, seed: int) -> DecaConfig:
        d = dict(self.deca)
        if "seed" in d:
            raise ConfigError("set seeds through the top-level 'seeds' list")
        if "c_per_class" in d and d["c_per_class"] is not None:
            d["c_per_class"] = tuple(tuple(p) for p in d["c_per_class"])
        return DecaConfig.from_dict({**d, "seed": int(seed)})

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        if "task" not in d or "dataset" not in d:
            raise ConfigError("experiment config needs 'task' and 'dataset'")
        return cls(**copy.deepcopy(d))

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ExperimentConfig.from_dict(raw)


# -- grids --------------------------------------------------------------------------

def grid_axes(d: dict, prefix: str = "") -> list[tuple[str, list]]:
    """(dotted path, values) for every array found on a scalar field."""
    axes = []
    for key, v in d.items():
        path = f"{prefix}{key}"
        if key in LIST_KEYS:
            continue
        if isinstance(v, dict):
            axes.extend(grid_axes(v, path + "."))
        elif isinstance(v, list):
            if not v:
                raise ConfigError(f"grid axis {path} is empty")
            axes.append((path, list(v)))
    return axes


def _set_path(d: dict, path: str, value):
    keys = path.split(".")
    for k in keys[:-1]:
        d = d[k]
    d[keys[-1]] = value


def expand_grid(config: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian product of all grid axes as (assignment, concrete config) pairs."""
    base = config.to_dict()
    axes = grid_axes(base)
    cells = []
    for values in itertools.product(*(vals for _, vals in axes)):
        d = copy.deepcopy(base)
        assignment = {}
        for (path, _), v in zip(axes, values):
            _set_path(d, path, v)
            assignment[path] = v
        cells.append((assignment, ExperimentConfig.from_dict(d)))
    return cells


def cell_id(assignment: dict) -> str:
    if not assignment:
        return "base"
    parts = [f"{p.split('.')[-1]}={v}" for p, v in assignment.items()]
    label = "_".join(parts).replace("/", "-")
    return label if len(label) <= 60 else hashlib.sha1(label.encode()).hexdigest()[:12]


# -- data and models ----------------------------------------------------------------

def _data_seed(spec: dict, seed: int) -> int:
    return int(spec.get("seed", seed))


def build_dataset(spec: dict, seed: int):
    """The full dataset described by ``spec`` (generator arguments or a file)."""
    spec = dict(spec)
    gen = spec.pop("generator")
    spec.pop("test_per_class", None)
    s = _data_seed(spec, seed)
    spec.pop("seed", None)
    if gen == "planted":
        return gen_planted_implicit(spec.pop("num_users"), spec.pop("num_items"),
                                    spec.pop("latent_dim", 8), spec.pop("noise_pos", 0.0),
                                    spec.pop("noise_neg", 0.0), s, **spec)
    if gen == "blobs":
        return gen_multiclass_blobs(spec["num_classes"], spec["per_class"], spec["dim"],
                                    spec.get("spread", 1.0), spec.get("noise_ratio", 0.0), s)
    if gen == "movielens":
        return load_movielens_100k(spec["path"])
    if gen == "file":
        return dataset_from_json(Path(spec["path"]).read_text())
    raise ConfigError(f"unknown generator {gen!r}")


def build_task(config: ExperimentConfig, seed: int):
    """Dataset, split and task wrapper for one seed.

    For blobs, ``test_per_class`` draws a separate clean test sample around the
    same class centres, and the noisy data are split into train/valid only.
    """
    ds = build_dataset(config.dataset, seed)
    s = _data_seed(config.dataset, seed)
    spec = SplitSpec(**config._split_kwargs())
    if config.task == "binary-ranking":
        train, valid, test = split(ds, spec, s)
        cfg = config.deca_config(seed)
        return RankingTask(train, valid, test, ks=config.metric_ks, val_k=cfg.val_k,
                           sampler=cfg.sampler, eval_negatives=config.eval_negatives), ds
    extra = config.dataset.get("test_per_class")
    if extra:
        d = config.dataset
        test = gen_multiclass_blobs(d["num_classes"], extra, d["dim"], d.get("spread", 1.0),
                                    0.0, s + 7919, center_seed=s)
        r = spec.ratios
        spec = SplitSpec(spec.mode, (r[0] / (r[0] + r[1]), r[1] / (r[0] + r[1]), 0.0),
                         spec.clean_test_rule)
        train, valid, _ = split(ds, spec, s)
    else:
        train, valid, test = split(ds, spec, s)
    return ClassificationTask(train, valid, test), ds


def model_spec(config: ExperimentConfig, task, role_dict: dict | None = None) -> ModelSpec:
    """Target-model spec with data-dependent sizes filled in."""
    d = dict(config.model if role_dict is None else role_dict)
    if isinstance(task, RankingTask):
        d.setdefault("kind", "MF")
        d.update(num_users=task.num_users, num_items=task.num_items)
    else:
        multi = config.task == "multi-class"
        d.setdefault("kind", "MLP-classifier" if multi else "MLP-binary")
        d.setdefault("widths", [64])
        d.update(input_dim=task.input_dim, num_classes=task.num_classes)
    return ModelSpec.from_dict(d)


def dataset_fingerprint(ds) -> str:
    return hashlib.sha256(dataset_to_json(ds).encode()).hexdigest()[:16]


def dataset_key(spec: dict) -> str:
    """Dataset definition without its seed: reports with equal keys are comparable."""
    d = {k: v for k, v in spec.items() if k != "seed"}
    return json.dumps(d, sort_keys=True)


# -- running ------------------------------------------------------------------------

def run_trainer(config: ExperimentConfig, task, cfg: DecaConfig):
    spec = model_spec(config, task)
    aux = {role: model_spec(config, task, d) for role, d in config.aux_models.items()}
    t = config.trainer
    if t == "normal":
        return train_normal(build_model(spec.with_seed(cfg.seed)), task, cfg)
    if t == "tce":
        return train_tce(build_model(spec.with_seed(cfg.seed)), task, cfg)
    if t == "itlm":
        return train_itlm(build_model(spec.with_seed(cfg.seed)), task, cfg)
    if t == "ensemble":
        return train_ensemble(spec, task, cfg)
    if t == "deca":
        return train_deca(spec, task, cfg, aux.get("g"), aux.get("h"), aux.get("h_prime"))
    if t == "deca_p":
        if config.task == "multi-class":
            return train_deca_p_multiclass(spec, task, cfg, aux.get("h"))
        return train_deca_p(spec, task, cfg, aux.get("h"), aux.get("h_prime"))
    raise ConfigError(f"unknown trainer {t!r}")


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "metric", "value"])
    for r in rows:
        w.writerow([r[0], r[1], r[2], repr(float(r[3]))])
    return buf.getvalue()


def run_single(config: ExperimentConfig, seed: int, assignment: dict | None = None):
    """Train one seed; returns (report dict, metrics CSV text, trained report object)."""
    task, ds = build_task(config, seed)
    cfg = config.deca_config(seed)
    rep = run_trainer(config, task, cfg)
    d = rep.to_dict()
    d["experiment"] = {
        "name": config.name, "task": config.task, "trainer": config.trainer,
        "cell": cell_id(assignment or {}), "grid": assignment or {}, "seed": int(seed),
        "dataset": config.dataset, "dataset_key": dataset_key(config.dataset),
        "dataset_hash": dataset_fingerprint(ds), "model": asdict(model_spec(config, task)),
        "metric_ks": list(config.metric_ks), "eval_negatives": config.eval_negatives,
    }
    return d, metrics_csv(rep.metric_rows()), rep


def _cell_job(args):
    cfg_dict, seed, assignment = args
    config = ExperimentConfig.from_dict(cfg_dict)
    d, text, rep = run_single(config, seed, assignment)
    ckpt = None
    if config.save_checkpoints and hasattr(rep.models["f"], "spec"):  # ensembles have no single model
        ckpt = checkpoint_dict(rep.models["f"])
    return d, text, ckpt


def run_experiment(config: ExperimentConfig, out: str | Path | None = None,
                   workers: int = 1, seed_override: int | None = None) -> list[Path]:
    """Run every grid cell for every seed and persist the results.

    Writes ``<out>/<cell>/<trainer>_seed<s>.json`` and ``..._metrics.csv`` per
    run, plus ``plot_<metric>.csv`` (x, series, y) with seed medians per cell
    and a ``manifest.json``. Returns the report paths.
    """
    if seed_override is not None:
        config = ExperimentConfig.from_dict({**config.to_dict(), "seeds": [int(seed_override)]})
    out = Path(out if out is not None else config.out)
    cells = expand_grid(config)
    jobs = [(c.to_dict(), s, a) for a, c in cells for s in c.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]

    paths = []
    for (cfg_dict, seed, assignment), (d, text, ckpt) in zip(jobs, results):
        cdir = out / cell_id(assignment)
        cdir.mkdir(parents=True, exist_ok=True)
        stem = f"{cfg_dict['trainer']}_seed{seed}"
        p = cdir / f"{stem}.json"
        p.write_text(json.dumps(d, indent=1, sort_keys=True))
        (cdir / f"{stem}_metrics.csv").write_text(text)
        if ckpt is not None:
            (cdir / f"{stem}_f.json").write_text(json.dumps(ckpt))
        paths.append(p)
    axes = grid_axes(config.to_dict())
    write_plot_data(out, [d for d, _, _ in results], axes)
    manifest = {"schema_version": SCHEMA_VERSION, "config": config.to_dict(),
                "reports": [str(p.relative_to(out)) for p in paths]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return paths


def write_plot_data(out: Path, reports: list[dict], axes) -> list[Path]:
    """One CSV per final metric: x = first grid axis, series = trainer + other axes."""
    x_axis = next((p for p, _ in axes if p != "trainer"), None)
    groups: dict[tuple, dict[str, list[float]]] = {}
    for d in reports:
        grid = d["experiment"]["grid"]
        x = grid.get(x_axis, "") if x_axis else ""
        rest = [f"{p.split('.')[-1]}={v}" for p, v in grid.items() if p not in (x_axis, "trainer")]
        series = "/".join([d["experiment"]["trainer"]] + rest)
        for m, v in d["final"].items():
            groups.setdefault((m, series, x), {}).setdefault("v", []).append(v)
    written = []
    for metric in sorted({k[0] for k in groups}):
        rows = sorted((k[2], k[1], float(np.median(g["v"])))
                      for k, g in groups.items() if k[0] == metric)
        p = out / f"plot_{metric.replace('@', '_at_')}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "series", "y"])
            w.writerows(rows)
        written.append(p)
    return written


# -- reports and comparison ---------------------------------------------------------

def read_report(path) -> dict:
    """Load a report JSON, rejecting unknown major schema versions."""
    d = json.loads(Path(path).read_text())
    version = str(d.get("schema_version", ""))
    major = version.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise SchemaError(f"{path}: unsupported report schema version {version!r}")
    return d


@dataclass
class ComparisonRow:
    metric: str
    baseline: float | str
    challenger: float | str
    delta: float | str
    winner: str


def _method_id(d: dict) -> str:
    return d.get("experiment", {}).get("trainer", d["method"])


def compare_runs(paths, baseline: str, challenger: str) -> list[ComparisonRow]:
    """Per-metric medians over seeds for two methods and the challenger-minus-baseline delta.

    Methods are matched by trainer id. A metric missing from either side is
    reported with the gap marker instead of being dropped.
    """
    reports = [read_report(p) for p in paths]
    side = {baseline: [d for d in reports if _method_id(d) == baseline],
            challenger: [d for d in reports if _method_id(d) == challenger]}
    for name, rs in side.items():
        if not rs:
            raise ComparisonError(f"no reports for method {name!r}")
    keys = {name: {d.get("experiment", {}).get("dataset_key") for d in rs}
            for name, rs in side.items()}
    if keys[baseline] != keys[challenger]:
        raise ComparisonError("reports were produced on different datasets")
    protocols = {d.get("experiment", {}).get("eval_negatives") for rs in side.values() for d in rs}
    if len(protocols) > 1:
        raise ComparisonError("reports rank different candidate sets (eval_negatives differs)")
    hashes = {}
    for d in side[baseline] + side[challenger]:
        e = d.get("experiment", {})
        k = (e.get("dataset_key"), e.get("seed"))
        if hashes.setdefault(k, e.get("dataset_hash")) != e.get("dataset_hash"):
            raise ComparisonError(f"dataset content differs for seed {e.get('seed')}")
    metrics = sorted({m for rs in side.values() for d in rs for m in d["final"]})
    rows = []
    for m in metrics:
        vals = {}
        for name, rs in side.items():
            got = [d["final"][m] for d in rs if m in d["final"]]
            vals[name] = float(np.median(got)) if len(got) == len(rs) else GAP
        b, c = vals[baseline], vals[challenger]
        if GAP in (b, c):
            rows.append(ComparisonRow(m, b, c, GAP, GAP))
            continue
        delta = c - b
        winner = "tie" if delta == 0 else (challenger if delta > 0 else baseline)
        rows.append(ComparisonRow(m, b, c, delta, winner))
    return rows


def comparison_csv(rows: list[ComparisonRow], baseline: str, challenger: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", f"median_{baseline}", f"median_{challenger}", "delta", "winner"])
    for r in rows:
        w.writerow([r.metric, r.baseline, r.challenger, r.delta, r.winner])
    return buf.getvalue()


# -- diagnostics --------------------------------------------------------------------

def _train_normal_pair(config: ExperimentConfig, task, seed: int):
    spec = model_spec(config, task)
    cfg = config.deca_config(seed)
    a = build_model(spec.with_seed(cfg.prior_seed))
    train_normal(a, task, cfg, seed=cfg.prior_seed)
    b = build_model(spec.with_seed(cfg.main_seed))
    train_normal(b, task, cfg, seed=cfg.main_seed)
    return a, b


def diagnose_disagreement(config: ExperimentConfig, out=None, seed_override=None) -> list[dict]:
    """Two normally trained models per seed; prediction differences on clean vs noisy training data.

    Ranking data use the observed training pairs split by hidden truth;
    classification data use the training examples split by label corruption.
    """
    seeds = [seed_override] if seed_override is not None else config.seeds
    rows = []
    for seed in seeds:
        task, _ = build_task(config, seed)
        a, b = _train_normal_pair(config, task, seed)
        tr = task.train
        if isinstance(task, RankingTask):
            if tr.true_labels is None:
                raise ConfigError("disagreement diagnosis needs hidden true labels")
            rep = disagreement_binary(a, b, tr.pairs[tr.true_labels == 1],
                                      tr.pairs[tr.true_labels == 0])
        elif config.task == "multi-class":
            rep = disagreement_multiclass(a, b, tr)
        else:
            x = tr.features
            rep = disagreement_binary(a, b, x[~tr.is_noisy], x[tr.is_noisy])
        rows.append({"seed": int(seed), "mean_diff_clean": rep.mean_diff_clean,
                     "mean_diff_noisy": rep.mean_diff_noisy,
                     "agreement_clean": rep.agreement_clean,
                     "agreement_noisy": rep.agreement_noisy})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "disagreement.json").write_text(json.dumps(
            {"schema_version": SCHEMA_VERSION, "config": config.to_dict(), "runs": rows},
            indent=1, sort_keys=True))
        with (out / "plot_disagreement.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "series", "y"])
            for r in rows:
                w.writerow([r["seed"], "clean", r["mean_diff_clean"]])
                w.writerow([r["seed"], "noisy", r["mean_diff_noisy"]])
    return rows


def rating_study(config: ExperimentConfig, out=None, seed_override=None) -> list[dict]:
    """Mean real-positive probability per rating bucket of the training interactions.

    DeCA and DeCA(p) use the co-trained channel models in the Bayes formula;
    every other trainer uses the target model's output.
    """
    if config.task != "binary-ranking":
        raise ConfigError("the rating study needs rated implicit data")
    seeds = [seed_override] if seed_override is not None else config.seeds
    rows = []
    for seed in seeds:
        task, _ = build_task(config, seed)
        rep = run_trainer(config, task, config.deca_config(seed))
        m = rep.models
        h, hp = (m["h"], m["h_prime"]) if "h_prime" in m else (None, None)
        st = rating_bucket_probability(m["f"], task.train, h, hp)
        rows.append({"seed": int(seed), "means": st.means, "counts": st.counts,
                     "missing": st.missing, "spearman": st.spearman()})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rating_study.json").write_text(json.dumps(
            {"schema_version": SCHEMA_VERSION, "config": config.to_dict(), "runs": rows},
            indent=1, sort_keys=True))
        with (out / "plot_rating_study.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "series", "y"])
            for r in rows:
                for rating, v in sorted(r["means"].items()):
                    w.writerow([rating, f"{config.trainer}_seed{r['seed']}", v])
    return rows


def generate_data(config: ExperimentConfig, out, seed_override=None) -> list[Path]:
    seeds = [seed_override] if seed_override is not None else config.seeds
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in seeds:
        ds = build_dataset(config.dataset, seed)
        p = out / f"dataset_seed{seed}.json"
        p.write_text(dataset_to_json(ds))
        paths.append(p)
    return paths
