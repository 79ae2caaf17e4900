"""Training routines: normal training, DeCA, DeCA(p) (binary and multi-class) and baselines."""
from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import DecaConfig
from .errors import ConfigError, CoverageWarning, DivergenceError
from .losses import (LossBundle, bce_terms, deca_loss, deca_p_loss, deca_p_multiclass_loss,
                     supervised_loss, supervised_terms)
from .models import DifferentiableModel, ModelSpec, build_model
from .tasks import ClassificationTask, RankingTask

SCHEMA_VERSION = "1.0"


class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainerState:
    count: int = 0
    epoch: int = 0
    best_val: float = -np.inf
    best_epoch: int = -1
    stale: int = 0


@dataclass
class RunReport:
    method: str
    seeds: dict
    config: dict
    val_metric: str
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    final: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    extras: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)
    artifacts: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "seeds": self.seeds,
            "config": self.config,
            "val_metric": self.val_metric,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "final": self.final,
            "wall_clock": self.wall_clock,
            "extras": self.extras,
        }

    def metric_rows(self) -> list[tuple]:
        rows = []
        for h in self.history:
            rows.append((h["epoch"], "train", "loss", h["train_loss"]))
            rows.append((h["epoch"], "valid", self.val_metric, h["val_metric"]))
        for name, v in self.final.items():
            rows.append(("final", "test", name, v))
        return rows


def param_hash(model: DifferentiableModel) -> str:
    return hashlib.sha256(model.theta.tobytes()).hexdigest()


def derive_seed(seed: int, role: str) -> int:
    code = int.from_bytes(hashlib.sha256(role.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(seed), code]).generate_state(1)[0])


def binary_phase(count: int) -> str:
    return "DP" if count % 2 == 0 else "DN"


def focus_class(count: int, num_classes: int) -> int:
    return count % num_classes


def _fit(task, models: dict, trainable: list[str], step, cfg: DecaConfig, seed: int):
    """Shared minibatch loop with lambda ||theta||^2 on the target and early stopping.

    Returns (history, state); on exit every model holds its best-validation
    parameters.
    """
    opts = {r: Adam(models[r].num_params, cfg.lr) for r in trainable}
    rng = np.random.default_rng([int(seed), 1])
    st = TrainerState()
    snapshot = {r: m.theta.copy() for r, m in models.items()}
    history = []
    for epoch in range(cfg.epochs):
        st.epoch = epoch
        losses = []
        for batch in task.batches(rng, cfg.batch_size):
            bundle: LossBundle = step(batch, st)
            if cfg.reg:
                th = models["f"].theta
                bundle.value += cfg.reg * float(th @ th)
                bundle.grads["f"] = bundle.grads["f"] + 2.0 * cfg.reg * th
            if not np.isfinite(bundle.value) or not all(
                    np.all(np.isfinite(bundle.grads[r])) for r in trainable):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {st.count}")
            for r in trainable:
                opts[r].step(models[r].theta, bundle.grads[r])
            st.count += 1
            losses.append(bundle.value)
        val = float(task.validate(models["f"]))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_metric": val})
        if val > st.best_val:
            st.best_val, st.best_epoch, st.stale = val, epoch, 0
            snapshot = {r: m.theta.copy() for r, m in models.items()}
        else:
            st.stale += 1
            if st.stale >= cfg.patience:
                break
    for r, m in models.items():
        if not m.frozen:
            m.theta[...] = snapshot[r]
    return history, st


def _report(method, task, cfg, models, history, st, t0, seeds, **extras) -> RunReport:
    rep = RunReport(method, seeds, cfg.to_dict(), task.val_metric, history, st.best_epoch,
                    task.test_metrics(models["f"]), time.perf_counter() - t0, extras, models)
    return rep


def _check_mode(task, model, binary: bool):
    if binary and not model.binary:
        raise ConfigError("this trainer needs a binary target model")
    if not binary and model.binary:
        raise ConfigError("this trainer needs a multi-class target model")
    if isinstance(task, RankingTask) and not binary:
        raise ConfigError("ranking tasks are binary")


# -- normal training and baselines --------------------------------------------------

def train_normal(model: DifferentiableModel, task, cfg: DecaConfig, seed: int | None = None) -> RunReport:
    """Cross-entropy plus lambda ||theta||^2 with Adam; ``model`` ends at its best-validation state."""
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    step = lambda b, st: supervised_loss(model, (b.x, b.y), eps=cfg.eps)
    history, st = _fit(task, {"f": model}, ["f"], step, cfg, seed)
    return _report("normal", task, cfg, {"f": model}, history, st, t0, {"seed": seed})


def tce_drop_mask(losses: np.ndarray, is_positive: np.ndarray, drop_rate: float) -> np.ndarray:
    """Boolean mask of the floor(drop_rate * #positives) highest-loss positives."""
    pos = np.flatnonzero(is_positive)
    n_drop = int(np.floor(drop_rate * len(pos)))
    mask = np.zeros(len(losses), dtype=bool)
    if n_drop:
        order = np.argsort(-losses[pos], kind="stable")
        mask[pos[order[:n_drop]]] = True
    return mask


def tce_drop_rate(epoch: int, drop_max: float, warmup: int) -> float:
    return drop_max * min(1.0, epoch / warmup) if warmup > 0 else drop_max


def train_tce(model: DifferentiableModel, task, cfg: DecaConfig, drop_max: float | None = None,
              warmup: int | None = None, on_drop=None, seed: int | None = None) -> RunReport:
    """Truncated cross-entropy: zero weight on the highest-loss positives of each batch.

    The drop rate ramps linearly from 0 to ``drop_max`` over ``warmup`` epochs.
    ``on_drop(epoch, batch, mask)`` sees every batch's drop mask.
    """
    drop_max = cfg.tce_drop_max if drop_max is None else drop_max
    warmup = cfg.tce_warmup if warmup is None else warmup
    if not 0.0 <= drop_max < 1.0:
        raise ConfigError("drop_max must lie in [0, 1)")
    _check_mode(task, model, binary=True)
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()

    def step(b, st):
        rate = tce_drop_rate(st.epoch, drop_max, warmup)
        w = None
        if rate > 0:
            loss, _ = bce_terms(model.forward(b.x), b.y, cfg.eps)
            mask = tce_drop_mask(loss, b.y == 1, rate)
            if on_drop is not None:
                on_drop(st.epoch, b, mask)
            w = (~mask).astype(float)
        return supervised_loss(model, (b.x, b.y), weights=w, eps=cfg.eps)

    history, st = _fit(task, {"f": model}, ["f"], step, cfg, seed)
    return _report("tce", task, cfg, {"f": model}, history, st, t0, {"seed": seed},
                   drop_max=drop_max, warmup=warmup)


def trim_lowest_loss(losses: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Indices of the floor(keep_fraction * N) smallest losses (stable on ties), sorted."""
    n_keep = int(np.floor(keep_fraction * len(losses)))
    return np.sort(np.argsort(losses, kind="stable")[:n_keep])


def train_itlm(model: DifferentiableModel, task: ClassificationTask, cfg: DecaConfig,
               keep_fraction: float | None = None, rounds: int | None = None,
               seed: int | None = None) -> RunReport:
    """Iterative trimmed loss: retrain from the initial parameters on the lowest-loss subset.

    Round 0 uses the whole training set; each later round ranks every training
    example by its loss under the previous round's model.
    """
    keep_fraction = cfg.itlm_keep if keep_fraction is None else keep_fraction
    rounds = cfg.itlm_rounds if rounds is None else rounds
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError("keep_fraction must lie in (0, 1]")
    if not isinstance(task, ClassificationTask):
        raise ConfigError("ITLM is implemented for classification tasks")
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    init = model.theta.copy()
    full = task.train
    kept = np.arange(len(full))
    kept_log, loss_log, sizes = [], [], []
    for r in range(max(1, rounds)):
        if r > 0:
            losses, _ = supervised_terms(model, full.features, full.noisy_labels, cfg.eps)
            kept = trim_lowest_loss(losses, keep_fraction)
            loss_log.append(losses)
            if len(np.unique(full.noisy_labels[kept])) < full.num_classes:
                warnings.warn("ITLM kept subset does not cover every class", CoverageWarning,
                              stacklevel=2)
        kept_log.append(kept)
        sizes.append(int(len(kept)))
        model.theta[...] = init
        sub = task if len(kept) == len(full) else task.with_train_subset(kept)
        step = lambda b, st, sub=sub: supervised_loss(model, (b.x, b.y), eps=cfg.eps)
        history, st = _fit(sub, {"f": model}, ["f"], step, cfg, seed)
    noise_rate = [float(full.is_noisy[k].mean()) if len(k) else 0.0 for k in kept_log]
    rep = _report("itlm", task, cfg, {"f": model}, history, st, t0, {"seed": seed},
                  keep_fraction=keep_fraction, rounds=rounds, kept_sizes=sizes,
                  kept_noise_rate=noise_rate)
    rep.artifacts.update(itlm_kept=kept_log, itlm_losses=loss_log)
    return rep


class EnsembleModel:
    """Average of two structurally identical models."""

    def __init__(self, model_a, model_b):
        if model_a.kind != model_b.kind or model_a.theta.shape != model_b.theta.shape:
            raise ValueError("ensemble members must be structurally identical")
        self.a, self.b = model_a, model_b
        self.binary = model_a.binary
        self.kind = model_a.kind

    def forward(self, x):
        return ensemble_predict(self.a, self.b, x)

    def score_users(self, users):
        return 0.5 * (self.a.score_users(users) + self.b.score_users(users))


def ensemble_predict(model_a, model_b, inputs) -> np.ndarray:
    pa, pb = model_a.forward(inputs), model_b.forward(inputs)
    if pa.shape != pb.shape:
        raise ValueError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    # an average of two simplex rows is already a simplex row; no renormalization,
    # so identical members reproduce the member bit for bit
    return 0.5 * (pa + pb)


def train_ensemble(spec: ModelSpec, task, cfg: DecaConfig) -> RunReport:
    """Two normal runs with the prior and main seeds, evaluated as their average."""
    t0 = time.perf_counter()
    ma = build_model(spec.with_seed(cfg.prior_seed))
    ra = train_normal(ma, task, cfg, seed=cfg.prior_seed)
    mb = build_model(spec.with_seed(cfg.main_seed))
    rb = train_normal(mb, task, cfg, seed=cfg.main_seed)
    ens = EnsembleModel(ma, mb)
    st = TrainerState(best_epoch=ra.best_epoch)
    history = [{"epoch": a["epoch"], "train_loss": a["train_loss"], "val_metric": a["val_metric"]}
               for a in ra.history]
    rep = RunReport("ensemble", {"seed": cfg.prior_seed, "seed2": cfg.main_seed}, cfg.to_dict(),
                    task.val_metric, history, st.best_epoch, task.test_metrics(ens),
                    time.perf_counter() - t0, {"member_final": [ra.final, rb.final]},
                    {"f": ens, "a": ma, "b": mb})
    return rep


# -- DeCA ----------------------------------------------------------------------------

def _aux_spec(task, kind: str, seed: int, latent_dim: int = 32) -> ModelSpec:
    if isinstance(task, RankingTask):
        return ModelSpec(kind, latent_dim=latent_dim, num_users=task.num_users,
                         num_items=task.num_items, seed=seed)
    return ModelSpec("logistic", input_dim=task.input_dim, seed=seed)


def _spec_for_role(spec: ModelSpec | None, task, default_kind: str, seed: int, f_spec) -> ModelSpec:
    if spec is not None:
        return spec.with_seed(seed)
    return _aux_spec(task, default_kind, seed, f_spec.latent_dim)


def train_deca(f_spec: ModelSpec, task, cfg: DecaConfig, g_spec: ModelSpec | None = None,
               h_spec: ModelSpec | None = None, h_prime_spec: ModelSpec | None = None) -> RunReport:
    """Co-train target f, auxiliary g and channels h, h', alternating DP (even steps) and DN."""
    t0 = time.perf_counter()
    seed = cfg.seed
    f = build_model(f_spec.with_seed(seed))
    _check_mode(task, f, binary=True)
    g = build_model(_spec_for_role(g_spec, task, "MF", derive_seed(seed, "g"), f_spec))
    h = build_model(_spec_for_role(h_spec, task, "H-pairwise", derive_seed(seed, "h"), f_spec))
    hp = build_model(_spec_for_role(h_prime_spec or h_spec, task, "H-pairwise",
                                    derive_seed(seed, "h_prime"), f_spec))
    models = {"f": f, "g": g, "h": h, "h_prime": hp}
    schedule = []

    def step(b, st):
        phase = binary_phase(st.count)
        if len(schedule) < 16:
            schedule.append(phase)
        return deca_loss(f, g, h, hp, (b.x, b.y), cfg, phase)

    history, st = _fit(task, models, ["f", "g", "h", "h_prime"], step, cfg, seed)
    return _report("deca", task, cfg, models, history, st, t0, {"seed": seed}, schedule=schedule)


def pretrain_prior(spec: ModelSpec, task, cfg: DecaConfig):
    """Normal training of a structural twin with the prior seed; returns (frozen model, report)."""
    if cfg.prior_seed == cfg.main_seed:
        raise ConfigError("the prior seed and the main seed must differ")
    prior = build_model(spec.with_seed(cfg.prior_seed))
    rep = train_normal(prior, task, cfg, seed=cfg.prior_seed)
    prior.freeze()
    return prior, rep


def train_deca_p(f_spec: ModelSpec, task, cfg: DecaConfig, h_spec: ModelSpec | None = None,
                 h_prime_spec: ModelSpec | None = None, prior=None) -> RunReport:
    """Pretrain and freeze a prior twin, then alternate DP/DN steps of the DeCA(p) objective."""
    t0 = time.perf_counter()
    prior_rep = None
    if prior is None:
        prior, prior_rep = pretrain_prior(f_spec, task, cfg)
    seed = cfg.main_seed
    f = build_model(f_spec.with_seed(seed))
    _check_mode(task, f, binary=True)
    h = build_model(_spec_for_role(h_spec, task, "H-pairwise", derive_seed(seed, "h"), f_spec))
    hp = build_model(_spec_for_role(h_prime_spec or h_spec, task, "H-pairwise",
                                    derive_seed(seed, "h_prime"), f_spec))
    models = {"f": f, "h": h, "h_prime": hp, "prior": prior}
    prior_hash = param_hash(prior)
    schedule = []

    def step(b, st):
        phase = binary_phase(st.count)
        if len(schedule) < 16:
            schedule.append(phase)
        return deca_p_loss(f, prior, h, hp, (b.x, b.y), cfg, phase)

    history, st = _fit(task, models, ["f", "h", "h_prime"], step, cfg, seed)
    extras = {"schedule": schedule, "prior_hash": prior_hash,
              "prior_hash_after": param_hash(prior)}
    if prior_rep is not None:
        extras["prior_final"] = prior_rep.final
        extras["prior_best_val"] = max(h["val_metric"] for h in prior_rep.history)
    return _report("deca_p", task, cfg, models, history, st, t0,
                   {"seed": cfg.prior_seed, "seed2": seed}, **extras)


def train_deca_p_multiclass(f_spec: ModelSpec, task: ClassificationTask, cfg: DecaConfig,
                            h_spec: ModelSpec | None = None, prior=None) -> RunReport:
    """Multi-class DeCA(p): focus class k = step mod |C|; phase 1 for the first T_1 epochs."""
    t0 = time.perf_counter()
    prior_rep = None
    if prior is None:
        prior, prior_rep = pretrain_prior(f_spec, task, cfg)
    seed = cfg.main_seed
    f = build_model(f_spec.with_seed(seed))
    _check_mode(task, f, binary=False)
    C = f_spec.num_classes
    if h_spec is None:
        h_spec = ModelSpec("H-multiclass", widths=(64,), input_dim=f_spec.widths[-1], num_classes=C)
    h = build_model(h_spec.with_seed(derive_seed(seed, "h")))
    models = {"f": f, "h": h, "prior": prior}
    prior_hash = param_hash(prior)
    schedule = []
    T1 = cfg.phase1_epochs

    def step(b, st):
        k = focus_class(st.count, C)
        phase = 1 if st.epoch < T1 else 2
        if len(schedule) < 16:
            schedule.append(k)
        return deca_p_multiclass_loss(f, prior, h, (b.x, b.y), cfg, k, phase)

    history, st = _fit(task, models, ["f", "h"], step, cfg, seed)
    extras = {"schedule": schedule, "prior_hash": prior_hash,
              "prior_hash_after": param_hash(prior)}
    if prior_rep is not None:
        extras["prior_final"] = prior_rep.final
        extras["prior_best_val"] = max(h["val_metric"] for h in prior_rep.history)
    return _report("deca_p", task, cfg, models, history, st, t0,
                   {"seed": cfg.prior_seed, "seed2": seed}, **extras)
