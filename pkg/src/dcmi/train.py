"""Optimizer, training loop, AUC metrics, and multi-seed aggregation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Dataset, drs_weights, tokenize_dataset
from .encoder import MAX_LEN, Vocab, build_vocab
from .model import GROUPS, ROUTING, TAU_MIN, VARIANTS, DcmiModel, anneal_temperature

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class UndefinedAUC(ValueError):
    pass


class RoutingViolation(AssertionError):
    pass


@dataclass
class TrainConfig:
    variant: str = "dcmi"
    lam1: float = 50.0
    lam2: float = 6.0
    lr: float = 3e-5
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    drs: bool = True
    defer_fraction: float = 0.8
    dim: int = 64
    emb_dim: int | None = None
    hidden_dim: int | None = None
    tau_min: float = TAU_MIN
    dropout: float = 0.5
    mask_init_std: float = 0.0
    vocab_size: int = 5000
    max_len: int = MAX_LEN
    pin_masks: bool = False
    domain_mode: str = "record"
    probe_routing: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown training field(s): {', '.join(unknown)}")
        return cls(**raw)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant: unknown value {self.variant!r}, expected one of {', '.join(VARIANTS)}")
        for name in ("lam1", "lam2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr: must be > 0")
        if not 0 < self.tau_min <= 1:
            raise ValueError("tau_min: must lie in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout: must lie in [0, 1)")
        if not 0 <= self.defer_fraction <= 1:
            raise ValueError("defer_fraction: must lie in [0, 1]")
        for name, low in (("dim", 1), ("vocab_size", 2), ("max_len", 1)):
            if getattr(self, name) < low:
                raise ValueError(f"{name}: must be >= {low}")
        for name in ("emb_dim", "hidden_dim"):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.domain_mode not in ("record", "argmax"):
            raise ValueError("domain_mode: must be 'record' or 'argmax'")

    def effective_lambdas(self) -> tuple[float, float]:
        if self.variant == "dcmi":
            return self.lam1, self.lam2
        if self.variant == "dcmi_no_dom":
            return 0.0, self.lam2
        return 0.0, 0.0


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update. Parameters with no gradient are left alone."""
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
            state.steps[key] = 0
        state.steps[key] += 1
        t = state.steps[key]
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ----------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC needs at least one positive and one negative label")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    avg_rank = starts + (counts + 1) / 2.0
    rank_sum = avg_rank[inverse][pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference: fraction of (positive, negative) pairs ranked correctly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = scores[labels == 1]
    n = scores[labels != 1]
    if p.size == 0 or n.size == 0:
        raise UndefinedAUC("AUC needs at least one positive and one negative label")
    wins = (p[:, None] > n[None, :]).sum() + 0.5 * (p[:, None] == n[None, :]).sum()
    return float(wins / (p.size * n.size))


@dataclass
class EvalResult:
    per_domain: dict[str, float | None]
    macro: float | None
    micro: float | None
    skipped: list[str]


def domain_aucs(scores: np.ndarray, labels: np.ndarray, domains: np.ndarray, names: Sequence[str]) -> EvalResult:
    per_domain: dict[str, float | None] = {}
    skipped = []
    for j, name in enumerate(names):
        sel = domains == j
        if not sel.any():
            continue
        try:
            per_domain[name] = auc(scores[sel], labels[sel])
        except UndefinedAUC:
            per_domain[name] = None
            skipped.append(name)
    defined = [v for v in per_domain.values() if v is not None]
    macro = float(np.mean(defined)) if defined else None
    try:
        micro = auc(scores, labels)
    except UndefinedAUC:
        micro = None
    return EvalResult(per_domain, macro, micro, skipped)


def predict_scores(model: DcmiModel, ids, domains, domain_mode: str = "record", chunk: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(ids), chunk):
        proba = model.predict_proba(ids[start : start + chunk], domains[start : start + chunk], domain_mode)
        out.append(proba[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: DcmiModel, dataset: Dataset, vocab: Vocab, max_len: int = MAX_LEN, domain_mode: str = "record") -> EvalResult:
    """Per-domain, macro and micro AUC of the positive-class probability."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty split")
    ids = tokenize_dataset(dataset, vocab, max_len)
    scores = predict_scores(model, ids, dataset.domains, domain_mode)
    result = domain_aucs(scores, dataset.labels == 1, dataset.domains, dataset.domain_names)
    if result.macro is None:
        log.warning("macro AUC undefined: every domain has a single class in this split")
    return result


# ----------------------------------------------------------------------------
# training


def probe_routing(model: DcmiModel, ids, y, domains, lam1: float = 1.0, lam2: float = 1.0) -> dict[str, dict[str, float]]:
    """Backward each loss term alone and check untouched groups are exactly zero."""
    groups = model.parameter_groups()
    if not model.masked and (groups["domain_embeddings"] or groups["domain_head"]):
        raise RoutingViolation(f"{model.variant} must not carry domain parameters")
    params = groups.all()
    seen: dict[str, dict[str, float]] = {}
    for term in ("sup", "dom", "con"):
        if not model.masked and term != "sup":
            continue
        ad.zero_grad(params)
        terms = model.losses(ids, y, domains, train=False, with_dom=term == "dom", with_con=term == "con")
        loss = getattr(terms, term)
        if loss is None or not loss.requires_grad:
            continue
        loss.backward()
        norms = groups.grad_norms()
        seen[term] = norms
        for name in GROUPS:
            if name not in ROUTING[term] and norms[name] != 0.0:
                raise RoutingViolation(f"{term} loss reached the {name} group (|grad| = {norms[name]})")
    ad.zero_grad(params)
    return seen


@dataclass
class RunReport:
    variant: str
    seed: int
    config: dict
    per_domain_auc: dict[str, float | None] = field(default_factory=dict)
    macro_auc: float | None = None
    micro_auc: float | None = None
    skipped_domains: list[str] = field(default_factory=list)
    best_epoch: int = 0
    val_macro: list[float | None] = field(default_factory=list)
    epoch_losses: list[dict[str, float | None]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


@dataclass
class TrainResult:
    model: DcmiModel
    vocab: Vocab
    report: RunReport
    batch_losses: list[dict[str, float]]


def _nan_to_none(x: float) -> float | None:
    return None if x is None or math.isnan(x) else x


def _epoch_batches(config: TrainConfig, labels: np.ndarray, epoch: int, rng: np.random.Generator) -> list[np.ndarray]:
    n = labels.size
    if config.drs and epoch >= config.defer_fraction * config.epochs:
        order = rng.choice(n, size=n, replace=True, p=drs_weights(labels, epoch, config.epochs, config.defer_fraction))
    else:
        order = rng.permutation(n)
    return [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]


def train(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    test_set: Dataset | None = None,
    vocab: Vocab | None = None,
) -> TrainResult:
    """Train one variant and return the best-validation-epoch model.

    Per batch: anneal the mask temperature, build the joint objective, one
    backward (the domain-embedding gradient is compensated on the way in),
    then an Adam step. If ``test_set`` is given the report carries test AUCs.
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("empty training split")
    vocab = vocab or build_vocab(train_set.texts, config.vocab_size)
    lam1, lam2 = config.effective_lambdas()
    model = DcmiModel(
        config.variant,
        len(vocab),
        train_set.n_classes,
        train_set.n_domains,
        dim=config.dim,
        seed=config.seed,
        dropout=config.dropout,
        tau_min=config.tau_min,
        mask_init_std=config.mask_init_std,
        pin_masks=config.pin_masks,
        emb_dim=config.emb_dim,
        hidden_dim=config.hidden_dim,
    )
    params = model.parameters()
    state = AdamState()
    shuffle_seed, dropout_seed = np.random.SeedSequence([config.seed, 7]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    ids = tokenize_dataset(train_set, vocab, config.max_len)
    labels = train_set.labels
    domains = train_set.domains
    report = RunReport(config.variant, config.seed, asdict(config))
    batch_losses: list[dict[str, float]] = []
    best_score, best_state = -math.inf, model.state()

    for epoch in range(config.epochs):
        batches = _epoch_batches(config, labels, epoch, shuffle_rng)
        sums = {"sup": 0.0, "dom": 0.0, "con": 0.0}
        for b, idx in enumerate(batches):
            batch_ids = [ids[i] for i in idx]
            tau = anneal_temperature(b, len(batches), config.tau_min)
            model.set_temperature(tau)
            if config.probe_routing and b == 0:
                probe_routing(model, batch_ids, labels[idx], domains[idx])
            ad.zero_grad(params)
            try:
                terms = model.losses(
                    batch_ids, labels[idx], domains[idx], lam1=lam1, lam2=lam2,
                    train=True, rng=dropout_rng,
                    with_dom=lam1 > 0, with_con=lam2 > 0,
                )
                terms.total.backward()
                adam_step(params, [p.grad for p in params], state, config.lr)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{config.variant} seed {config.seed}: epoch {epoch} batch {b}: {exc}") from exc
            values = terms.values()
            batch_losses.append(values)
            for k in sums:
                sums[k] += values[k]
        report.epoch_losses.append({k: _nan_to_none(v / len(batches)) for k, v in sums.items()})

        if val_set is not None and len(val_set):
            res = evaluate(model, val_set, vocab, config.max_len, config.domain_mode)
            score = res.macro if res.macro is not None else res.micro
        else:
            score = None
        report.val_macro.append(score)
        # without a usable validation score the latest epoch wins
        if score is None or score > best_score:
            best_score = -math.inf if score is None else score
            best_state = model.state()
            report.best_epoch = epoch
        log.debug("%s seed %d epoch %d: %s val=%s", config.variant, config.seed, epoch, report.epoch_losses[-1], score)

    model.load_state(best_state)
    model.set_temperature(config.tau_min)
    if test_set is not None:
        res = evaluate(model, test_set, vocab, config.max_len, config.domain_mode)
        report.per_domain_auc = res.per_domain
        report.macro_auc = res.macro
        report.micro_auc = res.micro
        report.skipped_domains = res.skipped
    return TrainResult(model, vocab, report, batch_losses)


# ----------------------------------------------------------------------------
# seeds


@dataclass
class Aggregate:
    variant: str
    seeds: list[int]
    reports: list[RunReport]
    partial: bool = False
    errors: list[str] = field(default_factory=list)

    def metric(self, name: str) -> tuple[float | None, float | None]:
        vals = [getattr(r, name) for r in self.reports if getattr(r, name) is not None]
        return mean_std(vals)

    def domain_metric(self, domain: str) -> tuple[float | None, float | None]:
        vals = [r.per_domain_auc.get(domain) for r in self.reports]
        return mean_std([v for v in vals if v is not None])

    def summary(self) -> dict:
        macro, macro_sd = self.metric("macro_auc")
        micro, micro_sd = self.metric("micro_auc")
        return {
            "variant": self.variant,
            "seeds": self.seeds,
            "macro_auc_mean": macro,
            "macro_auc_std": macro_sd,
            "micro_auc_mean": micro,
            "micro_auc_std": micro_sd,
            "partial": self.partial,
            "errors": self.errors,
        }


def mean_std(values: Sequence[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def seed_list(base_seed: int, n_seeds: int) -> list[int]:
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    return [base_seed + k for k in range(n_seeds)]


def run_seeds(
    config: TrainConfig, train_set: Dataset, val_set: Dataset | None, test_set: Dataset, n_seeds: int = 5
) -> Aggregate:
    seeds = seed_list(config.seed, n_seeds)
    agg = Aggregate(config.variant, seeds, [])
    for seed in seeds:
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        try:
            agg.reports.append(train(cfg, train_set, val_set, test_set).report)
        except (TrainingDiverged, ValueError) as exc:
            agg.partial = True
            agg.errors.append(f"seed {seed}: {exc}")
            log.error("run aborted: %s", exc)
    return agg


def _cell(mean: float | None, sd: float | None) -> str:
    if mean is None:
        return "n/a"
    return f"{100 * mean:.1f} ± {100 * sd:.1f}"


def aggregate_table(aggregates: Sequence[Aggregate], domain_names: Sequence[str], title: str | None = None) -> str:
    """Markdown table: one row per domain plus Macro/Micro, one column per variant (AUC x 100)."""
    header = ["Domain"] + [a.variant for a in aggregates]
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for name in domain_names:
        lines.append("| " + " | ".join([name] + [_cell(*a.domain_metric(name)) for a in aggregates]) + " |")
    lines.append("| **Macro** | " + " | ".join(_cell(*a.metric("macro_auc")) for a in aggregates) + " |")
    lines.append("| **Micro** | " + " | ".join(_cell(*a.metric("micro_auc")) for a in aggregates) + " |")
    partial = [a.variant for a in aggregates if a.partial]
    if partial:
        lines += ["", "Partial results (some seeds aborted): " + ", ".join(partial)]
    return "\n".join(lines) + "\n"
