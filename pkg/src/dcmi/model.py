"""Domain-aware masking, soft domain assignment, and contrastive transfer."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderParams, encode, init_encoder

TAU_MIN = 0.0025
COSH_CLAMP = 50.0

VARIANTS = ("dcmi", "dcmi_no_dom", "dcmi_no_dom_no_con", "d_al", "mtl")
MASKED_VARIANTS = frozenset({"dcmi", "dcmi_no_dom", "dcmi_no_dom_no_con"})

GROUPS = ("body", "domain_embeddings", "supervised_head", "domain_head")
# which parameter groups each loss term is allowed to update
ROUTING = {
    "sup": frozenset({"body", "domain_embeddings", "supervised_head"}),
    "dom": frozenset({"domain_head"}),
    "con": frozenset({"body", "domain_embeddings"}),
}


# ----------------------------------------------------------------------------
# masks and temperature


def domain_mask(v, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return ad.sigmoid(ad.as_tensor(v) * (1.0 / tau))


def mask_representation(h, m) -> Tensor:
    h, m = ad.as_tensor(h), ad.as_tensor(m)
    if h.shape[-1] != m.shape[-1]:
        raise ValueError(f"representation/mask width mismatch: {h.shape} vs {m.shape}")
    return h * m


def anneal_temperature(batch_index: int, batches_per_epoch: int, tau_min: float = TAU_MIN) -> float:
    """Linear schedule from 1 at the first batch of an epoch to ``tau_min`` at the last."""
    if batches_per_epoch < 2:
        return tau_min
    if not 0 <= batch_index < batches_per_epoch:
        raise ValueError(f"batch_index {batch_index} outside [0, {batches_per_epoch})")
    return 1.0 - (1.0 - tau_min) * batch_index / (batches_per_epoch - 1)


def _log_cosh_plus_one(x: np.ndarray) -> np.ndarray:
    # log(cosh x + 1) = |x| + 2 log1p(exp(-|x|)) - log 2
    ax = np.abs(x)
    return ax + 2.0 * np.log1p(np.exp(-ax)) - math.log(2.0)


def compensation_multiplier(
    v: np.ndarray, tau: float, tau_min: float = TAU_MIN
) -> tuple[np.ndarray, int]:
    """Elementwise gradient rescaling for domain embeddings.

    Returns ``tau (cosh(v/tau) + 1) / (tau_min (cosh(v) + 1))`` together with
    the number of entries whose cosh argument had to be clamped to +-50.
    """
    if tau <= 0 or tau_min <= 0:
        raise ValueError("tau and tau_min must be positive")
    v = np.asarray(v, dtype=np.float64)
    scaled = v / tau
    n_clamped = int(np.count_nonzero(np.abs(scaled) > COSH_CLAMP) + np.count_nonzero(np.abs(v) > COSH_CLAMP))
    scaled = np.clip(scaled, -COSH_CLAMP, COSH_CLAMP)
    raw = np.clip(v, -COSH_CLAMP, COSH_CLAMP)
    log_ratio = math.log(tau / tau_min) + _log_cosh_plus_one(scaled) - _log_cosh_plus_one(raw)
    return np.exp(log_ratio), n_clamped


def compensate_gradient(g: np.ndarray, v: np.ndarray, tau: float, tau_min: float = TAU_MIN) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != np.shape(v):
        raise ValueError("gradient and embedding shapes differ")
    multiplier, _ = compensation_multiplier(v, tau, tau_min)
    return multiplier * g


class Compensation:
    """Gradient transform registered on the domain-embedding table.

    ``tau`` is updated by the trainer each batch; clamp events are counted.
    """

    def __init__(self, table: Tensor, tau_min: float = TAU_MIN):
        self.table = table
        self.tau = 1.0
        self.tau_min = tau_min
        self.clamped = 0

    def __call__(self, g: np.ndarray) -> np.ndarray:
        multiplier, n = compensation_multiplier(self.table.data, self.tau, self.tau_min)
        self.clamped += n
        return multiplier * g


# ----------------------------------------------------------------------------
# domain classifier, augmented view, losses


def domain_logits(h, w: Tensor, b: Tensor) -> Tensor:
    return ad.stop_gradient(h) @ w + b


def domain_scores(h, w: Tensor, b: Tensor) -> Tensor:
    """Per-domain relevance in (0, 1); gradients reach only ``w`` and ``b``."""
    return ad.sigmoid(domain_logits(h, w, b))


def augmented_view(hhat_all, a) -> Tensor:
    """Relevance-weighted mean of per-domain representations.

    ``hhat_all`` is ``(..., M, d)`` and ``a`` is ``(..., M)``. The weights are
    treated as constants.
    """
    weights = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    total = weights.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("domain scores sum to zero")
    weights = Tensor((weights / total)[..., None])
    return (ad.as_tensor(hhat_all) * weights).sum(axis=-2)


def contrastive_logits(hbar, hhat_all) -> Tensor:
    """Dot products between the l2-normalized view and each normalized ``hhat_j``."""
    hbar_n = ad.l2_normalize(hbar, axis=-1)
    hhat_n = ad.l2_normalize(hhat_all, axis=-1)
    return (ad.expand_dims(hbar_n, -2) * hhat_n).sum(axis=-1)


def soft_cross_entropy(logits, targets) -> Tensor:
    """Soft binary cross-entropy summed over the last axis; targets are constants."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    logits = ad.as_tensor(logits)
    # log sigmoid(x) = -softplus(-x) and log(1 - sigmoid(x)) = -softplus(x)
    terms = ad.softplus(logits * -1.0) * t + ad.softplus(logits) * (1.0 - t)
    return terms.sum(axis=-1)


def contrastive_loss(hbar, hhat_all, a) -> Tensor:
    """Per-sample contrastive transfer loss (shape ``(...)``); average it yourself."""
    return soft_cross_entropy(contrastive_logits(hbar, hhat_all), a)


def _check_labels(y: np.ndarray, n: int, what: str) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= n):
        raise ValueError(f"invalid {what}: expected integers in [0, {n})")
    return y.astype(np.intp)


def cross_entropy(logits: Tensor, y) -> Tensor:
    y = _check_labels(y, logits.shape[-1], "label")
    logp = ad.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(y)), y].mean()


def supervised_loss(hhat, y, w: Tensor, b: Tensor) -> Tensor:
    return cross_entropy(ad.as_tensor(hhat) @ w + b, y)


def domain_loss(logits: Tensor, domains) -> Tensor:
    """Mean binary cross-entropy of the M sigmoid outputs against one-hot domains."""
    n_domains = logits.shape[-1]
    domains = _check_labels(domains, n_domains, "domain id")
    target = np.eye(n_domains)[domains]
    return (ad.softplus(logits) - logits * target).mean()


# ----------------------------------------------------------------------------
# model


@dataclass
class LossTerms:
    sup: Tensor
    dom: Tensor | None = None
    con: Tensor | None = None
    total: Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {"sup": self.sup.item()}
        out["dom"] = self.dom.item() if self.dom is not None else float("nan")
        out["con"] = self.con.item() if self.con is not None else float("nan")
        return out


@dataclass
class ParameterGroups:
    groups: dict[str, list[Tensor]] = field(default_factory=dict)

    def all(self) -> list[Tensor]:
        return [p for name in GROUPS for p in self.groups.get(name, [])]

    def __getitem__(self, name: str) -> list[Tensor]:
        return self.groups.get(name, [])

    def grad_norms(self) -> dict[str, float]:
        """Sum of absolute gradient entries per group (exactly 0.0 when untouched)."""
        return {
            name: float(sum(np.abs(ad.grad_or_zeros(p)).sum() for p in self.groups.get(name, [])))
            for name in GROUPS
        }


class DcmiModel:
    """Shared encoder with one of several heads configurations.

    ``dcmi*`` variants carry a domain-embedding table, a shared softmax head,
    and a sigmoid domain classifier. ``d_al`` has only the shared head; ``mtl``
    has one softmax head per domain.
    """

    def __init__(
        self,
        variant: str,
        vocab_size: int,
        n_classes: int,
        n_domains: int,
        dim: int = 64,
        seed: int = 0,
        dropout: float = 0.5,
        tau_min: float = TAU_MIN,
        mask_init_std: float = 0.0,
        pin_masks: bool = False,
        emb_dim: int | None = None,
        hidden_dim: int | None = None,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.n_classes = n_classes
        self.n_domains = n_domains
        self.dim = dim
        self.tau_min = tau_min
        self.pin_masks = pin_masks
        self.tau = tau_min

        # independent streams so shared parts initialize identically across variants
        enc_seed, head_seed, dom_seed = np.random.SeedSequence(seed).spawn(3)
        self.encoder: EncoderParams = init_encoder(
            vocab_size, dim, np.random.default_rng(enc_seed), emb_dim, hidden_dim, dropout
        )
        head_rng = np.random.default_rng(head_seed)
        scale = 1.0 / np.sqrt(dim)
        if variant == "mtl":
            self.sup_w = Tensor(head_rng.normal(0, scale, (n_domains, dim, n_classes)), True, "sup.w")
            self.sup_b = Tensor(np.zeros((n_domains, n_classes)), True, "sup.b")
        else:
            self.sup_w = Tensor(head_rng.normal(0, scale, (dim, n_classes)), True, "sup.w")
            self.sup_b = Tensor(np.zeros(n_classes), True, "sup.b")

        self.domain_emb: Tensor | None = None
        self.dom_w: Tensor | None = None
        self.dom_b: Tensor | None = None
        self.compensation: Compensation | None = None
        if self.masked:
            dom_rng = np.random.default_rng(dom_seed)
            self.domain_emb = Tensor(
                dom_rng.normal(0, 1, (n_domains, dim)) * mask_init_std, True, "domain.v"
            )
            self.compensation = Compensation(self.domain_emb, tau_min)
            self.domain_emb.grad_transform = self.compensation
            self.dom_w = Tensor(dom_rng.normal(0, scale, (dim, n_domains)), True, "dom.w")
            self.dom_b = Tensor(np.zeros(n_domains), True, "dom.b")

    @property
    def masked(self) -> bool:
        return self.variant in MASKED_VARIANTS

    def set_temperature(self, tau: float) -> None:
        self.tau = tau
        if self.compensation is not None:
            self.compensation.tau = tau

    def parameter_groups(self) -> ParameterGroups:
        groups = {
            "body": self.encoder.tensors(),
            "supervised_head": [self.sup_w, self.sup_b],
        }
        if self.masked:
            groups["domain_embeddings"] = [self.domain_emb]
            groups["domain_head"] = [self.dom_w, self.dom_b]
        return ParameterGroups(groups)

    def parameters(self) -> list[Tensor]:
        return self.parameter_groups().all()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data[...] = state[p.name]

    # -- forward pieces

    def masks(self, tau: float | None = None) -> Tensor:
        tau = self.tau if tau is None else tau
        if self.pin_masks:
            return Tensor(np.ones((self.n_domains, self.dim)))
        return domain_mask(self.domain_emb, tau)

    def encode(self, batch: Sequence[Sequence[int]], train: bool = False, rng=None) -> Tensor:
        return encode(batch, self.encoder, train=train, rng=rng)

    def class_logits(self, h: Tensor, domains: np.ndarray, masks: Tensor | None = None) -> Tensor:
        if self.masked:
            h = mask_representation(h, masks[domains])
        if self.variant == "mtl":
            w = self.sup_w[domains]
            return (ad.expand_dims(h, 1) @ w).reshape(len(domains), self.n_classes) + self.sup_b[domains]
        return h @ self.sup_w + self.sup_b

    def losses(
        self,
        batch: Sequence[Sequence[int]],
        y,
        domains,
        lam1: float = 0.0,
        lam2: float = 0.0,
        train: bool = True,
        rng=None,
        with_dom: bool | None = None,
        with_con: bool | None = None,
    ) -> LossTerms:
        """Build the joint objective for one mini-batch.

        Terms with a zero weight are still computed for logging unless
        ``with_dom`` / ``with_con`` are False, but never enter ``total``.
        """
        domains = _check_labels(domains, self.n_domains, "domain id")
        h = self.encode(batch, train=train, rng=rng)
        masks = self.masks() if self.masked else None
        sup = cross_entropy(self.class_logits(h, domains, masks), y)
        terms = LossTerms(sup=sup, total=sup)
        if not self.masked:
            return terms

        with_dom = lam1 > 0 if with_dom is None else with_dom
        with_con = lam2 > 0 if with_con is None else with_con
        if with_dom or with_con:
            logits = domain_logits(h, self.dom_w, self.dom_b)
        if with_dom:
            terms.dom = domain_loss(logits, domains)
            if lam1 > 0:
                terms.total = terms.total + terms.dom * lam1
        if with_con:
            # soft targets are constants for the representation path
            a = ad.stop_gradient(ad.sigmoid(logits))
            hhat_all = mask_representation(ad.expand_dims(h, 1), masks)
            hbar = augmented_view(hhat_all, a)
            terms.con = contrastive_loss(hbar, hhat_all, a).mean()
            if lam2 > 0:
                terms.total = terms.total + terms.con * lam2
        return terms

    # -- inference

    def predict_domains(self, batch: Sequence[Sequence[int]]) -> np.ndarray:
        h = self.encode(batch)
        return ad.sigmoid_array(h.data @ self.dom_w.data + self.dom_b.data).argmax(axis=1)

    def predict_proba(
        self, batch: Sequence[Sequence[int]], domains, domain_mode: str = "record"
    ) -> np.ndarray:
        """Class probabilities in eval mode with masks at ``tau_min``."""
        domains = np.asarray(domains, dtype=np.intp)
        if domain_mode == "argmax" and self.masked:
            domains = self.predict_domains(batch)
        elif domain_mode not in ("record", "argmax"):
            raise ValueError(f"unknown domain mode {domain_mode!r}")
        h = self.encode(batch)
        masks = self.masks(self.tau_min) if self.masked else None
        logits = self.class_logits(h, domains, masks)
        return np.exp(ad.log_softmax(logits).data)

    def representations(self, batch, domains) -> tuple[np.ndarray, np.ndarray]:
        """Pre-mask ``h`` and post-mask ``hhat`` for each sample's own domain."""
        h = self.encode(batch).data
        if not self.masked:
            return h, h.copy()
        m = self.masks(self.tau_min).data[np.asarray(domains, dtype=np.intp)]
        return h, h * m


def joint_loss(model: DcmiModel, batch, y, domains, lam1: float, lam2: float, tau: float, **kw) -> LossTerms:
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be non-negative")
    model.set_temperature(tau)
    return model.losses(batch, y, domains, lam1=lam1, lam2=lam2, **kw)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def representation_csv(sample_ids, domains, h: np.ndarray, hhat: np.ndarray) -> str:
    d = h.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["sample_id", "domain_id"] + [f"h_{k}" for k in range(d)] + [f"hhat_{k}" for k in range(d)]
    )
    for sid, dom, row, row_hat in zip(sample_ids, domains, h, hhat):
        writer.writerow([sid, int(dom)] + [_fmt(x) for x in row] + [_fmt(x) for x in row_hat])
    return buf.getvalue()


def export_representations(model: DcmiModel, dataset, path: str | Path, vocab, max_len: int = 128) -> Path:
    """Write pre/post-mask representations of every sample for its domain of record."""
    from .data import tokenize_dataset
    from .io_utils import atomic_write_text

    ids = tokenize_dataset(dataset, vocab, max_len)
    domains = [s.domain for s in dataset.samples]
    h, hhat = model.representations(ids, domains)
    text = representation_csv([s.id for s in dataset.samples], domains, h, hhat)
    return atomic_write_text(path, text)
