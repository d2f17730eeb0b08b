"""Training objective: weighted negative ELBO plus the paraphrase
reconstruction (PRL), discriminative paraphrase (DPL) and word position
(WPL) losses.

Per-sentence terms are averaged over the mini-batch. Latents are drawn once
per sentence per step (``y1, z1, y2, z2`` in that order) and shared by every
term that needs them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import GaussParams, Sampler, VmfParams, kl_gauss_std, kl_vmf_uniform
from .model import Batch, VGVAE

__all__ = [
    "LOSS_NAMES",
    "NoCandidates",
    "LossConfig",
    "MegaBatch",
    "MegaEntry",
    "Latents",
    "encode_and_sample",
    "elbo_loss",
    "prl_loss",
    "select_negative",
    "select_negatives",
    "dpl_hinge",
    "dpl_loss",
    "wpl_loss",
    "total_loss",
    "baseline_dpl_loss",
]

LOSS_NAMES = ("prl", "dpl", "wpl")


class NoCandidates(LookupError):
    pass


@dataclass
class LossConfig:
    kl_weight_y: float = 1.0
    kl_weight_z: float = 1.0
    rec_weight: float = 1.0
    prl_weight: float = 1.0
    dpl_margin: float = 0.4
    dpl_start_epoch: int = 2
    wpl_weight: float = 1.0
    megabatch_k: int = 20
    max_position: int = 50
    enabled: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.enabled = frozenset(s.lower() for s in self.enabled)
        unknown = self.enabled - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown losses {sorted(unknown)}; choose from {LOSS_NAMES}")
        for name in ("kl_weight_y", "kl_weight_z", "rec_weight", "prl_weight", "wpl_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.dpl_margin <= 0:
            raise ValueError("dpl_margin must be positive")
        if self.megabatch_k < 1:
            raise ValueError("megabatch_k must be at least 1")
        if self.max_position < 1:
            raise ValueError("max_position must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enabled"] = sorted(self.enabled)
        return d


# ---------------------------------------------------------------------------
# mega-batch negatives


class MegaEntry(NamedTuple):
    key: tuple[int, int]  # (pair id, side)
    tokens: tuple[int, ...]
    direction: np.ndarray

    @property
    def partner_key(self) -> tuple[int, int]:
        return (self.key[0], 1 - self.key[1])


class MegaBatch:
    """The last ``k`` mini-batches with mean directions cached on entry."""

    def __init__(self, k: int):
        self.k = k
        self.batches: deque[list[MegaEntry]] = deque(maxlen=k)
        self._matrix: np.ndarray | None = None
        self._entries: list[MegaEntry] | None = None

    def push(self, entries: Sequence[MegaEntry]) -> None:
        for e in entries:
            if abs(np.linalg.norm(e.direction) - 1.0) > 1e-9:
                raise ValueError("cached direction is not unit norm")
        self.batches.append(list(entries))
        self._matrix = self._entries = None

    @property
    def entries(self) -> list[MegaEntry]:
        if self._entries is None:
            self._entries = [e for b in self.batches for e in b]
        return self._entries

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            ents = self.entries
            self._matrix = np.stack([e.direction for e in ents]) if ents else np.zeros((0, 0))
        return self._matrix

    def __len__(self) -> int:
        return len(self.entries)


def select_negatives(anchors: np.ndarray, partner_keys: Sequence[tuple[int, int]], mb: MegaBatch) -> list[MegaEntry | None]:
    """Argmax-cosine mega-batch entry per anchor, excluding that anchor's partner.

    Ties go to the earliest inserted entry; ``None`` when nothing is left.
    """
    ents = mb.entries
    if not ents:
        return [None] * len(partner_keys)
    anchors = np.asarray(anchors, dtype=np.float64)
    anchors = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
    sims = anchors @ mb.matrix.T
    position = {e.key: i for i, e in enumerate(ents)}
    out: list[MegaEntry | None] = []
    for row, pk in enumerate(partner_keys):
        s = sims[row]
        j = position.get(pk)
        if j is not None:
            s = s.copy()
            s[j] = -np.inf
        best = int(np.argmax(s))
        out.append(None if np.isneginf(s[best]) else ents[best])
    return out


def select_negative(anchor: np.ndarray, partner_key: tuple[int, int], mb: MegaBatch) -> MegaEntry:
    choice = select_negatives(np.atleast_2d(anchor), [partner_key], mb)[0]
    if choice is None:
        raise NoCandidates("no negative candidates left after excluding the partner")
    return choice


# ---------------------------------------------------------------------------
# loss terms


@dataclass
class Latents:
    batch: Batch
    q_y: VmfParams
    q_z: GaussParams
    y: Tensor
    z: Tensor


def encode_and_sample(model: VGVAE, sentences, sampler: Sampler) -> Latents:
    batch = sentences if isinstance(sentences, Batch) else model.batch(sentences)
    q_y = model.encode_semantic(batch)
    q_z = model.encode_syntactic(batch)
    y = sampler.vmf(q_y)
    z = sampler.gauss(q_z)
    return Latents(batch, q_y, q_z, y, z)


def _elbo_terms(model: VGVAE, lat: Latents, cfg: LossConfig) -> Tensor:
    rec = ad.neg(model.decode_logprob(lat.y, lat.z, lat.batch))
    per = ad.scale(rec, cfg.rec_weight)
    if cfg.kl_weight_y:
        per = per + ad.scale(kl_vmf_uniform(lat.q_y), cfg.kl_weight_y)
    if cfg.kl_weight_z:
        per = per + ad.scale(kl_gauss_std(lat.q_z), cfg.kl_weight_z)
    return ad.mean(per)


def _prl_terms(model: VGVAE, a: Latents, b: Latents, cfg: LossConfig) -> Tensor:
    rec_a = model.decode_logprob(b.y, a.z, a.batch)
    rec_b = model.decode_logprob(a.y, b.z, b.batch)
    return ad.scale(ad.mean(ad.neg(rec_a + rec_b)), cfg.prl_weight)


def _wpl_terms(model: VGVAE, lat: Latents, cfg: LossConfig) -> Tensor:
    logp = model.position_logprob(lat.z, lat.batch, cfg.max_position)
    return ad.scale(ad.mean(ad.neg(logp)), cfg.wpl_weight)


def elbo_loss(model: VGVAE, sentences, cfg: LossConfig, sampler: Sampler) -> Tensor:
    """Batch mean of ``rec_weight * -log p(x|y,z) + weighted KLs`` with one latent draw each."""
    return _elbo_terms(model, encode_and_sample(model, sentences, sampler), cfg)


def prl_loss(model: VGVAE, x1, x2, cfg: LossConfig, sampler: Sampler) -> Tensor:
    """Reconstruct each side from the other side's semantic and its own syntactic draw."""
    a = encode_and_sample(model, x1, sampler)
    b = encode_and_sample(model, x2, sampler)
    return _prl_terms(model, a, b, cfg)


def wpl_loss(model: VGVAE, sentences, cfg: LossConfig, sampler: Sampler) -> Tensor:
    return _wpl_terms(model, encode_and_sample(model, sentences, sampler), cfg)


def dpl_hinge(mu1: Tensor, mu2: Tensor, mun1: Tensor, mun2: Tensor, margin: float) -> Tensor:
    """Per-pair ``max(0, m - d(x1,x2) + d(x1,n1)) + max(0, m - d(x1,x2) + d(x2,n2))``."""
    u1, u2 = ad.normalize_rows(mu1), ad.normalize_rows(mu2)
    n1, n2 = ad.normalize_rows(mun1), ad.normalize_rows(mun2)
    pos = ad.row_dot(u1, u2)
    first = ad.relu(ad.add_scalar(ad.row_dot(u1, n1) - pos, margin))
    second = ad.relu(ad.add_scalar(ad.row_dot(u2, n2) - pos, margin))
    return first + second


def dpl_loss(model: VGVAE, x1, x2, n1, n2, margin: float) -> Tensor:
    """Batch mean hinge on cosine of semantic mean directions (no sampling)."""
    mus = [model.encode_semantic(s).mu for s in (x1, x2, n1, n2)]
    return ad.mean(dpl_hinge(*mus, margin))


def _dpl_from_megabatch(encode, mu1: Tensor, mu2: Tensor, pair_ids: Sequence[int], mb: MegaBatch, margin: float):
    n1 = select_negatives(mu1.data, [(p, 1) for p in pair_ids], mb)
    n2 = select_negatives(mu2.data, [(p, 0) for p in pair_ids], mb)
    rows = [i for i in range(len(pair_ids)) if n1[i] is not None and n2[i] is not None]
    if not rows:
        return None
    neg1 = encode([list(n1[i].tokens) for i in rows])
    neg2 = encode([list(n2[i].tokens) for i in rows])
    if len(rows) == len(pair_ids):
        a, b = mu1, mu2
    else:
        a, b = ad.take_rows(mu1, rows), ad.take_rows(mu2, rows)
    return ad.mean(dpl_hinge(a, b, neg1, neg2, margin))


def total_loss(model: VGVAE, x1, x2, pair_ids: Sequence[int], mb: MegaBatch | None, epoch: int,
               cfg: LossConfig, sampler: Sampler) -> tuple[Tensor, dict[str, float], dict]:
    """Sum of both ELBOs and every enabled auxiliary term.

    Returns the scalar loss, a float breakdown per term, and the semantic mean
    directions of both sides (for the trainer to cache in the mega-batch).
    """
    a = encode_and_sample(model, x1, sampler)
    b = encode_and_sample(model, x2, sampler)
    terms = {"elbo1": _elbo_terms(model, a, cfg), "elbo2": _elbo_terms(model, b, cfg)}
    if "prl" in cfg.enabled:
        terms["prl"] = _prl_terms(model, a, b, cfg)
    if "dpl" in cfg.enabled and epoch >= cfg.dpl_start_epoch and mb is not None:
        dpl = _dpl_from_megabatch(lambda s: model.encode_semantic(s).mu, a.q_y.mu, b.q_y.mu, pair_ids, mb,
                                  cfg.dpl_margin)
        if dpl is not None:
            terms["dpl"] = dpl
    if "wpl" in cfg.enabled:
        terms["wpl"] = _wpl_terms(model, a, cfg) + _wpl_terms(model, b, cfg)
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    breakdown = {name: t.item() for name, t in terms.items()}
    return total, breakdown, {"mu1": a.q_y.mu.data, "mu2": b.q_y.mu.data}


def baseline_dpl_loss(model, x1, x2, pair_ids: Sequence[int], mb: MegaBatch | None, margin: float):
    """DPL on an averaging baseline's representation; ``None`` if no negatives yet."""
    r1, r2 = model.represent(x1), model.represent(x2)
    dirs = {"mu1": _unit(r1.data), "mu2": _unit(r2.data)}
    if mb is None:
        return None, dirs
    return _dpl_from_megabatch(model.represent, r1, r2, pair_ids, mb, margin), dirs


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
