"""Inference and generative networks of the vMF-Gaussian VAE, plus the
paraphrase-trained averaging baselines.

All networks run on ragged batches: a batch is a list of token-ID lists.
Averaging encoders never see padding. Recurrent networks pad to the longest
sentence but mask every padded step, which carries the state through
unchanged and excludes it from averages and likelihoods.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, Vocab
from .distributions import GaussParams, VmfParams

__all__ = ["InputError", "ModelConfig", "Batch", "VGVAE", "AveragingBaseline", "build_model"]

ENCODER_KINDS = ("word_avg", "bilstm")
DECODER_KINDS = ("bow", "lstm")
MODEL_KINDS = ("vgvae", "wordavg", "blstmavg")


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    latent_dim_m: int = 50
    latent_dim_d: int = 50
    embed_dim: int = 50
    lstm_hidden: int = 50
    encoder_kind: str = "word_avg"
    decoder_kind: str = "bow"
    decoder_hidden: int = 100
    wpl_hidden: int = 100
    max_position: int = 50
    kind: str = "vgvae"

    def __post_init__(self):
        for name in ("vocab_size", "latent_dim_m", "latent_dim_d", "embed_dim", "lstm_hidden",
                     "decoder_hidden", "wpl_hidden", "max_position"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.latent_dim_m < 2:
            raise ValueError("latent_dim_m must be at least 2 for a vMF posterior")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)


class Batch:
    """Index bookkeeping for a ragged batch of token-ID sequences."""

    def __init__(self, sentences: Sequence[Sequence[int]], vocab_size: int | None = None):
        if not sentences:
            raise InputError("empty batch")
        self.sentences = [list(s) for s in sentences]
        self.lengths = np.array([len(s) for s in self.sentences], dtype=np.int64)
        if np.any(self.lengths == 0):
            raise InputError("empty sentence")
        self.size = len(self.sentences)
        self.flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in self.sentences])
        if vocab_size is not None and (self.flat.min() < 0 or self.flat.max() >= vocab_size):
            raise InputError("token ID outside the vocabulary")
        self.segments = np.repeat(np.arange(self.size), self.lengths)
        self.positions = np.concatenate([np.arange(n) for n in self.lengths])
        self.max_len = int(self.lengths.max())

    def padded(self, reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """``[T, B]`` IDs (padding 0) and ``[T, B]`` 0/1 mask; ``reverse`` flips each sentence."""
        ids = np.zeros((self.max_len, self.size), dtype=np.int64)
        mask = np.zeros((self.max_len, self.size))
        for b, s in enumerate(self.sentences):
            seq = s[::-1] if reverse else s
            ids[: len(seq), b] = seq
            mask[: len(seq), b] = 1.0
        return ids, mask


class _Params:
    """Ordered named parameter store with seeded uniform initialisation."""

    def __init__(self, rng: np.random.Generator, init_scale: float = 0.1):
        self.rng = rng
        self.scale = init_scale
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, *shape: int) -> Tensor:
        t = ad.parameter(self.rng.uniform(-self.scale, self.scale, size=shape), name=name)
        self.tensors[name] = t
        return t

    def add_lstm(self, prefix: str, n_in: int, hidden: int) -> None:
        self.add(f"{prefix}.w_ih", n_in, 4 * hidden)
        self.add(f"{prefix}.w_hh", hidden, 4 * hidden)
        b = self.add(f"{prefix}.b", 4 * hidden)
        b.data[hidden : 2 * hidden] = 1.0  # forget gate


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_row(ad.matmul(x, w), b)


class _Network:
    config: ModelConfig
    params: dict[str, Tensor]
    vocab: Vocab | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def batch(self, sentences) -> Batch:
        return Batch(sentences, self.config.vocab_size)

    def _average_embedding(self, table: str, batch: Batch) -> Tensor:
        return ad.segment_mean(ad.take_rows(self[table], batch.flat), batch.segments, batch.size)

    def _run_lstm(self, prefix: str, table: str, batch: Batch, reverse: bool = False) -> Tensor:
        """Masked average of hidden states of one encoder direction."""
        hidden = self.config.lstm_hidden
        ids, mask = batch.padded(reverse=reverse)
        hc = Tensor(np.zeros((batch.size, 2 * hidden)))
        w_ih, w_hh, b = self[f"{prefix}.w_ih"], self[f"{prefix}.w_hh"], self[f"{prefix}.b"]
        states = []
        for t in range(batch.max_len):
            x = ad.take_rows(self[table], ids[t])
            hc = ad.lstm_step(ad.matmul(x, w_ih), hc, w_hh, b, mask[t])
            states.append(hc)
        stacked = ad.concat(states, axis=0)  # [T*B, 2H]
        weights = (mask / batch.lengths[None, :]).reshape(-1)
        rows = np.tile(np.arange(batch.size), batch.max_len)
        summed = ad.segment_sum(ad.mul(stacked, Tensor(np.repeat(weights[:, None], 2 * hidden, axis=1))),
                                rows, batch.size)
        return ad.columns(summed, 0, hidden)

    def _bilstm_average(self, table: str, batch: Batch, prefix: str) -> Tensor:
        fwd = self._run_lstm(f"{prefix}.fwd", table, batch)
        bwd = self._run_lstm(f"{prefix}.bwd", table, batch, reverse=True)
        return ad.concat([fwd, bwd], axis=1)

    def embed(self, sentences: Sequence[Sequence[str]], variable: str = "semantic", chunk: int = 512) -> np.ndarray:
        """Mean vectors for raw token lists (needs ``self.vocab``)."""
        if self.vocab is None:
            raise RuntimeError("model has no vocabulary attached")
        ids = [self.vocab.encode(s) for s in sentences]
        return self.mean_vectors(ids, variable, chunk)

    def mean_vectors(self, sentences: Sequence[Sequence[int]], variable: str, chunk: int = 512) -> np.ndarray:
        raise NotImplementedError


class VGVAE(_Network):
    """Semantic vMF latent ``y`` and syntactic Gaussian latent ``z``."""

    def __init__(self, config: ModelConfig, seed: int = 0, vocab: Vocab | None = None):
        self.config = config
        self.vocab = vocab
        c = config
        store = _Params(np.random.default_rng(seed))
        store.add("sem_embed", c.vocab_size, c.embed_dim)
        store.add("syn_embed", c.vocab_size, c.embed_dim)
        store.add("sem.mu.w", c.embed_dim, c.latent_dim_m)
        store.add("sem.mu.b", c.latent_dim_m)
        store.add("sem.kappa.w", c.embed_dim, 1)
        store.add("sem.kappa.b", 1)
        if c.encoder_kind == "word_avg":
            feat = c.embed_dim
        else:
            store.add_lstm("syn.lstm.fwd", c.embed_dim, c.lstm_hidden)
            store.add_lstm("syn.lstm.bwd", c.embed_dim, c.lstm_hidden)
            store.add("syn.hidden.w", 2 * c.lstm_hidden, c.decoder_hidden)
            store.add("syn.hidden.b", c.decoder_hidden)
            feat = c.decoder_hidden
        store.add("syn.mu.w", feat, c.latent_dim_d)
        store.add("syn.mu.b", c.latent_dim_d)
        store.add("syn.logvar.w", feat, c.latent_dim_d)
        store.add("syn.logvar.b", c.latent_dim_d)
        latent = c.latent_dim_m + c.latent_dim_d
        if c.decoder_kind == "bow":
            store.add("dec.hidden.w", latent, c.decoder_hidden)
            store.add("dec.hidden.b", c.decoder_hidden)
            store.add("dec.out.w", c.decoder_hidden, c.vocab_size)
            store.add("dec.out.b", c.vocab_size)
        else:
            h = c.lstm_hidden
            store.add("dec_embed", c.vocab_size, c.embed_dim)
            store.add_lstm("dec.lstm", c.embed_dim, h)
            store.add("dec.latent.w", latent, 4 * h)
            store.add("dec.init_h.w", latent, h)
            store.add("dec.init_h.b", h)
            store.add("dec.init_c.w", latent, h)
            store.add("dec.init_c.b", h)
            store.add("dec.out.w", h, c.vocab_size)
            store.add("dec.out.b", c.vocab_size)
        store.add("wpl.w1", c.embed_dim + c.latent_dim_d, c.wpl_hidden)
        store.add("wpl.b1", c.wpl_hidden)
        store.add("wpl.w2", c.wpl_hidden, c.wpl_hidden)
        store.add("wpl.b2", c.wpl_hidden)
        store.add("wpl.w3", c.wpl_hidden, c.max_position)
        store.add("wpl.b3", c.max_position)
        self.params = store.tensors

    # -- inference networks ------------------------------------------------

    def encode_semantic(self, sentences) -> VmfParams:
        batch = sentences if isinstance(sentences, Batch) else self.batch(sentences)
        avg = self._average_embedding("sem_embed", batch)
        mu = ad.normalize_rows(_linear(avg, self["sem.mu.w"], self["sem.mu.b"]))
        kappa = ad.softplus(_linear(avg, self["sem.kappa.w"], self["sem.kappa.b"]))
        return VmfParams(mu, ad.reshape(kappa, (batch.size,)))

    def encode_syntactic(self, sentences) -> GaussParams:
        batch = sentences if isinstance(sentences, Batch) else self.batch(sentences)
        if self.config.encoder_kind == "word_avg":
            feat = self._average_embedding("syn_embed", batch)
        else:
            states = self._bilstm_average("syn_embed", batch, "syn.lstm")
            feat = ad.tanh(_linear(states, self["syn.hidden.w"], self["syn.hidden.b"]))
        mu = _linear(feat, self["syn.mu.w"], self["syn.mu.b"])
        logvar = _linear(feat, self["syn.logvar.w"], self["syn.logvar.b"])
        return GaussParams(mu, logvar)

    # -- generative networks -----------------------------------------------

    def decode_logprob(self, y: Tensor, z: Tensor, sentences) -> Tensor:
        """``log p(x | y, z)`` per sentence (``[B]``) with the configured decoder."""
        batch = sentences if isinstance(sentences, Batch) else self.batch(sentences)
        if self.config.decoder_kind == "bow":
            return self.decode_bow_logprob(y, z, batch)
        return self.decode_lstm_logprob(y, z, batch)

    def decode_bow_logprob(self, y: Tensor, z: Tensor, batch: Batch) -> Tensor:
        yz = ad.concat([y, z], axis=1)
        hidden = ad.tanh(_linear(yz, self["dec.hidden.w"], self["dec.hidden.b"]))
        logp = ad.log_softmax(_linear(hidden, self["dec.out.w"], self["dec.out.b"]))
        gold = ad.pick(logp, batch.segments, batch.flat)
        return ad.segment_sum(gold, batch.segments, batch.size)

    def decode_lstm_logprob(self, y: Tensor, z: Tensor, batch: Batch) -> Tensor:
        """Teacher-forced LSTM likelihood including the end-of-sentence token."""
        h = self.config.lstm_hidden
        yz = ad.concat([y, z], axis=1)
        steps = batch.max_len + 1
        inputs = np.full((steps, batch.size), BOS, dtype=np.int64)
        targets = np.zeros((steps, batch.size), dtype=np.int64)
        mask = np.zeros((steps, batch.size))
        for b, s in enumerate(batch.sentences):
            inputs[1 : len(s) + 1, b] = s
            targets[: len(s), b] = s
            targets[len(s), b] = EOS
            mask[: len(s) + 1, b] = 1.0
        latent_proj = ad.matmul(yz, self["dec.latent.w"])
        h0 = _linear(yz, self["dec.init_h.w"], self["dec.init_h.b"])
        c0 = _linear(yz, self["dec.init_c.w"], self["dec.init_c.b"])
        hc = ad.concat([h0, c0], axis=1)
        w_ih, w_hh, bias = self["dec.lstm.w_ih"], self["dec.lstm.w_hh"], self["dec.lstm.b"]
        outputs = []
        for t in range(steps):
            x = ad.take_rows(self["dec_embed"], inputs[t])
            hc = ad.lstm_step(ad.add(ad.matmul(x, w_ih), latent_proj), hc, w_hh, bias, mask[t])
            outputs.append(ad.columns(hc, 0, h))
        stacked = ad.concat(outputs, axis=0)  # [steps*B, H]
        logp = ad.log_softmax(_linear(stacked, self["dec.out.w"], self["dec.out.b"]))
        flat_mask = mask.reshape(-1) > 0
        rows = np.nonzero(flat_mask)[0]
        gold = ad.pick(logp, rows, targets.reshape(-1)[rows])
        owner = np.tile(np.arange(batch.size), steps)[rows]
        return ad.segment_sum(gold, owner, batch.size)

    def position_logprob(self, z: Tensor, batch: Batch, max_position: int) -> Tensor:
        """Per-sentence sum of ``log softmax(f([e_i; z]))_i`` over token positions."""
        if max_position != self.config.max_position:
            raise ValueError(f"position head has {self.config.max_position} outputs, not {max_position}")
        emb = ad.take_rows(self["syn_embed"], batch.flat)
        zrep = ad.take_rows(z, batch.segments)
        h = ad.tanh(_linear(ad.concat([emb, zrep], axis=1), self["wpl.w1"], self["wpl.b1"]))
        h = ad.tanh(_linear(h, self["wpl.w2"], self["wpl.b2"]))
        logp = ad.log_softmax(_linear(h, self["wpl.w3"], self["wpl.b3"]))
        target = np.minimum(batch.positions, max_position - 1)
        gold = ad.pick(logp, np.arange(batch.flat.size), target)
        return ad.segment_sum(gold, batch.segments, batch.size)

    def mean_vectors(self, sentences, variable: str, chunk: int = 512) -> np.ndarray:
        """Semantic: vMF mean directions. Syntactic: Gaussian means. No tape, no sampling."""
        out = []
        for start in range(0, len(sentences), chunk):
            part = sentences[start : start + chunk]
            if variable == "semantic":
                out.append(self.encode_semantic(part).mu.data)
            elif variable == "syntactic":
                out.append(self.encode_syntactic(part).mu.data)
            else:
                raise ValueError(f"variable must be semantic or syntactic, got {variable!r}")
        return np.concatenate(out, axis=0)


class AveragingBaseline(_Network):
    """Word-embedding average or bidirectional-LSTM state average; one representation."""

    def __init__(self, config: ModelConfig, seed: int = 0, vocab: Vocab | None = None):
        self.config = config
        self.vocab = vocab
        store = _Params(np.random.default_rng(seed))
        store.add("embed", config.vocab_size, config.embed_dim)
        if config.kind == "blstmavg":
            store.add_lstm("lstm.fwd", config.embed_dim, config.lstm_hidden)
            store.add_lstm("lstm.bwd", config.embed_dim, config.lstm_hidden)
        self.params = store.tensors

    def represent(self, sentences) -> Tensor:
        batch = sentences if isinstance(sentences, Batch) else self.batch(sentences)
        if self.config.kind == "wordavg":
            return self._average_embedding("embed", batch)
        return self._bilstm_average("embed", batch, "lstm")

    def mean_vectors(self, sentences, variable: str = "semantic", chunk: int = 512) -> np.ndarray:
        return np.concatenate(
            [self.represent(sentences[i : i + chunk]).data for i in range(0, len(sentences), chunk)], axis=0
        )


def build_model(config: ModelConfig, seed: int = 0, vocab: Vocab | None = None):
    if config.kind == "vgvae":
        return VGVAE(config, seed, vocab)
    return AveragingBaseline(config, seed, vocab)
