"""Optimisation loop, checkpoints, and the DPL-only averaging baselines."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SentencePair, StsItem, Vocab
from .distributions import Sampler
from .evaluation import sts_eval
from .model import ModelConfig, build_model
from .objectives import LossConfig, MegaBatch, MegaEntry, baseline_dpl_loss, total_loss

log = logging.getLogger(__name__)

MAGIC = b"VGV1"
FORMAT_VERSION = 1
COMPONENTS = ("elbo1", "elbo2", "prl", "dpl", "wpl")


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 5.0
    checkpoint_every: int = 0
    dev_path: str | None = None
    scramble: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def scramble(tokens: Sequence[int], rng: np.random.Generator) -> list:
    """Uniformly random permutation of a token sequence."""
    tokens = list(tokens)
    if len(tokens) <= 1:
        return tokens
    return [tokens[i] for i in rng.permutation(len(tokens))]


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1**self.t
        corr2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (m / corr1) / (np.sqrt(v / corr2) + c.eps)


def clip_gradients(params: dict[str, ad.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return total


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    loss_config: LossConfig
    train_config: TrainConfig
    vocab: Vocab
    params: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)  # counters, rng state, order, history
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)  # m, v
    megabatch: list[list[MegaEntry]] = field(default_factory=list)
    best_params: dict[str, np.ndarray] | None = None

    def build_model(self, best: bool = True):
        model = build_model(self.model_config, vocab=self.vocab)
        source = self.best_params if best and self.best_params is not None else self.params
        for name, value in source.items():
            model.params[name].data = value.copy()
        return model

    def embed(self, sentences, variable: str = "semantic") -> np.ndarray:
        return self.build_model().embed(sentences, variable)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = _pack_str(name) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout (little-endian): magic ``VGV1``, u32 version, u32-length
    JSON header, u32 vocab count with u32-length UTF-8 tokens, u32 tensor
    count with (u32 name length, name, u32 rank, u32 dims, f64 payload)."""
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "loss_config": ckpt.loss_config.to_dict(),
        "train_config": asdict(ckpt.train_config),
        "vocab_min_count": ckpt.vocab.min_count,
        "state": ckpt.state,
        "megabatch": [[[e.key[0], e.key[1], list(e.tokens)] for e in b] for b in ckpt.megabatch],
        "has_best": ckpt.best_params is not None,
    }
    tensors: list[tuple[str, np.ndarray]] = [(f"param.{k}", v) for k, v in ckpt.params.items()]
    for slot in ("m", "v"):
        tensors += [(f"adam.{slot}.{k}", v) for k, v in ckpt.optimizer.get(slot, {}).items()]
    for i, b in enumerate(ckpt.megabatch):
        if b:
            tensors.append((f"megabatch.{i}", np.stack([e.direction for e in b])))
    if ckpt.best_params is not None:
        tensors += [(f"best.{k}", v) for k, v in ckpt.best_params.items()]

    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_pack_str(json.dumps(header, sort_keys=True, separators=(",", ":"))))
    parts.append(struct.pack("<I", len(ckpt.vocab)))
    parts += [_pack_str(t) for t in ckpt.vocab.tokens]
    parts.append(struct.pack("<I", len(tensors)))
    parts += [_pack_tensor(n, a) for n, a in tensors]
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        start = self.pos
        raw = self.take(self.u32(what), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid UTF-8 in {what}", start) from exc


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic", 0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4)
    start = r.pos
    try:
        header = json.loads(r.string("header"))
    except json.JSONDecodeError as exc:
        raise CheckpointError("malformed header", start) from exc
    tokens = [r.string("vocab token") for _ in range(r.u32("vocab count"))]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32("tensor count")):
        name = r.string("tensor name")
        rank = r.u32("tensor rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * count, f"tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after tensors", r.pos)

    loss_cfg = dict(header["loss_config"])
    loss_cfg["enabled"] = frozenset(loss_cfg["enabled"])
    megabatch = []
    for i, b in enumerate(header["megabatch"]):
        dirs = tensors.get(f"megabatch.{i}")
        megabatch.append([MegaEntry((p, s), tuple(toks), dirs[j].copy()) for j, (p, s, toks) in enumerate(b)])

    def group(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        loss_config=LossConfig(**loss_cfg),
        train_config=TrainConfig(**header["train_config"]),
        vocab=Vocab(tokens, min_count=header["vocab_min_count"]),
        params=group("param."),
        state=header["state"],
        optimizer={"m": group("adam.m."), "v": group("adam.v.")},
        megabatch=megabatch,
        best_params=group("best.") if header["has_best"] else None,
    )


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    """Seeded mini-batch training with mega-batch negatives and best-dev retention."""

    def __init__(self, model, pairs: Sequence[SentencePair], loss_cfg: LossConfig, train_cfg: TrainConfig,
                 dev: Sequence[StsItem] | None = None, log_path=None):
        if not pairs:
            raise ValueError("no training pairs")
        self.model = model
        self.pairs = list(pairs)
        self.loss_cfg = loss_cfg
        self.cfg = train_cfg
        self.dev = dev
        self.log_path = log_path
        self.rng = np.random.default_rng(train_cfg.seed)
        self.optimizer = Adam(model.params, train_cfg)
        self.megabatch = MegaBatch(loss_cfg.megabatch_k)
        self.epoch = 1
        self.step_count = 0
        self.order: np.ndarray | None = None
        self.pos = 0
        self.step_losses: list[float] = []
        self.epoch_losses: list[float] = []
        self.dev_scores: list[float] = []
        self.best_dev = -math.inf
        self.best_params: dict[str, np.ndarray] | None = None
        self._epoch_sum = 0.0
        self._epoch_steps = 0
        self._is_baseline = model.config.kind != "vgvae"

    # -- state ---------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        state = {
            "epoch": self.epoch,
            "step": self.step_count,
            "pos": self.pos,
            "order": None if self.order is None else [int(i) for i in self.order],
            "rng": self.rng.bit_generator.state,
            "adam_t": self.optimizer.t,
            "epoch_losses": self.epoch_losses,
            "dev_scores": self.dev_scores,
            "best_dev": None if self.best_dev == -math.inf else self.best_dev,
            "epoch_sum": self._epoch_sum,
            "epoch_steps": self._epoch_steps,
        }
        return Checkpoint(
            model_config=self.model.config,
            loss_config=self.loss_cfg,
            train_config=self.cfg,
            vocab=self.model.vocab,
            params={k: p.data.copy() for k, p in self.model.params.items()},
            state=state,
            optimizer={"m": {k: v.copy() for k, v in self.optimizer.m.items()},
                       "v": {k: v.copy() for k, v in self.optimizer.v.items()}},
            megabatch=[list(b) for b in self.megabatch.batches],
            best_params=None if self.best_params is None else {k: v.copy() for k, v in self.best_params.items()},
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, pairs, dev=None, log_path=None) -> "Trainer":
        model = ckpt.build_model(best=False)
        t = cls(model, pairs, ckpt.loss_config, ckpt.train_config, dev=dev, log_path=log_path)
        s = ckpt.state
        t.epoch, t.step_count, t.pos = s["epoch"], s["step"], s["pos"]
        t.order = None if s["order"] is None else np.asarray(s["order"], dtype=np.int64)
        t.rng.bit_generator.state = s["rng"]
        t.optimizer.t = s["adam_t"]
        for k in t.optimizer.m:
            t.optimizer.m[k] = ckpt.optimizer["m"][k].copy()
            t.optimizer.v[k] = ckpt.optimizer["v"][k].copy()
        for b in ckpt.megabatch:
            t.megabatch.push(b)
        t.epoch_losses = list(s["epoch_losses"])
        t.dev_scores = list(s["dev_scores"])
        t.best_dev = -math.inf if s["best_dev"] is None else s["best_dev"]
        t.best_params = None if ckpt.best_params is None else {k: v.copy() for k, v in ckpt.best_params.items()}
        t._epoch_sum, t._epoch_steps = s["epoch_sum"], s["epoch_steps"]
        return t

    # -- loop ------------------------------------------------------------------

    def _log(self, breakdown: dict[str, float], total: float) -> None:
        if self.log_path is None:
            return
        comps = "\t".join(f"{k}={breakdown.get(k, 0.0)!r}" for k in COMPONENTS)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(f"{self.step_count}\t{self.epoch}\t{total!r}\t{comps}\n")

    def _inputs(self, idx: np.ndarray):
        x1 = [self.pairs[i].x1 for i in idx]
        x2 = [self.pairs[i].x2 for i in idx]
        if self.cfg.scramble:
            x1 = [scramble(s, self.rng) for s in x1]
            x2 = [scramble(s, self.rng) for s in x2]
        return x1, x2

    def step(self, idx: np.ndarray) -> float:
        x1, x2 = self._inputs(idx)
        pair_ids = [int(i) for i in idx]
        self.model.zero_grad()

        def diverged(message, breakdown):
            dump = {"step": self.step_count, "epoch": self.epoch, "pair_ids": pair_ids,
                    "x1": [list(map(int, s)) for s in x1], "x2": [list(map(int, s)) for s in x2],
                    "components": breakdown}
            return DivergenceError(f"{message} at step {self.step_count}", dump)

        try:
            with ad.Tape() as tape:
                if self._is_baseline:
                    loss, dirs = baseline_dpl_loss(self.model, x1, x2, pair_ids, self.megabatch,
                                                   self.loss_cfg.dpl_margin)
                    breakdown = {"dpl": loss.item()} if loss is not None else {}
                else:
                    loss, breakdown, dirs = total_loss(self.model, x1, x2, pair_ids, self.megabatch, self.epoch,
                                                       self.loss_cfg, Sampler(self.rng))
        except ad.NumericError as exc:
            # non-finite values caught inside the forward pass
            raise diverged(str(exc), {}) from exc
        value = loss.item() if loss is not None else 0.0
        if not math.isfinite(value):
            raise diverged(f"non-finite loss {value}", breakdown)
        if loss is not None:
            ad.backward(tape, loss)
            clip_gradients(self.model.params, self.cfg.clip_norm)
            self.optimizer.step()
        entries = []
        for side, (xs, mus) in enumerate(((x1, dirs["mu1"]), (x2, dirs["mu2"]))):
            for pid, toks, mu in zip(pair_ids, xs, mus):
                entries.append(MegaEntry((pid, side), tuple(toks), mu / np.linalg.norm(mu)))
        self.megabatch.push(entries)
        self.step_count += 1
        self.step_losses.append(value)
        self._epoch_sum += value
        self._epoch_steps += 1
        self._log(breakdown, value)
        return value

    def _end_epoch(self) -> None:
        self.epoch_losses.append(self._epoch_sum / max(self._epoch_steps, 1))
        self._epoch_sum, self._epoch_steps = 0.0, 0
        if self.dev:
            r = sts_eval(self.model, self.dev, "semantic").aggregate
            self.dev_scores.append(r)
            log.info("epoch %d dev pearson %.4f", self.epoch, r)
            if r > self.best_dev:
                self.best_dev = r
                self.best_params = {k: p.data.copy() for k, p in self.model.params.items()}
        self.epoch += 1
        self.order = None
        self.pos = 0

    def run(self, max_steps: int | None = None, checkpoint_path=None) -> Checkpoint:
        n = len(self.pairs)
        taken = 0
        while self.epoch <= self.cfg.epochs:
            if self.order is None:
                self.order = self.rng.permutation(n)
                self.pos = 0
            while self.pos < n:
                if max_steps is not None and taken >= max_steps:
                    return self.checkpoint()
                idx = self.order[self.pos : self.pos + self.cfg.batch_size]
                self.step(idx)
                self.pos += len(idx)
                taken += 1
                every = self.cfg.checkpoint_every
                if checkpoint_path and every and self.step_count % every == 0:
                    save_checkpoint(checkpoint_path, self.checkpoint())
            self._end_epoch()
        return self.checkpoint()


def train(pairs, model, loss_cfg: LossConfig, train_cfg: TrainConfig, dev=None, log_path=None,
          checkpoint_path=None, max_steps: int | None = None) -> Checkpoint:
    trainer = Trainer(model, pairs, loss_cfg, train_cfg, dev=dev, log_path=log_path)
    return trainer.run(max_steps=max_steps, checkpoint_path=checkpoint_path)


def train_baseline(kind: str, pairs, vocab: Vocab, train_cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                   dev=None, log_path=None, model_overrides: dict | None = None,
                   scramble_inputs: bool | None = None) -> Checkpoint:
    """DPL-only WORDAVG / BLSTMAVG training.

    ``scramble_inputs`` defaults to on for BLSTMAVG and to ``train_cfg.scramble``
    otherwise.
    """
    if kind not in ("wordavg", "blstmavg"):
        raise ValueError(f"unknown baseline {kind!r}")
    if scramble_inputs is None:
        scramble_inputs = train_cfg.scramble or kind == "blstmavg"
    train_cfg = replace(train_cfg, scramble=scramble_inputs)
    overrides = dict(model_overrides or {})
    config = ModelConfig(vocab_size=len(vocab), kind=kind, **overrides)
    model = build_model(config, seed=train_cfg.seed, vocab=vocab)
    loss_cfg = loss_cfg or LossConfig(enabled=frozenset({"dpl"}), dpl_start_epoch=1)
    return train(pairs, model, loss_cfg, train_cfg, dev=dev, log_path=log_path)


def config_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}
