"""Training loop for the encoder under the joint CTC + PFR objective."""

from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from pfctc.ctc import min_frames
from pfctc.encoder import EncoderConfig, Params, encoder_backward, encoder_forward, init_params
from pfctc.errors import CheckpointError, InfeasibleError, TrainingError, UsageError
from pfctc.metrics import DecodeResult, LatencyReport, greedy_decode, latency_report
from pfctc.numerics import tempered_softmax_rows
from pfctc.pfr import DEFAULT_TAU, PfrConfig, joint_loss_and_grad
from pfctc.synthdata import Dataset, Utterance

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_FIELDS = ("epoch", "step", "lr", "ctc_loss", "pfr_loss", "total")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    tau: float = DEFAULT_TAU
    detach_teacher: bool = True
    epochs: int = 40
    batch_size: int = 8
    base_lr: float = 0.1
    warmup_steps: int = 400
    seed: int = 0
    average_last_k: int = 5
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.warmup_steps < 1:
            raise UsageError("warmup_steps must be >= 1")
        if not 1 <= self.average_last_k <= self.epochs:
            raise UsageError("average_last_k must be in [1, epochs]")
        if not self.base_lr > 0:
            raise UsageError("base_lr must be positive")
        # validates lam / tau
        self.pfr_config

    @property
    def pfr_config(self) -> PfrConfig:
        return PfrConfig(lam=self.lam, tau=self.tau, detach_teacher=self.detach_teacher)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_step(base_lr: float, warmup_steps: int, step: int) -> float:
    """Linear warmup then inverse square-root decay; peaks at ``step == warmup_steps``."""
    if step < 1:
        raise UsageError("step must be >= 1")
    return base_lr * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Params, grads: Params, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-9) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    step = state.step + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, step)


def average_params(snapshots: Sequence[Params]) -> Params:
    """Uniform elementwise mean, accumulated in snapshot order."""
    if not snapshots:
        raise UsageError("nothing to average")
    out = {k: v.copy() for k, v in snapshots[0].items()}
    for snap in snapshots[1:]:
        for k in out:
            out[k] += snap[k]
    return {k: v / len(snapshots) for k, v in out.items()}


def check_feasible(utts: Sequence[Utterance]) -> None:
    for utt in utts:
        need = min_frames(utt.labels)
        if utt.num_frames < need:
            raise InfeasibleError(utt.num_frames, need, utt_id=utt.id)


def batch_loss_and_grads(params: Params, enc_cfg: EncoderConfig, utts: Sequence[Utterance],
                         pfr_cfg: PfrConfig) -> tuple[float, float, float, Params]:
    """Mean joint loss over ``utts`` and its parameter gradient.

    Gradients are summed in utterance order, then divided once.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    tot = ctc = reg = 0.0
    for utt in utts:
        logits, cache = encoder_forward(params, enc_cfg, utt.features)
        try:
            t, c, r, dlogits = joint_loss_and_grad(logits, utt.labels, pfr_cfg)
        except InfeasibleError as exc:
            raise InfeasibleError(exc.frames, exc.required, utt_id=utt.id) from None
        g = encoder_backward(params, enc_cfg, cache, dlogits)
        for k in grads:
            grads[k] += g[k]
        tot += t
        ctc += c
        reg += r
    n = len(utts)
    return tot / n, ctc / n, reg / n, {k: v / n for k, v in grads.items()}


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    step: int
    lr: float
    ctc_loss: float
    pfr_loss: float
    total: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    evals: list[tuple[int, LatencyReport]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in self.records:
            w.writerow([r.epoch, r.step, repr(r.lr), repr(r.ctc_loss),
                        repr(r.pfr_loss), repr(r.total)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        recs = []
        for row in csv.DictReader(io.StringIO(text)):
            recs.append(EpochRecord(int(row["epoch"]), int(row["step"]), float(row["lr"]),
                                    float(row["ctc_loss"]), float(row["pfr_loss"]),
                                    float(row["total"])))
        return cls(recs)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


@dataclass
class Checkpoint:
    params: Params
    encoder_config: EncoderConfig
    train_config: TrainConfig
    epoch: int
    metrics: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "encoder_config": self.encoder_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "metrics": self.metrics,
            "param_names": list(self.params),
        }
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(str(data["meta"]))
                if meta.get("version") != CHECKPOINT_VERSION:
                    raise CheckpointError(
                        f"{path}: checkpoint version {meta.get('version')!r}, "
                        f"expected {CHECKPOINT_VERSION}")
                params = {k: np.array(data[f"param_{k}"]) for k in meta["param_names"]}
        except CheckpointError:
            raise
        except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        enc = EncoderConfig(**meta["encoder_config"])
        known = {f.name for f in fields(TrainConfig)}
        tc = TrainConfig(**{k: v for k, v in meta["train_config"].items() if k in known})
        return cls(params, enc, tc, int(meta["epoch"]), meta.get("metrics", {}))


def train(dataset: Dataset, enc_cfg: EncoderConfig, cfg: TrainConfig,
          checkpoint_dir: str | Path | None = None,
          eval_dataset: Dataset | None = None) -> tuple[Checkpoint, TrainingLog]:
    """Optimize the encoder; returns the parameter-averaged model and the log.

    Each epoch visits the utterances in a seeded random order. With
    ``checkpoint_dir`` set, every epoch's parameters are written as
    ``epoch_XXX.npz``.
    """
    utts = list(dataset)
    if not utts:
        raise UsageError("cannot train on an empty dataset")
    check_feasible(utts)
    pfr_cfg = cfg.pfr_config
    rng = np.random.default_rng(cfg.seed)
    params = init_params(enc_cfg, cfg.seed)
    state = AdamState.zeros_like(params)
    recent: deque[Params] = deque(maxlen=cfg.average_last_k)
    log = TrainingLog()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    lr = 0.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(utts))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = [utts[i] for i in order[start:start + cfg.batch_size]]
            tot, ctc, reg, grads = batch_loss_and_grads(params, enc_cfg, batch, pfr_cfg)
            sums += np.array([tot, ctc, reg]) * len(batch)
            lr = lr_at_step(cfg.base_lr, cfg.warmup_steps, state.step + 1)
            params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        mean_tot, mean_ctc, mean_reg = sums / len(utts)
        rec = EpochRecord(epoch, state.step, lr, float(mean_ctc), float(mean_reg), float(mean_tot))
        log.records.append(rec)
        logger.info("epoch %d step %d lr %.3g ctc %.4f pfr %.4f", epoch, state.step, lr,
                    mean_ctc, mean_reg)
        recent.append({k: v.copy() for k, v in params.items()})
        running = asdict(rec)
        if eval_dataset is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            rep = evaluate(Checkpoint(params, enc_cfg, cfg, epoch), eval_dataset)
            log.evals.append((epoch, rep))
            running["eval"] = asdict(rep)
        if ckdir is not None:
            Checkpoint(params, enc_cfg, cfg, epoch, running).save(ckdir / f"epoch_{epoch:03d}.npz")

    final = Checkpoint(average_params(list(recent)), enc_cfg, cfg, cfg.epochs,
                       asdict(log.records[-1]))
    return final, log


def posteriors(checkpoint: Checkpoint, utt: Utterance) -> np.ndarray:
    """Unit-temperature output distribution for one utterance."""
    logits, _ = encoder_forward(checkpoint.params, checkpoint.encoder_config, utt.features)
    return tempered_softmax_rows(logits, 1.0)


def decode_dataset(checkpoint: Checkpoint, dataset: Dataset,
                   peak_rule: str = "max") -> list[DecodeResult]:
    return [greedy_decode(posteriors(checkpoint, u), peak_rule) for u in dataset]


def check_compatible(checkpoint: Checkpoint, dataset: Dataset) -> None:
    enc = checkpoint.encoder_config
    if dataset.feature_dim is not None and dataset.feature_dim != enc.feature_dim:
        raise UsageError(f"dataset feature_dim {dataset.feature_dim} != model {enc.feature_dim}")
    if dataset.max_label >= enc.vocab_size:
        raise UsageError(f"dataset uses token id {dataset.max_label} but model vocab_size "
                         f"is {enc.vocab_size}")


def evaluate(checkpoint: Checkpoint, dataset: Dataset, peak_rule: str = "max") -> LatencyReport:
    """Greedy-decode every utterance and aggregate CER / APL / PR50 / PR90."""
    check_compatible(checkpoint, dataset)
    decodes = decode_dataset(checkpoint, dataset, peak_rule)
    return latency_report(decodes, list(dataset))
