"""The recurrent knowledge tracer: encoding, batching, training, inference.

Every interaction is encoded as a single integer token s + y*K so each skill
owns distinct correct/incorrect tokens. The network consumes token sequences
and emits a probability for every skill at every step; the training target at
position t is the correctness of the next interaction, selected at the next
interaction's skill column. Loss positions without a next step are masked
out.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from . import nncore
from .ingest import StudentSequence
from .records import MasteryTrajectory, PredictionRecord

Array = np.ndarray


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# interaction encoding


def encode_step(s: int, y: int, k: int) -> int:
    """Map (skill, correctness) to the token index s + y*K."""
    if not 0 <= s < k:
        raise ValueError(f"skill index {s} out of range [0, {k})")
    if y not in (0, 1):
        raise ValueError(f"correctness must be 0 or 1, got {y}")
    return s + y * k


def decode_step(x: int, k: int) -> Tuple[int, int]:
    """Inverse of encode_step: (x mod K, x div K)."""
    if not 0 <= x < 2 * k:
        raise ValueError(f"token {x} out of range [0, {2 * k})")
    return x % k, x // k


# ---------------------------------------------------------------------------
# batching


@dataclass
class EncodedBatch:
    """Padded model inputs for a group of sequence windows.

    ``x`` holds interaction tokens, ``s``/``y`` the parallel skill indices
    and labels, ``w`` the validity mask (1 where a next-step target exists
    within the row). Padded cells carry ``pad_index`` in x and s and 0 in w.
    """

    x: Array         # (B, T) int
    s: Array         # (B, T) int
    y: Array         # (B, T) int
    w: Array         # (B, T) float, entries in {0, 1}
    lengths: Array   # (B,) true window lengths
    pad_index: int
    k: int

    @property
    def max_t(self) -> int:
        return self.x.shape[1]

    def lookup_tokens(self) -> Array:
        """Token matrix safe to feed to the embedding: padding cells are
        remapped to token 0 (their outputs are masked, so the value never
        reaches the loss)."""
        return np.where(self.x == self.pad_index, 0, self.x)

    def next_skills(self) -> Array:
        """Target skill at position t is the skill of step t+1 in-row."""
        out = np.zeros_like(self.s)
        out[:, :-1] = self.s[:, 1:]
        return np.where(out == self.pad_index, 0, out)

    def next_labels(self) -> Array:
        out = np.zeros_like(self.y)
        out[:, :-1] = self.y[:, 1:]
        return out.astype(np.float64)


def _windows(steps: Sequence[Tuple[int, int, int]], max_t: int) -> List[Sequence[Tuple[int, int, int]]]:
    # non-overlapping consecutive windows; hidden state is not carried across
    chunks = [steps[i : i + max_t] for i in range(0, len(steps), max_t)]
    # a trailing window of length 1 holds no next-step target
    return [c for c in chunks if len(c) >= 2]


def build_batch(
    sequences: Sequence[StudentSequence], k: int, max_t: int
) -> EncodedBatch:
    """Encode a group of sequences into one padded batch.

    Sequences longer than ``max_t`` are split into consecutive windows; the
    hidden state is not carried across windows.
    """
    if not sequences:
        raise ValueError("build_batch: empty input")
    windows: List[Sequence[Tuple[int, int, int]]] = []
    for seq in sequences:
        if len(seq) < 2:
            raise ValueError(
                f"sequence for student {seq.user_id} has {len(seq)} steps; need >= 2"
            )
        windows.extend(_windows(seq.steps, max_t))

    b = len(windows)
    t_max = max(len(w) for w in windows)
    pad = 2 * k
    x = np.full((b, t_max), pad, dtype=np.int64)
    s = np.full((b, t_max), pad, dtype=np.int64)
    y = np.zeros((b, t_max), dtype=np.int64)
    w = np.zeros((b, t_max), dtype=np.float64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, win in enumerate(windows):
        t_i = len(win)
        lengths[i] = t_i
        for t, (skill, _, label) in enumerate(win):
            x[i, t] = encode_step(skill, label, k)
            s[i, t] = skill
            y[i, t] = label
        w[i, : t_i - 1] = 1.0
    return EncodedBatch(x=x, s=s, y=y, w=w, lengths=lengths, pad_index=pad, k=k)


# ---------------------------------------------------------------------------
# model


@dataclass
class TrainConfig:
    embedding_dim: int = 64
    hidden_dim: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_t: int = 200
    clip_norm: float = 5.0
    patience: int = 3
    max_epochs: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class DktModel:
    """Network parameters plus the vocabulary/config they were trained
    against. K is the number of skills; the embedding has 2K rows."""

    net: nncore.DktNet
    k: int
    vocab_hash: str = ""
    config: dict = field(default_factory=dict)

    @classmethod
    def init(cls, k: int, cfg: TrainConfig, vocab_hash: str = "") -> "DktModel":
        net = nncore.init_net(2 * k, cfg.embedding_dim, cfg.hidden_dim, k, seed=cfg.seed)
        return cls(net=net, k=k, vocab_hash=vocab_hash, config=cfg.to_dict())

    @classmethod
    def zeros(cls, k: int, embedding_dim: int = 64, hidden_dim: int = 128) -> "DktModel":
        net = nncore.zero_net(2 * k, embedding_dim, hidden_dim, k)
        return cls(net=net, k=k)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict
    validation-loss improvement; remembers the best epoch."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _dataset_loss(
    net: nncore.DktNet, sequences: Sequence[StudentSequence], k: int, cfg: TrainConfig
) -> float:
    """Mean masked BCE over all valid positions of a sequence set."""
    total = 0.0
    count = 0.0
    for start in range(0, len(sequences), cfg.batch_size):
        batch = build_batch(sequences[start : start + cfg.batch_size], k, cfg.max_t)
        loss = nncore.net_loss(
            net, batch.lookup_tokens(), batch.next_skills(), batch.next_labels(), batch.w
        )
        n_valid = float(batch.w.sum())
        total += loss * n_valid
        count += n_valid
    if count == 0:
        raise ValueError("no valid targets in dataset")
    return total / count


def train(
    train_seqs: Sequence[StudentSequence],
    val_seqs: Sequence[StudentSequence],
    k: int,
    cfg: TrainConfig | None = None,
    vocab_hash: str = "",
) -> Tuple[DktModel, List[EpochStats]]:
    """Minimize the masked BCE with Adam, gradient clipping, and early
    stopping on validation loss; returns the best-validation checkpoint and
    the per-epoch log."""
    if not train_seqs or not val_seqs:
        raise ValueError("train and validation sets must be nonempty")
    cfg = cfg or TrainConfig()
    model = DktModel.init(k, cfg, vocab_hash=vocab_hash)
    net = model.net
    state = nncore.AdamState.for_params(net.flat(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    best_net = net.copy()
    log: List[EpochStats] = []

    train_list = list(train_seqs)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_list))
        epoch_total = 0.0
        epoch_count = 0.0
        for batch_no, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [train_list[i] for i in order[start : start + cfg.batch_size]]
            batch = build_batch(chunk, k, cfg.max_t)
            loss, grads = nncore.net_loss_and_grads(
                net, batch.lookup_tokens(), batch.next_skills(), batch.next_labels(), batch.w
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            grads = nncore.clip_global_norm(grads, cfg.clip_norm)
            new_params, state = nncore.adam_update(net.flat(), grads, state)
            net = nncore.from_flat(new_params)
            n_valid = float(batch.w.sum())
            epoch_total += loss * n_valid
            epoch_count += n_valid

        val_loss = _dataset_loss(net, list(val_seqs), k, cfg)
        seconds = time.perf_counter() - t0
        log.append(
            EpochStats(
                epoch=epoch,
                train_loss=epoch_total / epoch_count,
                val_loss=val_loss,
                seconds=seconds,
            )
        )
        improved = val_loss < stopper.best_loss
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_net = net.copy()
        if stop:
            break

    model.net = best_net
    return model, log


# ---------------------------------------------------------------------------
# inference


def mastery_trajectory(model: DktModel, sequence: StudentSequence) -> MasteryTrajectory:
    """Full T x K probability matrix; row t is computed from steps 0..t only
    (the recurrence is causal, so truncating the input reproduces a prefix of
    the rows bit-identically)."""
    if len(sequence) < 1:
        raise ValueError("sequence must have at least one step")
    tokens = np.array(
        [[encode_step(s, y, model.k) for s, _, y in sequence.steps]], dtype=np.int64
    )
    probs, _ = nncore.net_forward(model.net, tokens)
    return MasteryTrajectory(
        user_id=sequence.user_id, p=probs[0], steps=list(sequence.steps)
    )


def predict_next(
    model: DktModel, prefix: StudentSequence, next_skill: int
) -> float:
    """Probability of answering a next_skill item correctly after the given
    prefix (the last trajectory row at the next skill's column)."""
    if not 0 <= next_skill < model.k:
        raise ValueError(f"unknown skill index {next_skill} (K={model.k})")
    traj = mastery_trajectory(model, prefix)
    return float(traj.p[-1, next_skill])


PROB_FLOOR = 1e-12  # dump probabilities stay inside the open unit interval


def predict_records(
    model: DktModel, sequences: Sequence[StudentSequence], tag: str
) -> Tuple[List[PredictionRecord], List[PredictionRecord]]:
    """Next-step prediction rows and mastery-path rows for a sequence set.

    Both come from one forward pass per student over the full sequence: the
    prediction for target position t reads row t-1 at the target skill, the
    mastery path reads row t at the practiced skill. Saturated sigmoid
    outputs (exact 0.0/1.0 in float64) are nudged back inside (0, 1).
    """

    def emitted(p: float) -> float:
        return min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)

    predictions: List[PredictionRecord] = []
    mastery: List[PredictionRecord] = []
    for seq in sequences:
        traj = mastery_trajectory(model, seq)
        for t, (skill, _, y) in enumerate(seq.steps):
            if t >= 1:
                predictions.append(
                    PredictionRecord(
                        user_id=seq.user_id,
                        step=t,
                        skill=skill,
                        y_true=y,
                        p=emitted(float(traj.p[t - 1, skill])),
                        model_tag=tag,
                    )
                )
            mastery.append(
                PredictionRecord(
                    user_id=seq.user_id,
                    step=t,
                    skill=skill,
                    y_true=y,
                    p=emitted(float(traj.p[t, skill])),
                    model_tag=tag,
                )
            )
    return predictions, mastery


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(model: DktModel, path: str | Path) -> None:
    """Single-file container: all parameter tensors plus a JSON meta blob
    (version, K, vocab hash, training config)."""
    meta = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "k": model.k,
            "vocab_hash": model.vocab_hash,
            "config": model.config,
        },
        sort_keys=True,
    )
    tensors = {f"param_{name}": arr for name, arr in model.net.flat().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8), **tensors)


def load_checkpoint(path: str | Path, expect_vocab_hash: str | None = None) -> DktModel:
    """Load a checkpoint; a vocabulary-hash mismatch is an error."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        tensors = {
            name[len("param_") :]: data[name] for name in data.files if name.startswith("param_")
        }
    if expect_vocab_hash is not None and meta["vocab_hash"] != expect_vocab_hash:
        raise ValueError(
            "checkpoint vocabulary hash does not match the workspace vocabulary "
            f"({meta['vocab_hash'][:12]}... vs {expect_vocab_hash[:12]}...)"
        )
    return DktModel(
        net=nncore.from_flat(tensors),
        k=int(meta["k"]),
        vocab_hash=meta["vocab_hash"],
        config=meta.get("config", {}),
    )
