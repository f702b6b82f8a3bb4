"""Training loop, Adam, the halving learning-rate schedule, and evaluation.

The schedule and optimiser defaults mirror the reference recipe: batch size
64, Adam starting at 1e-4, and the rate halved every 5 epochs.  After the
last epoch the model is rolled back to the epoch with the best validation
accuracy (earliest epoch wins ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig
from .model import Model, build_model
from .tensor import Rng, Tensor, backward, log_softmax_rows


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    initial_lr: float = 1e-4
    epochs: int = 20
    lr_halving_period: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_halving_period < 1:
            raise ValueError(f"lr_halving_period must be >= 1, got {self.lr_halving_period}")
        if not (self.initial_lr > 0):
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {b}")


def lr_at_epoch(initial_lr: float, epoch: int, halving_period: int) -> float:
    """Step schedule: the rate is halved once per full period elapsed."""
    return initial_lr * 0.5 ** (epoch // halving_period)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"labels shape {labels.shape} does not match "
                         f"logits batch {logits.shape[0]}")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    logp = log_softmax_rows(logits)
    return (logp * onehot).sum() * (-1.0 / n)


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                     v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor],
              state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype)


# -- metrics ------------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by the rank statistic.

    Equivalent to the probability that a random positive outscores a random
    negative, ties counting one half.  Requires both classes present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average the ranks inside each tied group
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalResult:
    accuracy: float
    auc: float | None
    auc_defined: bool
    note: str = ""


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _stack(dataset, indices) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([dataset.images[i] for i in indices]).astype(np.float32)
    y = np.asarray([dataset.labels[i] for i in indices], dtype=np.int64)
    return x, y


def evaluate(model: Model, dataset, batch_size: int = 64) -> EvalResult:
    """Eval-mode accuracy and (for binary data) AUC of the class-1 score."""
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    scores = np.empty(n, dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    pos = 0
    for idx in _batches(n, batch_size):
        x, y = _stack(dataset, idx)
        logits = model.forward(x, mode="eval").data
        correct += int((logits.argmax(axis=1) == y).sum())
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        scores[pos:pos + len(idx)] = probs[:, 1] if logits.shape[1] >= 2 else probs[:, 0]
        labels[pos:pos + len(idx)] = y
        pos += len(idx)
    accuracy = correct / n
    if logits.shape[1] != 2:
        return EvalResult(accuracy, None, False, "AUC defined for two classes only")
    if len(set(labels.tolist())) < 2:
        return EvalResult(accuracy, None, False, "AUC undefined: one class present")
    return EvalResult(accuracy, roc_auc(scores, labels), True)


# -- the loop -------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    val_auc: float | None


@dataclass
class RunHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0

    def final(self) -> EpochStats:
        return self.epochs[-1]

    def to_table(self) -> str:
        lines = ["# epoch lr train_loss train_acc val_acc val_auc"]
        for s in self.epochs:
            auc = f"{s.val_auc:.6f}" if s.val_auc is not None else "-"
            lines.append(f"{s.epoch} {s.lr:.10g} {s.train_loss:.6f} "
                         f"{s.train_acc:.6f} {s.val_acc:.6f} {auc}")
        lines.append(f"# best_epoch {self.best_epoch} val_acc {self.best_val_acc:.6f}")
        return "\n".join(lines) + "\n"


def train(model: Model, train_set, val_set, tcfg: TrainConfig,
          early_stop_train_acc: float | None = None, log=None) -> RunHistory:
    """Adam training with per-epoch validation and best-epoch rollback.

    Shuffling is driven by a child stream keyed on the epoch number, so a
    given (data, seed) pair replays exactly.  Non-finite losses abort the run
    rather than letting the optimiser chase them.
    """
    tcfg.validate()
    params = model.params()
    adam = init_adam(params)
    rng = Rng(tcfg.seed)
    n = len(train_set.labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    history = RunHistory()
    best_snapshot = None
    best_acc = -1.0
    for epoch in range(tcfg.epochs):
        lr = lr_at_epoch(tcfg.initial_lr, epoch, tcfg.lr_halving_period)
        order = rng.child("shuffle", epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for batch_no, idx in enumerate(_batches(n, tcfg.batch_size, order)):
            x, y = _stack(train_set, idx)
            try:
                logits = model.forward(x, mode="train")
                loss = cross_entropy_loss(logits, y)
                loss_val = loss.item()
            except ValueError as e:
                # non-finite activations trip the op-level guards
                raise RuntimeError(f"training diverged at epoch {epoch}, "
                                   f"batch {batch_no}: {e}") from None
            if not np.isfinite(loss_val):
                raise RuntimeError(f"training diverged at epoch {epoch}, "
                                   f"batch {batch_no}: non-finite loss")
            grads = backward(loss, params)
            adam_step(params, grads, adam, lr, tcfg)
            loss_sum += loss_val * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        train_loss = loss_sum / n
        train_acc = correct / n
        val = evaluate(model, val_set, tcfg.batch_size)
        history.epochs.append(EpochStats(epoch, lr, train_loss, train_acc,
                                         val.accuracy, val.auc))
        if val.accuracy > best_acc:
            best_acc = val.accuracy
            history.best_epoch = epoch
            history.best_val_acc = val.accuracy
            best_snapshot = model.state_snapshot()
        if log is not None:
            log(f"epoch {epoch}: lr {lr:.3g} loss {train_loss:.4f} "
                f"train_acc {train_acc:.3f} val_acc {val.accuracy:.3f}")
        if early_stop_train_acc is not None and train_acc >= early_stop_train_acc:
            break
    if best_snapshot is not None:
        model.load_state_snapshot(best_snapshot)
    return history


# -- ablation variants ----------------------------------------------------------


def attention_ablation_variants(cfg: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The four attention on/off combinations of the fused architecture."""
    return [
        ("full", cfg),
        ("w/o self-attention", replace(cfg, self_attention_enabled=False)),
        ("w/o CBAM", replace(cfg, cbam_enabled=False)),
        ("w/o both", replace(cfg, self_attention_enabled=False, cbam_enabled=False)),
    ]


def fusion_ablation_variants(cfg: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """Middle-flow structure sweep: branch sets against the original chain."""
    return [
        ("branches 1,2,3", replace(cfg, middle_branches=(1, 2, 3))),
        ("branches 1,2,3,4", replace(cfg, middle_branches=(1, 2, 3, 4))),
        ("branches 1,2", replace(cfg, middle_branches=(1, 2))),
        ("single branch 1", replace(cfg, middle_branches=(1,))),
        ("single branch 2", replace(cfg, middle_branches=(2,))),
        ("single branch 3", replace(cfg, middle_branches=(3,))),
        ("original middle flow", replace(cfg, middle_flow_kind="original_xception")),
    ]


@dataclass
class AblationRow:
    label: str
    mean_train_loss: float
    mean_train_acc: float
    mean_val_acc: float
    seeds: tuple[int, ...]


def run_ablation(variants, train_set, val_set, tcfg: TrainConfig,
                 seeds, log=None) -> list[AblationRow]:
    """Train each variant from scratch once per seed; report mean final stats."""
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    rows = []
    for label, cfg in variants:
        losses, train_accs, val_accs = [], [], []
        for seed in seeds:
            model = build_model(cfg, seed=seed)
            hist = train(model, train_set, val_set, replace(tcfg, seed=seed))
            losses.append(hist.final().train_loss)
            train_accs.append(hist.final().train_acc)
            val_accs.append(hist.final().val_acc)
            if log is not None:
                log(f"{label} seed {seed}: final loss {losses[-1]:.4f} "
                    f"train_acc {train_accs[-1]:.3f}")
        rows.append(AblationRow(label, float(np.mean(losses)),
                                float(np.mean(train_accs)),
                                float(np.mean(val_accs)), seeds))
    return rows
