"""AdamW optimizer and the pretrain/finetune loops.

Pretraining trains every parameter of a freshly built model on task A and
serializes the full parameter set. Finetuning loads that checkpoint, attaches
adapters, swaps in a freshly seeded classifier head for the new task (the
usual transfer protocol; the head draw is identical across schemes for a
given seed), and trains only the adapter factors and the head. Every adapted
projection still computes exactly the pretrained map at step 0. Per-epoch
(train_loss, eval_metric) rows feed a CSV with fixed formatting so identical
runs produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, adapter_store, init_adapters, load_adapters
from .errors import ConfigError, DivergenceError, ShapeError
from .model import (
    ModelConfig,
    ToyModel,
    attach_adapters,
    backward,
    build_model,
    forward,
    model_from_store,
    softmax_xent,
)
from .seeding import named_rng
from .store import TensorStore
from .tasks import SynthTask

ADAM_EPS = 1e-8
LOSS_CEILING = 1e3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        b1, b2 = self.betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: dict, cfg: TrainConfig, step: int) -> None:
    """One bias-corrected AdamW update, in place, with decoupled weight decay."""
    if step < 1:
        raise ConfigError(f"step must be at least 1, got {step}")
    b1, b2 = cfg.betas
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param has {p.shape}")
        if name not in state:
            state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
        m = state[name]["m"]
        v = state[name]["v"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1**step)
        vhat = v / (1.0 - b2**step)
        p -= cfg.learning_rate * (cfg.weight_decay * p + mhat / (np.sqrt(vhat) + ADAM_EPS))


def evaluate(model: ToyModel, tokens: np.ndarray, labels: np.ndarray) -> float:
    """Classification accuracy on a fixed evaluation set."""
    logits, _ = forward(model, tokens)
    return float((logits.argmax(axis=1) == labels).mean())


CurveRow = tuple[int, float, float]


def train(model: ToyModel, task: SynthTask, cfg: TrainConfig) -> list[CurveRow]:
    """Epoch loop over shuffled minibatches; returns (epoch, loss, accuracy) rows.

    Aborts with DivergenceError when any batch loss is non-finite or exceeds
    the loss ceiling.
    """
    if task.num_classes != model.cfg.num_classes:
        raise ConfigError(
            f"task has {task.num_classes} classes, model head has {model.cfg.num_classes}"
        )
    tokens, labels = task.train_data()
    eval_tokens, eval_labels = task.eval_data()
    order = named_rng(cfg.seed, "batch_order")
    state: dict = {}
    step = 0
    rows: list[CurveRow] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = order.permutation(len(tokens))
        total = 0.0
        for start in range(0, len(tokens), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits, cache = forward(model, tokens[idx])
            loss, dlogits = softmax_xent(logits, labels[idx])
            if not np.isfinite(loss) or loss > LOSS_CEILING:
                raise DivergenceError(
                    f"loss {loss} at epoch {epoch}, step {step + 1}; "
                    f"lower the learning rate or check the inputs"
                )
            grads = backward(model, cache, dlogits)
            step += 1
            adamw_step(model.trainable_tensors(), grads, state, cfg, step)
            model.version += 1
            total += loss * len(idx)
        rows.append((epoch, total / len(tokens), evaluate(model, eval_tokens, eval_labels)))
    return rows


def pretrain(model_cfg: ModelConfig, task: SynthTask, cfg: TrainConfig) -> tuple[ToyModel, list[CurveRow]]:
    """Train a fresh model end to end on ``task``; all parameters trainable."""
    model = build_model(model_cfg)
    rows = train(model, task, cfg)
    return model, rows


def finetune(pretrained: TensorStore, adapter_cfg: AdapterConfig, task: SynthTask,
             cfg: TrainConfig) -> tuple[ToyModel, list[CurveRow]]:
    """Adapt a pretrained checkpoint to ``task``.

    The classifier head is re-drawn from the run seed so the new task starts
    from an untrained readout; only adapter factors and the head receive
    updates, while bases, FFNs, layer norms, and embeddings stay frozen.
    """
    model = model_from_store(pretrained)
    adapters = init_adapters(pretrained, adapter_cfg)
    attach_adapters(model, adapters)
    classes, dim = model.params["classifier.weight"].shape
    std = np.sqrt(2.0 / (classes + dim))
    rng = named_rng(cfg.seed, "classifier.weight")
    model.params["classifier.weight"] = rng.normal(0.0, std, size=(classes, dim))
    model.params["classifier.bias"] = np.zeros(classes)
    model.version += 1
    rows = train(model, task, cfg)
    return model, rows


def finetune_store(model: ToyModel, adapter_cfg: AdapterConfig) -> TensorStore:
    """Checkpoint of a finetuned model: adapter factors, bases, classifier."""
    store = adapter_store(model.adapters, adapter_cfg)
    store.add("classifier.weight", model.params["classifier.weight"])
    store.add("classifier.bias", model.params["classifier.bias"].reshape(1, -1))
    store.metadata.update(model.cfg.to_metadata())
    return store


def apply_finetune(pretrained: TensorStore, finetuned: TensorStore) -> ToyModel:
    """Rebuild the finetuned model from the pretrain + adapter checkpoints."""
    model = model_from_store(pretrained)
    adapters, _ = load_adapters(finetuned)
    attach_adapters(model, adapters)
    for name in ("classifier.weight", "classifier.bias"):
        if name not in finetuned:
            raise ConfigError(f"finetune checkpoint is missing {name!r}")
    head = finetuned["classifier.weight"]
    bias = finetuned["classifier.bias"].reshape(-1)
    if head.shape != model.params["classifier.weight"].shape:
        raise ConfigError(
            f"classifier shape {head.shape} does not match the model "
            f"{model.params['classifier.weight'].shape}"
        )
    model.params["classifier.weight"] = head.copy()
    model.params["classifier.bias"] = bias.copy()
    model.version += 1
    return model


def write_curves(rows: list[CurveRow], path) -> None:
    """CSV with header epoch,train_loss,eval_metric; 6 significant digits, LF."""
    lines = ["epoch,train_loss,eval_metric"]
    for epoch, loss, metric in rows:
        lines.append(f"{epoch},{loss:.6g},{metric:.6g}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))
