"""Mini-batch training, transfer-style fine-tuning, and fold evaluation.

The three configuration regimes map onto two knobs: freeze_prefix (how
many leading parameterized layers stay fixed) and the augmentation policy.
Configuration 1 trains the head only, configuration 2 also unfreezes the
final feature block, configuration 3 is configuration 2 plus augmentation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import arch
from . import evalkit
from . import nn
from .dataset import AugmentPolicy, LabeledDataset, SplitPlan, augment, preprocess


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    optimizer: nn.OptimConfig = field(
        default_factory=lambda: nn.OptimConfig(kind="adam", learning_rate=1e-3))
    augment: AugmentPolicy | None = None
    freeze_prefix: int = 0
    seed: int = 0
    early_stop_patience: int | None = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.freeze_prefix < 0:
            raise ValueError("freeze_prefix must be >= 0")


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)


def _stack_inputs(samples, side: int):
    x = np.stack([preprocess(img, side) for img, _ in samples])
    y = np.array([cls for _, cls in samples], dtype=np.int64)
    return x, y


def _forward_chunked(model: arch.Model, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = [model.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def train(model: arch.Model, ds: LabeledDataset, plan: SplitPlan,
          val_fold: int, cfg: TrainConfig):
    """Train a copy of the model on every fold except val_fold."""
    return _fit(model.clone(), ds, plan, val_fold, cfg)


def fine_tune(base: arch.Model, ds: LabeledDataset, plan: SplitPlan,
              val_fold: int, cfg: TrainConfig):
    """Continue training from base parameters, typically with a frozen prefix."""
    return _fit(base.clone(), ds, plan, val_fold, cfg)


def _fit(model: arch.Model, ds, plan, val_fold, cfg):
    if val_fold >= plan.k:
        raise ValueError(f"val_fold {val_fold} out of range for k={plan.k}")
    param_layers = model.parameterized_indices()
    if cfg.freeze_prefix > len(param_layers):
        raise ValueError(
            f"freeze_prefix {cfg.freeze_prefix} exceeds {len(param_layers)} "
            "parameterized layers")

    train_idx = np.flatnonzero(plan.fold_assignment != val_fold)
    if train_idx.size == 0:
        raise ValueError("training partition is empty")
    side = model.spec.input_side
    x_train, y_train = _stack_inputs([ds.samples[i] for i in train_idx], side)
    val_idx = np.flatnonzero(plan.fold_assignment == val_fold)
    x_val, y_val = (_stack_inputs([ds.samples[i] for i in val_idx], side)
                    if val_idx.size else (None, None))

    trainable = [p for li in param_layers[cfg.freeze_prefix:]
                 for p in model.layers[li].params]
    grads = [g for li in param_layers[cfg.freeze_prefix:]
             for g in model.layers[li].grads]
    opt = nn.Optimizer(cfg.optimizer)
    # Separate streams keep shuffling identical whether or not augmentation
    # draws happen (an identity policy then trains bit-identically to none).
    shuffle_ss, augment_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(augment_ss)

    history = History()
    best_val = -np.inf
    stale = 0
    n = len(x_train)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        if cfg.augment is not None:
            aug_states = aug_rng.integers(0, 2 ** 62, size=n)
        loss_sum = 0.0
        hits = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = x_train[batch]
            if cfg.augment is not None:
                xb = np.stack([augment(x, cfg.augment, int(aug_states[i]))
                               for x, i in zip(xb, batch)])
            logits = model.forward(xb)
            loss, dlogits = nn.cross_entropy_batch(logits, y_train[batch])
            model.backward(dlogits)
            opt.step(trainable, grads)
            loss_sum += loss * len(batch)
            hits += int((logits.argmax(axis=1) == y_train[batch]).sum())
        history.train_loss.append(loss_sum / n)
        history.train_acc.append(hits / n)

        if x_val is not None:
            preds = _forward_chunked(model, x_val).argmax(axis=1)
            val_acc = float((preds == y_val).mean())
        else:
            val_acc = float("nan")
        history.val_acc.append(val_acc)

        if cfg.early_stop_patience is not None and x_val is not None:
            if val_acc > best_val:
                best_val, stale = val_acc, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return model, history


def evaluate_model(model: arch.Model, ds: LabeledDataset, plan: SplitPlan,
                   fold: int, use_forced_test: bool = False) -> evalkit.MetricsReport:
    """Argmax evaluation on one fold, or on the forced test partition."""
    if use_forced_test:
        samples = list(ds.forced_test)
    else:
        idx = np.flatnonzero(plan.fold_assignment == fold)
        samples = [ds.samples[i] for i in idx]
    if not samples:
        raise ValueError("evaluation partition is empty")
    x, y = _stack_inputs(samples, model.spec.input_side)
    preds = _forward_chunked(model, x).argmax(axis=1)
    cm = evalkit.confusion_matrix(preds.tolist(), y.tolist(), ds.num_classes)
    return evalkit.compute_metrics(cm)


def config_freeze_prefix(model: arch.Model, config: int) -> int:
    """freeze_prefix realizing the configuration ladder for this model.

    Feature layers are the parameterized layers before the first dense;
    the final block is the trailing VGG conv pair, or a single trailing
    inception layer.
    """
    if config not in (1, 2, 3):
        raise ValueError("config must be 1, 2, or 3")
    ops = [model.spec.layers[i].op for i in model.parameterized_indices()]
    n_features = sum(1 for op in ops if op != arch.DENSE)
    if config == 1:
        return n_features
    last_group = 1 if ops[n_features - 1] == arch.INCEPTION else 2
    return max(0, n_features - last_group)


def apply_config(cfg: TrainConfig, model: arch.Model, config: int,
                 augment_policy: AugmentPolicy | None = None) -> TrainConfig:
    """Derive a TrainConfig for configuration 1, 2, or 3."""
    policy = None
    if config == 3:
        policy = augment_policy or AugmentPolicy(
            rotate_degrees_max=10.0, translate_px_max=4,
            horizontal_flip=True, vertical_flip=True,
            contrast_range=(0.8, 1.2))
    return replace(cfg, freeze_prefix=config_freeze_prefix(model, config),
                   augment=policy)


def save_checkpoint(model: arch.Model, path, info: dict | None = None) -> None:
    """fp32 blob plus a JSON sidecar with run details."""
    from . import engine

    path = Path(path)
    path.write_bytes(engine.serialize(model))
    sidecar = dict(info or {})
    sidecar.setdefault("format", "pvtm-fp32")
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", "utf-8")


def load_checkpoint(path):
    from . import engine

    path = Path(path)
    instance = engine.parse(path.read_bytes())
    sidecar_path = path.with_suffix(path.suffix + ".json")
    info = json.loads(sidecar_path.read_text("utf-8")) if sidecar_path.exists() else {}
    return instance.float_model(), info
