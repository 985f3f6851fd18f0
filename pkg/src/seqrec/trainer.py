"""Masked-item training loop with Adam, gradient clipping, and checkpoints.

All weight matrices (embedding tables included) start from a truncated
normal in [-0.02, 0.02]; biases start at zero and layer-norm gains at one.
The learning rate decays linearly to zero over the planned total steps, the
global gradient norm is clipped at a threshold, and decoupled weight decay
applies to every parameter with two or more axes (so biases and layer-norm
vectors are exempt while embeddings are not).

Per-epoch random streams are derived from (seed, purpose, epoch), which is
what makes resuming from an epoch checkpoint reproduce an uninterrupted run
bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import InteractionDataset, LeaveOneOutSplit, MaskedBatch, make_training_batches
from .errors import ConfigMismatchError, ContractError, IntegrityError, NonFiniteLossError
from .evaluate import ModelScorer, evaluate
from .model import LayerParams, ModelConfig, ModelParams, TransformerRecommender
from .seeds import derive_rng, derive_seed
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"SQRC"
CHECKPOINT_VERSION = 1

INIT_STD = 0.02
INIT_BOUND = 0.02


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    last_item_instances: int = 1
    masks_per_instance: int | None = None
    val_every: int = 1
    val_num_negatives: int = 100


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_hr10: float
    val_ndcg10: float
    lr: float
    wallclock_s: float

    def as_line(self) -> str:
        return "\t".join([
            str(self.epoch),
            f"{self.loss:.6f}",
            f"{self.val_hr10:.6f}",
            f"{self.val_ndcg10:.6f}",
            f"{self.lr:.8e}",
            f"{self.wallclock_s:.3f}",
        ])


LOG_HEADER = "epoch\tloss\tval_HR@10\tval_NDCG@10\tlr\twallclock_s"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    epoch: int
    total_steps: int
    seed: int
    settings: dict[str, float]
    dataset_fingerprint: str = ""
    best_metric: float = math.nan
    best_epoch: int = 0
    version: int = CHECKPOINT_VERSION


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list[EpochLog] = field(default_factory=list)
    samples_per_s: float = 0.0


# ----- initialization --------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                     bound: float = INIT_BOUND) -> np.ndarray:
    """Normal(0, std^2) draws, resampled until inside [-bound, bound]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters: truncated-normal weights, zero biases, unit gains."""
    config.validate()
    rng = derive_rng(seed, "init")
    d, dh = config.hidden_dim, config.head_dim

    def weight(*shape):
        return Tensor(truncated_normal(rng, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    layers = []
    item_embeddings = weight(config.vocab_rows, d)
    positional_embeddings = weight(config.max_len, d)
    for _ in range(config.num_layers):
        layers.append(LayerParams(
            wq=[weight(d, dh) for _ in range(config.num_heads)],
            wk=[weight(d, dh) for _ in range(config.num_heads)],
            wv=[weight(d, dh) for _ in range(config.num_heads)],
            wo=weight(d, d),
            ffn_w1=weight(d, config.ffn_dim),
            ffn_b1=zeros(config.ffn_dim),
            ffn_w2=weight(config.ffn_dim, d),
            ffn_b2=zeros(d),
            ln1_gain=ones(d),
            ln1_bias=zeros(d),
            ln2_gain=ones(d),
            ln2_bias=zeros(d),
        ))
    return ModelParams(
        item_embeddings=item_embeddings,
        positional_embeddings=positional_embeddings,
        layers=layers,
        out_w=weight(d, d),
        out_b=zeros(d),
        item_bias=zeros(config.num_items),
    )


# ----- loss and optimizer ------------------------------------------------------


def cloze_loss(batch: MaskedBatch, model: TransformerRecommender,
               training: bool = True, rng: np.random.Generator | None = None) -> Tensor:
    """Mean negative log-likelihood of the true items at masked positions."""
    hidden, _ = model.forward_ids(batch.input_ids, training=training, rng=rng)
    picked = T.select_positions(hidden, batch.label_rows, batch.label_positions)
    logits = model.output_logits(picked)
    return T.cross_entropy_mean(logits, batch.labels - 1)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], threshold: float = 5.0):
    """Scale all gradients down together when their global norm exceeds the cap."""
    if threshold <= 0:
        raise ContractError(f"clip threshold must be positive, got {threshold}")
    norm = global_grad_norm(grads)
    if norm > threshold:
        factor = threshold / norm
        for g in grads.values():
            g *= factor
    return grads


def lr_at(step: int, total_steps: int, base_lr: float = 1e-4) -> float:
    """Linear decay from base_lr at step 0 to zero at total_steps."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One Adam update with decoupled weight decay on matrix-shaped params."""
    state.t += 1
    t = state.t
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        if weight_decay and p.data.ndim >= 2:
            p.data *= 1.0 - lr * weight_decay  # decoupled decay, pre-update value
        p.data -= lr * update


# ----- training loop -----------------------------------------------------------


def _snapshot(model: TransformerRecommender, state: OptimizerState,
              settings: TrainSettings, *, epoch: int, total_steps: int,
              fingerprint: str, best_metric: float, best_epoch: int) -> Checkpoint:
    named = model.params.named()
    return Checkpoint(
        config=replace(model.config),
        params={k: t.data.copy() for k, t in named.items()},
        adam_m={k: state.m[k].copy() for k in named},
        adam_v={k: state.v[k].copy() for k in named},
        step=state.t,
        epoch=epoch,
        total_steps=total_steps,
        seed=settings.seed,
        settings={
            "base_lr": settings.base_lr,
            "beta1": settings.beta1,
            "beta2": settings.beta2,
            "eps": settings.eps,
            "weight_decay": settings.weight_decay,
            "clip_norm": settings.clip_norm,
        },
        dataset_fingerprint=fingerprint,
        best_metric=best_metric,
        best_epoch=best_epoch,
    )


def restore_model(checkpoint: Checkpoint) -> TransformerRecommender:
    """Rebuild a model whose parameters alias fresh tensors from a checkpoint."""
    params = init_params(checkpoint.config, seed=0)
    named = params.named()
    if set(named) != set(checkpoint.params):
        raise ConfigMismatchError("checkpoint parameter names do not match the config")
    for name, tensor in named.items():
        stored = checkpoint.params[name]
        if stored.shape != tensor.data.shape:
            raise ConfigMismatchError(
                f"checkpoint tensor {name} has shape {stored.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = stored.copy()
    return TransformerRecommender(checkpoint.config, params)


def train(
    config: ModelConfig,
    dataset: InteractionDataset,
    split: LeaveOneOutSplit,
    settings: TrainSettings,
    resume_from: Checkpoint | None = None,
    dataset_fingerprint: str = "",
    log_fn=None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run the masked-item objective for settings.epochs epochs.

    Checkpoints snapshot epoch boundaries; passing one back as resume_from
    continues exactly where it stopped. stop_after_epoch interrupts the plan
    early (the learning-rate schedule still spans the full plan), which is
    how a partial run is produced on purpose. A non-finite loss aborts with
    diagnostics rather than writing a poisoned checkpoint.
    """
    config.validate()
    if resume_from is None and settings.epochs < 1:
        raise ContractError(f"epochs must be >= 1, got {settings.epochs}")
    num_users = len(split.train)
    instances_per_epoch = num_users * (1 + settings.last_item_instances)
    batches_per_epoch = math.ceil(instances_per_epoch / settings.batch_size)
    total_steps = settings.epochs * batches_per_epoch

    if resume_from is not None:
        if resume_from.config.to_dict() != config.to_dict():
            raise ConfigMismatchError("resume checkpoint was trained with a different config")
        if resume_from.total_steps != total_steps:
            raise ConfigMismatchError(
                f"resume checkpoint planned {resume_from.total_steps} total steps, "
                f"this run plans {total_steps}"
            )
        if dataset_fingerprint and resume_from.dataset_fingerprint and \
                resume_from.dataset_fingerprint != dataset_fingerprint:
            raise ConfigMismatchError("resume checkpoint was trained on a different dataset")
        model = restore_model(resume_from)
        named = model.params.named()
        state = OptimizerState(
            m={k: resume_from.adam_m[k].copy() for k in named},
            v={k: resume_from.adam_v[k].copy() for k in named},
            t=resume_from.step,
        )
        start_epoch = resume_from.epoch
        best_metric = resume_from.best_metric
        best_epoch = resume_from.best_epoch
        best = resume_from
    else:
        params = init_params(config, settings.seed)
        model = TransformerRecommender(config, params)
        named = params.named()
        state = OptimizerState.zeros_like(named)
        start_epoch = 0
        best_metric = math.nan
        best_epoch = 0
        best = None

    logs: list[EpochLog] = []
    last_grad_norm = 0.0
    instances_done = 0
    train_seconds = 0.0
    final = None

    for epoch in range(start_epoch + 1, settings.epochs + 1):
        epoch_start = time.perf_counter()
        dropout_rng = derive_rng(settings.seed, "dropout", epoch)
        epoch_seed = derive_seed(settings.seed, "mask", epoch)
        loss_sum = 0.0
        loss_count = 0
        lr = lr_at(state.t, total_steps, settings.base_lr)
        for batch in make_training_batches(
            split,
            num_items=config.num_items,
            max_len=config.max_len,
            mask_proportion=config.mask_proportion,
            batch_size=settings.batch_size,
            epoch_seed=epoch_seed,
            last_item_instances=settings.last_item_instances,
            masks_per_instance=settings.masks_per_instance,
        ):
            with Tape() as tape:
                loss = cloze_loss(batch, model, training=True, rng=dropout_rng)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NonFiniteLossError(state.t, lr, last_grad_norm)
                backward(loss, tape, params=named.values())
            grads = {name: p.grad for name, p in named.items()}
            last_grad_norm = global_grad_norm(grads)
            clip_global_norm(grads, settings.clip_norm)
            lr = lr_at(state.t, total_steps, settings.base_lr)
            adam_step(
                named, grads, state, lr,
                beta1=settings.beta1, beta2=settings.beta2,
                eps=settings.eps, weight_decay=settings.weight_decay,
            )
            for p in named.values():
                p.zero_grad()
            loss_sum += loss_value
            loss_count += 1
            instances_done += batch.input_ids.shape[0]
        train_seconds += time.perf_counter() - epoch_start

        val_hr10 = math.nan
        val_ndcg10 = math.nan
        if settings.val_every and epoch % settings.val_every == 0:
            report = evaluate(
                ModelScorer(model), split, dataset,
                seed=settings.seed, split_name="val",
                num_negatives=settings.val_num_negatives, k_values=(10,),
            )
            val_hr10 = report.metrics["HR@10"]
            val_ndcg10 = report.metrics["NDCG@10"]

        entry = EpochLog(
            epoch=epoch,
            loss=loss_sum / max(1, loss_count),
            val_hr10=val_hr10,
            val_ndcg10=val_ndcg10,
            lr=lr,
            wallclock_s=time.perf_counter() - epoch_start,
        )
        logs.append(entry)
        if log_fn is not None:
            log_fn(entry)

        improved = math.isfinite(val_ndcg10) and (
            math.isnan(best_metric) or val_ndcg10 > best_metric
        )
        if improved:
            best_metric = val_ndcg10
            best_epoch = epoch
        final = _snapshot(
            model, state, settings, epoch=epoch, total_steps=total_steps,
            fingerprint=dataset_fingerprint, best_metric=best_metric,
            best_epoch=best_epoch,
        )
        # with no validation signal yet, the latest model stands in as best
        if improved or best is None or math.isnan(best_metric):
            best = final
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    if final is None:  # zero remaining epochs: return the resume point
        final = resume_from
        best = best or resume_from
    samples_per_s = instances_done / train_seconds if train_seconds > 0 else 0.0
    return TrainResult(final=final, best=best, log=logs, samples_per_s=samples_per_s)


# ----- checkpoint serialization -------------------------------------------------


def _config_text(checkpoint: Checkpoint) -> str:
    entries: dict[str, str] = {}
    for key, value in checkpoint.config.to_dict().items():
        entries[f"config.{key}"] = _format_value(value)
    for key, value in checkpoint.settings.items():
        entries[f"optimizer.{key}"] = _format_value(value)
    entries["train.step"] = str(checkpoint.step)
    entries["train.epoch"] = str(checkpoint.epoch)
    entries["train.total_steps"] = str(checkpoint.total_steps)
    entries["train.seed"] = str(checkpoint.seed)
    entries["train.best_metric"] = _format_value(checkpoint.best_metric)
    entries["train.best_epoch"] = str(checkpoint.best_epoch)
    entries["data.fingerprint"] = checkpoint.dataset_fingerprint
    return "".join(f"{k}={v}\n" for k, v in sorted(entries.items()))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write the little-endian binary checkpoint format.

    Layout: magic, u32 version, 32-byte sha256 of the payload, then the
    payload: length-prefixed key=value config text followed by named
    float64 tensors (u16 name length, name, u8 rank, u32 extents, raw data).
    """
    tensors: dict[str, np.ndarray] = {}
    for name, arr in checkpoint.params.items():
        tensors[f"param/{name}"] = arr
    for name, arr in checkpoint.adam_m.items():
        tensors[f"adam_m/{name}"] = arr
    for name, arr in checkpoint.adam_v.items():
        tensors[f"adam_v/{name}"] = arr

    parts = []
    config_bytes = _config_text(checkpoint).encode("utf-8")
    parts.append(struct.pack("<I", len(config_bytes)))
    parts.append(config_bytes)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(digest)
        fh.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    """Read and verify a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 40 or blob[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[8:40]
    payload = blob[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupt")
    try:
        offset = 0
        (config_len,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        config_text = payload[offset:offset + config_len].decode("utf-8")
        if len(payload) < offset + config_len:
            raise IntegrityError(f"{path}: truncated config block")
        offset += config_len
        (tensor_count,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(tensor_count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            tensors[name] = data.reshape(shape).astype(np.float64)
        if offset != len(payload):
            raise IntegrityError(f"{path}: trailing bytes after tensor section")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: truncated or malformed checkpoint") from exc

    entries: dict[str, object] = {}
    for line in config_text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        entries[key] = value if key == "data.fingerprint" else _parse_value(value)
    config_kwargs = {
        k[len("config."):]: v for k, v in entries.items() if k.startswith("config.")
    }
    settings = {
        k[len("optimizer."):]: float(v)
        for k, v in entries.items() if k.startswith("optimizer.")
    }
    params = {
        k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")
    }
    adam_m = {
        k[len("adam_m/"):]: v for k, v in tensors.items() if k.startswith("adam_m/")
    }
    adam_v = {
        k[len("adam_v/"):]: v for k, v in tensors.items() if k.startswith("adam_v/")
    }
    best_metric = entries.get("train.best_metric", math.nan)
    return Checkpoint(
        config=ModelConfig.from_dict(config_kwargs),
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        step=int(entries.get("train.step", 0)),
        epoch=int(entries.get("train.epoch", 0)),
        total_steps=int(entries.get("train.total_steps", 0)),
        seed=int(entries.get("train.seed", 0)),
        settings=settings,
        dataset_fingerprint=str(entries.get("data.fingerprint", "")),
        best_metric=float(best_metric) if not isinstance(best_metric, str) else math.nan,
        best_epoch=int(entries.get("train.best_epoch", 0)),
        version=version,
    )
