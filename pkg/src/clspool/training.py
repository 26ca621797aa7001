"""Fine-tuning harness: AdamW with linear warmup/decay, seeded end to end.

Determinism contract: (seed, config, data) fully determine every parameter
after training. Three independent generator streams are derived from the run
seed - one for parameter init, one for epoch shuffling, one for dropout - so
runs with different heads but the same seed still see identical data order
(paired comparisons across heads stay valid).

Checkpoints are a small binary format: magic ``MPBT``, a format version, the
config as key=value text, named float32 tensors, and a trailing CRC-32 of
everything after the magic.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from math import ceil, isfinite
from pathlib import Path

import numpy as np

from . import arraycore as ac
from .arraycore import Array
from .data import Example, PAD_ID
from .encoder import EncoderConfig, EncoderParams, encode, init_encoder_params
from .heads import HeadKind, HeadParams, head_forward, init_head_params
from .metrics import accuracy, f1_binary, matthews_corr, spearman_rho_flagged

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "Model",
    "TrainResult",
    "TrainingError",
    "CheckpointError",
    "lr_at_step",
    "adamw_step",
    "cross_entropy",
    "squared_error",
    "build_model",
    "pad_batch",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 1.0

CHECKPOINT_MAGIC = b"MPBT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged or was fed inconsistent inputs."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or from an unknown version."""


@dataclass
class TrainConfig:
    encoder: EncoderConfig
    head: HeadKind = field(default_factory=lambda: HeadKind("baseline"))
    learning_rate: float = 2e-5
    epochs: int = 4
    batch_size: int = 32
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    loss: str = "cross_entropy"  # or "squared_error"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.loss not in ("cross_entropy", "squared_error"):
            raise ValueError(f"unknown loss '{self.loss}'")


def lr_at_step(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("lr_at_step: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"lr_at_step: step {step} outside [0, {total_steps}]")
    warmup = round(cfg.warmup_ratio * total_steps)
    peak = cfg.learning_rate
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _decay_exempt(name: str) -> bool:
    # biases and layer-norm gains are excluded from weight decay
    leaf = name.split(".")[-1]
    return "bias" in leaf or "gain" in leaf or leaf.startswith("b_")


def adamw_step(named_params: list[tuple[str, Array]], state: OptimizerState,
               lr: float, weight_decay: float) -> None:
    """Bias-corrected Adam update plus decoupled weight decay, in place.

    Consumes and clears each parameter's .grad. Raises TrainingError on
    non-finite gradients.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for '{name}' at optimizer step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m[:] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[:] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data -= lr * update
        if weight_decay != 0.0 and not _decay_exempt(name):
            p.data -= lr * weight_decay * p.data
        p.grad = None


def _clip_global_norm(named_params: list[tuple[str, Array]], max_norm: float) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return float(norm)


def cross_entropy(logits: Array, label) -> Array:
    """-log softmax(logits)[label]; accepts a single (1, C) row or a batch."""
    labels = np.atleast_1d(np.asarray(label))
    return ac.cross_entropy_mean(logits, labels)


def squared_error(preds: Array, target) -> Array:
    targets = np.atleast_1d(np.asarray(target, dtype=np.float64))
    return ac.squared_error_mean(preds, targets)


@dataclass
class Model:
    encoder_cfg: EncoderConfig
    head_kind: HeadKind
    enc: EncoderParams
    head: HeadParams
    n_classes: int

    def named_parameters(self) -> list[tuple[str, Array]]:
        return list(self.enc.named_parameters()) + list(self.head.named_parameters())

    def forward(self, ids, mask, dropout_p: float = 0.0,
                rng: np.random.Generator | None = None) -> Array:
        stack = encode(self.enc, ids, mask, dropout_p=dropout_p, rng=rng)
        return head_forward(self.head_kind, stack, self.head)


def build_model(cfg: TrainConfig, n_classes: int, dtype=np.float32) -> Model:
    """Seeded model init; head weights are drawn after the encoder's, so the
    same seed gives identical encoders across head kinds."""
    rng_init = np.random.default_rng([cfg.seed, 0])
    enc = init_encoder_params(cfg.encoder, rng_init, dtype=dtype)
    head = init_head_params(cfg.head, cfg.encoder.d_model, n_classes, rng_init,
                            dtype=dtype)
    return Model(encoder_cfg=cfg.encoder, head_kind=cfg.head, enc=enc, head=head,
                 n_classes=n_classes)


def pad_batch(examples: list[Example]) -> tuple[np.ndarray, np.ndarray, list]:
    """Pad to the longest sequence in the batch; returns (ids, mask, labels)."""
    width = max(len(ex.token_ids) for ex in examples)
    ids = np.full((len(examples), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=np.float64)
    for i, ex in enumerate(examples):
        n = len(ex.token_ids)
        ids[i, :n] = ex.token_ids
        mask[i, :n] = 1.0
    return ids, mask, [ex.label for ex in examples]


def _batch_loss(model: Model, batch: list[Example], loss_kind: str,
                dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Array:
    ids, mask, labels = pad_batch(batch)
    logits = model.forward(ids, mask, dropout_p=dropout_p, rng=rng)
    flat = ac.reshape(logits, (len(batch), model.n_classes))
    if loss_kind == "cross_entropy":
        return cross_entropy(flat, np.asarray(labels, dtype=np.int64))
    return squared_error(flat, np.asarray(labels, dtype=np.float64))


def evaluate(model: Model, dataset: list[Example], batch_size: int = 64) -> dict[str, float]:
    """Dropout-free metrics: accuracy (+ F1/MCC when binary) or Spearman."""
    preds: list = []
    labels: list = []
    for lo in range(0, len(dataset), batch_size):
        batch = dataset[lo:lo + batch_size]
        ids, mask, batch_labels = pad_batch(batch)
        logits = model.forward(ids, mask).data.reshape(len(batch), model.n_classes)
        if model.n_classes == 1:
            preds.extend(float(x) for x in logits[:, 0])
        else:
            preds.extend(int(x) for x in logits.argmax(axis=1))
        labels.extend(batch_labels)
    if model.n_classes == 1:
        rho, _ = spearman_rho_flagged(preds, labels)
        return {"spearman": rho}
    out = {"accuracy": accuracy(preds, labels)}
    if set(labels) <= {0, 1}:
        out["f1"] = f1_binary(preds, labels)
        out["mcc"] = matthews_corr(preds, labels)
    return out


@dataclass
class TrainResult:
    head_spec: str
    seed: int
    loss_kind: str
    eval_metrics: dict[str, float]
    train_metrics: dict[str, float]
    final_loss: float
    n_train: int
    n_eval: int
    wall_time_s: float


def _infer_n_classes(cfg: TrainConfig, train_set, eval_set) -> int:
    if cfg.loss == "squared_error":
        return 1
    labels = [ex.label for ex in train_set] + [ex.label for ex in eval_set]
    if not all(isinstance(lab, (int, np.integer)) for lab in labels):
        raise TrainingError("cross_entropy training needs integer labels")
    return max(2, max(labels) + 1)


def train(cfg: TrainConfig, train_set: list[Example], eval_set: list[Example],
          dtype=np.float32) -> tuple[Model, TrainResult]:
    """Run the fine-tuning loop; deterministic given (cfg, data)."""
    if not train_set or not eval_set:
        raise TrainingError("train: datasets must be nonempty")
    started = time.perf_counter()
    n_classes = _infer_n_classes(cfg, train_set, eval_set)
    model = build_model(cfg, n_classes, dtype=dtype)
    rng_shuffle = np.random.default_rng([cfg.seed, 1])
    rng_dropout = np.random.default_rng([cfg.seed, 2])

    named = model.named_parameters()
    opt = OptimizerState()
    steps_per_epoch = ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    global_step = 0
    last_loss = float("nan")

    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(len(train_set))
        for lo in range(0, len(train_set), cfg.batch_size):
            batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
            loss = _batch_loss(model, batch, cfg.loss,
                               dropout_p=cfg.encoder.dropout, rng=rng_dropout)
            last_loss = loss.item()
            if not isfinite(last_loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, step {global_step + 1}")
            ac.backward(loss)
            _clip_global_norm(named, CLIP_NORM)
            lr = lr_at_step(global_step, total_steps, cfg)
            adamw_step(named, opt, lr, cfg.weight_decay)
            global_step += 1

    eval_metrics = evaluate(model, eval_set)
    train_metrics = evaluate(model, train_set)
    result = TrainResult(
        head_spec=cfg.head.spec(),
        seed=cfg.seed,
        loss_kind=cfg.loss,
        eval_metrics=eval_metrics,
        train_metrics=train_metrics,
        final_loss=last_loss,
        n_train=len(train_set),
        n_eval=len(eval_set),
        wall_time_s=time.perf_counter() - started,
    )
    return model, result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_lines(cfg: TrainConfig) -> str:
    enc = cfg.encoder
    pairs = [
        ("head", cfg.head.spec()),
        ("learning_rate", repr(cfg.learning_rate)),
        ("epochs", str(cfg.epochs)),
        ("batch_size", str(cfg.batch_size)),
        ("warmup_ratio", repr(cfg.warmup_ratio)),
        ("weight_decay", repr(cfg.weight_decay)),
        ("seed", str(cfg.seed)),
        ("loss", cfg.loss),
        ("encoder.vocab_size", str(enc.vocab_size)),
        ("encoder.num_layers", str(enc.num_layers)),
        ("encoder.d_model", str(enc.d_model)),
        ("encoder.num_heads_encoder", str(enc.num_heads_encoder)),
        ("encoder.d_ff", str(enc.d_ff)),
        ("encoder.max_seq_len", str(enc.max_seq_len)),
        ("encoder.dropout", repr(enc.dropout)),
    ]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _config_from_lines(text: str) -> TrainConfig:
    from .heads import parse_head_spec

    kv = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            kv[key] = value
    try:
        enc = EncoderConfig(
            vocab_size=int(kv["encoder.vocab_size"]),
            num_layers=int(kv["encoder.num_layers"]),
            d_model=int(kv["encoder.d_model"]),
            num_heads_encoder=int(kv["encoder.num_heads_encoder"]),
            d_ff=int(kv["encoder.d_ff"]),
            max_seq_len=int(kv["encoder.max_seq_len"]),
            dropout=float(kv["encoder.dropout"]),
        )
        return TrainConfig(
            encoder=enc,
            head=parse_head_spec(kv["head"]),
            learning_rate=float(kv["learning_rate"]),
            epochs=int(kv["epochs"]),
            batch_size=int(kv["batch_size"]),
            warmup_ratio=float(kv["warmup_ratio"]),
            weight_decay=float(kv["weight_decay"]),
            seed=int(kv["seed"]),
            loss=kv["loss"],
        )
    except KeyError as err:
        raise CheckpointError(f"checkpoint config missing key {err}")


def save_checkpoint(path, model: Model, cfg: TrainConfig) -> None:
    """Write magic, version, config text, named float32 tensors, CRC-32."""
    body = bytearray()
    body += struct.pack("<I", CHECKPOINT_VERSION)
    config = _config_lines(cfg).encode("utf-8")
    body += struct.pack("<I", len(config)) + config
    named = model.named_parameters()
    body += struct.pack("<I", len(named))
    for name, p in named:
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<I", p.data.ndim)
        for extent in p.data.shape:
            body += struct.pack("<I", extent)
        body += p.data.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(CHECKPOINT_MAGIC + bytes(body))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], TrainConfig]:
    """Read and verify a checkpoint; returns float32 arrays keyed by name."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("format error: bad magic bytes")
    if len(blob) < 8:
        raise CheckpointError("truncated checkpoint file")
    payload, crc_bytes = blob[4:-4], blob[-4:]
    expect = struct.unpack("<I", crc_bytes)[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != expect:
        raise CheckpointError("checksum failure: CRC-32 mismatch")
    reader = _Reader(payload)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = _config_from_lines(reader.take(reader.u32()).decode("utf-8"))
    params: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = data.astype(np.float32)
    if reader.pos != len(payload):
        raise CheckpointError("format error: trailing bytes after parameters")
    return params, cfg


def model_from_checkpoint(path) -> tuple[Model, TrainConfig]:
    """Rebuild a runnable model from a checkpoint file."""
    params, cfg = load_checkpoint(path)
    n_classes = params["head.w_cls"].shape[1]
    model = build_model(cfg, n_classes, dtype=np.float32)
    named = dict(model.named_parameters())
    if set(named) != set(params):
        raise CheckpointError("format error: parameter names do not match config")
    for name, p in named.items():
        if p.data.shape != params[name].shape:
            raise CheckpointError(f"format error: shape mismatch for '{name}'")
        p.data = params[name].copy()
    return model, cfg
