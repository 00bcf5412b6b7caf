"""End-to-end pre-training loop: schedules, optimizer, checkpoints, metrics.

One training step, in contract order: make M views per instance; forward the
M-1 query views with gradients and the key view detached; evaluate the batch
loss (per-instance or batchwise per config); backpropagate and apply the
SGD-momentum update to the query encoder; momentum-update the key encoder;
push the step's keys into the negative queue.

Determinism: every random decision derives from (seed, purpose, epoch, index)
through counter-based streams, so a (config, dataset, seed) triple fixes the
whole run bit for bit, and resuming needs nothing beyond the epoch counter.

On checkpoint boundaries the live training state is replaced by the state
just serialized (parameters are stored as float32), so a resumed run and the
uninterrupted original continue from identical bytes.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AugmentPolicy, Dataset, StreamKey, make_views
from .encoder import (
    EncoderPair,
    EncoderParams,
    attach_params,
    make_encoder_pair,
    mlp_forward,
    momentum_update,
)
from .errors import ConfigError, FormatError, NumericalError
from .linalg import jacobi_svd
from .losses import PriorConfig, lorac_batch_loss, lorac_bs_loss
from .memory import NegativeQueue
from .tensor import Tape, Tensor, rows

_CKPT_MAGIC = b"LORC"
_CKPT_VERSION = 1

# stream purpose tags (see data.StreamKey)
_TAG_VIEWS = 1
_TAG_ORDER = 2
_TAG_ENCODER = 3
_TAG_QUEUE = 4


@dataclass(frozen=True)
class OptimizerConfig:
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines a pre-training run."""

    views: int = 6                      # M: query views per instance + 1 key
    batch_size: int = 32                # N
    queue_capacity: int = 1024          # K
    tau: float = 0.2
    prior: PriorConfig = field(default_factory=PriorConfig)
    beta_schedule: tuple[tuple[int, float], ...] = ((0, math.inf), (50, 2.0))
    epochs: int = 100
    lr_base: float = 0.3
    lr_final: float = 0.003
    momentum_encoder: float = 0.999
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    batchwise: bool = False
    q_view_subset: tuple[int, ...] = ()  # empty = use all query views in Q
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    checkpoint_interval: int = 0         # epochs between checkpoints; 0 = final only

    def validate(self) -> None:
        if self.views < 2:
            raise ConfigError(f"views must be >= 2, got {self.views}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.queue_capacity < 1:
            raise ConfigError(f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr_base >= self.lr_final >= 0.0:
            raise ConfigError(
                f"need lr_base >= lr_final >= 0, got {self.lr_base}, {self.lr_final}")
        if not 0.0 <= self.momentum_encoder <= 1.0:
            raise ConfigError(
                f"momentum_encoder must lie in [0, 1], got {self.momentum_encoder}")
        if not self.beta_schedule:
            raise ConfigError("beta_schedule must have at least one step")
        if self.beta_schedule[0][0] != 0:
            raise ConfigError("beta_schedule must start at epoch 0")
        starts = [s for s, _ in self.beta_schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("beta_schedule start epochs must be strictly increasing")
        for _, b in self.beta_schedule:
            if not b > 0.0:
                raise ConfigError(f"beta values must be positive (or inf), got {b}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        for v in self.q_view_subset:
            if not 0 <= v < self.views - 1:
                raise ConfigError(
                    f"q_view_subset entry {v} out of range [0, {self.views - 2}]")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        replace(self.prior, beta=1.0, tau=self.tau).validate()


def beta_at(schedule: Sequence[tuple[int, float]], epoch: int) -> float:
    """Beta of the last schedule step at or before ``epoch`` (inf = prior off)."""
    value = schedule[0][1]
    for start, b in schedule:
        if start <= epoch:
            value = b
        else:
            break
    return value


def cosine_lr(step: int, total_steps: int, lr_base: float, lr_final: float) -> float:
    """Cosine decay from lr_base (step 0) to lr_final (step = total_steps)."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_base
    return lr_final + 0.5 * (lr_base - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------------------
# config text (TOML-compatible key = value subset)
# --------------------------------------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    if not text:
        raise ConfigError("empty value")
    if text.startswith("["):
        items, rest = _parse_array(text)
        if rest.strip():
            raise ConfigError(f"trailing content after array: {rest!r}")
        return items
    if text.startswith('"'):
        if not text.endswith('"') or len(text) < 2:
            raise ConfigError(f"unterminated string: {text!r}")
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)  # handles inf / -inf / nan spellings
    except ValueError:
        raise ConfigError(f"cannot parse value: {text!r}") from None


def _parse_array(text: str):
    assert text[0] == "["
    items = []
    rest = text[1:]
    while True:
        rest = rest.lstrip()
        if not rest:
            raise ConfigError("unterminated array")
        if rest[0] == "]":
            return items, rest[1:]
        if rest[0] == "[":
            inner, rest = _parse_array(rest)
            items.append(inner)
        else:
            end = len(rest)
            for i, ch in enumerate(rest):
                if ch in ",]":
                    end = i
                    break
            items.append(_parse_value(rest[:end]))
            rest = rest[end:]
        rest = rest.lstrip()
        if rest.startswith(","):
            rest = rest[1:]


def parse_document(text: str) -> dict:
    """Parse the config file grammar: sections, ``key = value``, # comments."""
    root: dict = {}
    section = root
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {line!r}")
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"line {lineno}: empty section name")
            section = root.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        comment = value.find(" #")
        if comment >= 0 and '"' not in value[:comment]:
            value = value[:comment]
        try:
            section[key] = _parse_value(value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return root


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise ConfigError(f"cannot format config value {v!r}")


_TOP_FIELDS = ("views", "batch_size", "queue_capacity", "tau", "epochs",
               "lr_base", "lr_final", "momentum_encoder", "seed", "hidden",
               "embed_dim", "batchwise", "q_view_subset", "checkpoint_interval",
               "beta_schedule")
_PRIOR_FIELDS = ("kind", "beta", "sigma2", "c_o", "c")
_OPT_FIELDS = ("sgd_momentum", "weight_decay")
_AUG_FIELDS = ("noise_sigma", "mask_frac", "scale")


def emit_config_text(cfg: TrainConfig) -> str:
    lines = []
    for name in _TOP_FIELDS:
        value = getattr(cfg, name)
        if name == "beta_schedule":
            value = [[s, b] for s, b in value]
        elif name in ("hidden", "q_view_subset"):
            value = list(value)
        lines.append(f"{name} = {_format_value(value)}")
    lines.append("")
    lines.append("[prior]")
    for name in _PRIOR_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(cfg.prior, name))}")
    lines.append("")
    lines.append("[optimizer]")
    for name in _OPT_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(cfg.optimizer, name))}")
    lines.append("")
    lines.append("[augment]")
    lines.append(f"noise_sigma = {_format_value(cfg.augment.noise_sigma)}")
    lines.append(f"mask_frac = {_format_value(cfg.augment.mask_frac)}")
    lines.append(f"scale = {_format_value([cfg.augment.scale_lo, cfg.augment.scale_hi])}")
    return "\n".join(lines) + "\n"


def _expect_number(mapping: dict, key: str, where: str) -> float:
    v = mapping.pop(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}{key} must be a number, got {v!r}")
    return float(v)


def config_from_mapping(doc: dict, extra_sections: tuple[str, ...] = ("data",)) -> TrainConfig:
    """Build a validated TrainConfig from a parsed document.

    Unknown keys are errors (they are usually typos); sections listed in
    ``extra_sections`` are ignored so callers can carry their own settings
    in the same file.
    """
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    kwargs: dict = {}
    for name in ("views", "batch_size", "queue_capacity", "epochs", "seed",
                 "embed_dim", "checkpoint_interval"):
        if name in doc:
            v = doc.pop(name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
            kwargs[name] = v
    for name in ("tau", "lr_base", "lr_final", "momentum_encoder"):
        if name in doc:
            kwargs[name] = _expect_number(doc, name, "")
    if "batchwise" in doc:
        v = doc.pop("batchwise")
        if not isinstance(v, bool):
            raise ConfigError(f"batchwise must be true/false, got {v!r}")
        kwargs["batchwise"] = v
    if "hidden" in doc:
        kwargs["hidden"] = tuple(int(x) for x in doc.pop("hidden"))
    if "q_view_subset" in doc:
        kwargs["q_view_subset"] = tuple(int(x) for x in doc.pop("q_view_subset"))
    if "beta_schedule" in doc:
        sched = doc.pop("beta_schedule")
        try:
            kwargs["beta_schedule"] = tuple((int(s), float(b)) for s, b in sched)
        except (TypeError, ValueError):
            raise ConfigError(
                f"beta_schedule must be a list of [start_epoch, beta] pairs, got {sched!r}"
            ) from None

    prior_doc = doc.pop("prior", {})
    prior_kwargs = {}
    if "kind" in prior_doc:
        prior_kwargs["kind"] = str(prior_doc.pop("kind"))
    for name in ("beta", "sigma2", "c_o", "c"):
        if name in prior_doc:
            prior_kwargs[name] = _expect_number(prior_doc, name, "prior.")
    if prior_doc:
        raise ConfigError(f"unknown prior field(s): {sorted(prior_doc)}")

    opt_doc = doc.pop("optimizer", {})
    opt_kwargs = {}
    for name in _OPT_FIELDS:
        if name in opt_doc:
            opt_kwargs[name] = _expect_number(opt_doc, name, "optimizer.")
    if opt_doc:
        raise ConfigError(f"unknown optimizer field(s): {sorted(opt_doc)}")

    aug_doc = doc.pop("augment", {})
    aug_kwargs = {}
    for name in ("noise_sigma", "mask_frac"):
        if name in aug_doc:
            aug_kwargs[name] = _expect_number(aug_doc, name, "augment.")
    if "scale" in aug_doc:
        lo, hi = aug_doc.pop("scale")
        aug_kwargs["scale_lo"], aug_kwargs["scale_hi"] = float(lo), float(hi)
    if aug_doc:
        raise ConfigError(f"unknown augment field(s): {sorted(aug_doc)}")

    for name in extra_sections:
        doc.pop(name, None)
    if doc:
        raise ConfigError(f"unknown config field(s): {sorted(doc)}")

    tau = kwargs.get("tau", 0.2)
    cfg = TrainConfig(
        prior=PriorConfig(tau=tau, **prior_kwargs),
        optimizer=OptimizerConfig(**opt_kwargs),
        augment=AugmentPolicy(**aug_kwargs),
        **kwargs,
    )
    cfg.validate()
    return cfg


def apply_overrides(doc: dict, assignments: Sequence[str]) -> dict:
    """Apply ``--set section.key=value`` style overrides; last writer wins.

    Values use the config grammar; anything unparseable is taken as a bare
    string (so ``--set prior.kind=none`` works without quoting).
    """
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for spec in assignments:
        if "=" not in spec:
            raise ConfigError(f"override {spec!r} is not of the form key=value")
        path, _, raw = spec.partition("=")
        try:
            value = _parse_value(raw)
        except ConfigError:
            value = raw.strip()
        keys = [k.strip() for k in path.strip().split(".")]
        if not all(keys):
            raise ConfigError(f"override {spec!r} has an empty key component")
        target = out
        for k in keys[:-1]:
            nxt = target.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {spec!r} descends into a non-section")
            target = nxt
        target[keys[-1]] = value
    return out


# --------------------------------------------------------------------------
# training state, step and loop
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    pair: EncoderPair
    queue: NegativeQueue
    velocities: list[np.ndarray]
    epoch: int = 0          # next epoch to run
    global_step: int = 0


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    global_step: int
    query: EncoderParams
    key: EncoderParams
    queue_store: np.ndarray
    queue_head: int
    queue_filled: int
    velocities: list[np.ndarray]
    seed: int


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    summary: list[dict]


def init_state(config: TrainConfig, d_in: int) -> TrainState:
    config.validate()
    pair = make_encoder_pair(
        d_in, config.hidden, config.embed_dim, config.momentum_encoder,
        rng=StreamKey(config.seed).child(_TAG_ENCODER).generator())
    queue = NegativeQueue(
        config.queue_capacity, config.embed_dim,
        rng=StreamKey(config.seed).child(_TAG_QUEUE).generator())
    velocities = [np.zeros_like(t) for t in pair.query.tensors()]
    return TrainState(config=config, pair=pair, queue=queue, velocities=velocities)


def _sgd_update(params: list[np.ndarray], grads: list[np.ndarray],
                velocities: list[np.ndarray], lr: float,
                momentum: float, weight_decay: float) -> None:
    for p, g, v in zip(params, grads, velocities):
        if weight_decay:
            g = g + weight_decay * p
        v *= momentum
        v += g
        p -= lr * v


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def train_step(state: TrainState, batch_x: np.ndarray, batch_ids: np.ndarray,
               total_steps: int) -> dict:
    """One optimization step on a batch; returns the per-step metrics record."""
    cfg = state.config
    n = batch_x.shape[0]
    m1 = cfg.views - 1
    beta = beta_at(cfg.beta_schedule, state.epoch)
    lr = cosine_lr(state.global_step, total_steps, cfg.lr_base, cfg.lr_final)
    prior = replace(cfg.prior, beta=beta, tau=cfg.tau)
    q_rows = list(cfg.q_view_subset) if cfg.q_view_subset else None

    queries_raw = np.empty((n * m1, batch_x.shape[1]))
    keys_raw = np.empty_like(batch_x)
    for i in range(n):
        stream = StreamKey(cfg.seed).child(_TAG_VIEWS, state.epoch, int(batch_ids[i]))
        q, k = make_views(batch_x[i], cfg.views, cfg.augment, stream)
        queries_raw[i * m1:(i + 1) * m1] = q
        keys_raw[i] = k

    tape = Tape()
    attached = attach_params(state.pair.query, tape)
    q_emb = mlp_forward(attached, Tensor(queries_raw))
    k_emb = mlp_forward(state.pair.key, keys_raw)   # detached by construction
    negatives = state.queue.as_negatives()

    instances = [rows(q_emb, i * m1, (i + 1) * m1) for i in range(n)]
    if cfg.batchwise:
        loss = lorac_bs_loss(instances, k_emb, negatives, prior)
    else:
        loss = lorac_batch_loss(instances, k_emb, negatives, prior, q_rows=q_rows)
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        raise NumericalError(
            f"non-finite loss {loss_value!r} at step {state.global_step} "
            f"(epoch {state.epoch})")

    tape.backward(loss)
    leaves = attached.all()
    _sgd_update(state.pair.query.tensors(), [t.grad for t in leaves],
                state.velocities, lr, cfg.optimizer.sgd_momentum,
                cfg.optimizer.weight_decay)
    momentum_update(state.pair)
    state.queue.push_batch(k_emb.data)

    # held-fixed view-stack norms for telemetry, same Q construction the prior sees
    nucs = np.empty(n)
    for i in range(n):
        block = q_emb.data[i * m1:(i + 1) * m1]
        if q_rows is not None:
            block = block[q_rows]
        nucs[i] = jacobi_svd(np.vstack([block, k_emb.data[i:i + 1]])).S.sum()

    record = {
        "step": state.global_step,
        "epoch": state.epoch,
        "loss": loss_value,
        "q_nuc_mean": float(nucs.mean()),
        "beta": None if math.isinf(beta) else beta,  # JSON has no inf; null = prior off
        "lr": lr,
    }
    state.global_step += 1
    return record


class _RunWriter:
    """Streams metrics/summary/checkpoint files for one run directory."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "checkpoints").mkdir(exist_ok=True)
        self._metrics = open(self.out_dir / "metrics.jsonl", "w")
        self._summary = open(self.out_dir / "summary.csv", "w")
        self._summary.write("epoch,mean_loss,mean_nuc_norm,beta,lr\n")

    def step(self, record: dict) -> None:
        self._metrics.write(json.dumps(record, separators=(",", ":")) + "\n")

    def epoch(self, row: dict) -> None:
        beta = row["beta"]
        beta_txt = "inf" if beta is None else repr(beta)
        self._summary.write(
            f"{row['epoch']},{row['mean_loss']!r},{row['mean_nuc_norm']!r},"
            f"{beta_txt},{row['lr']!r}\n")
        self._summary.flush()

    def checkpoint(self, name: str, data: bytes) -> Path:
        path = self.out_dir / "checkpoints" / name
        path.write_bytes(data)
        return path

    def close(self) -> None:
        self._metrics.close()
        self._summary.close()


def train(config: TrainConfig, dataset: Dataset, out_dir=None,
          state: TrainState | None = None) -> TrainResult:
    """Run (or resume) pre-training; returns the final checkpoint and logs.

    ``state`` resumes from a restored checkpoint state; otherwise training
    starts from a fresh initialization.  Only ``dataset.samples`` is read:
    labels never reach pre-training.
    """
    config.validate()
    samples = dataset.samples
    n = samples.shape[0]
    if n == 0:
        raise ConfigError("dataset is empty")
    if state is None:
        state = init_state(config, samples.shape[1])
    elif state.config != config:
        raise ConfigError("resume state carries a different config than the one given")
    if state.pair.query.in_dim != samples.shape[1]:
        raise ConfigError(
            f"dataset width {samples.shape[1]} does not match encoder input "
            f"{state.pair.query.in_dim}")
    total_steps = config.epochs * _steps_per_epoch(n, config.batch_size)
    writer = _RunWriter(out_dir) if out_dir is not None else None

    metrics: list[dict] = []
    summary: list[dict] = []
    try:
        for epoch in range(state.epoch, config.epochs):
            state.epoch = epoch
            order = StreamKey(config.seed).child(_TAG_ORDER, epoch).generator().permutation(n)
            losses, nucs = [], []
            record = None
            for lo in range(0, n, config.batch_size):
                ids = order[lo:lo + config.batch_size]
                record = train_step(state, samples[ids], ids, total_steps)
                metrics.append(record)
                losses.append(record["loss"])
                nucs.append(record["q_nuc_mean"])
                if writer:
                    writer.step(record)
            row = {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "mean_nuc_norm": float(np.mean(nucs)),
                "beta": record["beta"],
                "lr": record["lr"],
            }
            summary.append(row)
            if writer:
                writer.epoch(row)
            state.epoch = epoch + 1
            interval = config.checkpoint_interval
            if interval and state.epoch % interval == 0 and state.epoch < config.epochs:
                blob = serialize_checkpoint(state_to_checkpoint(state))
                if writer:
                    writer.checkpoint(f"epoch_{state.epoch:04d}.ckpt", blob)
                # continue from exactly the serialized state so that resuming
                # from this checkpoint reproduces the rest of the run
                restored = state_from_checkpoint(deserialize_checkpoint(blob))
                state.pair = restored.pair
                state.queue = restored.queue
                state.velocities = restored.velocities
        final = state_to_checkpoint(state)
        if writer:
            writer.checkpoint("final.ckpt", serialize_checkpoint(final))
    finally:
        if writer:
            writer.close()
    return TrainResult(checkpoint=final, metrics=metrics, summary=summary)


def resume(checkpoint: Checkpoint, dataset: Dataset, out_dir=None) -> TrainResult:
    """Continue a run from a checkpoint; subsequent metrics match the
    uninterrupted original bit for bit."""
    return train(checkpoint.config, dataset, out_dir=out_dir,
                 state=state_from_checkpoint(checkpoint))


# --------------------------------------------------------------------------
# checkpoint serialization
# --------------------------------------------------------------------------
#
# Little-endian layout:
#   magic "LORC", u32 version = 1
#   u32 config length, config text (the canonical key = value form)
#   u32 epoch, u64 global_step
#   u32 tensor count, tensors...      query encoder parameters
#   u32 tensor count, tensors...      key encoder parameters
#   u64 head, u64 filled, tensor      negative queue
#   u32 tensor count, tensors...      optimizer velocities
#   u64 seed                          root of every derived random stream
# where a tensor is: u32 rank, rank * u64 dims, float32 data row-major.

def _write_tensor(f, arr: np.ndarray) -> None:
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(f) -> np.ndarray:
    (rank,) = struct.unpack("<I", f.read(4))
    dims = [struct.unpack("<Q", f.read(8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(f.read(count * 4), dtype="<f4", count=count)
    return data.astype(np.float64).reshape(dims)


def _write_tensor_list(f, arrays: list[np.ndarray]) -> None:
    f.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        _write_tensor(f, a)


def _read_tensor_list(f) -> list[np.ndarray]:
    (count,) = struct.unpack("<I", f.read(4))
    return [_read_tensor(f) for _ in range(count)]


def _params_from_tensors(tensors: list[np.ndarray]) -> EncoderParams:
    if len(tensors) % 2 != 1:
        raise FormatError("encoder tensor list must be W,b pairs plus a projection")
    n_hidden = (len(tensors) - 1) // 2
    return EncoderParams(
        weights=[tensors[2 * i] for i in range(n_hidden)],
        biases=[tensors[2 * i + 1] for i in range(n_hidden)],
        projection=tensors[-1],
    )


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    return Checkpoint(
        config=state.config,
        epoch=state.epoch,
        global_step=state.global_step,
        query=state.pair.query.clone(),
        key=state.pair.key.clone(),
        queue_store=state.queue.store.copy(),
        queue_head=state.queue.head,
        queue_filled=state.queue.filled,
        velocities=[v.copy() for v in state.velocities],
        seed=state.config.seed,
    )


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    pair = EncoderPair(query=ckpt.query.clone(), key=ckpt.key.clone(),
                       momentum=ckpt.config.momentum_encoder)
    queue = NegativeQueue(ckpt.config.queue_capacity, ckpt.config.embed_dim)
    queue.store = ckpt.queue_store.copy()
    queue.head = ckpt.queue_head
    queue.filled = ckpt.queue_filled
    return TrainState(
        config=ckpt.config,
        pair=pair,
        queue=queue,
        velocities=[v.copy() for v in ckpt.velocities],
        epoch=ckpt.epoch,
        global_step=ckpt.global_step,
    )


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(_CKPT_MAGIC)
    f.write(struct.pack("<I", _CKPT_VERSION))
    config_text = emit_config_text(ckpt.config).encode("utf-8")
    f.write(struct.pack("<I", len(config_text)))
    f.write(config_text)
    f.write(struct.pack("<I", ckpt.epoch))
    f.write(struct.pack("<Q", ckpt.global_step))
    _write_tensor_list(f, ckpt.query.tensors())
    _write_tensor_list(f, ckpt.key.tensors())
    f.write(struct.pack("<QQ", ckpt.queue_head, ckpt.queue_filled))
    _write_tensor(f, ckpt.queue_store)
    _write_tensor_list(f, ckpt.velocities)
    f.write(struct.pack("<Q", ckpt.seed))
    return f.getvalue()


def deserialize_checkpoint(blob: bytes) -> Checkpoint:
    f = io.BytesIO(blob)
    if f.read(4) != _CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", f.read(4))
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (config_len,) = struct.unpack("<I", f.read(4))
    config_text = f.read(config_len).decode("utf-8")
    config = config_from_mapping(parse_document(config_text))
    (epoch,) = struct.unpack("<I", f.read(4))
    (global_step,) = struct.unpack("<Q", f.read(8))
    query = _params_from_tensors(_read_tensor_list(f))
    key = _params_from_tensors(_read_tensor_list(f))
    head, filled = struct.unpack("<QQ", f.read(16))
    store = _read_tensor(f)
    velocities = _read_tensor_list(f)
    (seed,) = struct.unpack("<Q", f.read(8))
    if seed != config.seed:
        raise FormatError("checkpoint rng seed disagrees with its config")
    return Checkpoint(config=config, epoch=epoch, global_step=global_step,
                      query=query, key=key, queue_store=store, queue_head=head,
                      queue_filled=filled, velocities=velocities, seed=seed)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(serialize_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return deserialize_checkpoint(Path(path).read_bytes())
