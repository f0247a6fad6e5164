"""Competing-objective training loop and its four ablation modes.

Modes:
  cnn_only  shared slice encoder, mean-pooled slice features, 2-layer
            N-way softmax head, plain cross-entropy.
  cnn_rnn   encoder + ConvLSTM descriptor, single FC N-way head, plain
            cross-entropy.
  cnn_adv   mean-pooled slice features into the (N+1)-way discriminator,
            trained adversarially.
  full      encoder + ConvLSTM + (N+1)-way discriminator, adversarial.

In the adversarial modes each batch takes one discriminator step (push
every descriptor toward the extra "ambiguous" class N+1, generator
frozen) followed by one generator step (push toward the true label;
gradients also update the discriminator so it learns the real classes —
see the g_updates_dis switch).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np

from . import engine, network
from .engine import Adam, Tensor
from .mdr import compute_mdr, normalize_mdr
from .network import DESCRIPTOR_DIM, DiscriminatorParams, SliceEncoderParams

MODES = ("cnn_only", "cnn_rnn", "cnn_adv", "full")
ADVERSARIAL_MODES = ("cnn_adv", "full")


class ConfigError(ValueError):
    """Bad key, value, or type in a training configuration."""


class TrainingError(RuntimeError):
    """Numerical failure (non-finite loss or gradient) during training."""


@dataclass
class TrainConfig:
    mode: str = "full"
    k: int = 3
    batch_size: int = 32
    lr_gen: float = 0.01
    lr_dis: float = 0.001
    decay: float = 0.995
    epochs: int = 60
    seed: int = 7
    g_updates_dis: bool = True
    descriptor_readout: str = "cell"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_gen <= 0 or self.lr_dis <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must be in (0, 1]")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.descriptor_readout not in ("cell", "hidden"):
            raise ConfigError("descriptor_readout must be 'cell' or 'hidden'")


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config(text) -> TrainConfig:
    """Parse `key = value` lines; unknown keys are an error."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = _CONFIG_TYPES[key]
        try:
            if kind == "bool":
                if val.lower() not in ("true", "false"):
                    raise ValueError(val)
                values[key] = val.lower() == "true"
            elif kind == "int":
                values[key] = int(val)
            elif kind == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from e
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# model assembly

_MODE_IDS = {m: i for i, m in enumerate(MODES)}
_READOUT_IDS = {"cell": 0, "hidden": 1}


@dataclass
class Model:
    mode: str
    n_classes: int
    k: int
    descriptor_readout: str
    encoder: SliceEncoderParams
    lstm: object  # ConvLstmParams or None
    head: list  # list of (weight, bias) FC layers

    @property
    def uses_lstm(self):
        return self.lstm is not None

    @property
    def adversarial(self):
        return self.mode in ADVERSARIAL_MODES

    def gen_tensors(self):
        out = self.encoder.tensors()
        if self.lstm is not None:
            out += self.lstm.tensors()
        return out

    def head_tensors(self):
        prefix = "dis" if self.adversarial else "head"
        return [
            (f"{prefix}.fc{i}.{tag}", t)
            for i, (w, b) in enumerate(self.head)
            for tag, t in (("w", w), ("b", b))
        ]

    def named_tensors(self):
        return dict(self.gen_tensors() + self.head_tensors())

    def latent(self, batch):
        """(B, 3k, 30, 30) normalized slice stacks -> (B, 1024) Tensor."""
        batch = np.asarray(batch, dtype=np.float64)
        b, t, hh, ww = batch.shape
        feats = network.encode_slice(self.encoder, Tensor(batch.reshape(b * t, 1, hh, ww)))
        _, ch, fh, fw = feats.shape
        feats = engine.reshape(feats, (b, t, ch, fh, fw))
        if self.uses_lstm:
            return network.run_convlstm(self.lstm, feats, readout=self.descriptor_readout)
        flat = engine.reshape(feats, (b, t, ch * fh * fw))
        return engine.mean_axis(flat, axis=1)

    def head_logits(self, latent):
        x = latent if isinstance(latent, Tensor) else Tensor(latent)
        last = len(self.head) - 1
        for i, (w, b) in enumerate(self.head):
            x = engine.fully_connected(x, w, b)
            if i < last:
                x = engine.leaky_rectifier(x, network.LEAKY_SLOPE)
        return x

    def logits(self, batch):
        return self.head_logits(self.latent(batch))


def build_model(mode, n_classes, k=3, seed=0, descriptor_readout="cell") -> Model:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x3DA])
    encoder = network.init_encoder(rng)
    lstm = network.init_convlstm(rng) if mode in ("cnn_rnn", "full") else None
    if mode in ADVERSARIAL_MODES:
        head = network.init_discriminator(rng, n_classes).layers
    elif mode == "cnn_only":
        head = _init_mlp(rng, (DESCRIPTOR_DIM, 128, n_classes))
    else:  # cnn_rnn: single FC softmax over the descriptor
        head = _init_mlp(rng, (DESCRIPTOR_DIM, n_classes))
    return Model(mode, n_classes, k, descriptor_readout, encoder, lstm, head)


def _init_mlp(rng, sizes):
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        s = np.sqrt(1.0 / fan_in)
        w = Tensor(rng.uniform(-s, s, size=(fan_out, fan_in)), requires_grad=True)
        b = Tensor(np.zeros(fan_out), requires_grad=True)
        layers.append((w, b))
    return layers


def discriminator_params(model: Model) -> DiscriminatorParams:
    if not model.adversarial:
        raise ConfigError(f"mode {model.mode!r} has no discriminator")
    return DiscriminatorParams(model.head)


# ---------------------------------------------------------------------------
# dataset preparation


def prepare_inputs(shapes, k):
    """Normalized slice stacks for a list of LabeledShapes: (n, 3k, D, D)."""
    stacks = [normalize_mdr(compute_mdr(s.grid, k)).slices for s in shapes]
    labels = np.array([s.label - 1 for s in shapes], dtype=np.int64)  # 0-based
    ids = [s.shape_id for s in shapes]
    return np.stack(stacks), labels, ids


# ---------------------------------------------------------------------------
# trainer


@dataclass
class EpochMetrics:
    epoch: int
    g_loss: float
    d_loss: float
    train_acc: float


class Trainer:
    """Owns model parameters and optimizer state for one training run."""

    def __init__(self, config: TrainConfig, n_classes):
        self.config = config
        self.model = build_model(
            config.mode, n_classes, config.k, config.seed, config.descriptor_readout
        )
        self.opt_gen = Adam(
            [t for _, t in self.model.gen_tensors()], config.lr_gen, config.decay
        )
        self.opt_head = Adam(
            [t for _, t in self.model.head_tensors()], config.lr_dis, config.decay
        )
        self.epoch = 0
        self.metrics = []

    # -- single steps ------------------------------------------------------

    def _check_finite(self, loss):
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {self.epoch}")
        return loss

    def d_step(self, x_batch, y_batch=None):
        """Push the frozen generator's descriptors toward the extra class."""
        if len(x_batch) == 0:
            raise TrainingError("empty batch")
        with engine.no_grad():
            z = self.model.latent(x_batch)
        logits = self.model.head_logits(Tensor(z.data))
        targets = np.full(len(x_batch), self.model.n_classes, dtype=np.int64)
        loss = engine.softmax_cross_entropy(logits, targets)
        self.opt_head.zero_grad()
        loss.backward()
        try:
            self.opt_head.step(self.epoch)
        except engine.NonFiniteGradient as e:
            raise TrainingError(str(e)) from e
        return self._check_finite(loss.item())

    def g_step(self, x_batch, y_batch, lr_gen=None):
        """One step toward the true labels, through the whole generator."""
        if len(x_batch) == 0:
            raise TrainingError("empty batch")
        logits = self.model.logits(x_batch)
        loss = engine.softmax_cross_entropy(logits, y_batch)
        preds = logits.data[:, : self.model.n_classes].argmax(axis=1)
        correct = int((preds == y_batch).sum())
        self.opt_gen.zero_grad()
        self.opt_head.zero_grad()
        loss.backward()
        eff_gen = self.opt_gen.lr_at_epoch(self.epoch) if lr_gen is None else lr_gen
        try:
            if eff_gen > 0:
                self.opt_gen.step(lr=eff_gen)
            if not self.model.adversarial or self.config.g_updates_dis:
                self.opt_head.step(self.epoch)
        except engine.NonFiniteGradient as e:
            raise TrainingError(str(e)) from e
        return self._check_finite(loss.item()), correct

    # -- epochs ------------------------------------------------------------

    def train_epoch(self, train_x, train_y):
        """Shuffled pass over the train split; appends one metrics row."""
        if len(train_x) == 0:
            raise TrainingError("empty training set")
        rng = np.random.default_rng(
            [self.config.seed & 0xFFFFFFFFFFFFFFFF, 0x5EED, self.epoch]
        )
        order = rng.permutation(len(train_x))
        bs = self.config.batch_size
        g_sum = d_sum = 0.0
        correct = 0
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            xb, yb = train_x[idx], train_y[idx]
            if self.model.adversarial:
                d_sum += self.d_step(xb) * len(idx)
            g_loss, c = self.g_step(xb, yb)
            g_sum += g_loss * len(idx)
            correct += c
        n = len(order)
        self.metrics.append(
            EpochMetrics(self.epoch, g_sum / n, d_sum / n if self.model.adversarial else 0.0, correct / n)
        )
        self.epoch += 1
        return self.metrics[-1]

    # -- inference ---------------------------------------------------------

    def extract(self, x, batch_size=64):
        """Forward-only latents for (n, 3k, D, D) inputs: (n, 1024)."""
        outs = []
        with engine.no_grad():
            for start in range(0, len(x), batch_size):
                outs.append(self.model.latent(x[start : start + batch_size]).data)
        return np.concatenate(outs) if outs else np.zeros((0, DESCRIPTOR_DIM))

    # -- checkpointing -----------------------------------------------------

    def to_records(self):
        records = {
            "/meta/mode_id": np.float64(_MODE_IDS[self.model.mode]),
            "/meta/n_classes": np.float64(self.model.n_classes),
            "/meta/k": np.float64(self.model.k),
            "/meta/readout_id": np.float64(_READOUT_IDS[self.model.descriptor_readout]),
            "/meta/epoch": np.float64(self.epoch),
        }
        for name, t in self.model.named_tensors().items():
            records[name] = t.data
        for group, opt in (("gen", self.opt_gen), ("head", self.opt_head)):
            names = [n for n, _ in (self.model.gen_tensors() if group == "gen" else self.model.head_tensors())]
            records[f"/opt/{group}.t"] = np.float64(opt.state.t)
            for pname, m, v in zip(names, opt.state.m, opt.state.v):
                records[f"/opt/{pname}.m"] = m
                records[f"/opt/{pname}.v"] = v
        return records

    def save(self):
        return network.save_records(self.to_records())

    @classmethod
    def restore(cls, data, config: TrainConfig | None = None):
        records = network.load_records(data)
        mode = MODES[int(records["/meta/mode_id"])]
        n_classes = int(records["/meta/n_classes"])
        k = int(records["/meta/k"])
        readout = "cell" if int(records["/meta/readout_id"]) == 0 else "hidden"
        if config is None:
            config = TrainConfig(mode=mode, k=k, descriptor_readout=readout)
        trainer = cls(config, n_classes)
        trainer.epoch = int(records["/meta/epoch"])
        for name, t in trainer.model.named_tensors().items():
            if name not in records:
                raise network.NetworkError(f"checkpoint missing parameter {name}")
            if records[name].shape != t.data.shape:
                raise network.NetworkError(f"checkpoint shape mismatch for {name}")
            t.data = records[name].copy()
        for group, opt in (("gen", trainer.opt_gen), ("head", trainer.opt_head)):
            names = [n for n, _ in (trainer.model.gen_tensors() if group == "gen" else trainer.model.head_tensors())]
            opt.state.t = int(records[f"/opt/{group}.t"])
            opt.state.m = [records[f"/opt/{n}.m"].copy() for n in names]
            opt.state.v = [records[f"/opt/{n}.v"].copy() for n in names]
        return trainer


def metrics_csv(metrics) -> str:
    buf = io.StringIO()
    buf.write("epoch,g_loss,d_loss,train_acc\n")
    for m in metrics:
        buf.write(f"{m.epoch},{m.g_loss:.17g},{m.d_loss:.17g},{m.train_acc:.17g}\n")
    return buf.getvalue()
