"""Feature generator (shared slice encoder + ConvLSTM) and discriminator.

The encoder maps each normalized 30x30 slice to a 256x2x2 feature map
through four stride-2 conv layers (32, 64, 128, 256 channels). The
ConvLSTM consumes the 3k feature maps in sequence; its final cell state,
flattened to 1024 values, is the shape descriptor. The discriminator is
a 3-layer MLP emitting N+1 logits (the extra class marks a descriptor as
too ambiguous to label).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor

ENCODER_CHANNELS = (32, 64, 128, 256)
ENCODER_KERNEL = 4
ENCODER_STRIDE = 2
LSTM_CHANNELS = 256
LSTM_KERNEL = 3
LSTM_SPATIAL = 2
DESCRIPTOR_DIM = LSTM_CHANNELS * LSTM_SPATIAL * LSTM_SPATIAL  # 1024
LEAKY_SLOPE = 0.2

CHECKPOINT_MAGIC = b"MDRNET1"


class NetworkError(ValueError):
    """Shape mismatch or malformed parameter set."""


@dataclass
class SliceEncoderParams:
    """Conv stack shared across all slices: list of (kernels, bias)."""

    layers: list

    def tensors(self):
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"gen.enc{i}.w", w))
            out.append((f"gen.enc{i}.b", b))
        return out


@dataclass
class ConvLstmParams:
    """Gate kernels, Hadamard peephole tensors, and biases (one cell)."""

    w_xi: Tensor
    w_hi: Tensor
    w_ci: Tensor
    b_i: Tensor
    w_xf: Tensor
    w_hf: Tensor
    w_cf: Tensor
    b_f: Tensor
    w_xc: Tensor
    w_hc: Tensor
    b_c: Tensor
    w_xo: Tensor
    w_ho: Tensor
    w_co: Tensor
    b_o: Tensor

    def tensors(self):
        names = [
            "w_xi", "w_hi", "w_ci", "b_i",
            "w_xf", "w_hf", "w_cf", "b_f",
            "w_xc", "w_hc", "b_c",
            "w_xo", "w_ho", "w_co", "b_o",
        ]
        return [(f"gen.lstm.{n}", getattr(self, n)) for n in names]


@dataclass
class GeneratorParams:
    encoder: SliceEncoderParams
    lstm: ConvLstmParams

    def tensors(self):
        return self.encoder.tensors() + self.lstm.tensors()


@dataclass
class DiscriminatorParams:
    """FC stack 1024 -> 128 -> 64 -> N+1; leaky units after the first two."""

    layers: list  # list of (weight, bias)

    @property
    def n_outputs(self):
        return self.layers[-1][0].shape[0]

    def tensors(self):
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"dis.fc{i}.w", w))
            out.append((f"dis.fc{i}.b", b))
        return out


def _uniform_fan_in(rng, shape, fan_in):
    s = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def init_encoder(rng, in_channels=1, channels=ENCODER_CHANNELS):
    layers = []
    prev = in_channels
    for c in channels:
        fan_in = prev * ENCODER_KERNEL * ENCODER_KERNEL
        w = _uniform_fan_in(rng, (c, prev, ENCODER_KERNEL, ENCODER_KERNEL), fan_in)
        b = Tensor(np.zeros(c), requires_grad=True)
        layers.append((w, b))
        prev = c
    return SliceEncoderParams(layers)


def init_convlstm(rng, channels=LSTM_CHANNELS, spatial=LSTM_SPATIAL, kernel=LSTM_KERNEL):
    fan_in = channels * kernel * kernel

    def kern():
        return _uniform_fan_in(rng, (channels, channels, kernel, kernel), fan_in)

    def peephole():
        return _uniform_fan_in(rng, (channels, spatial, spatial), channels)

    def bias(value=0.0):
        return Tensor(np.full(channels, value, dtype=np.float64), requires_grad=True)

    # forget-gate bias starts at 1 so early recurrence keeps its state
    return ConvLstmParams(
        w_xi=kern(), w_hi=kern(), w_ci=peephole(), b_i=bias(),
        w_xf=kern(), w_hf=kern(), w_cf=peephole(), b_f=bias(1.0),
        w_xc=kern(), w_hc=kern(), b_c=bias(),
        w_xo=kern(), w_ho=kern(), w_co=peephole(), b_o=bias(),
    )


def init_discriminator(rng, n_classes, widths=(128, 64), in_dim=DESCRIPTOR_DIM):
    sizes = [in_dim, *widths, n_classes + 1]
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        w = _uniform_fan_in(rng, (fan_out, fan_in), fan_in)
        b = Tensor(np.zeros(fan_out), requires_grad=True)
        layers.append((w, b))
    return DiscriminatorParams(layers)


def init_params(seed, n_classes):
    """Seed-deterministic generator and discriminator parameter sets."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x3DA])
    gen = GeneratorParams(encoder=init_encoder(rng), lstm=init_convlstm(rng))
    dis = init_discriminator(rng, n_classes)
    return gen, dis


# ---------------------------------------------------------------------------
# forward passes (all accept a leading batch axis)


def encode_slice(params: SliceEncoderParams, slice_input, slope=LEAKY_SLOPE):
    """Shared conv stack over (B, 1, H, W) or (1, H, W) slices."""
    x = slice_input if isinstance(slice_input, Tensor) else Tensor(slice_input)
    for w, b in params.layers:
        x = engine.conv2d(x, w, b, stride=ENCODER_STRIDE)
        x = engine.leaky_rectifier(x, slope)
    return x


def convlstm_step(params: ConvLstmParams, x_t, h_prev, c_prev):
    """One peephole ConvLSTM transition; states keep the input's shape."""
    conv = lambda inp, w: engine.conv2d(inp, w, None, stride=1)
    had = engine.hadamard

    def gate_bias(pre, b):
        # per-channel bias broadcast over the spatial cells
        return engine.add(pre, engine.reshape(b, (b.shape[0], 1, 1)))

    i_pre = engine.add(conv(x_t, params.w_xi), conv(h_prev, params.w_hi))
    i_pre = engine.add(i_pre, had(params.w_ci, c_prev))
    i_t = engine.sigmoid(gate_bias(i_pre, params.b_i))

    f_pre = engine.add(conv(x_t, params.w_xf), conv(h_prev, params.w_hf))
    f_pre = engine.add(f_pre, had(params.w_cf, c_prev))
    f_t = engine.sigmoid(gate_bias(f_pre, params.b_f))

    g_pre = engine.add(conv(x_t, params.w_xc), conv(h_prev, params.w_hc))
    c_t = engine.add(
        had(f_t, c_prev), had(i_t, engine.tanh(gate_bias(g_pre, params.b_c)))
    )

    o_pre = engine.add(conv(x_t, params.w_xo), conv(h_prev, params.w_ho))
    o_pre = engine.add(o_pre, had(params.w_co, c_t))
    o_t = engine.sigmoid(gate_bias(o_pre, params.b_o))

    h_t = had(o_t, engine.tanh(c_t))
    return h_t, c_t


def run_convlstm(params: ConvLstmParams, features, readout="cell"):
    """Fold a (B, T, C, H, W) feature sequence into a (B, C*H*W) latent.

    readout selects the final cell state ("cell", the descriptor proper)
    or the final hidden state ("hidden", kept for comparison).
    """
    if readout not in ("cell", "hidden"):
        raise NetworkError(f"unknown readout {readout!r}")
    b, t = features.shape[0], features.shape[1]
    state_shape = features.shape[2:]
    h = Tensor(np.zeros((b, *state_shape)))
    c = Tensor(np.zeros((b, *state_shape)))
    for step in range(t):
        x_t = engine.select(features, step, axis=1)
        h, c = convlstm_step(params, x_t, h, c)
    final = c if readout == "cell" else h
    return engine.reshape(final, (b, int(np.prod(state_shape))))


def generate_descriptor(gen: GeneratorParams, mdr, readout="cell"):
    """Shape descriptor for one normalized slice sequence (3k, H, W)."""
    slices = np.asarray(mdr.slices if hasattr(mdr, "slices") else mdr, dtype=np.float64)
    if slices.ndim != 3:
        raise NetworkError(f"expected (3k, H, W) slices, got {slices.shape}")
    latent = batch_descriptors(gen, slices[None], readout=readout)
    return latent.data[0].copy()


def batch_descriptors(gen: GeneratorParams, batch, readout="cell"):
    """Latent Tensor (B, 1024) for a (B, 3k, H, W) batch of slice stacks."""
    batch = np.asarray(batch, dtype=np.float64)
    b, t, hh, ww = batch.shape
    feats = encode_slice(gen.encoder, Tensor(batch.reshape(b * t, 1, hh, ww)))
    _, ch, fh, fw = feats.shape
    feats = engine.reshape(feats, (b, t, ch, fh, fw))
    return run_convlstm(gen.lstm, feats, readout=readout)


def discriminate(dis: DiscriminatorParams, descriptor):
    """Logits over the N real classes plus the adversarial class."""
    x = descriptor if isinstance(descriptor, Tensor) else Tensor(descriptor)
    expected = dis.layers[0][0].shape[1]
    if x.shape[-1] != expected:
        raise NetworkError(
            f"descriptor width {x.shape[-1]} != discriminator fan-in {expected}"
        )
    last = len(dis.layers) - 1
    for i, (w, b) in enumerate(dis.layers):
        x = engine.fully_connected(x, w, b)
        if i < last:
            x = engine.leaky_rectifier(x, LEAKY_SLOPE)
    return x


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_record(out, name, array):
    nb = name.encode("utf-8")
    out += struct.pack("<I", len(nb))
    out += nb
    out += struct.pack("<I", array.ndim)
    for d in array.shape:
        out += struct.pack("<I", d)
    out += np.ascontiguousarray(array, dtype="<f8").tobytes()


def save_records(records):
    """Serialize an ordered {name: float64 array} mapping."""
    out = bytearray(CHECKPOINT_MAGIC)
    for name, array in records.items():
        _write_record(out, name, np.asarray(array, dtype=np.float64))
    return bytes(out)


def load_records(data):
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise NetworkError("bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    records = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos) if ndim else ()
        pos += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        records[name] = arr.astype(np.float64)
    return records


# ---------------------------------------------------------------------------
# descriptor files


def save_descriptors(ids, descriptors):
    """UTF-8 descriptor table: header plus one 1024-value line per shape."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2 or descriptors.shape[1] != DESCRIPTOR_DIM:
        raise NetworkError(f"descriptors must be (n, {DESCRIPTOR_DIM})")
    lines = [f"DDSD n={len(ids)} dim={DESCRIPTOR_DIM}"]
    for sid, vec in zip(ids, descriptors):
        lines.append(sid + "\t" + " ".join(f"{v:.17g}" for v in vec))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_descriptors(data):
    lines = data.decode("utf-8").splitlines()
    if not lines or not lines[0].startswith("DDSD "):
        raise NetworkError("bad descriptor file header")
    fields = dict(f.split("=") for f in lines[0].split()[1:])
    dim = int(fields["dim"])
    ids, vecs = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        sid, payload = line.split("\t", 1)
        vec = np.array(payload.split(), dtype=np.float64)
        if vec.size != dim:
            raise NetworkError(f"descriptor for {sid} has {vec.size} values, expected {dim}")
        ids.append(sid)
        vecs.append(vec)
    if len(ids) != int(fields["n"]):
        raise NetworkError("descriptor count does not match header")
    return ids, np.array(vecs)
