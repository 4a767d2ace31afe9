"""Two-party split learning: message types, wire codec, gradient tap, training loop.

The feature party (host) owns the bottom network and the features; the label
party (guest) owns the top network and the labels. Per batch the host sends
a :class:`CutLayerMessage` carrying embeddings, the guest answers with a
:class:`GradientMessage` carrying the cut-layer gradients. Messages move
through an in-process channel as float64 arrays; :func:`encode_frame` gives
the float32 wire form used for ``.sltrace`` files.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .metrics import accuracy, roc_auc
from .models import (
    Network,
    NonFiniteError,
    OptimizerState,
    backward,
    cross_entropy_soft,
    forward,
    sgd_step,
)
from .numerics import RngStream, softmax

log = logging.getLogger(__name__)

FRAME_MAGIC = b"SL"
FRAME_VERSION = 1
MSG_EMBEDDING = 1
MSG_GRADIENT = 2
_HEADER = struct.Struct("<2sBBIIII")  # magic, version, type, epoch, batch, rows, cols
_PREFIX = struct.Struct("<I")


class ProtocolError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    pass


class FrameError(ValueError):
    pass


class TruncatedFrameError(FrameError):
    pass


class BadMagicError(FrameError):
    pass


class UnsupportedVersionError(FrameError):
    pass


class UnsupportedMessageTypeError(FrameError):
    pass


class FrameEncodingError(FrameError):
    pass


@dataclass(frozen=True)
class CutLayerMessage:
    epoch: int
    batch_id: int
    sample_ids: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        _check_message(self.sample_ids, self.embeddings)

    @property
    def payload(self):
        return self.embeddings


@dataclass(frozen=True)
class GradientMessage:
    epoch: int
    batch_id: int
    sample_ids: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        _check_message(self.sample_ids, self.gradients)

    @property
    def payload(self):
        return self.gradients


def _check_message(ids, payload):
    if np.ndim(payload) != 2:
        raise ValueError("message payload must be 2-D")
    if np.shape(ids) != (np.shape(payload)[0],):
        raise ValueError("sample_ids length must equal payload rows")


# -- wire codec ---------------------------------------------------------------

def encode_frame(msg) -> bytes:
    """Serialise a message: u32 body length, then the body.

    Body: ``"SL"`` | u8 version | u8 type | u32 epoch | u32 batch_id |
    u32 rows | u32 cols | u64 sample id x rows | f32 payload (row-major).
    All integers little-endian.
    """
    if isinstance(msg, CutLayerMessage):
        kind = MSG_EMBEDDING
    elif isinstance(msg, GradientMessage):
        kind = MSG_GRADIENT
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    rows, cols = np.shape(msg.payload)
    if rows * cols > 0xFFFFFFFF or rows > 0xFFFFFFFF or cols > 0xFFFFFFFF:
        raise FrameEncodingError("payload too large for u32 dimensions")
    for name, value in (("epoch", msg.epoch), ("batch_id", msg.batch_id)):
        if not 0 <= value <= 0xFFFFFFFF:
            raise FrameEncodingError(f"{name} {value} does not fit in u32")
    body = b"".join([
        _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, kind, msg.epoch, msg.batch_id, rows, cols),
        np.asarray(msg.sample_ids, dtype="<u8").tobytes(),
        np.asarray(msg.payload, dtype="<f4").tobytes(),
    ])
    return _PREFIX.pack(len(body)) + body


def decode_frame(buf):
    """Inverse of :func:`encode_frame` for exactly one frame."""
    msg, used = _decode_at(memoryview(buf), 0)
    if used != len(buf):
        raise FrameError(f"{len(buf) - used} trailing bytes after frame")
    return msg


def _decode_at(view, pos):
    if len(view) - pos < _PREFIX.size:
        raise TruncatedFrameError(
            f"truncated frame: expected {_PREFIX.size} length bytes, got {len(view) - pos}"
        )
    (length,) = _PREFIX.unpack_from(view, pos)
    start = pos + _PREFIX.size
    available = len(view) - start
    if available < _HEADER.size:
        raise TruncatedFrameError(
            f"truncated frame: expected {length} bytes, got {available}"
        )
    magic, version, kind, epoch, batch_id, rows, cols = _HEADER.unpack_from(view, start)
    if magic != FRAME_MAGIC:
        raise BadMagicError(f"bad frame magic {bytes(magic)!r}")
    if version != FRAME_VERSION:
        raise UnsupportedVersionError(f"unsupported frame version {version}")
    if kind not in (MSG_EMBEDDING, MSG_GRADIENT):
        raise UnsupportedMessageTypeError(f"unsupported message type {kind}")
    expected = _HEADER.size + 8 * rows + 4 * rows * cols
    if length != expected:
        raise FrameError(f"length prefix {length} disagrees with header ({expected})")
    if available < expected:
        raise TruncatedFrameError(f"truncated frame: expected {expected} bytes, got {available}")
    p = start + _HEADER.size
    ids = np.frombuffer(view, "<u8", rows, p).astype(np.int64)
    payload = np.frombuffer(view, "<f4", rows * cols, p + 8 * rows)
    payload = payload.astype(np.float64).reshape(rows, cols)
    cls = CutLayerMessage if kind == MSG_EMBEDDING else GradientMessage
    return cls(epoch, batch_id, ids, payload), start + expected


def iter_frames(buf):
    """Yield messages from a concatenation of frames."""
    view = memoryview(buf)
    pos = 0
    while pos < len(view):
        msg, pos = _decode_at(view, pos)
        yield msg


def write_trace(messages, path):
    with open(path, "wb") as fh:
        for msg in messages:
            fh.write(encode_frame(msg))


def read_trace(path):
    with open(path, "rb") as fh:
        return list(iter_frames(fh.read()))


# -- adversary view -----------------------------------------------------------

class GradientTap:
    """Append-only log of every message the host sees inside an epoch window.

    ``window`` is an inclusive ``(first, last)`` epoch pair; ``None`` records
    all epochs.
    """

    def __init__(self, window=None):
        self.window = None if window is None else (int(window[0]), int(window[1]))
        self.embeddings = []
        self.gradients = []

    def captures(self, epoch):
        return self.window is None or self.window[0] <= epoch <= self.window[1]

    def record(self, msg):
        if not self.captures(msg.epoch):
            return
        # frozen views: the adversary cannot edit its log, and the sender's
        # own arrays stay writable
        ids, payload = msg.sample_ids.view(), msg.payload.view()
        for arr in (ids, payload):
            arr.flags.writeable = False
        msg = type(msg)(msg.epoch, msg.batch_id, ids, payload)
        if isinstance(msg, CutLayerMessage):
            self.embeddings.append(msg)
        else:
            self.gradients.append(msg)

    def __len__(self):
        return len(self.gradients)

    @property
    def epochs(self):
        return sorted({m.epoch for m in self.gradients} | {m.epoch for m in self.embeddings})

    def view(self, source="gradients", epochs=None):
        """Per-sample rows from ``source``; later observations win.

        ``epochs`` is an inclusive ``(first, last)`` pair, ``"last"`` for the
        final recorded epoch, or ``None`` for everything recorded. Returns
        ``(sample_ids, matrix)`` sorted by sample id.
        """
        if source not in ("gradients", "embeddings"):
            raise ValueError(f"unknown tap source {source!r}")
        msgs = self.gradients if source == "gradients" else self.embeddings
        if not msgs:
            raise ValueError(f"tap holds no {source}")
        if epochs == "last":
            last = max(m.epoch for m in msgs)
            epochs = (last, last)
        if epochs is not None:
            msgs = [m for m in msgs if epochs[0] <= m.epoch <= epochs[1]]
            if not msgs:
                raise ValueError(f"no {source} inside epochs {epochs}")
        ids = np.concatenate([m.sample_ids for m in msgs])
        rows = np.concatenate([m.payload for m in msgs])
        # keep the final occurrence of each id
        rev_unique, rev_first = np.unique(ids[::-1], return_index=True)
        keep = ids.size - 1 - rev_first
        return rev_unique, rows[keep]

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in self.embeddings + self.gradients:
            h.update(struct.pack("<BII", isinstance(m, GradientMessage), m.epoch, m.batch_id))
            h.update(np.ascontiguousarray(m.sample_ids).tobytes())
            h.update(np.ascontiguousarray(m.payload).tobytes())
        return h.hexdigest()

    def messages(self):
        """Embedding/gradient messages interleaved in exchange order."""
        out = []
        for e, g in zip(self.embeddings, self.gradients):
            out.extend((e, g))
        return out


# -- configuration and results ------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 0.1
    defense: object = None  # secdt.DefenseConfig or None
    tap_window: tuple = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TimingReport:
    default_train: float = 0.0
    dim_transform: float = 0.0
    grad_norm: float = 0.0
    noise_rand: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class SplitModel:
    bottom: Network
    top: Network

    @property
    def cut_width(self):
        return self.bottom.output_width

    def logits(self, X):
        return forward(self.top, forward(self.bottom, X).output).output

    def predict_proba(self, X):
        return softmax(self.logits(X), axis=1)


@dataclass
class TrainingResult:
    model: SplitModel
    tap: GradientTap
    losses: list
    initial_loss: float
    timing: TimingReport

    def __iter__(self):
        return iter((self.model, self.tap, self.losses, self.timing))


class OneHotTargets:
    """Guest-side target provider without any defense."""

    loss = staticmethod(cross_entropy_soft)

    def __init__(self, labels, width):
        labels = np.asarray(labels)
        if labels.size and labels.max() >= width:
            raise ProtocolError(f"label {labels.max()} does not fit a {width}-wide top model")
        self._targets = np.eye(width)[labels]

    def targets(self, epoch):
        return self._targets

    def filter_gradients(self, grads):
        return grads


@dataclass
class _Clock:
    noise: float = 0.0
    norm: float = 0.0


class Host:
    def __init__(self, bottom: Network, features, ids, opt: OptimizerState):
        self.bottom = bottom
        self.features = features
        self.ids = ids
        self.opt = opt
        self._pending = {}

    def send(self, epoch, batch_id, rows) -> CutLayerMessage:
        trace = forward(self.bottom, self.features[rows])
        self._pending[batch_id] = trace
        return CutLayerMessage(epoch, batch_id, self.ids[rows], trace.output)

    def receive(self, msg: GradientMessage):
        trace = self._pending.pop(msg.batch_id, None)
        if trace is None or trace.output.shape != msg.gradients.shape:
            raise ProtocolError(f"gradient for unknown or mismatched batch {msg.batch_id}")
        grads, _ = backward(self.bottom, trace, msg.gradients)
        sgd_step(self.bottom, grads, self.opt)


class Guest:
    def __init__(self, top: Network, ids, provider, opt: OptimizerState):
        self.top = top
        self.provider = provider
        self.opt = opt
        self._sorter = np.argsort(ids, kind="stable")
        self._sorted_ids = np.asarray(ids)[self._sorter]
        self.current_targets = None

    def rows_for(self, sample_ids):
        pos = np.searchsorted(self._sorted_ids, sample_ids)
        if np.any(pos >= self._sorted_ids.size) or np.any(self._sorted_ids[np.minimum(pos, self._sorted_ids.size - 1)] != sample_ids):
            raise ProtocolError("message references sample ids the guest does not hold")
        return self._sorter[pos]

    def respond(self, msg: CutLayerMessage, clock: _Clock):
        if msg.embeddings.shape[1] != self.top.input_width:
            raise ProtocolError(
                f"embedding width {msg.embeddings.shape[1]} != top input {self.top.input_width}"
            )
        trace = forward(self.top, msg.embeddings)
        targets = self.current_targets[self.rows_for(msg.sample_ids)]
        loss, dlogits = self.provider.loss(trace.output, targets)
        if not np.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at epoch {msg.epoch}, batch {msg.batch_id}")
        grads, g = backward(self.top, trace, dlogits)
        sgd_step(self.top, grads, self.opt)
        t0 = time.perf_counter()
        g = self.provider.filter_gradients(g)
        clock.norm += time.perf_counter() - t0
        return loss, GradientMessage(msg.epoch, msg.batch_id, msg.sample_ids, g)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def run_training(bottom: Network, top: Network, data: Dataset, cfg: TrainConfig,
                 provider=None, tap: GradientTap = None) -> TrainingResult:
    """Train a split model; both networks are updated in place.

    ``provider`` supplies guest-side targets per epoch and the gradient
    filter applied before transmission. When omitted it is derived from
    ``cfg.defense`` (SecDT) or falls back to plain one-hot targets.
    """
    t_start = time.perf_counter()
    clock = _Clock()
    provider_given = provider is not None
    if bottom.output_width != top.input_width:
        raise ProtocolError(
            f"cut width mismatch: bottom emits {bottom.output_width}, top takes {top.input_width}"
        )
    if provider is None:
        if cfg.defense is not None:
            from .secdt import SecDTGuest

            provider = SecDTGuest(cfg.defense, data.labels, data.k, RngStream(cfg.seed).child("secdt"))
        else:
            provider = OneHotTargets(data.labels, top.output_width)
    tap = tap if tap is not None else GradientTap(cfg.tap_window)

    host = Host(bottom, data.features, data.ids, OptimizerState(cfg.learning_rate))
    guest = Guest(top, data.ids, provider, OptimizerState(cfg.learning_rate))
    order_rng = RngStream(cfg.seed).child("batch-order")

    guest.current_targets = _epoch_targets(provider, 0, clock)
    initial = forward(top, forward(bottom, data.features).output).output
    initial_loss = provider.loss(initial, guest.current_targets)[0]

    losses = []
    for epoch in range(cfg.epochs):
        if epoch > 0:
            guest.current_targets = _epoch_targets(provider, epoch, clock)
        total, count = 0.0, 0
        for batch_id, rows in enumerate(_batches(len(data), cfg.batch_size, order_rng)):
            up = host.send(epoch, batch_id, rows)
            tap.record(up)
            loss, down = guest.respond(up, clock)
            tap.record(down)
            try:
                host.receive(down)
            except NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch}, batch {batch_id}: {exc}") from exc
            total += loss * rows.size
            count += rows.size
        losses.append(total / count)
        log.debug("epoch %d loss %.6f", epoch, losses[-1])

    elapsed = time.perf_counter() - t_start
    if isinstance(provider, OneHotTargets):
        timing = TimingReport(total=elapsed)
    else:
        # construction happens before t_start when the caller built the provider
        setup = getattr(provider, "setup_seconds", 0.0)
        timing = TimingReport(
            dim_transform=setup,
            grad_norm=clock.norm,
            noise_rand=clock.noise,
            total=elapsed + (setup if provider_given else 0.0),
        )
    timing.default_train = timing.total - timing.dim_transform - timing.grad_norm - timing.noise_rand
    return TrainingResult(SplitModel(bottom, top), tap, losses, initial_loss, timing)


def _epoch_targets(provider, epoch, clock):
    t0 = time.perf_counter()
    targets = provider.targets(epoch)
    clock.noise += time.perf_counter() - t0
    return targets


def train_monolithic(net: Network, data: Dataset, cfg: TrainConfig):
    """Reference non-split training with the same batch order and optimiser.

    Used to check that splitting the network changes nothing numerically.
    """
    opt = OptimizerState(cfg.learning_rate)
    targets = np.eye(net.output_width)[data.labels]
    order_rng = RngStream(cfg.seed).child("batch-order")
    losses = []
    for _ in range(cfg.epochs):
        total = 0.0
        for rows in _batches(len(data), cfg.batch_size, order_rng):
            trace = forward(net, data.features[rows])
            loss, dlogits = cross_entropy_soft(trace.output, targets[rows])
            grads, _ = backward(net, trace, dlogits)
            sgd_step(net, grads, opt)
            total += loss * rows.size
        losses.append(total / len(data))
    return net, losses


@dataclass
class UtilityReport:
    accuracy: float
    auc: float = None
    accuracy_max_mapping: float = None
    n: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def utility(self):
        """AUC for binary tasks, accuracy otherwise."""
        return self.auc if self.auc is not None else self.accuracy

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "accuracy_max_mapping": self.accuracy_max_mapping,
            "n": self.n,
            "utility": self.utility,
        }


def evaluate(model: SplitModel, data: Dataset, pools=None) -> UtilityReport:
    """Held-out utility. With ``pools`` the K-wide output is mapped back to k classes."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    p = model.predict_proba(data.features)
    mm_acc = None
    if pools is not None:
        from .secdt import maximum_mapping

        if p.shape[1] != pools.K:
            raise ValueError(f"model emits {p.shape[1]} classes but pools expect K={pools.K}")
        class_scores = p @ pools.weights.T
        pred = np.argmax(class_scores, axis=1)
        mm_acc = accuracy(maximum_mapping(p, pools), data.labels)
    else:
        class_scores = p
        pred = np.argmax(p, axis=1)
    auc = None
    if data.k == 2 and 0 < data.labels.sum() < len(data):
        auc = roc_auc(class_scores[:, 1], data.labels)
    return UtilityReport(accuracy(pred, data.labels), auc, mm_acc, len(data))
