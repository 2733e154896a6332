"""Two-party private-inference simulation over a prime field.

The client holds the input, the server holds dense layers (W_i, b_i). A
trusted dealer stands in for the homomorphic offline phase: it samples the
client mask r_i and server mask s_i and gives the client W_i r_i - s_i. Online,
the client sends y_0 - r_0 once. After that the server's share of every
pre-activation is W_i (y_i - r_i) + s_i + b_i, the client's is W_i r_i - s_i,
and an ideal ReLU functionality (the garbled-circuit stand-in) reconstructs
the sum, applies ReLU and the fixed-point truncation, and hands the server
y_{i+1} - r_{i+1}. After the last layer the ideal stage only truncates and
sends the logits to the client.
"""

from __future__ import annotations

import json
import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import stats

from .errors import OverflowAbort, ProtocolError, ShapeError

MERSENNE_61 = (1 << 61) - 1


class MsgType(IntEnum):
    SHARE = 0
    GC_IN = 1
    GC_OUT = 2


CLIENT, SERVER, IDEAL = "client", "server", "ideal"


# -- field and fixed point -----------------------------------------------------


@dataclass(frozen=True)
class FixedPointCodec:
    scale_bits: int = 12
    modulus: int = MERSENNE_61
    guard_bits: int = 4

    def __post_init__(self):
        if self.modulus < 3:
            raise ProtocolError("modulus must be an odd prime", modulus=self.modulus)
        if self.scale_bits < 0 or self.guard_bits < 0:
            raise ProtocolError("scale and guard bits must be non-negative")

    @property
    def half(self) -> int:
        return self.modulus // 2

    @property
    def value_bound(self) -> float:
        """Largest encodable real magnitude (exclusive)."""
        return self.modulus / 2 ** (2 * self.scale_bits + self.guard_bits)

    @property
    def accumulator_bound(self) -> int:
        """Largest signed magnitude (exclusive) allowed before truncation."""
        return self.modulus >> self.guard_bits

    def signed(self, v: int) -> int:
        v %= self.modulus
        return v - self.modulus if v > self.half else v

    def encode(self, x: float, scale_bits: int | None = None) -> int:
        s = self.scale_bits if scale_bits is None else scale_bits
        if not abs(x) < self.value_bound:
            raise OverflowAbort("value exceeds the fixed-point bound", value=float(x),
                                bound=self.value_bound)
        return round(x * (1 << s)) % self.modulus

    def decode(self, v: int, scale_bits: int | None = None) -> float:
        s = self.scale_bits if scale_bits is None else scale_bits
        return self.signed(int(v)) / (1 << s)

    def encode_vec(self, xs, scale_bits=None) -> list[int]:
        return [self.encode(float(x), scale_bits) for x in np.asarray(xs, dtype=np.float64).ravel()]

    def decode_vec(self, vs, scale_bits=None) -> list[float]:
        return [self.decode(v, scale_bits) for v in vs]

    def check_accumulator(self, v: int, layer: int) -> int:
        sv = self.signed(v)
        if abs(sv) >= self.accumulator_bound:
            raise OverflowAbort("pre-truncation value exceeds the codec bound", layer=layer,
                                value=sv, bound=self.accumulator_bound)
        return sv

    def relu_truncate(self, v: int, layer: int, relu: bool = True) -> int:
        """Reconstructed accumulator -> optional ReLU -> floor shift by scale_bits, as a field element."""
        sv = self.check_accumulator(v, layer)
        if relu and sv < 0:
            sv = 0
        return (sv >> self.scale_bits) % self.modulus


def matvec(w: list[list[int]], x: list[int], p: int) -> list[int]:
    return [sum(a * b for a, b in zip(row, x)) % p for row in w]


def vadd(a, b, p):
    return [(x + y) % p for x, y in zip(a, b)]


def vsub(a, b, p):
    return [(x - y) % p for x, y in zip(a, b)]


# -- model ---------------------------------------------------------------------


@dataclass
class DenseModel:
    """Real-valued dense layers; every layer but the last is followed by ReLU."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).ravel() for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.size:
                raise ShapeError(f"layer {i}: weight rows {w.shape[0]} != bias length {b.size}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: input {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def random(cls, dims, rng: np.random.Generator, scale: float = 0.5) -> "DenseModel":
        ws = [rng.uniform(-scale, scale, (o, i)) for i, o in zip(dims[:-1], dims[1:])]
        bs = [rng.uniform(-scale, scale, o) for o in dims[1:]]
        return cls(ws, bs)

    def to_dict(self) -> dict:
        return {"layers": [{"W": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_dict(cls, d: dict) -> "DenseModel":
        try:
            layers = d["layers"]
            return cls([np.asarray(l["W"], dtype=np.float64) for l in layers],
                       [np.asarray(l["b"], dtype=np.float64) for l in layers])
        except (KeyError, TypeError, ValueError) as exc:
            raise ShapeError(f"unparseable model: {exc}") from exc

    def forward(self, x) -> np.ndarray:
        y = np.asarray(x, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            y = w @ y + b
            if i < len(self.weights) - 1:
                y = np.maximum(y, 0.0)
        return y


@dataclass
class EncodedModel:
    weights: list[list[list[int]]]  # scale s
    biases: list[list[int]]  # scale 2s, so they add directly to W y
    codec: FixedPointCodec
    dims: list[int]

    @classmethod
    def encode(cls, model: DenseModel, codec: FixedPointCodec) -> "EncodedModel":
        ws = [[codec.encode_vec(row) for row in w] for w in model.weights]
        bs = [codec.encode_vec(b, 2 * codec.scale_bits) for b in model.biases]
        return cls(ws, bs, codec, model.dims)


def plaintext_forward(model: EncodedModel, x_enc: list[int]) -> list[int]:
    """Single-party fixed-point forward pass with the protocol's truncation schedule."""
    p = model.codec.modulus
    y = list(x_enc)
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = vadd(matvec(w, y, p), b, p)
        y = [model.codec.relu_truncate(v, i, relu=i < last) for v in z]
    return y


# -- transcript and transports -------------------------------------------------


_HEADER = struct.Struct("<BIQ")


@dataclass(frozen=True)
class Message:
    sender: str
    recipient: str
    layer: int
    msg_type: MsgType
    payload: tuple[int, ...]

    @property
    def direction(self) -> str:
        return f"{self.sender}->{self.recipient}"

    def to_bytes(self) -> bytes:
        return _HEADER.pack(int(self.msg_type), self.layer, len(self.payload)) + struct.pack(
            f"<{len(self.payload)}Q", *self.payload)


def parse_frames(blob: bytes) -> list[tuple[MsgType, int, tuple[int, ...]]]:
    out, pos = [], 0
    while pos < len(blob):
        if pos + _HEADER.size > len(blob):
            raise ProtocolError("truncated frame header", offset=pos)
        t, layer, n = _HEADER.unpack_from(blob, pos)
        pos += _HEADER.size
        end = pos + 8 * n
        if end > len(blob):
            raise ProtocolError("truncated frame payload", offset=pos)
        out.append((MsgType(t), layer, struct.unpack_from(f"<{n}Q", blob, pos)))
        pos = end
    return out


@dataclass
class ProtocolTranscript:
    messages: list[Message] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return b"".join(m.to_bytes() for m in self.messages)

    def sidecar(self) -> list[dict]:
        # logical timestamps: position in the schedule, deterministic by construction
        return [
            {"seq": i, "t": i, "direction": m.direction, "layer": m.layer,
             "msg_type": m.msg_type.name.lower(), "count": len(m.payload)}
            for i, m in enumerate(self.messages)
        ]

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), indent=2) + "\n"

    def of(self, sender: str, recipient: str, msg_type: MsgType | None = None) -> list[Message]:
        return [m for m in self.messages if m.sender == sender and m.recipient == recipient
                and (msg_type is None or m.msg_type == msg_type)]


class InProcessTransport:
    """One FIFO per (sender, recipient) channel; every message is also appended to the transcript."""

    def __init__(self):
        self.transcript = ProtocolTranscript()
        self._queues: dict[tuple[str, str], deque] = {}

    def send(self, msg: Message):
        self.transcript.messages.append(msg)
        self._queues.setdefault((msg.sender, msg.recipient), deque()).append(msg)

    def recv(self, recipient: str, sender: str, layer: int, msg_type: MsgType) -> list[int]:
        queue = self._queues.get((sender, recipient))
        if not queue:
            raise ProtocolError("no message waiting", sender=sender, recipient=recipient, layer=layer)
        return self._check(queue.popleft(), sender, layer, msg_type)

    @staticmethod
    def _check(msg: Message, sender, layer, msg_type) -> list[int]:
        if (msg.sender, msg.layer, msg.msg_type) != (sender, layer, msg_type):
            raise ProtocolError("out-of-schedule message", got=[msg.sender, msg.layer, int(msg.msg_type)],
                                want=[sender, layer, int(msg_type)])
        return list(msg.payload)

    def close(self):
        pass


class SocketTransport(InProcessTransport):
    """Same interface, but every message crosses a local stream socket in wire format."""

    def __init__(self):
        super().__init__()
        self._links: dict[tuple[str, str], tuple[socket.socket, socket.socket]] = {}
        self._pending: dict[tuple[str, str], int] = {}

    def send(self, msg: Message):
        self.transcript.messages.append(msg)
        key = (msg.sender, msg.recipient)
        if key not in self._links:
            self._links[key] = socket.socketpair()
            self._pending[key] = 0
        self._links[key][0].sendall(msg.to_bytes())
        self._pending[key] += 1

    @staticmethod
    def _read(sock, n):
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise ProtocolError("socket closed mid-frame")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, recipient, sender, layer, msg_type):
        key = (sender, recipient)
        if not self._pending.get(key):
            raise ProtocolError("no message waiting", sender=sender, recipient=recipient, layer=layer)
        rx = self._links[key][1]
        t, got_layer, n = _HEADER.unpack(self._read(rx, _HEADER.size))
        payload = struct.unpack(f"<{n}Q", self._read(rx, 8 * n))
        self._pending[key] -= 1
        return self._check(Message(sender, recipient, got_layer, MsgType(t), payload), sender, layer, msg_type)

    def close(self):
        for a, b in self._links.values():
            a.close()
            b.close()
        self._links.clear()
        self._pending.clear()


# -- offline phase -------------------------------------------------------------


@dataclass
class OfflineMaterial:
    client_r: list[list[int]]  # mask for the input of each layer
    server_s: list[list[int]]
    client_wr_minus_s: list[list[int]]


def offline_phase(model: EncodedModel, rng: np.random.Generator, *, zero_masks: bool = False) -> OfflineMaterial:
    """Trusted dealer: uniform r_i, s_i and the client's W_i r_i - s_i.

    ``zero_masks`` forces r_i = 0; it exists only to show the audit catching an
    unblinded input.
    """
    p = model.codec.modulus
    rs, ss = [], []
    for n_in, n_out in zip(model.dims[:-1], model.dims[1:]):
        rs.append([0] * n_in if zero_masks else [int(v) for v in rng.integers(0, p, n_in)])
        ss.append([int(v) for v in rng.integers(0, p, n_out)])
    return dealer_material(model, rs, ss)


def dealer_material(model: EncodedModel, rs, ss) -> OfflineMaterial:
    """Offline material for given masks: the client's W_i r_i - s_i in the field."""
    p = model.codec.modulus
    if len(rs) != len(model.weights) or len(ss) != len(model.weights):
        raise ShapeError("need one r and one s per layer")
    wrs = []
    for i, (w, r, s) in enumerate(zip(model.weights, rs, ss)):
        if len(r) != model.dims[i] or len(s) != model.dims[i + 1]:
            raise ShapeError(f"layer {i}: mask sizes do not match dims")
        if len(w) != len(s) or any(len(row) != len(r) for row in w):
            raise ShapeError(f"layer {i}: encoded weights do not match dims")
        wrs.append(vsub(matvec(w, r, p), s, p))
    return OfflineMaterial([list(r) for r in rs], [list(s) for s in ss], wrs)


def share(x: int, p: int, rng: np.random.Generator) -> tuple[int, int]:
    a = int(rng.integers(0, p))
    return a, (x - a) % p


# -- parties -------------------------------------------------------------------


class ClientParty:
    def __init__(self, codec, material: OfflineMaterial, transport):
        self.codec = codec
        self.m = material
        self.t = transport
        self.output: list[int] | None = None

    def send_input(self, x_enc):
        if len(x_enc) != len(self.m.client_r[0]):
            raise ShapeError(f"input has {len(x_enc)} values, model expects {len(self.m.client_r[0])}")
        blinded = vsub(x_enc, self.m.client_r[0], self.codec.modulus)
        self.t.send(Message(CLIENT, SERVER, 0, MsgType.SHARE, tuple(blinded)))

    def feed_stage(self, layer: int):
        # client garbler input: its share of W y + b plus the next layer's mask
        nxt = self.m.client_r[layer + 1] if layer + 1 < len(self.m.client_r) else []
        payload = tuple(self.m.client_wr_minus_s[layer]) + tuple(nxt)
        self.t.send(Message(CLIENT, IDEAL, layer, MsgType.GC_IN, payload))

    def receive_output(self, layer: int):
        self.output = self.t.recv(CLIENT, IDEAL, layer, MsgType.GC_OUT)


class ServerParty:
    def __init__(self, model: EncodedModel, material: OfflineMaterial, transport):
        self.model = model
        self.m = material
        self.t = transport
        self.blinded: list[int] | None = None

    def receive_input(self):
        self.blinded = self.t.recv(SERVER, CLIENT, 0, MsgType.SHARE)

    def linear(self, layer: int):
        p = self.model.codec.modulus
        z = matvec(self.model.weights[layer], self.blinded, p)
        share = vadd(vadd(z, self.m.server_s[layer], p), self.model.biases[layer], p)
        self.t.send(Message(SERVER, IDEAL, layer, MsgType.GC_IN, tuple(share)))

    def receive_stage(self, layer: int):
        self.blinded = self.t.recv(SERVER, IDEAL, layer, MsgType.GC_OUT)


class IdealReLU:
    """Ideal functionality for the nonlinear stage: same inputs and outputs as the garbled circuit."""

    def __init__(self, model: EncodedModel, transport, *, check_shares=None):
        self.model = model
        self.t = transport
        self.check_shares = check_shares  # optional callback(layer, reconstructed)

    def run(self, layer: int):
        codec = self.model.codec
        p = codec.modulus
        n_out = self.model.dims[layer + 1]
        last = layer == len(self.model.weights) - 1
        client_in = self.t.recv(IDEAL, CLIENT, layer, MsgType.GC_IN)
        server_in = self.t.recv(IDEAL, SERVER, layer, MsgType.GC_IN)
        client_share, next_r = client_in[:n_out], client_in[n_out:]
        z = vadd(client_share, server_in, p)
        if self.check_shares is not None:
            self.check_shares(layer, z)
        y = [codec.relu_truncate(v, layer, relu=not last) for v in z]
        if last:
            self.t.send(Message(IDEAL, CLIENT, layer, MsgType.GC_OUT, tuple(y)))
        else:
            self.t.send(Message(IDEAL, SERVER, layer, MsgType.GC_OUT, tuple(vsub(y, next_r, p))))


@dataclass
class InferenceResult:
    output: list[int]
    transcript: ProtocolTranscript

    def decoded(self, codec: FixedPointCodec) -> list[float]:
        return codec.decode_vec(self.output)


def online_inference(model: EncodedModel, x, material: OfflineMaterial, transport=None, *,
                     encoded: bool = False, plaintext_check: bool = True) -> InferenceResult:
    """Run the online schedule on a real input vector (or field elements if ``encoded``).

    With ``plaintext_check`` the ideal stage asserts that the two shares sum to
    W_i y_i + b_i computed in the clear.
    """
    codec = model.codec
    p = codec.modulus
    x_enc = [int(v) % p for v in x] if encoded else codec.encode_vec(x)
    transport = transport or InProcessTransport()
    client = ClientParty(codec, material, transport)
    server = ServerParty(model, material, transport)

    check = None
    if plaintext_check:
        expected = {"y": list(x_enc)}

        def check(layer, z):
            want = vadd(matvec(model.weights[layer], expected["y"], p), model.biases[layer], p)
            if z != want:
                raise ProtocolError("share reconstruction mismatch", layer=layer)
            last = layer == len(model.weights) - 1
            expected["y"] = [codec.relu_truncate(v, layer, relu=not last) for v in want]

    ideal = IdealReLU(model, transport, check_shares=check)
    client.send_input(x_enc)
    server.receive_input()
    n_layers = len(model.weights)
    for layer in range(n_layers):
        server.linear(layer)
        client.feed_stage(layer)
        ideal.run(layer)
        if layer < n_layers - 1:
            server.receive_stage(layer)
    client.receive_output(n_layers - 1)
    return InferenceResult(client.output, transport.transcript)


def expected_message_count(n_layers: int) -> int:
    """One input share plus three messages (two stage inputs, one output) per layer."""
    return 1 + 3 * n_layers


# -- audit -----------------------------------------------------------------------


@dataclass
class AuditReport:
    trials: int
    modulus: int
    alpha: float
    slots: list[dict]

    @property
    def uniform(self) -> bool:
        return all(s["uniform"] for s in self.slots)

    def to_dict(self):
        return {"trials": self.trials, "modulus": self.modulus, "alpha": self.alpha,
                "uniform": self.uniform, "slots": self.slots}


def transcript_audit(transcripts, modulus: int, alpha: float = 0.01) -> AuditReport:
    """Chi-square uniformity of every client->server share element across runs.

    Each (message, element) slot is one test; the family-wise level is held at
    ``alpha`` by Bonferroni correction. Needs >= 5 expected hits per field value.
    """
    transcripts = list(transcripts)
    trials = len(transcripts)
    if trials < 5 * modulus:
        raise ProtocolError("insufficient trials for a chi-square test over the field",
                            trials=trials, needed=5 * modulus)
    columns: dict[tuple[int, int], list[int]] = {}
    for t in transcripts:
        for mi, msg in enumerate(t.of(CLIENT, SERVER, MsgType.SHARE)):
            for ei, v in enumerate(msg.payload):
                columns.setdefault((mi, ei), []).append(v)
    if not columns:
        raise ProtocolError("no client->server share messages to audit")
    level = alpha / len(columns)
    slots = []
    for (mi, ei), values in sorted(columns.items()):
        counts = np.bincount(np.asarray(values, dtype=np.int64), minlength=modulus)
        if counts.size > modulus:
            raise ProtocolError("share value outside the field", modulus=modulus)
        stat, pval = stats.chisquare(counts)
        slots.append({"message": mi, "element": ei, "chi2": float(stat), "p_value": float(pval),
                      "uniform": bool(pval >= level)})
    return AuditReport(trials, modulus, alpha, slots)


def share_slot_samples(model: EncodedModel, x, trials: int, rng: np.random.Generator, *,
                       zero_masks: bool = False) -> list[ProtocolTranscript]:
    """Fresh offline material per trial, fixed input: one full transcript per run."""
    out = []
    for _ in range(trials):
        material = offline_phase(model, rng, zero_masks=zero_masks)
        out.append(online_inference(model, x, material, plaintext_check=False).transcript)
    return out
