"""In-process simulated transport between partition workers.

Channels are per-(src, dst) FIFO queues carrying immutable quantized blocks.
Byte accounting mirrors the two-column communication-volume breakdown: packed
payload bytes ("main data") and per-row metadata are counted separately, plus
a fixed 12-byte block header per message. All-reduce is a deterministic
fixed-order sum; it stays full precision and is counted on its own meter.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import QuantConfig, QuantizedBlock
from .rngstream import RngStream

_MSG_HEADER = struct.Struct("<4sHHIBB")
_MAGIC = b"HBM1"
_PHASE_CODE = {"forward": 0, "backward": 1}
_PHASE_NAME = {v: k for k, v in _PHASE_CODE.items()}

DEFAULT_TIMEOUT = 60.0


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    epoch: int
    layer: int
    phase: str
    block: QuantizedBlock

    @property
    def tag(self):
        return (self.epoch, self.layer, self.phase)

    def to_bytes(self) -> bytes:
        head = _MSG_HEADER.pack(_MAGIC, self.src, self.dst, self.epoch,
                                self.layer, _PHASE_CODE[self.phase])
        return head + self.block.to_bytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Message":
        magic, src, dst, epoch, layer, phase = _MSG_HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise ProtocolError("bad message magic")
        return cls(src, dst, epoch, layer, _PHASE_NAME[phase],
                   QuantizedBlock.from_bytes(raw[_MSG_HEADER.size:]))


@dataclass
class TransportStats:
    main_bytes_sent: int = 0
    metadata_bytes_sent: int = 0
    header_bytes_sent: int = 0
    messages_sent: int = 0
    allreduce_bytes: int = 0

    def snapshot(self) -> dict:
        return dict(self.__dict__)


class PoisonableBarrier:
    """Epoch barrier; a worker failure poisons it and aborts everyone."""

    def __init__(self, parties: int):
        self._barrier = threading.Barrier(parties)

    def wait(self, timeout: float = DEFAULT_TIMEOUT):
        try:
            self._barrier.wait(timeout)
        except threading.BrokenBarrierError:
            raise ProtocolError("barrier poisoned: a worker aborted") from None

    def poison(self):
        self._barrier.abort()


class Fabric:
    """Message channels, byte meters, and all-reduce for N partitions."""

    def __init__(self, num_partitions: int, timeout: float = DEFAULT_TIMEOUT):
        self.num_partitions = num_partitions
        self.timeout = timeout
        self._queues = {(s, d): queue.SimpleQueue()
                        for s in range(num_partitions)
                        for d in range(num_partitions) if s != d}
        self.stats = [TransportStats() for _ in range(num_partitions)]
        self._stats_lock = threading.Lock()
        self._ar_slots = [None] * num_partitions
        self._ar_enter = threading.Barrier(num_partitions)
        self._ar_exit = threading.Barrier(num_partitions)

    def send(self, msg: Message):
        block = msg.block
        with self._stats_lock:
            s = self.stats[msg.src]
            s.main_bytes_sent += codec.payload_bytes(block.num_rows, block.dim, block.bits)
            s.metadata_bytes_sent += codec.metadata_bytes(block.num_rows, block.bits)
            s.header_bytes_sent += codec.HEADER_BYTES
            s.messages_sent += 1
        self._queues[(msg.src, msg.dst)].put(msg)

    def recv(self, src: int, dst: int, expect_tag) -> Message:
        try:
            msg = self._queues[(src, dst)].get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(
                f"partition {dst} timed out waiting on {src} for {expect_tag}") from None
        if msg.tag != expect_tag:
            raise ProtocolError(
                f"tag mismatch on ({src}->{dst}): got {msg.tag}, expected {expect_tag}")
        return msg

    def all_reduce_sum(self, part: int, arrays: list, count_bytes: bool = True) -> list:
        """Elementwise sum across partitions, accumulated in partition-id
        order on every replica (bit-identical results)."""
        if self.num_partitions == 1:
            return [a.copy() for a in arrays]
        self._ar_slots[part] = arrays
        self._wait(self._ar_enter)
        ref = self._ar_slots[0]
        for other in self._ar_slots[1:]:
            if len(other) != len(ref) or any(a.shape != b.shape for a, b in zip(other, ref)):
                self._ar_enter.abort()
                raise ProtocolError("all_reduce shape mismatch across partitions")
        out = []
        for i in range(len(arrays)):
            acc = self._ar_slots[0][i].copy()
            for p in range(1, self.num_partitions):
                acc += self._ar_slots[p][i]
            out.append(acc)
        if count_bytes:
            with self._stats_lock:
                self.stats[part].allreduce_bytes += sum(a.size for a in arrays) * 4
        self._wait(self._ar_exit)
        return out

    def _wait(self, barrier: threading.Barrier):
        try:
            barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            raise ProtocolError("all_reduce aborted") from None

    def poison(self):
        self._ar_enter.abort()
        self._ar_exit.abort()

    def total_stats(self) -> dict:
        with self._stats_lock:
            totals = TransportStats()
            for s in self.stats:
                totals.main_bytes_sent += s.main_bytes_sent
                totals.metadata_bytes_sent += s.metadata_bytes_sent
                totals.header_bytes_sent += s.header_bytes_sent
                totals.messages_sent += s.messages_sent
                totals.allreduce_bytes += s.allreduce_bytes
            return totals.snapshot()


def exchange(fabric: Fabric, part: int, epoch: int, layer: int, phase: str,
             outgoing: dict, expected: dict, cfg: QuantConfig,
             rng: RngStream | None = None, probe=None) -> dict:
    """One halo exchange step for partition `part`.

    outgoing: peer -> (rows, d) matrix to quantize and send (empty sets omitted).
    expected: peer -> row count to receive.
    Returns peer -> dequantized (rows, d) matrix. Sends happen before any
    receive so concurrent peers rendezvous without deadlock. Peers are
    processed in ascending id order; the single rng stream is consumed in
    that order, which makes blocks replayable from their key.
    """
    for peer in sorted(outgoing):
        mat = outgoing[peer]
        if mat.shape[0] == 0:
            continue
        block = codec.quantize_rows(mat, cfg, rng)
        if probe is not None:
            probe("quantize", part=part, peer=peer, epoch=epoch, layer=layer,
                  phase=phase, rows=mat.shape[0])
        fabric.send(Message(part, peer, epoch, layer, phase, block))

    received = {}
    for peer in sorted(expected):
        nrows = expected[peer]
        if nrows == 0:
            continue
        msg = fabric.recv(peer, part, (epoch, layer, phase))
        mat = codec.dequantize_rows(msg.block)
        if mat.shape[0] != nrows:
            raise ProtocolError(
                f"partition {part} expected {nrows} rows from {peer}, got {mat.shape[0]}")
        received[peer] = mat
    return received
