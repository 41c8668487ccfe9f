"""Training loops over partition workers.

Two modes. Sync: each layer exchanges quantized halo rows, blocks until the
peers' rows arrive, then computes (communicate-then-compute). Async: each
layer computes with halo data transmitted during the previous epoch while a
per-worker communication thread quantizes and ships the current values for
the next epoch; epoch 1 starts from zero-filled halo buffers and skips
gradient integration. The staleness adaptor forces a fully synchronous epoch
every `staleness` epochs, refreshing all async buffers with fresh values.

Gradients are summed with a deterministic all-reduce and normalized by the
global training-node count, so distributed runs reproduce the single-worker
gradient exactly at full precision.
"""

from __future__ import annotations

import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait as futures_wait
from dataclasses import dataclass, field

import numpy as np

from .codec import QuantConfig
from .graph import Graph, Partition, mean_adjacency, normalize_adjacency
from .linalg import AdamState, CsrMatrix, adam_step, relu, relu_grad, softmax_cross_entropy, spmm
from .rngstream import BACKWARD, FORWARD, RngStream, keyed_generator
from .transport import Fabric, PoisonableBarrier, ProtocolError, exchange

MODELS = ("gcn", "sage")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple          # (d_0=input dim, d_1, ..., d_L=num classes)
    model: str = "gcn"
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise TrainingError("widths must list input, hidden(s), and output dims")
        if self.model not in MODELS:
            raise TrainingError(f"unknown model {self.model!r}")
        if not (0.0 <= self.dropout < 1.0):
            raise TrainingError("dropout must be in [0, 1)")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1


@dataclass(frozen=True)
class TrainMode:
    variant: str = "sync"     # "sync" or "async"
    staleness: int = 0        # epoch interval for forced sync; 0 disables

    def __post_init__(self):
        if self.variant not in ("sync", "async"):
            raise TrainingError(f"unknown mode {self.variant!r}")
        if self.staleness < 0:
            raise TrainingError("staleness interval must be >= 0")


def staleness_adaptor(epoch: int, mode: TrainMode) -> str:
    """Mode for this epoch: a forced sync epoch every `staleness` epochs."""
    if mode.variant == "sync":
        return "sync"
    if mode.staleness > 0 and epoch % mode.staleness == 0:
        return "sync"
    return "async"


@dataclass
class MetricsRecord:
    epoch: int
    mode_this_epoch: str
    train_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    main_bytes: int
    meta_bytes: int
    header_bytes: int
    allreduce_bytes: int
    messages: int
    wall_ms: int = 0  # kept at 0: metrics files must replay byte-identically


@dataclass
class TrainResult:
    metrics: list
    final_weights: list
    timings_ms: list = field(default_factory=list)


def init_weights(cfg: ModelConfig, seed: int) -> list:
    """Glorot-uniform init from the global seed; every partition derives the
    same replica without a broadcast."""
    weights = []
    for l in range(1, cfg.num_layers + 1):
        fan_in = cfg.widths[l - 1] * (2 if cfg.model == "sage" else 1)
        fan_out = cfg.widths[l]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        gen = keyed_generator(seed, "init", l)
        weights.append(gen.uniform(-limit, limit, size=(fan_in, fan_out)))
    return weights


def full_forward(features: np.ndarray, a_hat: CsrMatrix, weights: list,
                 cfg: ModelConfig, mean_hat: CsrMatrix | None = None) -> np.ndarray:
    """Single-machine full-precision forward (no dropout)."""
    h = features
    for l, w in enumerate(weights, start=1):
        if cfg.model == "sage":
            p = np.hstack([h, spmm(mean_hat, h)])
        else:
            p = spmm(a_hat, h)
        z = p @ w
        h = relu(z) if l < cfg.num_layers else z
    return h


def evaluate(weights: list, graph: Graph, cfg: ModelConfig,
             a_hat: CsrMatrix | None = None,
             mean_hat: CsrMatrix | None = None) -> dict:
    """Centralized argmax accuracy on train/val/test masks."""
    if a_hat is None:
        a_hat = normalize_adjacency(graph)
    if cfg.model == "sage" and mean_hat is None:
        mean_hat = mean_adjacency(graph)
    logits = full_forward(graph.features, a_hat, weights, cfg, mean_hat)
    pred = logits.argmax(axis=1)
    out = {}
    for name, mask in (("train_acc", graph.train_mask),
                       ("val_acc", graph.val_mask),
                       ("test_acc", graph.test_mask)):
        out[name] = float((pred[mask] == graph.labels[mask]).mean()) if mask.any() else 0.0
    return out


class _Worker:
    """Per-partition training state and loops."""

    def __init__(self, part: Partition, cfg: ModelConfig, mode: TrainMode,
                 quant: QuantConfig, fabric: Fabric, seed: int, lr: float,
                 global_norm: int, probe=None, gate=None):
        self.part = part
        self.cfg = cfg
        self.mode = mode
        self.quant = quant
        self.fabric = fabric
        self.seed = seed
        self.global_norm = global_norm
        self.probe = probe
        self.gate = gate
        self.weights = [w.copy() for w in init_weights(cfg, seed)]
        self.adam = [AdamState(lr=lr) for _ in self.weights]
        self.adj_t = part.adj_block.transpose()
        self.mean_t = part.mean_block.transpose() if part.mean_block is not None else None
        self.epoch_loss = 0.0
        # Async machinery: one comm thread per worker keeps per-peer message
        # order deterministic; slots hold epoch t-1 halo data per (layer, phase).
        self.executor = ThreadPoolExecutor(max_workers=1) if mode.variant == "async" else None
        self.slots = {}
        self.epoch_futures = []

    # -- topology helpers ---------------------------------------------------

    def _fwd_outgoing(self, h: np.ndarray, epoch: int, layer: int) -> tuple:
        out, expect = {}, {}
        for k in range(self.part.num_partitions):
            if k == self.part.id:
                continue
            s = self.part.send_sets[k]
            if len(s):
                out[k] = h[s].copy()
                if self.probe:
                    self.probe("exchange_out", part=self.part.id, peer=k, epoch=epoch,
                               layer=layer, phase=FORWARD,
                               global_ids=self.part.local_nodes[s])
            if len(self.part.recv_sets[k]):
                expect[k] = len(self.part.recv_sets[k])
        return out, expect

    def _bwd_outgoing(self, j_full: np.ndarray, epoch: int, layer: int) -> tuple:
        out, expect = {}, {}
        nl = self.part.num_local
        for k in range(self.part.num_partitions):
            if k == self.part.id:
                continue
            r = self.part.recv_sets[k]
            if len(r):
                out[k] = j_full[nl + r].copy()
                if self.probe:
                    self.probe("exchange_out", part=self.part.id, peer=k, epoch=epoch,
                               layer=layer, phase=BACKWARD,
                               global_ids=self.part.halo_nodes[r])
            if len(self.part.send_sets[k]):
                expect[k] = len(self.part.send_sets[k])
        return out, expect

    def _assemble_halo(self, received: dict, dim: int) -> np.ndarray:
        halo = np.zeros((self.part.num_halo, dim))
        for k, mat in received.items():
            halo[self.part.recv_sets[k]] = mat
        return halo

    def _integrate(self, j_local: np.ndarray, received: dict):
        for k, mat in received.items():
            j_local[self.part.send_sets[k]] += mat

    # -- exchange paths -----------------------------------------------------

    def _sync_exchange(self, epoch, layer, phase, outgoing, expected):
        rng = RngStream(self.seed, self.part.id, epoch, layer, phase)
        return exchange(self.fabric, self.part.id, epoch, layer, phase,
                        outgoing, expected, self.quant, rng)

    def _submit(self, epoch, layer, phase, outgoing, expected):
        def task():
            return self._sync_exchange(epoch, layer, phase, outgoing, expected)
        fut = self.executor.submit(task)
        self.epoch_futures.append(fut)
        return fut

    def _consume_slot(self, epoch: int, layer: int, phase: str):
        """Resolve the (layer, phase) buffer; returns (tag, received dict)."""
        entry = self.slots.get((layer, phase))
        if entry is None:
            if epoch > 1:
                raise ProtocolError(
                    f"buffer underflow: ({layer}, {phase}) never filled before epoch {epoch}")
            return 0, {}
        kind, tag, payload = entry
        received = payload.result() if kind == "future" else payload
        if tag != epoch - 1:
            raise ProtocolError(
                f"staleness violation on ({layer}, {phase}): buffer from epoch "
                f"{tag}, consuming at epoch {epoch}")
        return tag, received

    # -- forward / backward -------------------------------------------------

    def forward(self, epoch: int, epoch_mode: str, training: bool = True):
        part, cfg = self.part, self.cfg
        h = part.features
        caches = []
        for l in range(1, cfg.num_layers + 1):
            dim = cfg.widths[l - 1]
            if epoch_mode == "sync" and self.mode.variant == "sync":
                out, expect = self._fwd_outgoing(h, epoch, l)
                received = self._sync_exchange(epoch, l, FORWARD, out, expect)
                halo = self._assemble_halo(received, dim)
            elif epoch_mode == "sync":
                # Adaptor-forced sync epoch inside an async run: drain the
                # stale buffer, exchange fresh values through the comm thread
                # (preserves per-peer message order), refresh the buffer.
                if epoch > 1:
                    self._consume_slot(epoch, l, FORWARD)
                out, expect = self._fwd_outgoing(h, epoch, l)
                received = self._submit(epoch, l, FORWARD, out, expect).result()
                halo = self._assemble_halo(received, dim)
                self.slots[(l, FORWARD)] = ("value", epoch, received)
            else:
                tag, received = self._consume_slot(epoch, l, FORWARD)
                halo = self._assemble_halo(received, dim)
                if self.probe:
                    self.probe("halo_consumed", part=part.id, epoch=epoch, layer=l,
                               phase=FORWARD, tag=tag, data=halo.copy())
                out, expect = self._fwd_outgoing(h, epoch, l)
                self.slots[(l, FORWARD)] = ("future", epoch,
                                            self._submit(epoch, l, FORWARD, out, expect))

            h_tilde = np.vstack([h, halo]) if part.num_halo else h
            if self.gate:
                self.gate.acquire()
            try:
                mask = None
                if training and cfg.dropout > 0.0:
                    gen = keyed_generator(self.seed, "dropout", part.id, epoch, l)
                    keep = gen.random(h_tilde.shape) >= cfg.dropout
                    mask = keep / (1.0 - cfg.dropout)
                    h_tilde = h_tilde * mask
                if cfg.model == "sage":
                    p = np.hstack([h_tilde[:part.num_local], spmm(part.mean_block, h_tilde)])
                else:
                    p = spmm(part.adj_block, h_tilde)
                z = p @ self.weights[l - 1]
                h = relu(z) if l < cfg.num_layers else z
            finally:
                if self.gate:
                    self.gate.release()
            caches.append((p, z, mask))
        return h, caches

    def backward(self, epoch: int, epoch_mode: str, logits, caches):
        part, cfg = self.part, self.cfg
        loss, j = softmax_cross_entropy(logits, part.labels, part.train_mask,
                                        self.global_norm)
        grads = [None] * cfg.num_layers
        for l in range(cfg.num_layers, 0, -1):
            p, z, mask = caches[l - 1]
            if self.gate:
                self.gate.acquire()
            try:
                m = j if l == cfg.num_layers else j * relu_grad(z)
                grads[l - 1] = p.T @ m
                if l > 1:
                    w = self.weights[l - 1]
                    if cfg.model == "sage":
                        d = cfg.widths[l - 1]
                        j_full = spmm(self.mean_t, m @ w[d:].T)
                        j_full[:part.num_local] += m @ w[:d].T
                    else:
                        j_full = spmm(self.adj_t, m @ w.T)
                    if mask is not None:
                        j_full = j_full * mask
            finally:
                if self.gate:
                    self.gate.release()
            if l > 1:
                j = np.ascontiguousarray(j_full[:part.num_local])
                if epoch_mode == "sync" and self.mode.variant == "sync":
                    out, expect = self._bwd_outgoing(j_full, epoch, l)
                    received = self._sync_exchange(epoch, l, BACKWARD, out, expect)
                    self._integrate(j, received)
                elif epoch_mode == "sync":
                    if epoch > 1:
                        self._consume_slot(epoch, l, BACKWARD)
                    out, expect = self._bwd_outgoing(j_full, epoch, l)
                    received = self._submit(epoch, l, BACKWARD, out, expect).result()
                    self._integrate(j, received)
                    self.slots[(l, BACKWARD)] = ("value", epoch, received)
                else:
                    if epoch > 1:
                        tag, received = self._consume_slot(epoch, l, BACKWARD)
                        if self.probe:
                            self.probe("halo_consumed", part=part.id, epoch=epoch,
                                       layer=l, phase=BACKWARD, tag=tag,
                                       data={k: v.copy() for k, v in received.items()})
                        self._integrate(j, received)
                    out, expect = self._bwd_outgoing(j_full, epoch, l)
                    self.slots[(l, BACKWARD)] = ("future", epoch,
                                                 self._submit(epoch, l, BACKWARD, out, expect))
        return loss, grads

    def run_epoch(self, epoch: int) -> str:
        epoch_mode = staleness_adaptor(epoch, self.mode)
        self.epoch_futures = []
        logits, caches = self.forward(epoch, epoch_mode)
        loss, grads = self.backward(epoch, epoch_mode, logits, caches)
        grads = self.fabric.all_reduce_sum(self.part.id, grads)
        total = self.fabric.all_reduce_sum(self.part.id, [np.array([loss])],
                                           count_bytes=False)[0][0]
        if not np.isfinite(total):
            raise TrainingError(
                f"NaN/inf loss at epoch {epoch}: learning rate too high or codec error")
        self.epoch_loss = float(total)
        for l, g in enumerate(grads):
            self.weights[l] = adam_step(self.weights[l], g, self.adam[l])
        # Outstanding comm tasks belong to this epoch's byte counters; let
        # them finish (sends precede receives in every task, so this cannot
        # deadlock) but leave their results buffered for the next epoch.
        if self.epoch_futures:
            futures_wait(self.epoch_futures)
        return epoch_mode

    def shutdown(self):
        if self.executor is not None:
            self.executor.shutdown(wait=True)


def _compute_gate():
    cap = os.environ.get("HALOBIT_THREADS")
    if cap:
        return threading.BoundedSemaphore(max(1, int(cap)))
    return None


def train(graph: Graph, partitions: list, model_cfg: ModelConfig, mode: TrainMode,
          quant_cfg: QuantConfig, epochs: int, seed: int, lr: float = 0.01,
          probe=None, timeout: float = 60.0) -> TrainResult:
    """Run the distributed training loop; one worker thread per partition.

    Per epoch: forward, loss, backward, all-reduce, Adam step, then a
    centralized full-precision evaluation with partition 0's weights.
    """
    n = len(partitions)
    a_hat = normalize_adjacency(graph)
    mean_hat = mean_adjacency(graph) if model_cfg.model == "sage" else None
    global_norm = max(1, int(graph.train_mask.sum()))
    fabric = Fabric(n, timeout=timeout)
    gate = _compute_gate()
    workers = [_Worker(p, model_cfg, mode, quant_cfg, fabric, seed, lr,
                       global_norm, probe=probe, gate=gate) for p in partitions]
    if epochs == 0:
        return TrainResult([], [w.copy() for w in workers[0].weights])

    pre_eval = PoisonableBarrier(n + 1)
    post_eval = PoisonableBarrier(n + 1)
    errors = []
    epoch_modes = [None] * n

    def worker_main(idx: int):
        w = workers[idx]
        try:
            for epoch in range(1, epochs + 1):
                epoch_modes[idx] = w.run_epoch(epoch)
                pre_eval.wait(timeout)
                post_eval.wait(timeout)
        except BaseException as e:  # propagate to coordinator via poisoning
            errors.append((idx, e))
            pre_eval.poison()
            post_eval.poison()
            fabric.poison()
        finally:
            w.shutdown()

    threads = [threading.Thread(target=worker_main, args=(i,), daemon=True,
                                name=f"halobit-worker-{i}") for i in range(n)]
    metrics, timings = [], []
    prev = fabric.total_stats()
    for t in threads:
        t.start()
    try:
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            pre_eval.wait(timeout)
            stats = fabric.total_stats()
            accs = evaluate(workers[0].weights, graph, model_cfg, a_hat, mean_hat)
            if probe:
                probe("weights", epoch=epoch,
                      weights=[[w.copy() for w in wk.weights] for wk in workers])
            metrics.append(MetricsRecord(
                epoch=epoch,
                mode_this_epoch=epoch_modes[0],
                train_loss=workers[0].epoch_loss,
                main_bytes=stats["main_bytes_sent"] - prev["main_bytes_sent"],
                meta_bytes=stats["metadata_bytes_sent"] - prev["metadata_bytes_sent"],
                header_bytes=stats["header_bytes_sent"] - prev["header_bytes_sent"],
                allreduce_bytes=stats["allreduce_bytes"] - prev["allreduce_bytes"],
                messages=stats["messages_sent"] - prev["messages_sent"],
                **accs))
            prev = stats
            post_eval.wait(timeout)
            timings.append((time.perf_counter() - t0) * 1000.0)
    except ProtocolError:
        for t in threads:
            t.join(timeout)
        if errors:
            idx, exc = errors[0]
            raise TrainingError(f"worker {idx} aborted: {exc}") from exc
        raise
    for t in threads:
        t.join(timeout)
    if errors:
        idx, exc = errors[0]
        raise TrainingError(f"worker {idx} aborted: {exc}") from exc
    return TrainResult(metrics, [w.copy() for w in workers[0].weights], timings)
