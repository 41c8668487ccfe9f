"""Acceptance gate: nine end-to-end criteria, one test (one pass/fail line) each.

Run with `pytest -v tests/test_acceptance.py` to get one PASSED/FAILED line
per criterion. Tolerances are stated inline next to each assertion.
"""

import numpy as np
import pytest

from halobit.cli import main
from halobit.codec import QuantConfig, dequantize_rows, quantize_rows
from halobit.datasets import SbmSpec, generate_sbm
from halobit.graph import build_partition, normalize_adjacency, partition_nodes
from halobit.linalg import softmax_cross_entropy
from halobit.rngstream import RngStream
from halobit.trainer import ModelConfig, TrainMode, _Worker, full_forward, train
from halobit.transport import Fabric

DRAWS = 100_000
CHUNK = 1_000


def mc_blocks(row, bits, draws=DRAWS, chunk=CHUNK):
    """Yield dequantized matrices: `draws` independent quantizations of `row`,
    batched as tiled blocks over distinct keyed streams."""
    cfg = QuantConfig(bits)
    tile = np.tile(row, (chunk, 1))
    for s in range(draws // chunk):
        rng = RngStream(2024, s, 1, 1, "forward")
        yield dequantize_rows(quantize_rows(tile, cfg, rng))


def reference_runs(seed, bits, mode, epochs=50):
    """The reference task: 2000-node 4-class SBM, 4 partitions, 2-layer GCN."""
    g = generate_sbm(SbmSpec(nodes_per_community=500, communities=4, seed=seed))
    a_hat = normalize_adjacency(g)
    plan = partition_nodes(g, 4, "contiguous", 0)
    parts = [build_partition(g, a_hat, plan, k) for k in range(4)]
    cfg = ModelConfig(widths=(32, 32, 4))
    return train(g, parts, cfg, mode, QuantConfig(bits), epochs, seed, lr=0.01)


def epochs_to_best_val(metrics):
    return max(metrics, key=lambda r: (r.val_acc, -r.epoch)).epoch


def small_run(g, n, widths, mode, bits, epochs, seed, probe=None):
    a_hat = normalize_adjacency(g)
    plan = partition_nodes(g, n, "contiguous", 0)
    parts = [build_partition(g, a_hat, plan, k) for k in range(n)]
    return train(g, parts, ModelConfig(widths=widths), mode, QuantConfig(bits),
                 epochs, seed, probe=probe)


def test_criterion_1_codec_unbiasedness():
    """Monte-Carlo mean of dequant(quant(h)) within 4 sigma of h elementwise,
    b in {1,2,4}, d=64, 1e5 draws."""
    row = np.random.default_rng(101).standard_normal((1, 64))
    for bits in (1, 2, 4):
        total = np.zeros(64)
        scale = None
        for deq in mc_blocks(row, bits):
            total += deq.sum(axis=0)
            if scale is None:
                scale = (row.max() - row.min()) / QuantConfig(bits).bins
        mean = total / DRAWS
        bound = 4.0 * scale * np.sqrt(0.25 / DRAWS)
        worst = np.abs(mean - row[0]).max()
        assert worst < bound, f"b={bits}: bias {worst:.3e} exceeds 4-sigma {bound:.3e}"


def test_criterion_2_variance_law():
    """Per-element variance = sigma(1-sigma)*scale^2 within 5%; row-averaged
    total variance under uniform fractional parts = D*s^2/(6B^2) within 5%."""
    # per-element law at b=2 on a designed row with interior fractional parts
    bits, B = 2, 3
    fracs = np.array([0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9])
    row = np.concatenate([[0.0], (np.arange(7) % B + fracs) / B * 0.999, [1.0]])[None, :]
    probe = quantize_rows(row, QuantConfig(bits), RngStream(0, 0, 1, 1, "forward"))
    scale = float(probe.row_scale[0])
    hbar = (row[0] - float(probe.row_min[0])) / scale
    sigma = hbar - np.floor(hbar)
    sumsq = np.zeros(row.shape[1])
    total = np.zeros(row.shape[1])
    for deq in mc_blocks(row, bits):
        err = deq - row
        total += err.sum(axis=0)
        sumsq += (err ** 2).sum(axis=0)
    var = sumsq / DRAWS - (total / DRAWS) ** 2
    expect = sigma * (1.0 - sigma) * scale ** 2
    interior = (sigma > 0.05) & (sigma < 0.95)
    rel = np.abs(var[interior] - expect[interior]) / expect[interior]
    assert rel.max() < 0.05, f"per-element variance off by {rel.max():.3%}"

    # total-variance law: D free elements with uniform fractional parts plus
    # pinned endpoints 0 and s fixing the row range exactly
    D, s = 64, 1.0
    gen = np.random.default_rng(202)
    for bits in (1, 2, 4):
        B = QuantConfig(bits).bins
        scale = s / B
        acc = 0.0
        for chunk_id in range(DRAWS // CHUNK):
            k = gen.integers(0, B, size=(CHUNK, D))
            f = gen.random((CHUNK, D))
            rows = np.concatenate([np.zeros((CHUNK, 1)), scale * (k + f),
                                   np.full((CHUNK, 1), s)], axis=1)
            rng = RngStream(303, chunk_id, bits, 1, "forward")
            deq = dequantize_rows(quantize_rows(rows, QuantConfig(bits), rng))
            acc += ((deq[:, 1:-1] - rows[:, 1:-1]) ** 2).sum(axis=1).sum()
        empirical = acc / DRAWS
        expect = D * s ** 2 / (6 * B ** 2)
        rel = abs(empirical - expect) / expect
        assert rel < 0.05, f"b={bits}: total variance off by {rel:.3%}"


def test_criterion_3_gradient_finite_differences():
    """Backward-pass gradients match central finite differences within 1e-6
    relative on 8-node graphs, 2- and 3-layer GCN, full precision."""
    gen = np.random.default_rng(404)
    from conftest import make_graph
    g = make_graph(8, [(i, (i + 3) % 8) for i in range(8)] + [(0, 4), (2, 6)],
                   features=gen.standard_normal((8, 5)),
                   labels=gen.integers(0, 3, 8),
                   masks=[1, 1, 0, 1, 1, 1, 0, 1], num_classes=3)
    a_hat = normalize_adjacency(g)
    plan = partition_nodes(g, 1)
    part = build_partition(g, a_hat, plan, 0)
    for widths in ((5, 4, 3), (5, 4, 4, 3)):
        cfg = ModelConfig(widths=widths)
        w = _Worker(part, cfg, TrainMode("sync", 0), QuantConfig(32), Fabric(1),
                    7, 0.01, int(g.train_mask.sum()))
        logits, caches = w.forward(1, "sync")
        _, grads = w.backward(1, "sync", logits, caches)

        def loss_at(weights):
            out = full_forward(g.features, a_hat, weights, cfg)
            return softmax_cross_entropy(out, g.labels, g.train_mask,
                                         int(g.train_mask.sum()))[0]

        h = 1e-6
        for l, grad in enumerate(grads):
            fd = np.zeros_like(grad)
            for idx in np.ndindex(grad.shape):
                wp = [x.copy() for x in w.weights]
                wm = [x.copy() for x in w.weights]
                wp[l][idx] += h
                wm[l][idx] -= h
                fd[idx] = (loss_at(wp) - loss_at(wm)) / (2 * h)
            rel = np.abs(fd - grad).max() / max(np.abs(fd).max(), 1e-12)
            assert rel < 1e-6, f"layers={widths} l={l}: FD mismatch {rel:.2e}"


def test_criterion_4_serial_equivalence():
    """N in {2,4} full-precision sync weights match the N=1 run within 1e-10
    relative after 50 epochs on a 100-node SBM graph."""
    g = generate_sbm(SbmSpec(nodes_per_community=25, communities=4, seed=5))
    ref = small_run(g, 1, (32, 16, 4), TrainMode("sync", 0), 32, 50, 9)
    scale = max(np.abs(w).max() for w in ref.final_weights)
    for n in (2, 4):
        res = small_run(g, n, (32, 16, 4), TrainMode("sync", 0), 32, 50, 9)
        diff = max(np.abs(a - b).max()
                   for a, b in zip(res.final_weights, ref.final_weights))
        assert diff / scale < 1e-10, f"N={n}: relative weight diff {diff / scale:.2e}"


def test_criterion_5_communication_volume():
    """b=1 main-data bytes are exactly 1/32 of b=32 when every communicated
    width is a multiple of 8; metadata <= 1/16 of b=32 main bytes at d>=128."""
    g = generate_sbm(SbmSpec(nodes_per_community=25, communities=4,
                             feature_dim=128, seed=6))
    runs = {b: small_run(g, 4, (128, 128, 4), TrainMode("sync", 0), b, 5, 10)
            for b in (1, 32)}
    main1 = sum(m.main_bytes for m in runs[1].metrics)
    main32 = sum(m.main_bytes for m in runs[32].metrics)
    meta1 = sum(m.meta_bytes for m in runs[1].metrics)
    assert main32 == 32 * main1, f"ratio {main32 / main1} != 32"
    assert meta1 * 16 <= main32, f"metadata {meta1} > 1/16 of {main32}"


def test_criterion_6_quantized_training_fidelity():
    """Mean final test accuracy of sync b=1 within 2 points of sync b=32 on
    the reference task, seeds {1,2,3}."""
    accs = {1: [], 32: []}
    for seed in (1, 2, 3):
        for bits in (1, 32):
            res = reference_runs(seed, bits, TrainMode("sync", 0))
            accs[bits].append(res.metrics[-1].test_acc)
    delta = abs(np.mean(accs[1]) - np.mean(accs[32]))
    assert delta <= 0.02, (f"b=1 mean {np.mean(accs[1]):.4f} vs "
                           f"b=32 mean {np.mean(accs[32]):.4f}: delta {delta:.4f}")


def test_criterion_7_async_correctness():
    """Unit-staleness async reproduces sync weights within 1e-12; consumed
    halo data always carries the previous epoch's tag; epoch-1 halo is zero."""
    g = generate_sbm(SbmSpec(nodes_per_community=25, communities=4, seed=7))
    sync = small_run(g, 4, (32, 16, 4), TrainMode("sync", 0), 32, 10, 11)
    eps1 = small_run(g, 4, (32, 16, 4), TrainMode("async", 1), 32, 10, 11)
    scale = max(np.abs(w).max() for w in sync.final_weights)
    diff = max(np.abs(a - b).max()
               for a, b in zip(eps1.final_weights, sync.final_weights))
    assert diff / scale < 1e-12, f"unit-staleness mismatch {diff / scale:.2e}"

    consumed = []

    def probe(event, **kw):
        if event == "halo_consumed":
            consumed.append(kw)

    small_run(g, 4, (32, 16, 4), TrainMode("async", 0), 1, 6, 12, probe=probe)
    assert consumed, "no halo consumption observed"
    saw_epoch1 = False
    for e in consumed:
        if e["epoch"] == 1:
            saw_epoch1 = True
            data = e["data"]
            if isinstance(data, dict):
                assert data == {}, "epoch-1 gradient buffer not empty"
            else:
                assert np.all(data == 0.0), "epoch-1 halo embeddings not zero"
        else:
            assert e["tag"] == e["epoch"] - 1, \
                f"epoch {e['epoch']} consumed tag {e['tag']}"
    assert saw_epoch1


def test_criterion_8_staleness_adaptor():
    """Epochs-to-best-validation for async with interval 2 <= plain async, and
    async final accuracy within 3 points of sync (reference task, 3 seeds)."""
    best_eps = {0: [], 2: []}
    finals = {"sync": [], "async": []}
    for seed in (1, 2, 3):
        sync = reference_runs(seed, 1, TrainMode("sync", 0))
        asyn = reference_runs(seed, 1, TrainMode("async", 0))
        adapt = reference_runs(seed, 1, TrainMode("async", 2))
        best_eps[0].append(epochs_to_best_val(asyn.metrics))
        best_eps[2].append(epochs_to_best_val(adapt.metrics))
        finals["sync"].append(sync.metrics[-1].test_acc)
        finals["async"].append(asyn.metrics[-1].test_acc)
    assert np.mean(best_eps[2]) <= np.mean(best_eps[0]), \
        f"adaptor {best_eps[2]} slower than plain async {best_eps[0]}"
    delta = abs(np.mean(finals["async"]) - np.mean(finals["sync"]))
    assert delta <= 0.03, f"async vs sync accuracy delta {delta:.4f}"


def test_criterion_9_determinism(tmp_path):
    """Two identical CLI invocations produce byte-identical metrics.csv across
    modes and bit widths."""
    configs = [
        ["--mode", "sync", "--bits", "1"],
        ["--mode", "sync", "--bits", "32"],
        ["--mode", "async", "--bits", "4"],
        ["--mode", "async", "--bits", "1", "--staleness", "2"],
    ]
    for i, extra in enumerate(configs):
        outputs = []
        for rep in range(2):
            out = tmp_path / f"cfg{i}-rep{rep}"
            argv = ["run", "--synthetic", "sbm:k=4,n=20", "--parts", "4",
                    "--epochs", "6", "--seed", "13", "--out", str(out)] + extra
            assert main(argv) == 0
            outputs.append((out / "metrics.csv").read_bytes())
        assert outputs[0] == outputs[1], f"nondeterministic metrics for {extra}"
