"""Release gate: ten checks, each printing one PASS/FAIL line.

The checks cover analytic-kernel equivalence, gradient correctness,
sharded-gradient averaging, the residual identity, end-to-end training
quality on held-out data, window-variant parity and timing ordering,
sliding-window locality, metric exactness, and persistence.

The two training checks share one synthetic dataset (two training
volumes plus one held-out volume, 24-view noisy FBP at 16x64x64) and run
the real trainer at depth 7 / width 16, so this module dominates the
suite's runtime (roughly half an hour on one desktop core).
"""

import time

import numpy as np
import pytest

import ctrefine.tensor_ops as T
from ctrefine import gradcheck, inference, metrics, network, simulate, storage, training

RESULTS = []


def check(capsys, name: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


# ---------------------------------------------------------------------------
# shared data/training fixtures (the expensive part, computed once)

DIMS, VIEWS, SIGMA = (16, 64, 64), 24, 15.0
PATCH_SIZE, PATCHES_PER_VOLUME, EPOCHS, LR = 24, 10000, 8, 6e-3
DATA_SEEDS, HELD_OUT_SEED, TRAIN_SEED = (100, 101), 102, 5
DEPTH, WIDTH = 7, 16


def _normalized(volume: storage.VolumeHU) -> np.ndarray:
    return simulate.hu_normalize(volume.voxels.astype(np.float64)).astype(np.float32)


@pytest.fixture(scope="session")
def scan_pairs():
    pairs = {}
    for seed in (*DATA_SEEDS, HELD_OUT_SEED):
        _, truth = simulate.generate_phantom_volume(seed=seed, dims=DIMS)
        y, x = simulate.make_pair(truth, views=VIEWS, noise_sigma=SIGMA, seed=seed)
        pairs[seed] = (y, x, _normalized(y), _normalized(x))
    return pairs


def _train_variant(scan_pairs, kind: str, window: int):
    sets = [
        simulate.extract_patches(scan_pairs[s][2], scan_pairs[s][3],
                                 patch_size=PATCH_SIZE, window=window,
                                 count=PATCHES_PER_VOLUME, augment=True,
                                 seed=TRAIN_SEED, volume_id=vid)
        for vid, s in enumerate(DATA_SEEDS)
    ]
    dataset = simulate.concat_patchsets(sets)
    variant = network.NetworkVariant(kind=kind, window=window, depth=DEPTH, width=WIDTH)
    config = training.TrainingConfig(
        learning_rate=LR, batch_size=128, epochs=EPOCHS, seed=TRAIN_SEED,
        val_fraction=0.1, train_eval_samples=512, val_eval_samples=512)
    t0 = time.perf_counter()
    params, history = training.train(dataset, variant, config)
    return params, history, time.perf_counter() - t0


def _held_out_psnr(scan_pairs, params) -> float:
    y, x, yn, _ = scan_pairs[HELD_OUT_SEED]
    out = inference.infer_volume(params, yn)
    out_hu = simulate.hu_denormalize(out.astype(np.float64))
    mse, _ = metrics.masked_mse(out_hu, x)
    return metrics.psnr(mse)


@pytest.fixture(scope="session")
def trained_2d(scan_pairs):
    return _train_variant(scan_pairs, "2d", 1)


@pytest.fixture(scope="session")
def trained_25d(scan_pairs):
    return {w: _train_variant(scan_pairs, "2.5d", w) for w in (5, 3)}


# ---------------------------------------------------------------------------
# 1: analytic convolution vs nested loops


def _loop_conv(x, weights, bias):
    n, _, *spatial = x.shape
    out_ch = weights.shape[0]
    out = np.zeros((n, out_ch) + tuple(spatial), dtype=np.float64)
    offsets = [np.arange(e) - e // 2 for e in weights.shape[2:]]
    for idx in np.ndindex(*out.shape):
        b, o, *pos = idx
        acc = 0.0
        for c in range(x.shape[1]):
            for tap in np.ndindex(*weights.shape[2:]):
                src = [p + off[t] for p, off, t in zip(pos, offsets, tap)]
                if all(0 <= s < d for s, d in zip(src, spatial)):
                    acc += float(x[(b, c, *src)]) * float(weights[(o, c, *tap)])
        out[idx] = acc + float(bias[o])
    return out


def test_01_convolution_matches_nested_loop_oracle(capsys):
    # random instances use dyadic-rational values (k/16, |k| <= 8) so every
    # product and partial sum is exact in 32-bit arithmetic: the tolerance
    # then measures contraction structure, not accumulation round-off
    def dyadic(rng, shape):
        return (rng.integers(-8, 9, size=shape) / 16.0).astype(np.float32)

    t0 = time.perf_counter()
    rng = T.seeded_rng(900, purpose=200)
    worst = 0.0
    cases = 0
    for rank in (2, 3):
        for _ in range(55):
            n = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 5))
            cout = int(rng.integers(1, 5))
            spatial = tuple(int(rng.integers(2, 9)) for _ in range(rank))
            extent = tuple(int(rng.choice([1, 3])) for _ in range(rank))
            x = dyadic(rng, (n, cin) + spatial)
            w = dyadic(rng, (cout, cin) + extent)
            b = dyadic(rng, cout)
            got = T.conv_forward(x, T.ConvKernel(weights=w, bias=b))
            want = _loop_conv(x.astype(np.float64), w.astype(np.float64),
                              b.astype(np.float64))
            worst = max(worst, float(np.abs(got - want).max()))
            cases += 1
    wall = time.perf_counter() - t0
    ok = worst <= 1e-6 and cases >= 100 and wall < 10.0
    check(capsys, "oracle equivalence",
          ok, f"{cases} random 2D/3D instances, max |err| {worst:.2e} "
              f"(tol 1e-6, 32-bit), {wall:.1f}s (limit 10s)")


# ---------------------------------------------------------------------------
# 2: finite-difference gradient validation


def test_02_gradcheck_all_layers(capsys):
    t0 = time.perf_counter()
    report = gradcheck.run_gradcheck(variant_kind="2d", seed=0, step=1e-5, tolerance=1e-4)
    wall = time.perf_counter() - t0
    names = tuple(r.name for r in report.rows)
    worst = max(r.max_rel_error for r in report.rows)
    ok = report.passed and names == gradcheck.CHECK_NAMES and wall < 60.0
    check(capsys, "gradient correctness",
          ok, f"six checks {names}, max rel err {worst:.2e} (tol 1e-4), "
              f"{wall:.1f}s (limit 60s)")


# ---------------------------------------------------------------------------
# 3: sharded gradient averaging


def test_03_shard_equivalence_and_determinism(capsys):
    rng = T.seeded_rng(901, purpose=201)
    with T.precision(np.float64):
        variant = network.NetworkVariant(kind="2d", window=1, depth=5, width=8)
        params = network.build_network(variant, seed=7)
        inputs = rng.standard_normal((16, 1, 12, 12))
        targets = rng.standard_normal((16, 1, 12, 12))
        reference, _, _ = training.shard_gradients(inputs, targets, params, 1,
                                                   bn_mode="frozen")
        worst = 0.0
        for k in (2, 4):
            grads, _, _ = training.shard_gradients(inputs, targets, params, k,
                                                   bn_mode="frozen")
            for a, b in zip(grads, reference):
                worst = max(worst, float(np.abs(a - b).max()))
    shard_ok = worst <= 1e-6

    det_ok = True
    y = rng.standard_normal((6, 16, 16)).astype(np.float32)
    x = rng.standard_normal((6, 16, 16)).astype(np.float32)
    dataset = simulate.extract_patches(y, x, patch_size=8, window=1, count=64,
                                       augment=True, seed=3)
    small = network.NetworkVariant(kind="2d", window=1, depth=3, width=4)
    for k in (1, 2, 4):
        config = training.TrainingConfig(batch_size=8, shards=k, epochs=2, seed=11)
        run1, _ = training.train(dataset, small, config)
        run2, _ = training.train(dataset, small, config)
        for (_, a), (_, b) in zip(network.parameter_entries(run1),
                                  network.parameter_entries(run2)):
            det_ok = det_ok and np.array_equal(a, b)
    check(capsys, "shard equivalence",
          shard_ok and det_ok,
          f"frozen-BN K in {{1,2,4}} max grad diff {worst:.2e} (tol 1e-6, 64-bit); "
          f"fixed-seed reruns bitwise identical per K: {det_ok}")


# ---------------------------------------------------------------------------
# 4: residual identity


def test_04_zero_last_layer_identity(capsys):
    rng = T.seeded_rng(902, purpose=202)
    y = rng.normal(0.5, 0.2, size=(6, 20, 20)).astype(np.float32)
    exact = True
    for kind, window in (("2d", 1), ("2.5d", 3), ("2.5d", 5), ("2.5d", 7), ("3d", 3)):
        variant = network.NetworkVariant(kind=kind, window=window, depth=4, width=4)
        params = network.build_network(variant, seed=1)
        arrays = [a.copy() for _, a in network.parameter_entries(params)]
        arrays[-2][:] = 0.0
        arrays[-1][:] = 0.0
        params = network.with_parameters(params, arrays)
        out = inference.infer_volume(params, y)
        exact = exact and np.array_equal(out, y)
    check(capsys, "residual identity",
          exact, "zero final layer reproduces the input bit-for-bit "
                 "(2d, 2.5d w=3/5/7, 3d)")


# ---------------------------------------------------------------------------
# 5 and 6: end-to-end training quality and window parity


def test_05_training_improves_held_out_psnr(capsys, scan_pairs, trained_2d):
    params, history, wall = trained_2d
    y, x, _, _ = scan_pairs[HELD_OUT_SEED]
    base_mse, _ = metrics.masked_mse(y, x)
    base = metrics.psnr(base_mse)
    refined = _held_out_psnr(scan_pairs, params)
    gain = refined - base
    n_patches = 2 * PATCHES_PER_VOLUME
    ok = gain >= 2.0 and wall < 1800.0 and n_patches >= 20000
    check(capsys, "end-to-end quality",
          ok, f"2D depth-{DEPTH} width-{WIDTH}, {n_patches} patches, {VIEWS}-view FBP: "
              f"held-out masked PSNR {base:.2f} -> {refined:.2f} dB "
              f"({gain:+.2f} dB, need >= +2), trained in {wall / 60:.1f} min (limit 30)")


def test_06_window_variant_parity(capsys, scan_pairs, trained_2d, trained_25d):
    psnr_2d = _held_out_psnr(scan_pairs, trained_2d[0])
    psnr_w5 = _held_out_psnr(scan_pairs, trained_25d[5][0])
    psnr_w3 = _held_out_psnr(scan_pairs, trained_25d[3][0])
    margin = psnr_w5 - psnr_2d
    ok = margin >= -0.1
    check(capsys, "window benefit direction",
          ok, f"identical budgets: 2.5d(w=5) {psnr_w5:.2f} dB vs 2d {psnr_2d:.2f} dB "
              f"(margin {margin:+.2f} dB, need >= -0.1); "
              f"reported only: w=5 vs w=3 {psnr_w5 - psnr_w3:+.2f} dB (w=3 {psnr_w3:.2f} dB)")


# ---------------------------------------------------------------------------
# 7: inference timing ordering


def test_07_timing_ordering(capsys):
    rng = T.seeded_rng(903, purpose=203)
    y = rng.normal(0.5, 0.2, size=(16, 64, 64)).astype(np.float32)
    times = {}
    for kind, window in (("2d", 1), ("2.5d", 7), ("3d", 7)):
        variant = network.NetworkVariant(kind=kind, window=window, depth=DEPTH, width=WIDTH)
        params = network.build_network(variant, seed=2)
        times[kind] = inference.time_inference(params, y, repeats=3).min_s
    r25 = times["2.5d"] / times["2d"]
    r3 = times["3d"] / times["2d"]
    ok = r25 <= 1.3 and r3 >= 3.0
    check(capsys, "timing ordering",
          ok, f"16x64x64 volume: 2d {times['2d'] * 1e3:.0f} ms, "
              f"2.5d(w=7) {r25:.2f}x (need <= 1.3x), 3d(w=7) {r3:.1f}x (need >= 3x)")


# ---------------------------------------------------------------------------
# 8: sliding-window locality


def test_08_sliding_window_locality(capsys):
    rng = T.seeded_rng(904, purpose=204)
    y = rng.normal(0.5, 0.2, size=(16, 24, 24)).astype(np.float32)
    local_ok = True
    for window in (3, 5, 7):
        variant = network.NetworkVariant(kind="2.5d", window=window, depth=3, width=4)
        params = network.build_network(variant, seed=4)
        base = inference.infer_volume(params, y)
        half = window // 2
        probe = 8
        bumped = y.copy()
        bumped[probe] += 0.25
        out = inference.infer_volume(params, bumped)
        for z in range(16):
            inside = abs(z - probe) <= half
            same = np.array_equal(out[z], base[z])
            local_ok = local_ok and (same != inside)

    counts_ok = True
    for z in (1, 3, 16):
        vol = rng.normal(0.5, 0.2, size=(z, 24, 24)).astype(np.float32)
        for kind, window in (("2d", 1), ("2.5d", 5), ("3d", 3)):
            variant = network.NetworkVariant(kind=kind, window=window, depth=3, width=4)
            params = network.build_network(variant, seed=5)
            counts_ok = counts_ok and inference.infer_volume(params, vol).shape == vol.shape
    check(capsys, "sliding-window locality",
          local_ok and counts_ok,
          "out-of-window slices bit-identical under perturbation (w=3/5/7); "
          "output slice count equals input for Z in {1,3,16}")


# ---------------------------------------------------------------------------
# 9: metric exactness


def test_09_metric_exactness(capsys):
    anchors = metrics.psnr(1.0) == 0.0 and metrics.psnr(0.01) == 20.0

    rng = T.seeded_rng(905, purpose=205)
    ref = rng.uniform(0.0, 2000.0, size=(3, 7, 7))
    vol = ref + rng.normal(0.0, 25.0, size=ref.shape)
    got, got_count = metrics.masked_mse(vol, ref)
    total, count = 0.0, 0
    for idx in np.ndindex(ref.shape):
        r = float(ref[idx])
        if 700.0 <= r <= 1500.0:
            d = (r - float(vol[idx])) / 2000.0
            total += d * d
            count += 1
    loop_ok = got_count == count and abs(got - total / count) <= 1e-12 * max(got, 1e-30)

    wrecked = vol.copy()
    wrecked[(ref < 700.0) | (ref > 1500.0)] = 1e9
    same, same_count = metrics.masked_mse(wrecked, ref)
    ignore_ok = (same, same_count) == (got, got_count)

    ok = anchors and loop_ok and ignore_ok
    check(capsys, "metric exactness",
          ok, f"psnr(1)=0 and psnr(0.01)=20 exactly: {anchors}; "
              f"masked MSE equals brute-force loop over {count} voxels: {loop_ok}; "
              f"out-of-mask voxels ignored: {ignore_ok}")


# ---------------------------------------------------------------------------
# 10: persistence round trips and corruption handling


def test_10_persistence_round_trips(capsys, tmp_path):
    rng = T.seeded_rng(906, purpose=206)

    vol = storage.VolumeHU(voxels=rng.normal(1000.0, 200.0, size=(4, 10, 10))
                           .astype(np.float32))
    vol_path = tmp_path / "v.vol"
    storage.save_volume(vol, vol_path)
    vol_ok = np.array_equal(storage.load_volume(vol_path).voxels, vol.voxels)

    variant = network.NetworkVariant(kind="2.5d", window=3, depth=4, width=4)
    params = network.build_network(variant, seed=9)
    ckpt_path = tmp_path / "n.ckpt"
    network.save_checkpoint(params, ckpt_path)
    loaded = network.load_checkpoint(ckpt_path)
    ckpt_ok = all(np.array_equal(a, b) for (_, a), (_, b)
                  in zip(network.parameter_entries(params), network.parameter_entries(loaded)))

    corrupt_ok = True
    raw = ckpt_path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-40])
    try:
        network.load_checkpoint(tmp_path / "trunc.ckpt")
        corrupt_ok = False
    except storage.TruncatedBlobError:
        pass
    (tmp_path / "magic.ckpt").write_bytes(b"not-a-container\n" + raw)
    try:
        network.load_checkpoint(tmp_path / "magic.ckpt")
        corrupt_ok = False
    except storage.FormatError:
        pass
    (tmp_path / "short.vol").write_bytes(vol_path.read_bytes()[:-11])
    try:
        storage.load_volume(tmp_path / "short.vol")
        corrupt_ok = False
    except storage.TruncatedBlobError:
        pass

    ok = vol_ok and ckpt_ok and corrupt_ok
    check(capsys, "persistence",
          ok, f"volume and checkpoint round trips bit-exact: {vol_ok and ckpt_ok}; "
              f"truncation/magic corruption raise the designated errors: {corrupt_ok}")
