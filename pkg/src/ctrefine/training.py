"""Residual-learning trainer: quadratic loss, ADAM, sharded gradient
averaging (worker threads standing in for devices), and the epoch loop
with an 80/20 train/validation split.

Determinism contract: for a fixed (seed, shard count) every run produces
bit-identical parameters. Shards are reduced in a fixed sequential order
(0..K-1), shuffling comes from a counter-based generator keyed by
(seed, epoch), and each shard's computation is independent of thread
scheduling.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from .network import (
    NetworkParams,
    NetworkVariant,
    _check_input,
    build_network,
    forward,
    parameter_entries,
    save_checkpoint,
    with_parameters,
    with_running_stats,
)
from .simulate import PatchSet, hu_denormalize
from .tensor_ops import (
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv_backward_cached,
    conv_forward_cached,
    default_dtype,
    relu_backward,
    relu_forward,
    seeded_rng,
)

HISTORY_COLUMNS = "step,epoch,train_loss,val_loss,val_psnr_db,wall_time_s"


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 128
    shards: int = 1
    epochs: int = 1
    seed: int = 0
    val_fraction: float = 0.2
    # "per-shard": each worker normalizes by its own sub-batch statistics
    # (mirrors multi-device training). "frozen": running statistics are
    # used and left untouched, which makes K-shard averaging algebraically
    # identical to the full-batch gradient.
    bn_mode_for_shard_test: str = "per-shard"
    checkpoint_every_steps: int = 0
    # epoch-end loss evaluation subset sizes; 0 means the full split
    train_eval_samples: int = 0
    val_eval_samples: int = 0

    def __post_init__(self):
        if self.shards < 1:
            raise ShapeError(f"shards must be >= 1, got {self.shards}")
        if self.batch_size < 1 or self.batch_size % self.shards != 0:
            raise ShapeError(
                f"batch_size {self.batch_size} must be positive and divisible by {self.shards} shards"
            )
        if not 0.0 < self.val_fraction < 1.0:
            raise ShapeError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.epochs < 0:
            raise ShapeError(f"epochs must be >= 0, got {self.epochs}")
        if self.bn_mode_for_shard_test not in ("per-shard", "frozen"):
            raise ValueError(f"bn mode must be 'per-shard' or 'frozen', got {self.bn_mode_for_shard_test!r}")


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0


@dataclass
class LossRecord:
    step: int
    epoch: int
    train_loss: float
    val_loss: float
    val_psnr_db: float
    wall_time_s: float


def init_adam(params: NetworkParams) -> AdamState:
    entries = parameter_entries(params)
    return AdamState(
        first_moment=[np.zeros_like(a) for _, a in entries],
        second_moment=[np.zeros_like(a) for _, a in entries],
        step_count=0,
    )


# ---------------------------------------------------------------------------
# loss


def loss(predicted_residuals: np.ndarray, target_residuals: np.ndarray) -> float:
    """Half the mean (over the batch) of per-sample squared norms:
    sum_i ||R_i - nu_i||^2 / (2 N)."""
    value, _ = loss_and_gradient(predicted_residuals, target_residuals)
    return value


def loss_and_gradient(predicted_residuals: np.ndarray, target_residuals: np.ndarray):
    r = np.asarray(predicted_residuals)
    t = np.asarray(target_residuals)
    if r.shape != t.shape:
        raise ShapeError(f"prediction shape {r.shape} != target shape {t.shape}")
    if r.ndim < 1 or r.shape[0] == 0:
        raise ShapeError("batch axis 0 is empty")
    n = r.shape[0]
    diff = r - t
    value = float(np.vdot(diff, diff).real) / (2.0 * n)
    return value, diff / n


# ---------------------------------------------------------------------------
# forward/backward through the stack (training path with caches)


def _bn_run_mode(bn_mode: str) -> str:
    """Translate the trainer's statistics policy into a layer mode: frozen
    shards normalize by the stored running statistics (infer semantics),
    per-shard uses each sub-batch's own statistics (train semantics)."""
    if bn_mode not in ("per-shard", "frozen"):
        raise ValueError(f"bn mode must be 'per-shard' or 'frozen', got {bn_mode!r}")
    return "infer" if bn_mode == "frozen" else "train"


def _forward_cached(params: NetworkParams, xb: np.ndarray, mode: str):
    """Batched forward keeping per-layer caches for the backward pass.

    ``mode`` is the batch-norm layer mode ("train" or "infer"). Returns
    (output, caches); each cache is (conv_windows, bn_input, pre_relu,
    new_bn_state-or-None).
    """
    depth = len(params.layers)
    a = xb
    caches = []
    for i, layer in enumerate(params.layers):
        out, conv_cache = conv_forward_cached(a, layer.kernel)
        bn_in = out
        new_bn = None
        if layer.bn is not None:
            out, new_bn = batchnorm_forward(out, layer.bn, mode=mode)
        pre_relu = out
        if i < depth - 1:
            out = relu_forward(out)
        caches.append((conv_cache, bn_in, pre_relu, new_bn))
        a = out
    return a, caches


def _backward(params: NetworkParams, caches, upstream: np.ndarray, mode: str):
    """Gradients for every trainable array, in parameter_entries order."""
    depth = len(params.layers)
    g = upstream
    per_layer = []
    for i in range(depth - 1, -1, -1):
        conv_cache, bn_in, pre_relu, _ = caches[i]
        layer = params.layers[i]
        if i < depth - 1:
            g = relu_backward(pre_relu, g)
        g_gamma = g_beta = None
        if layer.bn is not None:
            g, g_gamma, g_beta = batchnorm_backward(bn_in, layer.bn, g, mode=mode)
        g, g_w, g_b = conv_backward_cached(conv_cache, layer.kernel, g)
        per_layer.append((g_w, g_b, g_gamma, g_beta))
    flat = []
    for g_w, g_b, g_gamma, g_beta in reversed(per_layer):
        flat.append(g_w)
        flat.append(g_b)
        if g_gamma is not None:
            flat.append(g_gamma)
            flat.append(g_beta)
    return flat


@dataclass
class ShardResult:
    loss: float
    grads: list[np.ndarray]
    running_stats: list  # per layer: (mean, var) or None


def _shard_pass(params: NetworkParams, xb: np.ndarray, tb: np.ndarray, bn_mode: str) -> ShardResult:
    mode = _bn_run_mode(bn_mode)
    out, caches = _forward_cached(params, xb, mode)
    value, upstream = loss_and_gradient(out, tb)
    grads = _backward(params, caches, upstream, mode)
    stats = [None if c[3] is None else (c[3].running_mean, c[3].running_var) for c in caches]
    return ShardResult(loss=value, grads=grads, running_stats=stats)


def shard_gradients(inputs: np.ndarray, targets: np.ndarray, params: NetworkParams,
                    shards: int, bn_mode: str = "per-shard"):
    """Split the batch into K contiguous equal shards, compute each shard's
    loss gradient concurrently, and average with a fixed reduction order.

    Returns (averaged_grads, mean_loss, averaged_running_stats). With
    ``bn_mode="frozen"`` the average equals the full-batch gradient; with
    per-shard statistics it intentionally does not.
    """
    n = inputs.shape[0]
    if shards < 1 or n % shards != 0:
        raise ShapeError(f"batch of {n} not divisible into {shards} equal shards")
    if inputs.shape[0] != targets.shape[0]:
        raise ShapeError("inputs and targets batch axes differ")
    size = n // shards
    pieces = [(inputs[k * size : (k + 1) * size], targets[k * size : (k + 1) * size])
              for k in range(shards)]
    if shards == 1:
        results = [_shard_pass(params, *pieces[0], bn_mode)]
    else:
        with ThreadPoolExecutor(max_workers=shards) as pool:
            futures = [pool.submit(_shard_pass, params, xb, tb, bn_mode) for xb, tb in pieces]
            results = [f.result() for f in futures]  # fixed order 0..K-1

    grads = [g.copy() for g in results[0].grads]
    for r in results[1:]:
        for acc, g in zip(grads, r.grads):
            acc += g
    for acc in grads:
        acc /= shards
    mean_loss = sum(r.loss for r in results) / shards

    stats = []
    for li, st in enumerate(results[0].running_stats):
        if st is None:
            stats.append(None)
            continue
        mean = st[0].copy()
        var = st[1].copy()
        for r in results[1:]:
            mean += r.running_stats[li][0]
            var += r.running_stats[li][1]
        stats.append((mean / shards, var / shards))
    return grads, mean_loss, stats


# ---------------------------------------------------------------------------
# ADAM


def adam_step(params: NetworkParams, grads: list[np.ndarray], state: AdamState,
              config: TrainingConfig):
    """One bias-corrected ADAM update; returns (new_params, new_state)."""
    entries = parameter_entries(params)
    if len(grads) != len(entries):
        raise ShapeError(f"got {len(grads)} gradients for {len(entries)} parameter arrays")
    t = state.step_count + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_arrays, new_m, new_v = [], [], []
    for (name, p), g, m, v in zip(entries, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
        new_arrays.append((p - update).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    new_params = replace(with_parameters(params, new_arrays), step=params.step + 1)
    return new_params, AdamState(first_moment=new_m, second_moment=new_v, step_count=t)


# ---------------------------------------------------------------------------
# dataset plumbing


def _dataset_tensors(dataset: PatchSet, variant: NetworkVariant):
    """Validate the patch layout against the variant and return batched
    (inputs, targets) at the active precision."""
    if len(dataset) == 0:
        raise ShapeError("dataset is empty")
    if dataset.window != variant.window:
        raise ShapeError(
            f"dataset window {dataset.window} does not match variant window {variant.window}"
        )
    want_depth = variant.window if variant.kind == "3d" else 1
    if dataset.targets.shape[1] != want_depth:
        raise ShapeError(
            f"target depth {dataset.targets.shape[1]} does not match variant "
            f"({want_depth} expected for {variant.label()})"
        )
    dt = default_dtype()
    inputs = dataset.inputs.astype(dt)
    targets = dataset.targets.astype(dt)
    if variant.kind == "3d":
        n, w, p, q = inputs.shape
        inputs = inputs.reshape(n, 1, w, p, q)
        targets = targets.reshape(n, 1, w, p, q)
    _check_input(variant, inputs[:1])
    return inputs, targets


def _batched_forward(params: NetworkParams, inputs: np.ndarray, chunk: int) -> np.ndarray:
    outs = [forward(params, inputs[i : i + chunk], mode="infer")
            for i in range(0, inputs.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def dataset_loss(params: NetworkParams, inputs: np.ndarray, targets: np.ndarray,
                 chunk: int = 256) -> float:
    """Infer-mode loss over an entire sample set (chunked forward)."""
    n = inputs.shape[0]
    total = 0.0
    for i in range(0, n, chunk):
        out = forward(params, inputs[i : i + chunk], mode="infer")
        diff = out - targets[i : i + chunk]
        total += float(np.vdot(diff, diff).real)
    return total / (2.0 * n)


def _val_psnr(params: NetworkParams, inputs: np.ndarray, targets: np.ndarray,
              variant: NetworkVariant, chunk: int = 256) -> float:
    """Masked PSNR of the corrected validation patches against their
    references, in the evaluation module's HU convention."""
    residual = _batched_forward(params, inputs, chunk)
    if variant.kind == "3d":
        y = inputs[:, 0]
        rhat = residual[:, 0]
        nu = targets[:, 0]
    else:
        y = inputs[:, variant.window // 2]
        rhat = residual[:, 0]
        nu = targets[:, 0]
    xhat_hu = hu_denormalize(y - rhat)
    ref_hu = hu_denormalize(y - nu)
    try:
        mse, _ = metrics.masked_mse(xhat_hu, ref_hu)
    except metrics.EmptyMaskError:
        return float("nan")
    return metrics.psnr(mse)


# ---------------------------------------------------------------------------
# the training loop


def train(dataset: PatchSet, variant: NetworkVariant, config: TrainingConfig,
          initial_params: NetworkParams | None = None, checkpoint_dir=None):
    """Train a network on the patch set; returns (params, history).

    The train/validation split and every epoch's shuffle come from
    counter-based generators keyed off config.seed, so results depend only
    on (seed, shards, epochs). One LossRecord is appended per epoch with
    infer-mode losses evaluated at epoch end.
    """
    inputs, targets = _dataset_tensors(dataset, variant)
    n = inputs.shape[0]
    n_val = max(1, int(round(config.val_fraction * n)))
    if n_val >= n:
        raise ShapeError(f"val_fraction {config.val_fraction} leaves no training data for {n} samples")
    perm = seeded_rng(config.seed, purpose=1).permutation(n)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if train_idx.size < config.batch_size:
        raise ShapeError(
            f"training split of {train_idx.size} cannot fill one batch of {config.batch_size}"
        )

    def subset(idx, limit):
        return idx if limit <= 0 or idx.size <= limit else idx[:limit]

    train_eval_idx = subset(train_idx, config.train_eval_samples)
    val_eval_idx = subset(val_idx, config.val_eval_samples)

    params = build_network(variant, config.seed) if initial_params is None else initial_params
    adam = init_adam(params)
    history: list[LossRecord] = []
    bn_mode = config.bn_mode_for_shard_test
    steps_per_epoch = train_idx.size // config.batch_size
    global_step = 0
    start = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        order = seeded_rng(config.seed, purpose=2, index=epoch).permutation(train_idx.size)
        shuffled = train_idx[order]
        for s in range(steps_per_epoch):
            bidx = shuffled[s * config.batch_size : (s + 1) * config.batch_size]
            grads, _, stats = shard_gradients(inputs[bidx], targets[bidx], params,
                                              config.shards, bn_mode)
            if bn_mode != "frozen":
                params = with_running_stats(params, stats)
            params, adam = adam_step(params, grads, adam, config)
            global_step += 1
            if (checkpoint_dir is not None and config.checkpoint_every_steps > 0
                    and global_step % config.checkpoint_every_steps == 0):
                save_checkpoint(params, f"{checkpoint_dir}/step{global_step:06d}.ckpt")
        history.append(LossRecord(
            step=global_step,
            epoch=epoch,
            train_loss=dataset_loss(params, inputs[train_eval_idx], targets[train_eval_idx]),
            val_loss=dataset_loss(params, inputs[val_eval_idx], targets[val_eval_idx]),
            val_psnr_db=_val_psnr(params, inputs[val_eval_idx], targets[val_eval_idx], variant),
            wall_time_s=time.perf_counter() - start,
        ))
    return params, history


# ---------------------------------------------------------------------------
# history persistence


def write_history(history: list[LossRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(HISTORY_COLUMNS + "\n")
        for r in history:
            fh.write(f"{r.step},{r.epoch},{r.train_loss!r},{r.val_loss!r},"
                     f"{r.val_psnr_db!r},{r.wall_time_s:.3f}\n")


def read_history(path) -> list[LossRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected history header {header!r}")
        for line in fh:
            step, epoch, tl, vl, vp, wt = line.strip().split(",")
            records.append(LossRecord(step=int(step), epoch=int(epoch), train_loss=float(tl),
                                      val_loss=float(vl), val_psnr_db=float(vp),
                                      wall_time_s=float(wt)))
    return records
