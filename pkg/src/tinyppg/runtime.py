"""Bounded-memory streaming inference.

`plan_memory` walks the eval-mode layer sequence for one 1920-sample
window, sizes every activation buffer, and schedules them into a single
arena by liveness (a buffer is reusable after its last consumer).
`ArenaExecutor` then runs windows inside that arena without allocating:
convolutions use implicit zero padding into preplanned buffers, batch
norms are folded to per-channel scale/shift, and elementwise ops run in
place.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import minmax_normalize
from .errors import ConfigError, StateError
from .model import TinyPPG, count_parameters


@dataclass
class BufferSpec:
    name: str
    channels: int
    length: int
    start: int          # step that writes it first
    end: int            # last step that reads or writes it
    offset: int = -1    # byte offset inside the arena

    @property
    def nbytes(self):
        return 4 * self.channels * self.length


@dataclass
class MemoryPlan:
    buffers: list
    steps: list
    weight_bytes: int
    peak_bytes: int
    arena_total_bytes: int

    def table(self):
        rows = []
        for b in self.buffers:
            rows.append((b.name, b.channels, b.length, b.nbytes, b.offset, b.start, b.end))
        return rows


def _fold_bn(bn, mask=None):
    scale = (bn.gamma / np.sqrt(bn.running_var + bn.eps)).astype(np.float32)
    shift = (bn.beta - bn.running_mean * scale).astype(np.float32)
    if mask is not None:
        scale = scale * mask
        shift = shift * mask
    return scale, shift


def _build_program(model: TinyPPG):
    """Step and buffer lists for a single (1, L) window in eval mode."""
    cfg = model.config
    buffers = []
    steps = []

    def new_buffer(name, channels, length, step):
        buffers.append(BufferSpec(name, channels, length, start=step, end=step))
        return len(buffers) - 1

    def touch(buf, step):
        buffers[buf].end = max(buffers[buf].end, step)

    L = cfg.input_length
    cur = new_buffer("input", 1, L, 0)
    steps.append({"op": "input", "out": cur})
    for bi, block in enumerate(model.blocks):
        if block.standard:
            out = new_buffer(f"block{bi}.conv", block.out_channels, L, len(steps))
            steps.append({"op": "conv", "layer": block.conv, "in": cur, "out": out})
            touch(cur, len(steps) - 1)
            cur = out
        else:
            out = new_buffer(f"block{bi}.dw", block.in_channels, L, len(steps))
            steps.append({"op": "dwconv", "layer": block.dw, "in": cur, "out": out})
            touch(cur, len(steps) - 1)
            cur = out
            out = new_buffer(f"block{bi}.pw", block.out_channels, L, len(steps))
            steps.append({"op": "conv", "layer": block.pw, "in": cur, "out": out})
            touch(cur, len(steps) - 1)
            cur = out
        scale, shift = _fold_bn(block.bn, block.mask)
        steps.append({"op": "affine", "scale": scale, "shift": shift, "buf": cur})
        touch(cur, len(steps) - 1)
        if block.pool is not None:
            out = new_buffer(f"block{bi}.pool", block.out_channels, L // 2, len(steps))
            steps.append({"op": "pool", "in": cur, "out": out})
            touch(cur, len(steps) - 1)
            cur = out
            L = L // 2
        steps.append({"op": "relu", "buf": cur})
        touch(cur, len(steps) - 1)
    if cfg.use_aspp:
        concat = new_buffer("pyramid", len(model.aspp), L, len(steps))
        for i, branch in enumerate(model.aspp):
            steps.append({"op": "conv", "layer": branch, "in": cur, "out": concat,
                          "out_row": i})
            touch(cur, len(steps) - 1)
            touch(concat, len(steps) - 1)
        cur = concat
        channels = len(model.aspp)
    else:
        channels = model.blocks[-1].out_channels
    factor = cfg.head_upsample_factor
    out = new_buffer("upsampled", channels, L * factor, len(steps))
    steps.append({"op": "upsample", "factor": factor, "in": cur, "out": out})
    touch(cur, len(steps) - 1)
    cur = out
    L = L * factor
    out = new_buffer("logits", 1, L, len(steps))
    steps.append({"op": "conv", "layer": model.final_conv, "in": cur, "out": out})
    touch(cur, len(steps) - 1)
    cur = out
    steps.append({"op": "sigmoid", "buf": cur})
    touch(cur, len(steps) - 1)
    steps.append({"op": "output", "buf": cur})
    touch(cur, len(steps) - 1)
    # shared accumulation scratch for the conv kernels, live throughout
    max_conv = max(buffers[s["out"]].nbytes for s in steps if s["op"] in ("conv", "dwconv"))
    buffers.append(BufferSpec("conv_scratch", 1, max_conv // 4, 0, len(steps) - 1))
    return buffers, steps


def _assign_offsets(buffers):
    """First-fit offsets such that no two live-overlapping buffers alias."""
    placed = []
    for buf in buffers:
        taken = []
        for other in placed:
            if not (other.end < buf.start or other.start > buf.end):
                taken.append((other.offset, other.offset + other.nbytes))
        taken.sort()
        offset = 0
        for lo, hi in taken:
            if offset + buf.nbytes <= lo:
                break
            offset = max(offset, hi)
        buf.offset = offset
        placed.append(buf)
    return max((b.offset + b.nbytes for b in buffers), default=0)


def plan_memory(model: TinyPPG) -> MemoryPlan:
    """Deterministic activation plan for a single-window eval forward.

    Raises StateError when the model still carries training-only layers
    (the projection head); strip it first.
    """
    if model.head is not None:
        raise StateError("plan_memory expects an inference model without the projection head")
    buffers, steps = _build_program(model)
    arena_total = _assign_offsets(buffers)
    n_steps = len(steps)
    peak = 0
    for step in range(n_steps):
        live = sum(b.nbytes for b in buffers if b.start <= step <= b.end)
        peak = max(peak, live)
    bn_stats = sum(2 * bn.running_mean.shape[0] for bn in model.block_bns())
    weight_bytes = 4 * (count_parameters(model) + bn_stats)
    return MemoryPlan(buffers=buffers, steps=steps, weight_bytes=weight_bytes,
                      peak_bytes=peak, arena_total_bytes=arena_total)


class ArenaExecutor:
    """Runs planned windows inside one preallocated arena."""

    def __init__(self, model: TinyPPG, plan: MemoryPlan | None = None):
        if plan is None:
            plan = plan_memory(model)
        self.plan = plan
        self.arena = np.zeros(plan.arena_total_bytes // 4, dtype=np.float32)
        self.views = []
        for b in plan.buffers:
            view = self.arena[b.offset // 4: b.offset // 4 + b.channels * b.length]
            self.views.append(view.reshape(b.channels, b.length))
        self.tmp = self.views[-1]  # conv_scratch
        self.input = self.views[0]
        out_idx = next(i for i, s in enumerate(plan.steps) if s["op"] == "output")
        self.output = self.views[plan.steps[out_idx]["buf"]]

    def run(self, window: np.ndarray) -> np.ndarray:
        """Forward one normalized window; returns the probability view."""
        self.input[0, :] = window
        for step in self.plan.steps:
            op = step["op"]
            if op in ("input", "output"):
                continue
            if op == "conv":
                layer = step["layer"]
                out = self.views[step["out"]]
                if "out_row" in step:
                    out = out[step["out_row"]:step["out_row"] + 1]
                left, _ = kernels.pad_amounts(layer.kernel_size, layer.dilation)
                kernels.conv1d_forward_single(self.views[step["in"]], layer.w, layer.b,
                                              layer.dilation, left, out, self.tmp)
            elif op == "dwconv":
                layer = step["layer"]
                left, _ = kernels.pad_amounts(layer.kernel_size, layer.dilation)
                kernels.depthwise_conv1d_forward_single(self.views[step["in"]], layer.w,
                                                        layer.b, layer.dilation, left,
                                                        self.views[step["out"]], self.tmp)
            elif op == "affine":
                buf = self.views[step["buf"]]
                buf *= step["scale"][:, None]
                buf += step["shift"][:, None]
            elif op == "relu":
                buf = self.views[step["buf"]]
                np.maximum(buf, 0.0, out=buf)
            elif op == "pool":
                src = self.views[step["in"]]
                np.maximum(src[:, 0::2], src[:, 1::2], out=self.views[step["out"]])
            elif op == "upsample":
                src = self.views[step["in"]]
                f = step["factor"]
                dst = self.views[step["out"]]
                dst.reshape(src.shape[0], src.shape[1], f)[:] = src[:, :, None]
            elif op == "sigmoid":
                buf = self.views[step["buf"]]
                np.negative(buf, out=buf)
                np.exp(buf, out=buf)
                buf += 1.0
                np.reciprocal(buf, out=buf)
            else:  # pragma: no cover
                raise RuntimeError(f"unknown op {op}")
        return self.output[0]


@dataclass
class WindowResult:
    index: int
    start_sample: int
    probs: np.ndarray
    mask: np.ndarray
    seconds: float


@dataclass
class StreamStats:
    windows_processed: int = 0
    window_seconds: list = field(default_factory=list)
    peak_bytes: int = 0

    @property
    def mean_latency(self):
        return float(np.mean(self.window_seconds)) if self.window_seconds else 0.0

    @property
    def max_latency(self):
        return float(np.max(self.window_seconds)) if self.window_seconds else 0.0


def _iter_chunks(stream, chunk=4096):
    if isinstance(stream, np.ndarray):
        for i in range(0, stream.shape[0], chunk):
            yield np.asarray(stream[i:i + chunk], dtype=np.float64)
        return
    buf = []
    for value in stream:
        buf.append(float(value))
        if len(buf) >= chunk:
            yield np.array(buf, dtype=np.float64)
            buf.clear()
    if buf:
        yield np.array(buf, dtype=np.float64)


def infer_stream(model: TinyPPG, stream, window: int = 1920, hop: int = 1920,
                 threshold: float = 0.5):
    """Stream samples through the model with a rolling window.

    Each full window is min-max normalized, run inside the planned arena,
    and thresholded. Memory stays bounded by the window plus the arena;
    a trailing partial window is dropped. Returns (results, stats).
    """
    if hop < 1 or hop > window:
        raise ConfigError(f"hop must be in [1, window], got hop={hop} window={window}")
    if window != model.config.input_length:
        raise ConfigError(f"window must match the model input length "
                          f"{model.config.input_length}, got {window}")
    work = model.without_head() if model.head is not None else model
    plan = plan_memory(work)
    executor = ArenaExecutor(work, plan)
    stats = StreamStats(peak_bytes=plan.peak_bytes)
    results = []
    ring = np.empty(window, dtype=np.float64)
    filled = 0
    consumed = 0
    index = 0
    for chunk in _iter_chunks(stream):
        pos = 0
        while pos < chunk.shape[0]:
            take = min(window - filled, chunk.shape[0] - pos)
            ring[filled:filled + take] = chunk[pos:pos + take]
            filled += take
            pos += take
            if filled == window:
                start = consumed
                normalized = minmax_normalize(ring).astype(np.float32)
                t0 = time.perf_counter()
                probs = executor.run(normalized)
                dt = time.perf_counter() - t0
                mask = (probs >= threshold).astype(np.uint8)
                results.append(WindowResult(index=index, start_sample=start,
                                            probs=probs.copy(), mask=mask, seconds=dt))
                stats.windows_processed += 1
                stats.window_seconds.append(dt)
                index += 1
                ring[:window - hop] = ring[hop:]
                filled = window - hop
                consumed += hop
    return results, stats


def run_length_encode(mask: np.ndarray):
    """[start, stop) spans of consecutive ones."""
    padded = np.concatenate([[0], mask.astype(np.int8), [0]])
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))
