"""Projector blocks with forward and hand-chained backward passes.

Four visual projector variants (mlp, c_abs, concat, mean_pool) that map a
27x27 patch grid to LLM embeddings, and a convolutional gated-MLP audio
projector that shortens a feature sequence by a configurable rate while
expanding channels proportionally, with a mean-pooled residual shortcut.
A toy gradient-descent fit and a down-sampling-rate ablation harness verify
the backward passes end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DivergenceError, ShapeError
from . import numkit
from .numkit import Tensor

VISUAL_VARIANTS = ("mlp", "c_abs", "concat", "mean_pool")
SUPPORTED_RATES = (1, 2, 4, 8)

_TOY_INPUT_SCALE = 5.0


# ---------------------------------------------------------------------------
# configs and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VisualProjectorConfig:
    variant: str
    in_dim: int
    llm_dim: int
    grid: tuple[int, int] = (27, 27)

    def __post_init__(self):
        if self.variant not in VISUAL_VARIANTS:
            raise ContractError(
                f"unknown visual projector variant {self.variant!r}, "
                f"expected one of {VISUAL_VARIANTS}"
            )
        if self.in_dim < 1 or self.llm_dim < 1:
            raise ContractError("projector dimensions must be >= 1")
        if self.grid[0] < 2 or self.grid[1] < 1:
            raise ContractError(f"invalid patch grid {self.grid}")

    @property
    def input_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def output_tokens(self) -> int:
        if self.variant == "mlp":
            return self.input_tokens
        rows = (self.grid[0] - 2) // 2 + 1
        cols = (self.grid[1] + self.grid[1] % 2) // 2
        return rows * cols


@dataclass(frozen=True)
class ConvGmlpConfig:
    rate_n: int
    llm_dim: int
    in_channels: int = 1280
    strides: tuple[int, int] | None = None  # None means (rate_n, 1)

    def __post_init__(self):
        if self.rate_n not in SUPPORTED_RATES:
            raise ContractError(
                f"unsupported rate {self.rate_n}, expected one of {SUPPORTED_RATES}"
            )
        if self.in_channels < 1 or self.llm_dim < 1:
            raise ContractError("projector dimensions must be >= 1")
        if self.strides is None:
            object.__setattr__(self, "strides", (self.rate_n, 1))
        s1, s2 = self.strides
        if s1 < 1 or s2 < 1 or s1 * s2 != self.rate_n:
            raise ContractError(
                f"strides {self.strides} must be positive and multiply to "
                f"rate {self.rate_n}"
            )

    @property
    def hidden_channels(self) -> int:
        """Width of each of the value and gate paths."""
        return self.rate_n * self.in_channels


@dataclass(frozen=True)
class ProjectorParams:
    tensors: dict[str, Tensor]
    init_seed: int

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.array)):
                raise ContractError(f"parameter {name!r} contains non-finite values")

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def to_json(self) -> dict:
        return {
            "init_seed": self.init_seed,
            "tensors": {k: self.tensors[k].to_json() for k in sorted(self.tensors)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProjectorParams":
        tensors = {k: Tensor.from_json(v) for k, v in obj["tensors"].items()}
        return cls(tensors=tensors, init_seed=int(obj["init_seed"]))


def _init(specs: list[tuple[str, tuple[int, ...], int]], seed: int) -> ProjectorParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in specs:
        bound = math.sqrt(1.0 / fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, shape))
    return ProjectorParams(tensors=tensors, init_seed=seed)


def init_visual_params(cfg: VisualProjectorConfig, seed: int) -> ProjectorParams:
    d_in, d_llm = cfg.in_dim, cfg.llm_dim
    if cfg.variant == "concat":
        first = 4 * d_in
        specs = [
            ("w1", (first, d_llm), first),
            ("b1", (d_llm,), first),
            ("w2", (d_llm, d_llm), d_llm),
            ("b2", (d_llm,), d_llm),
        ]
    elif cfg.variant == "c_abs":
        specs = [
            ("conv1", (1, d_in, d_llm), d_in),
            ("b1", (d_llm,), d_in),
            ("conv2", (1, d_llm, d_llm), d_llm),
            ("b2", (d_llm,), d_llm),
        ]
    else:  # mlp and mean_pool share the same two-layer MLP shape
        specs = [
            ("w1", (d_in, d_llm), d_in),
            ("b1", (d_llm,), d_in),
            ("w2", (d_llm, d_llm), d_llm),
            ("b2", (d_llm,), d_llm),
        ]
    return _init(specs, seed)


def init_conv_gmlp_params(cfg: ConvGmlpConfig, seed: int) -> ProjectorParams:
    s1, s2 = cfg.strides
    c = cfg.in_channels
    mid = s1 * c
    wide = 2 * cfg.hidden_channels
    specs = [
        ("conv_in", (s1, c, mid), s1 * c),
        ("b_in", (mid,), s1 * c),
        ("conv_mid", (s2, mid, wide), s2 * mid),
        ("b_mid", (wide,), s2 * mid),
        ("w_out", (cfg.hidden_channels, cfg.llm_dim), cfg.hidden_channels),
        ("b_out", (cfg.llm_dim,), cfg.hidden_channels),
        ("w_res", (c, cfg.llm_dim), c),
    ]
    return _init(specs, seed)


# ---------------------------------------------------------------------------
# visual projector
# ---------------------------------------------------------------------------

def _check_visual_input(cfg: VisualProjectorConfig, x: Tensor) -> None:
    if x.array.ndim != 2 or x.shape != (cfg.input_tokens, cfg.in_dim):
        raise ShapeError(
            f"visual projector expects {(cfg.input_tokens, cfg.in_dim)} input, "
            f"got {x.shape}"
        )


def _concat_groups(cfg: VisualProjectorConfig) -> np.ndarray:
    """Token indices of each 2x2 neighbourhood, -1 where the grid was padded."""
    rows, cols = cfg.grid
    out_rows = (rows - 2) // 2 + 1
    out_cols = (cols + cols % 2) // 2
    idx = np.full((out_rows * out_cols, 4), -1, dtype=np.int64)
    g = 0
    for i in range(out_rows):
        for j in range(out_cols):
            for m, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                r, c = 2 * i + di, 2 * j + dj
                if r < rows and c < cols:
                    idx[g, m] = r * cols + c
            g += 1
    return idx


def _mlp_forward(x_arr: np.ndarray, p: dict[str, Tensor]):
    xt = Tensor(x_arr)
    z1 = numkit.add_bias(numkit.matmul(xt, p["w1"]), p["b1"])
    h = numkit.gelu(z1)
    out = numkit.add_bias(numkit.matmul(h, p["w2"]), p["b2"])
    return out, (xt, z1, h)


def _mlp_backward(cache, p: dict[str, Tensor], grad_out: Tensor):
    xt, z1, h = cache
    g_pre2, g_b2 = numkit.add_bias_backward(numkit.matmul(h, p["w2"]), grad_out)
    g_h, g_w2 = numkit.matmul_backward(h, p["w2"], g_pre2)
    g_z1 = numkit.gelu_backward(z1, g_h)
    g_b1 = Tensor(g_z1.array.sum(axis=0))
    g_x, g_w1 = numkit.matmul_backward(xt, p["w1"], g_z1)
    grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}
    return g_x, grads


def visual_project(cfg: VisualProjectorConfig, params: ProjectorParams, x: Tensor) -> Tensor:
    """Project a (grid tokens x in_dim) feature block to LLM embeddings."""
    out, _ = _visual_forward(cfg, params, x)
    return out


def _visual_forward(cfg: VisualProjectorConfig, params: ProjectorParams, x: Tensor):
    _check_visual_input(cfg, x)
    p = params.tensors
    rows, cols = cfg.grid
    if cfg.variant == "mlp":
        return _mlp_forward(x.array, p)
    if cfg.variant == "mean_pool":
        grid = Tensor(x.array.reshape(rows, cols, cfg.in_dim))
        pooled = numkit.pool2x2(grid, numkit.POOL_PAD_COLS)
        flat = pooled.array.reshape(-1, cfg.in_dim)
        out, mlp_cache = _mlp_forward(flat, p)
        return out, ("mean_pool", grid, pooled.shape, mlp_cache)
    if cfg.variant == "concat":
        idx = _concat_groups(cfg)
        gathered = np.where(
            (idx >= 0)[:, :, None], x.array[np.clip(idx, 0, None)], 0.0
        )
        feat = gathered.reshape(idx.shape[0], 4 * cfg.in_dim)
        out, mlp_cache = _mlp_forward(feat, p)
        return out, ("concat", idx, mlp_cache)
    # c_abs: pointwise conv, pool, pointwise conv
    z1 = numkit.add_bias(numkit.conv1d(x, p["conv1"]), p["b1"])
    h = numkit.gelu(z1)
    grid = Tensor(h.array.reshape(rows, cols, cfg.llm_dim))
    pooled = numkit.pool2x2(grid, numkit.POOL_PAD_COLS)
    flat = Tensor(pooled.array.reshape(-1, cfg.llm_dim))
    out = numkit.add_bias(numkit.conv1d(flat, p["conv2"]), p["b2"])
    return out, ("c_abs", x, z1, h, grid, pooled.shape, flat)


def visual_project_backward(
    cfg: VisualProjectorConfig,
    params: ProjectorParams,
    x: Tensor,
    upstream_grad: Tensor,
) -> tuple[dict[str, Tensor], Tensor]:
    """Gradients of a scalar loss wrt every parameter and the input."""
    out, cache = _visual_forward(cfg, params, x)
    if upstream_grad.shape != out.shape:
        raise ShapeError(
            f"upstream gradient shape {upstream_grad.shape} != output {out.shape}"
        )
    p = params.tensors
    rows, cols = cfg.grid
    if cfg.variant == "mlp":
        g_x, grads = _mlp_backward(cache, p, upstream_grad)
        return grads, g_x
    if cfg.variant == "mean_pool":
        _, grid, pooled_shape, mlp_cache = cache
        g_flat, grads = _mlp_backward(mlp_cache, p, upstream_grad)
        g_pooled = Tensor(g_flat.array.reshape(pooled_shape))
        g_grid = numkit.pool2x2_backward(grid, numkit.POOL_PAD_COLS, g_pooled)
        return grads, Tensor(g_grid.array.reshape(x.shape))
    if cfg.variant == "concat":
        _, idx, mlp_cache = cache
        g_feat, grads = _mlp_backward(mlp_cache, p, upstream_grad)
        g_groups = g_feat.array.reshape(idx.shape[0], 4, cfg.in_dim)
        g_x = np.zeros_like(x.array)
        valid = idx >= 0
        np.add.at(g_x, idx[valid], g_groups[valid])
        return grads, Tensor(g_x)
    # c_abs
    _, xt, z1, h, grid, pooled_shape, flat = cache
    pre_out = numkit.conv1d(flat, p["conv2"])
    g_pre_out, g_b2 = numkit.add_bias_backward(pre_out, upstream_grad)
    g_flat, g_conv2 = numkit.conv1d_backward(flat, p["conv2"], 1, 0, g_pre_out)
    g_pooled = Tensor(g_flat.array.reshape(pooled_shape))
    g_grid = numkit.pool2x2_backward(grid, numkit.POOL_PAD_COLS, g_pooled)
    g_h = Tensor(g_grid.array.reshape(h.shape))
    g_z1 = numkit.gelu_backward(z1, g_h)
    g_b1 = Tensor(g_z1.array.sum(axis=0))
    g_x, g_conv1 = numkit.conv1d_backward(xt, p["conv1"], 1, 0, g_z1)
    grads = {"conv1": g_conv1, "b1": g_b1, "conv2": g_conv2, "b2": g_b2}
    return grads, g_x


# ---------------------------------------------------------------------------
# convolutional gated-MLP audio projector
# ---------------------------------------------------------------------------

def conv_gmlp_shapes(cfg: ConvGmlpConfig, seq_len: int) -> dict:
    """Length and width laws for a given input length, without running it."""
    if seq_len < 1:
        raise ContractError(f"sequence length must be >= 1, got {seq_len}")
    padded = seq_len + (-seq_len) % cfg.rate_n
    out_len = padded // cfg.rate_n
    return {
        "padded_len": padded,
        "output_len": out_len,
        "intermediate_channels": cfg.hidden_channels,
        "intermediate_shape": (out_len, cfg.hidden_channels),
        "output_shape": (out_len, cfg.llm_dim),
    }


def _block_mean(x_arr: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean over consecutive blocks of n rows; the last block may be short."""
    length = x_arr.shape[0]
    t = (length + n - 1) // n
    pad = t * n - length
    padded = np.concatenate([x_arr, np.zeros((pad, x_arr.shape[1]))]) if pad else x_arr
    counts = np.full(t, n, dtype=np.float64)
    if pad:
        counts[-1] = n - pad
    summed = padded.reshape(t, n, x_arr.shape[1]).sum(axis=1)
    return summed / counts[:, None], counts


def _check_conv_gmlp_input(cfg: ConvGmlpConfig, x: Tensor) -> None:
    if x.array.ndim != 2:
        raise ShapeError(f"projector input must be 2-D, got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"projector expects {cfg.in_channels} channels, input has {x.shape[1]}"
        )


def _conv_gmlp_forward(cfg: ConvGmlpConfig, params: ProjectorParams, x: Tensor):
    _check_conv_gmlp_input(cfg, x)
    p = params.tensors
    s1, s2 = cfg.strides
    pad = (-x.shape[0]) % cfg.rate_n
    z1 = numkit.add_bias(numkit.conv1d(x, p["conv_in"], s1, pad), p["b_in"])
    h = numkit.gelu(z1)
    pre2 = numkit.add_bias(numkit.conv1d(h, p["conv_mid"], s2, 0), p["b_mid"])
    width = cfg.hidden_channels
    value = Tensor(pre2.array[:, :width])
    gate = Tensor(pre2.array[:, width:])
    sig = numkit.sigmoid(gate)
    gated = numkit.elementwise_mul(value, sig)
    proj = numkit.add_bias(numkit.matmul(gated, p["w_out"]), p["b_out"])
    mp_arr, counts = _block_mean(x.array, cfg.rate_n)
    mp = Tensor(mp_arr)
    res = numkit.matmul(mp, p["w_res"])
    out = Tensor(proj.array + res.array)
    cache = {
        "pad": pad,
        "z1": z1,
        "h": h,
        "value": value,
        "gate": gate,
        "sig": sig,
        "gated": gated,
        "mp": mp,
        "counts": counts,
    }
    return out, cache


def conv_gmlp_forward(cfg: ConvGmlpConfig, params: ProjectorParams, x: Tensor) -> Tensor:
    """Shorten an (L x in_channels) sequence to ceil(L / rate) LLM embeddings.

    The input is right-zero-padded to a multiple of the rate; two strided
    convolutions expand channels to rate x in_channels for a value path and a
    sigmoid gate path, their product is projected to llm_dim, and a
    block-mean-pooled linear shortcut of the input is added.
    """
    out, _ = _conv_gmlp_forward(cfg, params, x)
    return out


def conv_gmlp_backward(
    cfg: ConvGmlpConfig,
    params: ProjectorParams,
    x: Tensor,
    upstream_grad: Tensor,
) -> tuple[dict[str, Tensor], Tensor]:
    """Gradients wrt every parameter tensor and the input."""
    out, cache = _conv_gmlp_forward(cfg, params, x)
    if upstream_grad.shape != out.shape:
        raise ShapeError(
            f"upstream gradient shape {upstream_grad.shape} != output {out.shape}"
        )
    p = params.tensors
    s1, s2 = cfg.strides
    g = upstream_grad

    # residual shortcut
    g_w_res = Tensor(cache["mp"].array.T @ g.array)
    g_mp = g.array @ p["w_res"].array.T
    per_row = g_mp / cache["counts"][:, None]
    g_x_res = np.repeat(per_row, cfg.rate_n, axis=0)[: x.shape[0]]

    # gated projection path
    g_proj, g_b_out = numkit.add_bias_backward(
        numkit.matmul(cache["gated"], p["w_out"]), g
    )
    g_gated, g_w_out = numkit.matmul_backward(cache["gated"], p["w_out"], g_proj)
    g_value, g_sig = numkit.elementwise_mul_backward(
        cache["value"], cache["sig"], g_gated
    )
    g_gate = numkit.sigmoid_backward(cache["gate"], g_sig)
    g_pre2 = Tensor(np.concatenate([g_value.array, g_gate.array], axis=1))
    g_b_mid = Tensor(g_pre2.array.sum(axis=0))
    g_h, g_conv_mid = numkit.conv1d_backward(cache["h"], p["conv_mid"], s2, 0, g_pre2)
    g_z1 = numkit.gelu_backward(cache["z1"], g_h)
    g_b_in = Tensor(g_z1.array.sum(axis=0))
    g_x_conv, g_conv_in = numkit.conv1d_backward(
        x, p["conv_in"], s1, cache["pad"], g_z1
    )

    grads = {
        "conv_in": g_conv_in,
        "b_in": g_b_in,
        "conv_mid": g_conv_mid,
        "b_mid": g_b_mid,
        "w_out": g_w_out,
        "b_out": g_b_out,
        "w_res": g_w_res,
    }
    return grads, Tensor(g_x_conv.array + g_x_res)


# ---------------------------------------------------------------------------
# gradient checking harness
# ---------------------------------------------------------------------------

def check_gradients(
    projector: str,
    seed: int,
    eps: float = 1e-5,
    tol: float = 1e-4,
    rate: int = 2,
    in_dim: int = 5,
    llm_dim: int = 3,
    channels: int = 4,
    seq_len: int = 11,
    grid: tuple[int, int] = (27, 27),
) -> numkit.GradCheckReport:
    """Finite-difference check of one projector's backward pass.

    The loss is half the squared Frobenius norm of the output, so the
    upstream gradient is the output itself.
    """
    rng = np.random.default_rng(seed)
    if projector == "conv_gmlp":
        cfg = ConvGmlpConfig(rate_n=rate, llm_dim=llm_dim, in_channels=channels)
        params = init_conv_gmlp_params(cfg, seed)
        names = sorted(params.tensors)
        x = Tensor(rng.normal(0.0, 1.0, (seq_len, channels)))

        def f(plist, xin):
            pp = ProjectorParams(tensors=dict(zip(names, plist)), init_seed=seed)
            out = conv_gmlp_forward(cfg, pp, xin)
            loss = 0.5 * float(np.sum(out.array**2))
            grads, _ = conv_gmlp_backward(cfg, pp, xin, out)
            return loss, [grads[n] for n in names]

    else:
        cfg = VisualProjectorConfig(
            variant=projector, in_dim=in_dim, llm_dim=llm_dim, grid=grid
        )
        params = init_visual_params(cfg, seed)
        names = sorted(params.tensors)
        x = Tensor(rng.normal(0.0, 1.0, (cfg.input_tokens, in_dim)))

        def f(plist, xin):
            pp = ProjectorParams(tensors=dict(zip(names, plist)), init_seed=seed)
            out = visual_project(cfg, pp, xin)
            loss = 0.5 * float(np.sum(out.array**2))
            grads, _ = visual_project_backward(cfg, pp, xin, out)
            return loss, [grads[n] for n in names]

    return numkit.grad_check(f, [params.tensors[n] for n in names], x, eps=eps, tol=tol)


# ---------------------------------------------------------------------------
# toy fit and rate ablation
# ---------------------------------------------------------------------------

def toy_fit(
    cfg: ConvGmlpConfig,
    steps: int,
    lr: float,
    seed: int,
    seq_len: int = 128,
) -> list[float]:
    """Fit the projector by plain gradient descent to a synthetic target.

    The target is a fixed random linear map of the block-mean-pooled input;
    returns the mean-squared loss observed at each step.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if seq_len < 1:
        raise ContractError(f"seq_len must be >= 1, got {seq_len}")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(0.0, _TOY_INPUT_SCALE, (seq_len, cfg.in_channels)))
    w_target = rng.normal(0.0, 1.0, (cfg.in_channels, cfg.llm_dim))
    w_target /= math.sqrt(cfg.in_channels)
    mp, _ = _block_mean(x.array, cfg.rate_n)
    target = mp @ w_target
    t_len = target.shape[0]

    params = init_conv_gmlp_params(cfg, seed)
    losses: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            try:
                out, _ = _conv_gmlp_forward(cfg, params, x)
                err = out.array - target
                loss = 0.5 * float(np.sum(err * err)) / t_len
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at step {step}")
                losses.append(loss)
                grads, _ = conv_gmlp_backward(cfg, params, x, Tensor(err / t_len))
                params = ProjectorParams(
                    tensors={
                        name: Tensor(t.array - lr * grads[name].array)
                        for name, t in params.tensors.items()
                    },
                    init_seed=params.init_seed,
                )
            except DivergenceError:
                raise
            except ContractError as exc:
                # parameters blew up to non-finite values during the update
                raise DivergenceError(f"non-finite loss at step {step}") from exc
    return losses


def ablate_rates(
    rates: list[int],
    task_seed: int,
    steps: int = 200,
    lr: float = 1e-3,
    in_channels: int = 32,
    llm_dim: int = 16,
    seq_len: int = 128,
) -> list[dict]:
    """Run the toy fit at each down-sampling rate with a matched budget."""
    if not rates:
        raise ContractError("rates must be non-empty")
    rows = []
    for rate in rates:
        if rate not in SUPPORTED_RATES:
            raise ContractError(
                f"unsupported rate {rate}, expected one of {SUPPORTED_RATES}"
            )
        cfg = ConvGmlpConfig(rate_n=rate, llm_dim=llm_dim, in_channels=in_channels)
        losses = toy_fit(cfg, steps=steps, lr=lr, seed=task_seed, seq_len=seq_len)
        out_len = conv_gmlp_shapes(cfg, seq_len)["output_len"]
        rows.append(
            {
                "rate": rate,
                "output_length_ratio": out_len / seq_len,
                "param_count": init_conv_gmlp_params(cfg, task_seed).param_count,
                "final_loss": losses[-1],
            }
        )
    return rows


def ablation_csv(rows: list[dict]) -> str:
    lines = ["rate,len_ratio,params,final_loss"]
    for r in rows:
        lines.append(
            f"{r['rate']},{r['output_length_ratio']!r},{r['param_count']},"
            f"{r['final_loss']!r}"
        )
    return "\n".join(lines) + "\n"
