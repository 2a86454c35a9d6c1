"""Swin-style slice encoder followed by a transformer over the slice sequence.

Parameters live in one flat, ordered ``dict`` of named leaf tensors so that a
checkpoint is just a list of named blocks. The forward functions below take
the model (or a prefix view of its parameters) explicitly.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .labels import NUM_CLASSES

CHECKPOINT_MAGIC = "IHDNET-CHECKPOINT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 224
    patch_size: int = 4
    embed_dim: int = 128
    depths: tuple = (2, 2, 18, 2)
    heads: tuple = (4, 8, 16, 32)
    window_size: int = 7
    shift_size: int = 3
    mlp_ratio: float = 4.0
    norm: str = "post"
    seq_layers: int = 2
    seq_heads: int = 2
    seq_mlp_ratio: float = 4.0
    max_slices: int = 60
    num_classes: int = NUM_CLASSES
    logical_any: bool = False
    use_inter: bool = True
    ln_eps: float = 1e-5
    init: str = "trunc_normal"
    input_mean: float = 0.5
    input_std: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.init not in ("trunc_normal", "fan_in"):
            raise ConfigError(f"init must be 'trunc_normal' or 'fan_in', got {self.init!r}")
        if self.input_std <= 0:
            raise ConfigError("input_std must be positive")
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigError("depths and heads need one entry per stage")
        if self.resolution % self.patch_size:
            raise ConfigError(f"resolution {self.resolution} not divisible by patch size {self.patch_size}")
        if not 0 <= self.shift_size < self.window_size:
            raise ConfigError("shift size must satisfy 0 <= shift < window")
        if self.seq_layers < 1:
            raise ConfigError("sequence layers must be >= 1")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError("the label vector has exactly six classes")
        grid = self.resolution // self.patch_size
        for s, (depth, heads) in enumerate(zip(self.depths, self.heads)):
            win = min(self.window_size, grid)
            if grid % win:
                raise ConfigError(f"stage {s} grid {grid} not divisible by window {win}")
            if self.dim(s) % heads:
                raise ConfigError(f"stage {s} dim {self.dim(s)} not divisible by {heads} heads")
            if s < self.num_stages - 1:
                if grid % 2:
                    raise ConfigError(f"stage {s} grid {grid} is odd; cannot merge patches")
                grid //= 2
        if self.feature_dim % self.seq_heads:
            raise ConfigError("feature dim not divisible by sequence heads")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def dim(self, stage: int) -> int:
        return self.embed_dim * 2 ** stage

    @property
    def feature_dim(self) -> int:
        return self.dim(self.num_stages - 1)

    @property
    def head_outputs(self) -> int:
        return 5 if self.logical_any else NUM_CLASSES

    def stage_grid(self, stage: int) -> int:
        return self.resolution // self.patch_size // 2 ** stage

    def stage_window(self, stage: int) -> tuple[int, int]:
        """Effective (window, shift) for a stage; a window covering the map disables shifting."""
        grid = self.stage_grid(stage)
        if grid <= self.window_size:
            return grid, 0
        return self.window_size, self.shift_size

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(
            resolution=32, patch_size=4, embed_dim=8, depths=(1, 1), heads=(2, 2),
            window_size=4, shift_size=2, seq_layers=2, seq_heads=2, init="fan_in",
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) in creation order."""
    out = []

    def linear(name, n_in, n_out, bias=True):
        out.append((f"{name}.w", (n_in, n_out), "normal"))
        if bias:
            out.append((f"{name}.b", (n_out,), "zeros"))

    def norm(name, n):
        out.append((f"{name}.g", (n,), "ones"))
        out.append((f"{name}.b", (n,), "zeros"))

    def block(prefix, dim, heads, ratio, window=None):
        norm(f"{prefix}.norm1", dim)
        linear(f"{prefix}.qkv", dim, 3 * dim)
        linear(f"{prefix}.proj", dim, dim)
        if window is not None:
            out.append((f"{prefix}.rpb", ((2 * window - 1) ** 2, heads), "zeros"))
        norm(f"{prefix}.norm2", dim)
        hidden = int(dim * ratio)
        linear(f"{prefix}.fc1", dim, hidden)
        linear(f"{prefix}.fc2", hidden, dim)

    p = cfg.patch_size
    linear("patch", 3 * p * p, cfg.embed_dim)
    norm("patch.norm", cfg.embed_dim)
    for s, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        window, _ = cfg.stage_window(s)
        for j in range(depth):
            block(f"stage{s}.block{j}", cfg.dim(s), heads, cfg.mlp_ratio, window)
        if s < cfg.num_stages - 1:
            norm(f"stage{s}.merge.norm", 4 * cfg.dim(s))
            linear(f"stage{s}.merge", 4 * cfg.dim(s), 2 * cfg.dim(s), bias=False)
    d = cfg.feature_dim
    norm("norm", d)
    linear("head1", d, cfg.head_outputs)
    if cfg.use_inter:
        out.append(("seq.pos", (cfg.max_slices, d), "normal"))
        for layer in range(cfg.seq_layers):
            block(f"seq.layer{layer}", d, cfg.seq_heads, cfg.seq_mlp_ratio)
    linear("head2", d, cfg.head_outputs)
    return out


def param_count(cfg: ModelConfig, prefix_filter=None) -> int:
    total = 0
    for name, shape, _ in _param_shapes(cfg):
        if prefix_filter is None or prefix_filter(name):
            total += int(np.prod(shape))
    return total


def is_intra_param(name: str) -> bool:
    return name.startswith(("patch", "stage", "norm."))


class Model:
    """Configuration plus named learnable parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for name, shape, init in _param_shapes(config):
            if params is not None:
                value = np.asarray(params[name], dtype=np.float64)
                if value.shape != shape:
                    raise ConfigError(f"parameter {name}: shape {value.shape}, expected {shape}")
            elif init == "normal":
                std = 0.02
                if config.init == "fan_in" and name.endswith(".w"):
                    std = 1.0 / np.sqrt(shape[0])
                value = _trunc_normal(rng, shape, std)
            elif init == "ones":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            self.params[name] = Tensor(value.copy(), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def num_intra_params(self) -> int:
        """Parameters of the slice encoder alone (patch embedding through the final norm)."""
        return sum(p.data.size for n, p in self.params.items() if is_intra_param(n))

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data = np.array(state[n], dtype=np.float64, copy=True)
            p.grad = None

    def copy(self) -> "Model":
        return Model(self.config, params=self.state())

    def view(self, prefix: str) -> dict[str, Tensor]:
        k = len(prefix) + 1
        return {n[k:]: p for n, p in self.params.items() if n.startswith(prefix + ".")}


# building blocks ------------------------------------------------------------------

def linear(x: Tensor, p: dict, name: str) -> Tensor:
    y = ad.matmul(x, p[f"{name}.w"])
    b = p.get(f"{name}.b")
    return y + b if b is not None else y


def patch_embed(images, model: Model) -> Tensor:
    """(N, 3, h, w) images -> (N, h/p, w/p, C) token grid."""
    cfg = model.config
    x = ad.as_tensor(images)
    n, c, h, w = x.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, h // p, w // p, c * p * p)
    x = linear(x, model.params, "patch")
    return ad.layer_norm(x, model["patch.norm.g"], model["patch.norm.b"], cfg.ln_eps)


def window_partition(tokens, window: int, shift: int = 0) -> Tensor:
    """(B, H, W, C) -> (B * nW, window*window, C) after a cyclic shift by ``-shift``."""
    x = ad.as_tensor(tokens)
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ConfigError(f"grid {h}x{w} not divisible by window {window}")
    if shift:
        x = ad.roll(x, (-shift, -shift), (1, 2))
    x = x.reshape(b, h // window, window, w // window, window, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // window) * (w // window), window * window, c)


def window_merge(groups, window: int, shift: int, height: int, width: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    x = ad.as_tensor(groups)
    if height % window or width % window:
        raise ConfigError(f"grid {height}x{width} not divisible by window {window}")
    nh, nw = height // window, width // window
    c = x.shape[-1]
    b = x.shape[0] // (nh * nw)
    x = x.reshape(b, nh, nw, window, window, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, height, width, c)
    if shift:
        x = ad.roll(x, (shift, shift), (1, 2))
    return x


@functools.lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


@functools.lru_cache(maxsize=None)
def shift_mask(height: int, width: int, window: int, shift: int) -> np.ndarray | None:
    """(nW, L, L) additive mask: -inf between tokens from different pre-shift regions."""
    if shift == 0:
        return None
    region = np.zeros((1, height, width, 1))
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[:, hs, ws, :] = label
            label += 1
    groups = window_partition(region, window).data[..., 0]
    same = groups[:, :, None] == groups[:, None, :]
    mask = np.where(same, 0.0, -np.inf)
    mask.setflags(write=False)
    return mask


def attention(x: Tensor, p: dict, heads: int, bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over (B, L, C)."""
    b, length, c = x.shape
    d = c // heads
    qkv = linear(x, p, "qkv").reshape(b, length, 3, heads, d).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q * (d ** -0.5), k.swapaxes(-1, -2))
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        nw = mask.shape[0]
        scores = (scores.reshape(b // nw, nw, heads, length, length) + mask[None, :, None]).reshape(
            b, heads, length, length
        )
    out = ad.matmul(ad.softmax(scores, -1), v).transpose(0, 2, 1, 3).reshape(b, length, c)
    return linear(out, p, "proj")


def window_attention(groups, p: dict, heads: int, window: int, mask: np.ndarray | None = None) -> Tensor:
    """Attention inside each window group with a learned relative position bias."""
    x = ad.as_tensor(groups)
    length = window * window
    bias = ad.take(p["rpb"], relative_position_index(window).reshape(-1))
    bias = bias.reshape(length, length, heads).transpose(2, 0, 1)
    return attention(x, p, heads, bias, mask)


def mlp(x: Tensor, p: dict) -> Tensor:
    return linear(ad.gelu(linear(x, p, "fc1")), p, "fc2")


def transformer_block(x: Tensor, p: dict, norm: str, mixer, eps: float = 1e-5) -> Tensor:
    """Residual attention + MLP block; ``mixer`` maps (B, L, C) tokens to tokens."""

    def ln(t, name):
        return ad.layer_norm(t, p[f"{name}.g"], p[f"{name}.b"], eps)

    if norm == "pre":
        x = x + mixer(ln(x, "norm1"))
        return x + mlp(ln(x, "norm2"), p)
    x = ln(x + mixer(x), "norm1")
    return ln(x + mlp(x, p), "norm2")


def swin_block(x: Tensor, p: dict, cfg: ModelConfig, heads: int, window: int, shift: int) -> Tensor:
    """One block over a (B, H, W, C) grid."""
    b, h, w, c = x.shape
    mask = shift_mask(h, w, window, shift)

    def mixer(t):
        grid = t.reshape(b, h, w, c)
        groups = window_partition(grid, window, shift)
        out = window_attention(groups, p, heads, window, mask)
        return window_merge(out, window, shift, h, w).reshape(b, h * w, c)

    y = transformer_block(x.reshape(b, h * w, c), p, cfg.norm, mixer, cfg.ln_eps)
    return y.reshape(b, h, w, c)


def patch_merging(x: Tensor, p: dict, eps: float = 1e-5) -> Tensor:
    """(B, H, W, C) -> (B, H/2, W/2, 2C): concat 2x2 neighbours, norm, project."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"patch merging needs even extents, got {h}x{w}")
    # channel order of the concatenation: (0,0), (1,0), (0,1), (1,1)
    x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 4, 2, 5).reshape(b, h // 2, w // 2, 4 * c)
    x = ad.layer_norm(x, p["norm.g"], p["norm.b"], eps)
    return ad.matmul(x, p["w"])


def intra_forward(images, model: Model) -> tuple[Tensor, Tensor]:
    """Per-slice features (N, D) and auxiliary head logits."""
    cfg = model.config
    n, _, h, w = ad.as_tensor(images).shape
    if h != cfg.resolution or w != cfg.resolution:
        raise ConfigError(f"batch resolution {h}x{w} does not match model resolution {cfg.resolution}")
    x = patch_embed((ad.as_tensor(images) - cfg.input_mean) * (1.0 / cfg.input_std), model)
    for s, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        window, shift = cfg.stage_window(s)
        for j in range(depth):
            x = swin_block(x, model.view(f"stage{s}.block{j}"), cfg, heads, window, shift if j % 2 else 0)
        if s < cfg.num_stages - 1:
            x = patch_merging(x, model.view(f"stage{s}.merge"), cfg.ln_eps)
    x = ad.layer_norm(x, model["norm.g"], model["norm.b"], cfg.ln_eps)
    feats = x.reshape(n, -1, cfg.feature_dim).mean(axis=1)
    return feats, linear(feats, model.params, "head1")


def sequence_forward(features: Tensor, model: Model) -> tuple[Tensor, Tensor]:
    """Slice-sequence transformer; returns (N, D) outputs and main head logits."""
    cfg = model.config
    n, d = features.shape
    if not cfg.use_inter:
        return features, linear(features, model.params, "head2")
    if n > cfg.max_slices:
        raise ConfigError(f"{n} slices exceed the positional table ({cfg.max_slices})")
    x = (features + model["seq.pos"][:n]).reshape(1, n, d)
    for layer in range(cfg.seq_layers):
        p = model.view(f"seq.layer{layer}")
        # pre-norm so that zeroed attention/MLP weights leave a pure residual path
        x = transformer_block(x, p, "pre", lambda t, p=p: attention(t, p, cfg.seq_heads), cfg.ln_eps)
    x = x.reshape(n, d)
    return x, linear(x, model.params, "head2")


def _with_any(logits: Tensor, cfg: ModelConfig) -> Tensor:
    if not cfg.logical_any:
        return logits
    # sigmoid is monotone, so the max logit is the logit of the max probability
    return ad.concat([logits, logits.max(axis=-1).reshape(-1, 1)], axis=-1)


@dataclass
class LogitsPair:
    aux: Tensor
    main: Tensor


def forward(images, model: Model) -> LogitsPair:
    feats, aux = intra_forward(images, model)
    _, main = sequence_forward(feats, model)
    return LogitsPair(_with_any(aux, model.config), _with_any(main, model.config))


def predict(images, model: Model) -> np.ndarray:
    """(N, 6) probabilities from classification head 2."""
    with ad.no_grad():
        feats, _ = intra_forward(images, model)
        _, main = sequence_forward(feats, model)
    probs = ad._sigmoid(main.data)
    if model.config.logical_any:
        probs = np.concatenate([probs, probs.max(axis=1, keepdims=True)], axis=1)
    return probs


def logical_any(subtype_probs) -> np.ndarray:
    """P(any) as the max over the five subtype probabilities."""
    p = np.asarray(subtype_probs, dtype=np.float64)
    if p.shape[-1] != 5:
        raise ValueError(f"expected five subtype probabilities, got {p.shape[-1]}")
    return p.max(axis=-1)


# checkpoints ----------------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config_value(field_type, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"bad boolean {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None:
        return None if raw in ("", "none", "None") else raw
    return raw


def config_from_mapping(cls, mapping: dict[str, str]):
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name in mapping:
            kwargs[f.name] = parse_config_value(f.type, mapping[f.name], getattr(defaults, f.name))
    return cls(**kwargs)


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Text header (format version, config as key: value) followed by named float64 blocks.

    Each block is one line ``<name> <d1>x<d2>... <nbytes>`` and then the
    little-endian payload.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines += [f"{k}: {_format_value(v)}" for k, v in model.config.to_dict().items()]
    lines.append(f"num_params: {len(model.params)}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode())
        for name, p in model.params.items():
            payload = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            shape = "x".join(str(s) for s in p.shape)
            fh.write(f"{name} {shape} {len(payload)}\n".encode())
            fh.write(payload)


def load_checkpoint(path: str | Path) -> Model:
    blob = Path(path).read_bytes()
    head, sep, body = blob.partition(b"\n\n")
    if not sep:
        raise ConfigError(f"{path}: missing header terminator")
    lines = head.decode().splitlines()
    magic, _, version = lines[0].partition(" ")
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    meta = dict(line.split(": ", 1) if ": " in line else (line.rstrip(":"), "") for line in lines[1:])
    count = int(meta.pop("num_params"))
    config = config_from_mapping(ModelConfig, meta)
    params = {}
    pos = 0
    for _ in range(count):
        end = body.index(b"\n", pos)
        name, shape_s, nbytes = body[pos:end].decode().split(" ")
        shape = tuple(int(s) for s in shape_s.split("x"))
        nbytes = int(nbytes)
        if nbytes != 8 * int(np.prod(shape)):
            raise ConfigError(f"{path}: block {name} has {nbytes} bytes for shape {shape}")
        params[name] = np.frombuffer(body[end + 1:end + 1 + nbytes], dtype="<f8").reshape(shape)
        pos = end + 1 + nbytes
    expected = [n for n, _, _ in _param_shapes(config)]
    missing = [n for n in expected if n not in params]
    extra = [n for n in params if n not in expected]
    if missing or extra:
        raise ConfigError(f"{path}: missing blocks {missing[:3]}, unexpected blocks {extra[:3]}")
    return Model(config, params=params)


__all__ = [
    "ConfigError",
    "LogitsPair",
    "Model",
    "ModelConfig",
    "attention",
    "forward",
    "intra_forward",
    "load_checkpoint",
    "logical_any",
    "param_count",
    "patch_embed",
    "patch_merging",
    "predict",
    "save_checkpoint",
    "sequence_forward",
    "shift_mask",
    "transformer_block",
    "window_attention",
    "window_merge",
    "window_partition",
]
