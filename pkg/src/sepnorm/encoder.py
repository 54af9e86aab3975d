"""Toy vision-transformer encoder with a [CLS] slot at position 0."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .norm import BatchNormParams, NormScheme, NormSite, apply_norm


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 16
    patch_side: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    norm_scheme: NormScheme = field(default_factory=lambda: NormScheme.share("ln"))
    seed: int = 0
    bn_momentum: float = 0.1

    def __post_init__(self):
        if isinstance(self.norm_scheme, str):
            object.__setattr__(self, "norm_scheme", NormScheme.parse(self.norm_scheme))
        if self.patch_side <= 0 or self.image_side % self.patch_side:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm_scheme"] = str(self.norm_scheme)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        return cls(**d)


# ---------------------------------------------------------------- patches

def patchify(image: np.ndarray, patch_side: int) -> np.ndarray:
    """[..., H, W] -> [..., L, p*p], patches and their pixels both row-major."""
    image = np.asarray(image)
    *lead, h, w = image.shape
    if h != w or h % patch_side:
        raise ConfigError(f"image {h}x{w} cannot be cut into {patch_side}x{patch_side} patches")
    g = h // patch_side
    x = image.reshape(*lead, g, patch_side, g, patch_side)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # [..., gy, gx, py, px]
    return x.reshape(*lead, g * g, patch_side * patch_side)


def unpatchify(patches: np.ndarray, patch_side: int) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, L, _ = patches.shape
    g = math.isqrt(L)
    n = len(lead)
    x = patches.reshape(*lead, g, g, patch_side, patch_side)
    x = np.moveaxis(x, n + 1, n + 2)
    return x.reshape(*lead, g * patch_side, g * patch_side)


# ---------------------------------------------------------------- init helpers

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations, by redraw."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


# ---------------------------------------------------------------- blocks

class Transformer:
    """Parameter bookkeeping shared by the encoder and the reconstruction decoder."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.sites: dict[str, NormSite] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _add_block(self, rng, prefix: str, dim: int, hidden: int, scheme: NormScheme, momentum: float):
        self.sites[f"{prefix}.norm1"] = NormSite.init(scheme, dim, momentum)
        for n in ("q", "k", "v", "o"):
            self._param(f"{prefix}.attn.w{n}", trunc_normal(rng, (dim, dim)))
            self._param(f"{prefix}.attn.b{n}", np.zeros(dim))
        self.sites[f"{prefix}.norm2"] = NormSite.init(scheme, dim, momentum)
        self._param(f"{prefix}.mlp.w1", trunc_normal(rng, (dim, hidden)))
        self._param(f"{prefix}.mlp.b1", np.zeros(hidden))
        self._param(f"{prefix}.mlp.w2", trunc_normal(rng, (hidden, dim)))
        self._param(f"{prefix}.mlp.b2", np.zeros(dim))

    def block_params(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        out = {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}
        out["norm1"] = self.sites[f"{prefix}.norm1"]
        out["norm2"] = self.sites[f"{prefix}.norm2"]
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors, including every norm affine pair."""
        out = dict(self.params)
        for site_name, site in self.sites.items():
            for tag, p in zip(("g1", "g2"), site.param_sets()):
                out[f"{site_name}.{tag}.gamma"] = p.gamma
                out[f"{site_name}.{tag}.beta"] = p.beta
        return out

    def buffers(self) -> dict[str, tuple[BatchNormParams, str]]:
        """BN running statistics, keyed by flat name."""
        out = {}
        for site_name, site in self.sites.items():
            for tag, p in zip(("g1", "g2"), site.param_sets()):
                if isinstance(p, BatchNormParams):
                    out[f"{site_name}.{tag}.running_mean"] = (p, "running_mean")
                    out[f"{site_name}.{tag}.running_var"] = (p, "running_var")
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def train(self) -> None:
        for s in self.sites.values():
            s.set_mode("train")

    def eval(self) -> None:
        for s in self.sites.values():
            s.set_mode("eval")

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def attention(x: Tensor, p: dict, heads: int) -> Tensor:
    """Multi-head softmax self-attention over [B, S, d]."""
    B, S, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(B, S, heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, p["attn.wq"], p["attn.bq"]))
    k = split(_linear(x, p["attn.wk"], p["attn.bk"]))
    v = split(_linear(x, p["attn.wv"], p["attn.bv"]))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    mixed = ad.softmax(scores, axis=-1) @ v
    merged = mixed.transpose(0, 2, 1, 3).reshape(B, S, d)
    return _linear(merged, p["attn.wo"], p["attn.bo"])


def mlp(x: Tensor, p: dict) -> Tensor:
    return _linear(ad.gelu(_linear(x, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])


def attention_block(H: Tensor, p: dict, heads: int) -> Tensor:
    """Pre-norm residual block; ``p`` carries the weights plus ``norm1``/``norm2`` sites."""
    if H.ndim != 3 or H.shape[1] < 2:
        raise DimensionError(f"attention_block expects [B, S>=2, d], got {H.shape}")
    H = H + attention(apply_norm(H, p["norm1"]), p, heads)
    return H + mlp(apply_norm(H, p["norm2"]), p)


# ---------------------------------------------------------------- encoder

class Encoder(Transformer):
    def __init__(self, cfg: EncoderConfig, allow_zero_depth: bool = False):
        super().__init__()
        if cfg.depth < 1 and not allow_zero_depth:
            raise ConfigError("depth must be >= 1")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, L = cfg.dim, cfg.num_patches
        self._param("patch.w", trunc_normal(rng, (cfg.patch_dim, d)))
        self._param("patch.b", np.zeros(d))
        self._param("cls", trunc_normal(rng, (d,)))
        self._param("pos", trunc_normal(rng, (L + 1, d)))
        for i in range(cfg.depth):
            self._add_block(rng, f"blocks.{i}", d, cfg.mlp_hidden, cfg.norm_scheme, cfg.bn_momentum)
        self.sites["final_norm"] = NormSite.init(cfg.norm_scheme, d, cfg.bn_momentum)

    def embed(self, images: np.ndarray, kept: np.ndarray | None = None) -> Tensor:
        """Patch + position embeddings with [CLS] prepended: [B, K+1, d]."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3 or images.shape[1:] != (cfg.image_side, cfg.image_side):
            raise DimensionError(f"expected [B, {cfg.image_side}, {cfg.image_side}] images, got {images.shape}")
        B = images.shape[0]
        patches = patchify(images, cfg.patch_side)
        if kept is None:
            kept = np.broadcast_to(np.arange(cfg.num_patches), (B, cfg.num_patches))
        kept = np.asarray(kept, dtype=np.int64)
        if kept.ndim != 2 or kept.shape[0] != B:
            raise DimensionError(f"kept indices {kept.shape} do not match batch {B}")
        if kept.shape[1] == 0:
            raise ContractError("kept token set is empty")
        rows = np.arange(B)[:, None]
        tokens = Tensor(patches[rows, kept]) @ self.params["patch.w"] + self.params["patch.b"]
        tokens = tokens + ad.lookup(self.params["pos"], kept + 1)
        cls = (self.params["cls"] + self.params["pos"][0]).reshape(1, 1, cfg.dim)
        return ad.concat([ad.broadcast_to(cls, (B, 1, cfg.dim)), tokens], axis=1)

    def forward(self, images: np.ndarray, kept: np.ndarray | None = None) -> Tensor:
        h = self.embed(images, kept)
        for i in range(self.cfg.depth):
            h = attention_block(h, self.block_params(f"blocks.{i}"), self.cfg.heads)
        return apply_norm(h, self.sites["final_norm"])

    def encode(self, images: np.ndarray, kept: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Returns ([CLS] embeddings [B, d], token embeddings [B, K, d])."""
        out = self.forward(images, kept)
        return out[:, 0, :], out[:, 1:, :]

    def encode_numpy(self, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode, unmasked embeddings for a whole split, as plain arrays."""
        self.eval()
        cls_parts, tok_parts = [], []
        for start in range(0, len(images), batch_size):
            c, t = self.encode(images[start:start + batch_size])
            cls_parts.append(c.data)
            tok_parts.append(t.data)
        return np.concatenate(cls_parts), np.concatenate(tok_parts)
