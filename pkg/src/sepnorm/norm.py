"""Layer norm, batch norm and the shared/separate [CLS] normalization schemes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

Kind = Literal["ln", "bn"]
KINDS = ("ln", "bn")
EPS = 1e-5


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = EPS

    @classmethod
    def init(cls, dim: int, eps: float = EPS) -> LayerNormParams:
        return cls(Tensor(np.ones(dim), requires_grad=True),
                   Tensor(np.zeros(dim), requires_grad=True), eps)

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise DimensionError(f"gamma {self.gamma.shape} / beta {self.beta.shape} must be equal 1-d")
        if self.eps < 0:
            raise ContractError("eps must be non-negative")


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = EPS
    mode: Literal["train", "eval"] = "train"

    @classmethod
    def init(cls, dim: int, momentum: float = 0.1, eps: float = EPS) -> BatchNormParams:
        return cls(Tensor(np.ones(dim), requires_grad=True),
                   Tensor(np.zeros(dim), requires_grad=True),
                   np.zeros(dim), np.ones(dim), momentum, eps)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ContractError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {self.mode!r}")


def layer_norm(h: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize each position over its feature axis, then scale by gamma and shift by beta."""
    if h.shape[-1] != p.gamma.shape[0]:
        raise DimensionError(f"feature extent {h.shape[-1]} != parameter length {p.gamma.shape[0]}")
    mu = ad.reduce_mean(h, axis=-1, keepdims=True)
    var = ad.reduce_var(h, axis=-1, keepdims=True)
    normed = (h - mu) / ad.sqrt(var + p.eps)
    return normed * p.gamma + p.beta


def batch_norm(h: Tensor, p: BatchNormParams) -> Tensor:
    """Normalize [N, d] per feature across N.

    Train mode uses the biased statistics of the current batch (gradients flow
    through them) and then folds them into the running buffers by EMA. Eval mode
    uses only the running buffers, which start at mean 0 / var 1.
    """
    if h.ndim != 2 or h.shape[1] != p.gamma.shape[0]:
        raise DimensionError(f"batch_norm expects [N, {p.gamma.shape[0]}], got {h.shape}")
    if p.mode == "train":
        if h.shape[0] < 2:
            raise ContractError(f"train-mode batch norm needs at least 2 rows, got {h.shape[0]}")
        mu = ad.reduce_mean(h, axis=0, keepdims=True)
        var = ad.reduce_var(h, axis=0, keepdims=True)
        normed = (h - mu) / ad.sqrt(var + p.eps)
        m = p.momentum
        p.running_mean = (1 - m) * p.running_mean + m * mu.data[0]
        p.running_var = (1 - m) * p.running_var + m * var.data[0]
    else:
        normed = (h - p.running_mean) / np.sqrt(p.running_var + p.eps)
    return normed * p.gamma + p.beta


def _make(kind: str, dim: int, momentum: float):
    if kind == "ln":
        return LayerNormParams.init(dim)
    if kind == "bn":
        return BatchNormParams.init(dim, momentum=momentum)
    raise ValueError(f"unknown norm kind {kind!r}")


def _apply_one(x: Tensor, params) -> Tensor:
    if isinstance(params, LayerNormParams):
        return layer_norm(x, params)
    shape = x.shape
    return batch_norm(x.reshape(-1, shape[-1]), params).reshape(shape)


@dataclass(frozen=True)
class NormScheme:
    """Which normalizer handles the [CLS] slot and which handles the tokens.

    ``ShareNorm(kind)`` keeps a single parameter set for every position;
    ``SepNorm(cls_kind, token_kind)`` keeps disjoint sets g1 (position 0) and
    g2 (positions 1..L).
    """
    variant: Literal["share", "sep"]
    cls_kind: str
    token_kind: str

    def __post_init__(self):
        if self.variant not in ("share", "sep"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.cls_kind not in KINDS or self.token_kind not in KINDS:
            raise ValueError(f"norm kinds must be in {KINDS}")
        if self.variant == "share" and self.cls_kind != self.token_kind:
            raise ValueError("ShareNorm uses one kind for every position")

    @classmethod
    def share(cls, kind: str) -> NormScheme:
        return cls("share", kind, kind)

    @classmethod
    def sep(cls, cls_kind: str, token_kind: str) -> NormScheme:
        return cls("sep", cls_kind, token_kind)

    @classmethod
    def parse(cls, text: str) -> NormScheme:
        """``share:ln``, ``share:bn``, ``sep:bn+ln`` and so on (case-insensitive)."""
        variant, _, kinds = text.strip().lower().partition(":")
        if variant == "share":
            return cls.share(kinds)
        if variant == "sep":
            c, _, t = kinds.partition("+")
            return cls.sep(c, t)
        raise ValueError(f"cannot parse norm scheme {text!r}")

    def __str__(self) -> str:
        if self.variant == "share":
            return f"share:{self.cls_kind}"
        return f"sep:{self.cls_kind}+{self.token_kind}"

    @property
    def label(self) -> str:
        return "ShareNorm" if self.variant == "share" else "SepNorm"


@dataclass
class NormSite:
    """Parameters of one normalization site in the network."""
    scheme: NormScheme
    g1: LayerNormParams | BatchNormParams
    g2: LayerNormParams | BatchNormParams | None = None

    @classmethod
    def init(cls, scheme: NormScheme, dim: int, momentum: float = 0.1) -> NormSite:
        g1 = _make(scheme.cls_kind, dim, momentum)
        g2 = _make(scheme.token_kind, dim, momentum) if scheme.variant == "sep" else None
        return cls(scheme, g1, g2)

    def param_sets(self) -> list:
        return [self.g1] if self.g2 is None else [self.g1, self.g2]

    def set_mode(self, mode: str) -> None:
        for p in self.param_sets():
            if isinstance(p, BatchNormParams):
                p.mode = mode


def apply_norm(H: Tensor, site: NormSite) -> Tensor:
    """Normalize a [B, L+1, d] sequence whose position 0 is [CLS]."""
    if H.ndim != 3:
        raise DimensionError(f"apply_norm expects [B, L+1, d], got {H.shape}")
    if H.shape[1] < 2:
        raise ContractError("sequence has no token positions to normalize")
    if site.g2 is None:
        return _apply_one(H, site.g1)
    cls_out = _apply_one(H[:, 0, :], site.g1)
    tok_out = _apply_one(H[:, 1:, :], site.g2)
    return ad.concat([cls_out.reshape(H.shape[0], 1, H.shape[2]), tok_out], axis=1)


def norm_param_grads_closed_form(normed: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Affine-parameter gradients from the pre-affine normalized features.

    ``normed`` and ``upstream`` are [L, d] (or any [..., d]); ``upstream`` is the
    gradient with respect to the affine output. Returns per-feature sums over
    every leading position.
    """
    normed = np.asarray(normed, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if normed.shape != upstream.shape:
        raise DimensionError(f"normed {normed.shape} and upstream {upstream.shape} differ")
    d = normed.shape[-1]
    u = upstream.reshape(-1, d)
    return (u * normed.reshape(-1, d)).sum(axis=0), u.sum(axis=0)
