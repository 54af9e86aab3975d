"""Masked reconstruction, uniformity, and their weighted combination."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .encoder import Encoder, EncoderConfig, Transformer, attention_block, patchify, trunc_normal
from .norm import NormScheme, NormSite, apply_norm

TARGETS = ("none", "cls", "token", "both")


@dataclass(frozen=True)
class ObjectiveConfig:
    mask_ratio: float = 0.75
    lam: float = 0.0
    uniformity_target: Literal["none", "cls", "token", "both"] = "none"
    decoder_depth: int = 2
    decoder_dim: int = 32
    decoder_heads: int = 4

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ContractError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.lam < 0:
            raise ContractError(f"lambda must be non-negative, got {self.lam}")
        if self.uniformity_target not in TARGETS:
            raise ContractError(f"uniformity_target must be one of {TARGETS}")
        if self.decoder_dim % self.decoder_heads:
            raise ContractError("decoder_dim must be divisible by decoder_heads")

    @property
    def active(self) -> bool:
        """True when the uniformity term contributes to the total."""
        return self.lam > 0 and self.uniformity_target != "none"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MaskPlan:
    kept: np.ndarray    # [B, K], ascending per row
    masked: np.ndarray  # [B, M], ascending per row

    @property
    def num_patches(self) -> int:
        return self.kept.shape[1] + self.masked.shape[1]


def num_masked(L: int, mask_ratio: float) -> int:
    return int(np.floor(mask_ratio * L + 0.5))


def sample_mask(L: int, mask_ratio: float, rng: np.random.Generator, batch: int = 1) -> MaskPlan:
    """Uniform random masked subset of size round(ratio*L), drawn independently per sequence."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ContractError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    m = num_masked(L, mask_ratio)
    if m >= L:
        raise ContractError(f"mask ratio {mask_ratio} would mask all {L} tokens")
    order = np.argsort(rng.random((batch, L)), axis=1, kind="stable")
    kept = np.sort(order[:, m:], axis=1)
    masked = np.sort(order[:, :m], axis=1)
    return MaskPlan(kept, masked)


class Decoder(Transformer):
    """Light reconstruction head; always ShareNorm(LN)."""

    def __init__(self, enc_cfg: EncoderConfig, obj: ObjectiveConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 1])
        d, dd, L = enc_cfg.dim, obj.decoder_dim, enc_cfg.num_patches
        self.heads = obj.decoder_heads
        self.depth = obj.decoder_depth
        self._param("embed.w", trunc_normal(rng, (d, dd)))
        self._param("embed.b", np.zeros(dd))
        self._param("mask_token", trunc_normal(rng, (dd,)))
        self._param("pos", trunc_normal(rng, (L + 1, dd)))
        ln = NormScheme.share("ln")
        for i in range(obj.decoder_depth):
            self._add_block(rng, f"blocks.{i}", dd, 2 * dd, ln, 0.1)
        self.sites["final_norm"] = NormSite.init(ln, dd)
        self._param("pred.w", trunc_normal(rng, (dd, enc_cfg.patch_dim)))
        self._param("pred.b", np.zeros(enc_cfg.patch_dim))

    def forward(self, cls: Tensor, tokens: Tensor, plan: MaskPlan) -> Tensor:
        """Predict every patch: [B, L, p*p]."""
        B, K, _ = tokens.shape
        M = plan.masked.shape[1]
        dd = self.params["embed.b"].shape[0]
        w, b = self.params["embed.w"], self.params["embed.b"]
        x_cls = (cls @ w + b).reshape(B, 1, dd)
        parts = [tokens @ w + b]
        if M:
            mt = self.params["mask_token"].reshape(1, 1, dd)
            parts.append(ad.broadcast_to(mt, (B, M, dd)))
        seq = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        restore = np.argsort(np.concatenate([plan.kept, plan.masked], axis=1), axis=1)
        seq = ad.take_rows(seq, restore)
        h = ad.concat([x_cls, seq], axis=1) + self.params["pos"]
        for i in range(self.depth):
            h = attention_block(h, self.block_params(f"blocks.{i}"), self.heads)
        h = apply_norm(h, self.sites["final_norm"])
        return h[:, 1:, :] @ self.params["pred.w"] + self.params["pred.b"]


def _forward(images, encoder: Encoder, decoder: Decoder, plan: MaskPlan):
    images = np.asarray(images, dtype=np.float64)
    L = encoder.cfg.num_patches
    if plan.num_patches != L or plan.kept.shape[0] != images.shape[0]:
        raise DimensionError(f"mask plan {plan.kept.shape}/{plan.masked.shape} does not fit "
                             f"{images.shape[0]} images of {L} patches")
    cls, tokens = encoder.encode(images, plan.kept)
    if plan.masked.shape[1] == 0:
        return Tensor(0.0), cls, tokens
    pred = decoder.forward(cls, tokens, plan)
    rows = np.arange(images.shape[0])[:, None]
    target = patchify(images, encoder.cfg.patch_side)[rows, plan.masked]
    diff = ad.take_rows(pred, plan.masked) - target
    return ad.reduce_mean(diff * diff), cls, tokens


def mae_loss(images, encoder: Encoder, decoder: Decoder, plan: MaskPlan) -> Tensor:
    """Mean squared pixel error over masked patches only (0 when nothing is masked)."""
    return _forward(images, encoder, decoder, plan)[0]


def uniformity_loss(emb: Tensor) -> Tensor:
    """log of the mean of exp(-2 |u_n - u_m|^2) over pairs n < m of unit-normalized rows."""
    emb = ad.as_tensor(emb)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ContractError(f"uniformity needs [N>=2, d] embeddings, got {emb.shape}")
    N = emb.shape[0]
    sq = ad.reduce_sum(emb * emb, axis=1, keepdims=True)
    if np.any(sq.data == 0):
        raise ContractError("uniformity input contains a zero-norm row")
    unit = emb / ad.sqrt(sq)
    gram = unit @ unit.transpose()
    diag = ad.reduce_sum(gram * np.eye(N), axis=1)
    d2 = (gram * -2.0 + diag.reshape(N, 1)) + diag.reshape(1, N)
    upper = np.triu(np.ones((N, N)), k=1)
    total = ad.reduce_sum(ad.exp(d2 * -2.0) * upper)
    return ad.log(total * (2.0 / (N * (N - 1))))


def u_mae_loss(images, encoder: Encoder, decoder: Decoder, cfg: ObjectiveConfig,
               plan: MaskPlan) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, l_mae, l_u) with total = l_mae + lam * l_u.

    ``l_u`` is the uniformity term of the configured target (summed over both
    terms for ``both``). With target ``none`` it is the [CLS] uniformity, which
    is reported but never added.
    """
    l_mae, cls, tokens = _forward(images, encoder, decoder, plan)
    target = cfg.uniformity_target
    if (target != "none" and cfg.lam > 0) and cls.shape[0] < 2:
        raise ContractError("a uniformity target needs at least 2 sequences per batch")
    B, K, d = tokens.shape
    if target in ("cls", "none"):
        l_u = uniformity_loss(cls) if B >= 2 else Tensor(0.0)
    elif target == "token":
        l_u = uniformity_loss(tokens.reshape(B * K, d))
    else:
        l_u = uniformity_loss(cls) + uniformity_loss(tokens.reshape(B * K, d))
    if not cfg.active:
        return l_mae, l_mae, l_u
    return l_mae + l_u * cfg.lam, l_mae, l_u
