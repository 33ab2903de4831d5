"""Objectives tying the two encoders together.

Three branches share one pair of encoder forward passes per batch:

  alignment   projection heads to a shared unit sphere, symmetric InfoNCE
              over in-batch pairs, inverse temperature multiplying the
              cosine logits
  retention   masked-token reconstruction per modality: masked rows are
              replaced by a learnable mask token, a two-block transformer
              rebuilds them, MSE against detached encoder outputs at the
              masked positions only
  style       per-modality diagonal Gaussians over a style space pulled
              toward the standard normal, plus bidirectional KL between
              the two modalities' soft assignments to shared unit-norm
              cluster centers

The total is the weighted sum; weights of zero skip the branch.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_model import ValidationError
from .encoders import (
    ModelConfig,
    RnaEncoder,
    SlideEncoder,
    TransformerBlock,
    init_linear_,
    init_token_,
)

logger = logging.getLogger(__name__)

LOG_VAR_CLAMP = 10.0
PROB_FLOOR = 1e-8


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a mixed tuple; independent of hash salting."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


class AlignmentHead(nn.Module):
    """Two-layer perceptron into the shared space, output L2-normalized."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, dim)

    def init_weights(self, gen: torch.Generator) -> None:
        init_linear_(self.fc1, gen)
        init_linear_(self.fc2, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.fc2(self.act(self.fc1(x))), dim=-1, eps=1e-12)


class RetentionDecoder(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int, depth: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, n_heads, mlp_ratio) for _ in range(depth)
        )

    def init_weights(self, gen: torch.Generator) -> None:
        for block in self.blocks:
            block.init_weights(gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x, _ = block(x)
        return x


def info_nce(s_emb: torch.Tensor, t_emb: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE with logits tau * (s . t) over unit embeddings."""
    b = s_emb.shape[0]
    if b < 2:
        raise ValidationError("contrastive loss needs a batch of at least 2")
    if tau <= 0:
        raise ValidationError("tau must be positive")
    logits = tau * (s_emb @ t_emb.transpose(0, 1))
    target = torch.arange(b, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def alignment_loss(
    slide_summary: torch.Tensor,
    rna_vec: torch.Tensor,
    slide_head: AlignmentHead,
    rna_head: AlignmentHead,
    tau: float,
) -> torch.Tensor:
    return info_nce(slide_head(slide_summary), rna_head(rna_vec), tau)


def mask_select(n_tokens: int, ratio: float, seed: int) -> np.ndarray:
    """Boolean mask with exactly max(1, round(ratio * n_tokens)) true entries,
    half-up rounding, drawn uniformly; deterministic per seed."""
    if n_tokens < 2:
        raise ValidationError("masking needs at least 2 tokens")
    if not 0 < ratio < 1:
        raise ValidationError("mask ratio must be in (0, 1)")
    count = max(1, int(np.floor(ratio * n_tokens + 0.5)))
    rng = np.random.default_rng(seed)
    mask = np.zeros(n_tokens, dtype=bool)
    mask[rng.choice(n_tokens, size=count, replace=False)] = True
    return mask


def _masked_mse(
    tokens: torch.Tensor,
    mask_token: torch.Tensor,
    decoder: RetentionDecoder,
    masks: np.ndarray,
    target: torch.Tensor | None,
) -> torch.Tensor:
    """Per-sample mean squared reconstruction error at masked positions,
    averaged over the batch. Targets carry no gradient."""
    counts = masks.sum(axis=1)
    if (counts >= masks.shape[1]).any():
        raise ValidationError("mask covers every token of a sample")
    if (counts == 0).all():
        return tokens.new_zeros(())
    mask_t = torch.from_numpy(masks)
    corrupted = torch.where(mask_t.unsqueeze(-1), mask_token, tokens)
    rebuilt = decoder(corrupted)
    if target is None:
        target = tokens.detach()
    sq = ((rebuilt - target) ** 2).mean(dim=-1)
    per_sample = (sq * mask_t).sum(dim=1) / torch.from_numpy(counts).clamp(min=1)
    return per_sample.mean()


def retention_loss(
    slide_tokens: torch.Tensor,
    rna_tokens: torch.Tensor,
    slide_mask_token: torch.Tensor,
    rna_mask_token: torch.Tensor,
    slide_decoder: RetentionDecoder,
    rna_decoder: RetentionDecoder,
    ratio_slide: float,
    ratio_rna: float,
    seed: int,
    masks_slide: np.ndarray | None = None,
    masks_rna: np.ndarray | None = None,
    targets: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Two-modality average of masked-token reconstruction errors. Masks are
    drawn per sample from the seed unless given explicitly.

    Reconstruction targets default to the detached input tokens. Explicit
    targets exist for finite-difference gradient checks, which must hold the
    target fixed while parameters are perturbed; autograd treats the default
    as a constant already, so both paths agree at the unperturbed point.
    """
    b, n_s, _ = slide_tokens.shape
    n_t = rna_tokens.shape[1]
    if masks_slide is None:
        masks_slide = np.stack(
            [mask_select(n_s, ratio_slide, derive_seed(seed, "mask-slide", i)) for i in range(b)]
        )
    if masks_rna is None:
        masks_rna = np.stack(
            [mask_select(n_t, ratio_rna, derive_seed(seed, "mask-rna", i)) for i in range(b)]
        )
    target_slide, target_rna = targets if targets is not None else (None, None)
    loss_slide = _masked_mse(
        slide_tokens, slide_mask_token, slide_decoder, masks_slide, target_slide
    )
    loss_rna = _masked_mse(rna_tokens, rna_mask_token, rna_decoder, masks_rna, target_rna)
    return 0.5 * (loss_slide + loss_rna)


def style_kl(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag(exp(log_var))) || N(0, I) ), summed over dimensions,
    averaged over the batch."""
    term = mu**2 + torch.exp(log_var) - log_var - 1.0
    return 0.5 * term.sum(dim=-1).mean()


def cluster_assign(z: torch.Tensor, centers: torch.Tensor, kappa: float) -> torch.Tensor:
    """Soft assignment: softmax over centers of kappa * cosine(z, center)."""
    if kappa <= 0:
        raise ValidationError("kappa must be positive")
    norms = z.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        logger.warning("zero-norm style vector: falling back to uniform assignment")
    z_unit = z / torch.where(norms == 0, torch.ones_like(norms), norms)
    c_unit = F.normalize(centers, dim=-1, eps=1e-12)
    return torch.softmax(kappa * (z_unit @ c_unit.T), dim=-1)


def cluster_consistency_loss(assign_s: torch.Tensor, assign_t: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of KL(S||T) + KL(T||S), probabilities floored
    before the logarithms."""
    log_s = torch.log(assign_s.clamp(min=PROB_FLOOR))
    log_t = torch.log(assign_t.clamp(min=PROB_FLOOR))
    kl_st = (assign_s * (log_s - log_t)).sum(dim=-1)
    kl_ts = (assign_t * (log_t - log_s)).sum(dim=-1)
    return (kl_st + kl_ts).mean()


@dataclass
class EncoderOutputs:
    slide_tokens: torch.Tensor  # (b, n, d_model)
    slide_summary: torch.Tensor  # (b, d_model)
    rna_vec: torch.Tensor  # (b, d_model)
    rna_tokens: torch.Tensor  # (b, g_t, d_t)
    slide_attention: torch.Tensor  # (b, heads, n)


@dataclass
class LossBreakdown:
    l_align: torch.Tensor
    l_retention: torch.Tensor
    l_style: torch.Tensor
    l_cluster: torch.Tensor
    l_total: torch.Tensor
    lambda_align: float
    lambda_retention: float
    lambda_style: float

    def floats(self) -> dict[str, float]:
        return {
            "l_align": float(self.l_align.detach()),
            "l_retention": float(self.l_retention.detach()),
            "l_style": float(self.l_style.detach()),
            "l_cluster": float(self.l_cluster.detach()),
            "l_total": float(self.l_total.detach()),
        }


def weighted_total(
    l_align: torch.Tensor,
    l_retention: torch.Tensor,
    l_style: torch.Tensor,
    l_cluster: torch.Tensor,
    lambda_align: float,
    lambda_retention: float,
    lambda_style: float,
) -> torch.Tensor:
    return (
        lambda_align * l_align
        + lambda_retention * l_retention
        + lambda_style * (l_style + l_cluster)
    )


class PretrainModel(nn.Module):
    """Both encoders plus every objective head, with deterministic init."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.slide_encoder = SlideEncoder(cfg)
        self.rna_encoder = RnaEncoder(cfg)
        self.align_slide = AlignmentHead(cfg.d_model)
        self.align_rna = AlignmentHead(cfg.d_model)
        self.slide_mask_token = nn.Parameter(torch.zeros(cfg.d_model))
        self.rna_mask_token = nn.Parameter(torch.zeros(cfg.d_t))
        self.slide_decoder = RetentionDecoder(cfg.d_model, cfg.n_heads, cfg.mlp_ratio)
        self.rna_decoder = RetentionDecoder(cfg.d_t, cfg.n_heads, cfg.mlp_ratio)
        self.style_slide = nn.Linear(cfg.d_model, 2 * cfg.d_z)
        self.style_rna = nn.Linear(cfg.d_model, 2 * cfg.d_z)
        self.centers = nn.Parameter(torch.zeros(cfg.n_clusters, cfg.d_z))

    def init_weights(self, gen: torch.Generator) -> None:
        self.slide_encoder.init_weights(gen)
        self.rna_encoder.init_weights(gen)
        self.align_slide.init_weights(gen)
        self.align_rna.init_weights(gen)
        init_token_(self.slide_mask_token, gen)
        init_token_(self.rna_mask_token, gen)
        self.slide_decoder.init_weights(gen)
        self.rna_decoder.init_weights(gen)
        init_linear_(self.style_slide, gen)
        init_linear_(self.style_rna, gen)
        self.centers.data.normal_(0.0, 1.0, generator=gen)
        self.renormalize_centers()

    @torch.no_grad()
    def renormalize_centers(self) -> None:
        norms = self.centers.data.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        # Rows already on the sphere are left untouched so the projection is
        # idempotent in floating point; a zero-length optimizer step must
        # leave every parameter bitwise unchanged.
        needs = (norms - 1.0).abs() > 1e-7
        self.centers.data = torch.where(needs, self.centers.data / norms, self.centers.data)

    def forward_encoders(self, bags: torch.Tensor, expr: torch.Tensor) -> EncoderOutputs:
        slide_tokens, slide_summary, attn = self.slide_encoder(bags)
        rna_vec, rna_tokens = self.rna_encoder(expr)
        return EncoderOutputs(slide_tokens, slide_summary, rna_vec, rna_tokens, attn)

    def style_params(self, x: torch.Tensor, which: str) -> tuple[torch.Tensor, torch.Tensor]:
        head = self.style_slide if which == "slide" else self.style_rna
        mu, log_var = head(x).chunk(2, dim=-1)
        return mu, log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)

    def style_z(
        self, x: torch.Tensor, which: str, seed: int, training: bool
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        mu, log_var = self.style_params(x, which)
        if not training:
            return mu, mu, log_var
        gen = torch.Generator().manual_seed(derive_seed(seed, "style", which))
        eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
        return mu + torch.exp(0.5 * log_var) * eps, mu, log_var


def total_loss(
    model: PretrainModel,
    bags: torch.Tensor,
    expr: torch.Tensor,
    *,
    lambda_align: float = 1.0,
    lambda_retention: float = 1.0,
    lambda_style: float = 1.0,
    tau: float = 10.0,
    kappa: float = 5.0,
    mask_ratio_slide: float = 0.25,
    mask_ratio_rna: float = 0.25,
    seed: int = 0,
    training: bool = True,
    retention_targets: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> LossBreakdown:
    """One encoder pass feeding every active branch. Pure given
    (parameters, batch, seed, training flag)."""
    out = model.forward_encoders(bags, expr)
    zero = bags.new_zeros(())

    l_align = zero
    if lambda_align:
        l_align = alignment_loss(
            out.slide_summary, out.rna_vec, model.align_slide, model.align_rna, tau
        )

    l_retention = zero
    if lambda_retention:
        l_retention = retention_loss(
            out.slide_tokens,
            out.rna_tokens,
            model.slide_mask_token,
            model.rna_mask_token,
            model.slide_decoder,
            model.rna_decoder,
            mask_ratio_slide,
            mask_ratio_rna,
            seed,
            targets=retention_targets,
        )

    l_style = zero
    l_cluster = zero
    if lambda_style:
        z_s, mu_s, log_var_s = model.style_z(out.slide_summary, "slide", seed, training)
        z_t, mu_t, log_var_t = model.style_z(out.rna_vec, "rna", seed, training)
        l_style = style_kl(mu_s, log_var_s) + style_kl(mu_t, log_var_t)
        assign_s = cluster_assign(z_s, model.centers, kappa)
        assign_t = cluster_assign(z_t, model.centers, kappa)
        l_cluster = cluster_consistency_loss(assign_s, assign_t)

    l_total = weighted_total(
        l_align, l_retention, l_style, l_cluster,
        lambda_align, lambda_retention, lambda_style,
    )
    return LossBreakdown(
        l_align=l_align,
        l_retention=l_retention,
        l_style=l_style,
        l_cluster=l_cluster,
        l_total=l_total,
        lambda_align=lambda_align,
        lambda_retention=lambda_retention,
        lambda_style=lambda_style,
    )


def build_pretrain_model(
    cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32
) -> PretrainModel:
    gen = torch.Generator().manual_seed(seed)
    model = PretrainModel(cfg).to(dtype)
    model.init_weights(gen)
    return model
