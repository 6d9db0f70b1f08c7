"""Transformer reconstruction model with Laplace prior-attention.

The encoder is a stack of causal multi-head self-attention layers. Each layer
also carries a prior-attention matrix built from a Laplace kernel; the
symmetric KL divergence between the two (the association discrepancy) is part
of the training objective and of the detection score.

Everything runs in float64 on the CPU.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_VERSION = 1
KL_FLOOR = 1e-12
MAD_FLOOR = 1e-3


@dataclass
class ModelConfig:
    d: int
    d_model: int = 64
    H: int = 4
    L: int = 2
    T: int = 50
    lam: float = 3.0
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    mlp_hidden: int | None = None
    d_ff: int | None = None
    batch_size: int = 32
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = 2 * self.d_model
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model

    def validate(self) -> None:
        problems = []
        if self.d < 1:
            problems.append("d must be >= 1")
        if self.H < 1 or self.d_model % self.H:
            problems.append(f"d_model={self.d_model} is not divisible by H={self.H}")
        if self.L < 1:
            problems.append("L must be >= 1")
        if self.T < 2:
            problems.append("T must be >= 2")
        if self.lam < 0:
            problems.append("lambda must be >= 0")
        if not 0 <= self.val_fraction < 1:
            problems.append("val_fraction must lie in [0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))


def sinusoidal_encoding(T: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(T, dtype=DTYPE)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=DTYPE) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(T, d_model, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return pe


def causal_mask(T: int) -> torch.Tensor:
    """Additive mask with -inf strictly above the diagonal."""
    return torch.triu(torch.full((T, T), float("-inf"), dtype=DTYPE), diagonal=1)


def laplace_prior(scales, T: int | None = None) -> torch.Tensor:
    """Row-stochastic causal Laplace kernel matrix.

    Row t is proportional to exp(-|t - k| / scales[..., t]) over k <= t.
    Accepts a tensor or array of shape (..., T) and returns (..., T, T).
    """
    scales = torch.as_tensor(scales, dtype=DTYPE)
    if T is None:
        T = scales.shape[-1]
    if scales.shape[-1] != T:
        raise ValueError(f"expected {T} scales, got {scales.shape[-1]}")
    if not bool((scales > 0).all()):
        raise ValueError("Laplace scales must be positive")
    idx = torch.arange(T, dtype=DTYPE)
    dist = (idx[:, None] - idx[None, :]).abs()
    logits = -dist / scales[..., :, None] + causal_mask(T)
    return torch.softmax(logits, dim=-1)


def _kl_rows(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    p = p.clamp_min(KL_FLOOR)
    p = p / p.sum(-1, keepdim=True)
    q = q.clamp_min(KL_FLOOR)
    q = q / q.sum(-1, keepdim=True)
    return (p * (p.log() - q.log())).sum(-1)


def discrepancy(attn: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Layer-averaged symmetric KL between head-averaged attention and prior.

    ``attn`` is (..., L, H, T, T) and ``prior`` (..., L, T, T); returns (..., T).
    """
    s = attn.mean(dim=-3)
    d = _kl_rows(prior, s) + _kl_rows(s, prior)
    return d.mean(dim=-2).clamp_min(0.0)


def assoc_discrepancy(attn, prior) -> np.ndarray:
    """Numpy front end for :func:`discrepancy` that validates row normalization."""
    attn = torch.as_tensor(np.asarray(attn, dtype=float))
    prior = torch.as_tensor(np.asarray(prior, dtype=float))
    if attn.dim() == prior.dim():
        attn = attn.unsqueeze(-3)  # no head axis given
    if attn.shape[:-3] != prior.shape[:-2] or attn.shape[-2:] != prior.shape[-2:]:
        raise ValueError(f"shape mismatch: attention {tuple(attn.shape)} vs prior {tuple(prior.shape)}")
    for name, m in (("attention", attn), ("prior", prior)):
        dev = (m.sum(-1) - 1).abs().max().item()
        if dev > 1e-4 or bool((m < 0).any()):
            raise ValueError(f"{name} rows are not distributions (max row-sum deviation {dev:.2e})")
    return discrepancy(attn, prior).numpy()


def total_loss(x, x_hat, d_div, lam: float):
    """Squared Frobenius reconstruction error minus lam times the L1 norm of the discrepancy."""
    if torch.is_tensor(x) or torch.is_tensor(x_hat):
        if x.shape != x_hat.shape:
            raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        return ((x - x_hat) ** 2).sum() - lam * d_div.abs().sum()
    x, x_hat, d_div = (np.asarray(a, dtype=float) for a in (x, x_hat, d_div))
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(((x - x_hat) ** 2).sum() - lam * np.abs(d_div).sum())


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, H: int, d_ff: int):
        super().__init__()
        self.H = H
        d_head = d_model // H
        self.w_q = nn.Parameter(torch.empty(H, d_model, d_head, dtype=DTYPE))
        self.w_k = nn.Parameter(torch.empty(H, d_model, d_head, dtype=DTYPE))
        self.w_v = nn.Parameter(torch.empty(H, d_model, d_head, dtype=DTYPE))
        self.w_o = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.ff1 = nn.Linear(d_model, d_ff, dtype=DTYPE)
        self.ff2 = nn.Linear(d_ff, d_model, dtype=DTYPE)
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        # x: (B, T, d_model)
        d_model = x.shape[-1]
        q = torch.einsum("btm,hmk->bhtk", x, self.w_q)
        k = torch.einsum("btm,hmk->bhtk", x, self.w_k)
        v = torch.einsum("btm,hmk->bhtk", x, self.w_v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d_model) + mask
        attn = torch.softmax(scores, dim=-1)
        z = attn @ v  # (B, H, T, d_head)
        z = z.permute(0, 2, 1, 3).reshape(x.shape) @ self.w_o
        z = self.norm1(z + x)
        out = self.norm2(self.ff2(F.gelu(self.ff1(z))) + z)
        return out, attn


class ReconstructionModel(nn.Module):
    """Embedding, causal encoder stack with per-layer priors, and an MLP head.

    ``laplace_raw[0]`` holds softplus-parameterized scales of the first
    layer's prior. Deeper layers fit their scale to the previous layer's
    head-averaged attention (its mean absolute offset from the diagonal,
    without gradient) and multiply it by ``exp(laplace_raw[l])``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.embed = nn.Linear(c.d, c.d_model, dtype=DTYPE)
        self.register_buffer("pos_enc", sinusoidal_encoding(c.T, c.d_model))
        self.register_buffer("mask", causal_mask(c.T))
        self.layers = nn.ModuleList(EncoderLayer(c.d_model, c.H, c.d_ff) for _ in range(c.L))
        self.laplace_raw = nn.Parameter(torch.zeros(c.L, c.T, dtype=DTYPE))
        self.head1 = nn.Linear(c.d_model, c.mlp_hidden, dtype=DTYPE)
        self.head2 = nn.Linear(c.mlp_hidden, c.d, dtype=DTYPE)

    def laplace_scales(self) -> torch.Tensor:
        """Scales of the first layer's prior (strictly positive)."""
        return F.softplus(self.laplace_raw[0])

    def forward(self, x: torch.Tensor, mask_series: int | None = None, check_finite: bool = False):
        """x: (B, T, d). Returns x_hat, attn (B,L,H,T,T), prior (B,L,T,T), d_div (B,T)."""
        if mask_series is not None:
            x = x.clone()
            x[..., mask_series] = 0.0
        T = x.shape[1]
        idx = torch.arange(T, dtype=DTYPE)
        offsets = (idx[:, None] - idx[None, :]).abs()

        h = self.embed(x) + self.pos_enc
        attns, priors = [], []
        prev = None
        for l, layer in enumerate(self.layers):
            h, a = layer(h, self.mask)
            if check_finite and not bool(torch.isfinite(h).all()):
                raise NumericalError(f"non-finite activations in encoder layer {l + 1}")
            if prev is None:
                scales = self.laplace_scales().expand(x.shape[0], T)
            else:
                mad = (prev.detach() * offsets).sum(-1).clamp_min(MAD_FLOOR)
                scales = mad * torch.exp(self.laplace_raw[l])
            priors.append(laplace_prior(scales, T))
            attns.append(a)
            prev = a.mean(dim=1)
        x_hat = self.head2(F.gelu(self.head1(h)))
        if check_finite and not bool(torch.isfinite(x_hat).all()):
            raise NumericalError("non-finite activations in reconstruction head")
        attn = torch.stack(attns, dim=1)
        prior = torch.stack(priors, dim=1)
        return x_hat, attn, prior, discrepancy(attn, prior)


ModelParams = ReconstructionModel


def init_model(config: ModelConfig) -> ReconstructionModel:
    """Build a model with seeded scaled-uniform weights.

    Every weight matrix is drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    biases start at zero and layer norms at identity. The first layer's prior
    starts with scale T/10.
    """
    config.validate()
    model = ReconstructionModel(config)
    gen = torch.Generator().manual_seed(int(config.seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "laplace_raw":
                p.zero_()
                width = config.T / 10.0
                p[0] = math.log(math.expm1(width))
            elif "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[-2] if p.dim() == 3 or name.endswith("w_o") else p.shape[-1]
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
    return model


@dataclass
class EncodeOutput:
    x_hat: np.ndarray
    attn: np.ndarray
    prior: np.ndarray
    d_div: np.ndarray
    recon_error: np.ndarray


def _as_batch(x, config: ModelConfig) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x, dtype=float))
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() != 3 or x.shape[1:] != (config.T, config.d):
        raise ValueError(f"expected windows of shape ({config.T}, {config.d}), got {tuple(x.shape[-2:])}")
    return x


def encode_window(x_window, params: ReconstructionModel, mask_series: int | None = None) -> EncodeOutput:
    """Run the model on one (T, d) window or a stack of windows (n, T, d)."""
    single = np.ndim(x_window) == 2
    x = _as_batch(x_window, params.config)
    if mask_series is not None and not 0 <= mask_series < params.config.d:
        raise ValueError(f"mask_series {mask_series} out of range")
    with torch.no_grad():
        x_hat, attn, prior, d_div = params(x, mask_series=mask_series, check_finite=True)
        err = ((x - x_hat) ** 2).sum(-1)
    out = EncodeOutput(x_hat.numpy(), attn.numpy(), prior.numpy(), d_div.numpy(), err.numpy())
    if single:
        out = EncodeOutput(*(a[0] for a in (out.x_hat, out.attn, out.prior, out.d_div, out.recon_error)))
    return out


def reconstruct(x_window, params: ReconstructionModel, mask_series: int | None = None):
    """Reconstruction and per-step squared error, optionally with one series masked."""
    out = encode_window(x_window, params, mask_series)
    return out.x_hat, out.recon_error


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, path) -> None:
        cols = ["epoch", "train_loss", "val_loss", "recon_term", "div_term"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in cols})

    @property
    def val_losses(self) -> list[float]:
        return [r["val_loss"] for r in self.rows]


def _batch_loss(model, xb, lam):
    x_hat, _, _, d_div = model(xb)
    recon = ((xb - x_hat) ** 2).sum(dim=(1, 2))
    div = d_div.abs().sum(-1)
    return (recon - lam * div).mean(), recon.mean(), div.mean()


def train(windows, config: ModelConfig) -> tuple[ReconstructionModel, TrainingLog]:
    """Fit the model with Adam and early stopping on a held-out fraction of windows.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValueError("need at least one (T, d) window")
    model = init_model(config)
    x_all = _as_batch(windows, config)
    rng = np.random.default_rng([int(config.seed), 1])
    order = rng.permutation(len(x_all))
    n_val = int(round(len(order) * config.val_fraction))
    if len(order) > 1:
        n_val = min(max(n_val, 1), len(order) - 1) if config.val_fraction > 0 else 0
    else:
        n_val = 0
    x_val = x_all[order[:n_val]] if n_val else x_all
    x_tr = x_all[order[n_val:]]

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    bs = config.batch_size if config.batch_size > 0 else len(x_tr)
    history = TrainingLog()
    best = (math.inf, None)
    stale = 0
    for epoch in range(config.max_epochs):
        model.train()
        perm = rng.permutation(len(x_tr))
        tot = rec = div = 0.0
        for step, start in enumerate(range(0, len(perm), bs)):
            xb = x_tr[perm[start : start + bs]]
            loss, r, dv = _batch_loss(model, xb, config.lam)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(xb)
            tot += loss.item() * n
            rec += r.item() * n
            div += dv.item() * n
        model.eval()
        with torch.no_grad():
            val, _, _ = _batch_loss(model, x_val, config.lam)
        val = val.item()
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.add(epoch=epoch, train_loss=tot / len(x_tr), val_loss=val, recon_term=rec / len(x_tr), div_term=div / len(x_tr))
        log.debug("epoch %d train %.4f val %.4f", epoch, tot / len(x_tr), val)
        if val < best[0]:
            best = (val, {k: v.detach().clone() for k, v in model.state_dict().items()})
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best[1])
    model.eval()
    return model, history


def save_checkpoint(path, model: ReconstructionModel) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    arrays["__config__"] = np.array(json.dumps(asdict(model.config)))
    arrays["__format_version__"] = np.array(CHECKPOINT_VERSION)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ReconstructionModel:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if "__format_version__" not in z.files:
            raise ValueError(f"{path}: not a model checkpoint (no version field)")
        version = int(z["__format_version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig(**json.loads(str(z["__config__"])))
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if not k.startswith("__")}
    model = ReconstructionModel(config)
    model.load_state_dict(state)
    model.eval()
    return model
