"""Training objectives and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, abs_, add, as_tensor, clamp_min, div, log, matmul, mean,
                     mul, no_grad, permute, sigmoid, square, sub)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0
LOG_FLOOR = 1e-12
PSNR_CAP = 100.0


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.001

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


@lru_cache(maxsize=32)
def _filter_matrix(n: int, dtype_str: str) -> np.ndarray:
    """Banded ``(n - 10, n)`` matrix applying the 1-D Gaussian in 'valid' mode."""
    k = gaussian_kernel()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + SSIM_WINDOW] = k
    return m.astype(dtype_str)


def _blur(x: Tensor) -> Tensor:
    """Separable Gaussian 'valid' filter of a ``(B, C, H, W)`` tensor."""
    h, w = x.shape[-2:]
    gh = Tensor(_filter_matrix(h, x.dtype.str))
    gw = Tensor(_filter_matrix(w, x.dtype.str).T.copy())
    return matmul(matmul(gh, x), gw)


def ssim(x, y) -> Tensor:
    """Mean SSIM over 11x11 Gaussian windows (sigma 1.5), channels and batch."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    if x.ndim != 4 or min(x.shape[1:3]) < SSIM_WINDOW:
        raise ShapeError(f"ssim: need (B, H, W, C) with H, W >= {SSIM_WINDOW}, got {x.shape}")
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    xc = permute(x, (0, 3, 1, 2))
    yc = permute(y, (0, 3, 1, 2))
    mu_x = _blur(xc)
    mu_y = _blur(yc)
    mu_xx = square(mu_x)
    mu_yy = square(mu_y)
    mu_xy = mul(mu_x, mu_y)
    s_xx = sub(_blur(square(xc)), mu_xx)
    s_yy = sub(_blur(square(yc)), mu_yy)
    s_xy = sub(_blur(mul(xc, yc)), mu_xy)
    num = mul(add(mul(mu_xy, 2.0), c1), add(mul(s_xy, 2.0), c2))
    den = mul(add(add(mu_xx, mu_yy), c1), add(add(s_xx, s_yy), c2))
    return mean(div(num, den))


def loss_image(e_hat, e) -> Tensor:
    return sub(1.0, ssim(e_hat, e))


def loss_structure(p_hat, p) -> Tensor:
    """Mean absolute error; the subgradient at zero is 0."""
    p_hat, p = as_tensor(p_hat), as_tensor(p)
    if p_hat.shape != p.shape:
        raise ShapeError(f"loss_structure: shapes differ {p_hat.shape} vs {p.shape}")
    return mean(abs_(sub(p_hat, p)))


def d_ra(u, v) -> Tensor:
    """sigmoid(u - mean(v)), the mean taken over batch and all logit positions of v."""
    u, v = as_tensor(u), as_tensor(v)
    return sigmoid(sub(u, mean(v)))


def _nlog(p: Tensor) -> Tensor:
    return mean(log(clamp_min(p, LOG_FLOOR)))


def _check_logits(real: Tensor, fake: Tensor):
    if real.shape != fake.shape:
        raise ShapeError(f"logit maps differ: real {real.shape} vs fake {fake.shape}")


def loss_adv_disc(real_logits, fake_logits) -> Tensor:
    """-E_fake[log(1 - D_ra(fake; real))] - E_real[log D_ra(real; fake)]."""
    real, fake = as_tensor(real_logits), as_tensor(fake_logits)
    _check_logits(real, fake)
    # 1 - sigmoid(z) == sigmoid(-z)
    fake_term = sigmoid(sub(mean(real), fake))
    real_term = d_ra(real, fake)
    return sub(mul(_nlog(fake_term), -1.0), _nlog(real_term))


def loss_adv_gen(real_logits, fake_logits) -> Tensor:
    """Role-swapped form: -E_fake[log D_ra(fake; real)] - E_real[log(1 - D_ra(real; fake))]."""
    real, fake = as_tensor(real_logits), as_tensor(fake_logits)
    _check_logits(real, fake)
    fake_term = d_ra(fake, real)
    real_term = sigmoid(sub(mean(fake), real))
    return sub(mul(_nlog(fake_term), -1.0), _nlog(real_term))


def loss_total(l_image: Tensor, l_structure: Tensor | None = None,
               adv_e: Tensor | None = None, adv_d: Tensor | None = None,
               w: LossWeights | None = None) -> Tensor:
    """L_i + alpha * L_s + beta * (L_a^e + L_a^d); zero-weight or absent terms are skipped."""
    w = w or LossWeights()
    total = l_image
    if l_structure is not None and w.alpha != 0:
        total = add(total, mul(l_structure, w.alpha))
    adv = [t for t in (adv_e, adv_d) if t is not None]
    if adv and w.beta != 0:
        s = adv[0] if len(adv) == 1 else add(adv[0], adv[1])
        total = add(total, mul(s, w.beta))
    return total


# ---------------------------------------------------------------- metrics

def psnr(x, y) -> float:
    """10 log10(1 / MSE) over all RGB values; identical inputs report 100 dB."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes differ {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(DATA_RANGE ** 2 / mse))


def metric_ssim(x, y) -> float:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if x.ndim == 3:
        x, y = x[None], y[None]
    with no_grad():
        return float(ssim(Tensor(x), Tensor(y)).data)
