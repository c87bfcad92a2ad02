"""Classical comparison methods: trivial inverses, ADMM-TV, PnP-ADMM, PnP-RED, non-local means.

All methods minimize; the data term is f(x) = 1/2 ||y - A x||^2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .operators import ForwardOperator, fbp

METHODS = ("trivial", "admm_tv", "pnp_admm", "pnp_red")


class DivergenceError(RuntimeError):
    """An iterative baseline's data residual blew up; its parameters are unsuitable."""


@dataclass
class BaselineConfig:
    method: str = "admm_tv"
    lam_tv: float = 0.001
    rho: float = 0.05
    mu: float = 0.01
    lam_red: float = 0.01
    denoiser_strength: float = 0.02
    max_outer_iters: int = 100
    cg_iters: int = 50
    tol: float = 1e-5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}")
        if min(self.lam_tv, self.rho, self.mu, self.lam_red, self.denoiser_strength) < 0:
            raise ValueError("baseline scalars must be non-negative")
        if self.max_outer_iters < 1 or self.cg_iters < 1:
            raise ValueError("iteration caps must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


# Reference values, tuned for 256^2 images.
REFERENCE_PRESETS = {
    "ct20": dict(lam_tv=0.001, rho=0.05, denoiser_strength=0.05, mu=0.01, lam_red=0.01),
    "ct60": dict(lam_tv=0.001, rho=0.05, denoiser_strength=0.02, mu=0.01, lam_red=0.01),
    "deblur": dict(lam_tv=0.002, rho=0.1, denoiser_strength=0.05, mu=1.0, lam_red=0.2),
    "sr4": dict(lam_tv=0.006, rho=0.1, denoiser_strength=0.05, mu=1.0, lam_red=0.2),
}

# Re-swept on held-out rectangle phantoms at 64^2 (best mean PSNR on each grid).
PRESETS = {
    "ct20": dict(lam_tv=0.001, rho=0.05, denoiser_strength=0.05, mu=0.01, lam_red=0.01),
    "ct60": dict(lam_tv=1e-5, rho=1e-3, denoiser_strength=0.01, mu=2.0, lam_red=0.01),
    "deblur": dict(lam_tv=0.002, rho=0.1, denoiser_strength=0.05, mu=1.0, lam_red=0.2),
    "sr4": dict(lam_tv=0.006, rho=0.1, denoiser_strength=0.05, mu=1.0, lam_red=0.2),
}


def preset(task: str, method: str, reference: bool = False, **overrides) -> BaselineConfig:
    table = REFERENCE_PRESETS if reference else PRESETS
    return BaselineConfig(method=method, **{**table[task], **overrides})


# ------------------------------------------------------------------ helpers


def cg_solve(apply_h, b: np.ndarray, x0: np.ndarray, iters: int, tol: float = 1e-10) -> np.ndarray:
    """Plain CG for an SPD operator given as a function."""
    x = x0.astype(np.float64)
    r = b - apply_h(x)
    p = r.copy()
    rr = np.vdot(r, r)
    stop = tol * max(np.vdot(b, b), 1e-300)
    for _ in range(iters):
        if rr <= stop:
            break
        hp = apply_h(p)
        a = rr / np.vdot(p, hp)
        x += a * p
        r -= a * hp
        rr_new = np.vdot(r, r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def grad2d(x: np.ndarray) -> np.ndarray:
    """Forward differences along rows and columns, zero at the far edge; shape (2, C, H, W)."""
    g = np.zeros((2,) + x.shape, dtype=x.dtype)
    g[0, :, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
    g[1, :, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return g


def grad2d_adjoint(g: np.ndarray) -> np.ndarray:
    out = np.zeros(g.shape[1:], dtype=g.dtype)
    out[:, :-1, :] -= g[0, :, :-1, :]
    out[:, 1:, :] += g[0, :, :-1, :]
    out[:, :, :-1] -= g[1, :, :, :-1]
    out[:, :, 1:] += g[1, :, :, :-1]
    return out


def tv(x: np.ndarray) -> float:
    """Anisotropic total variation."""
    return float(np.abs(grad2d(np.asarray(x, dtype=np.float64))).sum())


def soft(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def upsample_nearest(y: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(y, factor, axis=-2), factor, axis=-1)


# ----------------------------------------------------------------- methods


def trivial_baseline(y: np.ndarray, op: ForwardOperator) -> np.ndarray:
    """FBP for CT, the measurement itself for blur, nearest-neighbour upsampling for SR."""
    if op.kind == "radon":
        return fbp(y, op)
    if op.kind == "blur":
        return y
    if op.kind == "downsample":
        return upsample_nearest(y, op.params["factor"])
    raise ValueError(f"no trivial baseline for operator kind {op.kind!r}")


def admm_tv(y: np.ndarray, op: ForwardOperator, cfg: BaselineConfig, history: list | None = None) -> np.ndarray:
    """ADMM on 1/2||y - Ax||^2 + lam ||Dx||_1 with split z = Dx and CG x-updates.

    ``history``, when given, receives the objective after each outer iteration.
    """
    y = np.asarray(y, dtype=np.float64)
    lam, rho = cfg.lam_tv, max(cfg.rho, 1e-12)
    aty = op.adjoint(y)
    x = aty * 0.0 if op.kind == "radon" else np.asarray(trivial_baseline(y, op), dtype=np.float64)
    z = grad2d(x)
    u = np.zeros_like(z)

    def h(v):
        return op.gram(v) + rho * grad2d_adjoint(grad2d(v))

    for _ in range(cfg.max_outer_iters):
        x_new = cg_solve(h, aty + rho * grad2d_adjoint(z - u), x, cfg.cg_iters)
        dx = grad2d(x_new)
        z = soft(dx + u, lam / rho)
        u = u + dx - z
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-12)
        x = x_new
        if history is not None:
            history.append(0.5 * float(np.sum((y - op.apply(x)) ** 2)) + lam * tv(x))
        if change < cfg.tol:
            break
    return x.astype(np.float32)


def _check_divergence(y, op, x, start: float) -> None:
    res = float(np.linalg.norm(y - op.apply(x)))
    # a data-consistent start (e.g. nearest-neighbour upsampling) has zero residual
    if not np.isfinite(res) or res > 10.0 * max(start, float(np.linalg.norm(y)), 1e-12):
        raise DivergenceError(
            f"residual grew from {start:.4g} to {res:.4g}; step size or penalty parameters are unsuitable"
        )


def _denoiser(strength: float):
    if strength == 0:
        return lambda v: v
    return lambda v: nlm_denoise(v, strength)


def pnp_admm(y: np.ndarray, op: ForwardOperator, cfg: BaselineConfig, denoiser=None) -> np.ndarray:
    """Plug-and-play ADMM: CG x-update against rho/2||x - (z - u)||^2, denoiser in place of the prox."""
    y = np.asarray(y, dtype=np.float64)
    den = denoiser or _denoiser(cfg.denoiser_strength)
    rho = max(cfg.rho, 1e-12)
    aty = op.adjoint(y)
    x = np.asarray(trivial_baseline(y, op), dtype=np.float64)
    z = x.copy()
    u = np.zeros_like(x)
    start = float(np.linalg.norm(y - op.apply(x)))

    def h(v):
        return op.gram(v) + rho * v

    for _ in range(cfg.max_outer_iters):
        x_new = cg_solve(h, aty + rho * (z - u), x, cfg.cg_iters)
        z = np.asarray(den(x_new + u), dtype=np.float64)
        u = u + x_new - z
        _check_divergence(y, op, x_new, start)
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-12)
        x = x_new
        if change < cfg.tol:
            break
    return x.astype(np.float32)


def pnp_red(y: np.ndarray, op: ForwardOperator, cfg: BaselineConfig, denoiser=None) -> np.ndarray:
    """Regularization by denoising: x <- x - mu (A^T(Ax - y) + lam (x - D(x)))."""
    y = np.asarray(y, dtype=np.float64)
    den = denoiser or _denoiser(cfg.denoiser_strength)
    x = np.asarray(trivial_baseline(y, op), dtype=np.float64)
    start = float(np.linalg.norm(y - op.apply(x)))
    for _ in range(cfg.max_outer_iters):
        grad_f = op.adjoint(op.apply(x) - y)
        x_new = x - cfg.mu * (grad_f + cfg.lam_red * (x - np.asarray(den(x), dtype=np.float64)))
        _check_divergence(y, op, x_new, start)
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-12)
        x = x_new
        if change < cfg.tol:
            break
    return x.astype(np.float32)


def nlm_denoise(x: np.ndarray, strength: float, patch: int = 3, search: int = 11) -> np.ndarray:
    """Non-local means on a (C, H, W) image with reflect padding.

    Weights are exp(-max(d^2 - 2 s^2, 0) / h^2), d^2 the mean squared patch
    difference, s = ``strength`` and h = 0.6 s.
    """
    if strength <= 0:
        raise ValueError("nlm strength must be positive")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    c, hgt, wid = x.shape
    r = search // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect")
    h2 = (0.6 * strength) ** 2
    floor = 2.0 * strength**2
    num = np.zeros_like(x)
    den = np.zeros(x.shape[1:])
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = xp[:, r + dy : r + dy + hgt, r + dx : r + dx + wid]
            d2 = ndimage.uniform_filter(((x - shifted) ** 2).mean(axis=0), size=patch, mode="reflect")
            w = np.exp(-np.maximum(d2 - floor, 0.0) / h2)
            num += w * shifted
            den += w
    out = num / den
    return (out[0] if squeeze else out).astype(np.float32)


def run_baseline(y: np.ndarray, op: ForwardOperator, cfg: BaselineConfig) -> np.ndarray:
    if cfg.method == "trivial":
        return np.asarray(trivial_baseline(y, op), dtype=np.float32)
    return {"admm_tv": admm_tv, "pnp_admm": pnp_admm, "pnp_red": pnp_red}[cfg.method](y, op, cfg)
