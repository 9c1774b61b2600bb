"""Guided reverse diffusion over a spectral basis (dim x bands) and coefficients (rows x cols x dim).

Each reverse step estimates the clean pair from both networks, differentiates
the observation loss with respect to the current iterates, smooths that
gradient with bias-corrected first/second moments, folds it into the predicted
noise, and takes the deterministic update. The optional residual refinement
(ARGM) then nudges the new iterates with one plain gradient step on the same
observation loss. The fused cube is coeff x_3 basis.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .degradation import DegradationModel
from .diffusion import NoiseSchedule, predict_x0, reverse_step
from .tensor import NonFiniteError, Tensor

NetFn = Callable[[Tensor, int], Tensor]
GUIDANCE_MODES = ("full-backprop", "fixed-eps")


class SamplerDivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"sampling diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass
class SamplerConfig:
    guide_weight: float = 1.0  # MSI term weight in the guidance loss
    refine_weight: float = 1.0  # MSI term weight in the refinement loss
    guide_step_coeff: float = 0.05
    guide_step_basis: float = 0.05
    refine_divisor: float = 10.0  # refinement steps are guide_step / refine_divisor
    beta1: float = 0.9
    beta2: float = 0.999
    eps_div: float = 1e-8
    num_steps: int = 500
    subspace_dim: int = 8
    argm_enabled: bool = True
    guidance_mode: str = "full-backprop"
    argm_step_cap: bool = True

    def __post_init__(self):
        if self.guide_step_coeff < 0 or self.guide_step_basis < 0 or self.refine_divisor <= 0 or self.eps_div <= 0:
            raise ValueError("step sizes must be nonnegative and refine_divisor, eps_div positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.subspace_dim < 1 or self.num_steps < 2:
            raise ValueError("need subspace_dim >= 1 and num_steps >= 2")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance_mode must be one of {GUIDANCE_MODES}")


@dataclass
class SamplerState:
    coeff: np.ndarray
    basis: np.ndarray
    t: int
    m_coeff: np.ndarray = None
    v_coeff: np.ndarray = None
    m_basis: np.ndarray = None
    v_basis: np.ndarray = None

    def __post_init__(self):
        for name, like in (("m_coeff", self.coeff), ("v_coeff", self.coeff), ("m_basis", self.basis), ("v_basis", self.basis)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(like))


# ---------------------------------------------------------------- losses


def observation_loss(coeff, basis, lr_hsi: np.ndarray, hr_msi: np.ndarray, model: DegradationModel, weight: float) -> Tensor:
    """||down(cube) - lr_hsi||^2 + weight * ||cube x3 srf - hr_msi||^2 with cube = coeff x3 basis."""
    coeff, basis = tn.as_tensor(coeff), tn.as_tensor(basis)
    if coeff.ndim != 3 or basis.ndim != 2 or coeff.shape[2] != basis.shape[0]:
        raise tn.DimensionError(f"factor shapes {coeff.shape} and {basis.shape} do not chain")
    C, _ = model.bands
    if basis.shape[1] != C:
        raise tn.DimensionError(f"basis has {basis.shape[1]} bands, SRF expects {C}")
    cube = tn.mode_product(coeff, tn.transpose(basis), axis=2)
    low = model.spatial(cube)
    if low.shape != lr_hsi.shape:
        raise tn.DimensionError(f"downsampled cube has shape {low.shape}, LR-HSI has {lr_hsi.shape}")
    msi = tn.mode_product(cube, model.srf, axis=2)
    if msi.shape != hr_msi.shape:
        raise tn.DimensionError(f"band-reduced cube has shape {msi.shape}, HR-MSI has {hr_msi.shape}")
    loss = tn.sum(tn.square(low - Tensor(lr_hsi)))
    if weight != 0.0:
        loss = loss + tn.scale(tn.sum(tn.square(msi - Tensor(hr_msi))), weight)
    return loss


def guidance_loss(coeff0_hat, basis0_hat, lr_hsi, hr_msi, model: DegradationModel, guide_weight: float) -> Tensor:
    return observation_loss(coeff0_hat, basis0_hat, lr_hsi, hr_msi, model, guide_weight)


def residual_loss(coeff, basis, lr_hsi, hr_msi, model: DegradationModel, refine_weight: float) -> Tensor:
    return observation_loss(coeff, basis, lr_hsi, hr_msi, model, refine_weight)


# ---------------------------------------------------------------- per-step pieces


def _spatial_eps(spatial_net: NetFn, coeff: Tensor, t: int) -> Tensor:
    # networks see coefficients channel-first
    out = spatial_net(tn.transpose(coeff, (2, 0, 1)), t)
    return tn.transpose(out, (1, 2, 0))


@dataclass
class CleanEstimate:
    coeff0: Tensor
    basis0: Tensor
    eps_coeff: Tensor
    eps_basis: Tensor
    coeff_t: Tensor
    basis_t: Tensor


def estimate_clean_pair(
    state: SamplerState,
    spatial_net: NetFn,
    spectral_net: NetFn,
    schedule: NoiseSchedule,
    track: bool = False,
) -> CleanEstimate:
    """Predict the clean coefficients and basis from the current iterates.

    With ``track`` the iterates are tape leaves so the loss can be
    differentiated through both networks.
    """
    abar = schedule.at(state.t)
    coeff_t = Tensor(state.coeff, requires_grad=track)
    basis_t = Tensor(state.basis, requires_grad=track)
    if track:
        tn.new_tape()
        eps_coeff = _spatial_eps(spatial_net, coeff_t, state.t)
        eps_basis = spectral_net(basis_t, state.t)
    else:
        with tn.no_grad():
            eps_coeff = _spatial_eps(spatial_net, coeff_t, state.t)
            eps_basis = spectral_net(basis_t, state.t)
    if eps_coeff.shape != coeff_t.shape or eps_basis.shape != basis_t.shape:
        raise tn.DimensionError("network output shape differs from its input")
    return CleanEstimate(
        predict_x0(coeff_t, eps_coeff, abar), predict_x0(basis_t, eps_basis, abar),
        eps_coeff, eps_basis, coeff_t, basis_t,
    )


def moment_update(m: np.ndarray, v: np.ndarray, g: np.ndarray, k: int, beta1: float, beta2: float):
    """One moment recursion plus bias correction; ``k`` counts updates from 1."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**k)
    v_hat = v / (1.0 - beta2**k)
    return m, v, m_hat, v_hat


@dataclass
class GuidanceResult:
    eps_hat_coeff: np.ndarray
    eps_hat_basis: np.ndarray
    coeff0_hat: np.ndarray
    basis0_hat: np.ndarray
    loss: float
    grad_coeff: np.ndarray
    grad_basis: np.ndarray
    m_coeff: np.ndarray
    v_coeff: np.ndarray
    m_basis: np.ndarray
    v_basis: np.ndarray


def guidance_gradients(state, spatial_net, spectral_net, lr_hsi, hr_msi, model, cfg, schedule):
    """Loss on the clean estimate and its gradients w.r.t. the current iterates."""
    full = cfg.guidance_mode == "full-backprop"
    est = estimate_clean_pair(state, spatial_net, spectral_net, schedule, track=full)
    if full:
        loss = guidance_loss(est.coeff0, est.basis0, lr_hsi, hr_msi, model, cfg.guide_weight)
        tn.backward(loss)
        g_coeff, g_basis = est.coeff_t.grad, est.basis_t.grad
    else:
        # network outputs held fixed: d(clean)/d(iterate) = 1/sqrt(abar)
        coeff0 = Tensor(est.coeff0.data, requires_grad=True)
        basis0 = Tensor(est.basis0.data, requires_grad=True)
        loss = guidance_loss(coeff0, basis0, lr_hsi, hr_msi, model, cfg.guide_weight)
        tn.backward(loss)
        inv = 1.0 / math.sqrt(schedule.at(state.t))
        g_coeff, g_basis = coeff0.grad * inv, basis0.grad * inv
    return est, loss.item(), g_coeff, g_basis


def guided_noise(state, spatial_net, spectral_net, lr_hsi, hr_msi, model, cfg: SamplerConfig, schedule) -> GuidanceResult:
    """Network noise corrected by the moment-normalised guidance gradient."""
    try:
        est, loss, g_coeff, g_basis = guidance_gradients(state, spatial_net, spectral_net, lr_hsi, hr_msi, model, cfg, schedule)
    except NonFiniteError as err:
        raise SamplerDivergenceError(state.t, str(err)) from err
    if not (np.all(np.isfinite(g_coeff)) and np.all(np.isfinite(g_basis))):
        raise SamplerDivergenceError(state.t, "non-finite guidance gradient")
    k = schedule.num_steps - state.t + 1
    m_c, v_c, m_c_hat, v_c_hat = moment_update(state.m_coeff, state.v_coeff, g_coeff, k, cfg.beta1, cfg.beta2)
    m_b, v_b, m_b_hat, v_b_hat = moment_update(state.m_basis, state.v_basis, g_basis, k, cfg.beta1, cfg.beta2)
    eps_hat_coeff = est.eps_coeff.data - cfg.guide_step_coeff * (m_c_hat / (np.sqrt(v_c_hat) + cfg.eps_div))
    eps_hat_basis = est.eps_basis.data - cfg.guide_step_basis * (m_b_hat / (np.sqrt(v_b_hat) + cfg.eps_div))
    return GuidanceResult(
        eps_hat_coeff, eps_hat_basis, est.coeff0.data, est.basis0.data, loss, g_coeff, g_basis, m_c, v_c, m_b, v_b
    )


def residual_lipschitz(coeff: np.ndarray, basis: np.ndarray, model: DegradationModel, refine_weight: float) -> tuple[float, float]:
    """Upper bounds on the gradient Lipschitz constants of the residual loss in coeff and in basis.

    With the other factor held fixed the loss is quadratic, so the bounds
    come from operator norms: downsampling acts spatially, basis and SRF act on bands.
    """
    down_norm = model.spatial_norm(coeff.shape[:2])
    srf_norm = np.linalg.norm(model.srf, 2)
    flat = coeff.reshape(-1, coeff.shape[2])
    lip_coeff = 2.0 * (down_norm**2 * np.linalg.norm(basis, 2) ** 2 + refine_weight * np.linalg.norm(basis @ model.srf.T, 2) ** 2)
    low = np.asarray(model.spatial(coeff)).reshape(-1, coeff.shape[2])
    lip_basis = 2.0 * (np.linalg.norm(low, 2) ** 2 + refine_weight * np.linalg.norm(flat, 2) ** 2 * srf_norm**2)
    return float(lip_coeff), float(lip_basis)


def argm_steps(coeff: np.ndarray, basis: np.ndarray, model: DegradationModel, cfg: SamplerConfig) -> tuple[float, float]:
    """Configured steps guide_step / refine_divisor, capped at 1/Lipschitz when ``cfg.argm_step_cap`` is set."""
    step_coeff = cfg.guide_step_coeff / cfg.refine_divisor
    step_basis = cfg.guide_step_basis / cfg.refine_divisor
    if cfg.argm_step_cap:
        lip_coeff, lip_basis = residual_lipschitz(coeff, basis, model, cfg.refine_weight)
        if lip_coeff > 0:
            step_coeff = min(step_coeff, 1.0 / lip_coeff)
        if lip_basis > 0:
            step_basis = min(step_basis, 1.0 / lip_basis)
    return step_coeff, step_basis


def argm_refine(coeff_prev, basis_prev, lr_hsi, hr_msi, model: DegradationModel, cfg: SamplerConfig, step: int = 0):
    """One plain gradient step on the residual loss; returns (coeff, basis, loss_before).

    The step per factor is guide_step / refine_divisor, or 1/Lipschitz if that
    is smaller and the cap is enabled (a larger step cannot decrease the loss).
    """
    coeff = Tensor(coeff_prev, requires_grad=True)
    basis = Tensor(basis_prev, requires_grad=True)
    tn.new_tape()
    try:
        loss = residual_loss(coeff, basis, lr_hsi, hr_msi, model, cfg.refine_weight)
        tn.backward(loss)
    except NonFiniteError as err:
        raise SamplerDivergenceError(step, str(err)) from err
    step_coeff, step_basis = argm_steps(coeff.data, basis.data, model, cfg)
    coeff_new = coeff.data - step_coeff * coeff.grad
    basis_new = basis.data - step_basis * basis.grad
    if not (np.all(np.isfinite(coeff_new)) and np.all(np.isfinite(basis_new))):
        raise SamplerDivergenceError(step, "non-finite refinement")
    return coeff_new, basis_new, loss.item()


# ---------------------------------------------------------------- driver


@dataclass
class FusionResult:
    fused: np.ndarray
    coeff: np.ndarray
    basis: np.ndarray
    guidance_trace: np.ndarray
    residual_trace: np.ndarray
    seconds: float
    history: list = field(default_factory=list)


def run_fusion(
    lr_hsi: np.ndarray,
    hr_msi: np.ndarray,
    spatial_net: NetFn,
    spectral_net: NetFn,
    model: DegradationModel,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    keep_history: bool = False,
) -> FusionResult:
    """Full reverse pass from Gaussian iterates to the fused cube."""
    rows, cols, _ = hr_msi.shape
    bands = lr_hsi.shape[2]
    n = schedule.num_steps
    start = time.perf_counter()
    state = SamplerState(
        coeff=rng.standard_normal((rows, cols, cfg.subspace_dim)),
        basis=rng.standard_normal((cfg.subspace_dim, bands)),
        t=n,
    )
    guidance_trace = np.empty(n)
    residual_trace = np.empty(n)
    history = []
    for t in range(n, 0, -1):
        state.t = t
        g = guided_noise(state, spatial_net, spectral_net, lr_hsi, hr_msi, model, cfg, schedule)
        abar_prev = schedule.at(t - 1)
        coeff_prev = reverse_step(g.coeff0_hat, g.eps_hat_coeff, abar_prev)
        basis_prev = reverse_step(g.basis0_hat, g.eps_hat_basis, abar_prev)
        if cfg.argm_enabled:
            coeff_prev, basis_prev, resid = argm_refine(coeff_prev, basis_prev, lr_hsi, hr_msi, model, cfg, step=t)
        else:
            with tn.no_grad():
                resid = residual_loss(coeff_prev, basis_prev, lr_hsi, hr_msi, model, cfg.refine_weight).item()
        i = n - t
        guidance_trace[i] = g.loss
        residual_trace[i] = resid
        state.coeff, state.basis = coeff_prev, basis_prev
        state.m_coeff, state.v_coeff, state.m_basis, state.v_basis = g.m_coeff, g.v_coeff, g.m_basis, g.v_basis
        if keep_history:
            history.append((t, coeff_prev.copy(), basis_prev.copy()))
    cube = state.coeff @ state.basis
    if not np.all(np.isfinite(cube)):
        raise SamplerDivergenceError(0, "non-finite fused cube")
    return FusionResult(
        fused=np.clip(cube, 0.0, 1.0),
        coeff=state.coeff,
        basis=state.basis,
        guidance_trace=guidance_trace,
        residual_trace=residual_trace,
        seconds=time.perf_counter() - start,
        history=history,
    )


def fuse_factors(coeff: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.asarray(coeff) @ np.asarray(basis)
