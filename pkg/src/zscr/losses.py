"""Training objectives: critic loss, generator loss with its two
regularizers, the triplet loss for the common-space mapper, and the
Lipschitz weight clip.

Stop-gradient boundaries are expressed by which parameter tensors the
caller watched on the tape: the critic update sees generated embeddings as
constants, the generator update sees critic parameters as constants, and
the mapper update sees everything upstream as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backend import kernels as K
from .errors import ShapeMismatch
from .model import GaussianCode, Model, latent_divergence, sample_latent


@dataclass
class LossBreakdown:
    """Logged scalar components of one loss evaluation (batch means)."""

    v_p: float = 0.0
    v_n: float = 0.0
    d_p: float = 0.0
    d_n: float = 0.0
    l_t: float = 0.0
    l_d: float = 0.0
    l_g_adv: float = 0.0
    div_r: float = 0.0
    div_w: float = 0.0
    reg: float = 0.0
    l_g_total: float = 0.0


def triplet_loss(
    model: Model,
    i: Tensor,
    i_wrong: Optional[Tensor],
    c_hat_tr: Tensor,
    tensors: Optional[Mapping[str, Tensor]] = None,
) -> tuple[Tensor, LossBreakdown]:
    """Softplus of the score gap between wrong- and right-class similarities.

    v_p compares the mapped positive embedding with the pivot latent code,
    v_n the mapped wrong-class embedding. i_wrong=None drops the negative
    term (wrong-class ablation), leaving softplus(-v_p).
    """
    theta_p = model.csem_map(i, tensors)
    pivot = c_hat_tr if c_hat_tr.data.ndim == 2 else ad.reshape(c_hat_tr, (1, c_hat_tr.shape[0]))
    theta_p = theta_p if theta_p.data.ndim == 2 else ad.reshape(theta_p, (1, theta_p.shape[0]))
    v_p = ad.row_cosine(theta_p, pivot)
    bd = LossBreakdown(v_p=float(v_p.data.mean()))
    if i_wrong is None:
        gap = ad.neg(v_p)
    else:
        theta_n = model.csem_map(i_wrong, tensors)
        theta_n = theta_n if theta_n.data.ndim == 2 else ad.reshape(theta_n, (1, theta_n.shape[0]))
        v_n = ad.row_cosine(theta_n, pivot)
        bd.v_n = float(v_n.data.mean())
        gap = ad.sub(v_n, v_p)
    loss = ad.reduce_mean(ad.softplus(gap))
    bd.l_t = loss.item()
    return loss, bd


def margin_regularizer(
    i: Tensor,
    i_real: Tensor,
    i_wrong: Optional[Tensor],
    lam: float,
) -> tuple[Tensor, float, float]:
    """Manhattan margin: pull i toward same-class embeddings, push it at
    least lam away from wrong-class embeddings.

    Returns (regularizer, mean d_p, mean d_n) where d_p = |i_real - i|_1 and
    d_n = |i_wrong - i|_1 - lam; the regularizer is the batch mean of
    d_p - d_n. With i_wrong=None only the pull term d_p remains.
    """
    if lam < 0:
        raise ShapeMismatch(f"margin lam must be non-negative, got {lam}")
    rows = i if i.data.ndim == 2 else ad.reshape(i, (1, i.shape[0]))
    real = i_real if i_real.data.ndim == 2 else ad.reshape(i_real, (1, i_real.shape[0]))
    d_p = ad.row_l1(real, rows)
    if i_wrong is None:
        reg = ad.reduce_mean(d_p)
        return reg, float(d_p.data.mean()), 0.0
    wrong = i_wrong if i_wrong.data.ndim == 2 else ad.reshape(i_wrong, (1, i_wrong.shape[0]))
    d_n = ad.sub(ad.row_l1(wrong, rows), lam)
    reg = ad.reduce_mean(ad.sub(d_p, d_n))
    return reg, float(d_p.data.mean()), float(d_n.data.mean())


@dataclass
class LossBatch:
    """Constant inputs of one loss evaluation (already-sampled rows)."""

    i_r: Tensor
    phi_tr: Tensor
    i_w: Optional[Tensor] = None
    phi_tw: Optional[Tensor] = None


def discriminator_loss(
    model: Model,
    batch: LossBatch,
    rng: np.random.Generator,
    tensors: Optional[Mapping[str, Tensor]] = None,
    no_wrong_class: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """Critic objective: score real pairs above generated and wrong-class pairs.

    Generated embeddings are produced with unwatched generator parameters,
    so they act as constants; minimize w.r.t. the critic only.
    """
    fake = _generate_fake(model, batch.phi_tr, rng)
    s_fake = ad.reduce_mean(model.discriminate(fake, batch.phi_tr, tensors))
    s_real = ad.reduce_mean(model.discriminate(batch.i_r, batch.phi_tr, tensors))
    if no_wrong_class:
        loss = ad.sub(s_fake, s_real)
    else:
        s_wrong = ad.reduce_mean(model.discriminate(batch.i_w, batch.phi_tr, tensors))
        loss = ad.add(
            ad.scale(ad.sub(s_fake, s_real), 0.5),
            ad.scale(ad.sub(s_wrong, s_real), 0.5),
        )
    bd = LossBreakdown(l_d=loss.item())
    return loss, bd


def generator_loss(
    model: Model,
    batch: LossBatch,
    rng: np.random.Generator,
    alpha: float,
    beta: float,
    lam: float,
    tensors: Optional[Mapping[str, Tensor]] = None,
    divergence_mode: str = "kl_closed_form",
    js_samples: int = 64,
    no_wrong_class: bool = False,
    no_reg: bool = False,
    with_triplet: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """Generator + text-encoder objective.

    Adversarial term, latent-divergence regularizer on both conditioning
    codes (weight alpha), and the Manhattan margin regularizer (weight
    beta). with_triplet additionally folds in the triplet loss for joint
    training of the common-space mapper.
    """
    p = tensors or model.tensors
    code_r = model.text_encode(batch.phi_tr, p)
    c_tr = sample_latent(code_r, rng)
    z = _draw_noise(model, _rows_of(batch.phi_tr), rng, c_tr.dtype)
    fake = model.generate(z, c_tr, p)

    l_g_adv = ad.neg(ad.reduce_mean(model.discriminate(fake, batch.phi_tr, p)))
    total = l_g_adv
    bd = LossBreakdown(l_g_adv=l_g_adv.item())

    div_r = latent_divergence(code_r, divergence_mode, js_samples, rng)
    bd.div_r = div_r.item()
    div_sum = div_r
    if not no_wrong_class:
        code_w = model.text_encode(batch.phi_tw, p)
        div_w = latent_divergence(code_w, divergence_mode, js_samples, rng)
        bd.div_w = div_w.item()
        div_sum = ad.add(div_r, div_w)
    total = ad.add(total, ad.scale(div_sum, alpha))

    if not no_reg:
        reg, d_p, d_n = margin_regularizer(
            fake, batch.i_r, None if no_wrong_class else batch.i_w, lam
        )
        bd.reg, bd.d_p, bd.d_n = reg.item(), d_p, d_n
        total = ad.add(total, ad.scale(reg, beta))

    if with_triplet:
        if no_wrong_class:
            l_t, tbd = triplet_loss(model, fake, None, c_tr, p)
        else:
            c_tw = sample_latent(model.text_encode(batch.phi_tw, p), rng)
            fake_w = model.generate(z, c_tw, p)
            l_t, tbd = triplet_loss(model, fake, fake_w, c_tr, p)
        bd.l_t, bd.v_p, bd.v_n = tbd.l_t, tbd.v_p, tbd.v_n
        total = ad.add(total, l_t)

    bd.l_g_total = total.item()
    return total, bd


def clip_weights(model: Model, k: float) -> None:
    """Clamp every critic parameter into [-k, k] (Lipschitz constraint)."""
    for name in model.names("disc"):
        model.tensors[name] = ad.tensor(K.clip(model.tensors[name].data, k))


def _rows_of(t: Tensor) -> int:
    return t.shape[0] if t.data.ndim == 2 else 1


def _draw_noise(model: Model, rows: int, rng: np.random.Generator, dtype) -> Tensor:
    z = rng.standard_normal((rows, model.dims.d_z)).astype(dtype)
    return ad.tensor(z, dtype=dtype)


def _generate_fake(model: Model, phi_tr: Tensor, rng: np.random.Generator) -> Tensor:
    """Representative embeddings with all upstream parameters as constants."""
    code = model.text_encode(phi_tr)
    c_tr = sample_latent(code, rng)
    z = _draw_noise(model, _rows_of(phi_tr), rng, c_tr.dtype)
    return model.generate(z, c_tr).detach()
