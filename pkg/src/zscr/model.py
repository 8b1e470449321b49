"""The four networks: text encoder, generator, discriminator, common-space mapper.

All forward passes are written against the autodiff primitives and accept
either a single embedding (1-D) or a batch (2-D, one row per sample). They
are pure functions of an explicit tensor mapping, so a trainer can swap in
tape-watched copies of the parameters it wants gradients for while leaving
the rest as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigInvalid, ShapeMismatch

INIT_STD = 0.02  # all weights and biases start at Normal(0, INIT_STD)


@dataclass(frozen=True)
class Dims:
    """Network dimensions. Hidden widths default to the production sizes and
    may be shrunk for hand-checkable toy models."""

    d_t: int
    d_i: int
    d_c: int = 1024
    d_z: int = 100
    g_hidden1: int = 2048
    g_hidden2: int = 4096
    disc_hidden: int = 1024

    def validate(self):
        for name, v in self.__dict__.items():
            if v < 1:
                raise ConfigInvalid(f"dims.{name} must be positive, got {v}")


class GaussianCode(NamedTuple):
    """Diagonal Gaussian over the latent space: mean and log standard deviation."""

    mu: Tensor
    log_sigma: Tensor


# name -> (shape builder) in canonical order; also the initialization draw order
def _param_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    return {
        "te.w": (d.d_t, 2 * d.d_c),
        "te.b": (2 * d.d_c,),
        "gen.w1": (d.d_z + d.d_c, d.g_hidden1),
        "gen.b1": (d.g_hidden1,),
        "gen.w2": (d.g_hidden1, d.g_hidden2),
        "gen.b2": (d.g_hidden2,),
        "gen.w3": (d.g_hidden2, d.d_i),
        "gen.b3": (d.d_i,),
        "disc.w1": (d.d_i + d.d_t, d.disc_hidden),
        "disc.b1": (d.disc_hidden,),
        "disc.w2": (d.disc_hidden, 1),
        "disc.b2": (1,),
        "csem.w": (d.d_i, d.d_c),
        "csem.b": (d.d_c,),
    }


BLOCKS = {
    "te": ("te.w", "te.b"),
    "gen": ("gen.w1", "gen.b1", "gen.w2", "gen.b2", "gen.w3", "gen.b3"),
    "disc": ("disc.w1", "disc.b1", "disc.w2", "disc.b2"),
    "csem": ("csem.w", "csem.b"),
}


@dataclass
class Model:
    """Parameter container plus the forward passes.

    The trainer treats this as mutable state (reassigning tensors after each
    optimizer step); once training returns, the instance is a read-only
    snapshot safe to share.
    """

    dims: Dims
    leaky_slope: float = 0.2
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def names(self, *blocks: str) -> list[str]:
        if not blocks:
            blocks = tuple(BLOCKS)
        return [n for b in blocks for n in BLOCKS[b]]

    def watched(self, tape: ad.Tape, *blocks: str) -> dict[str, Tensor]:
        """Parameter mapping with the given blocks registered as tape leaves."""
        out = dict(self.tensors)
        for name in self.names(*blocks):
            out[name] = tape.watch(out[name])
        return out

    # --- forward passes ---

    def text_encode(self, phi: Tensor, tensors: Optional[Mapping[str, Tensor]] = None) -> GaussianCode:
        """Encode text embeddings into a diagonal Gaussian latent code."""
        p = tensors or self.tensors
        d_c = self.dims.d_c
        x, was_1d = _as_rows(phi, self.dims.d_t, "text_encode")
        out = ad.add_bias(ad.matmul(x, p["te.w"]), p["te.b"])
        mu = ad.slice_cols(out, 0, d_c)
        log_sigma = ad.slice_cols(out, d_c, 2 * d_c)
        if was_1d:
            mu = ad.reshape(mu, (d_c,))
            log_sigma = ad.reshape(log_sigma, (d_c,))
        return GaussianCode(mu, log_sigma)

    def generate(self, z: Tensor, c_hat: Tensor, tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """Produce a representative image embedding from noise and a latent code."""
        p = tensors or self.tensors
        zr, z1d = _as_rows(z, self.dims.d_z, "generate (noise)")
        cr, c1d = _as_rows(c_hat, self.dims.d_c, "generate (latent code)")
        if z1d != c1d or zr.shape[0] != cr.shape[0]:
            raise ShapeMismatch("generate: noise and latent code batches differ")
        h = ad.concat_cols(zr, cr)
        h = ad.leaky_relu(ad.add_bias(ad.matmul(h, p["gen.w1"]), p["gen.b1"]), self.leaky_slope)
        h = ad.leaky_relu(ad.add_bias(ad.matmul(h, p["gen.w2"]), p["gen.b2"]), self.leaky_slope)
        out = ad.relu(ad.add_bias(ad.matmul(h, p["gen.w3"]), p["gen.b3"]))
        return ad.reshape(out, (self.dims.d_i,)) if z1d else out

    def discriminate(self, img: Tensor, phi: Tensor, tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """Critic score conditioned on the text embedding; unbounded real output."""
        p = tensors or self.tensors
        ir, i1d = _as_rows(img, self.dims.d_i, "discriminate (image)")
        pr, p1d = _as_rows(phi, self.dims.d_t, "discriminate (text)")
        if i1d != p1d or ir.shape[0] != pr.shape[0]:
            raise ShapeMismatch("discriminate: image and text batches differ")
        h = ad.concat_cols(ir, pr)
        h = ad.leaky_relu(ad.add_bias(ad.matmul(h, p["disc.w1"]), p["disc.b1"]), self.leaky_slope)
        out = ad.add_bias(ad.matmul(h, p["disc.w2"]), p["disc.b2"])
        return ad.reshape(out, ()) if i1d else ad.reshape(out, (ir.shape[0],))

    def csem_map(self, e: Tensor, tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """Map image-space embeddings into the common space (single ReLU layer)."""
        p = tensors or self.tensors
        x, was_1d = _as_rows(e, self.dims.d_i, "csem_map")
        out = ad.relu(ad.add_bias(ad.matmul(x, p["csem.w"]), p["csem.b"]))
        return ad.reshape(out, (self.dims.d_c,)) if was_1d else out


def _as_rows(t: Tensor, width: int, what: str) -> tuple[Tensor, bool]:
    if t.data.ndim == 1:
        if t.shape[0] != width:
            raise ShapeMismatch(f"{what}: expected length {width}, got {t.shape[0]}")
        return ad.reshape(t, (1, width)), True
    if t.data.ndim == 2:
        if t.shape[1] != width:
            raise ShapeMismatch(f"{what}: expected {width} columns, got {t.shape[1]}")
        return t, False
    raise ShapeMismatch(f"{what}: expected 1-D or 2-D input, got shape {t.shape}")


def init_params(dims: Dims, rng: np.random.Generator, leaky_slope: float = 0.2) -> Model:
    """Fresh model with every weight and bias drawn i.i.d. Normal(0, 0.02)."""
    dims.validate()
    tensors = {
        name: ad.tensor(rng.normal(0.0, INIT_STD, size=shape).astype(np.float32))
        for name, shape in _param_shapes(dims).items()
    }
    return Model(dims=dims, leaky_slope=leaky_slope, tensors=tensors)


def sample_latent(code: GaussianCode, rng: np.random.Generator, eps: Optional[np.ndarray] = None) -> Tensor:
    """Reparameterized draw mu + sigma * eps; gradients reach mu and log_sigma.

    Passing eps explicitly freezes the randomness (used by gradient checks).
    """
    if eps is None:
        eps = rng.standard_normal(code.mu.shape)
    noise = ad.tensor(np.asarray(eps, dtype=code.mu.data.dtype), dtype=code.mu.dtype)
    return ad.add(code.mu, ad.mul(ad.exp(code.log_sigma), noise))


def latent_divergence(
    code: GaussianCode,
    mode: str = "kl_closed_form",
    mc_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Divergence of the latent code's Gaussian from the standard Gaussian.

    kl_closed_form: KL(N(mu, sigma^2) || N(0, I)), averaged over the batch.
    js_monte_carlo: Jensen-Shannon divergence estimated from mc_samples draws
    per distribution against their equal mixture; differentiable through the
    reparameterized samples. Requires an rng.
    """
    if mode == "kl_closed_form":
        mu, ls = _codes_as_rows(code)
        s2 = ad.exp(ad.scale(ls, 2.0))
        per = ad.sub(ad.sub(ad.add(s2, ad.mul(mu, mu)), 1.0), ad.scale(ls, 2.0))
        return ad.scale(ad.reduce_mean(ad.rowsum(per)), 0.5)
    if mode == "js_monte_carlo":
        if rng is None:
            raise ConfigInvalid("js_monte_carlo divergence needs an rng")
        mu, ls = _codes_as_rows(code)
        rows = mu.shape[0]
        total = None
        for r in range(rows):
            js = _js_single(GaussianCode(_row(mu, r), _row(ls, r)), mc_samples, rng)
            total = js if total is None else ad.add(total, js)
        return ad.scale(total, 1.0 / rows)
    raise ConfigInvalid(f"unknown divergence mode {mode!r}")


def _codes_as_rows(code: GaussianCode) -> tuple[Tensor, Tensor]:
    mu, ls = code.mu, code.log_sigma
    if mu.data.ndim == 1:
        mu = ad.reshape(mu, (1, mu.shape[0]))
        ls = ad.reshape(ls, (1, ls.shape[0]))
    return mu, ls


def _row(m: Tensor, r: int) -> Tensor:
    return ad.reshape(ad.slice_rows(m, r, r + 1), (m.shape[1],))


def _log_density(x: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Row-wise log density of a diagonal Gaussian at the rows of x."""
    d = x.shape[1]
    inv_sigma = ad.exp(ad.neg(log_sigma))
    u = ad.scale_cols(ad.add_bias(x, ad.neg(mu)), inv_sigma)
    quad = ad.scale(ad.rowsum(ad.mul(u, u)), -0.5)
    log_norm = ad.add(ad.reduce_sum(log_sigma), 0.5 * d * math.log(2.0 * math.pi))
    return ad.sub(quad, log_norm)


def _log_mixture(lp: Tensor, lq: Tensor) -> Tensor:
    """log(0.5 * (exp(lp) + exp(lq))) rowwise, overflow-safe."""
    hi = ad.add(lp, ad.relu(ad.sub(lq, lp)))  # rowwise max
    gap = ad.absolute(ad.sub(lp, lq))
    return ad.sub(ad.add(hi, ad.softplus(ad.neg(gap))), math.log(2.0))


def _js_single(code: GaussianCode, m: int, rng: np.random.Generator) -> Tensor:
    d = code.mu.shape[0]
    dt = code.mu.data.dtype
    eps = rng.standard_normal((m, d)).astype(dt)
    q_draws = ad.tensor(rng.standard_normal((m, d)).astype(dt), dtype=dt)
    sigma = ad.exp(code.log_sigma)
    x = ad.add_bias(ad.scale_cols(ad.tensor(eps, dtype=dt), sigma), code.mu)
    zero = ad.tensor(np.zeros(d, dtype=dt), dtype=dt)

    lp_x = _log_density(x, code.mu, code.log_sigma)
    lq_x = _log_density(x, zero, zero)
    lm_x = _log_mixture(lp_x, lq_x)
    kl_p = ad.reduce_mean(ad.sub(lp_x, lm_x))

    lp_y = _log_density(q_draws, code.mu, code.log_sigma)
    lq_y = _log_density(q_draws, zero, zero)
    lm_y = _log_mixture(lp_y, lq_y)
    kl_q = ad.reduce_mean(ad.sub(lq_y, lm_y))

    return ad.scale(ad.add(kl_p, kl_q), 0.5)
