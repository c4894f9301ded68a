"""Count-data variational autoencoders (one per item modality).

Encoder: counts -> (mu, log_sigma) of a Gaussian posterior over a small latent.
Decoder: latent -> non-negative Poisson rates, one per item.
The loss per batch is KL(q || N(0, I)) + Poisson NLL + lam_vae * sum of squared
weights, summed over observations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractError, DomainError, NonFiniteLossError, ShapeError

log = logging.getLogger(__name__)

RATE_FLOOR = 1e-8
ITEM_COUNT = {"P": 28, "E": 58}
MAX_COUNT = {"P": 3, "E": 7}


@dataclass
class LatentGaussian:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.log_sigma = np.atleast_1d(np.asarray(self.log_sigma, dtype=np.float64))
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_sigma))):
            raise DomainError("latent Gaussian parameters must be finite")

    @property
    def sigma(self):
        return np.exp(self.log_sigma)


@dataclass
class VaeModel:
    encoder: dc.DenseNet
    decoder: dc.DenseNet
    modality: str
    item_count: int
    latent_dim: int = 1
    max_count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_count is None:
            self.max_count = MAX_COUNT.get(self.modality, 1)
        if self.encoder.input_dim != self.item_count or \
                self.encoder.output_dim != 2 * self.latent_dim:
            raise ShapeError("encoder must map item_count -> 2 * latent_dim")
        if self.decoder.input_dim != self.latent_dim or self.decoder.output_dim != self.item_count:
            raise ShapeError("decoder must map latent_dim -> item_count")
        if self.decoder.layers[-1].activation != "relu":
            raise ContractError("decoder output activation must be relu")

    @classmethod
    def create(cls, modality, item_count=None, latent_dim=1, hidden=16, seed=0, max_count=None):
        item_count = item_count or ITEM_COUNT[modality]
        rng = np.random.default_rng(seed)
        enc = dc.DenseNet.init([item_count, hidden, hidden, 2 * latent_dim],
                               ["tanh", "tanh", "identity"], rng)
        dec = dc.DenseNet.init([latent_dim, hidden, hidden, item_count],
                               ["tanh", "tanh", "relu"], rng)
        # start decoder rates near 1 instead of relu's dead zone
        dec.layers[-1].bias[:] = 1.0
        return cls(enc, dec, modality, item_count, latent_dim, max_count, seed)

    def copy(self):
        return VaeModel(self.encoder.copy(), self.decoder.copy(), self.modality,
                        self.item_count, self.latent_dim, self.max_count, self.seed)

    @property
    def n_params(self):
        return self.encoder.n_params + self.decoder.n_params

    def get_flat(self):
        return np.concatenate([self.encoder.get_flat(), self.decoder.get_flat()])

    def set_flat(self, flat):
        n = self.encoder.n_params
        self.encoder.set_flat(flat[:n])
        self.decoder.set_flat(flat[n:])


def check_counts(model: VaeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.item_count:
        raise ShapeError(f"expected {model.item_count} items, got shape {x.shape}")
    if np.any(x < 0):
        raise DomainError("item counts must be non-negative")
    if np.any(x != np.round(x)) or np.any(x > model.max_count):
        raise DomainError(f"{model.modality} items must be integers in 0..{model.max_count}")
    return x


def _encode(model, x, params=None):
    h = model.encoder.forward(dc.mul(x, 1.0 / model.max_count), params)
    d = model.latent_dim
    if np.ndim(dc._val(h)) == 1:
        return dc.getitem(h, slice(0, d)), dc.getitem(h, slice(d, 2 * d))
    return dc.getitem(h, (slice(None), slice(0, d))), dc.getitem(h, (slice(None), slice(d, 2 * d)))


def encode(model: VaeModel, x) -> LatentGaussian:
    """Posterior of a single count vector (inputs are scaled by the item maximum)."""
    x = check_counts(model, x)
    if x.ndim != 1:
        raise ShapeError("encode takes one observation; use encode_batch for many")
    mu, ls = _encode(model, x)
    return LatentGaussian(mu, ls)


def encode_batch(model: VaeModel, X):
    X = check_counts(model, np.atleast_2d(X))
    mu, ls = _encode(model, X)
    return np.asarray(mu), np.asarray(ls)


def reparam_sample(g: LatentGaussian, eps):
    return g.mu + np.exp(g.log_sigma) * np.asarray(eps, dtype=np.float64)


def decode(model: VaeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("latent value must be finite")
    if z.ndim == 0:
        z = z.reshape(1)
    return np.asarray(model.decoder.forward(z))


def kl_gauss(g) -> float:
    if isinstance(g, LatentGaussian):
        mu, ls = g.mu, g.log_sigma
    else:
        mu, ls = g
    return _kl(mu, ls)


def _kl(mu, log_sigma):
    # -1/2 sum(1 + log s^2 - mu^2 - s^2)
    two_ls = dc.mul(log_sigma, 2.0)
    inner = dc.sub(dc.sub(dc.add(two_ls, 1.0), dc.square(mu)), dc.exp(two_ls))
    return dc.mul(dc.vsum(inner), -0.5)


def poisson_nll(rate, x):
    """sum(rate - x log rate) with rates floored at RATE_FLOOR (x! dropped)."""
    if np.shape(dc._val(rate)) != np.shape(x):
        raise ShapeError(f"rates {np.shape(dc._val(rate))} vs counts {np.shape(x)}")
    lam = dc.add(rate, RATE_FLOOR)
    return dc.vsum(dc.sub(lam, dc.mul(x, dc.log(lam))))


def _loss_terms(model, X, eps, params_enc=None, params_dec=None):
    mu, ls = _encode(model, X, params_enc)
    z = dc.add(mu, dc.mul(dc.exp(ls), eps))
    rates = model.decoder.forward(z, params_dec)
    return _kl(mu, ls), poisson_nll(rates, X)


def vae_loss(model: VaeModel, batch, lam_vae: float, eps=None) -> float:
    """KL + Poisson reconstruction + lam_vae * sum of squared encoder/decoder weights.

    ``eps`` are the standard-normal draws for the reparameterization
    (default zeros, i.e. decode the posterior mean).
    """
    X = check_counts(model, np.atleast_2d(batch))
    if X.shape[0] == 0:
        raise ContractError("empty batch")
    eps = np.zeros((X.shape[0], model.latent_dim)) if eps is None else np.asarray(eps, float)
    kl, rec = _loss_terms(model, X, eps)
    reg = model.encoder.weight_sq_sum() + model.decoder.weight_sq_sum()
    return float(kl + rec + lam_vae * reg)


def loss_and_grad(model: VaeModel, X, lam_vae, eps):
    """Loss and flat gradient (ordering of ``VaeModel.get_flat``)."""
    tape = dc.Tape()
    pe = model.encoder.leaves(tape)
    pd = model.decoder.leaves(tape)
    kl, rec = _loss_terms(model, X, eps, pe, pd)
    reg = dc.add(model.encoder.weight_sq_sum(pe), model.decoder.weight_sq_sum(pd))
    total = dc.add(dc.add(kl, rec), dc.mul(reg, lam_vae))
    leaves = [v for pair in pe + pd for v in pair]
    grads = tape.gradient(total, leaves)
    return float(total.value), np.concatenate([g.ravel() for g in grads])


def train_vae(model: VaeModel, dataset, epochs=1000, lr=3e-3, lam_vae=1e-3, seed=0):
    """Full-batch Adam on the summed loss; one reparameterization draw per row and epoch.

    Returns ``(fitted_model, history)`` with the per-observation mean loss of
    every epoch.  The input model is not modified.
    """
    X = check_counts(model, np.atleast_2d(dataset))
    if X.shape[0] == 0:
        raise ContractError("empty dataset")
    fitted = model.copy()
    rng = np.random.default_rng(seed)
    flat = fitted.get_flat()
    state = dc.AdamState.fresh(flat.size, lr=lr)
    history = []
    n = X.shape[0]
    for epoch in range(epochs):
        eps = rng.standard_normal((n, fitted.latent_dim))
        loss, grad = loss_and_grad(fitted, X, lam_vae, eps)
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"{fitted.modality} VAE loss became non-finite at epoch {epoch}")
        history.append(loss / n)
        flat, state = dc.adam_step(state, flat, grad)
        fitted.set_flat(flat)
        if epoch % 100 == 0:
            log.debug("%s VAE epoch %d loss %.4f", fitted.modality, epoch, loss / n)
    if epochs > 0:
        orient_latent(fitted)
    return fitted, np.array(history)


def orient_latent(model: VaeModel) -> bool:
    """Flip latent signs so that higher counts map to higher latent means.

    The prior is symmetric, so flipping a latent coordinate in both the
    encoder's mean output and the decoder's input leaves the loss unchanged.
    Returns True if any coordinate was flipped.
    """
    lo = np.zeros(model.item_count)
    hi = np.full(model.item_count, float(model.max_count))
    mu_lo, _ = _encode(model, lo)
    mu_hi, _ = _encode(model, hi)
    flip = np.asarray(mu_hi) < np.asarray(mu_lo)
    if not flip.any():
        return False
    sign = np.where(flip, -1.0, 1.0)
    d = model.latent_dim
    last = model.encoder.layers[-1]
    last.weight[:d] *= sign[:, None]
    last.bias[:d] *= sign
    model.decoder.layers[0].weight *= sign[None, :]
    return True
