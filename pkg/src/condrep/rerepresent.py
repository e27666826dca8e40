"""Re-representation learner: fuse each conditional matrix with its prototype
map, compress, self-attend, and pool to the final C-dimensional vector.

Structures:
  siamese      one shared parameter set serves both sides (default)
  non_siamese  independent parameter sets fixed to the support / query sides
  non_residual the conditional matrix alone (W x H x 1) is fed forward,
               without the prototype features
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditional import conditional_forward
from .exceptions import ConfigError, DimensionError

STRUCTURES = ("siamese", "non_siamese", "non_residual")


def init_rerep_params(channels: int, structure: str = "siamese", seed: int = 0) -> dict[str, Tensor]:
    """Parameter set(s) for the re-representation learner."""
    if structure not in STRUCTURES:
        raise ConfigError(f"rerepresent: unknown structure '{structure}'")
    in_dim = 1 if structure == "non_residual" else channels + 1
    if structure == "non_siamese":
        rng_s = np.random.default_rng(np.random.SeedSequence([0x7272, seed, 0]))
        rng_q = np.random.default_rng(np.random.SeedSequence([0x7272, seed, 1]))
        params = {f"support.{k}": v for k, v in _one_side(channels, in_dim, rng_s).items()}
        params.update({f"query.{k}": v for k, v in _one_side(channels, in_dim, rng_q).items()})
        return params
    rng = np.random.default_rng(np.random.SeedSequence([0x7272, seed, 0]))
    return _one_side(channels, in_dim, rng)


def _one_side(c: int, in_dim: int, rng) -> dict[str, Tensor]:
    def normal(shape, scale):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    # beta/b1 start at small random values rather than zero: early batches can
    # produce identical relu gate patterns on the two siamese sides, which makes
    # exactly-zero gradients for pure shifts; a nonzero start keeps them live
    # under weight decay until the gate patterns diversify.
    # final.w2 is drawn at 0.25/sqrt(C): pair distances scale quadratically with
    # it, and this start puts every pair inside the contrastive margin (all
    # hinges active) without the rank-collapse that deeper shrinking causes.
    return {
        "compress.weight": normal((in_dim, c), np.sqrt(2.0 / in_dim)),
        "compress.bias": Tensor(np.zeros(c), requires_grad=True),
        "attn.wq": normal((c, c), np.sqrt(1.0 / c)),
        "attn.wk": normal((c, c), np.sqrt(1.0 / c)),
        "attn.wv": normal((c, c), np.sqrt(1.0 / c)),
        "final.gamma": Tensor(np.ones(c), requires_grad=True),
        "final.beta": normal((c,), 0.02),
        "final.w1": normal((c, c), np.sqrt(2.0 / c)),
        "final.b1": normal((c,), 0.02),
        "final.w2": normal((c, c), 0.25 / np.sqrt(c)),
    }


def fuse_conditional(f, w) -> Tensor:
    """Append the conditional matrix as one extra channel: (..., W, H, C+1)."""
    f, w = ad.as_tensor(f), ad.as_tensor(w)
    if f.ndim < 3 or f.shape[:-1] != w.shape:
        raise DimensionError(f"fuse_conditional: spatial shapes differ, feature "
                             f"{f.shape} vs matrix {w.shape}")
    return ad.concat([f, ad.reshape(w, w.shape + (1,))], axis=-1)


def mlp_compress(x, params: dict[str, Tensor]) -> Tensor:
    """Per-position affine (C_in -> C) + relu, flattened to (..., W*H, C)."""
    x = ad.as_tensor(x)
    weight, bias = params["compress.weight"], params["compress.bias"]
    if x.ndim < 3 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"mlp_compress: input {x.shape} does not match weight "
                             f"{weight.shape}")
    w, h = x.shape[-3], x.shape[-2]
    flat = ad.reshape(x, x.shape[:-3] + (w * h, x.shape[-1]))
    return ad.relu(ad.add(ad.matmul(flat, weight), bias))


def self_attend(f_prime, params: dict[str, Tensor]) -> Tensor:
    """Single-head scaled dot-product self-attention over positions."""
    fp = ad.as_tensor(f_prime)
    wq, wk, wv = params["attn.wq"], params["attn.wk"], params["attn.wv"]
    c = fp.shape[-1]
    for name, m in (("wq", wq), ("wk", wk), ("wv", wv)):
        if m.shape != (c, c):
            raise DimensionError(f"self_attend: {name} shape {m.shape} does not match "
                                 f"channels {c}")
    q, k, v = ad.matmul(fp, wq), ad.matmul(fp, wk), ad.matmul(fp, wv)
    swap = list(range(k.ndim))
    swap[-1], swap[-2] = swap[-2], swap[-1]
    scores = ad.mul(ad.matmul(q, ad.permute(k, tuple(swap))), c ** -0.5)
    return ad.matmul(ad.softmax_lastdim(scores), v)


def finalize_vector(f_prime, f_hat, params: dict[str, Tensor]) -> Tensor:
    """Residual add, layer norm, two-layer MLP, mean-pool over positions.

    The second MLP layer carries no bias: under a siamese distance loss an
    output bias shifts both sides' vectors identically, so it can never
    receive gradient and never influence a distance.
    """
    fp, fh = ad.as_tensor(f_prime), ad.as_tensor(f_hat)
    if fp.shape != fh.shape:
        raise DimensionError(f"finalize_vector: shapes {fp.shape} and {fh.shape} differ")
    x = ad.layer_norm(ad.add(fp, fh), params["final.gamma"], params["final.beta"])
    h = ad.relu(ad.add(ad.matmul(x, params["final.w1"]), params["final.b1"]))
    y = ad.matmul(h, params["final.w2"])
    return ad.mean(y, axis=y.ndim - 2)


def _represent_side(feature, matrix, params: dict[str, Tensor], residual: bool) -> Tensor:
    fused = fuse_conditional(feature, matrix) if residual \
        else ad.reshape(matrix, matrix.shape + (1,))
    f_prime = mlp_compress(fused, params)
    f_hat = self_attend(f_prime, params)
    return finalize_vector(f_prime, f_hat, params)


def re_represent_pair(fs, fq, model, structure: str | None = None):
    """Produce the final (F_support, F_query) vectors for a prototype pair.

    ``model`` provides the conditional kernel and the re-representation
    parameter set(s); ``structure`` defaults to the model's own.
    """
    structure = structure or model.structure
    if structure not in STRUCTURES:
        raise ConfigError(f"re_represent_pair: unknown structure '{structure}'")
    if structure != model.structure:
        raise ConfigError(f"re_represent_pair: model was built for structure "
                          f"'{model.structure}', not '{structure}'")
    cond = conditional_forward(fs, fq, model.kernel)
    residual = structure != "non_residual"
    if structure == "non_siamese":
        side_s = {k[len("support."):]: v for k, v in model.rerep.items()
                  if k.startswith("support.")}
        side_q = {k[len("query."):]: v for k, v in model.rerep.items()
                  if k.startswith("query.")}
    else:
        side_s = side_q = model.rerep
    f_s = _represent_side(cond.support_feature, cond.support_matrix, side_s, residual)
    f_q = _represent_side(cond.query_feature, cond.query_matrix, side_q, residual)
    return f_s, f_q
