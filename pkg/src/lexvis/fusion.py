"""Gated attention fusion of text and retrieved-image representations.

Per token i with text vector h_i and projected image slots Mbar_i:

    scores_ij = (h_i . Mbar_ij) / sqrt(d_model)        over valid slots j
    hbar_i    = sum_j softmax(scores_i)_j * Mbar_ij
    lam_i     = sigmoid(w . [h_i ; hbar_i] + b)
    out_i     = (1 - lam_i) * h_i + lam_i * hbar_i

Tokens with no valid image slot pass through untouched: lam_i is forced to 0
and out_i is h_i bit for bit, so a missing dictionary entry can never perturb
the text path. All functions accept an optional leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import ImageTensor
from .transformer import Grads, masked_softmax, softmax_bwd


@dataclass
class FusionParameters:
    proj_weight: np.ndarray  # (d_img, d_model)
    proj_bias: np.ndarray    # (d_model,)
    gate_weight: np.ndarray  # (2 * d_model,)
    gate_bias: np.ndarray    # scalar, kept 0-d for in-place updates

    @property
    def d_img(self) -> int:
        return self.proj_weight.shape[0]

    @property
    def d_model(self) -> int:
        return self.proj_weight.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "fusion.proj_weight": self.proj_weight,
            "fusion.proj_bias": self.proj_bias,
            "fusion.gate_weight": self.gate_weight,
            "fusion.gate_bias": self.gate_bias,
        }


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_fusion_params(d_img: int, d_model: int, seed: int,
                       gate_bias: float = -2.0) -> FusionParameters:
    """Seeded init matching the encoder scheme; the gate starts nearly closed
    (sigmoid(-2) ~ 0.12) so early training stays close to the text-only model.
    """
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_model)
    return FusionParameters(
        proj_weight=rng.uniform(-bound, bound, size=(d_img, d_model)),
        proj_bias=np.zeros(d_model),
        gate_weight=rng.uniform(-bound, bound, size=2 * d_model),
        gate_bias=np.array(float(gate_bias)),
    )


def project(M: ImageTensor, params: FusionParameters) -> np.ndarray:
    """Affine map of image features to text width; masked slots stay zero."""
    values = np.asarray(M.values, dtype=np.float64)
    if values.shape[-1] != params.d_img:
        raise ValueError(
            f"image feature width {values.shape[-1]} != proj input {params.d_img}"
        )
    affine = values @ params.proj_weight + params.proj_bias
    return np.where(M.mask[..., None], affine, 0.0)


def attend(h: np.ndarray, mbar: np.ndarray, mask: np.ndarray):
    """Text-queried attention over projected image slots.

    Returns (hbar, weights); weights are exactly 0 on masked slots and rows
    with no valid slot yield an all-zero hbar.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != mbar.shape[-1] or h.shape[:-1] != mbar.shape[:-2]:
        raise ValueError(f"shape mismatch: h {h.shape} vs projected {mbar.shape}")
    scale = 1.0 / math.sqrt(h.shape[-1])
    scores = np.einsum("...d,...jd->...j", h, mbar) * scale
    weights = masked_softmax(scores, mask)
    hbar = np.einsum("...j,...jd->...d", weights, mbar)
    return hbar, weights


def gate_fuse(h: np.ndarray, hbar: np.ndarray, params: FusionParameters,
              no_image_flags: np.ndarray):
    """Sigmoid-gated convex mix of text and image representations.

    Returns (fused, lam). Where ``no_image_flags`` is set, lam is 0 and the
    fused row is the text row unchanged.
    """
    if h.shape != hbar.shape:
        raise ValueError(f"shape mismatch: {h.shape} vs {hbar.shape}")
    d = h.shape[-1]
    z = (
        np.einsum("...d,d->...", h, params.gate_weight[:d])
        + np.einsum("...d,d->...", hbar, params.gate_weight[d:])
        + params.gate_bias
    )
    lam = np.where(no_image_flags, 0.0, _sigmoid(np.asarray(z)))
    mixed = (1.0 - lam)[..., None] * h + lam[..., None] * hbar
    fused = np.where(no_image_flags[..., None], h, mixed)
    return fused, lam


def fusion_forward(h: np.ndarray, M: ImageTensor, params: FusionParameters):
    """Compose project -> attend -> gate; returns (fused, cache)."""
    h = np.asarray(h, dtype=np.float64)
    mask = np.asarray(M.mask, dtype=bool)
    values = np.asarray(M.values, dtype=np.float64)
    mbar = project(ImageTensor(values=values, mask=mask), params)
    no_image = ~mask.any(axis=-1)
    hbar, weights = attend(h, mbar, mask)
    fused, lam = gate_fuse(h, hbar, params, no_image)
    cache = {
        "h": h, "values": values, "mask": mask, "mbar": mbar,
        "weights": weights, "hbar": hbar, "lam": lam,
        "no_image": no_image, "params": params,
    }
    return fused, cache


def fusion_backward(cache: dict, dfused: np.ndarray):
    """Exact gradients of the fused output.

    Returns (dh, dvalues, grads) with grads keyed fusion.proj_weight,
    fusion.proj_bias, fusion.gate_weight, fusion.gate_bias. Masked image
    slots receive zero gradient, and pass-through tokens propagate dfused to
    the text path untouched.
    """
    p: FusionParameters = cache["params"]
    h, hbar, lam = cache["h"], cache["hbar"], cache["lam"]
    mask, mbar, weights = cache["mask"], cache["mbar"], cache["weights"]
    d = h.shape[-1]
    scale = 1.0 / math.sqrt(d)

    # gate: out = (1-lam) h + lam hbar; lam = sigmoid(z), forced 0 on no-image
    dlam = np.einsum("...d,...d->...", dfused, hbar - h)
    dh = dfused * (1.0 - lam)[..., None]
    dhbar = dfused * lam[..., None]
    dz = dlam * lam * (1.0 - lam)  # exactly 0 where lam was forced to 0
    dw_h = (dz[..., None] * h).reshape(-1, d).sum(axis=0)
    dw_hbar = (dz[..., None] * hbar).reshape(-1, d).sum(axis=0)
    dgate_w = np.concatenate([dw_h, dw_hbar])
    dgate_b = np.asarray(dz.sum())
    dh = dh + dz[..., None] * p.gate_weight[:d]
    dhbar = dhbar + dz[..., None] * p.gate_weight[d:]

    # attention: hbar = sum_j weights_j mbar_j
    dweights = np.einsum("...d,...jd->...j", dhbar, mbar)
    dmbar = np.einsum("...j,...d->...jd", weights, dhbar)
    dscores = softmax_bwd(dweights, weights) * scale
    dh = dh + np.einsum("...j,...jd->...d", dscores, mbar)
    dmbar = dmbar + np.einsum("...j,...d->...jd", dscores, h)

    # projection: mbar = (values @ W + b) * mask
    daff = np.where(mask[..., None], dmbar, 0.0)
    d_img = cache["values"].shape[-1]
    dproj_w = cache["values"].reshape(-1, d_img).T @ daff.reshape(-1, d)
    dproj_b = daff.reshape(-1, d).sum(axis=0)
    dvalues = np.where(mask[..., None], daff @ p.proj_weight.T, 0.0)

    grads: Grads = {
        "fusion.proj_weight": dproj_w,
        "fusion.proj_bias": dproj_b,
        "fusion.gate_weight": dgate_w,
        "fusion.gate_bias": dgate_b,
    }
    return dh, dvalues, grads
