"""Frozen text/image encoders (seeded projections) and the trainable linear mappers."""

import enum

import numpy as np

from . import autodiff as ad


class EncoderKind(enum.Enum):
    TEXT = "text"
    IMAGE = "image"


def _l2_normalize(x):
    norm = np.linalg.norm(x)
    return x / norm if norm > 0 else x


class FrozenEncoder:
    """Fixed Gaussian projection ``d_in -> d_enc``; never trainable.

    Text encoders index rows by token id and mean-pool; image encoders apply
    the projection to a feature vector. Both L2-normalize the result.
    """

    def __init__(self, kind, d_in, d_enc=64, seed=0):
        self.kind = EncoderKind(kind)
        self.d_in = d_in
        self.d_enc = d_enc
        self.seed = seed
        rng = np.random.default_rng([seed, 0xE2C, 0 if self.kind is EncoderKind.TEXT else 1])
        proj = rng.standard_normal((d_in, d_enc))
        proj.setflags(write=False)
        self.projection = proj

    def encode(self, x):
        if self.kind is EncoderKind.TEXT:
            return encode_text(x, self)
        return encode_image(x, self)


def encode_text(tokens, enc):
    if enc.kind is not EncoderKind.TEXT:
        raise ValueError("encode_text needs a text encoder")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        return np.zeros(enc.d_enc)
    return _l2_normalize(enc.projection[tokens].mean(axis=0))


def encode_image(feature, enc):
    if enc.kind is not EncoderKind.IMAGE:
        raise ValueError("encode_image needs an image encoder")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (enc.d_in,):
        raise ad.ShapeError(f"image feature shape {feature.shape} != ({enc.d_in},)")
    return _l2_normalize(feature @ enc.projection)


class Mapper:
    """One linear layer ``d_enc -> d_model`` holding references to model parameters."""

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight, self.bias]


def map_to_lm(e, m):
    """``e @ W + b`` for one vector or a stack of rows; differentiable in W and b."""
    e = ad.as_tensor(e)
    squeeze = e.ndim == 1
    if squeeze:
        e = ad.reshape(e, (1, e.shape[0]))
    if e.shape[1] != m.d_in:
        raise ad.ShapeError(f"mapper expects width {m.d_in}, got {e.shape[1]}")
    out = ad.add(ad.matmul(e, m.weight), m.bias)
    return ad.reshape(out, (m.d_out,)) if squeeze else out
