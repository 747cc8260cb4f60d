"""Prefix tuning, LoRA and Flamingo-style gated tuning over an :class:`MMGLModel`."""

import enum
from dataclasses import dataclass

import numpy as np

from .assembly import NeighborEncoding
from .lm import ConfigError


class PeftKind(enum.Enum):
    FULL = "full"
    PREFIX = "prefix"
    LORA = "lora"
    FLAMINGO = "flamingo"


@dataclass(frozen=True)
class PeftMode:
    kind: PeftKind = PeftKind.FULL
    prefix_len: int = 8
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PeftKind(self.kind) if not isinstance(self.kind, PeftKind)
                           else self.kind)

    @classmethod
    def parse(cls, value, **overrides):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_tuning", "").replace(" tuning", "")
        return cls(PeftKind(key), **overrides)

    @property
    def label(self):
        return self.kind.value


PAIRING_RULE = ("Prefix tuning and LoRA apply to self-attention neighbor encodings (SA_TE, SA_E); "
                "Flamingo tuning applies to cross-attention (CA_E)")


def check_pairing(encoding, mode, cross_attention=None):
    """Raise ConfigError for an (encoding, PEFT) pairing outside the supported set."""
    encoding = NeighborEncoding.parse(encoding)
    kind = mode.kind
    if kind in (PeftKind.PREFIX, PeftKind.LORA) and encoding is NeighborEncoding.CA_E:
        raise ConfigError(f"{kind.value} with {encoding.name} is not a legal pairing: {PAIRING_RULE}")
    if kind is PeftKind.FLAMINGO and encoding is not NeighborEncoding.CA_E:
        raise ConfigError(f"flamingo with {encoding.name} is not a legal pairing: {PAIRING_RULE}")
    if kind is PeftKind.FLAMINGO and cross_attention is False:
        raise ConfigError(f"flamingo needs cross_attention=True: {PAIRING_RULE}")


def lora_wrap(model, layer, proj, rank, alpha):
    """Attach a rank-``rank`` adapter to ``layers.{layer}.attn.{proj}``.

    A is Gaussian, B is zero, so the wrapped projection starts equal to the base.
    """
    base = model.params[f"layers.{layer}.attn.{proj}.w"]
    d_in, d_out = base.shape
    if rank < 1 or rank > min(d_in, d_out):
        raise ConfigError(f"LoRA rank {rank} outside [1, {min(d_in, d_out)}]")
    model.add_param(f"lora.{layer}.{proj}.A", (d_in, rank), std=1.0 / np.sqrt(d_in))
    model.add_param(f"lora.{layer}.{proj}.B", (rank, d_out), "zeros")
    model.lora_scaling = alpha / rank


def prefix_inject(model, prefix_len):
    """Per-layer trainable key/value rows prepended inside self-attention."""
    if prefix_len < 0:
        raise ConfigError("prefix length must be non-negative")
    for i in range(model.cfg.n_layers):
        model.add_param(f"prefix.{i}.k", (prefix_len, model.cfg.d_model))
        model.add_param(f"prefix.{i}.v", (prefix_len, model.cfg.d_model))


# which parameter groups train in each mode; mappers and PE train everywhere
TRAINABLE_GROUPS = {
    PeftKind.FULL: {"lm", "cross", "mapper", "pe"},
    PeftKind.PREFIX: {"prefix", "mapper", "pe"},
    PeftKind.LORA: {"lora", "mapper", "pe"},
    PeftKind.FLAMINGO: {"cross", "mapper", "pe"},
}


def apply_peft(model, mode, encoding=None):
    """Add the mode's parameters to ``model`` and set the trainable partition."""
    if model.peft is not None:
        raise ConfigError("PEFT already applied to this model")
    if encoding is not None:
        check_pairing(encoding, mode, model.cfg.cross_attention)
    if mode.kind is PeftKind.FLAMINGO and not model.cfg.cross_attention:
        raise ConfigError(f"flamingo needs cross_attention=True: {PAIRING_RULE}")
    if mode.kind is PeftKind.LORA:
        for i in range(model.cfg.n_layers):
            for proj in ("q", "v"):
                lora_wrap(model, i, proj, mode.rank, mode.alpha)
    elif mode.kind is PeftKind.PREFIX:
        prefix_inject(model, mode.prefix_len)
    model.peft = mode
    return configure_trainables(model, mode)


def configure_trainables(model, mode):
    groups = TRAINABLE_GROUPS[mode.kind]
    trainable, frozen = [], []
    for name, p in model.params.items():
        on = model.group_of(name) in groups
        p.set_requires_grad(on)
        (trainable if on else frozen).append(name)
    return trainable, frozen


def count_params(model):
    trainable = int(sum(p.data.size for p in model.params.values() if p.requires_grad))
    total = model.n_params()
    return {"trainable": trainable, "total": total, "fraction": trainable / total}


def group_counts(model):
    out = {}
    for name, p in model.params.items():
        g = model.group_of(name)
        out[g] = out.get(g, 0) + int(p.data.size)
    return out


def perturb_for_gradcheck(model, scale=0.1, seed=0):
    """Move zero-initialized PEFT tensors off zero so their gradients are informative."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith((".gate_attn", ".gate_ff")):
            p.data[...] = scale
        elif name.startswith("lora.") and name.endswith(".B"):
            p.data[...] = rng.standard_normal(p.shape) * scale
