"""Mini decoder-only LM with optional gated cross-attention, plus the neighbor pathway.

All trainable state lives in ``MMGLModel.params`` (ordered name -> Tensor), so
PEFT partitioning, checkpointing and finite-difference sweeps work by name.
"""

import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .encoders import EncoderKind, FrozenEncoder, Mapper, map_to_lm
from .graph_pe import PEConfig, PEKind, gnn_pe, lpe_vectors, sequence_pe
from .graphdoc import EOS


class ConfigError(ValueError):
    pass


class SequenceOverflow(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2048
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    cross_attention: bool = False
    # a gated cross-attention block precedes every ``cross_stride``-th decoder layer
    cross_stride: int = 1
    seed: int = 0
    d_enc: int = 64
    d_img: int = 32
    init_std: float = 0.02
    # tied embedding/output table; larger than init_std so logits can sharpen at lr 1e-4
    emb_std: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.d_ff, self.max_seq_len,
               self.cross_stride, self.d_enc, self.d_img) < 1:
            raise ConfigError("model dimensions must be positive")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)


def _param_rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class MMGLModel:
    """LM core + text/image mappers + graph-PE parameters (+ PEFT parameters once applied)."""

    def __init__(self, cfg, pe=None):
        self.cfg = cfg
        self.pe = pe or PEConfig()
        self.params = OrderedDict()
        self.peft = None
        self.lora_scaling = 0.0
        self.text_encoder = FrozenEncoder(EncoderKind.TEXT, cfg.vocab_size, cfg.d_enc, seed=cfg.seed * 2 + 1)
        self.image_encoder = FrozenEncoder(EncoderKind.IMAGE, cfg.d_img, cfg.d_enc, seed=cfg.seed * 2 + 2)
        self._build()

    # construction ----------------------------------------------------------

    def add_param(self, name, shape, init="normal", std=None):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            std = self.cfg.init_std if std is None else std
            data = _param_rng(self.cfg.seed, name).standard_normal(shape) * std
        t = ad.Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _linear(self, prefix, d_in, d_out, std=None):
        self.add_param(f"{prefix}.w", (d_in, d_out), std=std)
        self.add_param(f"{prefix}.b", (d_out,), "zeros")

    def _norm(self, prefix, d):
        self.add_param(f"{prefix}.g", (d,), "ones")
        self.add_param(f"{prefix}.b", (d,), "zeros")

    def _attention(self, prefix, d, out_std):
        for proj in ("q", "k", "v"):
            self._linear(f"{prefix}.{proj}", d, d)
        self._linear(f"{prefix}.o", d, d, std=out_std)

    def _build(self):
        c = self.cfg
        d = c.d_model
        out_std = c.init_std / math.sqrt(2 * c.n_layers)
        self.add_param("tok_emb", (c.vocab_size, d), std=c.emb_std)
        self.add_param("pos_emb", (c.max_seq_len, d), std=c.init_std / 2)
        for i in range(c.n_layers):
            if c.cross_attention and i % c.cross_stride == 0:
                x = f"xattn.{i}"
                self._norm(f"{x}.ln", d)
                self._attention(f"{x}.attn", d, out_std)
                self._norm(f"{x}.ln_ff", d)
                self._linear(f"{x}.ff1", d, c.d_ff)
                self._linear(f"{x}.ff2", c.d_ff, d, std=out_std)
                self.add_param(f"{x}.gate_attn", (), "zeros")
                self.add_param(f"{x}.gate_ff", (), "zeros")
            p = f"layers.{i}"
            self._norm(f"{p}.ln1", d)
            self._attention(f"{p}.attn", d, out_std)
            self._norm(f"{p}.ln2", d)
            self._linear(f"{p}.ff1", d, c.d_ff)
            self._linear(f"{p}.ff2", c.d_ff, d, std=out_std)
        self._norm("ln_f", d)
        self._linear("mapper.text", c.d_enc, d)
        self._linear("mapper.image", c.d_enc, d)
        if self.pe.kind is PEKind.SEQUENCE:
            self.add_param("pe.seq.table", (self.pe.table_size, d))
        elif self.pe.kind is PEKind.LPE:
            self._linear("pe.lpe", self.pe.k, d)
        else:
            for layer in range(self.pe.gnn_layers):
                self._linear(f"pe.gnn.{layer}", d, d, std=1.0 / math.sqrt(d))

    # parameter groups ------------------------------------------------------

    def mapper(self, kind):
        return Mapper(self.params[f"mapper.{kind}.w"], self.params[f"mapper.{kind}.b"])

    @property
    def lpe_mapper(self):
        return Mapper(self.params["pe.lpe.w"], self.params["pe.lpe.b"])

    def group_of(self, name):
        """Which functional group a parameter belongs to."""
        head = name.split(".", 1)[0]
        return {"mapper": "mapper", "pe": "pe", "xattn": "cross", "lora": "lora",
                "prefix": "prefix"}.get(head, "lm")

    def trainable(self):
        return [p for p in self.params.values() if p.requires_grad]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_params(self):
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state, strict=True):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if strict and (missing or extra):
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            p = self.params[k]
            if tuple(v.shape) != p.shape:
                raise ConfigError(f"checkpoint tensor {k} has shape {tuple(v.shape)}, model expects {p.shape}")
            p.data[...] = v

    # neighbor pathway ------------------------------------------------------

    def element_embeddings(self, inp):
        """Mapped neighbor/target encodings, one d_model row per context element."""
        enc = inp.encodings
        img = np.asarray(inp.is_image, dtype=bool)
        t_idx = np.flatnonzero(~img)
        i_idx = np.flatnonzero(img)
        parts = []
        if t_idx.size:
            parts.append(map_to_lm(enc[t_idx], self.mapper("text")))
        if i_idx.size:
            parts.append(map_to_lm(enc[i_idx], self.mapper("image")))
        stacked = parts[0] if len(parts) == 1 else ad.concat(parts)
        if i_idx.size and t_idx.size:
            inverse = np.argsort(np.concatenate([t_idx, i_idx]), kind="stable")
            stacked = ad.take_rows(stacked, inverse)
        return stacked

    def element_pe(self, inp, mapped):
        n = len(inp.elements)
        if self.pe.kind is PEKind.SEQUENCE:
            return sequence_pe(n, self.params["pe.seq.table"])
        if self.pe.kind is PEKind.LPE:
            return lpe_vectors(inp.graph, self.pe, self.lpe_mapper, inp.lpe_features(self.pe.k))
        layers = [(self.params[f"pe.gnn.{l}.w"], self.params[f"pe.gnn.{l}.b"])
                  for l in range(self.pe.gnn_layers)]
        return gnn_pe(mapped, inp.graph, layers)

    # blocks ----------------------------------------------------------------

    def _lin(self, prefix, x):
        return ad.add(ad.matmul(x, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    def _ln(self, prefix, x):
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"], self.cfg.ln_eps)

    def _proj(self, layer, prefix, name, x):
        y = self._lin(f"{prefix}.{name}", x)
        lora_a = self.params.get(f"lora.{layer}.{name}.A")
        if lora_a is not None:
            lora_b = self.params[f"lora.{layer}.{name}.B"]
            y = ad.add(y, ad.mul(ad.matmul(ad.matmul(x, lora_a), lora_b), self.lora_scaling))
        return y

    def _split_heads(self, t):
        n = t.shape[0]
        return ad.transpose(ad.reshape(t, (n, self.cfg.n_heads, self.cfg.d_head)), (1, 0, 2))

    def _merge_heads(self, t):
        n = t.shape[1]
        return ad.reshape(ad.transpose(t, (1, 0, 2)), (n, self.cfg.d_model))

    def self_attention(self, i, h):
        prefix = f"layers.{i}.attn"
        q = self._proj(i, prefix, "q", h)
        k = self._proj(i, prefix, "k", h)
        v = self._proj(i, prefix, "v", h)
        n_prefix = 0
        pk = self.params.get(f"prefix.{i}.k")
        if pk is not None and pk.shape[0] > 0:
            n_prefix = pk.shape[0]
            k = ad.concat([pk, k])
            v = ad.concat([self.params[f"prefix.{i}.v"], v])
        t = h.shape[0]
        mask = ad.causal_mask(t, t + n_prefix, n_prefix)
        out = ad.scaled_dot_attention(self._split_heads(q), self._split_heads(k), self._split_heads(v), mask)
        return self._lin(f"{prefix}.o", self._merge_heads(out))

    def cross_block(self, i, x, memory):
        p = f"xattn.{i}"
        h = self._ln(f"{p}.ln", x)
        q = self._lin(f"{p}.attn.q", h)
        k = self._lin(f"{p}.attn.k", memory)
        v = self._lin(f"{p}.attn.v", memory)
        att = self._lin(f"{p}.attn.o", self._merge_heads(
            ad.scaled_dot_attention(self._split_heads(q), self._split_heads(k), self._split_heads(v))))
        x = ad.add(x, ad.mul(ad.tanh(self.params[f"{p}.gate_attn"]), att))
        ff = self._lin(f"{p}.ff2", ad.gelu(self._lin(f"{p}.ff1", self._ln(f"{p}.ln_ff", x))))
        return ad.add(x, ad.mul(ad.tanh(self.params[f"{p}.gate_ff"]), ff))

    def decoder_layer(self, i, x):
        p = f"layers.{i}"
        x = ad.add(x, self.self_attention(i, self._ln(f"{p}.ln1", x)))
        ff = self._lin(f"{p}.ff2", ad.gelu(self._lin(f"{p}.ff1", self._ln(f"{p}.ln2", x))))
        return ad.add(x, ff)

    # forward ---------------------------------------------------------------

    def forward(self, inp, rows=None):
        """Logits for every sequence row (or only ``rows``)."""
        c = self.cfg
        t = len(inp.tokens)
        if t > c.max_seq_len:
            raise SequenceOverflow(f"sequence of {t} rows exceeds max_seq_len={c.max_seq_len}")
        if c.cross_attention != (inp.memory is not None):
            raise ConfigError("memory rows must be present iff cross_attention is enabled")
        mapped = self.element_embeddings(inp)
        pe = self.element_pe(inp, mapped)

        tok_emb = self.params["tok_emb"]
        index = np.asarray(inp.tokens, dtype=np.int64).copy()
        for pos, el in inp.embed_rows:
            index[pos] = c.vocab_size + el
        table = ad.concat([tok_emb, mapped]) if inp.embed_rows else tok_emb
        x = ad.take_rows(table, index)
        x = ad.add(x, ad.take_rows(self.params["pos_emb"], np.arange(t)))
        row_el = np.asarray(inp.row_element, dtype=np.int64)
        if (row_el >= 0).any():
            pe_rows = ad.take_rows(ad.concat([np.zeros((1, c.d_model)), pe]), row_el + 1)
            x = ad.add(x, pe_rows)

        memory = None
        if inp.memory is not None and len(inp.memory):
            memory = ad.take_rows(ad.add(mapped, pe), np.asarray(inp.memory, dtype=np.int64))

        for i in range(c.n_layers):
            if memory is not None and f"xattn.{i}.gate_attn" in self.params:
                x = self.cross_block(i, x, memory)
            x = self.decoder_layer(i, x)
        x = self._ln("ln_f", x)
        if rows is not None:
            x = ad.take_rows(x, rows)
        return ad.matmul(x, ad.transpose(tok_emb))

    __call__ = forward

    def loss(self, inp):
        rows = np.flatnonzero(inp.loss_mask)
        return lm_loss(self.forward(inp, rows=rows), inp.targets[rows], None)

    def generate_greedy(self, prompt, max_new):
        return generate_greedy(prompt, self, max_new)


def lm_loss(logits, target_tokens, loss_mask=None):
    """Mean cross-entropy over masked rows (all rows when ``loss_mask`` is None)."""
    targets = np.asarray(target_tokens, dtype=np.int64)
    if loss_mask is not None:
        rows = np.flatnonzero(loss_mask)
        if rows.size == 0:
            raise ValueError("loss mask selects no positions")
        logits = ad.take_rows(logits, rows)
        targets = targets[rows]
    if targets.size == 0:
        raise ValueError("loss mask selects no positions")
    return ad.cross_entropy(logits, targets)


def generate_greedy(prompt, model, max_new):
    """Argmax decoding from an assembled prompt until EOS or ``max_new`` tokens."""
    if max_new < 0:
        raise ValueError("max_new must be non-negative")
    if len(prompt.tokens) + max_new > model.cfg.max_seq_len:
        raise SequenceOverflow(
            f"prompt of {len(prompt.tokens)} rows plus {max_new} new tokens exceeds "
            f"max_seq_len={model.cfg.max_seq_len}")
    out = []
    cur = prompt
    for _ in range(max_new):
        logits = model.forward(cur, rows=[len(cur.tokens) - 1]).data[0]
        tok = int(np.argmax(logits))
        if tok == EOS:
            break
        out.append(tok)
        cur = cur.extended(tok)
    return out


# checkpoints ---------------------------------------------------------------

MAGIC = b"MMGL1"


def save_checkpoint(path, params):
    """Write named tensors as little-endian float32 in the MMGL1 layout."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, ad.Tensor) else np.asarray(value)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an MMGL1 checkpoint")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    out = OrderedDict()
    for _ in range(count):
        (n,) = take("<I")
        name = blob[off:off + n].decode("utf-8")
        off += n
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out
