"""Run configuration: one legal (regime, encoding, PE, PEFT) cell plus training knobs."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from ..assembly import NeighborEncoding, REGIME_CAPS
from ..graph_pe import PEConfig, PEKind
from ..graphdoc import ContextRegime, SynthParams
from ..lm import ModelConfig
from ..peft import PeftKind, PeftMode, check_pairing


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    regime: ContextRegime = ContextRegime.PAGE_ALL
    encoding: NeighborEncoding = NeighborEncoding.SA_TE
    pe: PEConfig = field(default_factory=PEConfig)
    peft: PeftMode = field(default_factory=PeftMode)
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    eval_every: int = 200
    summary_allowance: int = 32
    max_new: int = 16
    # None: 1024 for SA_TE with page context, 512 otherwise
    max_seq_len: int | None = None
    data_dir: str | None = None
    synth: SynthParams = field(default_factory=SynthParams)
    n_val_pages: int = 32
    data_seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.regime = ContextRegime.parse(self.regime)
        self.encoding = NeighborEncoding.parse(self.encoding)

    def validate(self):
        check_pairing(self.encoding, self.peft)
        if self.max_new + 1 > self.summary_allowance:
            raise ValueError("max_new must leave room for <bos> inside summary_allowance")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        return self

    @property
    def seq_len(self):
        if self.max_seq_len is not None:
            return self.max_seq_len
        if self.encoding is NeighborEncoding.SA_TE and self.regime.uses_page:
            return REGIME_CAPS[NeighborEncoding.SA_TE]
        return REGIME_CAPS[NeighborEncoding.SA_E]

    def model_config(self, vocab_size=None):
        return dataclasses.replace(
            self.model,
            vocab_size=vocab_size or self.model.vocab_size,
            max_seq_len=self.seq_len,
            cross_attention=self.encoding is NeighborEncoding.CA_E,
            d_img=self.synth.d_img if self.data_dir is None else self.model.d_img,
        )

    def to_dict(self):
        return {
            "model": dataclasses.asdict(self.model),
            "regime": self.regime.value,
            "encoding": self.encoding.value,
            "pe": {**dataclasses.asdict(self.pe), "kind": self.pe.kind.value},
            "peft": {**dataclasses.asdict(self.peft), "kind": self.peft.kind.value},
            "steps": self.steps, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "seed": self.seed,
            "eval_every": self.eval_every, "summary_allowance": self.summary_allowance,
            "max_new": self.max_new, "max_seq_len": self.max_seq_len,
            "data_dir": self.data_dir, "synth": dataclasses.asdict(self.synth),
            "n_val_pages": self.n_val_pages, "data_seed": self.data_seed, "out": self.out,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        if "model" in d:
            kw["model"] = ModelConfig(**d.pop("model"))
        if "pe" in d:
            pe = d.pop("pe")
            kw["pe"] = PEConfig(**pe) if isinstance(pe, dict) else PEConfig(PEKind.parse(pe))
        if "peft" in d:
            peft = d.pop("peft")
            if isinstance(peft, dict):
                peft = dict(peft)
                kw["peft"] = PeftMode.parse(peft.pop("kind", "full"), **peft)
            else:
                kw["peft"] = PeftMode.parse(peft)
        if "synth" in d:
            kw["synth"] = SynthParams(**d.pop("synth"))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw, **d)

    def with_overrides(self, overrides):
        """Apply dotted ``key=value`` overrides (values parsed as JSON when possible)."""
        d = self.to_dict()
        for key, value in overrides.items():
            if isinstance(value, str):
                try:
                    value = json.loads(value)
                except json.JSONDecodeError:
                    pass
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    node[p] = {} if node.get(p) is None else {"kind": node[p]}
                node = node[p]
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    @property
    def config_id(self):
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:10]

    def label(self):
        return (f"{self.regime.value}/{self.encoding.value}/{self.pe.kind.value}/"
                f"{self.peft.kind.value}")


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


def gradcheck_config(**overrides):
    """A tiny model (a few thousand parameters) for finite-difference sweeps."""
    base = RunConfig(
        model=ModelConfig(vocab_size=48, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                          d_enc=8, d_img=8, init_std=0.3),
        pe=PEConfig(k=3, table_size=16),
        peft=PeftMode(prefix_len=2, rank=2, alpha=4.0),
        synth=SynthParams(n_pages=4, sections_per_page=3, tokens_per_section=4, vocab_size=48,
                          n_topics=8, d_img=8, leak_count=2, title_tokens=1, caption_tokens=1),
        max_seq_len=64, summary_allowance=8, max_new=4, steps=0, batch_size=2,
    )
    return dataclasses.replace(base, **overrides)


__all__ = ["RunConfig", "load_config", "gradcheck_config", "PeftKind", "PEKind"]
