"""LM-ready inputs for the three neighbor encodings (raw text, embedding rows, cross-attention memory)."""

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .encoders import encode_image, encode_text
from .graph_pe import build_context_graph, lpe_features
from .graphdoc import BOS, EOS, PAD, SEP, NodeKind, select_context


class NeighborEncoding(enum.Enum):
    SA_TE = "sa_te"
    SA_E = "sa_e"
    CA_E = "ca_e"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_").replace("+", "")
        aliases = {"sa_text_embeddings": "sa_te", "sa_textembeddings": "sa_te",
                   "sa_embeddings": "sa_e", "ca_embeddings": "ca_e"}
        key = aliases.get(key, key)
        for member in cls:
            if key == member.value:
                return member
        raise ValueError(f"unknown neighbor encoding {value!r}")


# Longest input each encoding is allowed (raw neighbor text needs the longer window).
REGIME_CAPS = {NeighborEncoding.SA_TE: 1024, NeighborEncoding.SA_E: 512, NeighborEncoding.CA_E: 512}


def cap_for(encoding, max_seq_len=None):
    cap = REGIME_CAPS[NeighborEncoding.parse(encoding)]
    return cap if max_seq_len is None else min(cap, max_seq_len)


class AssemblyError(ValueError):
    pass


@dataclass
class AssembledInput:
    """One example laid out for the LM.

    ``tokens[i]`` is the token at row ``i`` (PAD where an element embedding is
    injected, see ``embed_rows``). ``row_element[i]`` names the context element
    whose graph PE is added to row ``i`` (-1: none). Elements are the
    neighbors in canonical order followed by the target; ``encodings`` holds
    their frozen encoder outputs, which the model maps to d_model.
    """

    encoding: NeighborEncoding
    tokens: np.ndarray
    row_element: np.ndarray
    embed_rows: tuple
    memory: tuple | None
    elements: tuple
    is_image: np.ndarray
    encodings: np.ndarray
    graph: object
    targets: np.ndarray
    loss_mask: np.ndarray
    prompt_len: int
    summary: tuple = ()
    _lpe: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.tokens)

    @property
    def n_neighbors(self):
        return len(self.elements) - 1

    def lpe_features(self, k):
        if k not in self._lpe:
            self._lpe[k] = lpe_features(self.graph, k)
        return self._lpe[k]

    def prompt(self):
        """The prefix up to and including the summary-start token (for decoding)."""
        n = self.prompt_len
        return dataclasses.replace(
            self, tokens=self.tokens[:n].copy(), row_element=self.row_element[:n].copy(),
            targets=np.full(n, -1), loss_mask=np.zeros(n, dtype=bool), summary=(), _lpe=self._lpe)

    def extended(self, token):
        return dataclasses.replace(
            self, tokens=np.append(self.tokens, token), row_element=np.append(self.row_element, -1),
            targets=np.append(self.targets, -1), loss_mask=np.append(self.loss_mask, False),
            _lpe=self._lpe)


def context_length(neighbors, target, encoding, summary_len=0):
    """Rows an assembly would occupy (sequence only; CA_E memory excluded)."""
    encoding = NeighborEncoding.parse(encoding)
    n = len(target.all_text) + 2 + summary_len
    if encoding is NeighborEncoding.SA_TE:
        texts = [nb for nb in neighbors if nb.is_text]
        n += sum(len(nb.all_text) + 1 for nb in texts) + (1 if texts else 0)
        n += sum(1 for nb in neighbors if not nb.is_text)
    elif encoding is NeighborEncoding.SA_E:
        n += len(neighbors)
    return n


def truncate(neighbors, target, encoding, budget, summary_len=0, max_elements=None):
    """Drop whole trailing neighbors until the assembly fits ``budget`` rows.

    The target text is clipped only when it alone overflows.
    """
    neighbors = list(neighbors)
    while neighbors and (context_length(neighbors, target, encoding, summary_len) > budget
                         or (max_elements is not None and len(neighbors) + 1 > max_elements)):
        neighbors.pop()
    over = context_length(neighbors, target, encoding, summary_len) - budget
    if over > 0:
        text = target.all_text
        keep = max(0, len(text) - over)
        target = dataclasses.replace(target, title_tokens=(), text_tokens=text[:keep])
    return neighbors, target


def encode_elements(nodes, text_encoder, image_encoder):
    rows = []
    for n in nodes:
        if n.kind is NodeKind.IMAGE:
            rows.append(encode_image(n.image_feature, image_encoder))
        else:
            rows.append(encode_text(n.all_text, text_encoder))
    return np.stack(rows)


def assemble(example, encoding, text_encoder, image_encoder, neighbors=None, target=None,
             cap=None, summary_allowance=32, max_elements=None, with_summary=True):
    """Lay out ``example`` under ``encoding``.

    Sequence layout: neighbor rows, target text, ``<bos>``, summary, ``<eos>``.
    SA_TE fences text neighbors with ``<sep>`` and injects each image as one
    embedding row right after its owner; SA_E injects one row per neighbor;
    CA_E keeps the sequence to the target and routes neighbors to memory.
    """
    encoding = NeighborEncoding.parse(encoding)
    if neighbors is None or target is None:
        neighbors, target = select_context(example)
    cap = REGIME_CAPS[encoding] if cap is None else cap
    summary = tuple(target.summary_tokens or ()) if with_summary else ()
    if len(summary) + 2 > summary_allowance:
        raise AssemblyError(f"page {example.page.page_id!r}: summary of {len(summary)} tokens "
                            f"exceeds the allowance of {summary_allowance} rows")
    neighbors, target = truncate(neighbors, target, encoding, cap - summary_allowance + 2,
                                 0, max_elements)
    elements = list(neighbors) + [target]
    t_idx = len(elements) - 1

    tokens, row_el, embed_rows = [], [], []

    def put(tok, el):
        tokens.append(tok)
        row_el.append(el)

    memory = None
    if encoding is NeighborEncoding.SA_TE:
        fenced = False
        for e, nb in enumerate(neighbors):
            if nb.is_text:
                put(SEP, -1)
                fenced = True
                for tok in nb.all_text:
                    put(tok, e)
            else:
                embed_rows.append((len(tokens), e))
                put(PAD, e)
        if fenced:
            put(SEP, -1)
    elif encoding is NeighborEncoding.SA_E:
        for e in range(len(neighbors)):
            embed_rows.append((len(tokens), e))
            put(PAD, e)
    else:
        memory = tuple(range(len(neighbors)))
    for tok in target.all_text:
        put(tok, t_idx)
    put(BOS, -1)
    prompt_len = len(tokens)
    if with_summary:
        for tok in summary:
            put(tok, -1)
        put(EOS, -1)

    n = len(tokens)
    if n > cap:
        raise AssemblyError(f"page {example.page.page_id!r} target {example.target_section_id!r}: "
                            f"{n} rows exceed the {encoding.name} cap of {cap}")
    tokens = np.asarray(tokens, dtype=np.int64)
    targets = np.full(n, -1, dtype=np.int64)
    targets[:-1] = tokens[1:]
    loss_mask = np.zeros(n, dtype=bool)
    if with_summary:
        loss_mask[prompt_len - 1:n - 1] = True
    return AssembledInput(
        encoding=encoding,
        tokens=tokens,
        row_element=np.asarray(row_el, dtype=np.int64),
        embed_rows=tuple(embed_rows),
        memory=memory,
        elements=tuple(nd.id for nd in elements),
        is_image=np.array([nd.kind is NodeKind.IMAGE for nd in elements]),
        encodings=encode_elements(elements, text_encoder, image_encoder),
        graph=build_context_graph(neighbors, target),
        targets=targets,
        loss_mask=loss_mask,
        prompt_len=prompt_len,
        summary=summary,
    )


def assemble_for(model, example, encoding, summary_allowance=32, with_summary=True):
    """Assemble with the model's frozen encoders and length limits."""
    cap = cap_for(encoding, model.cfg.max_seq_len)
    return assemble(example, encoding, model.text_encoder, model.image_encoder, cap=cap,
                    summary_allowance=summary_allowance, max_elements=model.pe.table_size,
                    with_summary=with_summary)
