"""Page graphs: sections and images with hierarchy, plus JSONL I/O and context selection."""

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPECIAL_TOKENS = ("<unk>", "<pad>", "<bos>", "<eos>", "<sep>")
OOV, PAD, BOS, EOS, SEP = range(5)

TITLE_NODE_ID = "__title__"


class DataError(ValueError):
    pass


class Vocab:
    """Whitespace tokenizer over a fixed word list; line number is the token id."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text):
        return tuple(self.index.get(w, OOV) for w in text.lower().split())

    def decode(self, ids, strip_special=True):
        out = []
        for i in ids:
            if strip_special and i < len(SPECIAL_TOKENS):
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else SPECIAL_TOKENS[OOV])
        return out

    def to_text(self, ids):
        return " ".join(self.decode(ids))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")


class NodeKind(enum.Enum):
    SECTION = "section"
    IMAGE = "image"
    # Synthesized by select_context from PageGraph.title_tokens.
    TITLE = "title"


class ContextRegime(enum.Enum):
    SECTION_TEXT = "section_text"
    SECTION_ALL = "section_all"
    PAGE_TEXT = "page_text"
    PAGE_ALL = "page_all"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        for member in cls:
            if key in (member.value, member.name.lower(), member.value.replace("_", "")):
                return member
        raise ValueError(f"unknown context regime {value!r}")

    @property
    def uses_page(self):
        return self in (ContextRegime.PAGE_TEXT, ContextRegime.PAGE_ALL)


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    order: int
    parent_id: str | None = None
    text_tokens: tuple = ()
    title_tokens: tuple = ()
    image_feature: tuple | None = None
    summary_tokens: tuple | None = None

    @property
    def is_text(self):
        return self.kind is not NodeKind.IMAGE

    @property
    def all_text(self):
        """Tokens a text node shows the LM: section title then body."""
        return self.title_tokens + self.text_tokens


@dataclass(frozen=True)
class PageGraph:
    page_id: str
    title_tokens: tuple
    nodes: tuple
    _by_id: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})

    def node(self, node_id):
        return self._by_id[node_id]

    def sections(self):
        return [n for n in self.nodes if n.kind is NodeKind.SECTION]

    def images_of(self, section_id):
        imgs = [n for n in self.nodes if n.kind is NodeKind.IMAGE and n.parent_id == section_id]
        return sorted(imgs, key=lambda n: n.order)

    def children(self, section_id):
        kids = [n for n in self.nodes
                if n.kind is NodeKind.SECTION and n.parent_id == section_id]
        return sorted(kids, key=lambda n: n.order)

    def title_node(self):
        return Node(TITLE_NODE_ID, NodeKind.TITLE, -1, text_tokens=self.title_tokens)

    def document_order(self):
        """Sections depth-first by hierarchy (siblings by order), each followed by its images."""
        out = []

        def visit(sec):
            out.append(sec)
            out.extend(self.images_of(sec.id))
            for child in self.children(sec.id):
                visit(child)

        for root in self.children(None):
            visit(root)
        return out

    def validate(self, d_img=None):
        def fail(rule):
            raise DataError(f"page {self.page_id!r}: {rule}")

        if len(self._by_id) != len(self.nodes):
            fail("duplicate node id")
        if TITLE_NODE_ID in self._by_id:
            fail(f"node id {TITLE_NODE_ID!r} is reserved")
        sibling_orders = {}
        for n in self.nodes:
            if n.kind is NodeKind.TITLE:
                fail(f"node {n.id!r} has reserved kind 'title'")
            if n.parent_id is not None:
                parent = self._by_id.get(n.parent_id)
                if parent is None:
                    fail(f"node {n.id!r} has dangling parent_id {n.parent_id!r}")
                if parent.kind is not NodeKind.SECTION:
                    fail(f"node {n.id!r} has non-section parent {n.parent_id!r}")
            if n.kind is NodeKind.IMAGE:
                if n.parent_id is None:
                    fail(f"image {n.id!r} has no owning section")
                if n.image_feature is None:
                    fail(f"image {n.id!r} has no feature vector")
                if d_img is not None and len(n.image_feature) != d_img:
                    fail(f"image {n.id!r} feature width {len(n.image_feature)} != {d_img}")
            elif n.image_feature is not None:
                fail(f"section {n.id!r} carries an image feature")
            key = (n.kind is NodeKind.IMAGE, n.parent_id)
            seen = sibling_orders.setdefault(key, set())
            if n.order in seen:
                fail(f"node {n.id!r} repeats sibling order {n.order}")
            seen.add(n.order)
        for n in self.sections():
            hops, cur = 0, n
            while cur.parent_id is not None:
                cur = self._by_id[cur.parent_id]
                hops += 1
                if hops > len(self.nodes):
                    fail(f"section {n.id!r} lies on a parent cycle")
        return self


@dataclass(frozen=True)
class Example:
    page: PageGraph
    target_section_id: str
    regime: ContextRegime = ContextRegime.PAGE_ALL

    def __post_init__(self):
        try:
            target = self.page.node(self.target_section_id)
        except KeyError:
            raise DataError(f"page {self.page.page_id!r}: no target {self.target_section_id!r}") from None
        if target.kind is not NodeKind.SECTION or target.summary_tokens is None:
            raise DataError(f"page {self.page.page_id!r}: target {target.id!r} has no summary")

    @property
    def target(self):
        return self.page.node(self.target_section_id)


def examples_from_pages(pages, regime=ContextRegime.PAGE_ALL):
    """One example per section that carries a summary."""
    regime = ContextRegime.parse(regime)
    return [Example(p, n.id, regime) for p in pages for n in p.sections()
            if n.summary_tokens is not None]


def select_context(example):
    """Return ``(neighbors, target)`` for the example's context regime."""
    page, target = example.page, example.target
    regime = example.regime
    if regime is ContextRegime.SECTION_TEXT:
        return [], target
    if regime is ContextRegime.SECTION_ALL:
        return page.images_of(target.id), target
    neighbors = [page.title_node()]
    for n in page.document_order():
        if n.id == target.id:
            continue
        if n.kind is NodeKind.IMAGE and regime is ContextRegime.PAGE_TEXT:
            continue
        neighbors.append(n)
    return neighbors, target


# JSONL --------------------------------------------------------------------

def page_from_dict(obj, vocab, d_img=None):
    try:
        page_id = str(obj["page_id"])
        nodes = []
        for sec in obj["sections"]:
            summary = sec.get("summary")
            nodes.append(Node(
                id=str(sec["id"]), kind=NodeKind.SECTION, order=int(sec["order"]),
                parent_id=sec.get("parent_id"),
                text_tokens=vocab.encode(sec.get("text", "")),
                title_tokens=vocab.encode(sec.get("title", "")),
                summary_tokens=None if summary is None else vocab.encode(summary),
            ))
            for i, img in enumerate(sec.get("images", [])):
                nodes.append(Node(
                    id=str(img["id"]), kind=NodeKind.IMAGE, order=int(img.get("order", i)),
                    parent_id=str(sec["id"]), text_tokens=vocab.encode(img.get("caption", "")),
                    image_feature=tuple(float(x) for x in img["feature"]),
                ))
    except (KeyError, TypeError) as exc:
        raise DataError(f"page {obj.get('page_id', '?')!r}: malformed record ({exc})") from None
    page = PageGraph(page_id, vocab.encode(obj.get("title", "")), tuple(nodes))
    return page.validate(d_img)


def page_to_dict(page, vocab):
    sections = []
    for sec in page.sections():
        sections.append({
            "id": sec.id,
            "parent_id": sec.parent_id,
            "order": sec.order,
            "title": vocab.to_text(sec.title_tokens),
            "text": vocab.to_text(sec.text_tokens),
            "summary": None if sec.summary_tokens is None else vocab.to_text(sec.summary_tokens),
            "images": [{"id": im.id, "order": im.order, "caption": vocab.to_text(im.text_tokens),
                        "feature": list(im.image_feature)} for im in page.images_of(sec.id)],
        })
    return {"page_id": page.page_id, "title": vocab.to_text(page.title_tokens),
            "sections": sections}


def load_pages(path, vocab, d_img=None):
    pages = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            pages.append(page_from_dict(obj, vocab, d_img))
    return pages


def save_pages(pages, path, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for page in pages:
            fh.write(json.dumps(page_to_dict(page, vocab)) + "\n")


# synthetic corpus ----------------------------------------------------------

@dataclass
class SynthParams:
    n_pages: int = 2048
    sections_per_page: int = 4
    tokens_per_section: int = 16
    vocab_size: int = 2048
    leak_count: int = 2
    n_topics: int = 32
    d_img: int = 32
    images_per_section: int = 1
    copy_tokens: int = 2
    title_tokens: int = 2
    caption_tokens: int = 3
    image_noise: float = 0.1

    def check(self):
        if self.leak_count < 0 or self.n_topics < self.leak_count:
            raise ValueError("need 0 <= leak_count <= n_topics")
        if self.vocab_size <= len(SPECIAL_TOKENS) + self.n_topics + 8:
            raise ValueError("vocab_size too small for specials, topics and filler words")
        if self.sections_per_page < 1 or self.tokens_per_section < 1:
            raise ValueError("pages need at least one section with at least one token")
        if self.copy_tokens > self.tokens_per_section:
            raise ValueError("copy_tokens exceeds tokens_per_section")
        if self.leak_count > self.tokens_per_section:
            raise ValueError("leak_count exceeds tokens_per_section")


def synth_vocab(params):
    topics = [f"topic{i}" for i in range(params.n_topics)]
    n_fill = params.vocab_size - len(SPECIAL_TOKENS) - params.n_topics
    return Vocab(list(SPECIAL_TOKENS) + topics + [f"w{i}" for i in range(n_fill)])


def _topic_image_basis(seed, params):
    rng = np.random.default_rng([seed, 0x1A6E])
    return rng.standard_normal((params.n_topics, params.d_img)) / np.sqrt(params.d_img)


_SPLITS = {"train": 1, "val": 2, "test": 3}


def synth_pages(seed, params, split="train"):
    """Deterministic synthetic pages; one target section (with summary) per page.

    Each page draws ``leak_count`` topic words. They are planted, in a fixed
    order, into every non-target section and mixed into every image feature,
    but never into the target's own text. The target summary is the topic
    words followed by the first ``copy_tokens`` words of the target text.
    """
    params.check()
    vocab = synth_vocab(params)
    basis = _topic_image_basis(seed, params)
    rng = np.random.default_rng([seed, _SPLITS[split]])
    topic_lo = len(SPECIAL_TOKENS)
    fill_lo = topic_lo + params.n_topics
    fill_hi = params.vocab_size

    def filler(n):
        return tuple(int(t) for t in rng.integers(fill_lo, fill_hi, size=n))

    pages = []
    for p in range(params.n_pages):
        topics = [int(t) for t in rng.choice(params.n_topics, size=params.leak_count, replace=False)]
        topic_ids = tuple(topic_lo + t for t in topics)
        target_idx = int(rng.integers(params.sections_per_page))
        nodes = []
        for s in range(params.sections_per_page):
            sid = f"p{p}s{s}"
            parent = None
            if s > 0 and rng.random() < 0.5:
                parent = f"p{p}s{int(rng.integers(s))}"
            text = list(filler(params.tokens_per_section))
            summary = None
            if s == target_idx:
                summary = topic_ids + tuple(text[:params.copy_tokens])
            elif topic_ids:
                slots = np.sort(rng.choice(params.tokens_per_section, size=len(topic_ids), replace=False))
                for slot, tok in zip(slots, topic_ids):
                    text[int(slot)] = tok
            nodes.append(Node(sid, NodeKind.SECTION, s, parent, tuple(text),
                              filler(params.title_tokens), None, summary))
            for i in range(params.images_per_section):
                feat = params.image_noise * rng.standard_normal(params.d_img)
                for t in topics:
                    feat = feat + basis[t]
                nodes.append(Node(f"{sid}i{i}", NodeKind.IMAGE, i, sid,
                                  filler(params.caption_tokens),
                                  image_feature=tuple(float(x) for x in feat)))
        pages.append(PageGraph(f"page{p}", filler(params.title_tokens), tuple(nodes)).validate(params.d_img))
    return pages, vocab


def synth_dataset(seed, params=None, regime=ContextRegime.PAGE_ALL, split="train"):
    params = params or SynthParams()
    pages, _ = synth_pages(seed, params, split)
    return examples_from_pages(pages, regime)


def write_dataset(out_dir, seed, params, n_val_pages=None):
    """Write ``train.jsonl``, ``val.jsonl`` and ``vocab.txt`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, vocab = synth_pages(seed, params, "train")
    val_params = SynthParams(**{**params.__dict__, "n_pages": n_val_pages or max(1, params.n_pages // 8)})
    val, _ = synth_pages(seed, val_params, "val")
    save_pages(train, out / "train.jsonl", vocab)
    save_pages(val, out / "val.jsonl", vocab)
    vocab.save(out / "vocab.txt")
    return {"train": out / "train.jsonl", "val": out / "val.jsonl", "vocab": out / "vocab.txt"}
