"""Small shared builders for tests."""

import numpy as np

from mmgl.graphdoc import SPECIAL_TOKENS, ContextRegime, Example, Vocab, page_from_dict
from mmgl.lm import MMGLModel, ModelConfig

WORDS = [f"w{i}" for i in range(40)]
VOCAB = Vocab(list(SPECIAL_TOKENS) + WORDS)


def tiny_config(**kw):
    base = dict(vocab_size=len(VOCAB), d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=128,
                d_enc=8, d_img=4, init_std=0.2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(pe=None, **kw):
    return MMGLModel(tiny_config(**kw), pe)


def words(rng, n):
    return " ".join(rng.choice(WORDS, size=n))


def random_page(rng, n_sections=3, n_tokens=(1, 6), images=(0, 2), d_img=4, page_id="p"):
    """A random valid page; the last section is the target."""
    sections = []
    for s in range(n_sections):
        parent = None if s == 0 or rng.random() < 0.5 else f"s{int(rng.integers(s))}"
        sections.append({
            "id": f"s{s}", "order": s, "parent_id": parent,
            "title": words(rng, int(rng.integers(0, 2))),
            "text": words(rng, int(rng.integers(*n_tokens))),
            "images": [{"id": f"s{s}i{i}", "caption": words(rng, 1),
                        "feature": rng.standard_normal(d_img).tolist()}
                       for i in range(int(rng.integers(images[0], images[1] + 1)))],
        })
    sections[-1]["summary"] = words(rng, int(rng.integers(1, 4)))
    obj = {"page_id": page_id, "title": words(rng, 2), "sections": sections}
    return page_from_dict(obj, VOCAB, d_img)


def random_example(rng, regime="page_all", **kw):
    page = random_page(rng, **kw)
    return Example(page, page.sections()[-1].id, ContextRegime.parse(regime))


def hand_page(text_lens=(10, 10, 10), target_len=10, image_owners=(0, 1), d_img=4):
    """Title-free page: text sections of the given lengths, target last, images on chosen sections."""
    rng = np.random.default_rng(0)
    sections = []
    for s, n in enumerate(list(text_lens) + [target_len]):
        sections.append({"id": f"s{s}", "order": s, "text": words(rng, n), "images": []})
    for k, owner in enumerate(image_owners):
        sections[owner]["images"].append({"id": f"img{k}", "order": k, "feature": [1.0] * d_img})
    sections[-1]["summary"] = "w1 w2"
    return page_from_dict({"page_id": "hand", "sections": sections}, VOCAB, d_img)
