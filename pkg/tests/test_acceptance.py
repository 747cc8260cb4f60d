"""The ten acceptance criteria, each reported as one PASS/FAIL line in the run summary."""

import dataclasses
import time

import numpy as np
import pytest

from conftest import verdict
from helpers import random_example, tiny_model
from oracles import bleu4_oracle, cider_oracle, rouge_l_oracle

from mmgl import autodiff as ad
from mmgl.assembly import REGIME_CAPS, NeighborEncoding, assemble, assemble_for, context_length
from mmgl.encoders import FrozenEncoder
from mmgl.graph_pe import (ContextGraph, PEConfig, PEKind, build_context_graph, gnn_pe, normalized_laplacian,
                           sym_eigendecomp)
from mmgl.graphdoc import ContextRegime, SynthParams, select_context, synth_dataset, synth_vocab
from mmgl.harness.config import RunConfig, gradcheck_config
from mmgl.harness.engine import build_model, evaluate, load_data, run_cell, train
from mmgl.harness.gradcheck import run_gradcheck
from mmgl.lm import MMGLModel, ModelConfig, load_checkpoint
from mmgl.metrics import bleu4, cider, rouge_l
from mmgl.peft import PeftKind, PeftMode, apply_peft, count_params


def test_01_gradient_correctness():
    with verdict(1, "gradcheck, all encodings x PEs x legal PEFT modes") as note:
        cfg = gradcheck_config()
        started = time.perf_counter()
        results = run_gradcheck(cfg)
        seconds = time.perf_counter() - started
        assert len(results) == 3 * 3 * 3 - 3, [r.label for r in results]
        data = load_data(cfg)
        for r in results:
            enc, pe, kind = r.label.split("/")[1:]
            model = build_model(cfg.with_overrides({"encoding": enc, "pe.kind": pe, "peft.kind": kind}),
                                len(data.vocab))
            assert model.n_params() <= 50_000
        worst = max(results, key=lambda r: r.max_error)
        assert worst.max_error < 1e-4, f"{worst.label}: {worst.errors}"
        assert seconds < 300
        note.update(combos=len(results), max_rel_err=f"{worst.max_error:.1e}", seconds=f"{seconds:.0f}")


def test_02_zero_init_identity_triad():
    with verdict(2, "zero-init identity: Prefix(l=0), LoRA(B=0), Flamingo(gates=0)") as note:
        rng = np.random.default_rng(2024)
        pes = [PEConfig(kind) for kind in PEKind]
        bases = {pe.kind: tiny_model(pe) for pe in pes}
        tuned = {}
        for pe in pes:
            for kind, enc, cross in ((PeftKind.PREFIX, "sa_te", False), (PeftKind.LORA, "sa_e", False),
                                     (PeftKind.FLAMINGO, "ca_e", True)):
                m = tiny_model(pe, cross_attention=cross)
                apply_peft(m, PeftMode(kind, prefix_len=0, rank=4, alpha=8.0), enc)
                tuned[pe.kind, kind] = (m, enc)
        worst = 0.0
        regimes = list(ContextRegime)
        for i in range(100):
            ex = random_example(rng, regime=regimes[i % 4], n_sections=int(rng.integers(1, 5)))
            pe = pes[i % 3].kind
            for kind in (PeftKind.PREFIX, PeftKind.LORA, PeftKind.FLAMINGO):
                model, enc = tuned[pe, kind]
                inp = assemble_for(model, ex, enc)
                ref = bases[pe](dataclasses.replace(inp, memory=None)).data
                worst = max(worst, float(np.abs(model(inp).data - ref).max()))
        assert worst <= 1e-12, worst
        note.update(inputs=100, max_abs_diff=f"{worst:.1e}")


def test_03_frozen_parameter_immutability():
    with verdict(3, "frozen tensors bit-identical after 200 steps") as note:
        checked = 0
        for enc, kind in (("sa_te", "full"), ("sa_te", "prefix"), ("sa_e", "lora"), ("ca_e", "flamingo")):
            cfg = gradcheck_config(steps=200, learning_rate=1e-2, n_val_pages=1, eval_every=200)
            cfg = cfg.with_overrides({"encoding": enc, "peft.kind": kind})
            data = load_data(cfg)
            init = build_model(cfg, len(data.vocab))
            model, _ = train(cfg, data, write=False)
            for name, p in model.params.items():
                before = init.params[name].data
                if p.requires_grad:
                    continue
                assert np.array_equal(p.data, before), f"{kind}: frozen {name} changed"
                checked += 1
            moved = [n for n, p in model.params.items()
                     if p.requires_grad and not np.array_equal(p.data, init.params[n].data)]
            assert moved, f"{kind}: no trainable tensor moved"
            for which in ("text_encoder", "image_encoder"):
                assert np.array_equal(getattr(model, which).projection, getattr(init, which).projection)
                assert not getattr(model, which).projection.flags.writeable
        note.update(frozen_tensors=checked)


def test_04_eigensolver_properties():
    with verdict(4, "Jacobi eigensolver residuals and Laplacian spectra") as note:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 65))
            a = rng.standard_normal((n, n))
            m = (a + a.T) / 2
            vals, vecs = sym_eigendecomp(m)
            worst = max(worst, np.abs(vecs @ np.diag(vals) @ vecs.T - m).max(),
                        np.abs(vecs.T @ vecs - np.eye(n)).max())
        assert worst < 1e-10, worst
        for _ in range(100):
            n = int(rng.integers(1, 65))
            adj = np.triu((rng.random((n, n)) < rng.uniform(0.05, 0.6)).astype(float), 1)
            vals, _ = sym_eigendecomp(normalized_laplacian(adj + adj.T))
            assert vals.min() >= -1e-10 and vals.max() <= 2 + 1e-10
        p3 = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
        k3 = np.ones((3, 3)) - np.eye(3)
        assert np.abs(sym_eigendecomp(normalized_laplacian(p3))[0] - [0, 1, 2]).max() < 1e-10
        assert np.abs(sym_eigendecomp(normalized_laplacian(k3))[0] - [0, 1.5, 1.5]).max() < 1e-10
        note.update(max_residual=f"{worst:.1e}")


def test_05_gnn_permutation_equivariance():
    with verdict(5, "GNN-PE permutation equivariance") as note:
        rng = np.random.default_rng(5)
        worst = 0.0
        d = 8
        for i in range(100):
            if i % 2:
                ex = random_example(rng, n_sections=int(rng.integers(1, 8)), images=(0, 3))
                g = build_context_graph(*select_context(ex))
            else:
                n = int(rng.integers(1, 33))
                adj = np.triu((rng.random((n, n)) < 0.2).astype(float), 1)
                g = ContextGraph(tuple(range(n)), adj + adj.T)
            assert g.n <= 32
            layers = [(ad.Tensor(rng.standard_normal((d, d))), ad.Tensor(rng.standard_normal(d)))
                      for _ in range(2)]
            h = rng.standard_normal((g.n, d))
            perm = rng.permutation(g.n)
            out = gnn_pe(ad.Tensor(h), g, layers).data
            out_p = gnn_pe(ad.Tensor(h[perm]), g.permuted(perm), layers).data
            worst = max(worst, float(np.abs(out_p - out[perm]).max()))
        assert worst <= 1e-12, worst
        note.update(graphs=100, max_abs_diff=f"{worst:.1e}")


def test_06_metric_oracles():
    with verdict(6, "metric worked examples and 200-pair oracle agreement") as note:
        assert bleu4("a b c d e", ["a b c d e"]) == 1.0
        assert abs(bleu4("a b c d e f", ["a b c d x y"]) - ((4 / 6) * (3 / 5) * (2 / 4) * (1 / 3)) ** 0.25) < 1e-9
        assert bleu4("a b c", ["a b c"]) == 0.0
        assert rouge_l("a b c", "a b c") == 1.0
        assert abs(rouge_l("a b", "a c") - 0.5) < 1e-9
        assert rouge_l("a b", "c d") == 0.0
        assert cider(["a b c d"], ["a b c d"]) == 0.0
        assert abs(cider(["a b c d e", "f g h i j"], ["a b c d e", "f g h i j"]) - 10.0) < 1e-9
        assert cider(["x y z w"], ["a b c d"]) == 0.0
        rng = np.random.default_rng(6)
        alphabet = list("abcdefg")
        pairs = [(list(rng.choice(alphabet, size=rng.integers(0, 12))),
                  list(rng.choice(alphabet, size=rng.integers(1, 12)))) for _ in range(200)]
        worst = 0.0
        for h, r in pairs:
            worst = max(worst, abs(bleu4(h, [r]) - bleu4_oracle(h, [r])), abs(rouge_l(h, r) - rouge_l_oracle(h, r)))
        hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
        worst = max(worst, abs(cider(hyps, refs) - cider_oracle(hyps, refs)))
        assert worst <= 1e-9, worst
        note.update(pairs=200, max_abs_diff=f"{worst:.1e}")


def test_07_length_regime_structure():
    with verdict(7, "SA_TE > SA_E >= CA_E lengths; caps 1024/512/512") as note:
        params = SynthParams(n_pages=40, vocab_size=512)
        vocab = synth_vocab(params)
        text = FrozenEncoder("text", len(vocab), 64, seed=1)
        image = FrozenEncoder("image", params.d_img, 64, seed=2)
        compared = 0
        for regime in ContextRegime:
            for ex in synth_dataset(11, params, regime):
                lens = {enc: len(assemble(ex, enc, text, image)) for enc in NeighborEncoding}
                if any(n.is_text for n in select_context(ex)[0]):
                    assert lens[NeighborEncoding.SA_TE] > lens[NeighborEncoding.SA_E] >= lens[NeighborEncoding.CA_E]
                    compared += 1
        assert compared > 0
        big = SynthParams(n_pages=3, vocab_size=512, sections_per_page=12, tokens_per_section=120,
                          images_per_section=3)
        truncated = 0
        for ex in synth_dataset(12, big, ContextRegime.PAGE_ALL):
            neighbors, target = select_context(ex)
            for enc in NeighborEncoding:
                cap = REGIME_CAPS[enc]
                inp = assemble(ex, enc, text, image)
                assert len(inp) <= cap
                if context_length(neighbors, target, enc, len(target.summary_tokens)) > cap:
                    truncated += 1
                    assert inp.n_neighbors < len(neighbors)
        assert truncated > 0
        assert REGIME_CAPS == {NeighborEncoding.SA_TE: 1024, NeighborEncoding.SA_E: 512, NeighborEncoding.CA_E: 512}
        note.update(examples=compared, truncated=truncated)


@pytest.mark.slow
def test_08_directional_trend():
    with verdict(8, "PageAll beats SectionText (eval loss -10%, BLEU-4 up)") as note:
        rows = {}
        for regime in (ContextRegime.PAGE_ALL, ContextRegime.SECTION_TEXT):
            cfg = RunConfig(regime=regime, steps=2000, seed=0, out="unused")
            assert cfg.synth.leak_count >= 2
            data = load_data(cfg)
            started = time.perf_counter()
            model, _ = train(cfg, data, write=False)
            seconds = time.perf_counter() - started
            rows[regime] = evaluate(cfg, model, data, seconds)
            assert seconds < 15 * 60, f"{regime.value} took {seconds:.0f}s"
        pa, st = rows[ContextRegime.PAGE_ALL], rows[ContextRegime.SECTION_TEXT]
        note.update(page_all_loss=f"{pa.eval_loss:.3f}", section_text_loss=f"{st.eval_loss:.3f}",
                    page_all_bleu=f"{pa.bleu4:.3f}", section_text_bleu=f"{st.bleu4:.3f}")
        print(note)
        assert pa.eval_loss <= 0.9 * st.eval_loss, note
        assert pa.bleu4 > st.bleu4, note


def test_09_parameter_accounting_ordering():
    with verdict(9, "trainable fraction Prefix < LoRA on defaults") as note:
        fractions = {}
        for kind in (PeftKind.PREFIX, PeftKind.LORA):
            model = MMGLModel(ModelConfig())
            apply_peft(model, PeftMode(kind), "sa_te")
            fractions[kind] = count_params(model)["fraction"]
        assert fractions[PeftKind.PREFIX] < fractions[PeftKind.LORA]
        note.update(prefix=f"{fractions[PeftKind.PREFIX]:.4f}", lora=f"{fractions[PeftKind.LORA]:.4f}")


def test_10_determinism(tmp_path):
    with verdict(10, "identical RunConfig + seed give identical checkpoints and rows") as note:
        for enc, kind, pe in (("sa_te", "lora", "lpe"), ("ca_e", "flamingo", "gnn")):
            base = gradcheck_config(steps=15, n_val_pages=3, learning_rate=1e-2)
            base = base.with_overrides({"encoding": enc, "peft.kind": kind, "pe.kind": pe})
            rows, blobs = [], []
            for rep in ("a", "b"):
                cfg = dataclasses.replace(base, out=str(tmp_path / f"{enc}-{rep}"))
                rows.append(run_cell(cfg))
                blobs.append((tmp_path / f"{enc}-{rep}" / "model.mmgl").read_bytes())
            assert blobs[0] == blobs[1]
            assert rows[0].comparable() == rows[1].comparable()
            assert load_checkpoint(tmp_path / f"{enc}-a" / "model.mmgl").keys()
        note.update(cells=2)
