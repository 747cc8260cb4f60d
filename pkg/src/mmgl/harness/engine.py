"""Data loading, model construction, training and evaluation for one RunConfig."""

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..assembly import assemble_for
from ..graphdoc import (Vocab, examples_from_pages, load_pages, synth_pages,
                        SynthParams)
from ..lm import MMGLModel, ConfigError, load_checkpoint, save_checkpoint
from ..metrics import CorpusStats, cider, corpus_bleu4, rouge_l
from ..peft import apply_peft, count_params

log = logging.getLogger("mmgl")

RESULT_COLUMNS = ("config_id", "regime", "encoding", "pe", "peft", "eval_loss", "bleu4", "rougeL",
                  "cider", "trainable_params", "total_params", "fraction", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class ResultRow:
    config_id: str
    regime: str
    encoding: str
    pe: str
    peft: str
    eval_loss: float
    bleu4: float
    rougeL: float
    cider: float
    trainable_params: int
    total_params: int
    fraction: float
    seconds: float

    def as_csv(self):
        return [getattr(self, c) for c in RESULT_COLUMNS]

    def comparable(self):
        """Every field except wall-clock time."""
        d = asdict(self)
        d.pop("seconds")
        return d


# data ----------------------------------------------------------------------

@dataclass
class Dataset:
    train: list
    val: list
    vocab: Vocab


def load_data(cfg):
    """Pages from ``cfg.data_dir`` when set, else a synthetic corpus from ``cfg.synth``."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        vocab = Vocab.load(root / "vocab.txt")
        train = load_pages(root / "train.jsonl", vocab, cfg.model.d_img)
        val = load_pages(root / "val.jsonl", vocab, cfg.model.d_img)
    else:
        train, vocab = synth_pages(cfg.data_seed, cfg.synth, "train")
        val_params = SynthParams(**{**cfg.synth.__dict__, "n_pages": cfg.n_val_pages})
        val, _ = synth_pages(cfg.data_seed, val_params, "val")
    return Dataset(examples_from_pages(train, cfg.regime), examples_from_pages(val, cfg.regime), vocab)


def build_model(cfg, vocab_size):
    cfg.validate()
    model = MMGLModel(cfg.model_config(vocab_size), cfg.pe)
    apply_peft(model, cfg.peft, cfg.encoding)
    return model


def assemble_all(model, examples, cfg, with_summary=True):
    return [assemble_for(model, ex, cfg.encoding, cfg.summary_allowance, with_summary)
            for ex in examples]


# training ------------------------------------------------------------------

def batch_loss_and_grads(model, inputs):
    """Mean loss over ``inputs``; accumulates gradients of that mean into trainable params."""
    total = 0.0
    scale = 1.0 / len(inputs)
    for inp in inputs:
        with ad.Tape() as tape:
            loss = ad.mul(model.loss(inp), scale)
        ad.backward_all(loss, tape)
        total += float(loss.data)
    return total


def mean_loss(model, inputs):
    if not inputs:
        return float("nan")
    return float(np.mean([float(model.loss(inp).data) for inp in inputs]))


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - n % batch_size or n, batch_size):
            yield order[i:i + batch_size]


def train(cfg, data=None, write=True):
    """Train one cell. Returns ``(model, log_rows)``; writes checkpoint + log under ``cfg.out``."""
    cfg.validate()
    data = data or load_data(cfg)
    model = build_model(cfg, len(data.vocab))
    train_inputs = assemble_all(model, data.train, cfg)
    val_inputs = assemble_all(model, data.val, cfg)
    if not train_inputs:
        raise TrainingError("no training examples")
    opt = ad.Adam(model.trainable(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 0xBA7C])
    batches = _batches(len(train_inputs), min(cfg.batch_size, len(train_inputs)), rng)
    rows = []
    for step in range(1, cfg.steps + 1):
        opt.zero_grad()
        loss = batch_loss_and_grads(model, [train_inputs[i] for i in next(batches)])
        if not math.isfinite(loss):
            raise TrainingError(f"{cfg.label()}: non-finite training loss {loss} at step {step}; "
                                f"last logged rows: {rows[-3:]}")
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row = {"step": step, "train_loss": loss, "eval_loss": mean_loss(model, val_inputs)}
            rows.append(row)
            log.info("%s step %d train %.4f eval %.4f", cfg.label(), step, loss, row["eval_loss"])
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.mmgl", model.params)
        with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
    return model, rows


# evaluation ----------------------------------------------------------------

def eval_threads():
    try:
        return max(1, int(os.environ.get("MMGL_THREADS", "1")))
    except ValueError:
        return 1


def decode_all(model, prompts, max_new):
    def one(p):
        return model.generate_greedy(p, max_new)

    threads = eval_threads()
    if threads == 1 or len(prompts) < 2:
        return [one(p) for p in prompts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, prompts))


def score(hyps, refs):
    """Corpus BLEU-4, mean ROUGE-L and CIDEr for token-string lists."""
    if not refs:
        raise ValueError("no references to score against")
    stats = CorpusStats.from_refs(refs)
    return {
        "bleu4": corpus_bleu4(hyps, [[r] for r in refs]),
        "rougeL": float(np.mean([rouge_l(h, r) for h, r in zip(hyps, refs)])),
        "cider": cider(hyps, refs, stats),
    }


def evaluate(cfg, model, data, seconds=0.0):
    """Greedy-decode every validation example and score against gold summaries."""
    started = time.perf_counter()
    full = assemble_all(model, data.val, cfg)
    prompts = [inp.prompt() for inp in full]
    generated = decode_all(model, prompts, cfg.max_new)
    hyps = [data.vocab.decode(g) for g in generated]
    refs = [data.vocab.decode(inp.summary) for inp in full]
    metrics = score(hyps, refs)
    counts = count_params(model)
    return ResultRow(
        config_id=cfg.config_id, regime=cfg.regime.value, encoding=cfg.encoding.value,
        pe=cfg.pe.kind.value, peft=cfg.peft.kind.value, eval_loss=mean_loss(model, full),
        bleu4=metrics["bleu4"], rougeL=metrics["rougeL"], cider=metrics["cider"],
        trainable_params=counts["trainable"], total_params=counts["total"],
        fraction=counts["fraction"], seconds=seconds + time.perf_counter() - started,
    )


def load_trained(cfg, checkpoint, vocab):
    model = build_model(cfg, len(vocab))
    state = load_checkpoint(checkpoint)
    emb = state.get("tok_emb")
    if emb is not None and emb.shape[0] != len(vocab):
        raise ConfigError(f"checkpoint vocabulary size {emb.shape[0]} != dataset vocabulary {len(vocab)}")
    model.load_state_dict(state)
    return model


def append_result(path, row):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and path.stat().st_size > 0
    if exists:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), None)
        if tuple(header or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: results header {header} does not match {list(RESULT_COLUMNS)}")
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if not exists:
            w.writerow(RESULT_COLUMNS)
        w.writerow(row.as_csv())


def read_results(path):
    types = {f.name: f.type for f in fields(ResultRow)}
    with open(path, newline="", encoding="utf-8") as fh:
        return [ResultRow(**{k: types[k](v) for k, v in rec.items()})
                for rec in csv.DictReader(fh)]


def run_cell(cfg, data=None, results_csv=None):
    """Train, checkpoint, reload and evaluate one cell; append its row to ``results_csv``."""
    started = time.perf_counter()
    data = data or load_data(cfg)
    train(cfg, data)
    model = load_trained(cfg, Path(cfg.out) / "model.mmgl", data.vocab)
    row = evaluate(cfg, model, data, seconds=time.perf_counter() - started)
    if results_csv:
        append_result(results_csv, row)
    return row
