"""Central finite differences against tape gradients over every trainable tensor."""

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from ..assembly import NeighborEncoding
from ..graph_pe import PEKind
from ..graphdoc import ContextRegime
from ..peft import PeftKind, perturb_for_gradcheck
from .config import gradcheck_config
from .engine import assemble_all, batch_loss_and_grads, build_model, load_data

# Gradients below this magnitude are compared absolutely (FD rounding is ~1e-10 at h=1e-5).
GRAD_FLOOR = 1e-5

LEGAL_PEFT = {
    NeighborEncoding.SA_TE: (PeftKind.FULL, PeftKind.PREFIX, PeftKind.LORA),
    NeighborEncoding.SA_E: (PeftKind.FULL, PeftKind.PREFIX, PeftKind.LORA),
    NeighborEncoding.CA_E: (PeftKind.FULL, PeftKind.FLAMINGO),
}


@dataclass
class CheckResult:
    label: str
    errors: dict = field(default_factory=dict)
    n_checked: int = 0
    seconds: float = 0.0

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def failing(self, tol):
        return sorted(k for k, v in self.errors.items() if not v < tol)


def relative_error(analytic, numeric, floor=GRAD_FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_model(model, inputs, h=1e-5, names=None):
    """Max relative error per trainable tensor for the mean loss over ``inputs``."""
    model.zero_grad()
    batch_loss_and_grads(model, inputs)
    scale = 1.0 / len(inputs)

    def loss():
        return sum(float(model.loss(inp).data) * scale for inp in inputs)

    errors = {}
    count = 0
    for name, p in model.params.items():
        if not p.requires_grad or (names is not None and name not in names):
            continue
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss()
            flat[j] = old - h
            down = loss()
            flat[j] = old
            numeric[j] = (up - down) / (2 * h)
        errors[name] = float(relative_error(p.grad.reshape(-1), numeric).max(initial=0.0))
        count += flat.size
    return errors, count


def combos(encodings=None, pes=None):
    encodings = [NeighborEncoding.parse(e) for e in encodings or NeighborEncoding]
    pes = [PEKind.parse(p) for p in pes or PEKind]
    for enc in encodings:
        for pe in pes:
            for kind in LEGAL_PEFT[enc]:
                yield enc, pe, kind


def run_gradcheck(cfg=None, encodings=None, pes=None, n_examples=2, h=1e-5):
    """Check every legal (encoding, PE, PEFT) combination on a tiny config."""
    cfg = cfg or gradcheck_config()
    cfg = dataclasses.replace(cfg, regime=ContextRegime.PAGE_ALL)
    data = load_data(cfg)
    results = []
    for enc, pe, kind in combos(encodings, pes):
        started = time.perf_counter()
        cell = dataclasses.replace(cfg, encoding=enc, pe=dataclasses.replace(cfg.pe, kind=pe),
                                   peft=dataclasses.replace(cfg.peft, kind=kind))
        model = build_model(cell, len(data.vocab))
        perturb_for_gradcheck(model, seed=cfg.seed)
        inputs = assemble_all(model, data.train[:n_examples], cell)
        errors, n = check_model(model, inputs, h)
        results.append(CheckResult(cell.label(), errors, n, time.perf_counter() - started))
    return results


def format_report(results, tol):
    lines = []
    for r in results:
        status = "PASS" if not r.failing(tol) else "FAIL"
        lines.append(f"{status} {r.label:40s} params={r.n_checked:6d} max_rel_err={r.max_error:.2e} "
                     f"({r.seconds:.1f}s)")
        for name in r.failing(tol):
            lines.append(f"    {name}: {r.errors[name]:.2e}")
    return "\n".join(lines)
