"""Evaluation across test-time recurrence counts.

`val_loss` measures mean next-token cross entropy at a fixed recurrence;
`eval_sweep` runs a list of recurrences (default [1, 2, 4, 8, 16, 32])
and reports loss, answer-position exact-match accuracy, the effective
parameter count P + C + r*(R + adapter), and a per-token inference FLOP
proxy (2x effective parameters). The initial state is drawn from a
reported evaluation seed so numbers are comparable across runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import answer_mask, eval_batch
from .errors import ContractError
from .flops import effective_params
from .model import (FixedModel, RecurrenceRun, RecurrentModel, forward_fixed,
                    forward_recurrent)
from .random import RandomStream
from .surgery import count_parameters

DEFAULT_RECURRENCES = (1, 2, 4, 8, 16, 32)


@dataclass
class SweepRow:
    r: int
    loss: float
    accuracy: float
    effective_params: int
    flop_proxy: float


@dataclass
class SweepResult:
    rows: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["r", "loss", "accuracy", "effective_params",
                             "flop_proxy"])
            for row in self.rows:
                writer.writerow([row.r, f"{row.loss:.10g}",
                                 f"{row.accuracy:.10g}", row.effective_params,
                                 f"{row.flop_proxy:.10g}"])

    def summary(self) -> str:
        lines = ["r loss accuracy effective_params flop_proxy"]
        for row in self.rows:
            lines.append(f"{row.r} {row.loss:.6f} {row.accuracy:.4f} "
                         f"{row.effective_params} {row.flop_proxy:.4g}")
        return "\n".join(lines)


def _forward_values(model, inputs, r: int, s0_seed: int, batch_index: int):
    if isinstance(model, FixedModel):
        return forward_fixed(model, inputs).data
    run = RecurrenceRun(r, window=max(r, 1),
                        s0_stream=RandomStream(s0_seed, f"eval_s0/{batch_index}"))
    return forward_recurrent(model, inputs, run).data


def _loss_and_accuracy(model, inputs, targets, mask, r, s0_seed,
                       micro_batch: int = 8):
    total_nll = 0.0
    total_tokens = 0
    hits = 0
    answer_total = 0
    for b, lo in enumerate(range(0, inputs.shape[0], micro_batch)):
        sl = slice(lo, lo + micro_batch)
        logits = _forward_values(model, inputs[sl], r, s0_seed, b)
        zmax = logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(logits - zmax).sum(axis=-1)) + zmax[..., 0]
        picked = np.take_along_axis(logits, targets[sl][..., None],
                                    axis=-1)[..., 0]
        total_nll += float((lse - picked).sum())
        total_tokens += picked.size
        pred = logits.argmax(axis=-1)
        m = mask[sl]
        hits += int(((pred == targets[sl]) & m).sum())
        answer_total += int(m.sum())
    loss = total_nll / total_tokens
    accuracy = hits / max(answer_total, 1)
    return loss, accuracy


def val_loss(model, dataset_id: str, r: int, s0_seed: int = 0,
             n_items: int = 16, data_seed: int = 1234) -> float:
    """Mean cross entropy on held-out items; no gradients recorded."""
    if r < 1:
        raise ContractError("recurrence must be >= 1")
    assert ag.active_tape() is None
    inputs, targets = eval_batch(data_seed, dataset_id, n_items,
                                 model.config.context_length)
    mask = answer_mask(dataset_id, targets)
    loss, _ = _loss_and_accuracy(model, inputs, targets, mask, r, s0_seed)
    return loss


def eval_sweep(model, dataset_id: str,
               recurrences=DEFAULT_RECURRENCES, s0_seed: int = 0,
               n_items: int = 16, data_seed: int = 1234) -> SweepResult:
    """One row of loss/accuracy/size per test-time recurrence count."""
    recurrences = list(recurrences)
    if not recurrences:
        raise ContractError("recurrence list must be nonempty")
    inputs, targets = eval_batch(data_seed, dataset_id, n_items,
                                 model.config.context_length)
    mask = answer_mask(dataset_id, targets)
    if isinstance(model, RecurrentModel):
        report = count_parameters(model.config, model.plan_tuple)
    else:
        report = None
    rows = []
    for r in sorted(recurrences):
        loss, accuracy = _loss_and_accuracy(model, inputs, targets, mask, r,
                                            s0_seed)
        if report is not None:
            n_eff = effective_params(report, r)
        else:
            from .surgery import count_fixed_params
            n_eff = count_fixed_params(model.config, len(model.blocks))["body"]
        rows.append(SweepRow(r=r, loss=loss, accuracy=accuracy,
                             effective_params=n_eff,
                             flop_proxy=2.0 * n_eff))
    return SweepResult(rows)
