"""Training-FLOP accounting.

Fixed-depth models use 6*N*D with N the non-embedding parameter count.
Recurrent models split the effective parameters into N1 (forward +
backward, the prelude, coda, and the in-window recurrences of block +
adapter) and N2 (forward only, the out-of-window recurrences), giving
(6*N1 + 2*N2)*D.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .surgery import ParamReport


def flops_fixed(non_embedding_params: int, tokens: int) -> float:
    return 6.0 * non_embedding_params * tokens


def effective_params(report: ParamReport, r: int) -> int:
    """P + C + r*(R + adapter), non-embedding, for a sweep at depth r."""
    return (report.prelude + report.coda
            + r * (report.recurrent_block + report.adapter))


def flops_for_step(report: ParamReport, mean_r: float, window: int,
                   tokens: int) -> float:
    """Recurrent-step FLOPs at curriculum mean `mean_r` and window."""
    shared = report.recurrent_block + report.adapter
    n1 = report.prelude + report.coda + min(mean_r, window) * shared
    n2 = max(mean_r - window, 0) * shared
    return (6.0 * n1 + 2.0 * n2) * tokens


@dataclass
class FlopMeter:
    cumulative: float = 0.0
    steps: list = field(default_factory=list)  # (n1, n2, tokens) per step

    def add_recurrent(self, report: ParamReport, mean_r: float, window: int,
                      tokens: int) -> float:
        shared = report.recurrent_block + report.adapter
        n1 = report.prelude + report.coda + min(mean_r, window) * shared
        n2 = max(mean_r - window, 0) * shared
        value = (6.0 * n1 + 2.0 * n2) * tokens
        self.cumulative += value
        self.steps.append((n1, n2, tokens))
        return value

    def add_fixed(self, non_embedding_params: int, tokens: int) -> float:
        value = flops_fixed(non_embedding_params, tokens)
        self.cumulative += value
        self.steps.append((non_embedding_params, 0, tokens))
        return value
