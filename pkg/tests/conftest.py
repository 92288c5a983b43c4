import re

import numpy as np
import pytest

ACCEPTANCE_LABELS = {
    1: "parameter tables",
    2: "layer plans",
    3: "finite-difference gradients",
    4: "truncated-BPTT oracle",
    5: "depth-sampler statistics",
    6: "curriculum formulas",
    7: "FLOP accounting",
    8: "Newton-Schulz / Muon",
    9: "surgery identity",
    10: "end-to-end retrofit",
    11: "determinism and resume",
}


def pytest_runtest_logreport(report):
    """One PASS/FAIL scoreboard line per acceptance criterion."""
    if "test_acceptance.py" not in report.nodeid:
        return
    match = re.search(r"::test_(\d+)_", report.nodeid)
    if not match:
        return
    failed_early = report.when == "setup" and report.failed
    if report.when != "call" and not failed_early:
        return
    num = int(match.group(1))
    label = ACCEPTANCE_LABELS.get(num, "?")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"\nACCEPTANCE {num} ({label}): {verdict}", flush=True)

from recurfit import autograd as ag
from recurfit.model import ModelConfig, init_fixed, init_recurrent
from recurfit.random import RandomStream


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=11, hidden=16, n_query_heads=2, n_kv_heads=1,
                       head_dim=8, ffn_width=16, context_length=16)


@pytest.fixture
def tiny_recurrent(tiny_cfg):
    return init_recurrent(tiny_cfg, (1, 2, 1), RandomStream(0, "init"))


@pytest.fixture
def tiny_fixed(tiny_cfg):
    return init_fixed(tiny_cfg, 4, RandomStream(0, "init"))


def finite_difference_check(params, loss_fn, grad_map, rel_tol=1e-4,
                            samples_per_param=4, eps=1e-5, rng_seed=0,
                            abs_floor=1e-8):
    """Central-difference oracle over a random sample of each parameter.

    abs_floor bounds the denominator: gradients below it are compared
    absolutely, since central differences bottom out near 1e-11 of noise.
    """
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for name, p in params.items():
        g = np.asarray(grad_map.get(p, np.zeros_like(p.data)))
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        count = min(samples_per_param, flat.size)
        for i in rng.choice(flat.size, size=count, replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(gflat[i]), abs_floor)
            rel = abs(fd - gflat[i]) / denom
            assert rel < rel_tol, f"{name}[{i}]: fd={fd} ad={gflat[i]} rel={rel}"
            worst = max(worst, rel)
    return worst


def grads_by_name(params, grad_map):
    return {name: np.asarray(grad_map.get(p, np.zeros_like(p.data)))
            for name, p in params.items()}


@pytest.fixture
def fd_check():
    return finite_difference_check
