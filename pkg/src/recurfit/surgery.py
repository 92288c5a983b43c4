"""Fixed-depth -> recurrent model surgery, parameter accounting, and
layer-influence scoring.

A surgery plan is a (p, r, c) tuple over a donor depth plus explicit
donor-layer index lists. The default selection keeps the first p layers
as the prelude, the last c as the coda, and the r layers immediately
before the coda as the recurrent block; the layers in between are
dropped. The adapter defaults to an identity-pass init (zero on the
state half, identity on the injected half) so the fresh recurrent model
at r=1 behaves like the pruned donor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .checkpoint import Checkpoint
from .errors import FormatError, PlanError
from .model import (BlockWeights, FixedModel, ModelConfig, RecurrentModel,
                    forward_fixed_hidden)
from .random import RandomStream

_BLOCK_FIELDS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down",
                 "g_attn", "g_mlp")
_QK_FIELDS = ("q_gain", "k_gain")


@dataclass
class SurgeryPlan:
    p_count: int
    r_count: int
    c_count: int
    donor_depth: int
    prelude_layers: list = field(default_factory=list)
    recurrent_layers: list = field(default_factory=list)
    coda_layers: list = field(default_factory=list)

    @property
    def tuple(self) -> tuple:
        return (self.p_count, self.r_count, self.c_count)

    def to_dict(self) -> dict:
        return {"tuple": list(self.tuple), "donor_depth": self.donor_depth,
                "prelude_layers": list(self.prelude_layers),
                "recurrent_layers": list(self.recurrent_layers),
                "coda_layers": list(self.coda_layers)}

    @classmethod
    def from_dict(cls, d: dict) -> "SurgeryPlan":
        p, r, c = d["tuple"]
        return make_plan((p, r, c), d["donor_depth"],
                         lists=(d["prelude_layers"], d["recurrent_layers"],
                                d["coda_layers"]))


def make_plan(plan_tuple: tuple, donor_depth: int,
              lists: tuple | None = None) -> SurgeryPlan:
    """Build a plan; default rule keeps first/last layers, drops the middle."""
    p, r, c = plan_tuple
    if p < 0 or r < 0 or c < 0 or p + r + c > donor_depth:
        raise PlanError(f"tuple {plan_tuple} does not fit donor depth "
                        f"{donor_depth}")
    if lists is None:
        prelude = list(range(p))
        coda = list(range(donor_depth - c, donor_depth))
        recurrent = list(range(donor_depth - c - r, donor_depth - c))
    else:
        prelude, recurrent, coda = (list(l) for l in lists)
    for name, lst, want in (("prelude", prelude, p), ("recurrent", recurrent, r),
                            ("coda", coda, c)):
        if len(lst) != want:
            raise PlanError(f"{name} list length {len(lst)} != {want}")
        if lst != sorted(lst):
            raise PlanError(f"{name} list not sorted: {lst}")
        if lst and (lst[0] < 0 or lst[-1] >= donor_depth):
            raise PlanError(f"{name} index out of range for depth {donor_depth}")
    combined = prelude + recurrent + coda
    if len(set(combined)) != len(combined):
        raise PlanError("layer lists overlap")
    return SurgeryPlan(p, r, c, donor_depth, prelude, recurrent, coda)


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamReport:
    embeddings: int
    prelude: int
    recurrent_block: int
    coda: int
    adapter: int
    final_norm: int
    body: int
    convention: str  # "table" excludes adapter + final norm; "true" includes

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def params_per_block(cfg: ModelConfig) -> int:
    h, kv, ffn = cfg.hidden, cfg.kv_dim, cfg.ffn_width
    count = 2 * h * h + 2 * h * kv + 3 * h * ffn + 2 * h
    if cfg.qk_norm:
        count += h + kv
    return count


def embedding_params(cfg: ModelConfig) -> int:
    per_matrix = cfg.vocab_size * cfg.hidden
    return per_matrix if cfg.tie_embeddings else 2 * per_matrix


def count_parameters(cfg: ModelConfig, plan, convention: str = "table") -> ParamReport:
    """Closed-form counts for a plan tuple under either convention."""
    if convention not in ("table", "true"):
        raise ValueError(f"unknown convention {convention!r}")
    p, r, c = plan.tuple if isinstance(plan, SurgeryPlan) else tuple(plan)
    per = params_per_block(cfg)
    adapter = 2 * cfg.hidden * cfg.hidden
    final_norm = cfg.hidden
    body = (p + r + c) * per
    if convention == "true":
        body += adapter + final_norm
    return ParamReport(embeddings=embedding_params(cfg), prelude=p * per,
                       recurrent_block=r * per, coda=c * per, adapter=adapter,
                       final_norm=final_norm, body=body, convention=convention)


def count_fixed_params(cfg: ModelConfig, depth: int) -> dict:
    """Non-recurrent accounting: embeddings vs. body (blocks + final norm)."""
    return {"embeddings": embedding_params(cfg),
            "body": depth * params_per_block(cfg) + cfg.hidden}


# ---------------------------------------------------------------------------
# model <-> checkpoint


def model_to_checkpoint(model, extra_metadata: dict | None = None) -> Checkpoint:
    cfg = model.config
    if isinstance(model, FixedModel):
        meta = {"kind": "fixed", "config": cfg.to_dict(),
                "depth": len(model.blocks)}
    else:
        meta = {"kind": "recurrent", "config": cfg.to_dict(),
                "plan_tuple": list(model.plan_tuple or
                                   (len(model.prelude), len(model.recurrent),
                                    len(model.coda)))}
    if extra_metadata:
        meta.update(extra_metadata)
    return Checkpoint(metadata=meta,
                      tensors={k: v.data for k, v in model.params().items()})


def _block_from_tensors(tensors: dict, prefix: str, cfg: ModelConfig,
                        dtype) -> BlockWeights:
    fields = _BLOCK_FIELDS + (_QK_FIELDS if cfg.qk_norm else ())
    values = {}
    for f in fields:
        key = f"{prefix}.{f}"
        if key not in tensors:
            raise FormatError(f"checkpoint missing tensor {key}")
        values[f] = Tensor(np.asarray(tensors[key], dtype=dtype))
    return BlockWeights(**values)


def model_from_checkpoint(ckpt: Checkpoint, dtype=None):
    """Rebuild a FixedModel or RecurrentModel from a checkpoint."""
    meta = ckpt.metadata
    cfg = ModelConfig.from_dict(meta["config"])
    t = ckpt.tensors
    if dtype is None:
        dtype = t["embed"].dtype

    def grab(name):
        if name not in t:
            raise FormatError(f"checkpoint missing tensor {name}")
        return Tensor(np.asarray(t[name], dtype=dtype))

    unembed = None if cfg.tie_embeddings else grab("unembed")
    if meta["kind"] == "fixed":
        blocks = [_block_from_tensors(t, f"layers.{i}", cfg, dtype)
                  for i in range(meta["depth"])]
        return FixedModel(grab("embed"), blocks, grab("final_norm"), unembed, cfg)
    if meta["kind"] == "recurrent":
        p, r, c = meta["plan_tuple"]
        return RecurrentModel(
            grab("embed"),
            [_block_from_tensors(t, f"prelude.{i}", cfg, dtype) for i in range(p)],
            grab("adapter"),
            [_block_from_tensors(t, f"recurrent.{i}", cfg, dtype) for i in range(r)],
            [_block_from_tensors(t, f"coda.{i}", cfg, dtype) for i in range(c)],
            grab("final_norm"), unembed, cfg, plan_tuple=(p, r, c))
    raise FormatError(f"unknown checkpoint kind {meta['kind']!r}")


# ---------------------------------------------------------------------------
# surgery proper


def apply_surgery(donor: Checkpoint, plan: SurgeryPlan,
                  adapter_init: str = "identity-pass",
                  stream: RandomStream | None = None,
                  noise_std: float = 1e-3) -> Checkpoint:
    """Cut a recurrent checkpoint out of a fixed-depth donor.

    Selected blocks, embeddings, and the final norm are copied verbatim;
    only the adapter is new.
    """
    meta = donor.metadata
    if meta.get("kind") != "fixed":
        raise FormatError("surgery donor must be a fixed-depth checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    if meta["depth"] != plan.donor_depth:
        raise FormatError(f"plan expects donor depth {plan.donor_depth}, "
                          f"checkpoint has {meta['depth']}")
    fields = _BLOCK_FIELDS + (_QK_FIELDS if cfg.qk_norm else ())
    tensors = {}
    for name in ("embed", "final_norm") + (() if cfg.tie_embeddings else ("unembed",)):
        if name not in donor.tensors:
            raise FormatError(f"donor missing tensor {name}")
        tensors[name] = donor.tensors[name]
    for section, indices in (("prelude", plan.prelude_layers),
                             ("recurrent", plan.recurrent_layers),
                             ("coda", plan.coda_layers)):
        for k, donor_idx in enumerate(indices):
            for f in fields:
                src = f"layers.{donor_idx}.{f}"
                if src not in donor.tensors:
                    raise FormatError(f"donor missing tensor {src}")
                tensors[f"{section}.{k}.{f}"] = donor.tensors[src]
    h = cfg.hidden
    dtype = tensors["embed"].dtype
    if adapter_init == "identity-pass":
        adapter = np.zeros((2 * h, h), dtype=dtype)
        adapter[h:, :] = np.eye(h, dtype=dtype)
        if noise_std > 0:
            if stream is None:
                raise ValueError("noise_std > 0 requires a random stream")
            adapter = adapter + stream.normal((2 * h, h), 0.0, noise_std,
                                              dtype=dtype)
    elif adapter_init == "scaled-random":
        if stream is None:
            raise ValueError("scaled-random adapter init requires a stream")
        base = np.sqrt(2.0 / (5.0 * h)) / np.sqrt(2.0 * plan.donor_depth)
        adapter = stream.normal((2 * h, h), 0.0, base, dtype=dtype)
    else:
        raise ValueError(f"unknown adapter init {adapter_init!r}")
    tensors["adapter"] = adapter
    return Checkpoint(metadata={"kind": "recurrent", "config": cfg.to_dict(),
                                "plan_tuple": list(plan.tuple),
                                "plan": plan.to_dict(),
                                "surgery": {"adapter_init": adapter_init,
                                            "noise_std": noise_std}},
                      tensors=tensors)


def pruned_donor(donor: Checkpoint, plan: SurgeryPlan) -> Checkpoint:
    """Fixed-depth checkpoint keeping only the plan's layers, in plan order."""
    meta = donor.metadata
    if meta.get("kind") != "fixed":
        raise FormatError("expected a fixed-depth checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    kept = plan.prelude_layers + plan.recurrent_layers + plan.coda_layers
    fields = _BLOCK_FIELDS + (_QK_FIELDS if cfg.qk_norm else ())
    tensors = {}
    for name in ("embed", "final_norm") + (() if cfg.tie_embeddings else ("unembed",)):
        tensors[name] = donor.tensors[name]
    for k, donor_idx in enumerate(kept):
        for f in fields:
            tensors[f"layers.{k}.{f}"] = donor.tensors[f"layers.{donor_idx}.{f}"]
    return Checkpoint(metadata={"kind": "fixed", "config": cfg.to_dict(),
                                "depth": len(kept)},
                      tensors=tensors)


def block_influence_scores(model: FixedModel, calibration_tokens) -> list:
    """ShortGPT-style scores: 1 - mean cosine(block input, block output).

    Higher scores mark layers whose removal changes the residual stream
    more; an identity block (zero projections) scores 0.
    """
    calibration_tokens = np.asarray(calibration_tokens)
    if calibration_tokens.size == 0:
        raise ValueError("calibration batch must be nonempty")
    pairs = forward_fixed_hidden(model, calibration_tokens)
    scores = []
    for x_in, x_out in pairs:
        num = (x_in * x_out).sum(axis=-1)
        denom = (np.linalg.norm(x_in, axis=-1) *
                 np.linalg.norm(x_out, axis=-1) + 1e-12)
        scores.append(float(1.0 - np.mean(num / denom)))
    return scores
