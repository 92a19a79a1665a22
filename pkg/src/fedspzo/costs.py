"""Cost accounting: FLOPs, communication bytes, modeled peak memory.

Two routes exist for every quantity. Closed-form step formulas predict what
a training step should cost; live counters accumulate what the code actually
did. Tests require the two to agree exactly (integer equality), so the
formulas are kept in plain integer arithmetic.

Per-parameter constants are a modeling convention, not a measurement:
a perturbation pass costs 2 FLOPs/param (sample-and-add) and an update pass
3 FLOPs/param (two multiplies, one subtract). Comparative claims never
depend on them because both sides of any comparison use the same constants.
RNG arithmetic itself is not billed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .errors import ConfigError, ContractViolation
from .models import ModelSpec

PERTURB_FLOPS_PER_PARAM = 2
UPDATE_FLOPS_PER_PARAM = 3

#: Fixed serialized header: magic + version + client + round + mode + K + P1 + P2.
PAYLOAD_HEADER_BYTES = 4 + 4 + 4 + 4 + 1 + 4 + 4 + 4
ROOT_SEED_BYTES = 8


@dataclass(frozen=True)
class CostModelParams:
    """Inputs to the closed-form step formulas."""

    fw1_flops: int
    fw2_flops: int
    d1: int
    d2: int
    p_flops_per_param: int = PERTURB_FLOPS_PER_PARAM
    u_flops_per_param: int = UPDATE_FLOPS_PER_PARAM

    def __post_init__(self):
        if self.fw1_flops <= 0 or self.fw2_flops <= 0:
            raise ConfigError("per-block forward costs must be positive")


@dataclass
class CostLedger:
    """Cumulative counters for one run; all fields monotone non-decreasing."""

    fw_flops: int = 0
    perturb_flops: int = 0
    update_flops: int = 0
    upload_bytes: int = 0
    download_bytes: int = 0
    peak_memory_bytes: int = 0
    p_flops_per_param: int = field(default=PERTURB_FLOPS_PER_PARAM, repr=False)
    u_flops_per_param: int = field(default=UPDATE_FLOPS_PER_PARAM, repr=False)

    def add_forward(self, flops: int) -> None:
        self.fw_flops += int(flops)

    def add_perturb_pass(self, num_params: int) -> None:
        self.perturb_flops += self.p_flops_per_param * int(num_params)

    def add_update_pass(self, num_params: int) -> None:
        self.update_flops += self.u_flops_per_param * int(num_params)

    def add_upload(self, nbytes: int) -> None:
        self.upload_bytes += int(nbytes)

    def add_download(self, nbytes: int) -> None:
        self.download_bytes += int(nbytes)

    def observe_peak_memory(self, nbytes: int) -> None:
        self.peak_memory_bytes = max(self.peak_memory_bytes, int(nbytes))

    def merge(self, other: "CostLedger") -> None:
        """Fold a shard's counters in; addition, so shard order never matters."""
        self.fw_flops += other.fw_flops
        self.perturb_flops += other.perturb_flops
        self.update_flops += other.update_flops
        self.upload_bytes += other.upload_bytes
        self.download_bytes += other.download_bytes
        self.peak_memory_bytes = max(self.peak_memory_bytes, other.peak_memory_bytes)

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("p_flops_per_param")
        d.pop("u_flops_per_param")
        return d


def forward_flops(spec: ModelSpec, batch_size: int) -> int:
    """Whole-model inference cost: 2*in*out per dense, 1 per activated element."""
    return spec.span_forward_flops(0, len(spec.layers), batch_size)


def zo_step_flops_single(fw: int, p: int, d: int, kind: str = "central",
                         p_flops: int = PERTURB_FLOPS_PER_PARAM,
                         u_flops: int = UPDATE_FLOPS_PER_PARAM) -> int:
    """Whole-model zero-order step cost for P perturbation directions.

    central:  per direction two forwards and a (+e, -2e, +e) perturbation
              cycle, then one update pass per direction.
    forward:  one shared base forward plus one forward per direction; each
              direction perturbs out and back (two passes).
    """
    if p < 1:
        raise ContractViolation(f"need at least one perturbation, got {p}")
    if kind == "central":
        return 2 * fw * p + 3 * p * p_flops * d + p * u_flops * d
    if kind == "forward":
        return fw * (1 + p) + 2 * p * p_flops * d + p * u_flops * d
    raise ConfigError(f"unknown difference kind {kind!r}")


def zo_step_flops_split(cfg, params: CostModelParams) -> int:
    """Split-block step cost: each block billed at its own perturbation count."""
    fw = 2 * params.fw1_flops * cfg.p1 + 2 * params.fw2_flops * cfg.p2
    perturb = 3 * (cfg.p1 * params.p_flops_per_param * params.d1
                   + cfg.p2 * params.p_flops_per_param * params.d2)
    update = (cfg.p1 * params.u_flops_per_param * params.d1
              + cfg.p2 * params.u_flops_per_param * params.d2)
    return fw + perturb + update


def payload_bytes(k: int, p1: int, p2: int, mode: str) -> int:
    """Exact serialized size of a client payload.

    Body is K records of two float64 scalars, plus (P1+P2) uint64 seeds per
    record when seeds ride along. The seeds-derived mode replaces all seed
    arrays with a single root seed next to the header. Independent of model
    size in both modes.
    """
    if k < 0:
        raise ContractViolation("negative step count")
    body = k * 2 * 8
    if mode == "with_seeds":
        return PAYLOAD_HEADER_BYTES + body + k * (p1 + p2) * 8
    if mode == "scalars_only":
        return PAYLOAD_HEADER_BYTES + ROOT_SEED_BYTES + body
    raise ConfigError(f"unknown payload mode {mode!r}")


def peak_memory_model(spec: ModelSpec, cut: int | None, batch_size: int,
                      precision: int | None = None) -> int:
    """Modeled peak bytes for one training step.

    Parameters stay resident; activations are produced one layer at a time,
    so without a split the transient is the largest single layer output.
    With a split the cut output is additionally held for reuse while the
    upper block runs, which is the only memory the split design adds.
    """
    if precision is None:
        precision = spec.precision
    bytes_per = 4 if precision == 32 else 8
    sizes = spec.layer_output_sizes(batch_size)
    if cut is None:
        peak = spec.num_params + max(sizes)
    else:
        if not 1 <= cut <= len(spec.layers) - 1:
            raise ConfigError(f"cut {cut} outside (0, {len(spec.layers)})")
        y_cut = sizes[cut - 1]
        before = max(sizes[:cut - 1], default=0)
        after = max(sizes[cut:], default=0)
        peak = spec.num_params + max(before, y_cut + after)
    return peak * bytes_per


def split_cache_overhead(spec: ModelSpec, batch_size: int) -> float:
    """Cut-activation bytes relative to parameter bytes (the split's memory tax)."""
    if spec.cut is None:
        raise ConfigError("model spec has no cut layer")
    y_cut = spec.layer_output_sizes(batch_size)[spec.cut - 1]
    return y_cut / spec.num_params
