"""Reduced-scale invariant checks runnable against any config.

These are the protocol's load-bearing properties, small enough to run in
seconds from the CLI before committing to a long experiment: the split
forward identity, bit-exact reconstruction in both payload modes, payload
size arithmetic, and formula/counter agreement for one instrumented step.
"""

from __future__ import annotations

import numpy as np

from . import costs, models, protocol
from .config import ExperimentConfig
from .estimators import SplitConfig, spzo_step
from .experiment import build_setup
from .prng import SeedStream, fold_seed


def _check_split_identity(setup, trials: int = 20) -> tuple[bool, str]:
    spec = setup.spec
    if spec.cut is None:
        return True, "skipped (no cut layer)"
    split = models.BlockSplit.from_spec(spec)
    rng = np.random.Generator(np.random.PCG64(1))
    ds = setup.client_datasets[0]
    for t in range(trials):
        theta = models.init_params(spec, fold_seed(9, t))
        idx = rng.integers(0, ds.n, size=min(8, ds.n))
        batch = models.Batch(ds.features[idx], ds.labels[idx])
        whole = models.forward_loss(spec, theta, batch)
        y = models.forward_block1(spec, theta[:split.d1], batch)
        composed = models.forward_block2(spec, theta[split.d1:], y, batch.labels)
        if whole != composed:
            return False, f"trial {t}: {whole!r} != {composed!r}"
    return True, f"{trials} random (theta, batch) pairs bit-equal"


def _check_reconstruction(setup, cfg: ExperimentConfig) -> tuple[bool, str]:
    spec = setup.spec
    method_cfg = cfg.method_config()
    if cfg.method == "fedavg_fo":
        return True, "skipped (first-order method has no replay step)"
    k = min(cfg.local_steps, 5)
    for mode in (protocol.MODE_WITH_SEEDS, protocol.MODE_SCALARS_ONLY):
        payload, final = protocol.client_train(
            spec, setup.theta0, method_cfg, k, setup.client_datasets[0],
            cfg.batch_size, root_seed=fold_seed(cfg.master_seed, protocol.TAG_ROOT, 1, 0),
            batch_seed=fold_seed(cfg.master_seed, protocol.TAG_BATCH, 1, 0), mode=mode)
        rebuilt = protocol.reconstruct(
            spec, setup.theta0, protocol.decode_payload(protocol.encode_payload(payload)),
            method_cfg.mu)
        if not np.array_equal(rebuilt, final):
            return False, f"mode {mode}: replay diverged from client parameters"
    return True, f"bitwise replay over {k} steps in both payload modes"


def _check_payload_bytes(setup, cfg: ExperimentConfig) -> tuple[bool, str]:
    if cfg.method == "fedavg_fo":
        return True, "skipped (first-order clients upload the model itself)"
    method_cfg = cfg.method_config()
    p1, p2 = ((method_cfg.p1, method_cfg.p2) if isinstance(method_cfg, SplitConfig)
              else (method_cfg.p, 0))
    k = min(cfg.local_steps, 3)
    for mode in (protocol.MODE_WITH_SEEDS, protocol.MODE_SCALARS_ONLY):
        payload, _ = protocol.client_train(
            setup.spec, setup.theta0, method_cfg, k, setup.client_datasets[0],
            cfg.batch_size, root_seed=1, batch_seed=2, mode=mode)
        want = costs.payload_bytes(k, p1, p2, mode)
        got = len(protocol.encode_payload(payload))
        if want != got:
            return False, f"mode {mode}: serialized {got} bytes, formula says {want}"
    return True, "serialized sizes equal the byte formula in both modes"


def _check_step_flops(setup, cfg: ExperimentConfig) -> tuple[bool, str]:
    if cfg.method != "fedspzo":
        return True, "skipped (formula check is for the split method)"
    spec = setup.spec
    split = models.BlockSplit.from_spec(spec)
    method_cfg = cfg.method_config()
    ledger = costs.CostLedger()
    ds = setup.client_datasets[0]
    batch = models.Batch(ds.features[:cfg.batch_size], ds.labels[:cfg.batch_size])
    theta = setup.theta0.copy()
    res = spzo_step(spec, theta, batch, method_cfg, SeedStream(3), ledger)
    rec = protocol.StepRecord(g1=res.g1, g2=res.g2, s1=res.s1, s2=res.s2)
    protocol._apply_updates(spec, theta, rec, method_cfg.p1, method_cfg.p2,
                            method_cfg.mu, ledger)
    params = costs.CostModelParams(
        fw1_flops=spec.span_forward_flops(0, spec.cut, batch.size),
        fw2_flops=spec.span_forward_flops(spec.cut, len(spec.layers), batch.size),
        d1=split.d1, d2=split.d2)
    want = costs.zo_step_flops_split(method_cfg, params)
    got = ledger.fw_flops + ledger.perturb_flops + ledger.update_flops
    if want != got:
        return False, f"instrumented {got} FLOPs, formula {want}"
    return True, f"one instrumented step == formula ({got:,} FLOPs)"


def run_verification(cfg: ExperimentConfig) -> list[tuple[str, bool, str]]:
    setup = build_setup(cfg)
    checks = [
        ("split-forward-identity", _check_split_identity(setup)),
        ("reconstruction-bitwise", _check_reconstruction(setup, cfg)),
        ("payload-byte-formula", _check_payload_bytes(setup, cfg)),
        ("step-flops-formula", _check_step_flops(setup, cfg)),
    ]
    return [(name, ok, detail) for name, (ok, detail) in checks]
