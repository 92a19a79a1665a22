"""Federated round protocol: local training, payloads, replay, aggregation.

A round broadcasts the global parameters, has each sampled client run K
local zero-order steps, and uploads per step only two float64 scalars plus
the perturbation seeds (or nothing but a root seed, since every seed a
client draws comes from a server-issued root). The server replays the
recorded (seed, scalar) updates on its own copy of the round parameters,
which reproduces each client's final parameters bit for bit without data or
forward passes, then averages the replayed models.

Wire format (all little-endian):

    magic "FSPB" | version u32 | client_id u32 | round_id u32 | mode u8
    | K u32 | P1 u32 | P2 u32 | [root_seed u64 if mode=scalars_only]
    | K records of { g1 f64, g2 f64, [ (P1+P2) seeds u64 if mode=with_seeds ] }

Update order within a step is canonically lower block then upper block on
both sides; the blocks are disjoint and each consumes only its own seeds,
so this is the one ordering decision that has to match everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .costs import CostLedger
from .errors import ConfigError, ContractViolation
from .estimators import (SplitConfig, central_zo_training_step,
                         forward_zo_training_step, spzo_step)
from .models import Batch, BlockSplit, ModelSpec, backprop_gradient
from .prng import SeedStream, Uint64Stream, fold_seed, update_in_place

_M64 = 0xFFFFFFFFFFFFFFFF

PAYLOAD_MAGIC = b"FSPB"
PAYLOAD_VERSION = 1
_PAYLOAD_HEADER = struct.Struct("<4sIIIBIII")

MODE_WITH_SEEDS = "with_seeds"
MODE_SCALARS_ONLY = "scalars_only"
_MODE_WIRE = {MODE_WITH_SEEDS: 0, MODE_SCALARS_ONLY: 1}
_WIRE_MODE = {v: k for k, v in _MODE_WIRE.items()}

# Stream-derivation tags; each (master_seed, tag, ...) tuple names one stream.
TAG_INIT = 1
TAG_SAMPLER = 2
TAG_ROOT = 3
TAG_BATCH = 4
TAG_DATA = 5


@dataclass(frozen=True)
class WholeZoConfig:
    """Whole-model zero-order baseline: p directions, central or forward."""

    p: int
    eps: float
    mu: float
    kind: str  # "central" | "forward"

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if not self.eps > 0 or not self.mu > 0:
            raise ConfigError("eps and mu must be positive")
        if self.kind not in ("central", "forward"):
            raise ConfigError(f"kind must be central or forward, got {self.kind!r}")


@dataclass(frozen=True)
class StepRecord:
    g1: float
    g2: float
    s1: tuple[int, ...]
    s2: tuple[int, ...]


@dataclass(frozen=True)
class ClientPayload:
    client_id: int
    round_id: int
    mode: str
    p1: int
    p2: int
    steps: tuple[StepRecord, ...]
    root_seed: int | None = None

    def __post_init__(self):
        if self.mode not in _MODE_WIRE:
            raise ConfigError(f"unknown payload mode {self.mode!r}")
        if self.mode == MODE_SCALARS_ONLY:
            if self.root_seed is None:
                raise ContractViolation("scalars-only payload requires a root seed")
            for rec in self.steps:
                if rec.s1 or rec.s2:
                    raise ContractViolation("scalars-only payload must not carry seeds")
        else:
            for k, rec in enumerate(self.steps):
                if len(rec.s1) != self.p1 or len(rec.s2) != self.p2:
                    raise ContractViolation(
                        f"step {k}: seed lists must have lengths ({self.p1}, {self.p2}), "
                        f"got ({len(rec.s1)}, {len(rec.s2)})")

    @property
    def k_steps(self) -> int:
        return len(self.steps)


def encode_payload(payload: ClientPayload) -> bytes:
    parts = [_PAYLOAD_HEADER.pack(PAYLOAD_MAGIC, PAYLOAD_VERSION, payload.client_id,
                                  payload.round_id, _MODE_WIRE[payload.mode],
                                  payload.k_steps, payload.p1, payload.p2)]
    if payload.mode == MODE_SCALARS_ONLY:
        parts.append(struct.pack("<Q", payload.root_seed))
    n_seeds = payload.p1 + payload.p2
    for rec in payload.steps:
        parts.append(struct.pack("<dd", rec.g1, rec.g2))
        if payload.mode == MODE_WITH_SEEDS and n_seeds:
            parts.append(struct.pack(f"<{n_seeds}Q", *rec.s1, *rec.s2))
    return b"".join(parts)


def decode_payload(blob: bytes) -> ClientPayload:
    if len(blob) < _PAYLOAD_HEADER.size:
        raise ConfigError("payload truncated before header end")
    magic, version, client_id, round_id, mode_b, k, p1, p2 = _PAYLOAD_HEADER.unpack_from(blob)
    if magic != PAYLOAD_MAGIC:
        raise ConfigError(f"bad payload magic {magic!r}")
    if version != PAYLOAD_VERSION:
        raise ConfigError(f"unsupported payload version {version}")
    if mode_b not in _WIRE_MODE:
        raise ConfigError(f"unknown payload mode byte {mode_b}")
    mode = _WIRE_MODE[mode_b]
    off = _PAYLOAD_HEADER.size
    root = None
    if mode == MODE_SCALARS_ONLY:
        if len(blob) < off + 8:
            raise ConfigError("payload truncated before root seed")
        (root,) = struct.unpack_from("<Q", blob, off)
        off += 8
    steps = []
    n_seeds = p1 + p2
    for _ in range(k):
        if len(blob) < off + 16:
            raise ConfigError("payload truncated inside a step record")
        g1, g2 = struct.unpack_from("<dd", blob, off)
        off += 16
        s1: tuple[int, ...] = ()
        s2: tuple[int, ...] = ()
        if mode == MODE_WITH_SEEDS and n_seeds:
            if len(blob) < off + 8 * n_seeds:
                raise ConfigError("payload truncated inside a seed list")
            seeds = struct.unpack_from(f"<{n_seeds}Q", blob, off)
            off += 8 * n_seeds
            s1, s2 = seeds[:p1], seeds[p1:]
        steps.append(StepRecord(g1=g1, g2=g2, s1=s1, s2=s2))
    if off != len(blob):
        raise ConfigError(f"payload has {len(blob) - off} trailing bytes")
    return ClientPayload(client_id=client_id, round_id=round_id, mode=mode,
                         p1=p1, p2=p2, steps=tuple(steps), root_seed=root)


def derive_step_seeds(stream: SeedStream, p1: int, p2: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Regenerate one step's seed lists in exactly the training consumption order.

    Split steps draw, per lower-block direction: the direction seed, ps
    upper seeds for the + pass, a shift, then ps upper seeds for the - pass
    (recorded post-shift). Whole-model steps draw one seed per direction.
    """
    if p2 == 0:
        return tuple(stream.next_seed() for _ in range(p1)), ()
    if p2 % (2 * p1) != 0:
        raise ContractViolation(f"p2={p2} incompatible with p1={p1}")
    ps = p2 // (2 * p1)
    s1s: list[int] = []
    s2s: list[int] = []
    for _ in range(p1):
        s1s.append(stream.next_seed())
        s2s.extend(stream.next_seed() for _ in range(ps))
        shift = stream.next_seed()
        s2s.extend((stream.next_seed() + shift) & _M64 for _ in range(ps))
    return tuple(s1s), tuple(s2s)


def draw_batch(dataset, stream: Uint64Stream, batch_size: int) -> Batch:
    """Uniform sample with replacement; each step's batch is independent."""
    idx = np.fromiter((stream.next_below(dataset.n) for _ in range(batch_size)),
                      dtype=np.int64, count=batch_size)
    return Batch(dataset.features[idx], dataset.labels[idx])


def _apply_updates(spec: ModelSpec, values: np.ndarray, rec: StepRecord,
                   p1: int, p2: int, mu: float, counters=None) -> None:
    """One step's replay: lower block first, then upper block; skipped when g=0
    only in effect, never in accounting."""
    if p2 > 0:
        split = BlockSplit.from_spec(spec)
        update_in_place(values[:split.d1], rec.s1, rec.g1, mu)
        update_in_place(values[split.d1:], rec.s2, rec.g2, mu)
        if counters is not None:
            for _ in range(p1):
                counters.add_update_pass(split.d1)
            for _ in range(p2):
                counters.add_update_pass(split.d2)
    else:
        update_in_place(values, rec.s1, rec.g1, mu)
        if counters is not None:
            for _ in range(p1):
                counters.add_update_pass(values.shape[0])


def client_train(spec: ModelSpec, theta_round: np.ndarray, method_cfg, k_steps: int,
                 local_data, batch_size: int, root_seed: int, batch_seed: int,
                 mode: str = MODE_WITH_SEEDS, client_id: int = 0, round_id: int = 0,
                 counters=None) -> tuple[ClientPayload, np.ndarray]:
    """Run K local zero-order steps from the round parameters.

    Every perturbation seed comes from the server-issued root, so the
    payload mode changes only what is serialized, never the trajectory.
    Returns the payload and the client's final parameters (the latter only
    so tests can check the server's replay against it).

    Estimation runs on a scratch copy of the step basis: the perturbation
    cycle restores parameters only up to rounding, and carrying that drift
    into the update would break the server's updates-only bitwise replay.
    The basis itself only ever receives the recorded updates.
    """
    if k_steps < 0:
        raise ContractViolation("negative step count")
    if local_data.n < 1:
        raise ConfigError("client dataset is empty")
    values = theta_round.copy()
    seed_stream = SeedStream(root_seed)
    batch_stream = Uint64Stream(batch_seed)
    split_mode = isinstance(method_cfg, SplitConfig)
    p1, p2 = ((method_cfg.p1, method_cfg.p2) if split_mode else (method_cfg.p, 0))

    records = []
    for k in range(k_steps):
        batch = draw_batch(local_data, batch_stream, batch_size)
        scratch = values.copy()
        if split_mode:
            res = spzo_step(spec, scratch, batch, method_cfg, seed_stream, counters)
        elif method_cfg.kind == "central":
            res = central_zo_training_step(spec, scratch, batch, method_cfg.p,
                                           method_cfg.eps, seed_stream, counters)
        else:
            res = forward_zo_training_step(spec, scratch, batch, method_cfg.p,
                                           method_cfg.eps, seed_stream, counters)
        rec = StepRecord(g1=res.g1, g2=res.g2, s1=res.s1, s2=res.s2)
        _apply_updates(spec, values, rec, p1, p2, method_cfg.mu, counters)
        records.append(rec)

    if mode == MODE_SCALARS_ONLY:
        records = [StepRecord(g1=r.g1, g2=r.g2, s1=(), s2=()) for r in records]
        payload = ClientPayload(client_id=client_id, round_id=round_id, mode=mode,
                                p1=p1, p2=p2, steps=tuple(records), root_seed=root_seed)
    else:
        payload = ClientPayload(client_id=client_id, round_id=round_id, mode=mode,
                                p1=p1, p2=p2, steps=tuple(records))
    return payload, values


def reconstruct(spec: ModelSpec, theta_round: np.ndarray, payload: ClientPayload,
                mu: float, counters=None) -> np.ndarray:
    """Replay a client's K updates on the round parameters.

    Bitwise-identical to the client's final parameters; uses no data and no
    forward passes. Scalars-only payloads re-derive the seed lists from the
    root seed in the training consumption order.
    """
    if theta_round.shape[0] != spec.num_params:
        raise ConfigError("round parameters do not match the model spec")
    values = theta_round.copy()
    stream = SeedStream(payload.root_seed) if payload.mode == MODE_SCALARS_ONLY else None
    for rec in payload.steps:
        if stream is not None:
            s1, s2 = derive_step_seeds(stream, payload.p1, payload.p2)
            rec = StepRecord(g1=rec.g1, g2=rec.g2, s1=s1, s2=s2)
        _apply_updates(spec, values, rec, payload.p1, payload.p2, mu, counters)
    return values


def aggregate(models) -> np.ndarray:
    """Element-wise mean; summation strictly in list order (pass models sorted
    by client id so rounding is reproducible)."""
    models = list(models)
    if not models:
        raise ContractViolation("aggregate needs at least one model")
    d = models[0].shape[0]
    for m in models[1:]:
        if m.shape[0] != d:
            raise ContractViolation("aggregate requires equal-length models")
    acc = models[0].copy()
    for m in models[1:]:
        acc += m
    acc /= len(models)
    return acc


def client_sampler(master_seed: int, round_id: int, n_clients: int, m: int) -> tuple[int, ...]:
    """m distinct client ids, uniform without replacement, returned sorted."""
    if not 1 <= m <= n_clients:
        raise ConfigError(f"cannot sample {m} of {n_clients} clients")
    stream = Uint64Stream(fold_seed(master_seed, TAG_SAMPLER, round_id))
    ids = list(range(n_clients))
    for i in range(m):
        j = i + stream.next_below(n_clients - i)
        ids[i], ids[j] = ids[j], ids[i]
    return tuple(sorted(ids[:m]))


def fedavg_client_train(spec: ModelSpec, theta_round: np.ndarray, mu: float,
                        k_steps: int, local_data, batch_size: int, batch_seed: int,
                        counters=None) -> np.ndarray:
    """First-order baseline client: K steps of minibatch SGD via backprop."""
    values = theta_round.copy()
    batch_stream = Uint64Stream(batch_seed)
    for _ in range(k_steps):
        batch = draw_batch(local_data, batch_stream, batch_size)
        grad = backprop_gradient(spec, values, batch, counters)
        values -= spec.dtype(mu) * grad
        if counters is not None:
            counters.add_update_pass(values.shape[0])
    return values


@dataclass(frozen=True)
class RoundPlan:
    round_id: int
    client_ids: tuple[int, ...]
    root_seeds: tuple[int, ...]

    def __post_init__(self):
        if not self.client_ids:
            raise ConfigError("a round needs at least one sampled client")
        if len(set(self.client_ids)) != len(self.client_ids):
            raise ConfigError("sampled client ids must be distinct")
        if len(self.root_seeds) != len(self.client_ids):
            raise ConfigError("one root seed per sampled client required")


def plan_round(master_seed: int, round_id: int, n_clients: int, m: int) -> RoundPlan:
    ids = client_sampler(master_seed, round_id, n_clients, m)
    roots = tuple(fold_seed(master_seed, TAG_ROOT, round_id, cid) for cid in ids)
    return RoundPlan(round_id=round_id, client_ids=ids, root_seeds=roots)


def run_round(spec: ModelSpec, theta: np.ndarray, plan: RoundPlan, method: str,
              method_cfg, k_steps: int, batch_size: int, client_datasets,
              master_seed: int, payload_mode: str = MODE_WITH_SEEDS,
              ledger: CostLedger | None = None, workers: int = 1,
              keep_payloads: bool = False):
    """One federated round: broadcast, local training, replay, average.

    Clients may run on a thread pool; results are merged in ascending client
    id order so the global model never depends on scheduling. Returns
    (new_theta, payload blobs by client id or None).
    """
    bytes_per = 4 if spec.precision == 32 else 8
    d = spec.num_params

    def one_client(idx: int):
        cid = plan.client_ids[idx]
        shard = CostLedger() if ledger is not None else None
        batch_seed = fold_seed(master_seed, TAG_BATCH, plan.round_id, cid)
        if method == "fedavg_fo":
            final = fedavg_client_train(spec, theta, method_cfg.mu, k_steps,
                                        client_datasets[cid], batch_size, batch_seed, shard)
            return cid, None, final, shard
        payload, _ = client_train(spec, theta, method_cfg, k_steps, client_datasets[cid],
                                  batch_size, root_seed=plan.root_seeds[idx],
                                  batch_seed=batch_seed, mode=payload_mode,
                                  client_id=cid, round_id=plan.round_id, counters=shard)
        return cid, encode_payload(payload), None, shard

    indices = range(len(plan.client_ids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_client, indices))
    else:
        results = [one_client(i) for i in indices]
    results.sort(key=lambda r: r[0])

    replayed = []
    blobs = {}
    for cid, blob, final, shard in results:
        if ledger is not None and shard is not None:
            ledger.merge(shard)
            ledger.add_download(d * bytes_per)
        if method == "fedavg_fo":
            if ledger is not None:
                ledger.add_upload(d * bytes_per)
            replayed.append(final)
        else:
            if ledger is not None:
                ledger.add_upload(len(blob))
            blobs[cid] = blob
            replayed.append(reconstruct(spec, theta, decode_payload(blob), method_cfg.mu))
    return aggregate(replayed), (blobs if keep_payloads and method != "fedavg_fo" else None)
