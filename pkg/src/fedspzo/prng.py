"""Deterministic, replayable Gaussian perturbation engine.

Everything that must be bit-identical between a client and the server
reconstructing its updates goes through this module. The generator stack is
pinned and never changes:

    64-bit seed --splitmix64--> 256-bit state --xoshiro256++--> uint64 stream
    uint64 pairs --Box-Muller--> standard normals

The uint64 stage is pure integer arithmetic, so a compiled (numba) and a
pure-Python implementation produce identical words; the float stage is done
once, in numpy, so there is exactly one libm code path producing normals.
Reference vectors for the normal stream ship in ``data/gaussian_test_vectors.txt``.

Perturbation and update passes stream normals in fixed-size blocks: auxiliary
memory is bounded by the block size, never by the parameter count. A pass
always consumes whole Box-Muller pairs; with an odd parameter count the last
pair's second normal is dropped and never carried into another pass.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericError

_M64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53

#: Inclusive upper bound for seeds drawn inside training loops.
SEED_DRAW_BOUND = 10**8

#: Normals generated per internal block; even so Box-Muller pairs never straddle blocks.
BLOCK = 4096


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state by one step; return (new_state, output)."""
    state = (state + _GOLDEN) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return state, z ^ (z >> 31)


def mix64(value: int) -> int:
    """One splitmix64 scramble of a 64-bit value (stateless finalizer)."""
    z = (value + _GOLDEN) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def fold_seed(*parts: int) -> int:
    """Fold integers into a single 64-bit seed, order-sensitive.

    Used to derive disjoint stream roots (init, client sampling, batch
    sampling, per-client round roots) from one master seed.
    """
    h = 0
    for p in parts:
        h = mix64(h ^ (int(p) & _M64))
    return h


def _xoshiro_init(seed: int) -> tuple[int, int, int, int]:
    state = int(seed) & _M64
    out = []
    for _ in range(4):
        state, v = splitmix64(state)
        out.append(v)
    return tuple(out)


def _fill_u64_py(state: np.ndarray, out: np.ndarray) -> None:
    """Pure-Python xoshiro256++ block fill; bit-identical to the jitted kernel."""
    s0, s1, s2, s3 = (int(x) for x in state)
    for i in range(out.shape[0]):
        tmp = (s0 + s3) & _M64
        rot = ((tmp << 23) | (tmp >> 41)) & _M64
        out[i] = (rot + s0) & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _M64
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


try:  # hot path; the Python fill above is the drop-in fallback
    import numba as _numba

    _NB_M64 = np.uint64(_M64)

    @_numba.njit(cache=True, nogil=True)
    def _fill_u64_nb(state, out):  # pragma: no cover - exercised via wrapper
        s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
        for i in range(out.shape[0]):
            tmp = (s0 + s3) & _NB_M64
            out[i] = (((tmp << np.uint64(23)) | (tmp >> np.uint64(41))) + s0) & _NB_M64
            t = (s1 << np.uint64(17)) & _NB_M64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        state[0], state[1], state[2], state[3] = s0, s1, s2, s3

    _fill_u64 = _fill_u64_nb
except ImportError:  # pragma: no cover
    _fill_u64 = _fill_u64_py


class Uint64Stream:
    """Sequential xoshiro256++ word stream seeded via splitmix64 expansion."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = np.array(_xoshiro_init(seed), dtype=np.uint64)

    def next_block(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self._state, out)
        return out

    def next_u64(self) -> int:
        return int(self.next_block(1)[0])

    def next_below(self, bound: int) -> int:
        """Uniform draw in [0, bound). Modulo reduction; bias is < bound/2**64."""
        if bound <= 0:
            raise ContractViolation(f"bound must be positive, got {bound}")
        return self.next_u64() % bound


def _box_muller(words: np.ndarray) -> np.ndarray:
    """Map an even-length uint64 array to standard normals, pairwise."""
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53  # (0, 1]
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53  # [0, 1)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = (2.0 * np.pi) * u2
    z = np.empty(words.shape[0], dtype=np.float64)
    z[0::2] = r * np.cos(ang)
    z[1::2] = r * np.sin(ang)
    return z


class GaussianStream:
    """Deterministic stream of standard normals for one seed.

    Consumption is blockwise and stateless across passes: a fresh stream is
    created per perturbation pass, and whatever tail of the final Box-Muller
    pair is unused gets dropped with the stream.
    """

    __slots__ = ("_words",)

    def __init__(self, seed: int):
        self._words = Uint64Stream(seed)

    def next_block(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        z = _box_muller(self._words.next_block(2 * pairs))
        return z[:n]

    def blocks(self, total: int, block: int = BLOCK):
        remaining = total
        while remaining > 0:
            n = min(block, remaining)
            yield self.next_block(n)
            remaining -= n


def standard_normals(seed: int, n: int) -> np.ndarray:
    """First ``n`` values of the normal stream for ``seed``, as one array."""
    return GaussianStream(seed).next_block(n)


def perturb_in_place(values: np.ndarray, seed: int, scale: float) -> None:
    """Add ``scale * z`` to ``values`` element-wise, z replayed from ``seed``.

    Auxiliary memory is O(BLOCK). ``scale == 0`` is a guaranteed no-op (bitwise,
    including -0.0 entries). For float32 vectors the normals and the scale are
    rounded to float32 first, so replay is reproducible in that precision too.
    """
    if scale == 0.0:
        return
    d = values.shape[0]
    stream = GaussianStream(seed)
    f32 = values.dtype == np.float32
    s = np.float32(scale) if f32 else float(scale)
    lo = 0
    for z in stream.blocks(d):
        hi = lo + z.shape[0]
        if f32:
            values[lo:hi] += s * z.astype(np.float32)
        else:
            values[lo:hi] += s * z
        if not np.all(np.isfinite(values[lo:hi])):
            raise NumericError("non-finite parameter after perturbation",
                               seed=seed, offset=lo)
        lo = hi


def update_in_place(values: np.ndarray, seeds, g: float, mu: float) -> None:
    """Apply the replay update ``values -= mu * g * z(seed)`` for each seed in order.

    ``g`` must already be averaged over the perturbation count; both the
    client and the server call this with identical arguments, which is what
    makes reconstruction bit-exact.
    """
    seeds = list(seeds)
    if not seeds:
        raise ContractViolation("update_in_place requires at least one seed")
    coeff = -(float(mu) * float(g))
    for seed in seeds:
        perturb_in_place(values, seed, coeff)


class SeedStream:
    """Stream of training-loop seeds drawn uniformly from {0, ..., 10**8}.

    Seeded with a per-client root; emits seeds in exactly the order the
    training loop consumes them, so a server holding the same root can
    regenerate every seed a client used.
    """

    __slots__ = ("_words",)

    def __init__(self, root: int):
        self._words = Uint64Stream(root)

    def next_seed(self) -> int:
        return self._words.next_u64() % (SEED_DRAW_BOUND + 1)
