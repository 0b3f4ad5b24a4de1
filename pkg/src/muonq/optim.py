"""Optimizer state machines built on the quantized-momentum representation.

Four steppers share one update convention (decoupled weight decay, then a
step of size lr along the orthogonal polar factor of the momentum):

* ``step_muon_fp``        - full-precision recursion, optionally normalized
* ``step_muon_naive_quant`` - momentum carried as one uniformly quantized block
* ``step_muonq``          - normalized recursion with the momentum carried as
                            a rank-k factor pair plus residual, each block
                            companding-quantized at its aligned granularity
* ``elementwise_fallback_step`` - bias-corrected adaptive step for the 1-D
                            parameters the matrix steppers do not cover

A step never mutates its input state; it returns a fresh one. All
randomness (warm starts, degenerate-input repair, stochastic rounding) is
derived from the state's seed and step counter, so trajectories are
bit-reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .matkit import (
    DEGENERACY_EPS,
    as_matrix,
    polar_exact,
    polar_ns,
    power_iter_update,
)
from .quant import (
    ByteReader,
    Granularity,
    QuantSpec,
    QuantizedBlock,
    decode_block,
    dequant,
    encode_block,
    quant_uniform,
    quantize,
)

POLAR_NS5 = "ns5"
POLAR_EXACT = "exact"

CHECKPOINT_MAGIC = b"MUQ1"
CHECKPOINT_VERSION = 1


def _default_state_spec() -> QuantSpec:
    return QuantSpec(bits=4, granularity=Granularity.TENSOR, companding_mu=255.0)


@dataclass(frozen=True)
class MuonConfig:
    """Hyperparameters for all Muon variants.

    ``state_spec`` governs the residual block (and the naive baseline's
    whole-momentum block); ``factor_bits`` the U/S factors. The three
    toggles select the quantized-training techniques independently:
    ``companding`` (mu-law vs uniform codes), ``normalize`` (unit-norm
    recursion), ``decompose`` (rank-k factor split). ``rank_ratio=None``
    also degenerates the decomposed path to the naive one.
    """

    lr: float = 0.001
    beta: float = 0.95
    weight_decay: float = 0.1
    polar_mode: str = POLAR_NS5
    state_spec: QuantSpec = field(default_factory=_default_state_spec)
    factor_bits: int = 4
    rank_ratio: Fraction | float | None = Fraction(1, 16)
    companding: bool = True
    normalize: bool = True
    decompose: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.polar_mode not in (POLAR_NS5, POLAR_EXACT):
            raise ValueError(f"unknown polar mode {self.polar_mode!r}")
        if self.factor_bits not in (4, 8, 32):
            raise ValueError("factor_bits must be 4, 8 or 32")
        if self.rank_ratio is not None and not 0 < self.rank_ratio <= 1:
            raise ValueError("rank_ratio must lie in (0, 1] or be None")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


def rank_for(m: int, n: int, cfg: MuonConfig) -> int:
    """Truncation rank k = max(1, round(ratio * min(m, n))), 0 when disabled."""
    if not cfg.decompose or cfg.rank_ratio is None:
        return 0
    k = max(1, round(cfg.rank_ratio * min(m, n)))
    return min(k, min(m, n))


def residual_spec(cfg: MuonConfig) -> QuantSpec:
    mu = cfg.state_spec.companding_mu if cfg.companding else 0.0
    return replace(cfg.state_spec, companding_mu=mu)


def factor_spec(cfg: MuonConfig, granularity: Granularity) -> QuantSpec:
    mu = cfg.state_spec.companding_mu if cfg.companding else 0.0
    return QuantSpec(
        bits=cfg.factor_bits,
        granularity=granularity,
        companding_mu=mu,
        rounding=cfg.state_spec.rounding,
        seed=cfg.state_spec.seed,
        group_len=cfg.state_spec.group_len,
    )


@dataclass(frozen=True)
class MuonQState:
    """Quantized factor triple (U, S, R) plus counters.

    ``uq`` must be column-granular and ``sq`` row-granular: the quantization
    groups have to coincide with the singular directions they protect, so
    misaligned construction is rejected outright. ``k=0`` means the
    decomposition is disabled and the whole momentum lives in ``rq``.
    """

    uq: QuantizedBlock | None
    sq: QuantizedBlock | None
    rq: QuantizedBlock
    k: int
    step: int
    seed: int = 0

    def __post_init__(self):
        m, n = self.rq.shape
        if self.k < 0 or self.k > min(m, n):
            raise ValueError(f"rank {self.k} invalid for shape {(m, n)}")
        if self.k == 0:
            if self.uq is not None or self.sq is not None:
                raise ValueError("k=0 state must not carry factor blocks")
            return
        if self.uq is None or self.sq is None:
            raise ValueError("k>0 state requires both factor blocks")
        if self.uq.spec.granularity != Granularity.COLUMN:
            raise ValueError("U factor must be column-granular")
        if self.sq.spec.granularity != Granularity.ROW:
            raise ValueError("S factor must be row-granular")
        if self.uq.shape != (m, self.k) or self.sq.shape != (self.k, n):
            raise ValueError("factor block shapes inconsistent with rank and residual")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rq.shape


@dataclass(frozen=True)
class NaiveQuantState:
    """Whole momentum carried as a single uniformly quantized block."""

    mq: QuantizedBlock
    step: int
    seed: int = 0


@dataclass(frozen=True)
class FpState:
    """Full-precision momentum buffer."""

    m: np.ndarray
    step: int


@dataclass(frozen=True)
class FallbackState:
    """First/second moment estimates for the element-wise fallback."""

    m: np.ndarray
    v: np.ndarray
    step: int


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def init_muonq_state(m: int, n: int, cfg: MuonConfig, seed: int | None = None) -> MuonQState:
    """Zero momentum plus a seeded Gaussian warm start for the right factor.

    The warm start only seeds the power iteration; the reconstructed
    momentum of a fresh state is exactly zero.
    """
    if m < 1 or n < 1:
        raise ShapeMismatchError("matrix dimensions must be positive")
    seed = cfg.seed if seed is None else seed
    k = rank_for(m, n, cfg)
    rq = quantize(np.zeros((m, n)), residual_spec(cfg))
    if k == 0:
        return MuonQState(None, None, rq, 0, 0, seed)
    uq = quantize(np.zeros((m, k)), factor_spec(cfg, Granularity.COLUMN))
    warm = _stream(seed, 0).standard_normal((k, n))
    sq = quantize(warm, factor_spec(cfg, Granularity.ROW), _stream(seed, 1))
    return MuonQState(uq, sq, rq, k, 0, seed)


def init_naive_state(m: int, n: int, cfg: MuonConfig, seed: int | None = None) -> NaiveQuantState:
    if m < 1 or n < 1:
        raise ShapeMismatchError("matrix dimensions must be positive")
    seed = cfg.seed if seed is None else seed
    mq = quantize(np.zeros((m, n)), cfg.state_spec.uniform())
    return NaiveQuantState(mq, 0, seed)


def init_fp_state(m: int, n: int) -> FpState:
    if m < 1 or n < 1:
        raise ShapeMismatchError("matrix dimensions must be positive")
    return FpState(np.zeros((m, n)), 0)


def init_fallback_state(n: int) -> FallbackState:
    return FallbackState(np.zeros(n), np.zeros(n), 0)


def reconstruct_momentum(state: MuonQState) -> np.ndarray:
    """Dequantize and recombine the carried momentum (pure read)."""
    r = dequant(state.rq)
    if state.k == 0:
        return r
    return dequant(state.uq) @ dequant(state.sq) + r


def _polar(mbar: np.ndarray, cfg: MuonConfig) -> np.ndarray:
    if cfg.polar_mode == POLAR_EXACT:
        return polar_exact(mbar)
    return polar_ns(mbar)


def _check_step_inputs(w: np.ndarray, g: np.ndarray, shape: tuple[int, int]) -> None:
    if w.shape != g.shape:
        raise ShapeMismatchError(f"weight shape {w.shape} != gradient shape {g.shape}")
    if w.shape != shape:
        raise ShapeMismatchError(f"state shape {shape} != parameter shape {w.shape}")


def step_muonq(w, g, state: MuonQState, cfg: MuonConfig) -> tuple[np.ndarray, MuonQState]:
    """One training step of the quantized-factor optimizer.

    Reconstructs the previous momentum from the factor triple, applies the
    (optionally normalized) momentum recursion, refreshes the rank-k
    decomposition by one warm-started power-iteration step, quantizes the
    three blocks for the next step, and updates the parameter with the
    polar factor of the *current, un-quantized* momentum. Quantization only
    affects what is carried forward.
    """
    w = as_matrix(w)
    g = as_matrix(g)
    _check_step_inputs(w, g, state.shape)
    mhat = reconstruct_momentum(state)
    if cfg.normalize:
        m = cfg.beta * mhat
        gn = float(np.sqrt((g * g).sum()))
        if gn >= DEGENERACY_EPS:
            m += g / gn
    else:
        m = cfg.beta * mhat + g
    mn = float(np.sqrt((m * m).sum()))
    if mn < DEGENERACY_EPS:
        return w, state
    mbar = m / mn if cfg.normalize else m
    t = state.step
    if state.k > 0:
        s_prev = dequant(state.sq)
        u, s_mat, r, _ = power_iter_update(mbar, s_prev, state.k, _stream(state.seed, t, 0))
        uq = quantize(u, factor_spec(cfg, Granularity.COLUMN), _stream(state.seed, t, 1))
        sq = quantize(s_mat, factor_spec(cfg, Granularity.ROW), _stream(state.seed, t, 2))
        rq = quantize(r, residual_spec(cfg), _stream(state.seed, t, 3))
        new_state = MuonQState(uq, sq, rq, state.k, t + 1, state.seed)
    else:
        rq = quantize(mbar, residual_spec(cfg), _stream(state.seed, t, 3))
        new_state = MuonQState(None, None, rq, 0, t + 1, state.seed)
    w_new = (1.0 - cfg.lr * cfg.weight_decay) * w - cfg.lr * _polar(mbar, cfg)
    return w_new, new_state


def step_muon_fp(w, g, state: FpState, cfg: MuonConfig,
                 normalize: bool = False) -> tuple[np.ndarray, FpState]:
    """Full-precision Muon step; ``normalize=True`` selects the unit-norm
    recursion (gradient and momentum rescaled to unit Frobenius norm)."""
    w = as_matrix(w)
    g = as_matrix(g)
    _check_step_inputs(w, g, state.m.shape)
    if normalize:
        m = cfg.beta * state.m
        gn = float(np.sqrt((g * g).sum()))
        if gn >= DEGENERACY_EPS:
            m += g / gn
    else:
        m = cfg.beta * state.m + g
    mn = float(np.sqrt((m * m).sum()))
    if mn < DEGENERACY_EPS:
        return w, state
    mbar = m / mn if normalize else m
    w_new = (1.0 - cfg.lr * cfg.weight_decay) * w - cfg.lr * _polar(mbar, cfg)
    return w_new, FpState(mbar, state.step + 1)


def step_muon_naive_quant(w, g, state: NaiveQuantState, cfg: MuonConfig,
                          normalize: bool = False) -> tuple[np.ndarray, NaiveQuantState]:
    """Baseline step: un-normalized recursion, whole momentum uniformly
    quantized at ``cfg.state_spec``'s width and granularity.

    ``normalize`` opts into the unit-norm recursion for A/B comparisons;
    the baseline proper leaves it off.
    """
    w = as_matrix(w)
    g = as_matrix(g)
    _check_step_inputs(w, g, state.mq.shape)
    mhat = dequant(state.mq)
    if normalize:
        m = cfg.beta * mhat
        gn = float(np.sqrt((g * g).sum()))
        if gn >= DEGENERACY_EPS:
            m += g / gn
    else:
        m = cfg.beta * mhat + g
    mn = float(np.sqrt((m * m).sum()))
    if mn < DEGENERACY_EPS:
        return w, state
    mbar = m / mn if normalize else m
    spec = cfg.state_spec.uniform()
    rng = _stream(state.seed, state.step, 3)
    mq = quantize(mbar, spec, rng) if spec.bits == 32 else quant_uniform(mbar, spec, rng)
    w_new = (1.0 - cfg.lr * cfg.weight_decay) * w - cfg.lr * _polar(mbar, cfg)
    return w_new, NaiveQuantState(mq, state.step + 1, state.seed)


def elementwise_fallback_step(w, g, state: FallbackState, cfg: MuonConfig,
                              beta1: float = 0.9, beta2: float = 0.999,
                              eps: float = 1e-8) -> tuple[np.ndarray, FallbackState]:
    """Bias-corrected adaptive step with decoupled weight decay for 1-D
    parameters (bias/gain vectors the matrix steppers do not handle)."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.ndim != 1 or g.ndim != 1:
        raise ShapeMismatchError("fallback step handles 1-D parameters only")
    if w.shape != g.shape or w.shape != state.m.shape:
        raise ShapeMismatchError(f"shape mismatch: {w.shape} vs {g.shape}")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    w_new = (1.0 - cfg.lr * cfg.weight_decay) * w - cfg.lr * m_hat / (np.sqrt(v_hat) + eps)
    return w_new, FallbackState(m, v, t)


# --- checkpointing -----------------------------------------------------------

_KIND_MUONQ = 0
_KIND_NAIVE = 1
_KIND_FP = 2

State = MuonQState | NaiveQuantState | FpState


def state_blocks(state: State) -> list[QuantizedBlock]:
    """The quantized blocks a state carries, in serialization order."""
    if isinstance(state, MuonQState):
        if state.k > 0:
            return [state.uq, state.sq, state.rq]
        return [state.rq]
    if isinstance(state, NaiveQuantState):
        return [state.mq]
    if isinstance(state, FpState):
        m = state.m
        return [QuantizedBlock(m.shape[0], m.shape[1], QuantSpec(bits=32),
                               m.copy(), np.empty(0, dtype=np.float32))]
    raise TypeError(f"unsupported state type {type(state).__name__}")


def save_state(states: Mapping[str, State], path) -> None:
    """Serialize named optimizer states to a MUQ1 checkpoint file."""
    records = []
    total_blocks = 0
    for name, state in states.items():
        blocks = state_blocks(state)
        total_blocks += len(blocks)
        if isinstance(state, MuonQState):
            kind, step, seed, k = _KIND_MUONQ, state.step, state.seed, state.k
        elif isinstance(state, NaiveQuantState):
            kind, step, seed, k = _KIND_NAIVE, state.step, state.seed, 0
        else:
            kind, step, seed, k = _KIND_FP, state.step, 0, 0
        raw = name.encode("utf-8")
        rec = [struct.pack("<H", len(raw)), raw,
               struct.pack("<BQQIB", kind, step, seed, k, len(blocks))]
        rec.extend(encode_block(b) for b in blocks)
        records.append(b"".join(rec))
    payload = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<I", total_blocks),
        struct.pack("<I", len(records)),
        *records,
    ])
    with open(path, "wb") as fh:
        fh.write(payload)


def load_state(path) -> dict[str, State]:
    """Read a MUQ1 checkpoint back into named states.

    Raises BadMagicError / VersionMismatchError / TruncatedFileError on a
    corrupt file; never returns partial state.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    reader = ByteReader(data)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
    (version,) = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    (total_blocks,) = reader.unpack("<I")
    (n_states,) = reader.unpack("<I")
    states: dict[str, State] = {}
    seen_blocks = 0
    for _ in range(n_states):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        kind, step, seed, k, n_blocks = reader.unpack("<BQQIB")
        blocks = [decode_block(reader) for _ in range(n_blocks)]
        seen_blocks += n_blocks
        if kind == _KIND_MUONQ:
            if k > 0:
                if n_blocks != 3:
                    raise CheckpointError("rank-k state must carry 3 blocks")
                states[name] = MuonQState(blocks[0], blocks[1], blocks[2], k, step, seed)
            else:
                if n_blocks != 1:
                    raise CheckpointError("k=0 state must carry 1 block")
                states[name] = MuonQState(None, None, blocks[0], 0, step, seed)
        elif kind == _KIND_NAIVE:
            if n_blocks != 1:
                raise CheckpointError("naive state must carry 1 block")
            states[name] = NaiveQuantState(blocks[0], step, seed)
        elif kind == _KIND_FP:
            if n_blocks != 1 or blocks[0].spec.bits != 32:
                raise CheckpointError("fp state must carry 1 pass-through block")
            states[name] = FpState(dequant(blocks[0]), step)
        else:
            raise CheckpointError(f"unknown state kind {kind}")
    if seen_blocks != total_blocks:
        raise CheckpointError("block count header does not match content")
    if not reader.at_end():
        raise CheckpointError("trailing bytes after declared content")
    return states
