"""Desk-scale studies: drift, amplification, rank/mu sweeps, granularity,
and memory accounting.

Every study is a pure function of its arguments and seed, returns an
:class:`ExperimentReport`, and accepts bits=32 as the universal smoke test
(null effects: RE ~ 0, CS ~ 1, ratios = 1). Directional claims are meant to
be read as medians over many seeds; each call runs one seed.

Series emitted per study (step key in parentheses):

* drift_simulation    - ``re``, ``cs`` (momentum step)
* amplification_study - ``re_pre_naive``, ``re_post_naive``, ``cs_pre_naive``,
  ``cs_post_naive`` and ``*_dec`` twins (quantizer-config index); optional
  ``spectrum_*`` series (singular-value index)
* rank_sweep          - ``re_post``, ``cs_post``, ``code_bits``,
  ``total_bytes`` (rank ratio)
* mu_sweep            - ``re``, ``cs`` (mu, with mu=0 the uniform baseline)
* granularity_study   - summary only (uniform/companded RE+CS per
  granularity; post-polar RE/CS for the four factor-granularity pairings)
* memory_report       - ``total_bytes_<variant>`` (shape index)
"""

from __future__ import annotations

from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..matkit import (
    frobenius_norm,
    polar_exact,
    polar_ns,
    svd_thin,
    truncated_decompose,
)
from ..optim import MuonConfig, rank_for
from ..quant import (
    Granularity,
    MemoryFootprint,
    QuantSpec,
    dequant,
    footprint_from_shape,
    memory_footprint,
    quantize,
)
from .metrics import cosine_similarity, relative_error
from .report import ExperimentReport, StopwatchMs, config_snapshot
from .synthetic import SyntheticMomentumSpec, generate_momentum

SINUSOIDAL = "sinusoidal"


def _polar(m: np.ndarray, mode: str) -> np.ndarray:
    return polar_exact(m) if mode == "exact" else polar_ns(m)


def drift_simulation(steps: int = 50, bits: int = 4, normalize: bool = True,
                     gradient_schedule=SINUSOIDAL, seed: int = 0,
                     shape: tuple[int, int] = (64, 64), beta: float = 0.95,
                     granularity: Granularity = Granularity.TENSOR,
                     mu: float = 0.0) -> ExperimentReport:
    """Quantized momentum recursion vs a float64 twin over ``steps`` updates.

    Both recursions see identical gradients: i.i.d. Gaussian directions
    whose Frobenius norm follows 10**sin(2*pi*t/steps) (the default
    schedule), or a replayed (steps, m, n) array / .npy path. Emits per-step
    RE and CS between the carried reference momentum and the reconstruction
    of its quantized twin.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grads = _resolve_schedule(gradient_schedule, steps, shape, seed)
    spec = QuantSpec(bits=bits, granularity=granularity, companding_mu=mu)
    rng_q = np.random.default_rng([seed, 11])
    m_ref = np.zeros_like(grads[0])
    m_hat = np.zeros_like(grads[0])
    re_series: list[tuple[float, float]] = []
    cs_series: list[tuple[float, float]] = []
    for t, g in enumerate(grads, start=1):
        gn = float(np.sqrt((g * g).sum()))
        if normalize:
            step_g = g / gn
            m_ref = beta * m_ref + step_g
            m_ref /= float(np.sqrt((m_ref * m_ref).sum()))
            m_q = beta * m_hat + step_g
            m_q /= float(np.sqrt((m_q * m_q).sum()))
        else:
            m_ref = beta * m_ref + g
            m_q = beta * m_hat + g
        m_hat = dequant(quantize(m_q, spec, rng_q))
        re_series.append((t, relative_error(m_ref, m_hat)))
        cs_series.append((t, cosine_similarity(m_ref, m_hat)))
    schedule_name = gradient_schedule if isinstance(gradient_schedule, str) else "replay"
    config = config_snapshot(steps=steps, bits=bits, normalize=normalize,
                             schedule=schedule_name, seed=seed, shape=list(shape),
                             beta=beta, granularity=granularity, mu=mu)
    with StopwatchMs() as sw:
        pass
    report = ExperimentReport("drift", seed, config,
                              series={"re": re_series, "cs": cs_series},
                              summary={"re_final": re_series[-1][1],
                                       "cs_final": cs_series[-1][1]})
    report.runtime_ms = sw.elapsed_ms
    return report


def _resolve_schedule(schedule, steps: int, shape: tuple[int, int], seed: int) -> np.ndarray:
    if isinstance(schedule, np.ndarray):
        grads = schedule
    elif isinstance(schedule, (str, Path)) and str(schedule) != SINUSOIDAL:
        grads = np.load(schedule)
    else:
        rng = np.random.default_rng([seed, 10])
        norms = 10.0 ** np.sin(2.0 * np.pi * np.arange(1, steps + 1) / steps)
        grads = np.empty((steps, *shape))
        for t in range(steps):
            z = rng.standard_normal(shape)
            grads[t] = norms[t] * z / float(np.sqrt((z * z).sum()))
        return grads
    if grads.ndim != 3 or grads.shape[0] < steps:
        raise ValueError(f"replayed gradients must be (steps, m, n), got {grads.shape}")
    return np.asarray(grads[:steps], dtype=np.float64)


def amplification_study(spec: SyntheticMomentumSpec | None = None,
                        quant_cfgs: list[QuantSpec] | None = None,
                        decompose: bool = True, k: int = 64,
                        polar_mode: str = "ns5", power_iters: int = 12,
                        spectra: bool = False, seed: int | None = None) -> ExperimentReport:
    """Quantization error before vs after orthogonalization.

    Quantizes one synthetic momentum two ways - whole tensor, and as
    column-/row-granular rank-k factors plus residual - and reports RE/CS
    against the original both before and after the polar map. With
    ``spectra=True`` also emits the singular-value spectra of the original
    and quantized matrices before/after orthogonalization (exact-SVD cost).
    """
    spec = spec or SyntheticMomentumSpec()
    quant_cfgs = quant_cfgs if quant_cfgs is not None else [QuantSpec(bits=4)]
    seed = spec.seed if seed is None else seed
    if decompose and k > min(spec.shape):
        raise ValueError(f"rank {k} exceeds min{spec.shape}")
    mbar = generate_momentum(spec, seed)
    p_ref = _polar(mbar, polar_mode)
    series: dict[str, list[tuple[float, float]]] = {}
    for idx, qc in enumerate(quant_cfgs):
        m_naive = dequant(quantize(mbar, qc))
        _append(series, "re_pre_naive", idx, relative_error(mbar, m_naive))
        _append(series, "cs_pre_naive", idx, cosine_similarity(mbar, m_naive))
        p_naive = _polar_or_zero(m_naive, polar_mode)
        _append(series, "re_post_naive", idx, relative_error(p_ref, p_naive))
        _append(series, "cs_post_naive", idx, cosine_similarity(p_ref, p_naive))
        if decompose:
            m_dec = _decomposed_reconstruction(mbar, k, qc, power_iters, seed)
            _append(series, "re_pre_dec", idx, relative_error(mbar, m_dec))
            _append(series, "cs_pre_dec", idx, cosine_similarity(mbar, m_dec))
            p_dec = _polar_or_zero(m_dec, polar_mode)
            _append(series, "re_post_dec", idx, relative_error(p_ref, p_dec))
            _append(series, "cs_post_dec", idx, cosine_similarity(p_ref, p_dec))
        if spectra and idx == 0:
            series["spectrum_original"] = _spectrum(mbar)
            series["spectrum_quantized"] = _spectrum(m_naive)
            series["spectrum_original_post"] = _spectrum(p_ref)
            series["spectrum_quantized_post"] = _spectrum(p_naive)
            if decompose:
                series["spectrum_decomposed"] = _spectrum(m_dec)
                series["spectrum_decomposed_post"] = _spectrum(p_dec)
    summary = {name: pts[0][1] for name, pts in series.items()
               if not name.startswith("spectrum")}
    config = config_snapshot(momentum=spec, quant_cfgs=quant_cfgs, decompose=decompose,
                             k=k, polar_mode=polar_mode, power_iters=power_iters,
                             seed=seed)
    return ExperimentReport("amplify", seed, config, series=series, summary=summary)


def _append(series, name, step, value):
    series.setdefault(name, []).append((step, value))


def _spectrum(m: np.ndarray) -> list[tuple[float, float]]:
    _, sig, _ = svd_thin(m)
    return [(i, float(s)) for i, s in enumerate(sig)]


def _polar_or_zero(m: np.ndarray, mode: str) -> np.ndarray:
    # An all-zero reconstruction (fully saturated quantizer underflow) has
    # no polar factor; report it as the zero matrix instead of failing.
    if frobenius_norm(m) == 0.0:
        return np.zeros_like(m)
    return _polar(m, mode)


def _decomposed_reconstruction(mbar: np.ndarray, k: int, qc: QuantSpec,
                               power_iters: int, seed: int) -> np.ndarray:
    dec = truncated_decompose(mbar, k, iters=power_iters,
                              rng=np.random.default_rng([seed, 21]))
    uq = quantize(dec.u, replace(qc, granularity=Granularity.COLUMN))
    sq = quantize(dec.s, replace(qc, granularity=Granularity.ROW))
    rq = quantize(dec.residual, qc)
    return dequant(uq) @ dequant(sq) + dequant(rq)


def rank_sweep(spec: SyntheticMomentumSpec | None = None, bits: int = 4,
               ratios: tuple = (0, Fraction(1, 64), Fraction(1, 16), Fraction(1, 8),
                                Fraction(1, 4), Fraction(1, 2), 1),
               mu: float = 255.0, polar_mode: str = "ns5", power_iters: int = 12,
               seed: int | None = None) -> ExperimentReport:
    """Post-orthogonalization RE/CS and memory as the truncation rank varies.

    Ratio 0 means no decomposition (whole-tensor quantization); other ratios
    use k = max(1, round(ratio * min(shape))). Memory series use the exact
    block accounting of the corresponding optimizer state.
    """
    spec = spec or SyntheticMomentumSpec()
    seed = spec.seed if seed is None else seed
    mbar = generate_momentum(spec, seed)
    p_ref = _polar(mbar, polar_mode)
    r = min(spec.shape)
    qc = QuantSpec(bits=bits, companding_mu=mu)
    series: dict[str, list[tuple[float, float]]] = {}
    for ratio in ratios:
        fr = float(ratio)
        if not 0 <= fr <= 1:
            raise ValueError("ratios must lie in [0, 1]")
        if fr == 0:
            blocks = [quantize(mbar, qc)]
            m_hat = dequant(blocks[0])
        else:
            k = min(max(1, round(fr * r)), r)
            dec = truncated_decompose(mbar, k, iters=power_iters,
                                      rng=np.random.default_rng([seed, 22]))
            blocks = [quantize(dec.u, replace(qc, granularity=Granularity.COLUMN)),
                      quantize(dec.s, replace(qc, granularity=Granularity.ROW)),
                      quantize(dec.residual, qc)]
            m_hat = dequant(blocks[0]) @ dequant(blocks[1]) + dequant(blocks[2])
        fp = memory_footprint(blocks)
        p_hat = _polar_or_zero(m_hat, polar_mode)
        _append(series, "re_post", fr, relative_error(p_ref, p_hat))
        _append(series, "cs_post", fr, cosine_similarity(p_ref, p_hat))
        _append(series, "code_bits", fr, fp.code_bits)
        _append(series, "total_bytes", fr, fp.total_bytes)
    best = max(series["cs_post"], key=lambda p: p[1])
    config = config_snapshot(momentum=spec, bits=bits, ratios=list(ratios), mu=mu,
                             polar_mode=polar_mode, power_iters=power_iters, seed=seed)
    return ExperimentReport("rank_sweep", seed, config, series=series,
                            summary={"best_ratio": best[0], "best_cs_post": best[1]})


def mu_sweep(spec: SyntheticMomentumSpec | None = None, bits: int = 4,
             granularity: Granularity = Granularity.ROW,
             mus: tuple = (15, 63, 127, 255, 511, 1023),
             seed: int | None = None) -> ExperimentReport:
    """RE/CS of companded quantization across mu, with the mu=0 uniform
    baseline as the first row of each series."""
    spec = spec or SyntheticMomentumSpec()
    seed = spec.seed if seed is None else seed
    mbar = generate_momentum(spec, seed)
    series: dict[str, list[tuple[float, float]]] = {}
    for mu in (0, *mus):
        qc = QuantSpec(bits=bits, granularity=granularity, companding_mu=float(mu))
        m_hat = dequant(quantize(mbar, qc))
        _append(series, "re", mu, relative_error(mbar, m_hat))
        _append(series, "cs", mu, cosine_similarity(mbar, m_hat))
    companded = [(mu, cs) for mu, cs in series["cs"] if mu > 0]
    best_mu, best_cs = max(companded, key=lambda p: p[1])
    config = config_snapshot(momentum=spec, bits=bits, granularity=granularity,
                             mus=list(mus), seed=seed)
    return ExperimentReport("mu_sweep", seed, config, series=series,
                            summary={"best_mu": best_mu, "best_cs": best_cs,
                                     "cs_uniform": series["cs"][0][1],
                                     "re_uniform": series["re"][0][1]})


_GRAN_NAMES = {Granularity.TENSOR: "tensor", Granularity.ROW: "row",
               Granularity.COLUMN: "column"}


def granularity_study(spec: SyntheticMomentumSpec | None = None, bits: int = 4,
                      mu: float = 255.0, polar_mode: str = "ns5",
                      power_iters: int = 16, seed: int | None = None) -> ExperimentReport:
    """Two granularity tables on one synthetic momentum.

    (i) uniform vs companded RE/CS at tensor/row/column granularity on the
    raw momentum; (ii) post-orthogonalization RE/CS for the four
    (U-granularity x S-granularity) pairings of a full decomposition
    ``momentum = U @ S``, where only the quantization grouping of the two
    factors varies.
    """
    spec = spec or SyntheticMomentumSpec(shape=(128, 128))
    seed = spec.seed if seed is None else seed
    mbar = generate_momentum(spec, seed)
    summary: dict[str, float] = {}
    for gran, gname in _GRAN_NAMES.items():
        m_u = dequant(quantize(mbar, QuantSpec(bits=bits, granularity=gran,
                                               companding_mu=0.0)))
        m_c = dequant(quantize(mbar, QuantSpec(bits=bits, granularity=gran,
                                               companding_mu=mu)))
        summary[f"re_uniform_{gname}"] = relative_error(mbar, m_u)
        summary[f"re_companded_{gname}"] = relative_error(mbar, m_c)
        summary[f"cs_uniform_{gname}"] = cosine_similarity(mbar, m_u)
        summary[f"cs_companded_{gname}"] = cosine_similarity(mbar, m_c)
    # Full split: the residual vanishes at k = min(shape), so the pairing
    # table isolates how the factor grouping interacts with the polar map.
    k = min(spec.shape)
    dec = truncated_decompose(mbar, k, iters=power_iters,
                              rng=np.random.default_rng([seed, 23]))
    p_ref = _polar(mbar, polar_mode)
    for ugran in (Granularity.COLUMN, Granularity.ROW):
        for sgran in (Granularity.ROW, Granularity.COLUMN):
            uq = quantize(dec.u, QuantSpec(bits=bits, granularity=ugran, companding_mu=mu))
            sq = quantize(dec.s, QuantSpec(bits=bits, granularity=sgran, companding_mu=mu))
            m_hat = dequant(uq) @ dequant(sq)
            p_hat = _polar_or_zero(m_hat, polar_mode)
            key = f"u{_GRAN_NAMES[ugran][:3]}_s{_GRAN_NAMES[sgran][:3]}"
            summary[f"re_post_{key}"] = relative_error(p_ref, p_hat)
            summary[f"cs_post_{key}"] = cosine_similarity(p_ref, p_hat)
    config = config_snapshot(momentum=spec, bits=bits, mu=mu, polar_mode=polar_mode,
                             power_iters=power_iters, seed=seed)
    return ExperimentReport("granularity", seed, config, summary=summary)


# Compiled-in shape inventories: (rows, cols) per weight matrix.
# gpt2-small is the 12-layer stack of four attention projections plus the
# two MLP matrices at d_model=768, d_ffn=3072.
INVENTORIES: dict[str, list[tuple[int, int]]] = {
    "gpt2-small": [(768, 768)] * 4 * 12 + [(768, 3072), (3072, 768)] * 12,
    "square-1024": [(1024, 1024)],
}

MEMORY_VARIANTS = ("muon32", "muon8", "muon4", "muonq4", "muonq84")


def _variant_blocks(m: int, n: int, variant: str, cfg: MuonConfig) -> list[tuple[int, int, QuantSpec]]:
    gran = cfg.state_spec.granularity
    if variant == "muon32":
        return [(m, n, QuantSpec(bits=32))]
    if variant == "muon8":
        return [(m, n, QuantSpec(bits=8, granularity=gran, companding_mu=0.0))]
    if variant == "muon4":
        return [(m, n, QuantSpec(bits=4, granularity=gran, companding_mu=0.0))]
    ratio = cfg.rank_ratio if cfg.rank_ratio is not None else Fraction(1, 16)
    k = min(max(1, round(ratio * min(m, n))), min(m, n))
    factor_bits = 8 if variant == "muonq84" else 4
    mu = cfg.state_spec.companding_mu
    return [
        (m, k, QuantSpec(bits=factor_bits, granularity=Granularity.COLUMN, companding_mu=mu)),
        (k, n, QuantSpec(bits=factor_bits, granularity=Granularity.ROW, companding_mu=mu)),
        (m, n, QuantSpec(bits=4, granularity=gran, companding_mu=mu)),
    ]


def memory_report(shape_inventory="gpt2-small", cfg: MuonConfig | None = None,
                  seed: int = 0) -> ExperimentReport:
    """Exact optimizer-state memory for every variant over a shape inventory.

    Uses the closed-form block accounting (no tensors are materialized);
    reports per-matrix byte series and aggregate compression ratios against
    32-bit dense storage.
    """
    if isinstance(shape_inventory, str):
        try:
            shapes = INVENTORIES[shape_inventory]
        except KeyError:
            raise ValueError(f"unknown inventory {shape_inventory!r}; "
                             f"built-ins: {sorted(INVENTORIES)}") from None
        inventory_name = shape_inventory
    else:
        shapes = [(int(m), int(n)) for m, n in shape_inventory]
        inventory_name = "custom"
    cfg = cfg or MuonConfig()
    dense_bytes = sum(4 * m * n for m, n in shapes)
    series: dict[str, list[tuple[float, float]]] = {}
    summary: dict[str, float] = {"dense_bytes": dense_bytes,
                                 "n_matrices": len(shapes)}
    for variant in MEMORY_VARIANTS:
        total = MemoryFootprint(0, 0, 0)
        for idx, (m, n) in enumerate(shapes):
            fp = MemoryFootprint(0, 0, 0)
            for rows, cols, qspec in _variant_blocks(m, n, variant, cfg):
                part = footprint_from_shape(rows, cols, qspec)
                fp = MemoryFootprint(fp.code_bits + part.code_bits,
                                     fp.scale_bits + part.scale_bits,
                                     fp.total_bytes + part.total_bytes)
            _append(series, f"total_bytes_{variant}", idx, fp.total_bytes)
            total = MemoryFootprint(total.code_bits + fp.code_bits,
                                    total.scale_bits + fp.scale_bits,
                                    total.total_bytes + fp.total_bytes)
        summary[f"code_bits_{variant}"] = total.code_bits
        summary[f"scale_bits_{variant}"] = total.scale_bits
        summary[f"bytes_{variant}"] = total.total_bytes
        summary[f"mib_{variant}"] = total.total_bytes / (1 << 20)
        summary[f"ratio_{variant}"] = dense_bytes / total.total_bytes
    summary["muonq4_vs_muon4_bytes"] = summary["bytes_muonq4"] / summary["bytes_muon4"]
    config = config_snapshot(inventory=inventory_name, shapes=[list(s) for s in shapes],
                             cfg=cfg, seed=seed)
    return ExperimentReport("memory", seed, config, series=series, summary=summary)
