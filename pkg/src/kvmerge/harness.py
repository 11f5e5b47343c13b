"""Synthetic decode simulation comparing key-merge algorithms.

A random multi-head projection model reads an AR(1) hidden-state stream. At
each step the new token's K/V is appended to a compressed cache and to an
uncompressed reference; the error of a step is the relative L2 distance
between the two attention outputs, averaged over heads.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .attention import attention_forward, multihead_attention
from .cache import CompressionConfig, KvCache

DESK_CONFIG = CompressionConfig(budget=256, chunk_size=64, sink_len=8)


@dataclass(frozen=True)
class SyntheticModel:
    d_model: int
    d_head: int
    heads: int
    spectral_decay: float
    W_Q: np.ndarray  # (d_model, heads * d_head); head h owns columns [h*d_head, (h+1)*d_head)
    W_K: np.ndarray
    W_V: np.ndarray

    @property
    def d_k(self) -> int:
        return self.d_head

    @property
    def d_v(self) -> int:
        return self.d_head

    def head_slice(self, W: np.ndarray, h: int) -> np.ndarray:
        return W[:, h * self.d_head:(h + 1) * self.d_head]


@dataclass(frozen=True)
class TokenStream:
    hidden_states: np.ndarray  # (T, d_model)
    rho: float

    def __len__(self) -> int:
        return self.hidden_states.shape[0]


@dataclass
class SimulationResult:
    algorithm: str
    per_step_l2_error: list[float]
    per_step_cos_error: list[float]
    per_step_cache_len: list[int]
    per_step_merges: list[int]
    per_step_fallbacks: list[int]
    final_cache_len: int
    merge_count: int
    fallback_rate: float
    wall_counters: dict[str, int] = field(default_factory=dict)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.per_step_l2_error)) if self.per_step_l2_error else 0.0


def decay_spectrum(d: int, beta: float) -> np.ndarray:
    """Singular values proportional to (i+1)^-beta, scaled so sum(sigma^2) == d."""
    s = (np.arange(d) + 1.0) ** (-float(beta))
    return s * np.sqrt(d / np.sum(s * s))


def _random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def spectral_weight(rng: np.random.Generator, d_model: int, d_head: int, beta: float) -> np.ndarray:
    U = _random_orthonormal(rng, d_model, d_head)
    V = _random_orthonormal(rng, d_head, d_head)
    return (U * decay_spectrum(d_head, beta)) @ V.T


def gen_model(seed: int, d_model: int = 64, d_head: int = 16, heads: int = 4,
              beta: float = 2.0, value_beta: float = 0.0) -> SyntheticModel:
    """Random projections; Q/K heads get spectral decay ``beta``, V heads ``value_beta``."""
    if beta < 0 or value_beta < 0:
        raise ValueError("spectral decay must be non-negative")
    if d_head > d_model:
        raise ValueError("d_head cannot exceed d_model")
    rng = np.random.default_rng([seed, 0x6D6F64])
    mats = []
    for b in (beta, beta, value_beta):
        mats.append(np.hstack([spectral_weight(rng, d_model, d_head, b) for _ in range(heads)]))
    return SyntheticModel(d_model, d_head, heads, float(beta), *mats)


def gen_stream(seed: int, length: int, d_model: int = 64, rho: float = 0.9) -> TokenStream:
    """AR(1) stream ``x_{t+1} = rho x_t + sqrt(1 - rho^2) xi_t`` with unit-variance noise."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    rng = np.random.default_rng([seed, 0x737472])
    noise = rng.standard_normal((length, d_model))
    x = np.empty_like(noise)
    x[0] = noise[0]
    c = np.sqrt(1.0 - rho * rho)
    for t in range(1, length):
        x[t] = rho * x[t - 1] + c * noise[t]
    return TokenStream(x, float(rho))


def _project(model: SyntheticModel, X: np.ndarray):
    T = X.shape[0]
    H, D = model.heads, model.d_head
    q = (X @ model.W_Q).reshape(T, H, D)
    k = (X @ model.W_K).reshape(T, H, D)
    v = (X @ model.W_V).reshape(T, H, D)
    return q, k, v


def _relative_errors(o_c: np.ndarray, o_f: np.ndarray):
    diff = np.linalg.norm(o_c - o_f, axis=-1)
    nf = np.linalg.norm(o_f, axis=-1)
    nc = np.linalg.norm(o_c, axis=-1)
    l2 = float(np.mean(diff / np.maximum(nf, 1e-300)))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.sum(o_c * o_f, axis=-1) / (nc * nf)
    cos = np.where(np.isfinite(cos), np.clip(cos, -1.0, 1.0), 1.0)
    return l2, float(np.mean(1.0 - cos))


def _residual_gaussian(rng: np.random.Generator, values: np.ndarray, output: np.ndarray) -> np.ndarray:
    # Unit Gaussian restricted to the span of the value residuals v_i - o.
    R = values - output
    u, s, _ = np.linalg.svd(R.T, full_matrices=False)
    basis = u[:, s > s[0] * 1e-10] if s.size and s[0] > 0 else u[:, :0]
    return basis @ rng.standard_normal(basis.shape[1])


def simulate_decode(model: SyntheticModel, stream: TokenStream, config: CompressionConfig,
                    ref_mode: str = "full", seed: int = 0) -> SimulationResult:
    """Decode ``stream`` token by token against a compressed and a full cache.

    ``ref_mode="full"`` records per-step errors against the uncompressed
    reference; ``"none"`` skips the reference. ``seed`` drives the surrogate
    output gradients used by the ``asymkv`` baseline.
    """
    if ref_mode not in ("full", "none"):
        raise ValueError("ref_mode must be 'full' or 'none'")
    q_all, k_all, v_all = _project(model, stream.hidden_states)
    T, H, D = q_all.shape
    ref_k = np.ascontiguousarray(k_all.transpose(1, 0, 2))
    ref_v = np.ascontiguousarray(v_all.transpose(1, 0, 2))
    cache = KvCache(config, D, D, H)
    grad_rng = np.random.default_rng([seed, 0x677264])

    res = SimulationResult(config.algorithm, [], [], [], [], [], 0, 0, 0.0)
    counters = {"appends": 0, "compress_steps": 0, "pair_merges": 0, "attention_evals": 0}
    for t in range(T):
        cache.append(k_all[t], v_all[t])
        counters["appends"] += 1
        merges = fallbacks = 0
        if cache.needs_compression():
            snaps = [attention_forward(q_all[t, h], cache.keys[h], cache.values[h]) for h in range(H)]
            grads = None
            if config.algorithm == "asymkv":
                grads = np.stack([_residual_gaussian(grad_rng, s.values, s.output) for s in snaps])
            report = cache.compress_step(snaps, grads)
            merges, fallbacks = len(report.pairs), report.fallbacks
            counters["compress_steps"] += 1
            counters["pair_merges"] += report.merges
            counters["attention_evals"] += H
        _, o_c = multihead_attention(q_all[t], cache.keys, cache.values)
        counters["attention_evals"] += H
        res.per_step_cache_len.append(len(cache))
        res.per_step_merges.append(merges)
        res.per_step_fallbacks.append(fallbacks)
        if ref_mode == "full":
            _, o_f = multihead_attention(q_all[t], ref_k[:, : t + 1], ref_v[:, : t + 1])
            counters["attention_evals"] += H
            l2, cos_err = _relative_errors(o_c, o_f)
            res.per_step_l2_error.append(l2)
            res.per_step_cos_error.append(cos_err)

    res.final_cache_len = len(cache)
    res.merge_count = cache.pair_merges
    res.fallback_rate = cache.fallbacks / cache.pair_merges if cache.pair_merges else 0.0
    res.wall_counters = counters
    return res


def summarize(algo: str, errors: Iterable[float], final_len: int, fallback_rate: float) -> dict:
    e = np.asarray(list(errors), dtype=np.float64)
    return {
        "algo": algo,
        "mean_error": float(np.mean(e)) if e.size else 0.0,
        "median_error": float(np.median(e)) if e.size else 0.0,
        "p95_error": float(np.percentile(e, 95)) if e.size else 0.0,
        "final_cache_len": int(final_len),
        "fallback_rate": float(fallback_rate),
    }


def compare_algorithms(model: SyntheticModel, stream: TokenStream, base_config: CompressionConfig,
                       algorithms: Iterable[str], seed: int = 0) -> list[dict]:
    rows = []
    for algo in algorithms:
        r = simulate_decode(model, stream, replace(base_config, algorithm=algo), seed=seed)
        rows.append(summarize(algo, r.per_step_l2_error, r.final_cache_len, r.fallback_rate))
    return rows


@dataclass(frozen=True)
class Scenario:
    """Everything besides the seed that defines a simulation run."""

    config: CompressionConfig = DESK_CONFIG
    length: int = 2048
    beta: float = 2.0
    rho: float = 0.9
    d_model: int = 64
    d_head: int = 16
    heads: int = 4
    value_beta: float = 0.0

    def build(self, seed: int):
        model = gen_model(seed, self.d_model, self.d_head, self.heads, self.beta, self.value_beta)
        return model, gen_stream(seed, self.length, self.d_model, self.rho)


def run_seed(scenario: Scenario, seed: int, algorithm: Optional[str] = None) -> SimulationResult:
    model, stream = scenario.build(seed)
    cfg = scenario.config if algorithm is None else replace(scenario.config, algorithm=algorithm)
    return simulate_decode(model, stream, cfg, seed=seed)


def _run_job(args):
    return run_seed(*args)


def run_seeds(scenario: Scenario, seeds: Iterable[int], algorithm: Optional[str] = None,
              jobs: int = 1) -> list[SimulationResult]:
    """Run one simulation per seed; results come back in seed order."""
    work = [(scenario, s, algorithm) for s in seeds]
    if jobs <= 1:
        return [_run_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_job, work))


def compare_over_seeds(scenario: Scenario, seeds: Iterable[int], algorithms: Iterable[str],
                       jobs: int = 1) -> tuple[list[dict], dict[str, list[SimulationResult]]]:
    """Per-algorithm summary rows over shared seeds, plus the raw runs."""
    seeds = list(seeds)
    runs: dict[str, list[SimulationResult]] = {}
    rows = []
    for algo in algorithms:
        rs = run_seeds(scenario, seeds, algo, jobs)
        runs[algo] = rs
        errors = np.concatenate([r.per_step_l2_error for r in rs]) if rs else []
        merges = sum(r.merge_count for r in rs)
        fb = sum(r.fallback_rate * r.merge_count for r in rs)
        row = summarize(algo, errors, max((r.final_cache_len for r in rs), default=0), fb / merges if merges else 0.0)
        row["seeds"] = len(seeds)
        rows.append(row)
    return rows, runs
