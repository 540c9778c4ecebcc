"""Seeded experiment runner.

Produces per-iteration trace records, the learning-rate bound scan on the
regression problem (where every constant of the quadratic upper bound is
computable in closed form), aligned multi-run comparisons, and per-step
timing probes. Divergence is data, not an error: a run whose loss blows up
keeps logging so the curve can be plotted.
"""

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO

import numpy as np

from . import linalg, optim, problems, refactor, rng
from .errors import (IllConditioned, NonSpdInput, RankDeficient, RefloraError,
                     ZeroFactor)
from .linalg import Array, spectral_norm
from .optim import GradientPair, OptimizerState, StepConfig
from .problems import Problem
from .refactor import LowRankFactors, RefactorMode

DIVERGENCE_FACTOR = 1e6

TRACE_HEADER = ("step,loss,norm_a,norm_b,grad_norm_a,grad_norm_b,"
                "balance_gap,step_time_ns")
BOUND_SCAN_HEADER = "eta,mode,true_loss,upper_bound"


@dataclass(frozen=True)
class RunSpec:
    """Everything needed to reproduce one optimization run."""

    problem: str                  # "mf" or "linreg"
    m: int
    n: int
    r: int
    seed: int
    eta: float
    method: str = optim.METHOD_LORA_GD
    optimizer: str = optim.GD
    refactor_mode: RefactorMode = field(default_factory=refactor.balanced_mode)
    warmup_steps: int = 1
    iterations: int = 2000
    log_every: int = 1
    k: int = 0                    # linreg sample count
    sigma_a: float = 1.0
    sigma_b: float = 0.0
    weight_decay: float = 0.0
    alpha: Optional[float] = None  # adapter scale: W = W_pt + (alpha/r) A B^T
    label: str = ""
    out: Optional[str] = None     # optional trace sink

    def __post_init__(self):
        if self.problem not in ("mf", "linreg"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.iterations < 1 or self.log_every < 1:
            raise ValueError("iterations and log_every must be >= 1")
        if self.problem == "linreg" and self.k < 1:
            raise ValueError("linreg needs k >= 1")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    norm_a: float
    norm_b: float
    grad_norm_a: float
    grad_norm_b: float
    balance_gap: float
    step_time_ns: int


@dataclass
class RunResult:
    spec: RunSpec
    records: list[TraceRecord]
    diverged: bool
    diverged_step: Optional[int]
    final_factors: LowRankFactors

    @property
    def initial_loss(self) -> float:
        return self.records[0].loss

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss


def build_problem(spec: RunSpec) -> Problem:
    if spec.problem == "mf":
        problem, _ = problems.make_mf(spec.m, spec.n, spec.r, spec.seed)
    else:
        problem, _ = problems.make_linreg(spec.m, spec.n, spec.k, spec.seed)
    return problem


def _raw_gap(f: LowRankFactors) -> float:
    ga = refactor.gram(f.a)
    gb = refactor.gram(f.b)
    denom = float(np.linalg.norm(ga))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(ga - gb) / denom)


def balance_gap(f: LowRankFactors, method: str) -> float:
    """Relative Gram mismatch of the pair the method effectively trains.

    For the full refactoring this is the gap of the implicitly balanced
    pair (A S^{1/2}, B S^{-1/2}); baselines report the raw factors' gap.
    """
    if method != optim.METHOD_REFLORA:
        return _raw_gap(f)
    try:
        s = refactor.geometric_mean_s(f)
        a_t = f.a @ linalg.spd_sqrt(s)
        b_t = f.b @ linalg.spd_inv_sqrt(s)
        return _raw_gap(LowRankFactors(a_t, b_t))
    except (RankDeficient, ZeroFactor, NonSpdInput, IllConditioned, ValueError):
        return _raw_gap(f)


def _all_finite(f: LowRankFactors, gp: GradientPair, loss: float) -> bool:
    return bool(np.isfinite(loss)
                and np.all(np.isfinite(f.a)) and np.all(np.isfinite(f.b))
                and np.all(np.isfinite(gp.g_a)) and np.all(np.isfinite(gp.g_b)))


def _take_step(f: LowRankFactors, gp: GradientPair, cfg: StepConfig,
               state: Optional[OptimizerState], t: int
               ) -> tuple[LowRankFactors, Optional[OptimizerState]]:
    method = cfg.method
    if method == optim.METHOD_LORA_GD:
        if cfg.optimizer == optim.GD:
            return optim.lora_gd_step(f, gp, cfg.eta), state
        # plain adaptive updates are the identity-preconditioned path
        id_cfg = dataclasses.replace(cfg, refactor_mode=refactor.identity_mode())
        return optim.reflora_step(f, gp, id_cfg, state, t=t)
    if method == optim.METHOD_REFLORA:
        return optim.reflora_step(f, gp, cfg, state, t=t)
    if method == optim.METHOD_REFLORA_S:
        return optim.reflora_s_step(f, gp, cfg, state, t=t)
    if method == optim.METHOD_SCALEDGD:
        if t < cfg.warmup_steps and not f.is_full_rank():
            return optim.lora_gd_step(f, gp, cfg.eta), state
        return optim.scaledgd_step(f, gp, cfg.eta), state
    raise ValueError(f"unknown method {method!r}")


def run(spec: RunSpec) -> RunResult:
    """Execute a run and return its trace.

    Logs the state at step 0, every log_every-th step, and the final step.
    The diverged flag latches once the loss exceeds 1e6 times the initial
    loss or stops being finite; stepping continues so the divergent curve
    is still recorded.
    """
    problem = build_problem(spec)
    scale = 1.0 if spec.alpha is None else spec.alpha / spec.r
    f = problems.init_factors(spec.m, spec.n, spec.r, spec.seed,
                              spec.sigma_a, spec.sigma_b)
    cfg = StepConfig(eta=spec.eta, method=spec.method, optimizer=spec.optimizer,
                     refactor_mode=spec.refactor_mode,
                     warmup_steps=spec.warmup_steps)
    state: Optional[OptimizerState] = None
    if spec.optimizer in (optim.ADAM, optim.ADAMW):
        state = OptimizerState.zeros(spec.m, spec.n, spec.r,
                                     weight_decay=spec.weight_decay)

    records: list[TraceRecord] = []
    diverged = False
    diverged_step: Optional[int] = None
    last_step_ns = 0

    def snapshot(t: int, loss: float, gp: GradientPair) -> TraceRecord:
        return TraceRecord(
            step=t,
            loss=loss,
            norm_a=float(np.linalg.norm(f.a)),
            norm_b=float(np.linalg.norm(f.b)),
            grad_norm_a=float(np.linalg.norm(gp.g_a)),
            grad_norm_b=float(np.linalg.norm(gp.g_b)),
            balance_gap=balance_gap(f, spec.method),
            step_time_ns=last_step_ns,
        )

    with np.errstate(over="ignore", invalid="ignore"):
        loss = problem.loss_at_factors(f, scale)
        initial_loss = loss
        unchecked = False
        for t in range(spec.iterations):
            gp = problem.grad_pair(f, scale)
            if t % spec.log_every == 0:
                records.append(snapshot(t, loss, gp))
            t0 = time.perf_counter_ns()
            if unchecked or not _all_finite(f, gp, loss):
                # past representable divergence: keep the trace alive with
                # raw GD arithmetic, which propagates inf/nan harmlessly
                unchecked = True
                f = LowRankFactors.unchecked(f.a - cfg.eta * gp.g_a,
                                             f.b - cfg.eta * gp.g_b)
            else:
                try:
                    f, state = _take_step(f, gp, cfg, state, t)
                except (RefloraError, ValueError, np.linalg.LinAlgError):
                    if not diverged:
                        raise
                    unchecked = True
                    f = LowRankFactors.unchecked(f.a - cfg.eta * gp.g_a,
                                                 f.b - cfg.eta * gp.g_b)
            last_step_ns = time.perf_counter_ns() - t0
            loss = problem.loss_at_factors(f, scale)
            if not diverged and (not np.isfinite(loss)
                                 or loss > DIVERGENCE_FACTOR * initial_loss):
                diverged = True
                diverged_step = t + 1
        gp = problem.grad_pair(f, scale)
        records.append(snapshot(spec.iterations, loss, gp))

    result = RunResult(spec=spec, records=records, diverged=diverged,
                       diverged_step=diverged_step, final_factors=f)
    if spec.out:
        with open(spec.out, "w") as out:
            write_trace_csv(out, records)
    return result


# ---------------------------------------------------------------------------
# bound scan

@dataclass(frozen=True)
class BoundScanSpec:
    """Learning-rate scan of the true loss vs. the quadratic upper bound.

    Restricted to the regression problem, whose Lipschitz constant and all
    bound constants are exact. The grid never contains eta = 0 (jump
    discontinuity); any exact zero produced by the grid spacing is dropped.
    """

    m: int = 2
    n: int = 2
    k: int = 2
    r: int = 1
    seed: int = 0
    eta_min: float = -0.5
    eta_max: float = 0.5
    points: int = 201
    sigma_a: float = np.sqrt(10.0)
    sigma_b: float = np.sqrt(0.1)
    root: str = refactor.ROOT_PLUS

    def __post_init__(self):
        if self.points < 2:
            raise ValueError("points must be >= 2")
        if self.eta_min >= self.eta_max:
            raise ValueError("eta_min must be below eta_max")


@dataclass(frozen=True)
class BoundScanRow:
    eta: float
    mode: str
    true_loss: float
    upper_bound: float
    remainder: float  # exact value of the cubic term omitted from the bound


def eta_grid(spec: BoundScanSpec) -> Array:
    grid = np.linspace(spec.eta_min, spec.eta_max, spec.points)
    return grid[grid != 0.0]


def bound_scan(spec: BoundScanSpec) -> list[BoundScanRow]:
    """One refactored step per (eta, mode), with the exact loss and bound.

    The bound's S-independent constants are evaluated in closed form for
    the quadratic loss: with G the dense gradient at the current point and
    R = G B A^T G,

        const(eta) = loss_now + eta^2 <G, R> + (L eta^4 / 2) ||R||_F^2
                     - ||G||_F^2 / L + (m + n - 1) ||G||_2^2 / (2 L).

    The emitted upper bound is the truncated bound plus const(eta); the
    exact cubic term -L eta^3 <A S A^T G + G B S^{-1} B^T, R>, dropped by
    the truncation, is reported per row so bound-vs-loss checks can add it
    back.
    """
    problem, _ = problems.make_linreg(spec.m, spec.n, spec.k, spec.seed)
    f = problems.init_factors(spec.m, spec.n, spec.r, spec.seed,
                              spec.sigma_a, spec.sigma_b)
    lip = problem.lipschitz
    w0 = problem.full_weight(f)
    loss_now = problem.loss(w0)
    g = problem.grad(w0)
    g_spec = spectral_norm(g)
    g_fro2 = float(np.sum(g * g))
    r_term = g @ f.b @ (f.a.T @ g)

    rows: list[BoundScanRow] = []
    for eta in eta_grid(spec):
        const = (loss_now
                 + eta ** 2 * float(np.sum(g * r_term))
                 + 0.5 * lip * eta ** 4 * float(np.sum(r_term * r_term))
                 - g_fro2 / lip
                 + (spec.m + spec.n - 1) * g_spec ** 2 / (2.0 * lip))
        for mode_name in ("identity", "theorem-exact"):
            if mode_name == "identity":
                s = np.eye(spec.r)
            else:
                mode = refactor.theorem_exact_mode(lip, spec.root)
                s = refactor.optimal_s(f, float(eta), mode).s_matrix
            s_inv = np.linalg.inv(s)
            # preconditioned step, then the exact loss at the new factors
            a_new = f.a - eta * (g @ f.b) @ s_inv
            b_new = f.b - eta * (g.T @ f.a) @ s
            true_loss = problem.loss(problem.w_pretrained + a_new @ b_new.T)
            bound = refactor.upper_bound_eval(f, s, float(eta), lip, g_spec,
                                              loss_now, const)
            m_term = f.a @ s @ (f.a.T @ g) + g @ f.b @ s_inv @ f.b.T
            remainder = -lip * eta ** 3 * float(np.sum(m_term * r_term))
            rows.append(BoundScanRow(eta=float(eta), mode=mode_name,
                                     true_loss=true_loss, upper_bound=bound,
                                     remainder=remainder))
    return rows


# ---------------------------------------------------------------------------
# comparison

@dataclass
class CompareTable:
    columns: list[str]
    rows: list[list]


def _run_label(spec: RunSpec, index: int, seen: set) -> str:
    label = spec.label or f"{spec.method}-eta{spec.eta:g}"
    if label in seen:
        label = f"{label}#{index}"
    seen.add(label)
    return label


def compare(specs: Sequence[RunSpec], max_workers: Optional[int] = None
            ) -> CompareTable:
    """Run several specs on the same problem instance and join on step.

    All specs must share the problem kind, dimensions, and seed. Member
    runs are independent and deterministic, so they may execute on a
    thread pool; the joined table is identical either way.
    """
    if not specs:
        raise ValueError("compare needs at least one spec")
    key = (specs[0].problem, specs[0].m, specs[0].n, specs[0].k,
           specs[0].r, specs[0].seed)
    for s in specs[1:]:
        if (s.problem, s.m, s.n, s.k, s.r, s.seed) != key:
            raise ValueError("compare specs must share the problem instance "
                             "(kind, dims, seed)")
    if max_workers is not None and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, specs))
    else:
        results = [run(s) for s in specs]

    seen: set = set()
    labels = [_run_label(s, i, seen) for i, s in enumerate(specs)]
    fields = ("loss", "norm_a", "norm_b", "grad_norm_a", "grad_norm_b",
              "balance_gap", "step_time_ns")
    columns = ["step"]
    for label in labels:
        columns.extend(f"{label}.{f}" for f in fields)

    by_step: list[dict[int, TraceRecord]] = [
        {rec.step: rec for rec in res.records} for res in results
    ]
    steps = sorted(set().union(*(d.keys() for d in by_step)))
    rows = []
    for step in steps:
        row: list = [step]
        for d in by_step:
            rec = d.get(step)
            if rec is None:
                row.extend([""] * len(fields))
            else:
                row.extend(getattr(rec, f) for f in fields)
        rows.append(row)
    return CompareTable(columns=columns, rows=rows)


# ---------------------------------------------------------------------------
# timing probe

@dataclass(frozen=True)
class OverheadRow:
    m: int
    n: int
    r: int
    method: str
    median_step_ns: float
    ratio_vs_lora: float
    refactor_phase_ns: float


def _median_time_ns(fn, repeats: int) -> float:
    fn()  # warm pass: caches, allocator
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def overhead_probe(dims: Sequence[int], ranks: Sequence[int],
                   repeats: int = 10, seed: int = 0) -> list[OverheadRow]:
    """Median per-step wall time by method on synthetic square problems.

    Gradient pairs are synthetic, so only stepper arithmetic is timed and
    no m x n matrix is ever formed. The refactor-phase column isolates the
    per-step scale computation (the balanced matrix for the full method,
    the norm ratio for the scalar one, the Gram inverses for ScaledGD).
    """
    if repeats < 10:
        raise ValueError("repeats must be at least 10")
    gen = rng.stream(seed, rng.STREAM_PROBE)
    rows: list[OverheadRow] = []
    for d in dims:
        for r in ranks:
            f = LowRankFactors(gen.standard_normal((d, r)),
                               gen.standard_normal((d, r)))
            gp = GradientPair(gen.standard_normal((d, r)),
                              gen.standard_normal((d, r)))
            eta = 1e-3
            cfg_full = StepConfig(eta=eta, method=optim.METHOD_REFLORA)
            cfg_scalar = StepConfig(eta=eta, method=optim.METHOD_REFLORA_S)

            steppers = {
                optim.METHOD_LORA_GD: lambda: optim.lora_gd_step(f, gp, eta),
                optim.METHOD_REFLORA: lambda: optim.reflora_step(f, gp, cfg_full),
                optim.METHOD_REFLORA_S: lambda: optim.reflora_s_step(
                    f, gp, cfg_scalar),
                optim.METHOD_SCALEDGD: lambda: optim.scaledgd_step(f, gp, eta),
            }
            phases = {
                optim.METHOD_LORA_GD: None,
                optim.METHOD_REFLORA: lambda: refactor.geometric_mean_s(f),
                optim.METHOD_REFLORA_S: lambda: refactor.optimal_scalar(
                    f, eta, refactor.scalar_mode()),
                optim.METHOD_SCALEDGD: lambda: (
                    linalg.spd_inverse(refactor.gram(f.a)),
                    linalg.spd_inverse(refactor.gram(f.b))),
            }
            medians = {name: _median_time_ns(fn, repeats)
                       for name, fn in steppers.items()}
            base = medians[optim.METHOD_LORA_GD]
            for name in optim.METHODS:
                phase_fn = phases[name]
                phase = _median_time_ns(phase_fn, repeats) if phase_fn else 0.0
                rows.append(OverheadRow(
                    m=d, n=d, r=r, method=name,
                    median_step_ns=medians[name],
                    ratio_vs_lora=medians[name] / base if base else float("nan"),
                    refactor_phase_ns=phase,
                ))
    return rows


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.17g}"


def write_trace_csv(out: TextIO, records: Sequence[TraceRecord],
                    header_lines: Sequence[str] = ()) -> None:
    for line in header_lines:
        out.write(f"# {line}\n")
    out.write(TRACE_HEADER + "\n")
    for rec in records:
        out.write(",".join([
            str(rec.step), _fmt(rec.loss), _fmt(rec.norm_a), _fmt(rec.norm_b),
            _fmt(rec.grad_norm_a), _fmt(rec.grad_norm_b),
            _fmt(rec.balance_gap), str(rec.step_time_ns),
        ]) + "\n")


def write_bound_scan_csv(out: TextIO, rows: Sequence[BoundScanRow],
                         header_lines: Sequence[str] = ()) -> None:
    for line in header_lines:
        out.write(f"# {line}\n")
    out.write(BOUND_SCAN_HEADER + "\n")
    for row in rows:
        out.write(",".join([
            _fmt(row.eta), row.mode, _fmt(row.true_loss), _fmt(row.upper_bound),
        ]) + "\n")


def write_compare_csv(out: TextIO, table: CompareTable,
                      header_lines: Sequence[str] = ()) -> None:
    for line in header_lines:
        out.write(f"# {line}\n")
    out.write(",".join(table.columns) + "\n")
    for row in table.rows:
        out.write(",".join(_fmt(v) for v in row) + "\n")


def write_overhead_csv(out: TextIO, rows: Sequence[OverheadRow],
                       header_lines: Sequence[str] = ()) -> None:
    for line in header_lines:
        out.write(f"# {line}\n")
    out.write("m,n,r,method,median_step_ns,ratio_vs_lora,refactor_phase_ns\n")
    for row in rows:
        out.write(",".join([
            str(row.m), str(row.n), str(row.r), row.method,
            _fmt(row.median_step_ns), _fmt(row.ratio_vs_lora),
            _fmt(row.refactor_phase_ns),
        ]) + "\n")
