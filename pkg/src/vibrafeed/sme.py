"""Conditioned (homodyne) trajectories of the monitored mode with Markovian feedback.

Each Ito step applies the measurement update

    rho -> rho + dt [L rho - (c/2)[X,[X,rho]]]
               + sqrt(eta c) dW (i e^{i phi} rho X - i e^{-i phi} X rho + 2 sin(phi) <X> rho)

with c = chi^2/kappa, and then the feedback kick exp(K s) with
K rho = (g/2)[a - a^dag, rho] and s = I dt / (eta chi), I being the
photocurrent sample of the same step. Averaged over dW this reproduces the
feedback master equation, including the K^2/(2 eta c) diffusion.

The photocurrent mean is 2 eta kappa <O_phi>_c with
<O_phi>_c = -(chi/kappa) sin(phi) <X>_c, the value of the meter quadrature
in the adiabatically eliminated state (see ``tests/test_liouville.py`` for
the joint-model check). With the opposite sign the averaged dynamics would
pick up an extra -2 g sin(phi) <X>_c drift and no longer match.

Seeds: trajectory i of an ensemble with seed S uses
``numpy.random.SeedSequence(S, spawn_key=(i,)).generate_state(1, numpy.uint64)[0]``
as its own seed, and a trajectory seed s drives
``numpy.random.Generator(numpy.random.PCG64(numpy.random.SeedSequence(s)))``.
Increments are ``standard_normal`` draws scaled by sqrt(dt/coarsen) and
summed in groups of ``coarsen``, so a run at (dt, coarsen=2) sees exactly
the pairwise sums of the increments of a run at (dt/2, coarsen=1).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fock import DensityMatrix, FockBasis, momentum_op, position_op, thermal_state
from .liouville import PAD, IntegrationError, build_measurement_me, padded_ladder
from .params import FeedbackParams, ParameterError

CSV_HEADER = "t,mean_X,mean_P,var_X,current"
CHUNK = 100


class PositivityWarning(RuntimeWarning):
    pass


def derive_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class WienerStream:
    """Gaussian increments with mean 0 and variance dt."""

    def __init__(self, seed: int, dt: float, coarsen: int = 1):
        if dt <= 0:
            raise ValueError("dt must be > 0")
        if coarsen < 1:
            raise ValueError("coarsen must be >= 1")
        self.seed = seed
        self.dt = dt
        self.coarsen = coarsen
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def draw(self, count: int) -> np.ndarray:
        z = self._rng.standard_normal((count, self.coarsen)) * math.sqrt(self.dt / self.coarsen)
        if self.coarsen == 1:
            return z[:, 0]
        out = z[:, 0].copy()
        for j in range(1, self.coarsen):
            out += z[:, j]
        return out


@dataclass(frozen=True, eq=False)
class TrajectoryConfig:
    params: FeedbackParams
    basis: FockBasis
    dt: float
    steps: int
    seed: int = 0
    record_stride: int = 1
    coarsen: int = 1
    initial: DensityMatrix | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.record_stride < 1:
            raise ValueError(f"record_stride must be >= 1, got {self.record_stride}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.initial is not None and self.initial.basis != self.basis:
            raise ValueError("initial state lives on a different basis")

    @property
    def n_records(self) -> int:
        return -(-self.steps // self.record_stride)

    def initial_state(self) -> np.ndarray:
        if self.initial is not None:
            return np.array(self.initial.matrix)
        return np.array(thermal_state(self.basis, self.params.n).matrix)

    def with_seed(self, seed: int) -> TrajectoryConfig:
        return TrajectoryConfig(
            self.params, self.basis, self.dt, self.steps, seed,
            self.record_stride, self.coarsen, self.initial,
        )


@dataclass(eq=False)
class TrajectoryRecord:
    times: np.ndarray
    mean_X: np.ndarray
    mean_P: np.ndarray
    var_X: np.ndarray
    current: np.ndarray
    seed: int
    mean_n: np.ndarray | None = None
    states: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.times)

    def to_csv(self, path=None, preamble: str | None = None) -> str:
        lines = []
        if preamble:
            lines.append(preamble)
        lines.append(CSV_HEADER)
        for row in zip(self.times, self.mean_X, self.mean_P, self.var_X, self.current):
            lines.append(",".join(f"{float(v):.17g}" for v in row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> TrajectoryRecord:
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        if rows[0] != CSV_HEADER:
            raise ValueError(f"unexpected header {rows[0]!r}")
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]]).reshape(-1, 5)
        return cls(*(data[:, k].copy() for k in range(5)), seed=seed)


class _Kernel:
    """Per-(params, basis) operators for the stochastic step."""

    def __init__(self, params: FeedbackParams, basis: FockBasis):
        self.params = params
        self.basis = basis
        c = params.chi2_over_kappa
        if params.g != 0 and c == 0:
            raise ParameterError("feedback needs chi > 0: the loop divides the current by eta chi")
        d = basis.dim
        # banded; sparse product keeps the drift cheap for stacks of states
        self.S_T = sp.csr_matrix(build_measurement_me(params, basis).superoperator()).T.tocsr()
        self.X = np.array(position_op(basis).matrix)
        self.P = np.array(momentum_op(basis).matrix)
        self.num = np.diag(np.arange(d, dtype=float))
        # innovation and feedback act on d + PAD levels, where the products the
        # master equation relies on are exact, and the result is folded back
        a, ad = padded_ladder(d)
        self.Xp = 0.5 * (a + ad)
        self.e = complex(math.cos(params.phi), math.sin(params.phi))
        self.sinphi = math.sin(params.phi)
        self.root_etac = math.sqrt(params.eta * c)
        self.root_etak = math.sqrt(params.eta * params.kappa)
        self.I_mean = -2.0 * params.eta * params.chi * self.sinphi
        self.g = params.g
        if self.g:
            # 1j (a - a^dag) is Hermitian: exp(s (g/2)(a - a^dag)) = V exp(-i s g w / 2) V^dag
            w, V = np.linalg.eigh(1j * (a - ad))
            self.w, self.V, self.Vh = w, V, V.conj().T
            self.fb_scale = 1.0 / (params.eta * params.chi)
        self.d = d

    def step(self, rho: np.ndarray, dW: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Advance a stack of conditioned states (batch, d, d) by one step."""
        B, d = rho.shape[0], self.d
        D = d + PAD
        x = np.einsum("ij,bji->b", self.X, rho).real
        I = self.I_mean * x + self.root_etak * dW / dt
        drift = (self.S_T.T @ rho.reshape(B, d * d).T).T.reshape(B, d, d)
        out = np.zeros((B, D, D), dtype=complex)
        core = out[:, :d, :d]
        core += drift
        core *= dt
        core += rho
        rho_p = np.zeros((B, D, D), dtype=complex)
        rho_p[:, :d, :d] = rho
        rX = rho_p @ self.Xp
        noise = self.root_etac * dW
        # i e rho X - i e* X rho, using X rho = (rho X)^dag
        out += (1j * self.e * noise)[:, None, None] * rX
        out += (-1j * np.conj(self.e) * noise)[:, None, None] * _dag(rX)
        core += (2.0 * self.sinphi * x * noise)[:, None, None] * rho
        if self.g:
            s = I * dt * self.fb_scale
            phase = np.exp(-0.5j * self.g * s[:, None] * self.w)
            U = (self.V * phase[:, None, :]) @ self.Vh
            Uh = np.ascontiguousarray(_dag(U))
            out = (U @ out) @ Uh
        spill = np.einsum("bkk->b", out[:, d:, d:])
        res = out[:, :d, :d]
        res[:, d - 1, d - 1] += spill
        res = res + _dag(res)
        tr = np.einsum("bii->b", res).real
        # a non-finite entry reaches the trace within a step; full scans run at record points
        if not (np.isfinite(tr).all() and (tr > 0).all()):
            raise IntegrationError("non-finite conditioned state: reduce dt or check the parameters")
        res /= tr[:, None, None]
        return res, I


def _dag(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2).conj()


def sme_step(rho_c: DensityMatrix, params: FeedbackParams, dt: float, dW: float) -> DensityMatrix:
    """One Ito step of the conditioned state with the feedback kick applied last."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    k = _Kernel(params, rho_c.basis)
    out, _ = k.step(np.array(rho_c.matrix)[None], np.array([dW]), dt)
    result = DensityMatrix(rho_c.basis, out[0], check_positive=False)
    lo = result.min_eigenvalue()
    if lo < -1e-6:
        warnings.warn(f"conditioned state eigenvalue {lo:.3e} < -1e-6", PositivityWarning, stacklevel=2)
    return result


def homodyne_current(rho_c: DensityMatrix, params: FeedbackParams, dW: float, dt: float) -> float:
    """I = 2 eta kappa <O_phi>_c + sqrt(eta kappa) dW/dt with <O_phi>_c = -(chi/kappa) sin(phi) <X>_c."""
    if dt == 0:
        raise ValueError("dt must be nonzero")
    x = float(np.real(np.sum(position_op(rho_c.basis).matrix.T * rho_c.matrix)))
    return -2.0 * params.eta * params.chi * math.sin(params.phi) * x + math.sqrt(params.eta * params.kappa) * dW / dt


def _run_batch(cfg: TrajectoryConfig, seeds: list[int], keep_states: bool, k: _Kernel) -> list[TrajectoryRecord]:
    B = len(seeds)
    dW = np.stack([WienerStream(s, cfg.dt, cfg.coarsen).draw(cfg.steps) for s in seeds], axis=1)
    n = cfg.n_records
    mean_X, mean_P, var_X, mean_n, cur = (np.empty((B, n)) for _ in range(5))
    states = np.empty((B, n, k.d, k.d), dtype=complex) if keep_states else None
    rho = np.repeat(cfg.initial_state()[None], B, axis=0)
    X2 = k.X @ k.X
    j = 0
    for step in range(cfg.steps):
        record = step % cfg.record_stride == 0
        if record:
            x = np.real(np.einsum("ij,bji->b", k.X, rho))
            mean_X[:, j] = x
            mean_P[:, j] = np.real(np.einsum("ij,bji->b", k.P, rho))
            var_X[:, j] = np.real(np.einsum("ij,bji->b", X2, rho)) - x * x
            mean_n[:, j] = np.real(np.einsum("ii,bii->b", k.num, rho))
            if not np.isfinite(rho).all():
                raise IntegrationError("non-finite conditioned state: reduce dt or check the parameters")
            if keep_states:
                states[:, j] = rho
        rho, I = k.step(rho, dW[step], cfg.dt)
        if record:
            cur[:, j] = I
            j += 1
    times = np.arange(n) * cfg.record_stride * cfg.dt
    return [
        TrajectoryRecord(
            times.copy(), mean_X[i], mean_P[i], var_X[i], cur[i], seeds[i], mean_n[i],
            states[i] if keep_states else None,
        )
        for i in range(B)
    ]


def run_trajectory(cfg: TrajectoryConfig, keep_states: bool = False) -> TrajectoryRecord:
    """Single conditioned trajectory; a deterministic function of cfg (seed included)."""
    return _run_batch(cfg, [cfg.seed], keep_states, _Kernel(cfg.params, cfg.basis))[0]


@dataclass(eq=False)
class EnsembleSummary:
    """Index-ordered reduction of an ensemble.

    ``*_se`` are standard errors of the ensemble means. ``uncond_var_X`` is
    the variance of X in the ensemble-mean state; by the law of total
    variance it equals ``mean_var_X + var_mean_X``.
    """

    times: np.ndarray
    mean_state: np.ndarray
    mean_X: np.ndarray
    mean_X_se: np.ndarray
    mean_n: np.ndarray
    mean_n_se: np.ndarray
    mean_P: np.ndarray
    mean_var_X: np.ndarray
    mean_var_X_se: np.ndarray
    var_mean_X: np.ndarray
    uncond_var_X: np.ndarray
    state_se: np.ndarray
    seeds: list[int]
    records: list[TrajectoryRecord] = field(repr=False)

    @property
    def n_traj(self) -> int:
        return len(self.records)


def _run_chunk(args):
    cfg, seeds = args
    return _run_batch(cfg, seeds, True, _Kernel(cfg.params, cfg.basis))


def run_ensemble(cfg: TrajectoryConfig, n_traj: int, threads: int = 1) -> EnsembleSummary:
    """Trajectories with seeds derive_seed(cfg.seed, i), reduced in index order.

    Work is split into fixed chunks of trajectory indices, so every
    trajectory is computed identically whatever the worker count.
    """
    if n_traj < 2:
        raise ValueError("n_traj must be >= 2")
    seeds = [derive_seed(cfg.seed, i) for i in range(n_traj)]
    chunks = [(cfg, seeds[i : i + CHUNK]) for i in range(0, n_traj, CHUNK)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [_run_chunk(c) for c in chunks]
    records = [r for part in parts for r in part]
    return summarize(records)


def summarize(records: list[TrajectoryRecord]) -> EnsembleSummary:
    n = len(records)
    root = math.sqrt(n)
    states = np.stack([r.states for r in records])
    xs = np.stack([r.mean_X for r in records])
    ns = np.stack([r.mean_n for r in records])
    ps = np.stack([r.mean_P for r in records])
    vs = np.stack([r.var_X for r in records])
    mean_state = states.mean(axis=0)
    d = mean_state.shape[-1]
    basis = FockBasis(d)
    X = np.array(position_op(basis).matrix)
    x_u = np.real(np.einsum("ij,tji->t", X, mean_state))
    x2_u = np.real(np.einsum("ij,tji->t", X @ X, mean_state))
    state_se = np.sqrt(states.real.var(axis=0, ddof=1) + states.imag.var(axis=0, ddof=1)) / root
    return EnsembleSummary(
        times=records[0].times.copy(),
        mean_state=mean_state,
        mean_X=xs.mean(axis=0),
        mean_X_se=xs.std(axis=0, ddof=1) / root,
        mean_n=ns.mean(axis=0),
        mean_n_se=ns.std(axis=0, ddof=1) / root,
        mean_P=ps.mean(axis=0),
        mean_var_X=vs.mean(axis=0),
        mean_var_X_se=vs.std(axis=0, ddof=1) / root,
        var_mean_X=xs.var(axis=0, ddof=0),
        uncond_var_X=x2_u - x_u**2,
        state_se=state_se,
        seeds=[r.seed for r in records],
        records=records,
    )
