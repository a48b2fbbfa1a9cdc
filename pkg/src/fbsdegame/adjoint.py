"""Hamiltonians and the adjoint system of one player.

For player ``i`` the Hamiltonian is

    H = f + lam * g + p * b + q * sigma + sum_j r_j * gamma_j * nu_j,

the forward adjoint is ``dlam = H_w dt + H_z dB + sum_j grad_k H(zeta_j) dN~_j``
with ``lam(0) = psi'(W(0))`` and the backward adjoint ``(p, q, r)`` solves

    dp = -E[mu | F_t] dt + q dB + r dN~,   p(T) = phi'(X_T) + h'(X_T) lam(T),
    mu(t) = H_x(t) + H_y(t + delta) 1{t <= T - delta}
            + int_t^{t+delta} E[D_t H_L(s) | F_t] 1{s <= T} ds.

The Malliavin integral is not computed directly.  It equals ``q2``, the
martingale integrand of the auxiliary process

    p2(t) = int_t^{t+delta} E[H_L(s) | F_t] 1{s <= T} ds,

so each backward step regresses the window sum of ``H_L`` and reads ``q2``
off its covariation with ``dB``.

The mark gradient ``grad_k H(zeta_j)`` is the density of the derivative with
respect to ``nu``: ``(dH/dk_j) / nu_j``.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .bsde import BsdeSolution, DriverSpec, Projector, RegressionBasis, solve_bsde_lsmc
from .errors import ConfigError, DomainError, NumericalBlowup
from .forward import ModelSpec, PathBundle, StepState
from .timegrid import NoiseBatch, paths_major

VARIABLES = ("x", "y1", "y2", "L1", "L2", "w", "z", "k", "u1", "u2")


@dataclass
class HamArgs(StepState):
    """A StepState extended with the BSDE values and the multipliers.

    Model coefficients written for ``StepState`` accept it unchanged.
    """

    w: np.ndarray | None = None
    z: np.ndarray | None = None
    k: np.ndarray | None = None  # (n_paths, n_marks)
    lam: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    r: np.ndarray | None = None  # (n_paths, n_marks)

    def get(self, name: str) -> np.ndarray:
        if name == "x":
            return self.X
        if name in ("w", "z", "k"):
            return getattr(self, name)
        kind, idx = name[0], int(name[1:]) - 1
        seq = {"y": self.Y, "L": self.L, "u": self.U}[kind]
        return seq[idx] if idx < len(seq) else np.zeros_like(self.X)

    def with_value(self, name: str, value: np.ndarray) -> "HamArgs":
        if name == "x":
            return dataclasses.replace(self, X=value)
        if name in ("w", "z", "k"):
            return dataclasses.replace(self, **{name: value})
        kind, idx = name[0], int(name[1:]) - 1
        attr = {"y": "Y", "L": "L", "u": "U"}[kind]
        seq = list(getattr(self, attr))
        while len(seq) <= idx:
            seq.append(np.zeros_like(self.X))
        seq[idx] = value
        return dataclasses.replace(self, **{attr: tuple(seq)})


def _zero(a):
    return np.zeros_like(a.X)


def _one(w):
    return np.ones_like(np.asarray(w, dtype=float))


def _zero_fn(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    """Components of one player's Hamiltonian, all vectorised over paths.

    ``partials`` maps variable names (see ``VARIABLES``) to analytic
    derivatives; anything missing is differentiated by central differences.
    The ``k`` partial returns shape (n_paths, n_marks).
    """

    player: int
    f: Callable = _zero
    g: Callable = _zero
    b: Callable = _zero
    sigma: Callable = _zero
    gamma: Callable | None = None
    nu: tuple[float, ...] = ()
    delta: float = 0.0
    partials: Mapping[str, Callable] = field(default_factory=dict)
    phi_prime: Callable = _zero_fn
    h_prime: Callable = _zero_fn
    psi_prime: Callable = _one

    @classmethod
    def from_model(cls, model: ModelSpec, player: int, f=_zero, g=_zero, **kw) -> "HamiltonianSpec":
        """Take b, sigma, gamma, nu and the player's delay from a forward model."""
        return cls(
            player=player,
            f=f,
            g=g,
            b=model.drift,
            sigma=model.vol,
            gamma=model.jump,
            nu=tuple(model.jump_spec.nu) if model.jump_spec.active else (),
            delta=model.deltas[player - 1] if len(model.deltas) >= player else 0.0,
            **kw,
        )

    def partial(self, name: str, a: HamArgs) -> np.ndarray:
        if name in self.partials:
            return np.asarray(self.partials[name](a), dtype=float)
        return finite_difference(self, name, a)

    def grad_k(self, a: HamArgs) -> np.ndarray:
        """Frechet gradient in k on the mark grid: (dH/dk_j) / nu_j."""
        nu = np.asarray(self.nu, dtype=float)
        if nu.size == 0:
            return np.zeros((a.X.shape[0], 0))
        return self.partial("k", a) / nu


def _raw_hamiltonian(spec: HamiltonianSpec, a: HamArgs) -> np.ndarray:
    with np.errstate(all="ignore"):
        H = np.asarray(spec.f(a), dtype=float)
        if a.lam is not None:
            H = H + a.lam * spec.g(a)
        if a.p is not None:
            H = H + a.p * spec.b(a)
        if a.q is not None:
            H = H + a.q * spec.sigma(a)
        if spec.gamma is not None and a.r is not None and len(spec.nu):
            H = H + np.sum(a.r * np.asarray(spec.gamma(a)) * np.asarray(spec.nu), axis=1)
    return H


def evaluate_hamiltonian(spec: HamiltonianSpec, a: HamArgs) -> np.ndarray:
    """H per path.  Raises DomainError if any component leaves its domain."""
    H = _raw_hamiltonian(spec, a)
    if not np.all(np.isfinite(H)):
        bad = int(np.argmax(~np.isfinite(H)))
        raise DomainError(f"Hamiltonian not finite on path {bad} at step {a.s}")
    return H


def finite_difference(spec: HamiltonianSpec, name: str, a: HamArgs) -> np.ndarray:
    """Central difference with step 1e-5 * max(1, |v|), elementwise."""
    v = np.asarray(a.get(name), dtype=float)
    if name == "k":
        out = np.empty_like(v)
        for j in range(v.shape[1]):
            h = 1e-5 * np.maximum(1.0, np.abs(v[:, j]))
            up, dn = v.copy(), v.copy()
            up[:, j] += h
            dn[:, j] -= h
            out[:, j] = (
                evaluate_hamiltonian(spec, a.with_value("k", up)) - evaluate_hamiltonian(spec, a.with_value("k", dn))
            ) / (2 * h)
        return out
    h = 1e-5 * np.maximum(1.0, np.abs(v))
    hi = evaluate_hamiltonian(spec, a.with_value(name, v + h))
    lo = evaluate_hamiltonian(spec, a.with_value(name, v - h))
    return (hi - lo) / (2 * h)


def ham_args(paths: PathBundle, bsde: BsdeSolution, s: int, control_step=None, **mult) -> HamArgs:
    """Arguments at step s from the forward paths and the player's own BSDE."""
    n = paths.grid.n_steps
    st = paths.state(s, control_step)
    cs = min(s, n - 1)
    return HamArgs(
        st.s, st.t, st.X, st.Y, st.L, st.U, st.B,
        w=bsde.W[:, s], z=bsde.Z[:, cs], k=bsde.K[:, cs, :], **mult,
    )


def solve_lambda_forward(spec: HamiltonianSpec, bsde: BsdeSolution, paths: PathBundle, noise: NoiseBatch,
                         guard: float = 1e12) -> np.ndarray:
    """Euler scheme for the forward adjoint, lam(0) = psi'(W(0)).

    b, sigma and gamma do not depend on (w, z, k), so the w/z/k partials of
    H do not involve (p, q, r); these are set to zero.
    """
    grid = paths.grid
    n, dt, P = grid.n_steps, grid.dt, paths.n_paths
    jumps = noise.jump_spec.active and len(spec.nu) > 0
    lam = paths_major(P, n + 1)
    lam[:, 0] = spec.psi_prime(np.full(P, bsde.w0))
    zero = np.zeros(P)
    rzero = np.zeros((P, noise.jump_spec.n_marks))
    for s in range(n):
        a = ham_args(paths, bsde, s, lam=lam[:, s], p=zero, q=zero, r=rzero)
        nxt = lam[:, s] + spec.partial("w", a) * dt + spec.partial("z", a) * noise.dB[:, s]
        if jumps:
            nxt = nxt + np.sum(spec.grad_k(a) * noise.dN_tilde[:, s, :], axis=1)
        bad = ~np.isfinite(nxt) | (np.abs(nxt) > guard)
        if np.any(bad):
            p = int(np.argmax(bad))
            raise NumericalBlowup(f"adjoint lambda exceeded guard on path {p} at step {s + 1}", p, s + 1)
        lam[:, s + 1] = nxt
    return lam


@dataclass(eq=False)
class AdjointSolution:
    lam: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    p2: np.ndarray
    q2: np.ndarray
    r2: np.ndarray
    dHdL: np.ndarray  # H_L along the solution, (n_paths, n_steps + 1)
    bsde: BsdeSolution
    delay_steps: int
    diagnostics: dict = field(default_factory=dict)


def solve_adjoint_triple(
    spec: HamiltonianSpec,
    paths: PathBundle,
    bsde: BsdeSolution,
    lam: np.ndarray,
    noise: NoiseBatch,
    basis: RegressionBasis = RegressionBasis(),
    scheme: str = "left",
) -> AdjointSolution:
    """Backward adjoint through the auxiliary pair (p2, q2).

    One backward sweep: at step s the window ``sum_{s'=s+1}^{min(s+d, n)} H_L(s') dt``
    only involves (p, q) at later steps, which are final.  Its projection is
    p2(s), its covariation with dB(s) is q2(s), and then p(s) is stepped with
    driver ``q2 + H_x + H_y(s + d)``.
    """
    grid = paths.grid
    n, dt, P = grid.n_steps, grid.dt, paths.n_paths
    (d,) = grid.delay_steps_for((spec.delta,))
    i = spec.player
    yname, lname = f"y{i}", f"L{i}"
    m = noise.jump_spec.n_marks

    dHdL = paths_major(P, n + 1)
    p2 = paths_major(P, n + 1)
    q2 = paths_major(P, n + 1)
    windows = paths_major(P, n + 1)
    windows[:, n] = 0.0
    p2[:, n] = 0.0
    q2[:, n] = 0.0
    window = np.zeros(P)
    have = {"dHdL": set(), "q2": {n}}

    def args(s, sol, control_step=None, w=None, z=None, k=None):
        cs = min(s, n - 1)
        return ham_args(
            paths, bsde, s, control_step,
            lam=lam[:, s],
            p=sol.W[:, s] if w is None else w,
            q=sol.Z[:, cs] if z is None else z,
            r=sol.K[:, cs, :] if k is None else k,
        )

    def fill_dHdL(s, sol):
        if s not in have["dHdL"]:
            dHdL[:, s] = spec.partial(lname, args(s, sol))
            have["dHdL"].add(s)

    def fill_q2(s, sol):
        nonlocal window
        if s in have["q2"]:
            return
        fill_dHdL(s + 1, sol)
        window = window + dHdL[:, s + 1] * dt
        if s + d + 1 <= n and d > 0:
            window = window - dHdL[:, s + d + 1] * dt
        windows[:, s] = window
        if d == 0 or not np.any(window):
            p2[:, s] = 0.0
            q2[:, s] = 0.0
        else:
            proj = Projector(basis.design(paths.state(s)), basis.ridge)
            p2[:, s] = proj(window)
            q2[:, s] = proj((window - p2[:, s]) * noise.dB[:, s]) / dt
        have["q2"].add(s)

    def mu1(st, w, z, k):
        s, sol = st.s, st.sol
        if s < n:
            fill_q2(s, sol)
        a = dataclasses.replace(args(s, sol, None, w, z, k), U=st.U)
        val = q2[:, s] + spec.partial("x", a)
        if s + d <= n:
            adv = a if d == 0 else args(s + d, sol)
            val = val + spec.partial(yname, adv)
        return val

    def terminal(st):
        return spec.phi_prime(st.X) + spec.h_prime(st.X) * lam[:, n]

    sol = solve_bsde_lsmc(DriverSpec(mu1, terminal, anticipating=d > 0), paths, noise, basis, scheme)
    fill_q2(0, sol)
    fill_dHdL(0, sol)
    return AdjointSolution(
        lam=lam, p=sol.W, q=sol.Z, r=sol.K,
        p2=p2, q2=q2, r2=np.zeros((P, n, m)),
        dHdL=dHdL, bsde=bsde, delay_steps=d,
        diagnostics={"window": windows},
    )


@dataclass
class ResidualReport:
    residual: np.ndarray  # per-step mean residual, length n_steps + 1
    se: np.ndarray
    lambda_gap: float
    roundtrip_gap: float
    roundtrip_se: float
    dt: float

    @property
    def roundtrip_ok(self) -> bool:
        """Both directions agree within 3 SE plus one step of the q2 window."""
        return abs(self.roundtrip_gap) <= 3.0 * self.roundtrip_se + self.dt

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.residual[:-1])))

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residual)))


def _malliavin_term(adj: AdjointSolution, paths: PathBundle, noise: NoiseBatch, basis: RegressionBasis) -> np.ndarray:
    """int_t^{t+delta} E[D_t H_L(s) | F_t] ds with one regression per lag."""
    grid = paths.grid
    n, dt, d = grid.n_steps, grid.dt, adj.delay_steps
    P = paths.n_paths
    M = np.zeros((P, n + 1))
    if d == 0 or not np.any(adj.dHdL):
        return M
    for s in range(n):
        hi = min(s + d, n)
        F = adj.dHdL[:, s + 1 : hi + 1]
        proj = Projector(basis.design(paths.state(s)), basis.ridge)
        xi = proj((F - proj(F)) * noise.dB[:, s, None]) / dt
        M[:, s] = xi.sum(axis=1) * dt
    return M


def verify_memory_residual(
    adj: AdjointSolution,
    spec: HamiltonianSpec,
    paths: PathBundle,
    noise: NoiseBatch,
    basis: RegressionBasis = RegressionBasis(),
    oracle: Callable[[int], np.ndarray] | None = None,
    quadrature: str = "trapezoid",
) -> ResidualReport:
    """Plug (p, q, r, lam) into the noisy-memory BSDE and measure the defect.

    The Malliavin integral comes from ``oracle(s)`` when given, otherwise from
    lag-by-lag regressions (a route separate from the window regression used
    by the solver).  The residual at step s is the path mean of

        p_s - p_T - sum_{s'>=s} (mu_{s'} + mu_{s'+1}) dt / 2 + sum q dB + sum r dN~.

    ``quadrature="left"`` (or ``"right"``) uses mu_{s'} (mu_{s'+1}) alone,
    matching the left-point and implicit solver schemes; this matters when mu
    is singular at T.

    Also reports the largest gap between lam and the forward adjoint of the
    extended Hamiltonian q2 x + H, and the gap between q2 and the martingale
    integrand of the constructed p2.
    """
    grid = paths.grid
    n, dt, d, P = grid.n_steps, grid.dt, adj.delay_steps, paths.n_paths
    i = spec.player
    M = np.column_stack([oracle(s) for s in range(n + 1)]) if oracle else _malliavin_term(adj, paths, noise, basis)
    M = np.broadcast_to(M, (P, n + 1))

    mu = np.empty((P, n + 1))
    for s in range(n + 1):
        cs = min(s, n - 1)
        a = ham_args(paths, adj.bsde, s, lam=adj.lam[:, s], p=adj.p[:, s], q=adj.q[:, cs], r=adj.r[:, cs, :])
        val = M[:, s] + spec.partial("x", a)
        if s + d <= n:
            cd = min(s + d, n - 1)
            adv = ham_args(paths, adj.bsde, s + d, lam=adj.lam[:, s + d], p=adj.p[:, s + d],
                           q=adj.q[:, cd], r=adj.r[:, cd, :])
            val = val + spec.partial(f"y{i}", adv)
        mu[:, s] = val

    if quadrature == "trapezoid":
        inc = 0.5 * (mu[:, :-1] + mu[:, 1:]) * dt
    elif quadrature == "left":
        inc = mu[:, :-1] * dt
    elif quadrature == "right":
        inc = mu[:, 1:] * dt
    else:
        raise ConfigError(f"unknown quadrature {quadrature!r}")
    mart = adj.q * noise.dB
    if noise.jump_spec.active:
        mart = mart + np.einsum("ijk,ijk->ij", adj.r, noise.dN_tilde)
    tail = np.zeros((P, n + 1))
    tail[:, :n] = np.cumsum((inc - mart)[:, ::-1], axis=1)[:, ::-1]
    defect = adj.p - adj.p[:, n : n + 1] - tail
    residual = defect.mean(axis=0)
    se = defect.std(axis=0, ddof=1) / np.sqrt(P)

    # forward adjoint of q2 x + H, differentiated numerically
    q2 = adj.q2
    ext = dataclasses.replace(
        spec,
        f=lambda a: spec.f(a) + q2[:, a.s] * a.X,
        partials={k: v for k, v in spec.partials.items() if k not in ("w", "z", "k")},
    )
    lam_ext = solve_lambda_forward(ext, adj.bsde, paths, noise)
    lambda_gap = float(np.max(np.abs(lam_ext - adj.lam)))

    # converse direction: q2 as the martingale integrand of p2
    # both estimates are regressions, whose path means equal the raw covariations
    window = adj.diagnostics["window"]
    diffs = np.zeros((P, n))
    for s in range(n):
        proj = Projector(basis.design(paths.state(s)), basis.ridge)
        nxt = adj.p2[:, s + 1]
        diffs[:, s] = ((nxt - proj(nxt)) - (window[:, s] - adj.p2[:, s])) * noise.dB[:, s] / dt
    step_gap = diffs.mean(axis=0)
    k = int(np.argmax(np.abs(step_gap)))
    return ResidualReport(
        residual=residual,
        se=se,
        lambda_gap=lambda_gap,
        roundtrip_gap=float(step_gap[k]),
        roundtrip_se=float(diffs[:, k].std(ddof=1) / np.sqrt(P)),
        dt=dt,
    )


@dataclass
class ConcavityReport:
    n_samples: int
    n_violations: int
    max_violation: float
    lambda_T_min: float

    @property
    def fraction(self) -> float:
        return self.n_violations / max(self.n_samples, 1)

    @property
    def lambda_T_ok(self) -> bool:
        return self.lambda_T_min >= 0.0

    @property
    def passed(self) -> bool:
        return self.n_violations == 0 and self.lambda_T_ok


def maximize_control(spec: HamiltonianSpec, a: HamArgs, bounds, iters: int = 80) -> np.ndarray:
    """Per-path golden-section maximum of H over the player's own control.

    The search runs on log u when the lower bound is positive.
    """
    lo, hi = bounds
    log = lo > 0
    left = np.full(a.X.shape, np.log(lo) if log else float(lo))
    right = np.full(a.X.shape, np.log(hi) if log else float(hi))
    name = f"u{spec.player}"
    invphi = (np.sqrt(5.0) - 1.0) / 2.0

    def value(v):
        H = _raw_hamiltonian(spec, a.with_value(name, np.exp(v) if log else v))
        return np.where(np.isfinite(H), H, -np.inf)

    c = right - invphi * (right - left)
    e = left + invphi * (right - left)
    fc, fe = value(c), value(e)
    for _ in range(iters):
        better = fc > fe
        right = np.where(better, e, right)
        left = np.where(better, left, c)
        new = np.where(better, right - invphi * (right - left), left + invphi * (right - left))
        fnew = value(new)
        c, e, fc, fe = (
            np.where(better, new, e),
            np.where(better, c, new),
            np.where(better, fnew, fe),
            np.where(better, fc, fnew),
        )
    v = 0.5 * (left + right)
    return np.exp(v) if log else v


def hat_hamiltonian(spec: HamiltonianSpec, a: HamArgs, bounds) -> np.ndarray:
    u = maximize_control(spec, a, bounds)
    return evaluate_hamiltonian(spec, a.with_value(f"u{spec.player}", u))


def check_concavity_hatH(
    spec: HamiltonianSpec,
    adj: AdjointSolution,
    paths: PathBundle,
    bounds=(1e-4, 1e4),
    n_samples: int = 10_000,
    seed: int = 0,
    spread: float = 0.3,
    tol: float = 1e-8,
) -> ConcavityReport:
    """Midpoint concavity of H maximised over the player's control.

    Base points are drawn from the solved paths, with the multipliers frozen
    there.  The state arguments (x, y_i, L_i, w, z, k) of two endpoints are
    perturbed multiplicatively when the coordinate is positive on every path
    and additively otherwise.
    """
    grid = paths.grid
    n = grid.n_steps
    rng = np.random.default_rng(seed)
    i = spec.player
    names = ["x", f"y{i}", f"L{i}", "w", "z"]
    idx = rng.integers(0, paths.n_paths, n_samples)
    steps = rng.integers(0, n, n_samples)

    def gather(arr2d):
        return arr2d[idx, steps]

    bs = adj.bsde
    base = HamArgs(
        s=0, t=0.0,
        X=gather(paths.X),
        Y=tuple(gather(y) for y in paths.Y),
        L=tuple(gather(x) for x in paths.L),
        U=tuple(gather(u) for u in paths.U),
        w=gather(bs.W), z=gather(bs.Z), k=bs.K[idx, steps, :],
        lam=gather(adj.lam), p=gather(adj.p), q=gather(adj.q), r=adj.r[idx, steps, :],
    )
    ends = []
    for _ in range(2):
        a = base
        for name in names:
            v = base.get(name)
            full = {"x": paths.X, f"y{i}": paths.Y[i - 1] if len(paths.Y) >= i else None,
                    f"L{i}": paths.L[i - 1] if len(paths.L) >= i else None, "w": bs.W, "z": bs.Z}[name]
            eps = rng.standard_normal(n_samples)
            if full is not None and np.all(full > 0):
                a = a.with_value(name, v * np.exp(spread * eps))
            else:
                scale = max(float(np.std(full)) if full is not None else 0.0, 1e-3)
                a = a.with_value(name, v + spread * scale * eps)
        if bs.K.shape[2]:
            a = a.with_value("k", base.k + spread * rng.standard_normal(base.k.shape) * max(float(np.std(bs.K)), 1e-3))
        ends.append(a)
    mid = ends[0]
    for name in names + (["k"] if bs.K.shape[2] else []):
        mid = mid.with_value(name, 0.5 * (ends[0].get(name) + ends[1].get(name)))
    h0 = hat_hamiltonian(spec, ends[0], bounds)
    h1 = hat_hamiltonian(spec, ends[1], bounds)
    hm = hat_hamiltonian(spec, mid, bounds)
    scale = 1.0 + np.abs(h0) + np.abs(h1)
    defect = 0.5 * (h0 + h1) - hm
    viol = defect > tol * scale
    return ConcavityReport(
        n_samples=n_samples,
        n_violations=int(viol.sum()),
        max_violation=float(max(defect.max(), 0.0)),
        lambda_T_min=float(adj.lam[:, n].min()),
    )


def write_adjoint_csv(path, adj: AdjointSolution, times: np.ndarray, residual: np.ndarray | None = None):
    """Per-step means: step, t, lambda, p, q2, residual."""
    n = adj.p.shape[1] - 1
    res = np.full(n + 1, np.nan) if residual is None else residual
    lam, p, q2 = adj.lam.mean(axis=0), adj.p.mean(axis=0), adj.q2.mean(axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "mean_lambda", "mean_p", "mean_q2", "residual"])
        for s in range(n + 1):
            w.writerow([s, "%.17g" % times[s], "%.17g" % lam[s], "%.17g" % p[s], "%.17g" % q2[s], "%.17g" % res[s]])
