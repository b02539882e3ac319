"""Model variants over a reporting triangle.

Every variant exposes one contract: a log-posterior density and its exact
gradient over an unconstrained parameter vector. The GP variants put a latent
Gaussian field on the log rate surface via a non-centered parameterization,
log(lambda) = L z with L the jittered Cholesky factor of the kernel Gram
matrix; the baseline variant models log(lambda[t,d]) = a[t] + log(beta[d])
with a random-walk level and a static delay simplex. Counts follow a
negative binomial with mean lambda and dispersion r (variance lambda +
lambda^2 / r).

Positive scalars are sampled on the log scale and simplexes by stick
breaking; the density includes the change-of-variable terms. Gradients are
hand-accumulated in reverse order, including the sensitivity through the
Cholesky factor where kernel hyperparameters are sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import digamma, gammaln, log_ndtr, polygamma

from .errors import ConfigError, DomainError, ModelEvaluationError, NotPositiveDefiniteError
from .kernels import (
    MATERN12,
    MATERN32,
    SE,
    KernelSpec,
    cholesky_backward_rank1,
    cholesky_jitter,
    kernel_profile,
    kernel_profile_rho_grad,
)
from .transforms import simplex_backward, simplex_constrain, simplex_unconstrain
from .triangle import ReportingTriangle

SE_1D = "se_1d"
SE_SE_1D = "se_se_1d"
SE_MAT12_1D = "se_mat12_1d"
SE_MAT32_1D = "se_mat32_1d"
SE_SE_SPLIT_1D = "se_se_split_1d"
ADDITIVE_2D = "additive_2d"
NOBBS = "nobbs"

VARIANTS = (SE_1D, SE_SE_1D, SE_MAT12_1D, SE_MAT32_1D, SE_SE_SPLIT_1D, ADDITIVE_2D, NOBBS)

#: Rates are floored here inside the likelihood so log(0) cannot occur even
#: in pathological sampler excursions.
LAMBDA_FLOOR = 1e-10
_LOG_FLOOR = math.log(LAMBDA_FLOOR)

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Priors


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    rate: float

    def logpdf(self, x: float) -> float:
        return (
            self.shape * math.log(self.rate)
            - float(gammaln(self.shape))
            + (self.shape - 1.0) * math.log(x)
            - self.rate * x
        )

    def dlogpdf(self, x: float) -> float:
        return (self.shape - 1.0) / x - self.rate

    def log_scale_center(self) -> float:
        return math.log(self.shape / self.rate)

    def log_scale_var(self) -> float:
        return float(polygamma(1, self.shape))


@dataclass(frozen=True)
class HalfNormalPrior:
    """Normal(mean, sd) truncated at zero, for positive parameters."""

    mean: float
    sd: float

    def logpdf(self, x: float) -> float:
        return (
            -0.5 * _LOG_2PI
            - math.log(self.sd)
            - (x - self.mean) ** 2 / (2.0 * self.sd**2)
            - float(log_ndtr(self.mean / self.sd))
        )

    def dlogpdf(self, x: float) -> float:
        return -(x - self.mean) / self.sd**2

    def log_scale_center(self) -> float:
        return math.log(self.mean) if self.mean > 0 else math.log(self.sd)

    def log_scale_var(self) -> float:
        if self.mean > 0:
            return (self.sd / self.mean) ** 2
        return math.pi**2 / 8.0  # var of log|N(0, s)|


@dataclass(frozen=True)
class NormalPrior:
    mean: float
    sd: float

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(
            np.sum(-0.5 * _LOG_2PI - math.log(self.sd) - (x - self.mean) ** 2 / (2.0 * self.sd**2))
        )

    def dlogpdf(self, x):
        return -(np.asarray(x, dtype=float) - self.mean) / self.sd**2


@dataclass(frozen=True)
class DirichletPrior:
    """Symmetric Dirichlet over the delay-probability simplex."""

    concentration: float

    def logpdf(self, beta: np.ndarray) -> float:
        k = beta.size
        return float(
            gammaln(k * self.concentration)
            - k * gammaln(self.concentration)
            + (self.concentration - 1.0) * np.sum(np.log(beta))
        )

    def dlogpdf(self, beta: np.ndarray) -> np.ndarray:
        return (self.concentration - 1.0) / beta


@dataclass(frozen=True)
class RandomWalkPrior:
    """First-order random walk: a[0] ~ N(0, init_sd), a[t] ~ N(a[t-1], 1/sqrt(tau))."""

    init_sd: float


@dataclass(frozen=True)
class FixedParam:
    """Constant hyperparameter; not sampled, carries no prior."""

    value: float


@dataclass(frozen=True)
class PriorSet:
    """Ordered parameter-name -> prior mapping for one model variant."""

    entries: tuple[tuple[str, object], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __getitem__(self, name: str):
        for key, prior in self.entries:
            if key == name:
                return prior
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(key == name for key, _ in self.entries)

    def names(self) -> list[str]:
        return [key for key, _ in self.entries]

    def with_override(self, name: str, prior) -> "PriorSet":
        if name not in self:
            raise ConfigError(f"unknown prior entry {name!r}; have {', '.join(self.names())}")
        return PriorSet(tuple((k, prior if k == name else p) for k, p in self.entries))


def default_priors(variant: str, T: int, D: int) -> PriorSet:
    """Production prior set for a variant, given triangle dims (T rows, D max delay)."""
    if variant == SE_1D:
        entries = [
            ("r", GammaPrior(500.0, 2.0)),
            ("alpha_long", HalfNormalPrior(1.0, 1.0)),
            ("rho_long", HalfNormalPrior(3.0, 1.0)),
            ("delta_1", HalfNormalPrior(0.0, 1e-6)),
            ("z", NormalPrior(0.0, 0.1)),
        ]
    elif variant in (SE_SE_1D, SE_MAT12_1D, SE_MAT32_1D):
        short_sd = 2.0 if variant == SE_SE_1D else 1.0
        entries = [
            ("r", GammaPrior(500.0, 2.0)),
            ("alpha_long", HalfNormalPrior(15.0, 2.0)),
            ("alpha_short", HalfNormalPrior(5.0, short_sd)),
            ("rho_long", HalfNormalPrior(float(T), 0.1)),
            ("rho_short", HalfNormalPrior(1.0, 0.01)),
            ("delta_1", HalfNormalPrior(0.0, 1e-6)),
            ("z", NormalPrior(0.0, 0.1)),
        ]
    elif variant == SE_SE_SPLIT_1D:
        entries = [
            ("r", GammaPrior(500.0, 2.0)),
            ("alpha_long_1", HalfNormalPrior(15.0, 2.0)),
            ("alpha_short_1", HalfNormalPrior(5.0, 1.0)),
            ("rho_long_1", HalfNormalPrior(float(T), 0.1)),
            ("rho_short_1", HalfNormalPrior(1.0, 0.01)),
            ("delta_1", HalfNormalPrior(0.0, 1e-6)),
            ("alpha_long_2", HalfNormalPrior(20.0, 2.0)),
            ("alpha_short_2", HalfNormalPrior(3.0, 1.0)),
            ("rho_long_2", HalfNormalPrior(float(D), 0.1)),
            ("rho_short_2", HalfNormalPrior(1.0, 0.01)),
            ("delta_2", HalfNormalPrior(0.0, 1e-6)),
            ("z", NormalPrior(0.0, 0.1)),
        ]
    elif variant == ADDITIVE_2D:
        entries = [
            ("r", GammaPrior(200.0, 2.0)),
            ("alpha_1t", HalfNormalPrior(float(T), 1.0)),
            ("alpha_2t", HalfNormalPrior(float(D), 1.0)),
            ("alpha_1d", HalfNormalPrior(0.0, 1.0)),
            ("alpha_2d", HalfNormalPrior(0.0, 1.0)),
            ("rho_1t", FixedParam(float(T))),
            ("rho_2t", FixedParam(1.0)),
            ("rho_1d", FixedParam(float(D))),
            ("rho_2d", FixedParam(1.0)),
            ("delta_1", HalfNormalPrior(0.0, 1e-7)),
            ("delta_2", HalfNormalPrior(0.0, 1e-7)),
            ("z", NormalPrior(0.0, 0.1)),
        ]
    elif variant == NOBBS:
        entries = [
            ("r", GammaPrior(500.0, 2.0)),
            ("tau", GammaPrior(0.01, 0.01)),
            ("a", RandomWalkPrior(init_sd=math.sqrt(1.0 / 0.001))),
            ("beta", DirichletPrior(0.1)),
        ]
    else:
        raise DomainError(f"unknown variant {variant!r}")
    return PriorSet(tuple(entries))


# ---------------------------------------------------------------------------
# Model specification and parameter layout


@dataclass(frozen=True)
class ModelSpec:
    """Variant plus priors; dims may stay None until bound to a triangle."""

    variant: str
    T: int | None = None
    D: int | None = None
    priors: PriorSet | None = None
    jitter: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}")

    def bind(self, tri: ReportingTriangle) -> "ModelSpec":
        T, D = tri.T, tri.D
        if self.T is not None and (self.T, self.D) != (T, D):
            raise DomainError(f"spec dims ({self.T},{self.D}) do not match triangle ({T},{D})")
        priors = self.priors if self.priors is not None else default_priors(self.variant, T, D)
        return replace(self, T=T, D=D, priors=priors)

    @property
    def bound(self) -> bool:
        return self.T is not None and self.priors is not None


@dataclass(frozen=True)
class Block:
    name: str
    size: int  # unconstrained length
    transform: str  # identity | log | simplex
    offset: int


class ParamLayout:
    """Named layout of the unconstrained vector with exact round-tripping."""

    def __init__(self, blocks: list[tuple[str, int, str]]):
        self.blocks: list[Block] = []
        offset = 0
        for name, size, transform in blocks:
            self.blocks.append(Block(name, size, transform, offset))
            offset += size
        self.dim = offset
        self._by_name = {b.name: b for b in self.blocks}

    def slice_of(self, name: str) -> slice:
        b = self._by_name[name]
        return slice(b.offset, b.offset + b.size)

    def constrain(self, theta: np.ndarray) -> dict[str, np.ndarray | float]:
        theta = np.asarray(theta, dtype=float)
        out: dict[str, np.ndarray | float] = {}
        for b in self.blocks:
            seg = theta[b.offset : b.offset + b.size]
            if b.transform == "log":
                out[b.name] = float(np.exp(seg[0])) if b.size == 1 else np.exp(seg)
            elif b.transform == "simplex":
                out[b.name] = simplex_constrain(seg)[0]
            else:
                out[b.name] = seg.copy() if b.size > 1 else float(seg[0])
        return out

    def unconstrain(self, named: dict) -> np.ndarray:
        theta = np.zeros(self.dim)
        for b in self.blocks:
            value = named[b.name]
            if b.transform == "log":
                theta[b.offset : b.offset + b.size] = np.log(value)
            elif b.transform == "simplex":
                theta[b.offset : b.offset + b.size] = simplex_unconstrain(np.asarray(value))
            else:
                theta[b.offset : b.offset + b.size] = value
        return theta

    def scalar_names(self) -> list[str]:
        """Flat per-scalar names, vector blocks expanded as name[i]."""
        names = []
        for b in self.blocks:
            csize = b.size + 1 if b.transform == "simplex" else b.size
            if csize == 1:
                names.append(b.name)
            else:
                names.extend(f"{b.name}[{i}]" for i in range(csize))
        return names


# ---------------------------------------------------------------------------
# Negative binomial likelihood over masked cells


def nb_logpmf(n, lam, r):
    """Log pmf of NB with mean lam and dispersion r (variance lam + lam^2/r)."""
    n = np.asarray(n, dtype=float)
    lam = np.maximum(np.asarray(lam, dtype=float), LAMBDA_FLOOR)
    log_lam = np.log(lam)
    log_r = math.log(r)
    lse = np.logaddexp(log_r, log_lam)
    return gammaln(n + r) - gammaln(r) - gammaln(n + 1.0) + r * (log_r - lse) + n * (log_lam - lse)


def _nb_terms(loglam: np.ndarray, counts: np.ndarray, obs: np.ndarray, r: float, lgamma_n1: np.ndarray):
    """Masked NB log likelihood plus gradients wrt log-lambda (vector) and r.

    The rate floor acts before everything else; floored cells get a zero
    log-lambda gradient because the density is locally flat there.
    """
    log_r = math.log(r)
    floored = loglam < _LOG_FLOOR
    llf = np.where(floored, _LOG_FLOOR, loglam)
    lse = np.logaddexp(log_r, llf)  # log(r + lam), overflow-safe
    cells = (
        gammaln(counts + r)
        - gammaln(r)
        - lgamma_n1
        + r * (log_r - lse)
        + counts * (llf - lse)
    )
    ll = float(cells[obs].sum())
    frac = np.exp(llf - lse)  # lam / (r + lam), in (0, 1)
    u = np.where(obs & ~floored, counts - (counts + r) * frac, 0.0)
    inv = np.exp(-lse)  # 1 / (r + lam)
    dr_cells = digamma(counts + r) - digamma(r) + (log_r - lse) + 1.0 - (counts + r) * inv
    dr = float(dr_cells[obs].sum())
    return ll, u, dr


# ---------------------------------------------------------------------------
# GP structure shared by the latent-field variants


@dataclass
class _DynamicBlock:
    """GP over a flat index set with sampled amplitudes/lengthscales."""

    positions: np.ndarray  # flat cell indices into the T*(D+1) surface
    dist_idx: np.ndarray  # (m, m) int distance matrix over block coordinates
    dist_vals: np.ndarray  # distinct distances 0..m-1 as floats
    terms: list[tuple[str, str, str]]  # (kernel kind, alpha name, rho name)
    delta_names: list[str]

    @property
    def m(self) -> int:
        return self.positions.size

    def build(self, named):
        m = self.m
        K = np.zeros((m, m))
        cache = []
        for kind, an, rn in self.terms:
            spec = KernelSpec(kind, alpha=named[an], rho=named[rn])
            kt = kernel_profile(spec, self.dist_vals)[self.dist_idx]
            K += kt
            cache.append((spec, kt))
        s2 = sum(named[dn] ** 2 for dn in self.delta_names)
        K[np.diag_indices(m)] += s2
        return K, cache

    def contract(self, named, k_bar, cache, grads):
        for (spec, kt), (kind, an, rn) in zip(cache, self.terms):
            f = float(np.vdot(k_bar, kt))
            grads[an] = grads.get(an, 0.0) + 2.0 * f / spec.alpha
            dk = kernel_profile_rho_grad(spec, self.dist_vals)[self.dist_idx]
            grads[rn] = grads.get(rn, 0.0) + float(np.vdot(k_bar, dk))
        tr = float(np.trace(k_bar))
        for dn in self.delta_names:
            grads[dn] = grads.get(dn, 0.0) + 2.0 * named[dn] * tr


@dataclass
class _StaticKronBlock:
    """GP whose Gram is a sum of fixed unit-Kronecker matrices scaled by amplitudes."""

    positions: np.ndarray
    units: list[tuple[np.ndarray, tuple[str, str]]]  # (unit matrix, amplitude names)
    delta_names: list[str]

    @property
    def m(self) -> int:
        return self.positions.size

    def build(self, named):
        m = self.m
        K = np.zeros((m, m))
        cache = []
        for unit, amps in self.units:
            c = 1.0
            for an in amps:
                c *= named[an] ** 2
            K += c * unit
            cache.append(c)
        s2 = sum(named[dn] ** 2 for dn in self.delta_names)
        K[np.diag_indices(m)] += s2
        return K, cache

    def contract(self, named, k_bar, cache, grads):
        for (unit, amps), c in zip(self.units, cache):
            f = float(np.vdot(k_bar, unit))
            for an in amps:
                grads[an] = grads.get(an, 0.0) + f * 2.0 * c / named[an]
        tr = float(np.trace(k_bar))
        for dn in self.delta_names:
            grads[dn] = grads.get(dn, 0.0) + 2.0 * named[dn] * tr


def _gp_blocks(spec: ModelSpec) -> list:
    """Latent-field blocks for a bound GP-variant spec (time-major layouts)."""
    T, D = spec.T, spec.D
    n_cols = D + 1

    def flat_positions(delays):
        return np.array([t * n_cols + d for t in range(T) for d in delays], dtype=np.intp)

    def dyn(delays, terms, deltas):
        m = T * len(delays)
        idx = np.abs(np.arange(m)[:, None] - np.arange(m)[None, :])
        return _DynamicBlock(
            positions=flat_positions(delays),
            dist_idx=idx,
            dist_vals=np.arange(m, dtype=float),
            terms=terms,
            delta_names=deltas,
        )

    if spec.variant == SE_1D:
        return [dyn(range(n_cols), [(SE, "alpha_long", "rho_long")], ["delta_1"])]
    if spec.variant in (SE_SE_1D, SE_MAT12_1D, SE_MAT32_1D):
        short = {SE_SE_1D: SE, SE_MAT12_1D: MATERN12, SE_MAT32_1D: MATERN32}[spec.variant]
        return [
            dyn(
                range(n_cols),
                [(SE, "alpha_long", "rho_long"), (short, "alpha_short", "rho_short")],
                ["delta_1"],
            )
        ]
    if spec.variant == SE_SE_SPLIT_1D:
        if D < 2:
            raise DomainError("data-split variant needs max delay >= 2")
        return [
            dyn(
                (0, 1),
                [(SE, "alpha_long_1", "rho_long_1"), (SE, "alpha_short_1", "rho_short_1")],
                ["delta_1"],
            ),
            dyn(
                range(2, n_cols),
                [(SE, "alpha_long_2", "rho_long_2"), (SE, "alpha_short_2", "rho_short_2")],
                ["delta_2"],
            ),
        ]
    if spec.variant == ADDITIVE_2D:
        tvals = np.arange(T, dtype=float)
        dvals = np.arange(n_cols, dtype=float)
        tdist = np.abs(tvals[:, None] - tvals[None, :])
        ddist = np.abs(dvals[:, None] - dvals[None, :])

        def unit(rho_t, rho_d):
            ct = kernel_profile(KernelSpec(SE, 1.0, rho_t), tdist)
            cd = kernel_profile(KernelSpec(SE, 1.0, rho_d), ddist)
            return np.kron(ct, cd)

        rho = {name: spec.priors[name].value for name in ("rho_1t", "rho_2t", "rho_1d", "rho_2d")}
        return [
            _StaticKronBlock(
                positions=np.arange(T * n_cols, dtype=np.intp),
                units=[
                    (unit(rho["rho_1t"], rho["rho_1d"]), ("alpha_1t", "alpha_1d")),
                    (unit(rho["rho_2t"], rho["rho_2d"]), ("alpha_2t", "alpha_2d")),
                ],
                delta_names=["delta_1", "delta_2"],
            )
        ]
    raise DomainError(f"{spec.variant} is not a GP variant")


def _gp_hyper_names(spec: ModelSpec) -> list[str]:
    """Sampled positive scalars other than r, in layout order."""
    skip = {"r", "z"}
    names = []
    for name, prior in spec.priors.entries:
        if name in skip or isinstance(prior, FixedParam):
            continue
        names.append(name)
    return names


# ---------------------------------------------------------------------------
# Posterior


class Posterior:
    """Bound model over one triangle: density, gradient, and rate surface."""

    def __init__(self, spec: ModelSpec, tri: ReportingTriangle):
        spec = spec if spec.bound else spec.bind(tri)
        if (spec.T, spec.D) != (tri.T, tri.D):
            raise DomainError("spec dims do not match triangle")
        self.spec = spec
        self.tri = tri
        self.T, self.D = tri.T, tri.D
        self.n_cells = tri.T * (tri.D + 1)
        self.counts = tri.n.reshape(-1).astype(float)
        self.obs = tri.mask.reshape(-1).copy()
        self._lgamma_n1 = gammaln(self.counts + 1.0)

        if spec.variant == NOBBS:
            self.layout = ParamLayout(
                [("r", 1, "log"), ("tau", 1, "log"), ("a", self.T, "identity"), ("beta", self.D, "simplex")]
            )
            self._blocks = None
        else:
            self._blocks = _gp_blocks(spec)
            self._hyper_names = _gp_hyper_names(spec)
            z_total = sum(b.m for b in self._blocks)
            if z_total != self.n_cells:
                raise DomainError("latent size does not cover the surface")
            layout = [("r", 1, "log")]
            layout += [(name, 1, "log") for name in self._hyper_names]
            layout += [("z", z_total, "identity")]
            self.layout = ParamLayout(layout)
            self._z_prior: NormalPrior = spec.priors["z"]
        self.dim = self.layout.dim
        self.init_center, self.init_metric_diag = self._init_hints()

    # -- initialization hints ------------------------------------------------

    def _init_hints(self):
        """Prior-informed chain start centers and initial inverse-metric diagonal."""
        center = np.zeros(self.dim)
        metric = np.ones(self.dim)
        for b in self.layout.blocks:
            sl = slice(b.offset, b.offset + b.size)
            prior = self.spec.priors[b.name] if b.name in self.spec.priors else None
            if b.transform == "log" and prior is not None:
                center[sl] = prior.log_scale_center()
                metric[sl] = min(max(prior.log_scale_var(), 1e-6), 10.0)
            elif b.name == "z":
                metric[sl] = self._z_prior.sd**2
        return center, metric

    # -- density and gradient ------------------------------------------------

    def logp_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """Joint unconstrained log density (priors + Jacobians + likelihood)
        and its exact gradient. Non-finite evaluations return (-inf, 0)."""
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            return -np.inf, np.zeros(self.dim)
        try:
            if self.spec.variant == NOBBS:
                lp, grad = self._nobbs_logp_grad(theta)
            else:
                lp, grad = self._gp_logp_grad(theta)
        except (NotPositiveDefiniteError, FloatingPointError, OverflowError):
            return -np.inf, np.zeros(self.dim)
        if not math.isfinite(lp) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return lp, grad

    def _gp_logp_grad(self, theta):
        spec = self.spec
        layout = self.layout
        u_r = theta[0]
        r = math.exp(u_r)
        if not math.isfinite(r) or r <= 0:
            return -np.inf, np.zeros(self.dim)
        named = {}
        for name in self._hyper_names:
            named[name] = math.exp(theta[layout.slice_of(name)][0])
        z = theta[layout.slice_of("z")]

        # Latent field through each block's Cholesky factor.
        loglam = np.zeros(self.n_cells)
        block_state = []
        z_off = 0
        for blk in self._blocks:
            zb = z[z_off : z_off + blk.m]
            K, cache = blk.build(named)
            L, _ = cholesky_jitter(K, spec.jitter)
            loglam[blk.positions] = L @ zb
            block_state.append((blk, zb, L, cache, z_off))
            z_off += blk.m

        ll, u, dr_lik = _nb_terms(loglam, self.counts, self.obs, r, self._lgamma_n1)

        grad = np.zeros(self.dim)
        # r: Gamma prior on the constrained scale plus the log Jacobian.
        rp: GammaPrior = spec.priors["r"]
        lp = ll + rp.logpdf(r) + u_r
        grad[0] = r * (dr_lik + rp.dlogpdf(r)) + 1.0

        # z prior.
        zsl = layout.slice_of("z")
        lp += self._z_prior.logpdf(z)
        grad[zsl] += self._z_prior.dlogpdf(z)

        # Backpropagate through each block.
        hyper_grads: dict[str, float] = {}
        for blk, zb, L, cache, z_off in block_state:
            ub = u[blk.positions]
            gz = L.T @ ub
            grad[zsl.start + z_off : zsl.start + z_off + blk.m] += gz
            k_bar = cholesky_backward_rank1(L, ub, zb)
            blk.contract(named, k_bar, cache, hyper_grads)

        for name in self._hyper_names:
            h = named[name]
            prior = spec.priors[name]
            sl = layout.slice_of(name)
            lp += prior.logpdf(h) + theta[sl][0]
            g = hyper_grads.get(name, 0.0) + prior.dlogpdf(h)
            grad[sl] = h * g + 1.0
        return lp, grad

    def _nobbs_logp_grad(self, theta):
        spec = self.spec
        layout = self.layout
        T, D = self.T, self.D
        u_r, u_tau = theta[0], theta[1]
        r, tau = math.exp(u_r), math.exp(u_tau)
        a = theta[layout.slice_of("a")]
        y_raw = theta[layout.slice_of("beta")]
        beta, sb_logjac = simplex_constrain(y_raw)
        if np.any(beta <= 0.0):
            return -np.inf, np.zeros(self.dim)

        log_beta = np.log(beta)
        loglam = (a[:, None] + log_beta[None, :]).reshape(-1)
        ll, u, dr_lik = _nb_terms(loglam, self.counts, self.obs, r, self._lgamma_n1)
        u2 = u.reshape(T, D + 1)

        rp: GammaPrior = spec.priors["r"]
        tp: GammaPrior = spec.priors["tau"]
        rw: RandomWalkPrior = spec.priors["a"]
        dp: DirichletPrior = spec.priors["beta"]

        lp = ll + rp.logpdf(r) + u_r + tp.logpdf(tau) + u_tau + sb_logjac
        # Random-walk level prior.
        diffs = np.diff(a)
        lp += -0.5 * _LOG_2PI - math.log(rw.init_sd) - a[0] ** 2 / (2.0 * rw.init_sd**2)
        lp += float(
            np.sum(-0.5 * _LOG_2PI + 0.5 * math.log(tau) - tau * diffs**2 / 2.0)
        )
        lp += dp.logpdf(beta)

        grad = np.zeros(self.dim)
        grad[0] = r * (dr_lik + rp.dlogpdf(r)) + 1.0
        dtau = (T - 1) / (2.0 * tau) - float(np.sum(diffs**2)) / 2.0
        grad[1] = tau * (dtau + tp.dlogpdf(tau)) + 1.0

        ga = u2.sum(axis=1)
        ga[0] += -a[0] / rw.init_sd**2
        ga[:-1] += tau * diffs
        ga[1:] += -tau * diffs
        grad[layout.slice_of("a")] = ga

        g_beta = u2.sum(axis=0) / beta + dp.dlogpdf(beta)
        grad[layout.slice_of("beta")] = simplex_backward(y_raw, g_beta, with_jacobian=True)
        return lp, grad

    # -- pieces for tests and reporting ---------------------------------------

    def decompose(self, theta: np.ndarray) -> dict[str, float]:
        """Split the unconstrained density into likelihood, prior, Jacobian."""
        theta = np.asarray(theta, dtype=float)
        named = self.layout.constrain(theta)
        ll = self.log_likelihood_named(named)
        jac = 0.0
        for b in self.layout.blocks:
            seg = theta[b.offset : b.offset + b.size]
            if b.transform == "log":
                jac += float(seg.sum())
            elif b.transform == "simplex":
                jac += simplex_constrain(seg)[1]
        total, _ = self.logp_grad(theta)
        return {"likelihood": ll, "jacobian": jac, "prior": total - ll - jac, "total": total}

    def log_prior_named(self, named: dict) -> float:
        """Sum of prior log densities on the constrained scale."""
        spec = self.spec
        lp = 0.0
        if spec.variant == NOBBS:
            rw: RandomWalkPrior = spec.priors["a"]
            a = np.asarray(named["a"])
            tau = named["tau"]
            lp += spec.priors["r"].logpdf(named["r"])
            lp += spec.priors["tau"].logpdf(tau)
            lp += -0.5 * _LOG_2PI - math.log(rw.init_sd) - a[0] ** 2 / (2.0 * rw.init_sd**2)
            diffs = np.diff(a)
            lp += float(np.sum(-0.5 * _LOG_2PI + 0.5 * math.log(tau) - tau * diffs**2 / 2.0))
            lp += spec.priors["beta"].logpdf(np.asarray(named["beta"]))
            return lp
        lp += spec.priors["r"].logpdf(named["r"])
        for name in self._hyper_names:
            lp += spec.priors[name].logpdf(named[name])
        lp += self._z_prior.logpdf(np.asarray(named["z"]))
        return lp

    def rate_surface_named(self, named: dict) -> np.ndarray:
        """Positive rate matrix lambda[t, d] for constrained parameters."""
        if self.spec.variant == NOBBS:
            a = np.asarray(named["a"], dtype=float)
            beta = np.asarray(named["beta"], dtype=float)
            return np.exp(a)[:, None] * beta[None, :]
        z = np.asarray(named["z"], dtype=float)
        loglam = np.zeros(self.n_cells)
        z_off = 0
        for blk in self._blocks:
            K, _ = blk.build(named)
            try:
                L, _ = cholesky_jitter(K, self.spec.jitter)
            except NotPositiveDefiniteError as exc:
                hypers = {k: named[k] for k in self._hyper_names}
                raise ModelEvaluationError("Gram factorization failed", hypers) from exc
            loglam[blk.positions] = L @ z[z_off : z_off + blk.m]
            z_off += blk.m
        return np.exp(loglam).reshape(self.T, self.D + 1)

    def log_likelihood_named(self, named: dict) -> float:
        lam = self.rate_surface_named(named).reshape(-1)
        cells = nb_logpmf(self.counts, lam, named["r"])
        return float(cells[self.obs].sum())


def build_posterior(spec: ModelSpec, tri: ReportingTriangle) -> Posterior:
    return Posterior(spec, tri)


# Spec-level convenience entry points -----------------------------------------


def rate_surface(spec: ModelSpec, theta: np.ndarray, tri: ReportingTriangle) -> np.ndarray:
    post = Posterior(spec, tri)
    return post.rate_surface_named(post.layout.constrain(theta))


def log_likelihood(spec: ModelSpec, theta: np.ndarray, tri: ReportingTriangle) -> float:
    post = Posterior(spec, tri)
    return post.log_likelihood_named(post.layout.constrain(theta))


def log_posterior_grad(
    spec: ModelSpec, theta: np.ndarray, tri: ReportingTriangle
) -> tuple[float, np.ndarray]:
    return Posterior(spec, tri).logp_grad(theta)
