"""Monte Carlo engine.

Data are generated from the reduced form ``Y = Z Pi + V`` where ``Z`` is the
orthonormalized instrument basis of a fixed design, ``Pi = (pi_y, pi_x)`` and
the rows of ``V`` are i.i.d. ``v = chol(Omega) u`` with ``u`` a pair of
independent standardized shocks from one of the error families.  Because the
shocks are independent with known skewness and kurtosis, ``Psi3`` and ``Psi4``
are available in closed form.

Seeding
-------
The design (regressors, first-stage coefficients, direct effects) is drawn
once from ``SeedSequence([design_seed, 0])``.  Replication ``r`` uses
``SeedSequence(master_seed, spawn_key=(r,))``.  Replications are aggregated
in index order, so reports do not depend on the number of workers.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import estimators as est
from . import overid, variance
from .errors import ManyIVError, SpecError
from .matcalc import vech
from .reduce import Dataset, Design

__all__ = [
    "ErrorFamily",
    "FirstStage",
    "DesignSpec",
    "PRViolation",
    "DGPSpec",
    "Simulator",
    "generate",
    "run_mc",
    "MCReport",
    "TARGETS",
    "spec_from_dict",
    "load_experiment",
    "rep_seed",
    "group_sizes",
]

TARGETS = (
    "liml",
    "md_re",
    "emd",
    "umd",
    "psd_mix",
    "se:hessian",
    "se:sandwich",
    "se:emd",
    "se:umd",
    "test:modified_cd",
    "test:sargan",
    "test:md_j",
    "moments",
    "psi",
)

# which estimator each standard error belongs to
_SE_OWNER = {"se:hessian": "liml", "se:sandwich": "liml", "se:emd": "emd", "se:umd": "umd"}


# --------------------------------------------------------------------------
# specification types


@dataclass(frozen=True)
class ErrorFamily:
    """Distribution of the standardized shocks.

    ``name`` is one of ``normal``, ``scaled_t`` (param: degrees of freedom,
    > 4), ``centered_lognormal`` (param: sigma) or ``two_point`` (param:
    probability of the upper point).
    """

    name: str = "normal"
    param: float | None = None

    def __post_init__(self):
        name = self.name.lower()
        object.__setattr__(self, "name", name)
        if name == "normal":
            return
        if self.param is None:
            raise SpecError(f"error family {name!r} needs a parameter")
        p = float(self.param)
        if name == "scaled_t" and not p > 4:
            raise SpecError("scaled_t needs df > 4 for finite fourth moments")
        elif name == "centered_lognormal" and not p > 0:
            raise SpecError("centered_lognormal needs sigma > 0")
        elif name == "two_point" and not 0 < p < 1:
            raise SpecError("two_point needs 0 < p < 1")
        elif name not in ("scaled_t", "centered_lognormal", "two_point"):
            raise SpecError(f"unknown error family {name!r}")

    @property
    def skewness(self) -> float:
        if self.name == "centered_lognormal":
            s2 = float(self.param) ** 2
            return (math.exp(s2) + 2.0) * math.sqrt(math.expm1(s2))
        if self.name == "two_point":
            p = float(self.param)
            return (1.0 - 2.0 * p) / math.sqrt(p * (1.0 - p))
        return 0.0

    @property
    def kurtosis(self) -> float:
        """Fourth moment of the standardized shock (3 for the Normal)."""
        if self.name == "scaled_t":
            return 3.0 + 6.0 / (float(self.param) - 4.0)
        if self.name == "centered_lognormal":
            s2 = float(self.param) ** 2
            return math.exp(4 * s2) + 2 * math.exp(3 * s2) + 3 * math.exp(2 * s2) - 3.0
        if self.name == "two_point":
            return self.skewness**2 + 1.0
        return 3.0

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.name == "normal":
            return rng.standard_normal(size)
        p = float(self.param)
        if self.name == "scaled_t":
            return rng.standard_t(p, size) / math.sqrt(p / (p - 2.0))
        if self.name == "centered_lognormal":
            s2 = p * p
            sd = math.sqrt(math.expm1(s2) * math.exp(s2))
            return (np.exp(p * rng.standard_normal(size)) - math.exp(0.5 * s2)) / sd
        hi = (1.0 - p) / math.sqrt(p * (1.0 - p))
        lo = -p / math.sqrt(p * (1.0 - p))
        return np.where(rng.random(size) < p, hi, lo)


@dataclass(frozen=True)
class FirstStage:
    """Raw first-stage coefficients on the instrument columns before scaling.

    ``equal``: all ones; ``decaying``: ``rate**k``; ``random``: standard
    Normal draws seeded by ``seed`` (the design seed if absent); ``custom``:
    explicit ``values``, one per instrument column.
    """

    type: str = "equal"
    rate: float = 0.5
    seed: int | None = None
    values: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "type", self.type.lower())
        if self.type not in ("equal", "decaying", "random", "custom"):
            raise SpecError(f"unknown first_stage type {self.type!r}")
        if self.type == "decaying" and not self.rate > 0:
            raise SpecError("decaying first stage needs rate > 0")
        if self.type == "custom":
            if not self.values:
                raise SpecError("custom first stage needs values")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def coefficients(self, K: int, rng: np.random.Generator) -> np.ndarray:
        if self.type == "custom":
            if len(self.values) != K:
                raise SpecError(f"custom first stage needs {K} values, got {len(self.values)}")
            return np.array(self.values)
        if self.type == "equal":
            return np.ones(K)
        if self.type == "decaying":
            return float(self.rate) ** np.arange(K, dtype=float)
        r = rng if self.seed is None else np.random.default_rng(self.seed)
        return r.standard_normal(K)


@dataclass(frozen=True)
class DesignSpec:
    """Instrument design.

    ``balanced_groups``: group dummies with equal group sizes.
    ``skewed_leverage``: group dummies with sizes proportional to
    ``shape**g``.  ``groups``: explicit ``sizes``.  ``random_normal``: i.i.d.
    Normal instruments.  With ``L >= 1`` the first exogenous regressor is an
    intercept and one group dummy is dropped; further exogenous regressors are
    i.i.d. Normal.
    """

    type: str = "random_normal"
    shape: float = 0.8
    sizes: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "type", self.type.lower())
        if self.type not in ("balanced_groups", "skewed_leverage", "groups", "random_normal"):
            raise SpecError(f"unknown design type {self.type!r}")
        if self.type == "skewed_leverage" and not 0 < self.shape:
            raise SpecError("skewed_leverage needs shape > 0")
        if self.type == "groups":
            if not self.sizes:
                raise SpecError("groups design needs a list of sizes")
            object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
            if min(self.sizes) < 1:
                raise SpecError("group sizes must be positive")


@dataclass(frozen=True)
class PRViolation:
    """Direct effect of the instruments on the outcome, orthogonal to ``pi_x``.

    ``strength`` is ``||beta_z||^2 / n``, the amount added to ``Xi11``.
    """

    strength: float

    def __post_init__(self):
        if not self.strength >= 0:
            raise SpecError("pr_violation strength must be non-negative")


@dataclass(frozen=True)
class DGPSpec:
    n: int
    K: int
    L: int = 1
    beta: float = 0.0
    lam: float = 1.0
    Omega: tuple = ((1.0, 0.5), (0.5, 1.0))
    error_family: ErrorFamily = field(default_factory=ErrorFamily)
    first_stage: FirstStage = field(default_factory=FirstStage)
    design: DesignSpec = field(default_factory=DesignSpec)
    pr_violation: PRViolation | None = None
    design_seed: int = 0

    def __post_init__(self):
        Om = np.asarray(self.Omega, dtype=float)
        if Om.shape != (2, 2) or not np.allclose(Om, Om.T):
            raise SpecError("Omega must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(Om)[0] <= 0:
            raise SpecError("Omega must be positive definite")
        object.__setattr__(self, "Omega", tuple(map(tuple, Om.tolist())))
        if not (self.K >= 1 and self.L >= 0 and self.n > self.K + self.L + 2):
            raise SpecError("need K >= 1, L >= 0 and n > K + L + 2")
        if not self.lam >= 0:
            raise SpecError("lambda must be non-negative")
        if self.design.type in ("balanced_groups", "skewed_leverage", "groups"):
            G = self.K + (1 if self.L >= 1 else 0)
            if self.n < G:
                raise SpecError("fewer observations than groups")
            if self.design.type == "groups" and (
                len(self.design.sizes) != G or sum(self.design.sizes) != self.n
            ):
                raise SpecError(f"groups design needs {G} sizes summing to n={self.n}")
        if self.pr_violation is not None and self.pr_violation.strength > 0 and self.K < 2:
            raise SpecError("an orthogonal direct effect needs K >= 2")

    @property
    def Omega_array(self) -> np.ndarray:
        return np.array(self.Omega, dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["Omega"] = [list(r) for r in self.Omega]
        # same schema as experiment files
        fam = {"name": self.error_family.name}
        key = _FAMILY_PARAM[self.error_family.name]
        if key is not None:
            fam[key] = float(self.error_family.param)
        d["error_family"] = fam
        if self.design.sizes is not None:
            d["design"]["sizes"] = list(self.design.sizes)
        if self.first_stage.values is not None:
            d["first_stage"]["values"] = list(self.first_stage.values)
        return d


# --------------------------------------------------------------------------
# data generation


def group_sizes(n: int, G: int, weights) -> np.ndarray:
    """Allocate `n` observations to `G` groups, each at least one, proportional to `weights`."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    extra = n - G
    target = extra * w
    base = np.floor(target).astype(int)
    rem = extra - base.sum()
    order = np.argsort(-(target - base), kind="stable")
    base[order[:rem]] += 1
    return base + 1


def _group_design(spec: DGPSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    n, K, L = spec.n, spec.K, spec.L
    intercept = L >= 1
    G = K + (1 if intercept else 0)
    d = spec.design
    if d.type == "balanced_groups":
        sizes = group_sizes(n, G, np.ones(G))
    elif d.type == "skewed_leverage":
        sizes = group_sizes(n, G, float(d.shape) ** np.arange(G, dtype=float))
    else:
        sizes = np.array(d.sizes, dtype=int)
    labels = np.repeat(np.arange(G), sizes)
    D = (labels[:, None] == np.arange(G)[None, :]).astype(float)
    if intercept:
        # drop the dummy of the largest group; the intercept absorbs it
        drop = int(np.argmax(sizes))
        Zstar = np.delete(D, drop, axis=1)
        W = np.column_stack([np.ones(n), rng.standard_normal((n, L - 1))])
    else:
        Zstar = D
        W = np.zeros((n, 0))
    return W, Zstar


def _build_regressors(spec: DGPSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    n, K, L = spec.n, spec.K, spec.L
    if spec.design.type == "random_normal":
        Zstar = rng.standard_normal((n, K))
        cols = [np.ones(n)] if L >= 1 else []
        if L > 1:
            cols.append(rng.standard_normal((n, L - 1)))
        W = np.column_stack(cols) if cols else np.zeros((n, 0))
        return W, Zstar
    return _group_design(spec, rng)


def _shock_moments(fam: ErrorFamily):
    # third and fourth moment tensors of u = (u1, u2) with independent entries
    u3 = np.zeros((2, 2, 2))
    u4 = np.zeros((2, 2, 2, 2))
    for k in range(2):
        u3[k, k, k] = fam.skewness
        u4[k, k, k, k] = fam.kurtosis
    for i in range(2):
        for j in range(2):
            if i != j:
                u4[i, i, j, j] = u4[i, j, i, j] = u4[i, j, j, i] = 1.0
    return u3, u4


def population_psi(spec: DGPSpec) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``Psi3`` (4x2) and ``Psi4`` (4x4) of the error distribution."""
    Lc = np.linalg.cholesky(spec.Omega_array)
    u3, u4 = _shock_moments(spec.error_family)
    v3 = np.einsum("ia,jb,kc,abc->ijk", Lc, Lc, Lc, u3)
    v4 = np.einsum("ia,jb,kc,ld,abcd->ijkl", Lc, Lc, Lc, Lc, u4)
    return v3.reshape(4, 2), v4.reshape(4, 4)


class Simulator:
    """Fixed design and coefficients for a :class:`DGPSpec`; draws replications."""

    def __init__(self, spec: DGPSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.design_seed), 0]))
        W, Zstar = _build_regressors(spec, rng)
        self.W, self.Zstar = W, Zstar
        self.design = Design(W, Zstar)
        Z = self.design.Z
        Omega = spec.Omega_array
        a = np.array([spec.beta, 1.0])
        aoa = float(a @ np.linalg.solve(Omega, a))
        gamma = spec.first_stage.coefficients(Zstar.shape[1], rng)
        pi_x = Z.T @ (Zstar @ gamma)
        norm2 = float(pi_x @ pi_x)
        if spec.lam > 0:
            if norm2 <= 1e-12 * max(1.0, float(gamma @ gamma)):
                raise SpecError("first-stage coefficients vanish after partialling out W")
            pi_x = pi_x * math.sqrt(spec.lam * spec.n / (aoa * norm2))
        else:
            pi_x = np.zeros(spec.K)
        pi_y = spec.beta * pi_x
        if spec.pr_violation is not None and spec.pr_violation.strength > 0:
            r = rng.standard_normal(spec.K)
            if pi_x @ pi_x > 0:
                r -= pi_x * (pi_x @ r) / (pi_x @ pi_x)
            r *= math.sqrt(spec.pr_violation.strength * spec.n / float(r @ r))
            pi_y = pi_y + r
        self.Pi = np.column_stack([pi_y, pi_x])
        self.mean = Z @ self.Pi
        self.chol = np.linalg.cholesky(Omega)

    # population quantities -------------------------------------------------
    @property
    def Xi(self) -> np.ndarray:
        return self.Pi.T @ self.Pi / self.spec.n

    @property
    def lambda_n(self) -> float:
        a = np.array([self.spec.beta, 1.0])
        pi_x = self.Pi[:, 1]
        return float(pi_x @ pi_x) * float(a @ np.linalg.solve(self.spec.Omega_array, a)) / self.spec.n

    def truth(self) -> dict:
        """Population values of the quantities entering the variance formulas."""
        spec, d = self.spec, self.design
        dh = d.diag_h
        n, K = spec.n, spec.K
        P3, P4 = population_psi(spec)
        mbar = self.Pi.T @ (d.Z.T @ dh) / n
        mu = float(mbar[1] * math.sqrt(n / K))
        tau = K * (n - spec.L) / (n * d.dof)
        alpha_delta = float(dh @ dh) / n
        delta, _ = variance.moment_variance(spec.Omega_array, self.Xi, tau, alpha_delta, P3, P4, mbar)
        return {
            "Xi": self.Xi,
            "Xi22": float(self.Xi[1, 1]),
            "lambda_n": self.lambda_n,
            "Psi3": P3,
            "Psi4": P4,
            "tau": tau,
            "alpha_delta": alpha_delta,
            "delta": float(dh @ dh) / K,
            "mbar": mbar,
            "mu": mu,
            "Delta": delta,
        }

    # replication ---------------------------------------------------------
    def draw_errors(self, rng: np.random.Generator) -> np.ndarray:
        u = self.spec.error_family.draw(rng, (self.spec.n, 2))
        return u @ self.chol.T

    def draw_Y(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.draw_errors(rng)

    def dataset(self, rng: np.random.Generator) -> Dataset:
        Y = self.draw_Y(rng)
        return Dataset(Y[:, 0], Y[:, 1], self.W, self.Zstar)


def rep_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    """Seed of replication `rep`: ``SeedSequence(master_seed, spawn_key=(rep,))``."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(rep),))


def generate(spec: DGPSpec, rep_seed_) -> Dataset:
    """One simulated dataset; `rep_seed_` is an int or :class:`numpy.random.SeedSequence`."""
    return Simulator(spec).dataset(np.random.default_rng(rep_seed_))


# --------------------------------------------------------------------------
# replications


def _needs_diagnostics(targets) -> bool:
    return any(
        t in targets
        for t in ("emd", "se:sandwich", "se:emd", "se:umd", "test:modified_cd", "test:md_j", "psi")
    )


def _one_rep(sim: Simulator, targets: tuple, master_seed: int, rep: int, nominal: float) -> dict:
    spec = sim.spec
    rng = np.random.default_rng(rep_seed(master_seed, rep))
    Y = sim.draw_Y(rng)
    design = sim.design
    out: dict = {"est": {}, "se": {}, "test": {}, "fail": [], "boundary": []}
    try:
        ss = design.suff_stats(Y[:, 0], Y[:, 1])
    except ManyIVError:
        out["fail"].append("suff_stats")
        return out
    if "moments" in targets:
        out["moments"] = math.sqrt(spec.n) * vech(ss.T - ss.alpha_k * ss.S - sim.Xi)

    def attempt(name, fn):
        try:
            return fn()
        except ManyIVError:
            out["fail"].append(name)
            return None

    liml = attempt("liml", lambda: est.liml_re(ss))
    if liml is not None and "lambda_boundary" in liml.flags:
        out["boundary"].append("liml")
    dd = attempt("diagnostics", lambda: design.diagnostics(Y[:, 0], Y[:, 1], force=True)) if _needs_diagnostics(targets) else None
    mv = mv_u = fit_emd = fit_umd = None
    psi = None
    if dd is not None and liml is not None:
        psi = attempt("psi", lambda: variance.psi_moments(dd, liml.Omega_hat))
        if psi is not None and any(t in targets for t in ("emd", "se:sandwich", "se:emd")):
            mv = variance.delta_hat(ss, dd, liml, psi=psi)
        if psi is not None and "psi" in targets:
            out["psi3"], out["psi4"] = psi
    if liml is not None and "liml" in targets:
        out["est"]["liml"] = liml.beta_hat
    if "md_re" in targets:
        f = attempt("md_re", lambda: est.md_re(ss))
        if f is not None:
            out["est"]["md_re"] = f.beta_hat
    if mv is not None and any(t in targets for t in ("emd", "se:emd")):
        fit_emd = attempt("emd", lambda: est.emd(ss, mv.Delta_hat, Omega_hat=liml.Omega_hat))
        if fit_emd is not None:
            out["est"]["emd"] = fit_emd.beta_hat
            if "xi_boundary" in fit_emd.flags:
                out["boundary"].append("emd")
    if any(t in targets for t in ("umd", "se:umd")):
        fit_umd = attempt("umd", lambda: est.umd(ss))
        if fit_umd is not None:
            out["est"]["umd"] = fit_umd.beta_hat
    if "psd_mix" in targets:
        f = attempt("psd_mix", lambda: est.psd_mix(ss))
        if f is not None:
            out["est"]["psd_mix"] = f.beta_hat
            if "boundary" in f.flags:
                out["boundary"].append("psd_mix")
    if "se:hessian" in targets and liml is not None:
        r = attempt("se:hessian", lambda: variance.se_hessian_re(ss, liml))
        if r is not None:
            out["se"]["se:hessian"] = r.se
    if "se:sandwich" in targets and mv is not None:
        r = attempt("se:sandwich", lambda: variance.se_sandwich_liml(ss, dd, liml, mv))
        if r is not None:
            out["se"]["se:sandwich"] = r.se
    if "se:emd" in targets and fit_emd is not None:
        r = attempt("se:emd", lambda: variance.se_emd(fit_emd, mv, fallback=liml))
        if r is not None:
            out["se"]["se:emd"] = r.se
    if "se:umd" in targets and fit_umd is not None and dd is not None:
        def _se_umd():
            mv_umd = variance.delta_hat(ss, dd, fit_umd)
            return variance.se_umd(ss, dd, fit_umd, mv_umd)

        r = attempt("se:umd", _se_umd)
        if r is not None:
            out["se"]["se:umd"] = r.se
    if "test:sargan" in targets:
        r = attempt("test:sargan", lambda: overid.sargan_test(ss, nominal))
        if r is not None:
            out["test"]["test:sargan"] = r.reject
    if any(t in targets for t in ("test:modified_cd", "test:md_j")) and psi is not None:
        kap = variance.kappa_hat(liml.beta_hat, liml.Omega_hat, psi[1])
        if "test:modified_cd" in targets:
            r = attempt("test:modified_cd", lambda: overid.modified_cd_test(ss, dd, liml, kap, nominal))
            if r is not None:
                out["test"]["test:modified_cd"] = r.reject
        if "test:md_j" in targets:
            r = attempt("test:md_j", lambda: overid.md_j_test(ss, dd, kap, nominal))
            if r is not None:
                out["test"]["test:md_j"] = r.reject
    return out


_WORKER_SIM: Simulator | None = None


def _init_worker(sim: Simulator) -> None:
    global _WORKER_SIM
    _WORKER_SIM = sim


def _run_chunk(args):
    targets, master_seed, start, stop, nominal = args
    return [_one_rep(_WORKER_SIM, targets, master_seed, r, nominal) for r in range(start, stop)]


def _worker_count(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("MANYIV_THREADS")
        workers = int(env) if env else 1
    return max(1, int(workers))


# --------------------------------------------------------------------------
# reports


@dataclass
class MCReport:
    """Summary of a Monte Carlo run.

    ``estimators`` maps names to bias, sd, rmse and mean; ``se`` maps
    standard-error methods to the mean standard error and 95% coverage of
    ``beta``; ``tests`` maps tests to rejection rates.  ``draws`` holds the
    per-replication values when requested and is not serialized.
    """

    spec: dict
    reps: int
    master_seed: int
    targets: list
    nominal: float
    estimators: dict
    se: dict
    tests: dict
    failures: dict
    boundaries: dict
    moments: dict | None = None
    draws: dict | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {
            "spec": self.spec,
            "reps": self.reps,
            "master_seed": self.master_seed,
            "targets": list(self.targets),
            "nominal": self.nominal,
            "estimators": self.estimators,
            "se": self.se,
            "tests": self.tests,
            "failures": self.failures,
            "boundaries": self.boundaries,
        }
        if self.moments is not None:
            d["moments"] = self.moments
        return d

    def to_json(self) -> str:
        from .jsonfmt import dumps

        return dumps(self.to_dict())


def _stats(x: np.ndarray, truth: float) -> dict:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return {"count": 0}
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    err = x - truth
    return {
        "count": int(x.size),
        "mean": float(np.mean(x)),
        "bias": float(np.mean(err)),
        "median_bias": float(np.median(err)),
        "sd": sd,
        "rmse": float(math.sqrt(np.mean(err * err))),
    }


def _aggregate(spec: DGPSpec, results: list, targets: tuple, master_seed: int, nominal: float, keep_draws: bool) -> MCReport:
    reps = len(results)
    beta = spec.beta
    est_names = [t for t in ("liml", "md_re", "emd", "umd", "psd_mix") if t in targets]
    # an estimator computed only to feed its standard error is reported too
    for s, owner in _SE_OWNER.items():
        if s in targets and owner not in est_names:
            est_names.append(owner)
    draws: dict = {}
    estimators = {}
    for name in est_names:
        vals = np.array([r["est"][name] for r in results if name in r["est"]], dtype=float)
        estimators[name] = _stats(vals, beta)
        draws[name] = np.array([r["est"].get(name, np.nan) for r in results], dtype=float)
    se_summary = {}
    for name in (t for t in targets if t in _SE_OWNER):
        owner = _SE_OWNER[name]
        pairs = [(r["est"][owner], r["se"][name]) for r in results if name in r["se"] and owner in r["est"]]
        if pairs:
            b, s = np.array(pairs).T
            cover = np.abs(b - beta) <= 1.959963984540054 * s
            se_summary[name] = {
                "count": len(pairs),
                "mean_se": float(np.mean(s)),
                "coverage95": float(np.mean(cover)),
            }
        else:
            se_summary[name] = {"count": 0}
        draws[name] = np.array([r["se"].get(name, np.nan) for r in results], dtype=float)
    tests = {}
    for name in (t for t in targets if t.startswith("test:")):
        rej = np.array([r["test"][name] for r in results if name in r["test"]], dtype=float)
        tests[name] = {"count": int(rej.size), "rejection_rate": float(np.mean(rej)) if rej.size else None}
        draws[name] = np.array([r["test"].get(name, np.nan) for r in results], dtype=float)
    failures: dict = {}
    boundaries: dict = {}
    for r in results:
        for f in r["fail"]:
            failures[f] = failures.get(f, 0) + 1
        for bname in r["boundary"]:
            boundaries[bname] = boundaries.get(bname, 0) + 1
    moments = None
    if "moments" in targets:
        M = np.array([r["moments"] for r in results if "moments" in r])
        draws["moments"] = M
        cov = np.cov(M, rowvar=False, ddof=1) if M.shape[0] > 1 else np.zeros((3, 3))
        moments = {"mean": M.mean(axis=0).tolist(), "cov": cov.tolist()}
    if "psi" in targets:
        draws["psi3"] = np.array([r["psi3"] for r in results if "psi3" in r])
        draws["psi4"] = np.array([r["psi4"] for r in results if "psi4" in r])
    return MCReport(
        spec=spec.to_dict(),
        reps=reps,
        master_seed=int(master_seed),
        targets=list(targets),
        nominal=nominal,
        estimators=estimators,
        se=se_summary,
        tests=tests,
        failures=dict(sorted(failures.items())),
        boundaries=dict(sorted(boundaries.items())),
        moments=moments,
        draws=draws if keep_draws else None,
    )


def run_mc(
    spec: DGPSpec,
    reps: int,
    master_seed: int,
    targets=("liml",),
    *,
    nominal: float = 0.05,
    workers: int | None = None,
    keep_draws: bool = False,
    simulator: Simulator | None = None,
) -> MCReport:
    """Run `reps` replications of `spec`.

    Parameters
    ----------
    targets : sequence of str
        Any of :data:`TARGETS`.
    workers : int, optional
        Number of worker processes; defaults to ``$MANYIV_THREADS`` or 1.
        Results are identical for every worker count.
    keep_draws : bool
        Attach per-replication values to ``report.draws``.
    simulator : Simulator, optional
        Reuse a prebuilt design for `spec`.
    """
    if int(reps) < 1:
        raise SpecError("reps must be at least 1")
    targets = tuple(dict.fromkeys(targets))
    unknown = [t for t in targets if t not in TARGETS]
    if unknown:
        raise SpecError(f"unknown targets: {unknown}")
    sim = simulator if simulator is not None else Simulator(spec)
    reps = int(reps)
    nw = min(_worker_count(workers), reps)
    if nw <= 1:
        results = [_one_rep(sim, targets, master_seed, r, nominal) for r in range(reps)]
    else:
        bounds = np.linspace(0, reps, 4 * nw + 1).astype(int)
        chunks = [(targets, master_seed, int(a), int(b), nominal) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=nw, initializer=_init_worker, initargs=(sim,)) as ex:
            results = [r for chunk in ex.map(_run_chunk, chunks) for r in chunk]
    return _aggregate(spec, results, targets, master_seed, nominal, keep_draws)


# --------------------------------------------------------------------------
# experiment files

_DGP_KEYS = {
    "n", "K", "L", "beta", "lambda", "Omega", "error_family", "first_stage",
    "design", "pr_violation", "design_seed",
}
_FAMILY_PARAM = {"normal": None, "scaled_t": "df", "centered_lognormal": "sigma", "two_point": "p"}


def _family_from(obj) -> ErrorFamily:
    if isinstance(obj, str):
        return ErrorFamily(obj)
    if not isinstance(obj, dict) or "name" not in obj:
        raise SpecError("error_family must be a name or an object with a 'name' key")
    name = str(obj["name"]).lower()
    if name not in _FAMILY_PARAM:
        raise SpecError(f"unknown error family {name!r}")
    key = _FAMILY_PARAM[name]
    extra = set(obj) - {"name"} - ({key} if key else set())
    if extra:
        raise SpecError(f"unexpected keys for error family {name!r}: {sorted(extra)}")
    return ErrorFamily(name, None if key is None else obj.get(key))


def _obj_from(cls, obj, allowed, what):
    if isinstance(obj, str):
        return cls(obj)
    if not isinstance(obj, dict):
        raise SpecError(f"{what} must be a string or an object")
    extra = set(obj) - allowed
    if extra:
        raise SpecError(f"unexpected keys in {what}: {sorted(extra)}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise SpecError(f"invalid {what}: {exc}") from None


def spec_from_dict(d: dict) -> DGPSpec:
    """Build a :class:`DGPSpec` from the JSON schema used by experiment files."""
    if not isinstance(d, dict):
        raise SpecError("dgp section must be an object")
    extra = set(d) - _DGP_KEYS
    if extra:
        raise SpecError(f"unexpected keys in dgp: {sorted(extra)}")
    for req in ("n", "K"):
        if req not in d:
            raise SpecError(f"dgp is missing required key {req!r}")
    try:
        pr = d.get("pr_violation")
        return DGPSpec(
            n=int(d["n"]),
            K=int(d["K"]),
            L=int(d.get("L", 1)),
            beta=float(d.get("beta", 0.0)),
            lam=float(d.get("lambda", 1.0)),
            Omega=tuple(map(tuple, d.get("Omega", [[1.0, 0.5], [0.5, 1.0]]))),
            error_family=_family_from(d.get("error_family", "normal")),
            first_stage=_obj_from(FirstStage, d.get("first_stage", "equal"), {"type", "rate", "seed", "values"}, "first_stage"),
            design=_obj_from(DesignSpec, d.get("design", "random_normal"), {"type", "shape", "sizes"}, "design"),
            pr_violation=None if pr is None else _obj_from(PRViolation, pr, {"strength"}, "pr_violation"),
            design_seed=int(d.get("design_seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise SpecError(f"invalid dgp specification: {exc}") from None


_RUN_KEYS = {"dgp", "reps", "seed", "targets", "nominal", "description"}


def load_experiment(path) -> dict:
    """Read an experiment file: ``{"dgp": {...}, "reps", "seed", "targets", "nominal"}``."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecError(f"experiment file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or "dgp" not in raw:
        raise SpecError("experiment file must be an object with a 'dgp' section")
    extra = set(raw) - _RUN_KEYS
    if extra:
        raise SpecError(f"unexpected keys in experiment file: {sorted(extra)}")
    targets = raw.get("targets", ["liml"])
    if not isinstance(targets, list) or any(t not in TARGETS for t in targets):
        raise SpecError(f"targets must be a list drawn from {list(TARGETS)}")
    try:
        reps = int(raw.get("reps", 100))
        seed = int(raw.get("seed", 0))
        nominal = float(raw.get("nominal", 0.05))
    except (TypeError, ValueError) as exc:
        raise SpecError(f"invalid run settings: {exc}") from None
    if reps < 1 or not 0 < nominal < 1:
        raise SpecError("reps must be positive and nominal in (0, 1)")
    return {
        "spec": spec_from_dict(raw["dgp"]),
        "reps": reps,
        "seed": seed,
        "targets": targets,
        "nominal": nominal,
    }
