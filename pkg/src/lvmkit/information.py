"""Information measures, the free-energy functional, the generic EM driver,
and bits-back coding-cost accounting on finite discrete-latent models.

All measures use natural logarithms internally; base 2 is a reporting
conversion.  Discrete-latent accounting is exact: every entropy here is a
finite enumeration, so the coding-cost identities can be checked to near
machine precision.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .exceptions import (
    EmptyComponentError,
    NumericalDivergenceError,
    PreconditionError,
)

_LN2 = float(np.log(2.0))


def _as_probs(p, name="distribution"):
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    if p.ndim != 1:
        raise PreconditionError(f"{name} must be a vector")
    if np.any(p < -1e-12):
        raise PreconditionError(f"{name} has negative entries")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise PreconditionError(f"{name} sums to {p.sum():.12f}, not 1")
    return np.clip(p, 0.0, None)


def _convert(nats, base):
    if base in ("e", np.e, None):
        return nats
    if base in (2, "2", 2.0):
        return nats / _LN2
    raise PreconditionError(f"unsupported base {base!r}; use 2 or 'e'")


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability vector over K categories; entries >= 0, sum to 1."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        probs = _as_probs(probs)
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return self.probs.shape[0]


@dataclass(frozen=True)
class DiscreteLatentModel:
    """K latent classes with categorical emissions over V symbols.

    `emission[k]` is the emission distribution of class k.  Restricting to
    categorical emissions makes every marginal, recognition, and coding cost
    computable by exact enumeration.
    """

    source: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        source = _as_probs(np.asarray(getattr(self.source, "probs", self.source),
                                      dtype=float), "source")
        emission = np.asarray(self.emission, dtype=float)
        if emission.ndim != 2 or emission.shape[0] != source.shape[0]:
            raise PreconditionError("emission must be K x V with K matching source")
        for k in range(emission.shape[0]):
            _as_probs(emission[k], f"emission row {k}")
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "emission", np.clip(emission, 0.0, None))

    @property
    def n_classes(self):
        return self.source.shape[0]

    @property
    def n_symbols(self):
        return self.emission.shape[1]

    def marginal(self):
        """Marginal over symbols: m_v = sum_k pi_k E[k, v]."""
        return self.source @ self.emission

    def recognition(self):
        """Exact recognition table r[v, k] = p(z=k | x=v), by Bayes' rule."""
        joint = self.emission.T * self.source  # V x K
        marg = joint.sum(axis=1, keepdims=True)
        if np.any(marg <= 0.0):
            raise PreconditionError("some symbol has zero marginal probability")
        return joint / marg


def entropy(p, base="e"):
    """-sum p log p, with 0 log 0 := 0."""
    p = _as_probs(p)
    return _convert(float(-np.sum(xlogy(p, p))), base)


def cross_entropy(p, q, base="e"):
    """-sum p log q; +inf when support(p) is not contained in support(q)."""
    p = _as_probs(p, "p")
    q = _as_probs(q, "q")
    if p.shape != q.shape:
        raise PreconditionError("p and q must have the same length")
    if np.any((p > 0.0) & (q == 0.0)):
        return np.inf
    return _convert(float(-np.sum(xlogy(p, q))), base)


def kl(p, q, base="e"):
    """Relative entropy KL(p || q) = cross_entropy(p, q) - entropy(p)."""
    ce = cross_entropy(p, q, base)
    if np.isinf(ce):
        return np.inf
    return ce - entropy(p, base)


def _proxy_table(model, proxy):
    """Resolve a proxy specification to a V x K recognition table."""
    exact = model.recognition()
    if isinstance(proxy, str):
        if proxy == "exact":
            return exact
        if proxy == "hard":
            # Point mass at the argmax recognition class; ties toward the
            # lowest class index.
            table = np.zeros_like(exact)
            table[np.arange(exact.shape[0]), np.argmax(exact, axis=1)] = 1.0
            return table
        raise PreconditionError(f"unknown proxy {proxy!r}; use 'exact', 'hard', or a table")
    table = np.asarray(proxy, dtype=float)
    if table.shape != (model.n_symbols, model.n_classes):
        raise PreconditionError(
            f"proxy table must be {model.n_symbols} x {model.n_classes}")
    for v in range(table.shape[0]):
        _as_probs(table[v], f"proxy row {v}")
    return table


def free_energy(model, proxy, data):
    """E_{proxy x data}[log proxy - log joint], by exact enumeration.

    Decomposes as the marginal cross entropy plus KL(proxy || exact
    recognition); the bound is tight exactly when the proxy is the model
    recognition distribution.
    """
    data = _as_probs(data, "data")
    if data.shape[0] != model.n_symbols:
        raise PreconditionError("data distribution length must match symbol count")
    table = _proxy_table(model, proxy)
    log_joint = np.log(np.where(model.source > 0, model.source, 1.0))[None, :] \
        + np.log(np.where(model.emission.T > 0, model.emission.T, 1.0))
    # Entries with zero joint probability only matter where the proxy puts
    # mass there; that makes the free energy infinite.
    bad = (table > 0.0) & ((model.emission.T * model.source[None, :]) == 0.0)
    if np.any(bad & (data[:, None] > 0.0)):
        return np.inf
    inner = np.sum(xlogy(table, table) - table * log_joint, axis=1)
    return float(data @ inner)


@dataclass(frozen=True)
class CodingCostReport:
    """Bits-back ledger for one (model, data, proxy) triple, in nats.

    stochastic_cost_before_refund - refund = marginal_cross_entropy + proxy_kl.
    """

    marginal_cross_entropy: float
    hard_assignment_cost: float
    stochastic_cost_before_refund: float
    refund: float
    proxy_kl: float


def bits_back_costs(model, data, proxy="exact"):
    """Exact sender-receiver coding costs of a discrete-latent model.

    The stochastic scheme draws the latent from the proxy recognition row and
    pays the source code plus the emission (misfit) code; the receiver can
    reconstruct the numbers used for the draw, refunding the proxy entropy.
    The gap to the marginal cross entropy is exactly KL(proxy || exact
    recognition).  The one-time model-transmission cost is ignored.
    """
    data = _as_probs(data, "data")
    if data.shape[0] != model.n_symbols:
        raise PreconditionError("data distribution length must match symbol count")
    exact = model.recognition()
    table = _proxy_table(model, proxy)

    marg = model.marginal()
    marginal_xe = float(-np.sum(xlogy(data, marg)))

    def _avg(term_table):
        return float(data @ term_table.sum(axis=1))

    def _costs(t):
        latent_cost = _avg(-xlogy(t, model.source[None, :]))
        misfit_cost = _avg(-xlogy(t, model.emission.T))
        refund = _avg(-xlogy(t, t))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(t > 0, t / np.where(exact > 0, exact, 1.0), 1.0)
        proxy_kl = _avg(xlogy(t, ratio))
        return latent_cost + misfit_cost, refund, proxy_kl

    stochastic, refund, proxy_kl = _costs(table)
    hard_cost, _, _ = _costs(_proxy_table(model, "hard"))
    return CodingCostReport(
        marginal_cross_entropy=marginal_xe,
        hard_assignment_cost=hard_cost,
        stochastic_cost_before_refund=stochastic,
        refund=refund,
        proxy_kl=max(proxy_kl, 0.0),
    )


@dataclass
class EmConfig:
    """Knobs for the generic EM driver."""

    max_iter: int = 100
    tol: float = 1e-8
    seed: int = 0
    restarts: int = 1


@dataclass
class FitReport:
    """Per-fit record: half-step free-energy trace and final parameters.

    For exact-EM models the trace is non-increasing up to 1e-9 per step.
    """

    free_energy_trace: np.ndarray
    final_params: object
    iterations: int
    converged: bool
    seed: int
    posterior: object = field(default=None, repr=False)


def _run_single(model_handle, data, config, seed):
    rng = np.random.default_rng(seed)
    params = model_handle.init_params(data, rng)
    posterior = model_handle.e_step(params, data)
    trace = [model_handle.free_energy(params, data, posterior)]
    if not np.isfinite(trace[0]):
        raise NumericalDivergenceError("non-finite initial free energy", iteration=0)
    converged = False
    iterations = 0
    for it in range(1, config.max_iter + 1):
        try:
            params = model_handle.m_step(data, posterior)
        except EmptyComponentError:
            if hasattr(model_handle, "handle_empty_component"):
                params, posterior = model_handle.handle_empty_component(
                    params, data, posterior, rng)
            else:
                raise
        trace.append(model_handle.free_energy(params, data, posterior))
        posterior = model_handle.e_step(params, data)
        trace.append(model_handle.free_energy(params, data, posterior))
        iterations = it
        if not np.isfinite(trace[-1]):
            raise NumericalDivergenceError("non-finite free energy", iteration=it)
        prev, curr = trace[-3], trace[-1]
        denom = max(abs(prev), 1.0)
        if abs(prev - curr) / denom < config.tol:
            converged = True
            break
    return FitReport(
        free_energy_trace=np.asarray(trace, dtype=float),
        final_params=params,
        iterations=iterations,
        converged=converged,
        seed=seed,
        posterior=posterior,
    )


def run_em(model_handle, data, config=None):
    """Alternate E and M steps on `model_handle` until convergence.

    The handle must expose `init_params(data, rng)`, `e_step(params, data)`,
    `m_step(data, posterior)` and `free_energy(params, data, posterior)`.
    The free energy is recorded after every half-step; convergence is a
    relative free-energy change below `tol` between successive E steps.
    With several restarts, each gets an independent seed substream and the
    best final free energy wins.
    """
    if config is None:
        config = EmConfig()
    seeds = [s.generate_state(1)[0]
             for s in np.random.SeedSequence(config.seed).spawn(max(config.restarts, 1))]
    best = None
    for seed in seeds:
        report = _run_single(model_handle, data, config, int(seed))
        if best is None or report.free_energy_trace[-1] < best.free_energy_trace[-1]:
            best = report
    best.seed = config.seed
    return best
