"""Diffusion models on an open interval: drift/diffusion/killing fields,
speed and scale densities, coordinate reduction to unit diffusion, the
Bessel-square change of variables, and the ground-state (Schrodinger-form)
potential.

Conventions
-----------
A model stores the SDE drift mu in  dX = mu(X) dt + sigma(X) dW.  The
generator of the unit-diffusion case is

    L f = 1/2 f'' + mu f' - kappa f = (1/(2 rho)) (rho f')' - kappa f,

with speed density rho(x) = exp(2 int_{x_ref}^x mu(s) ds) and scale density
rho^{-1}.  Families whose natural description is the absorbed operator
-1/2 f'' + b f' enter the zoo with mu = -b; families described directly by an
SDE on R enter with mu = +b.  Every CLI report embeds CONVENTION_NOTE so the
sign mapping stays auditable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .expressions import compile_expression
from .numerics import (CachedAntiderivative, IndeterminateIntegralError,
                       QsdlabError, TabulatedAntiderivative, brent_root,
                       improper_integral)

CONVENTION_NOTE = (
    "drift convention: models store the SDE drift mu of dX = mu dt + dW; "
    "absorbed families use mu = -b relative to the generator -1/2 f'' + b f', "
    "killed families on R use mu = +b; speed density rho = exp(2*int mu)")


class ModelValidationError(QsdlabError):
    """Model construction or serialization input is invalid."""


def _fd_derivative(f: Callable, x, h_rel: float = 1e-6):
    """Central difference with one Richardson refinement, relative step."""
    x = np.asarray(x, dtype=float)
    h = np.maximum(1e-6, h_rel * np.abs(x))
    d1 = (f(x + h) - f(x - h)) / (2 * h)
    d2 = (f(x + h / 2) - f(x - h / 2)) / h
    return (4.0 * d2 - d1) / 3.0


@dataclass(frozen=True)
class ScalarField:
    """A scalar coefficient on an open interval, with optional analytic
    derivative (finite-difference fallback otherwise)."""
    eval: Callable
    deriv: Optional[Callable] = None
    domain: tuple = (-math.inf, math.inf)
    expr: Optional[str] = None     # mini-grammar source, when built from one

    def __call__(self, x):
        return self.eval(x)

    def d(self, x):
        if self.deriv is not None:
            return self.deriv(x)
        return _fd_derivative(self.eval, x)

    @staticmethod
    def from_expression(src: str, domain=(-math.inf, math.inf)) -> "ScalarField":
        f = compile_expression(src)
        return ScalarField(eval=f, domain=tuple(domain), expr=src)

    @staticmethod
    def constant(c: float, domain=(-math.inf, math.inf)) -> "ScalarField":
        c = float(c)

        def cf(x):
            return c if np.isscalar(x) else np.full(np.shape(x), c)

        def dcf(x):
            return 0.0 if np.isscalar(x) else np.zeros(np.shape(x))

        return ScalarField(eval=cf, deriv=dcf, domain=tuple(domain), expr=repr(c))


def _default_x_ref(domain):
    l, r = domain
    if l == 0.0 and math.isinf(r):
        return 1.0
    if math.isinf(l) and math.isinf(r):
        return 0.0
    if math.isinf(r):
        return l + 1.0
    if math.isinf(l):
        return r - 1.0
    return 0.5 * (l + r)


@dataclass(frozen=True)
class DiffusionModel:
    drift: ScalarField
    diffusion: Optional[ScalarField] = None
    killing: Optional[ScalarField] = None
    domain: tuple = (0.0, math.inf)
    x_ref: Optional[float] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # optional closed forms supplied by zoo constructors
    log_speed_closed: Optional[Callable] = None
    reduction: Optional["ReductionForms"] = None

    def __post_init__(self):
        l, r = self.domain
        if not l < r:
            raise ModelValidationError(f"empty domain {self.domain}")
        if self.x_ref is None:
            object.__setattr__(self, "x_ref", _default_x_ref(self.domain))
        if not (l < self.x_ref < r):
            raise ModelValidationError(
                f"x_ref {self.x_ref} outside domain {self.domain}")
        for x in self._sample_points(16):
            if self.killing is not None and self.killing(x) < 0:
                raise ModelValidationError(f"negative killing rate at x={x}")
            if self.diffusion is not None and self.diffusion(x) <= 0:
                raise ModelValidationError(f"non-positive diffusion at x={x}")

    def _sample_points(self, n):
        l, r = self.domain
        lo = self.x_ref - 8.0 if math.isinf(l) else l + 1e-3 * max(1.0, abs(l))
        hi = self.x_ref + 8.0 if math.isinf(r) else r - 1e-3 * max(1.0, abs(r))
        if not lo < hi:
            lo, hi = l + 0.01 * (r - l), r - 0.01 * (r - l)
        return np.linspace(lo, hi, n)

    @property
    def unit_diffusion(self) -> bool:
        return self.diffusion is None

    def with_killing(self, killing: Optional[ScalarField]) -> "DiffusionModel":
        return replace(self, killing=killing)


class ReductionForms(NamedTuple):
    """Closed forms carried by zoo models whose reduction to unit diffusion
    is known analytically (keeps the reduced coefficients free of nested
    quadrature/root-finding)."""
    forward: Callable            # F
    inverse: Callable            # F^{-1}
    drift: ScalarField           # reduced drift, analytic derivative included
    domain: tuple
    x_ref: float
    log_speed: Optional[Callable] = None


class Transform(NamedTuple):
    forward: Callable
    inverse: Callable

    def roundtrip_error(self, xs) -> float:
        xs = np.asarray(xs, dtype=float)
        return float(np.max(np.abs(self.inverse(self.forward(xs)) - xs)))


# ---------------------------------------------------------------------------
# speed / scale densities
# ---------------------------------------------------------------------------

class ScaleSpeed:
    """Speed density rho = exp(2 int_{x_ref}^x mu) and scale density 1/rho,
    with log_speed either a zoo closed form or a cached quadrature."""

    def __init__(self, model: DiffusionModel):
        if not model.unit_diffusion:
            raise ModelValidationError(
                "scale_speed needs a unit-diffusion model; reduce first")
        self.model = model
        if model.log_speed_closed is not None:
            self.log_speed = model.log_speed_closed
        else:
            two_mu = lambda x: 2.0 * np.asarray(model.drift(x), dtype=float)
            self.log_speed = TabulatedAntiderivative(two_mu, model.x_ref,
                                                     domain=model.domain)

    def speed_density(self, x):
        return np.exp(np.clip(np.asarray(self.log_speed(x), dtype=float),
                              -700.0, 709.0))

    def scale_density(self, x):
        return np.exp(np.clip(-np.asarray(self.log_speed(x), dtype=float),
                              -700.0, 709.0))


def scale_speed(model: DiffusionModel) -> ScaleSpeed:
    return ScaleSpeed(model)


# ---------------------------------------------------------------------------
# reduction to unit diffusion
# ---------------------------------------------------------------------------

def reduce_unit_diffusion(model: DiffusionModel):
    """Map the state through F(x) = int dy/sigma(y) so the image process has
    unit diffusion; by Ito the reduced drift is

        mu_R(r) = mu(F^{-1}(r)) / sigma(F^{-1}(r)) - sigma'(F^{-1}(r)) / 2.

    Returns (reduced model, Transform); killing transports as kappa o F^{-1}.
    F is anchored at the left endpoint when 1/sigma is integrable there
    (F(l) = 0), at x_ref otherwise.
    """
    if model.unit_diffusion:
        ident = Transform(forward=lambda x: x, inverse=lambda rr: rr)
        return model, ident

    if model.reduction is not None:
        red = model.reduction
        F, Finv = red.forward, red.inverse
        kill = None
        if model.killing is not None:
            kill = ScalarField(eval=lambda rr: model.killing(Finv(rr)),
                               domain=red.domain)
        reduced = DiffusionModel(
            drift=red.drift, diffusion=None, killing=kill,
            domain=red.domain, x_ref=red.x_ref,
            name=model.name + "_reduced", params=dict(model.params),
            log_speed_closed=red.log_speed)
        return reduced, Transform(forward=F, inverse=Finv)

    sig = model.diffusion
    l, r = model.domain

    def inv_sigma(x):
        return 1.0 / np.asarray(sig(x), dtype=float)

    # decide the anchor of F
    anchored_left = False
    left_mass = 0.0
    if not math.isinf(l):
        try:
            res = improper_integral(inv_sigma, l, model.x_ref, tol=1e-12,
                                    split=0.5 * (l + model.x_ref))
            if res.finite:
                anchored_left = True
                left_mass = res.value
        except IndeterminateIntegralError:
            anchored_left = False

    core = CachedAntiderivative(inv_sigma, model.x_ref)
    shift = left_mass if anchored_left else 0.0

    def F(x):
        return core(x) + shift

    # reduced domain endpoints
    if anchored_left:
        dom_lo = 0.0
    elif math.isinf(l):
        dom_lo = -math.inf
    else:
        dom_lo = -math.inf   # divergent scale integral toward l
    try:
        res_r = improper_integral(inv_sigma, model.x_ref, r, tol=1e-12,
                                  split=model.x_ref + (1.0 if math.isinf(r)
                                                       else 0.5 * (r - model.x_ref)))
        dom_hi = shift + res_r.value if res_r.finite else math.inf
    except IndeterminateIntegralError:
        dom_hi = math.inf

    def _finv_scalar(rr):
        lo = hi = model.x_ref
        step = max(1.0, abs(model.x_ref))
        while F(hi) < rr:
            hi = hi + step if math.isinf(r) else 0.5 * (hi + r)
            step *= 2.0
            if not math.isinf(r) and r - hi < 1e-13 * max(1.0, abs(r)):
                break
        step = max(1.0, abs(model.x_ref))
        while F(lo) > rr:
            if math.isinf(l):
                lo -= step
                step *= 2.0
            else:
                lo = 0.5 * (lo + l)
                if lo - l < 1e-300:
                    break
        return brent_root(lambda x: F(x) - rr, (lo, hi), tol=1e-13)

    def Finv(rv):
        if np.isscalar(rv):
            return _finv_scalar(float(rv))
        return np.array([_finv_scalar(float(v)) for v in np.asarray(rv).ravel()
                         ]).reshape(np.shape(rv))

    def mu_R(rv):
        x = Finv(rv)
        return model.drift(x) / sig(x) - 0.5 * sig.d(x)

    dom_R = (dom_lo, dom_hi)
    kill = None
    if model.killing is not None:
        kill = ScalarField(eval=lambda rv: model.killing(Finv(rv)), domain=dom_R)
    reduced = DiffusionModel(
        drift=ScalarField(eval=mu_R, domain=dom_R),
        diffusion=None, killing=kill, domain=dom_R,
        x_ref=float(F(model.x_ref)),
        name=model.name + "_reduced", params=dict(model.params))
    return reduced, Transform(forward=F, inverse=Finv)


# ---------------------------------------------------------------------------
# Bessel-square change of variables
# ---------------------------------------------------------------------------

def feller_transform(h: ScalarField) -> DiffusionModel:
    """Model of X = 2 sqrt(Z) for the branching-type diffusion Z whose
    reproduction term is h; the image drift on (0, inf) is

        mu(x) = -(1/x) (1/2 - 2 h(x^2/4)).

    h == 0 reproduces the Bessel family member with index -1.
    """
    def mu(x):
        return -(1.0 / x) * (0.5 - 2.0 * h(x * x / 4.0))

    dmu = None
    if h.deriv is not None:
        def dmu(x):
            z = x * x / 4.0
            return 1.0 / (2.0 * x * x) - 2.0 * h(z) / (x * x) + h.d(z)

    return DiffusionModel(
        drift=ScalarField(eval=mu, deriv=dmu, domain=(0.0, math.inf)),
        domain=(0.0, math.inf), x_ref=1.0, name="feller_transform")


# ---------------------------------------------------------------------------
# ground-state transformation
# ---------------------------------------------------------------------------

class SchrodingerPotential(NamedTuple):
    q: ScalarField     # q = -kappa - (mu^2 + mu')/2
    V: ScalarField     # V = -q, potential of -1/2 d^2/dx^2 + V


def schrodinger_potential(model: DiffusionModel) -> SchrodingerPotential:
    """Conjugating the generator by sqrt(rho) gives 1/2 d^2/dx^2 + q with

        q(x) = -kappa(x) - (mu(x)^2 + mu'(x)) / 2

    in terms of the stored SDE drift (checks: mu = -1, kappa = 0 gives
    V = 1/2; kappa = x^2/2 with mu = 0 gives the harmonic oscillator; the
    unkilled drift -x case has eigenvalues 0, 1, 2, ... which pins the sign
    of the mu' term)."""
    if not model.unit_diffusion:
        raise ModelValidationError("schrodinger_potential needs sigma == 1")
    mu = model.drift
    kap = model.killing

    def q(x):
        k = kap(x) if kap is not None else 0.0
        m = mu(x)
        return -k - 0.5 * (m * m + mu.d(x))

    def V(x):
        return -q(x)

    dom = model.domain
    return SchrodingerPotential(q=ScalarField(eval=q, domain=dom),
                                V=ScalarField(eval=V, domain=dom))


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _endpoint_to_json(v):
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return v


def _endpoint_from_json(v):
    if v == "-inf":
        return -math.inf
    if v == "inf":
        return math.inf
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ModelValidationError(
            f"domain endpoint must be a number, 'inf' or '-inf', got {v!r}") from None


def model_to_json(model: DiffusionModel) -> dict:
    if model.name != "custom":
        return {"name": model.name, "params": dict(model.params),
                "domain": [_endpoint_to_json(model.domain[0]),
                           _endpoint_to_json(model.domain[1])],
                "x_ref": model.x_ref}
    if model.drift.expr is None:
        raise ModelValidationError(
            "custom model built from raw callables is not serializable")
    return {"name": "custom",
            "params": {},
            "drift_expr": model.drift.expr,
            "killing_expr": model.killing.expr if model.killing is not None else None,
            "domain": [_endpoint_to_json(model.domain[0]),
                       _endpoint_to_json(model.domain[1])],
            "x_ref": model.x_ref}


def model_from_json(doc: dict) -> DiffusionModel:
    if not isinstance(doc, dict) or "name" not in doc:
        raise ModelValidationError("model document must be an object with 'name'")
    name = doc["name"]
    if name != "custom":
        from .zoo import zoo_build
        built = zoo_build(name, doc.get("params", {}))
        if doc.get("x_ref") is not None:
            built = replace(built, x_ref=float(doc["x_ref"]))
        return built
    if "drift_expr" not in doc or not doc["drift_expr"]:
        raise ModelValidationError("custom model requires drift_expr")
    dom = tuple(_endpoint_from_json(v) for v in doc.get("domain", ["-inf", "inf"]))
    drift = ScalarField.from_expression(doc["drift_expr"], dom)
    killing = None
    if doc.get("killing_expr"):
        killing = ScalarField.from_expression(doc["killing_expr"], dom)
    return DiffusionModel(drift=drift, killing=killing, domain=dom,
                          x_ref=doc.get("x_ref"), name="custom")


def model_json_str(model: DiffusionModel) -> str:
    return json.dumps(model_to_json(model), sort_keys=True)
