"""Model specification and the flattened parameter vector used by the sampler.

The random-effects covariance is carried in log-Cholesky form (log diagonal
plus strict lower triangle) and the residual sd on the log scale, so the
flattened vector lives on an unconstrained space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import SplineBasis
from .hazard import LinkSpec, SurvivalParams
from .trajectory import LinearAgeDesign, design_from_dict


@dataclass
class ModelSpec:
    """Design, link kind, baseline basis settings, and survival covariates."""

    design: object = field(default_factory=LinearAgeDesign)
    link: LinkSpec = field(default_factory=lambda: LinkSpec("value_slope"))
    basis: SplineBasis | None = None
    q_basis: int = 9
    spline_degree: int = 3
    survival_covariates: tuple = ()

    @property
    def dims(self) -> "ModelDims":
        if self.basis is None:
            raise ValueError("basis not yet resolved; call with_basis or fit first")
        return ModelDims(
            p=self.design.p,
            q=self.design.q,
            n_gamma=len(self.survival_covariates),
            n_alpha=self.link.n_alpha,
            n_spline=self.basis.size,
        )

    def with_basis(self, basis: SplineBasis) -> "ModelSpec":
        return ModelSpec(design=self.design, link=self.link, basis=basis,
                         q_basis=self.q_basis, spline_degree=self.spline_degree,
                         survival_covariates=self.survival_covariates)

    def to_dict(self) -> dict:
        return {
            "design": self.design.to_dict(),
            "link_kind": self.link.kind,
            "basis": self.basis.to_dict() if self.basis is not None else None,
            "q_basis": self.q_basis,
            "spline_degree": self.spline_degree,
            "survival_covariates": list(self.survival_covariates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        basis = SplineBasis.from_dict(d["basis"]) if d.get("basis") else None
        return cls(
            design=design_from_dict(d["design"]),
            link=LinkSpec(d["link_kind"]),
            basis=basis,
            q_basis=int(d.get("q_basis", 9)),
            spline_degree=int(d.get("spline_degree", 3)),
            survival_covariates=tuple(d.get("survival_covariates", ())),
        )


@dataclass(frozen=True)
class ModelDims:
    p: int
    q: int
    n_gamma: int
    n_alpha: int
    n_spline: int

    @property
    def n_chol(self) -> int:
        return self.q * (self.q + 1) // 2

    @property
    def total(self) -> int:
        return self.p + self.n_chol + 1 + self.n_gamma + self.n_alpha + self.n_spline


@dataclass
class ParameterVector:
    """Structured view of one point in the unconstrained parameter space."""

    beta: np.ndarray
    chol_log_diag: np.ndarray
    chol_lower: np.ndarray
    log_sigma: float
    gamma: np.ndarray
    alpha: np.ndarray
    gamma_h0: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.chol_log_diag = np.asarray(self.chol_log_diag, dtype=float)
        self.chol_lower = np.asarray(self.chol_lower, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.gamma_h0 = np.asarray(self.gamma_h0, dtype=float)

    @property
    def sigma_eps(self) -> float:
        return float(np.exp(self.log_sigma))

    def chol(self) -> np.ndarray:
        q = self.chol_log_diag.size
        L = np.zeros((q, q))
        L[np.diag_indices(q)] = np.exp(self.chol_log_diag)
        L[np.tril_indices(q, -1)] = self.chol_lower
        return L

    @property
    def b_cov(self) -> np.ndarray:
        L = self.chol()
        return L @ L.T

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.beta, self.chol_log_diag, self.chol_lower,
            [self.log_sigma], self.gamma, self.alpha, self.gamma_h0,
        ])

    @classmethod
    def from_flat(cls, flat, dims: ModelDims) -> "ParameterVector":
        flat = np.asarray(flat, dtype=float)
        if flat.size != dims.total:
            raise ValueError("flattened vector length does not match model dimensions")
        parts = np.split(flat, np.cumsum([
            dims.p, dims.q, dims.n_chol - dims.q, 1, dims.n_gamma, dims.n_alpha,
        ]))
        return cls(beta=parts[0], chol_log_diag=parts[1], chol_lower=parts[2],
                   log_sigma=float(parts[3][0]), gamma=parts[4], alpha=parts[5],
                   gamma_h0=parts[6])


def coefficient_names(model: ModelSpec) -> list[str]:
    """Stable names for the flattened coefficients, in flatten() order."""
    dims = model.dims
    names = [f"beta{i}" for i in range(dims.p)]
    names += [f"b_chol_logdiag{i}" for i in range(dims.q)]
    names += [f"b_chol_lower{i}" for i in range(dims.n_chol - dims.q)]
    names += ["log_sigma_eps"]
    names += [f"gamma_{c}" for c in model.survival_covariates]
    names += list(model.link.alpha_names)
    names += [f"gamma_h0_{i}" for i in range(dims.n_spline)]
    return names


def survival_params(model: ModelSpec, pv: ParameterVector) -> SurvivalParams:
    """Assemble the scalar-path survival parameters from a parameter vector."""
    return SurvivalParams(
        basis=model.basis,
        gamma_h0=pv.gamma_h0,
        link=model.link.with_alphas(pv.alpha),
        gamma=pv.gamma,
        covariate_names=model.survival_covariates,
    )
