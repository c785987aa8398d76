"""Gradient geometry of the smoothing rate.

Works on flattened parameter-space vectors: the forget gradient g_f, the
per-slot normal gradients g_p^(k) and their mean. The deflection vector

    u = mean(g_p) - (1 - 1/K) * g_f

tilts the plain ascent direction, the one-step update vector is

    d(r) = -g_f + r * u,

and the update-norm-minimizing rate has the closed form

    r* = <g_f, u> / ||u||^2.

Note d(r) and the loss-side combined direction (objectives module) attach
r with opposite orientation; each is implemented exactly as printed and
never converted into the other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ZERO_TOL = 1e-12


@dataclass
class GradientBundle:
    """Forget gradient, normal-slot gradients, and their mean, all in the
    canonical flat parameter order."""

    forget_grad: np.ndarray
    normal_grads: list[np.ndarray]
    normal_grad_mean: np.ndarray
    slot_count: int
    dim: int

    @classmethod
    def from_grads(
        cls,
        forget_grad: np.ndarray,
        normal_grads: list[np.ndarray],
        slot_count: int | None = None,
    ) -> "GradientBundle":
        forget_grad = np.asarray(forget_grad, dtype=np.float64)
        normal_grads = [np.asarray(g, dtype=np.float64) for g in normal_grads]
        dim = forget_grad.shape[0]
        for g in normal_grads:
            if g.shape != (dim,):
                raise ValueError(
                    f"normal gradient length {g.shape} != forget gradient length {dim}"
                )
        if not normal_grads:
            raise ValueError("at least one normal gradient is required")
        mean = np.mean(normal_grads, axis=0)
        k = slot_count if slot_count is not None else len(normal_grads) + 1
        if k < 2:
            raise ValueError("slot count must be >= 2")
        return cls(
            forget_grad=forget_grad,
            normal_grads=normal_grads,
            normal_grad_mean=mean,
            slot_count=k,
            dim=dim,
        )

    def validate(self) -> None:
        if any(g.shape != (self.dim,) for g in self.normal_grads):
            raise ValueError("bundle vectors disagree in length")
        if self.forget_grad.shape != (self.dim,):
            raise ValueError("bundle vectors disagree in length")
        recomputed = np.mean(self.normal_grads, axis=0)
        if np.max(np.abs(recomputed - self.normal_grad_mean)) > ZERO_TOL:
            raise ValueError("normal_grad_mean is not the mean of normal_grads")


def deflection_vector(bundle: GradientBundle) -> np.ndarray:
    """u = mean(g_p) - (1 - 1/K) * g_f."""
    k = bundle.slot_count
    return bundle.normal_grad_mean - (1.0 - 1.0 / k) * bundle.forget_grad


def update_vector(bundle: GradientBundle, rate: float) -> np.ndarray:
    """One-step update vector d(r) = -g_f + r * u."""
    return -bundle.forget_grad + rate * deflection_vector(bundle)


@dataclass
class RateDiagnostics:
    """Closed-form optimal rate with the quantities behind it."""

    rate: float
    inner_product: float       # <g_f, u>
    deflection_norm_sq: float  # ||u||^2
    update_norm_sq_at_rate: float
    update_norm_sq_at_zero: float


def optimal_smoothing_rate(bundle: GradientBundle) -> RateDiagnostics:
    """r* = <g_f, u> / ||u||^2, the argmin of ||d(r)||^2.

    Raises when ||u||^2 is below tolerance: with no deflection the update
    norm is constant in r and the optimum is undefined.
    """
    u = deflection_vector(bundle)
    u_sq = float(u @ u)
    if u_sq <= ZERO_TOL:
        raise ValueError("degenerate deflection (u~0): optimal rate undefined")
    inner = float(bundle.forget_grad @ u)
    rate = inner / u_sq
    d_star = update_vector(bundle, rate)
    return RateDiagnostics(
        rate=rate,
        inner_product=inner,
        deflection_norm_sq=u_sq,
        update_norm_sq_at_rate=float(d_star @ d_star),
        update_norm_sq_at_zero=float(bundle.forget_grad @ bundle.forget_grad),
    )


@dataclass
class SignProfile:
    """Per-instance sign of <g_f, u> with aggregate counts.

    The sign of the inner product equals the sign of r* whenever the
    deflection is non-degenerate, so the profile characterizes the
    feasible range of the smoothing rate across instances."""

    instance_ids: list[str]
    inner_products: list[float]
    signs: list[int]
    positive: int
    negative: int
    zero: int

    def rows(self) -> list[dict]:
        return [
            {"instance_id": i, "inner_product": p, "sign": s}
            for i, p, s in zip(self.instance_ids, self.inner_products, self.signs)
        ]

    def summary(self) -> dict:
        return {
            "instances": len(self.signs),
            "positive": self.positive,
            "negative": self.negative,
            "zero": self.zero,
        }

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for row in self.rows():
                f.write(json.dumps(row, sort_keys=True) + "\n")
            f.write(json.dumps({"summary": self.summary()}, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "SignProfile":
        ids, inners, signs = [], [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                row = json.loads(line)
                if "summary" in row:
                    continue
                ids.append(row["instance_id"])
                inners.append(row["inner_product"])
                signs.append(row["sign"])
        return cls(
            instance_ids=ids, inner_products=inners, signs=signs,
            positive=sum(1 for s in signs if s > 0),
            negative=sum(1 for s in signs if s < 0),
            zero=sum(1 for s in signs if s == 0),
        )


def sign_profile(
    bundles: list[GradientBundle], instance_ids: list[str] | None = None
) -> SignProfile:
    """Per-instance sign of <g_f, u> (zero below tolerance 1e-12)."""
    if not bundles:
        raise ValueError("sign_profile requires at least one bundle")
    if instance_ids is None:
        instance_ids = [str(i) for i in range(len(bundles))]
    inners: list[float] = []
    signs: list[int] = []
    for bundle in bundles:
        inner = float(bundle.forget_grad @ deflection_vector(bundle))
        inners.append(inner)
        if abs(inner) <= ZERO_TOL:
            signs.append(0)
        else:
            signs.append(1 if inner > 0 else -1)
    return SignProfile(
        instance_ids=list(instance_ids),
        inner_products=inners,
        signs=signs,
        positive=sum(1 for s in signs if s > 0),
        negative=sum(1 for s in signs if s < 0),
        zero=sum(1 for s in signs if s == 0),
    )
