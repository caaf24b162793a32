"""Loss terms and their weighted composition.

Reconstruction is a per-voxel mean binary cross-entropy, the KL term sums
over latent dimensions and averages over the batch, and the curvature term
is a masked mean squared error between the curvature head and a discrete
operator applied to occupancy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autograd as ad
from .voxgeo import central_gradient, gradient_magnitude, laplacian, surface_mask

PROB_EPS = 1e-7
NORMAL_MIN_NORM = 1e-8

CURVATURE_OPERATORS = ("laplacian-6", "laplacian-26", "gradient-normal-alternative")
ABLATIONS = ("baseline", "curvature-only", "multi-geometric", "alternative-geometric")
CSV_HEADER = ("epoch", "split", "recon", "kl", "curvature", "normal", "edge", "total",
              "surface_voxels")


class NonFiniteLossError(ArithmeticError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.001
    lambda_curv: float = 0.02
    lambda_normal: float = 0.0
    lambda_edge: float = 0.0
    curvature_operator: str = "laplacian-6"
    band_lo: float = 0.3
    band_hi: float = 0.7
    # where H and the surface band come from: "predicted" or "ground-truth"
    curvature_source: str = "predicted"
    # False detaches H so only the curvature head receives gradient
    curvature_target_grad: bool = True
    boundary: str = "clamp"

    def __post_init__(self):
        for f in ("beta", "lambda_curv", "lambda_normal", "lambda_edge"):
            if not getattr(self, f) >= 0:
                raise ValueError(f"{f} must be non-negative, got {getattr(self, f)}")
        if self.curvature_operator not in CURVATURE_OPERATORS:
            raise ValueError(f"unknown curvature operator {self.curvature_operator!r}")
        if self.curvature_source not in ("predicted", "ground-truth"):
            raise ValueError(f"unknown curvature source {self.curvature_source!r}")
        if not (0.0 <= self.band_lo < self.band_hi <= 1.0):
            raise ValueError("band thresholds need 0 <= lo < hi <= 1")


def ablation_weights(name: str, **overrides) -> LossWeights:
    """The four weight configurations of the ablation matrix."""
    presets = {
        "baseline": dict(lambda_curv=0.0),
        "curvature-only": dict(lambda_curv=0.02),
        "multi-geometric": dict(lambda_curv=0.02, lambda_normal=0.05, lambda_edge=0.01),
        "alternative-geometric": dict(lambda_curv=0.02,
                                      curvature_operator="gradient-normal-alternative"),
    }
    if name not in presets:
        raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    return replace(LossWeights(**presets[name]), **overrides)


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    kl: float
    curvature: float = 0.0
    normal: float = 0.0
    edge: float = 0.0
    total: float = 0.0
    surface_voxel_count: int = 0

    def csv_row(self, epoch: int, split: str) -> list[str]:
        vals = [self.recon, self.kl, self.curvature, self.normal, self.edge, self.total]
        return [str(epoch), split, *(repr(float(v)) for v in vals),
                str(int(self.surface_voxel_count))]

    @property
    def vae_total(self) -> float:
        """Reconstruction plus KL only (no geometric terms)."""
        return self.recon + LossWeights().beta * self.kl

    def as_dict(self) -> dict:
        return asdict(self)


def _t(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def bce(pred, gt) -> ad.Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    pred, gt = _t(pred), _t(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"bce: prediction {pred.shape} vs target {gt.shape}")
    p = ad.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    ll = gt * ad.log(p) + (1.0 - gt) * ad.log(1.0 - p)
    return -ad.mean(ll)


def kl_gaussian(mu, logvar) -> ad.Tensor:
    """KL to a standard normal: summed over latent dims, averaged over the batch."""
    mu, logvar = _t(mu), _t(logvar)
    if mu.shape != logvar.shape:
        raise ad.ShapeError(f"kl: mu {mu.shape} vs logvar {logvar.shape}")
    if mu.ndim == 1:
        mu, logvar = mu.reshape(1, -1), logvar.reshape(1, -1)
    inner = 1.0 + logvar - mu * mu - ad.exp(logvar)
    return ad.mean(ad.sum(inner, axis=1)) * -0.5


def curvature_target(occupancy, weights: LossWeights):
    """The H field the curvature head is asked to match."""
    if weights.curvature_operator == "laplacian-6":
        return laplacian(occupancy, 6, weights.boundary)
    if weights.curvature_operator == "laplacian-26":
        return laplacian(occupancy, 26, weights.boundary)
    return gradient_magnitude(occupancy)


def curvature_loss(c_pred, occupancy, weights: LossWeights = LossWeights(), gt=None):
    """Masked MSE between predicted curvature and H over the surface band.

    ``occupancy`` is the predicted grid; with ``curvature_source="ground-truth"``
    the band and H come from ``gt`` instead. Returns ``(loss, surface_count)``;
    an empty band gives a zero loss.
    """
    c_pred = _t(c_pred)
    if weights.curvature_source == "ground-truth":
        if gt is None:
            raise ValueError("curvature_source='ground-truth' needs gt")
        source = _t(gt).detach()
    else:
        source = _t(occupancy)
    if c_pred.shape != source.shape:
        raise ad.ShapeError(f"curvature: prediction {c_pred.shape} vs grid {source.shape}")
    if not weights.curvature_target_grad:
        source = source.detach()
    mask = surface_mask(source, weights.band_lo, weights.band_hi)
    count = int(mask.sum())
    if count == 0:
        return ad.Tensor(0.0), 0
    h = curvature_target(source, weights)
    diff = c_pred - h
    sq = diff * diff * ad.Tensor(mask.astype(np.float64))
    return ad.sum(sq) * (1.0 / count), count


def normal_consistency_loss(pred, gt, weights: LossWeights = LossWeights()) -> ad.Tensor:
    """Mean ``1 - cos`` between gradient directions of ``pred`` and ``gt``.

    Evaluated over the surface band (of the predicted grid by default, see
    ``curvature_source``), skipping voxels where either gradient is shorter
    than 1e-8.
    """
    pred = _t(pred)
    gt_arr = np.asarray(gt.data if isinstance(gt, ad.Tensor) else gt, dtype=np.float64)
    if pred.shape != gt_arr.shape:
        raise ad.ShapeError(f"normal: prediction {pred.shape} vs target {gt_arr.shape}")
    band_src = gt_arr if weights.curvature_source == "ground-truth" else pred.data
    band = surface_mask(band_src, weights.band_lo, weights.band_hi)
    gp = central_gradient(pred)
    gg = central_gradient(gt_arr)
    np_norm = np.sqrt(sum(g.data ** 2 for g in gp))
    ng_norm = np.sqrt(sum(g ** 2 for g in gg))
    sel = band & (np_norm >= NORMAL_MIN_NORM) & (ng_norm >= NORMAL_MIN_NORM)
    idx = np.flatnonzero(sel)
    if idx.size == 0:
        return ad.Tensor(0.0)
    p = [ad.take(g.reshape(-1), idx) for g in gp]
    q = [g.reshape(-1)[idx] for g in gg]
    dot = p[0] * ad.Tensor(q[0]) + p[1] * ad.Tensor(q[1]) + p[2] * ad.Tensor(q[2])
    pnorm = ad.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
    cos = ad.div(dot, pnorm * ad.Tensor(ng_norm.reshape(-1)[idx]))
    return ad.mean(1.0 - cos)


def edge_preservation_loss(pred, gt) -> ad.Tensor:
    """Mean absolute difference of gradient magnitudes over all voxels."""
    pred = _t(pred)
    gt_arr = np.asarray(gt.data if isinstance(gt, ad.Tensor) else gt, dtype=np.float64)
    if pred.shape != gt_arr.shape:
        raise ad.ShapeError(f"edge: prediction {pred.shape} vs target {gt_arr.shape}")
    gm_pred = gradient_magnitude(pred)
    gm_gt = gradient_magnitude(gt_arr)
    return ad.mean(ad.absolute(gm_pred - ad.Tensor(gm_gt)))


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of scalar components; missing terms count as zero."""
    vals = {}
    for name in ("recon", "kl", "curvature", "normal", "edge"):
        v = float(components.get(name, 0.0))
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        vals[name] = v
    total = (vals["recon"] + weights.beta * vals["kl"] + weights.lambda_curv * vals["curvature"]
             + weights.lambda_normal * vals["normal"] + weights.lambda_edge * vals["edge"])
    return LossBreakdown(total=total,
                         surface_voxel_count=int(components.get("surface_voxel_count", 0)),
                         **vals)


def objective(occupancy, curvature, mu, logvar, gt, weights: LossWeights = LossWeights()):
    """Differentiable total plus its :class:`LossBreakdown`.

    Terms with zero weight are skipped (reported as 0).
    """
    gt_t = _t(gt).detach()
    terms = {"recon": bce(occupancy, gt_t), "kl": kl_gaussian(mu, logvar)}
    count = 0
    if weights.lambda_curv > 0:
        terms["curvature"], count = curvature_loss(curvature, occupancy, weights, gt_t)
    if weights.lambda_normal > 0:
        terms["normal"] = normal_consistency_loss(occupancy, gt_t.data, weights)
    if weights.lambda_edge > 0:
        terms["edge"] = edge_preservation_loss(occupancy, gt_t.data)
    coef = {"recon": 1.0, "kl": weights.beta, "curvature": weights.lambda_curv,
            "normal": weights.lambda_normal, "edge": weights.lambda_edge}
    for name, t in terms.items():
        v = t.item()
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    total = None
    for name, t in terms.items():
        part = t * coef[name] if coef[name] != 1.0 else t
        total = part if total is None else total + part
    scalars = {k: v.item() for k, v in terms.items()}
    scalars["surface_voxel_count"] = count
    return total, total_loss(scalars, weights)


def weights_fields() -> list[str]:
    return [f.name for f in fields(LossWeights)]
