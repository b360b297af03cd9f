"""Second-order Gaussian knockoffs.

The generator is fit on unlabeled, normalized inputs only: it sees an
``n x d`` matrix and never the labels. A knockoff for ``x`` is drawn from the
Gaussian conditional with mean ``x - diag{s} Sigma^-1 (x - mu)`` and
covariance ``2 diag{s} - diag{s} Sigma^-1 diag{s}``, which makes the joint
second moments of ``[x, x~]`` invariant to swapping any subset of
coordinates.
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from ..core.config import settings
from ..core.exceptions import BadMagicError, BadVersionError, FormatError, KnockoffError, TruncatedFileError
from ..core.seeding import stream
from .checkpoint_service import load_checkpoint, save_checkpoint
from .dataset_service import Dataset

PSD_TOLERANCE = 1e-8
CACHE_MAGIC = b"SCOPKNCK"
CACHE_VERSION = 1


@dataclass(frozen=True)
class KnockoffModel:
    mu: np.ndarray
    sigma: np.ndarray
    s: np.ndarray
    ridge: float

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])

    def psd_margin(self) -> float:
        """Smallest eigenvalue of 2 Sigma - diag{s}."""
        return float(np.linalg.eigvalsh(2.0 * self.sigma - np.diag(self.s)).min())


@dataclass(frozen=True)
class ConditionalGaussian:
    """Precomputed pieces of the x~ | x conditional: ``shrink = diag{s} Sigma^-1``
    and a factor ``F`` with ``F F^T`` the conditional covariance."""

    mu: np.ndarray
    shrink: np.ndarray
    factor: np.ndarray


def choose_s_equicorrelated(sigma: np.ndarray) -> np.ndarray:
    """Equicorrelated knockoff diagonal.

    On the correlation matrix every coordinate gets ``min(2 lambda_min, 1)``;
    the result is scaled back by the variances. Coordinates with zero variance
    get ``s_j = 0``.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    variances = np.diag(sigma).copy()
    live = variances > 0
    s = np.zeros_like(variances)
    if not live.any():
        return s
    std = np.sqrt(variances[live])
    corr = sigma[np.ix_(live, live)] / np.outer(std, std)
    lam_min = float(np.linalg.eigvalsh((corr + corr.T) / 2.0).min())
    s[live] = max(min(2.0 * lam_min, 1.0), 0.0) * variances[live]
    return s


def fit_knockoff_model(data: np.ndarray, ridge: Optional[float] = None) -> KnockoffModel:
    """Fit mean, ridged covariance and equicorrelated ``s`` to ``data`` (n x d).

    ``ridge`` is relative to the mean variance; the absolute amount added to
    the diagonal is recorded on the model.
    """
    ridge = settings.knockoff_ridge if ridge is None else float(ridge)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 1:
        raise KnockoffError(f"knockoff data must be an n x d matrix, got shape {data.shape}")
    if data.shape[0] < 2:
        raise KnockoffError(f"knockoff fitting needs at least 2 rows, got {data.shape[0]}")
    if not np.all(np.isfinite(data)):
        raise KnockoffError("knockoff data contains NaN or Inf")
    if ridge < 0:
        raise KnockoffError(f"ridge must be non-negative, got {ridge}")

    mu = data.mean(axis=0)
    centered = data - mu
    cov = centered.T @ centered / (data.shape[0] - 1)
    cov = (cov + cov.T) / 2.0
    scale = float(np.mean(np.diag(cov)))
    applied = ridge * (scale if scale > 0 else 1.0)
    sigma = cov + applied * np.eye(cov.shape[0])
    s = choose_s_equicorrelated(sigma)
    model = KnockoffModel(mu=mu, sigma=sigma, s=s, ridge=applied)
    logger.info(f"Fit knockoff model: n={data.shape[0]} d={data.shape[1]} ridge={applied:.3g} "
                f"mean s={float(s.mean()):.4g}")
    return model


def _psd_factor(matrix: np.ndarray, label: str) -> np.ndarray:
    """Symmetric factor F with F F^T = matrix; rejects clearly negative spectra."""
    sym = (matrix + matrix.T) / 2.0
    values, vectors = eigh(sym)
    worst = float(values.min()) if values.size else 0.0
    if worst < -PSD_TOLERANCE * max(1.0, float(np.abs(values).max())):
        raise KnockoffError(f"{label} is not positive semi-definite (most negative eigenvalue {worst:.3e})")
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def conditional_gaussian(model: KnockoffModel) -> ConditionalGaussian:
    try:
        chol = cho_factor(model.sigma, lower=True)
    except LinAlgError:
        raise KnockoffError(
            "covariance is singular; refit the knockoff model with a positive ridge (--ridge)"
        ) from None
    diag_s = np.diag(model.s)
    shrink = cho_solve(chol, diag_s).T
    cond = 2.0 * diag_s - diag_s @ cho_solve(chol, diag_s)
    return ConditionalGaussian(mu=model.mu, shrink=shrink, factor=_psd_factor(cond, "knockoff conditional covariance"))


def sample_knockoff(model: KnockoffModel, x: np.ndarray, rng: np.random.Generator,
                    conditional: Optional[ConditionalGaussian] = None) -> np.ndarray:
    """Draw knockoffs for one vector (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (model.dim,) or x.ndim > 2:
        raise KnockoffError(f"knockoff model has dimension {model.dim}, input has shape {x.shape}")
    cond = conditional or conditional_gaussian(model)
    noise = rng.standard_normal(x.shape)
    return x - (x - cond.mu) @ cond.shrink.T + noise @ cond.factor.T


def _example_noise(seed: int, indices: Iterable[int], dim: int) -> np.ndarray:
    return np.stack([stream(seed, "knockoff", int(i)).standard_normal(dim) for i in indices])


def generate_knockoff_dataset(model: KnockoffModel, dataset: Dataset, seed: int,
                              cache_path: Optional[Path] = None, clip: bool = True,
                              chunk: Optional[int] = None) -> np.ndarray:
    """Knockoff images aligned index-wise with ``dataset``.

    Example ``i`` draws its noise from its own stream keyed by ``(seed, i)``,
    so the output does not depend on ``chunk``. With ``clip`` the pixels are
    clamped to each channel's observed range.
    """
    if dataset.dim != model.dim:
        raise KnockoffError(f"knockoff model has dimension {model.dim}, dataset examples have {dataset.dim}")
    chunk = chunk or settings.knockoff_chunk
    cond = conditional_gaussian(model)
    flat = dataset.images.reshape(len(dataset), -1)
    out = np.empty(flat.shape, dtype=np.float32)
    for start in range(0, len(dataset), chunk):
        rows = flat[start:start + chunk].astype(np.float64)
        noise = _example_noise(seed, range(start, start + rows.shape[0]), model.dim)
        out[start:start + rows.shape[0]] = rows - (rows - cond.mu) @ cond.shrink.T + noise @ cond.factor.T
    images = out.reshape(dataset.images.shape)
    if clip:
        low, high = dataset.channel_range()
        images = np.clip(images, low.reshape(1, -1, 1, 1), high.reshape(1, -1, 1, 1)).astype(np.float32)
    logger.info(f"Generated {len(dataset)} knockoffs (d={model.dim}, clip={clip})")
    if cache_path is not None:
        write_knockoff_cache(cache_path, images)
    return images


# -- cache file ---------------------------------------------------------------

def encode_knockoff_cache(images: np.ndarray) -> bytes:
    images = np.asarray(images)
    header = CACHE_MAGIC + struct.pack(f"<III{images.ndim - 1}I", CACHE_VERSION, images.shape[0],
                                       images.ndim - 1, *images.shape[1:])
    return header + np.ascontiguousarray(images, dtype="<f4").tobytes()


def decode_knockoff_cache(payload: bytes, source: str = "knockoff cache") -> np.ndarray:
    if len(payload) < len(CACHE_MAGIC) + 12:
        raise TruncatedFileError(f"{source}: header needs {len(CACHE_MAGIC) + 12} bytes, file has {len(payload)}")
    if payload[:8] != CACHE_MAGIC:
        raise BadMagicError(f"{source}: expected magic {CACHE_MAGIC!r}, found {payload[:8]!r}")
    version, count, rank = struct.unpack("<III", payload[8:20])
    if version != CACHE_VERSION:
        raise BadVersionError(f"{source}: unsupported knockoff cache version {version}")
    if rank > 8:
        raise FormatError(f"{source}: example rank {rank} is implausible")
    header_end = 20 + 4 * rank
    if len(payload) < header_end:
        raise TruncatedFileError(f"{source}: truncated inside the shape header")
    dims = struct.unpack(f"<{rank}I", payload[20:header_end])
    expected = count * math.prod(dims) * 4
    body = len(payload) - header_end
    if body < expected:
        raise TruncatedFileError(f"{source}: header promises {expected} data bytes, file has {body}")
    if body > expected:
        raise FormatError(f"{source}: {body - expected} trailing bytes after the data")
    return np.frombuffer(payload, dtype="<f4", offset=header_end).reshape(count, *dims).astype(np.float32)


def write_knockoff_cache(path: Path, images: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_knockoff_cache(images))
    return path


def read_knockoff_cache(path: Path) -> np.ndarray:
    path = Path(path)
    return decode_knockoff_cache(path.read_bytes(), path.name)


def save_knockoff_model(path: Path, model: KnockoffModel) -> Path:
    return save_checkpoint(path, {
        "knockoff.mu": model.mu,
        "knockoff.sigma": model.sigma,
        "knockoff.s": model.s,
        "knockoff.ridge": np.array([model.ridge]),
    })


def load_knockoff_model(path: Path) -> KnockoffModel:
    sections = load_checkpoint(path)
    try:
        return KnockoffModel(mu=sections["knockoff.mu"], sigma=sections["knockoff.sigma"],
                             s=sections["knockoff.s"], ridge=float(sections["knockoff.ridge"][0]))
    except KeyError as exc:
        raise FormatError(f"{Path(path).name}: missing knockoff section {exc}") from None


# -- bias pairs -----------------------------------------------------------------

@dataclass(frozen=True)
class BiasPairModel:
    """Zero-mean Gaussian pair ``(b, b~)`` added after a linear map ``W`` (d_l x d_next).

    The joint covariance has diagonal blocks ``sigma_b`` and off-diagonal
    blocks ``sigma_b + W^T diag{s_l} W - diag{s_next}``.
    """

    transform: np.ndarray
    s_l: np.ndarray
    s_next: np.ndarray
    sigma_b: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.transform.shape[1])

    def joint_covariance(self) -> np.ndarray:
        w = self.transform
        cross = self.sigma_b + w.T @ (self.s_l[:, None] * w) - np.diag(self.s_next)
        return np.block([[self.sigma_b, cross], [cross, self.sigma_b]])

    def psd_margin(self) -> float:
        return float(np.linalg.eigvalsh(self.joint_covariance()).min())


def default_bias_pair_model(transform: np.ndarray, s_l: np.ndarray) -> BiasPairModel:
    """Feasible bias-pair covariance for ``W`` and input diagonal ``s_l``.

    With ``K = W^T diag{s_l} W`` the joint covariance is PSD iff
    ``diag{s_next} >= K`` and ``2 sigma_b + K - diag{s_next} >= 0``. This picks
    ``s_next = lambda_max(K)`` on every coordinate and ``sigma_b = c I`` with
    ``c`` the smallest power of ten covering ``(lambda_max - lambda_min) / 2``
    (at least 1e-3).
    """
    w = np.atleast_2d(np.asarray(transform, dtype=np.float64))
    s_l = np.asarray(s_l, dtype=np.float64)
    if s_l.shape != (w.shape[0],):
        raise KnockoffError(f"s_l has shape {s_l.shape}, transform expects ({w.shape[0]},)")
    if np.any(s_l < 0):
        raise KnockoffError("s_l must be non-negative")
    k = w.T @ (s_l[:, None] * w)
    values = np.linalg.eigvalsh((k + k.T) / 2.0)
    lam_min, lam_max = max(float(values.min()), 0.0), max(float(values.max()), 0.0)
    spread = (lam_max - lam_min) / 2.0
    c = 1e-3 if spread <= 1e-3 else 10.0 ** math.ceil(math.log10(spread))
    return BiasPairModel(
        transform=w,
        s_l=s_l,
        s_next=np.full(w.shape[1], lam_max),
        sigma_b=c * np.eye(w.shape[1]),
    )


def bias_pair_factor(model: BiasPairModel) -> np.ndarray:
    return _psd_factor(model.joint_covariance(), "bias-pair joint covariance")


def sample_bias_pair(model: BiasPairModel, rng: np.random.Generator, size: Optional[int] = None,
                     factor: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``(b, b~)``; with ``size`` both have a leading batch axis."""
    factor = bias_pair_factor(model) if factor is None else factor
    z = rng.standard_normal((1 if size is None else size, 2 * model.dim))
    draws = z @ factor.T
    b, b_tilde = draws[:, :model.dim], draws[:, model.dim:]
    if size is None:
        return b[0], b_tilde[0]
    return b, b_tilde


# -- diagnostics ----------------------------------------------------------------

def _moments(joint: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = joint.mean(axis=0)
    centered = joint - mean
    return mean, centered.T @ centered / max(joint.shape[0] - 1, 1)


def swap_moment_test(real: np.ndarray, knockoff: np.ndarray, subset: Sequence[int]) -> float:
    """Largest absolute entry difference between the mean and covariance of
    ``[real, knockoff]`` and of the arrangement with ``subset`` swapped."""
    real = np.asarray(real, dtype=np.float64)
    knockoff = np.asarray(knockoff, dtype=np.float64)
    if real.shape != knockoff.shape or real.ndim != 2:
        raise KnockoffError(f"swap test needs equal n x d matrices, got {real.shape} and {knockoff.shape}")
    subset = np.unique(np.asarray(list(subset), dtype=np.int64))
    if subset.size == 0:
        return 0.0
    swapped_real, swapped_knockoff = real.copy(), knockoff.copy()
    swapped_real[:, subset], swapped_knockoff[:, subset] = knockoff[:, subset], real[:, subset]
    mean_a, cov_a = _moments(np.hstack([real, knockoff]))
    mean_b, cov_b = _moments(np.hstack([swapped_real, swapped_knockoff]))
    return float(max(np.abs(mean_a - mean_b).max(), np.abs(cov_a - cov_b).max()))
