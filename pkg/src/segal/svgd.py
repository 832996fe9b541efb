"""Joint committee training by Stein variational gradient descent.

A committee of M parameter vectors ("particles") is updated in lock
step.  Each particle moves along

    phi_k = (1/M) * sum_j [ K(x_j, x_k) * grad_logp_j
                            + (2/h) * (x_k - x_j) * K(x_j, x_k) ]

with an RBF kernel K(a, b) = exp(-||a - b||^2 / h).  The second term is
the repulsion keeping particles apart; with a single particle the rule
degenerates to plain gradient ascent, exactly.

The independent-ensemble baseline runs the identical loop with the
kernel forced to the identity and the repulsion zeroed, i.e.
phi_k = grad_logp_k / M.  This isolates the particle coupling: same
initialization, same batches, same step sizes, no interaction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import ConfigError, NumericalError
from .model import Architecture, loglik_and_gradient, model_init
from .tensor_io import load_tensor, save_tensor

MIN_BANDWIDTH = 1e-8

TRAINER_MODES = ("svgd", "independent-ensemble")


@dataclass
class ParticleSet:
    """M flat parameter vectors optimized jointly."""

    particles: np.ndarray  # [M, P] float64
    step_size: float
    bandwidth: float | None = None  # None -> median heuristic each step
    arch: Architecture | None = None  # set when particles parameterize SegModels

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def n_params(self) -> int:
        return self.particles.shape[1]


def rbf_kernel(theta_a: np.ndarray, theta_b: np.ndarray, h: float) -> float:
    """exp(-||a - b||^2 / h), in (0, 1]."""
    if h <= 0:
        raise ConfigError(f"kernel bandwidth must be positive, got {h}")
    a = np.asarray(theta_a, dtype=np.float64)
    b = np.asarray(theta_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"vector shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.exp(-(d @ d) / h))


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    # Direct differences keep the matrix exactly symmetric with zero diagonal.
    d = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_matrix(particles: np.ndarray, h: float) -> np.ndarray:
    """Symmetric [M, M] RBF kernel matrix with unit diagonal."""
    if h <= 0:
        raise ConfigError(f"kernel bandwidth must be positive, got {h}")
    return np.exp(-_pairwise_sq_dists(particles) / h)


def median_bandwidth(particles: np.ndarray) -> float:
    """h = median pairwise squared distance / ln(M+1), clamped to >= 1e-8.

    With fewer than two particles there are no pairwise distances and
    the fallback is 1.0.
    """
    m = particles.shape[0]
    if m < 2:
        return 1.0
    d2 = _pairwise_sq_dists(particles)
    iu = np.triu_indices(m, k=1)
    med = float(np.median(d2[iu]))
    return max(med / np.log(m + 1.0), MIN_BANDWIDTH)


def svgd_direction(
    particles: np.ndarray,
    grad_logp: np.ndarray,
    *,
    bandwidth: float | None = None,
    coupled: bool = True,
) -> np.ndarray:
    """Update direction phi for every particle, [M, P].

    ``coupled=False`` is the independent-ensemble baseline (identity
    kernel, no repulsion).
    """
    m = particles.shape[0]
    if not coupled:
        return grad_logp / m
    h = median_bandwidth(particles) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ConfigError(f"kernel bandwidth must be positive, got {h}")
    k = np.exp(-_pairwise_sq_dists(particles) / h)
    drive = k @ grad_logp
    repulsion = (2.0 / h) * (particles * k.sum(axis=1, keepdims=True) - k @ particles)
    return (drive + repulsion) / m


def svgd_step(
    particles: ParticleSet,
    loglik_grads: np.ndarray,
    prior_grads: np.ndarray | None = None,
) -> ParticleSet:
    """One joint update; returns a new ParticleSet, inputs untouched."""
    grads = np.asarray(loglik_grads, dtype=np.float64)
    if grads.shape != particles.particles.shape:
        raise ConfigError(
            f"gradient shape {grads.shape} != particle shape {particles.particles.shape}"
        )
    if prior_grads is not None:
        grads = grads + prior_grads
    finite = np.isfinite(grads).all(axis=1)
    if not finite.all():
        raise NumericalError(f"non-finite gradient for particle {int(np.argmin(finite))}")
    phi = svgd_direction(particles.particles, grads, bandwidth=particles.bandwidth)
    new = particles.particles + particles.step_size * phi
    finite = np.isfinite(new).all(axis=1)
    if not finite.all():
        raise NumericalError(f"non-finite parameters for particle {int(np.argmin(finite))}")
    return ParticleSet(
        particles=new,
        step_size=particles.step_size,
        bandwidth=particles.bandwidth,
        arch=particles.arch,
    )


def run_svgd(
    particles: np.ndarray,
    grad_logp_fn,
    *,
    steps: int,
    step_size: float,
    bandwidth: float | None = None,
    mode: str = "svgd",
) -> np.ndarray:
    """Generic driver: repeatedly move ``particles`` along the update direction.

    ``grad_logp_fn(particles) -> [M, P]`` may be stochastic (e.g. draw a
    minibatch per call); it is invoked exactly once per step.
    """
    if mode not in TRAINER_MODES:
        raise ConfigError(f"unknown trainer mode {mode!r}, expected one of {TRAINER_MODES}")
    x = np.array(particles, dtype=np.float64)
    coupled = mode == "svgd"
    for _ in range(steps):
        g = grad_logp_fn(x)
        finite = np.isfinite(g).all(axis=1)
        if not finite.all():
            raise NumericalError(f"non-finite gradient for particle {int(np.argmin(finite))}")
        x = x + step_size * svgd_direction(x, g, bandwidth=bandwidth, coupled=coupled)
        if not np.all(np.isfinite(x)):
            raise NumericalError("particles diverged to non-finite values")
    return x


# --------------------------------------------------------------------- #
# Segmentation committee training
# --------------------------------------------------------------------- #


@dataclass
class TrainerConfig:
    """Knobs for one from-scratch committee training."""

    arch: Architecture = field(default_factory=Architecture)
    n_particles: int = 5
    steps: int = 300
    batch_size: int = 8
    step_size: float = 0.05
    mode: str = "svgd"
    bandwidth: float | None = None
    prior_std: float | None = None  # None -> improper uniform prior
    include_background: bool = False

    def validate(self) -> None:
        self.arch.validate()
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.steps < 0 or self.batch_size < 1 or self.step_size <= 0:
            raise ConfigError("steps must be >= 0, batch_size >= 1, step_size > 0")
        if self.mode not in TRAINER_MODES:
            raise ConfigError(f"unknown trainer mode {self.mode!r}")
        if self.prior_std is not None and self.prior_std <= 0:
            raise ConfigError("prior_std must be positive when set")


def train_particles(
    images: np.ndarray,
    masks: np.ndarray,
    config: TrainerConfig,
    seed: int,
) -> ParticleSet:
    """Train M fresh particles for exactly ``config.steps`` steps.

    ``images``/``masks`` are the training pool with duplicates already
    expanded, so a duplicated item is simply sampled more often.  Batches
    are drawn uniformly with replacement from one stream shared by all
    particles; particle i is initialized from ``seed + i``.  The
    per-batch gradient is averaged over the batch so the step size does
    not depend on batch size.
    """
    config.validate()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigError("training pool must be a nonempty [N, C, H, W] array")
    n = images.shape[0]
    particles = np.stack(
        [model_init(config.arch, seed + i).params for i in range(config.n_particles)]
    )
    batches = rng.stream(seed, rng.TRAINING)

    def grad_fn(current: np.ndarray) -> np.ndarray:
        idx = batches.integers(0, n, size=config.batch_size)
        bx, bm = images[idx], masks[idx]
        g = np.empty_like(current)
        for i in range(current.shape[0]):
            _, gi = loglik_and_gradient(
                SegModelView(current[i], config.arch),
                bx,
                bm,
                include_background=config.include_background,
            )
            g[i] = gi / config.batch_size
        if config.prior_std is not None:
            g += -current / (config.prior_std * config.prior_std)
        return g

    trained = run_svgd(
        particles,
        grad_fn,
        steps=config.steps,
        step_size=config.step_size,
        bandwidth=config.bandwidth,
        mode=config.mode,
    )
    return ParticleSet(
        particles=trained,
        step_size=config.step_size,
        bandwidth=config.bandwidth,
        arch=config.arch,
    )


# Thin view avoiding a params copy per gradient call.
class SegModelView:
    __slots__ = ("params", "arch")

    def __init__(self, params: np.ndarray, arch: Architecture):
        self.params = params
        self.arch = arch


# --------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------- #


def save_particles(directory: str | Path, pset: ParticleSet, *, steps: int = 0) -> None:
    """One TSR1 file per particle plus a manifest (float32 storage, lossy)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pset.particles):
        save_tensor(directory / f"particle_{i:03d}.tsr", p)
    manifest = {
        "n_particles": pset.n_particles,
        "n_params": pset.n_params,
        "step_size": pset.step_size,
        "bandwidth": pset.bandwidth,
        "steps": steps,
        "arch": None
        if pset.arch is None
        else {
            "num_classes": pset.arch.num_classes,
            "in_channels": pset.arch.in_channels,
            "hidden_channels": pset.arch.hidden_channels,
            "kernel_size": pset.arch.kernel_size,
            "encoder_decoder": pset.arch.encoder_decoder,
        },
    }
    (directory / "particles.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_particles(directory: str | Path) -> ParticleSet:
    directory = Path(directory)
    manifest = json.loads((directory / "particles.json").read_text())
    particles = np.stack(
        [
            load_tensor(directory / f"particle_{i:03d}.tsr").astype(np.float64)
            for i in range(manifest["n_particles"])
        ]
    )
    arch = Architecture(**manifest["arch"]) if manifest["arch"] else None
    return ParticleSet(
        particles=particles,
        step_size=manifest["step_size"],
        bandwidth=manifest["bandwidth"],
        arch=arch,
    )
