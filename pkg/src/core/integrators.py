import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from dataclasses_json import dataclass_json
from typing_extensions import Self

from .errors import InvalidParameterError
from .targets import Target
from ..utils.kernels import ou_conditional_variance, ou_e, ou_f, ou_g, ou_variance
from ..utils.settings import DEFAULT_GAMMA, NOISE_CHUNK
from ..utils.serialization import write_atomic

'''
Approach:

-> Every scheme is driven by the same noise: per step, two half-step blocks
   (dW, I_E) with I_E = int E(delta - s) dW over the half interval. The third
   functional I_F = int F(delta - s) dW never needs sampling because
   gamma * I_F = dW - I_E.
-> Half blocks combine exactly into coarser blocks (E(a+b) = E(a) E(b)), so a
   path sampled at the finest step drives every coarser step size in a
   strong-order test, and EE, UBU, BUB see identical Brownian paths.
-> Schemes (xi = (v, x), s = sqrt(2 gamma c)):

   EE   v1 = E(h) v - F(h) c g(x) + s I_E(h)
        x1 = x + F(h) v - G(h) c g(x) + s I_F(h)

   UBU  y  = x + F(h/2) v + s I_F(first half)
        v1 = E(h) v - h E(h/2) c g(y) + s I_E(h)
        x1 = x + F(h) v - h F(h/2) c g(y) + s I_F(h)

   BUB  half kick, exact OU flow over h, half kick (last gradient reused next step)

   EM   x1 = x - h c g(x) + sqrt(2c) dW   (overdamped)

Example:

    gamma = 2, h = 1, c = 1, quadratic f = 0.5 H x^2 with H = 1, no noise
    E(1) = e^-2 = 0.1353, F(1) = (1 - e^-2)/2 = 0.4323, G(1) = (1 + e^-2)/4 = 0.2838

    EE from (v, x) = (0, 1):
        v1 = -F c H x       = -0.4323
        x1 = (1 - c G H) x  =  0.7162
    which is the second column of [[E, -cFH], [F, 1 - cGH]], the propagator the
    contractivity module analyses.
'''

logger = logging.getLogger(__name__)

SCHEMES = ("EM", "EE", "UBU", "BUB")
KINETIC = ("EE", "UBU", "BUB")


@dataclass(frozen=True)
class SchemeStep:
    scheme: str
    h: float
    c: float
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        object.__setattr__(self, "scheme", self.scheme.upper())
        if self.scheme not in SCHEMES:
            raise InvalidParameterError(f"Unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.h > 0:
            raise InvalidParameterError(f"Step size must be positive, got {self.h}")
        if not self.c >= 0:
            raise InvalidParameterError(f"Force scale must be nonnegative, got {self.c}")
        if not self.gamma > 0:
            raise InvalidParameterError(f"Friction must be positive, got {self.gamma}")

    @property
    def N(self) -> int:
        return 1 if self.scheme == "EM" else 2

    @property
    def kinetic(self) -> bool:
        return self.scheme in KINETIC

    @property
    def noise_scale(self) -> float:
        if self.kinetic:
            return math.sqrt(2.0 * self.gamma * self.c)
        return math.sqrt(2.0 * self.c)

    def with_step(self, h: float) -> Self:
        return replace(self, h=h)

    # kernels
    @cached_property
    def e_h(self) -> float:
        return ou_e(self.gamma, self.h)

    @cached_property
    def f_h(self) -> float:
        return ou_f(self.gamma, self.h)

    @cached_property
    def g_h(self) -> float:
        return ou_g(self.gamma, self.h)

    @cached_property
    def e_half(self) -> float:
        return ou_e(self.gamma, 0.5 * self.h)

    @cached_property
    def f_half(self) -> float:
        return ou_f(self.gamma, 0.5 * self.h)

    def hat_matrices(self) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(A_h, B_h, C_h) of the one-gradient form xi' = A_h xi + B_h g(C_h xi) + noise.

        BUB evaluates its force at two points per step, so it has no such triple;
        use propagator() for it.
        """
        h, c = self.h, self.c
        if self.scheme == "EM":
            return np.array([[1.0]]), np.array([[-h * c]]), np.array([[1.0]])
        transport = np.array([[self.e_h, 0.0], [self.f_h, 1.0]])
        if self.scheme == "EE":
            return transport, np.array([[-c * self.f_h], [-c * self.g_h]]), np.array([[0.0, 1.0]])
        if self.scheme == "UBU":
            return (transport,
                    np.array([[-h * self.e_half * c], [-h * self.f_half * c]]),
                    np.array([[self.f_half, 1.0]]))
        return None

    def propagator(self, H: Union[float, np.ndarray]) -> np.ndarray:
        """M_h(H) for scalar H -> (N, N), or for an array of H -> (len(H), N, N)."""
        H_arr = np.atleast_1d(np.asarray(H, dtype=float))
        triple = self.hat_matrices()
        if triple is not None:
            A_h, B_h, C_h = triple
            M = A_h[None, :, :] + H_arr[:, None, None] * (B_h @ C_h)[None, :, :]
        else:
            kick = np.zeros((H_arr.size, 2, 2))
            kick[:, 0, 0] = 1.0
            kick[:, 1, 1] = 1.0
            kick[:, 0, 1] = -0.5 * self.h * self.c * H_arr
            transport = np.array([[self.e_h, 0.0], [self.f_h, 1.0]])
            M = kick @ transport @ kick
        return M[0] if np.ndim(H) == 0 else M


@dataclass(frozen=True)
class NoiseBlock:
    """(dW, I_E) over one half interval of length delta, per dimension."""
    gamma: float
    delta: float
    dW: np.ndarray
    i_e: np.ndarray

    @property
    def i_f(self) -> np.ndarray:
        return (self.dW - self.i_e) / self.gamma


def noise_covariance(gamma: float, delta: float) -> np.ndarray:
    """Covariance of (dW, I_E): [[delta, F(delta)], [F(delta), (1 - e^{-2 gamma delta}) / (2 gamma)]]."""
    cov = ou_f(gamma, delta)
    return np.array([[delta, cov], [cov, ou_variance(gamma, delta)]])


def _noise_from_normals(gamma: float, delta: float, z1: np.ndarray, z2: np.ndarray) -> NoiseBlock:
    root = math.sqrt(delta)
    l21 = ou_f(gamma, delta) / root
    l22 = math.sqrt(ou_conditional_variance(gamma, delta))
    return NoiseBlock(gamma=gamma, delta=delta, dW=root * z1, i_e=l21 * z1 + l22 * z2)


def sample_noise_block(gamma: float, delta: float, d: int, rng: np.random.Generator,
                       size: Tuple[int, ...] = ()) -> NoiseBlock:
    if not delta > 0:
        raise InvalidParameterError(f"Noise interval must be positive, got {delta}")
    z = rng.standard_normal((2,) + tuple(size) + (d,))
    return _noise_from_normals(gamma, delta, z[0], z[1])


def _aggregate_arrays(gamma: float, delta: float, dW: np.ndarray, i_e: np.ndarray):
    """Combine k consecutive blocks stacked on axis -2 (shape (..., k, d))."""
    k = dW.shape[-2]
    weights = ou_e(gamma, delta * np.arange(k - 1, -1, -1, dtype=float))
    return dW.sum(axis=-2), np.einsum("...kd,k->...d", i_e, np.atleast_1d(weights))


def aggregate_noise(blocks: Sequence[NoiseBlock]) -> NoiseBlock:
    """Exact coarse block over the union of contiguous, equal-length fine blocks."""
    if not blocks:
        raise InvalidParameterError("Need at least one block to aggregate")
    gamma, delta = blocks[0].gamma, blocks[0].delta
    if any(b.gamma != gamma or not math.isclose(b.delta, delta, rel_tol=1e-12) for b in blocks):
        raise InvalidParameterError("Blocks must share gamma and interval length")
    if len(blocks) == 1:
        return blocks[0]
    dW = np.stack([b.dW for b in blocks], axis=-2)
    i_e = np.stack([b.i_e for b in blocks], axis=-2)
    dW, i_e = _aggregate_arrays(gamma, delta, dW, i_e)
    return NoiseBlock(gamma=gamma, delta=len(blocks) * delta, dW=dW, i_e=i_e)


@dataclass(frozen=True)
class ChainState:
    x: np.ndarray
    v: Optional[np.ndarray] = None
    n: int = 0
    grad: Optional[np.ndarray] = field(default=None, repr=False)  # BUB: gradient at x

    def as_vector(self) -> np.ndarray:
        if self.v is None:
            return np.asarray(self.x)
        return np.concatenate([self.v, self.x], axis=-1)


def _check_state(scheme: SchemeStep, target: Target, state: ChainState):
    if np.shape(state.x)[-1] != target.dimension:
        raise InvalidParameterError(
            f"State dimension {np.shape(state.x)[-1]} does not match target dimension {target.dimension}")
    if scheme.kinetic and (state.v is None or np.shape(state.v) != np.shape(state.x)):
        raise InvalidParameterError(f"{scheme.scheme} needs a velocity of the same shape as x")


def _zero_noise(scheme: SchemeStep, shape) -> Tuple[NoiseBlock, NoiseBlock]:
    zeros = np.zeros(shape)
    block = NoiseBlock(scheme.gamma, 0.5 * scheme.h, zeros, zeros)
    return block, block


def ou_flow(v: np.ndarray, x: np.ndarray, scheme: SchemeStep, delta: float,
            block: Optional[NoiseBlock]) -> Tuple[np.ndarray, np.ndarray]:
    """U: exact friction-plus-noise flow in v with transport in x over time delta."""
    v_new = ou_e(scheme.gamma, delta) * v
    x_new = x + ou_f(scheme.gamma, delta) * v
    if block is not None:
        s = scheme.noise_scale
        v_new = v_new + s * block.i_e
        x_new = x_new + s * block.i_f
    return v_new, x_new


def kick(v: np.ndarray, grad: np.ndarray, scheme: SchemeStep, tau: float) -> np.ndarray:
    """B: velocity update by the force over time tau."""
    return v - tau * scheme.c * grad


def step(scheme: SchemeStep, target: Target, state: ChainState,
         noise: Optional[Tuple[NoiseBlock, NoiseBlock]] = None) -> ChainState:
    _check_state(scheme, target, state)
    if noise is None:
        noise = _zero_noise(scheme, np.shape(state.x))
    first, second = noise
    if np.shape(first.dW)[-1] != target.dimension or np.shape(second.dW)[-1] != target.dimension:
        raise InvalidParameterError("Noise dimension does not match target dimension")

    h, c, s = scheme.h, scheme.c, scheme.noise_scale
    x = np.asarray(state.x, dtype=float)

    if scheme.scheme == "EM":
        x_new = x - h * c * target.gradient(x) + s * (first.dW + second.dW)
        return ChainState(x=x_new, n=state.n + 1)

    v = np.asarray(state.v, dtype=float)

    if scheme.scheme == "BUB":
        full = aggregate_noise([first, second])
        grad = state.grad if state.grad is not None else target.gradient(x)
        v_mid, x_new = ou_flow(kick(v, grad, scheme, 0.5 * h), x, scheme, h, full)
        grad_new = target.gradient(x_new)
        return ChainState(x=x_new, v=kick(v_mid, grad_new, scheme, 0.5 * h), n=state.n + 1, grad=grad_new)

    dW = first.dW + second.dW
    i_e = scheme.e_half * first.i_e + second.i_e
    i_f = (dW - i_e) / scheme.gamma

    if scheme.scheme == "EE":
        g = target.gradient(x)
        v_new = scheme.e_h * v - scheme.f_h * c * g + s * i_e
        x_new = x + scheme.f_h * v - scheme.g_h * c * g + s * i_f
    else:
        y = x + scheme.f_half * v + s * first.i_f
        g = target.gradient(y)
        v_new = scheme.e_h * v - h * scheme.e_half * c * g + s * i_e
        x_new = x + scheme.f_h * v - h * scheme.f_half * c * g + s * i_f
    return ChainState(x=x_new, v=v_new, n=state.n + 1)


def coupled_step(scheme: SchemeStep, target: Target, state1: ChainState, state2: ChainState,
                 noise: Optional[Tuple[NoiseBlock, NoiseBlock]] = None) -> Tuple[ChainState, ChainState]:
    if np.shape(state1.x) != np.shape(state2.x):
        raise InvalidParameterError("Coupled states must have the same shape")
    return step(scheme, target, state1, noise), step(scheme, target, state2, noise)


class ChainStreams:
    """One counter-based (Philox) generator per chain, keyed by (seed, chain id)."""

    def __init__(self, seed: int, n_chains: int):
        if n_chains < 1:
            raise InvalidParameterError("Need at least one chain")
        self.seed = int(seed)
        self.noise = []
        self.init = []
        for chain in range(n_chains):
            noise_seq, init_seq = np.random.SeedSequence(self.seed, spawn_key=(chain,)).spawn(2)
            self.noise.append(np.random.Generator(np.random.Philox(noise_seq)))
            self.init.append(np.random.Generator(np.random.Philox(init_seq)))

    def __len__(self) -> int:
        return len(self.noise)

    def normals(self, shape: Tuple[int, ...]) -> np.ndarray:
        return np.stack([rng.standard_normal(shape) for rng in self.noise])


def _step_noise(scheme: SchemeStep, z: np.ndarray) -> Tuple[NoiseBlock, NoiseBlock]:
    """z has shape (..., 2 halves, 2 normals, d)."""
    delta = 0.5 * scheme.h
    return (_noise_from_normals(scheme.gamma, delta, z[..., 0, 0, :], z[..., 0, 1, :]),
            _noise_from_normals(scheme.gamma, delta, z[..., 1, 0, :], z[..., 1, 1, :]))


@dataclass(frozen=True)
class Ensemble:
    final: ChainState
    trajectory: List[ChainState] = field(default_factory=list)


InitialSampler = Callable[[np.random.Generator], ChainState]


def _initial_ensemble(scheme: SchemeStep, target: Target, initial: Union[ChainState, InitialSampler],
                      streams: ChainStreams) -> ChainState:
    n_chains, d = len(streams), target.dimension
    if callable(initial):
        states = [initial(rng) for rng in streams.init]
        x = np.stack([np.asarray(s.x, dtype=float) for s in states])
        v = np.stack([np.asarray(s.v, dtype=float) for s in states]) if scheme.kinetic else None
    else:
        x = np.broadcast_to(np.asarray(initial.x, dtype=float), (n_chains, d)).copy()
        v = (np.broadcast_to(np.asarray(initial.v, dtype=float), (n_chains, d)).copy()
             if scheme.kinetic else None)
    state = ChainState(x=x, v=v)
    _check_state(scheme, target, state)
    return state


def simulate(scheme: SchemeStep, target: Target, initial: Union[ChainState, InitialSampler],
             n_steps: int, n_chains: int, seed: int, thin: int = 0) -> Ensemble:
    if n_steps < 0:
        raise InvalidParameterError("Number of steps must be nonnegative")
    streams = ChainStreams(seed, n_chains)
    state = _initial_ensemble(scheme, target, initial, streams)
    trajectory = [state] if thin > 0 else []

    done = 0
    while done < n_steps:
        chunk = min(NOISE_CHUNK, n_steps - done)
        z = streams.normals((chunk, 2, 2, target.dimension))
        for j in range(chunk):
            state = step(scheme, target, state, _step_noise(scheme, z[:, j]))
            if thin > 0 and state.n % thin == 0:
                trajectory.append(state)
        done += chunk

    logger.debug("simulation finished", extra={"scheme": scheme.scheme, "h": scheme.h,
                                                 "steps": n_steps, "chains": n_chains})
    return Ensemble(final=state, trajectory=trajectory)


def ensemble_csv(state: ChainState) -> str:
    x = np.atleast_2d(state.x)
    d = x.shape[1]
    header = ["chain"]
    if state.v is not None:
        header += [f"v{i}" for i in range(d)]
    header += [f"x{i}" for i in range(d)]

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    rows = np.atleast_2d(state.as_vector())
    for chain, row in enumerate(rows):
        writer.writerow([chain] + [repr(float(value)) for value in row])
    return buffer.getvalue()


def write_ensemble_csv(state: ChainState, file_path: Union[str, Path]) -> Path:
    return write_atomic(file_path, ensemble_csv(state))


@dataclass_json
@dataclass(frozen=True)
class OrderReport:
    scheme: str
    steps: List[float]
    errors: List[float]
    slope: float
    reference_step: float
    n_paths: int
    horizon: float


def _check_nested(hs: Sequence[float], horizon: float) -> List[float]:
    hs = sorted((float(h) for h in hs), reverse=True)
    if len(hs) < 2:
        raise InvalidParameterError("Need at least two step sizes")
    for coarse, fine in zip(hs, hs[1:]):
        if not math.isclose(coarse / fine, 2.0, rel_tol=1e-12):
            raise InvalidParameterError(f"Step sizes must be nested by factors of 2, got {coarse} and {fine}")
    for h in hs:
        if not math.isclose(horizon / h, round(horizon / h), rel_tol=0.0, abs_tol=1e-9):
            raise InvalidParameterError(f"Horizon {horizon} is not a multiple of step {h}")
    return hs


def strong_order_test(scheme: SchemeStep, target: Target, hs: Sequence[float], n_paths: int,
                      horizon: float, seed: int, initial: Optional[ChainState] = None,
                      reference_refinement: int = 8) -> OrderReport:
    """RMS endpoint error against a reference on the same Brownian paths.

    The reference runs at min(hs) / reference_refinement; with refinement 1 the
    finest listed step is the reference and is left out of the fit. The default
    of 8 keeps the reference error out of the fitted slope: with the finest
    listed step as reference, the last error is understated and an order-one
    scheme over four levels fits a slope near 1.45.
    """
    hs = _check_nested(hs, horizon)
    if reference_refinement < 1 or reference_refinement & (reference_refinement - 1):
        raise InvalidParameterError("Reference refinement must be a power of two")
    h_ref = hs[-1] / reference_refinement
    levels = hs if reference_refinement > 1 else hs[:-1]
    if len(levels) < 2:
        raise InvalidParameterError("Need at least two levels besides the reference")

    d = target.dimension
    delta_ref = 0.5 * h_ref
    n_fine = int(round(horizon / delta_ref))
    z = ChainStreams(seed, n_paths).normals((n_fine, 2, d))
    fine = _noise_from_normals(scheme.gamma, delta_ref, z[:, :, 0, :], z[:, :, 1, :])

    if initial is None:
        initial = ChainState(x=np.ones(d), v=np.zeros(d) if scheme.kinetic else None)

    def endpoint(h: float) -> np.ndarray:
        level = scheme.with_step(h)
        k = int(round(h / h_ref))
        n_half = n_fine // k
        dW, i_e = _aggregate_arrays(scheme.gamma, delta_ref,
                                    fine.dW.reshape(n_paths, n_half, k, d),
                                    fine.i_e.reshape(n_paths, n_half, k, d))
        state = ChainState(
            x=np.broadcast_to(np.asarray(initial.x, dtype=float), (n_paths, d)).copy(),
            v=(np.broadcast_to(np.asarray(initial.v, dtype=float), (n_paths, d)).copy()
               if level.kinetic else None))
        for n in range(n_half // 2):
            blocks = (NoiseBlock(level.gamma, 0.5 * h, dW[:, 2 * n], i_e[:, 2 * n]),
                      NoiseBlock(level.gamma, 0.5 * h, dW[:, 2 * n + 1], i_e[:, 2 * n + 1]))
            state = step(level, target, state, blocks)
        return state.as_vector()

    reference = endpoint(h_ref)
    errors = [float(np.sqrt(np.mean(np.sum((endpoint(h) - reference) ** 2, axis=-1)))) for h in levels]
    slope = float(np.polyfit(np.log(levels), np.log(errors), 1)[0])
    logger.info("strong order", extra={"scheme": scheme.scheme, "slope": slope, "errors": errors})
    return OrderReport(scheme=scheme.scheme, steps=list(levels), errors=errors, slope=slope,
                       reference_step=h_ref, n_paths=n_paths, horizon=horizon)


def _p_norm(P: np.ndarray, delta: ChainState) -> float:
    if delta.v is None:
        return float(np.sqrt(P[0, 0] * np.sum(delta.x ** 2)))
    vv = np.sum(delta.v ** 2)
    vx = np.sum(delta.v * delta.x)
    xx = np.sum(delta.x ** 2)
    return float(np.sqrt(P[0, 0] * vv + 2.0 * P[0, 1] * vx + P[1, 1] * xx))


def coupled_contraction_trace(scheme: SchemeStep, target: Target, P: np.ndarray,
                              n_steps: int, seed: int) -> np.ndarray:
    """Per-step ratios |xi2' - xi1'|_P / |xi2 - xi1|_P of a synchronously coupled pair.

    The gap is rescaled to unit P-norm after every step so that it never drifts
    into the rounding level of the states.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape != (scheme.N, scheme.N):
        raise InvalidParameterError("Metric size does not match the scheme")
    d = target.dimension
    streams = ChainStreams(seed, 1)
    rng = streams.init[0]

    def unit_gap() -> ChainState:
        gap = ChainState(x=rng.standard_normal(d), v=rng.standard_normal(d) if scheme.kinetic else None)
        return _scaled(gap, 1.0 / _p_norm(P, gap))

    first = ChainState(x=rng.standard_normal(d), v=rng.standard_normal(d) if scheme.kinetic else None)
    second = _shifted(first, unit_gap())

    ratios = np.empty(n_steps)
    done = 0
    while done < n_steps:
        chunk = min(NOISE_CHUNK, n_steps - done)
        z = streams.normals((chunk, 2, 2, d))[0]
        for j in range(chunk):
            first, second = coupled_step(scheme, target, first, second, _step_noise(scheme, z[j]))
            gap = _difference(second, first)
            ratio = _p_norm(P, gap)
            ratios[done + j] = ratio
            second = _shifted(first, _scaled(gap, 1.0 / ratio))
        done += chunk
    return ratios


def _difference(a: ChainState, b: ChainState) -> ChainState:
    return ChainState(x=a.x - b.x, v=None if a.v is None else a.v - b.v)


def _scaled(a: ChainState, factor: float) -> ChainState:
    return ChainState(x=factor * a.x, v=None if a.v is None else factor * a.v)


def _shifted(base: ChainState, gap: ChainState) -> ChainState:
    return ChainState(x=base.x + gap.x, v=None if base.v is None else base.v + gap.v, n=base.n)
