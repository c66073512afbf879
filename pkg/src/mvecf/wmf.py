"""Weighted matrix factorization trained by alternating least squares.

The solver works on a :class:`RatingTarget`, which yields ``(target,
confidence)`` rows for a block of users on demand. Plain WMF and the
mean-variance restructured model differ only in the target they pass in.

Objective::

    sum_{u,i} c_ui (t_ui - p_u . q_i)^2 + lambda (|P|^2 + |Q|^2)

Model dump format (little-endian)::

    b"MVFM"  magic
    uint32   format version (1)
    uint64   m, n, l
    float64  P (m*l, row-major), then Q (n*l, row-major)
"""
from __future__ import annotations

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, SingularityError
from .holdings_data import InteractionMatrix

logger = logging.getLogger(__name__)

BLOCK_SIZE = 128
MODEL_MAGIC = b"MVFM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    l: int = 30
    lambda_reg: float = 0.001
    c_pos: float = 10.0
    c_neg: float = 1.0
    lambda_mv: float = 0.0
    gamma: float = 3.0
    alpha: float = 0.001
    max_iters: int = 20
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if int(self.l) < 1:
            raise ConfigError("latent dimension l must be >= 1")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be nonnegative")
        if not self.c_pos > self.c_neg > 0:
            raise ConfigError("confidences must satisfy c_pos > c_neg > 0")
        if self.lambda_mv < 0:
            raise ConfigError("lambda_mv must be nonnegative")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if int(self.max_iters) < 0:
            raise ConfigError("max_iters must be nonnegative")
        if self.tol < 0:
            raise ConfigError("tol must be nonnegative")

    def replace(self, **changes) -> "Hyperparams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


class FactorModel:
    """User embeddings ``P`` (m x l) and item embeddings ``Q`` (n x l)."""

    def __init__(self, P, Q):
        P = np.array(P, dtype=float, ndmin=2)
        Q = np.array(Q, dtype=float, ndmin=2)
        if P.shape[1] != Q.shape[1]:
            raise DataError(f"latent dimensions differ: {P.shape[1]} vs {Q.shape[1]}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Q))):
            raise DataError("factor matrices contain non-finite values")
        self.P = P
        self.Q = Q

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def l(self) -> int:
        return self.P.shape[1]

    def predict(self, u: int) -> np.ndarray:
        if not 0 <= u < self.m:
            raise IndexError(f"user index {u} out of range [0, {self.m})")
        return self.Q @ self.P[u]

    def scores(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        return self.P[lo:hi] @ self.Q.T

    def copy(self) -> "FactorModel":
        return FactorModel(self.P.copy(), self.Q.copy())

    def __eq__(self, other):
        if not isinstance(other, FactorModel):
            return NotImplemented
        return np.array_equal(self.P, other.P) and np.array_equal(self.Q, other.Q)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<IQQQ", MODEL_VERSION, self.m, self.n, self.l))
            fh.write(np.ascontiguousarray(self.P, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.Q, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FactorModel":
        raw = Path(path).read_bytes()
        header = struct.calcsize("<IQQQ")
        if raw[:4] != MODEL_MAGIC:
            raise DataError(f"{path} is not a factor model dump")
        version, m, n, l = struct.unpack("<IQQQ", raw[4:4 + header])
        if version != MODEL_VERSION:
            raise DataError(f"unsupported model format version {version}")
        body = np.frombuffer(raw[4 + header:], dtype="<f8")
        if body.size != (m + n) * l:
            raise DataError(f"{path} is truncated")
        return cls(body[:m * l].reshape(m, l).copy(), body[m * l:].reshape(n, l).copy())


def predict(model: FactorModel, u: int) -> np.ndarray:
    return model.predict(u)


def init_model(m: int, n: int, l: int, seed: int) -> FactorModel:
    """Normal entries with standard deviation ``0.1 / sqrt(l)``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = 0.1 / np.sqrt(l)
    return FactorModel(scale * rng.standard_normal((m, l)), scale * rng.standard_normal((n, l)))


class RatingTarget:
    """Per-pair ``(target, confidence)`` values, produced a block of users at a time."""

    m: int
    n: int

    def block(self, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def blocks(self, block_size: int = BLOCK_SIZE):
        for lo in range(0, self.m, block_size):
            yield lo, min(lo + block_size, self.m)


class DenseTarget(RatingTarget):
    def __init__(self, target, confidence):
        self.target = np.asarray(target, dtype=float)
        self.confidence = np.broadcast_to(np.asarray(confidence, dtype=float), self.target.shape)
        if not np.all(np.isfinite(self.target)):
            raise DataError("targets must be finite")
        if np.any(self.confidence <= 0):
            raise DataError("confidence must be positive")
        self.m, self.n = self.target.shape

    def block(self, lo, hi):
        return self.target[lo:hi], self.confidence[lo:hi]


class HoldingsTarget(RatingTarget):
    """Binary holdings with ``c_pos`` on held pairs and ``c_neg`` elsewhere."""

    def __init__(self, train: InteractionMatrix, c_pos: float, c_neg: float):
        self.train = train
        self.c_pos = float(c_pos)
        self.c_neg = float(c_neg)
        self.m, self.n = train.shape

    def block(self, lo, hi):
        y = self.train.dense_rows(lo, hi)
        return y, np.where(y > 0, self.c_pos, self.c_neg)


def wmf_targets(train: InteractionMatrix, hyper: Hyperparams) -> HoldingsTarget:
    return HoldingsTarget(train, hyper.c_pos, hyper.c_neg)


@dataclass
class LossTrace:
    """Losses recorded while fitting.

    ``steps`` has one entry per ALS half-step (or per gradient epoch);
    ``epochs`` holds ``(epoch, train_loss, val_loss)`` rows, one per full
    sweep, with ``val_loss`` None when no validation data was given.
    """

    initial: float = float("nan")
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    converged: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, train, val in self.epochs:
                writer.writerow([epoch, repr(float(train)), "" if val is None else repr(float(val))])


def validation_loss(model: FactorModel, validation: InteractionMatrix, c_pos: float) -> float:
    """``sum c_pos (1 - yhat)^2`` over held-out positive pairs.

    Regularization and mean-variance terms are left out: neither decomposes
    over individual pairs.
    """
    coo = validation.matrix.tocoo()
    if coo.nnz == 0:
        return 0.0
    yhat = np.einsum("ij,ij->i", model.P[coo.row], model.Q[coo.col])
    return float(c_pos * np.sum((1.0 - yhat) ** 2))


def _map_blocks(fn, spans, threads):
    if threads <= 1:
        return [fn(span) for span in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, spans))


def objective(model: FactorModel, targets: RatingTarget, lambda_reg: float, threads: int = 1) -> float:
    spans = list(targets.blocks())

    def part(span):
        lo, hi = span
        t, c = targets.block(lo, hi)
        r = t - model.P[lo:hi] @ model.Q.T
        return float(np.sum(c * r * r))

    fit = sum(_map_blocks(part, spans, threads))
    return fit + lambda_reg * (float(np.sum(model.P ** 2)) + float(np.sum(model.Q ** 2)))


def _solve(A, b):
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"normal equations are singular: {exc}") from None


def _user_step(model, targets, lambda_reg, threads):
    Q = model.Q
    reg = lambda_reg * np.eye(model.l)

    def solve_block(span):
        lo, hi = span
        t, c = targets.block(lo, hi)
        A = np.einsum("bi,ik,ij->bkj", c, Q, Q, optimize=True) + reg
        rhs = (c * t) @ Q
        return lo, hi, _solve(A, rhs)

    for lo, hi, rows in _map_blocks(solve_block, list(targets.blocks()), threads):
        model.P[lo:hi] = rows


def _item_step(model, targets, lambda_reg, threads):
    P = model.P
    n, l = model.n, model.l

    def accumulate(span):
        lo, hi = span
        t, c = targets.block(lo, hi)
        Pb = P[lo:hi]
        return np.einsum("bi,bk,bj->ikj", c, Pb, Pb, optimize=True), (c * t).T @ Pb

    A = np.zeros((n, l, l))
    rhs = np.zeros((n, l))
    # ordered reduction keeps the result independent of the thread count
    for part_A, part_rhs in _map_blocks(accumulate, list(targets.blocks()), threads):
        A += part_A
        rhs += part_rhs
    A += lambda_reg * np.eye(l)
    model.Q[:] = _solve(A, rhs)


def _relative_change(prev: float, cur: float) -> float:
    if prev == cur:
        return 0.0
    return abs(prev - cur) / max(abs(prev), np.finfo(float).tiny)


def fit_als(
    targets: RatingTarget,
    hyper: Hyperparams,
    init: FactorModel | None = None,
    *,
    validation: InteractionMatrix | None = None,
    threads: int = 1,
):
    """Alternate exact user and item solves.

    Each sweep solves ``p_u = (Q^T C_u Q + lambda I)^-1 Q^T C_u t_u`` for
    every user, then the symmetric system for every item. Stops after
    ``hyper.max_iters`` sweeps or when the relative loss change over a sweep
    drops below ``hyper.tol``.

    Returns ``(model, trace)``.
    """
    if targets.m < 1 or targets.n < 1:
        raise DataError("empty rating target")
    if init is None:
        model = init_model(targets.m, targets.n, hyper.l, hyper.seed)
    else:
        if (init.m, init.n) != (targets.m, targets.n):
            raise DataError("initial model shape does not match the targets")
        model = init.copy()
    lam = hyper.lambda_reg
    trace = LossTrace(initial=objective(model, targets, lam, threads))
    prev = trace.initial
    for sweep in range(1, int(hyper.max_iters) + 1):
        _user_step(model, targets, lam, threads)
        trace.steps.append(objective(model, targets, lam, threads))
        _item_step(model, targets, lam, threads)
        loss = objective(model, targets, lam, threads)
        trace.steps.append(loss)
        val = None if validation is None else validation_loss(model, validation, hyper.c_pos)
        trace.epochs.append((sweep, loss, val))
        logger.debug("als sweep %d: loss %.6g", sweep, loss)
        if _relative_change(prev, loss) < hyper.tol:
            trace.converged = True
            break
        prev = loss
    return model, trace


class Penalty:
    """An extra differentiable term added to the WMF objective."""

    def value(self, P, Q) -> float:
        raise NotImplementedError

    def grad_p(self, P_block, Q) -> np.ndarray:
        raise NotImplementedError

    def grad_q(self, P, Q) -> np.ndarray:
        raise NotImplementedError


def objective_with_penalty(model, targets, lambda_reg, penalty=None, threads: int = 1) -> float:
    loss = objective(model, targets, lambda_reg, threads)
    if penalty is not None:
        loss += penalty.value(model.P, model.Q)
    return loss


def _weighted_residual(model, targets, lo, hi):
    t, c = targets.block(lo, hi)
    return c * (t - model.P[lo:hi] @ model.Q.T)


def _grad_q(model, targets, lambda_reg, penalty):
    gQ = 2.0 * lambda_reg * model.Q
    for lo, hi in targets.blocks():
        gQ -= 2.0 * _weighted_residual(model, targets, lo, hi).T @ model.P[lo:hi]
    if penalty is not None:
        gQ += penalty.grad_q(model.P, model.Q)
    return gQ


def _grad_p_block(model, targets, lambda_reg, penalty, lo, hi):
    Pb = model.P[lo:hi]
    g = -2.0 * _weighted_residual(model, targets, lo, hi) @ model.Q + 2.0 * lambda_reg * Pb
    if penalty is not None:
        g = g + penalty.grad_p(Pb, model.Q)
    return g


def gradients(model: FactorModel, targets: RatingTarget, lambda_reg: float, penalty: Penalty | None = None):
    """Full analytic gradients ``(dL/dP, dL/dQ)`` of the penalized objective."""
    gP = np.empty_like(model.P)
    for lo, hi in targets.blocks():
        gP[lo:hi] = _grad_p_block(model, targets, lambda_reg, penalty, lo, hi)
    return gP, _grad_q(model, targets, lambda_reg, penalty)


def fit_gd(
    targets: RatingTarget,
    hyper: Hyperparams,
    penalty: Penalty | None = None,
    init: FactorModel | None = None,
    *,
    validation: InteractionMatrix | None = None,
):
    """Gradient descent on the (optionally penalized) WMF objective.

    Each epoch steps every ``p_u`` along its full gradient, visiting user
    blocks in a seeded random order, then takes one step on ``Q``. User steps
    only read ``Q``, so the visit order never changes the result. Raises
    :class:`DivergenceError` once the loss is no longer finite.
    """
    if init is None:
        model = init_model(targets.m, targets.n, hyper.l, hyper.seed)
    else:
        model = init.copy()
    lam, alpha = hyper.lambda_reg, hyper.alpha
    order_rng = np.random.Generator(np.random.PCG64([hyper.seed, 1]))
    spans = list(targets.blocks())
    trace = LossTrace(initial=objective_with_penalty(model, targets, lam, penalty))
    prev = trace.initial
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, int(hyper.max_iters) + 1):
            for k in order_rng.permutation(len(spans)):
                lo, hi = spans[k]
                model.P[lo:hi] -= alpha * _grad_p_block(model, targets, lam, penalty, lo, hi)
            model.Q -= alpha * _grad_q(model, targets, lam, penalty)
            loss = objective_with_penalty(model, targets, lam, penalty) if _finite(model) else np.inf
            if not np.isfinite(loss):
                raise DivergenceError(f"loss diverged at epoch {epoch}", epoch=epoch)
            trace.steps.append(loss)
            val = None if validation is None else validation_loss(model, validation, hyper.c_pos)
            trace.epochs.append((epoch, loss, val))
            if _relative_change(prev, loss) < hyper.tol:
                trace.converged = True
                break
            prev = loss
    return model, trace


def _finite(model: FactorModel) -> bool:
    return bool(np.all(np.isfinite(model.P)) and np.all(np.isfinite(model.Q)))
