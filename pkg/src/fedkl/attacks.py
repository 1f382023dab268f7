"""Gradient-leakage attacks run by an honest-but-curious server.

* :func:`infer_label` reads the class off the sign pattern of the output-bias
  gradient of a single-sample update.
* :func:`reconstruct_fc_input` recovers the input of a fully-connected layer
  from its weight and bias gradients (each active row is a scaled copy).
* :func:`dlg_attack` optimizes a dummy input (and optionally label) until its
  gradients match the observed ones.

The gradient of the matching loss with respect to the dummy input is taken by
central finite differences.  All probes of one step are stacked into a single
per-sample forward/backward pass.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import AmbiguousLabelError, ConfigError, NoActiveRowError, ShapeError
from .keylock import Key, KeyLockNorm, generate_key
from .layers import LOCK_PRIVATE, SHAREABLE, softmax
from .metrics import MetricReport, score
from .models import GradientBundle, Model, forward_backward, merge

ACTIVE_ROW_TOL = 1e-12


class Scenario(str, enum.Enum):
    """What the attacker holds beyond the shareable gradients."""

    NONE = "none"
    KEY_ONLY = "key_only"
    LOCK_GRAD_ONLY = "lock_grad_only"
    BOTH = "both"

    @property
    def reveals_key(self) -> bool:
        return self in (Scenario.KEY_ONLY, Scenario.BOTH)

    @property
    def reveals_lock_grads(self) -> bool:
        return self in (Scenario.LOCK_GRAD_ONLY, Scenario.BOTH)


@dataclass
class AttackConfig:
    max_iters: int = 2000
    step_size: float = 1.0
    fd_step: float = 1e-5
    tol: float = 1e-14
    min_step: float = 1e-12
    seed: int = 0
    label_mode: str = "inferred"    # inferred | optimized | given
    label: int | None = None        # used when label_mode == "given"
    optimizer: str = "gd"           # gd | lbfgs

    def __post_init__(self):
        if self.fd_step <= 0:
            raise ConfigError("fd_step must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.label_mode not in ("inferred", "optimized", "given"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.optimizer not in ("lbfgs", "gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.label_mode == "given" and self.label is None:
            raise ConfigError("label_mode 'given' needs a label")


@dataclass
class AttackResult:
    x_hat: np.ndarray
    label: int
    trace: list[float]
    label_source: str
    scenario: str
    converged: bool
    metrics: MetricReport | None = None
    extra: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.trace[-1]

    def to_json(self) -> dict:
        return {"label": self.label, "label_source": self.label_source, "scenario": self.scenario,
                "converged": self.converged, "iterations": len(self.trace), "final_loss": self.final_loss,
                "trace": self.trace, "x_shape": list(self.x_hat.shape),
                "metrics": None if self.metrics is None else self.metrics.to_json(), **self.extra}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


# ---------------------------------------------------------------- analytic attacks


def infer_label(grad_out_bias: np.ndarray) -> int:
    """Index of the only strictly negative entry of a batch-1 output-bias gradient."""
    g = np.asarray(grad_out_bias, dtype=np.float64).reshape(-1)
    neg = np.flatnonzero(g < 0)
    if neg.size != 1:
        raise AmbiguousLabelError(f"ambiguous label: {neg.size} negative entries in output-bias gradient")
    return int(neg[0])


def reconstruct_fc_input(grad_w: np.ndarray, grad_b: np.ndarray, tau: float = ACTIVE_ROW_TOL) -> np.ndarray:
    """Average of ``grad_w[i] / grad_b[i]`` over rows with ``|grad_b[i]| > tau``."""
    grad_w = np.asarray(grad_w, dtype=np.float64)
    grad_b = np.asarray(grad_b, dtype=np.float64).reshape(-1)
    if grad_w.ndim != 2 or grad_w.shape[0] != grad_b.size:
        raise ShapeError(f"weight gradient {grad_w.shape} does not match bias gradient {grad_b.shape}")
    active = np.abs(grad_b) > tau
    if not active.any():
        raise NoActiveRowError("no active row: every bias gradient entry is zero")
    return (grad_w[active] / grad_b[active, None]).mean(axis=0)


def lock_scale_grads_from_weights(grad_w: np.ndarray, key) -> np.ndarray:
    """Recover ``v`` from a rank-one lock-weight gradient ``key (x) v``."""
    k = key.values if isinstance(key, Key) else np.asarray(key, dtype=np.float64)
    return grad_w.T @ k / (k @ k)


# ---------------------------------------------------------------- sharing scenarios


@dataclass
class VisibleInfo:
    bundle: GradientBundle
    key: Key | None
    scenario: Scenario


def scenario_visible_grads(shareable: GradientBundle, private: GradientBundle, key: Key | None,
                           scenario: Scenario | str) -> VisibleInfo:
    """What the server sees under ``scenario``.

    Lock gradients are visible only in the lock-sharing scenarios and the key
    only in the key-sharing ones.
    """
    scenario = Scenario(scenario)
    if set(shareable.tags.values()) - {SHAREABLE} or set(private.tags.values()) - {LOCK_PRIVATE}:
        raise ValueError("bundles are not a shareable/private partition")
    bundle = merge(shareable, private) if scenario.reveals_lock_grads else shareable
    return VisibleInfo(bundle, key if scenario.reveals_key else None, scenario)


# ---------------------------------------------------------------- DLG


def central_difference_gradient(f_batch, z: np.ndarray, h: float) -> tuple[float, np.ndarray]:
    """Value and central-difference gradient of ``f`` at ``z``.

    ``f_batch`` maps an (M, d) array of points to their M values; it is called
    once on ``[z, z + h e_1, ..., z + h e_d, z - h e_1, ..., z - h e_d]``.
    """
    d = z.size
    steps = h * np.eye(d)
    points = np.concatenate([z[None, :], z[None, :] + steps, z[None, :] - steps])
    values = np.asarray(f_batch(points), dtype=np.float64)
    return float(values[0]), (values[1:d + 1] - values[d + 1:]) / (2.0 * h)


def _keylock_layers(model: Model) -> list[KeyLockNorm]:
    return [layer for layer in model.layers if isinstance(layer, KeyLockNorm)]


def attacker_key(model: Model, scenario: Scenario, key: Key | None, seed: int) -> Key | None:
    """Key the attacker will run the model with: the shared one or its own guess."""
    locks = _keylock_layers(model)
    if not locks:
        return None
    if scenario.reveals_key:
        if key is None:
            raise ConfigError(f"scenario {scenario.value!r} requires the client key")
        return key
    return generate_key(seed + 0x5EED, locks[0].key_len)


def matching_objective(model: Model, target: GradientBundle, key: Key | None, x_shape, n_classes: int,
                       optimize_label: bool, label: int | None):
    """Batched gradient-matching loss ``sum_p ||grad_p - target_p||^2``."""
    names = target.names()
    n_x = int(np.prod(x_shape))
    fixed_y = None if optimize_label else np.eye(n_classes)[label]

    def f_batch(points: np.ndarray) -> np.ndarray:
        m = points.shape[0]
        xs = points[:, :n_x].reshape((m,) + tuple(x_shape[1:]))
        ys = softmax(points[:, n_x:]) if optimize_label else np.broadcast_to(fixed_y, (m, n_classes))
        fb = forward_backward(model, xs, ys, key, soft=True, per_sample=True, only=names)
        total = np.zeros(m)
        for n in names:
            diff = fb.bundle.grads[n] - target.grads[n][None]
            total += (diff.reshape(m, -1) ** 2).sum(axis=1)
        return total

    return f_batch


def _run_gd(f_batch, z, config):
    """Gradient descent with a grow-on-success / halve-on-failure step."""
    f, g = central_difference_gradient(f_batch, z, config.fd_step)
    step = config.step_size
    trace: list[float] = []
    converged = f <= config.tol
    for _ in range(config.max_iters):
        if converged or step < config.min_step:
            break
        z_new = z - step * g
        f_new, g_new = central_difference_gradient(f_batch, z_new, config.fd_step)
        if f_new < f:
            z, f, g = z_new, f_new, g_new
            step *= 1.1
        else:
            step *= 0.5
        trace.append(f)
        converged = f <= config.tol
    return z, trace or [f], converged


def _run_lbfgs(f_batch, z, config):
    """scipy L-BFGS-B driven by the finite-difference gradient."""
    best = {"f": np.inf, "z": z}

    def fun(v):
        f, g = central_difference_gradient(f_batch, v, config.fd_step)
        if f < best["f"]:
            best["f"], best["z"] = f, v.copy()
        return f, g

    trace: list[float] = []

    def callback(intermediate_result):
        trace.append(float(intermediate_result.fun))
        if intermediate_result.fun <= config.tol:
            raise StopIteration

    f0, _ = fun(z)
    if f0 > config.tol:
        minimize(fun, z, jac=True, method="L-BFGS-B", callback=callback,
                 options={"maxiter": config.max_iters, "ftol": 0.0, "gtol": 0.0, "maxcor": 20})
    return best["z"], trace or [best["f"]], best["f"] <= config.tol


def dlg_attack(model: Model, target: GradientBundle, config: AttackConfig | None = None,
               scenario: Scenario | str = Scenario.NONE, key: Key | None = None, *,
               x_shape=None, x_true: np.ndarray | None = None) -> AttackResult:
    """Recover a single training sample by gradient matching.

    ``model`` holds the parameters known to the attacker and ``target`` the
    gradients it observed; lock gradients in ``target`` are used only when the
    scenario says they were shared.  Without the key, the attacker runs the
    key-lock block with a key of its own.
    """
    config = config or AttackConfig()
    scenario = Scenario(scenario)
    if not scenario.reveals_lock_grads:
        target = target.with_tag(SHAREABLE)
    k = attacker_key(model, scenario, key, config.seed)
    if x_shape is None:
        if x_true is None:
            raise ShapeError("dlg_attack needs x_shape or x_true")
        x_shape = x_true.shape
    x_shape = tuple(x_shape)
    if x_shape[0] != 1:
        raise ShapeError("dlg_attack reconstructs batch-1 updates only")
    n_classes = model.n_classes

    label, label_source = None, config.label_mode
    if config.label_mode == "given":
        label = int(config.label)
    elif config.label_mode == "inferred":
        try:
            label = infer_label(target.grads[model.output_bias])
        except (AmbiguousLabelError, KeyError):
            label_source = "optimized"
    optimize_label = label is None

    rng = np.random.default_rng(config.seed)
    z = rng.uniform(0.0, 1.0, int(np.prod(x_shape)))
    if optimize_label:
        z = np.concatenate([z, rng.normal(0.0, 1.0, n_classes)])
    f_batch = matching_objective(model, target, k, x_shape, n_classes, optimize_label, label)

    if config.optimizer == "lbfgs":
        z, trace, converged = _run_lbfgs(f_batch, z, config)
    else:
        z, trace, converged = _run_gd(f_batch, z, config)

    n_x = int(np.prod(x_shape))
    x_hat = z[:n_x].reshape(x_shape)
    if optimize_label:
        label = int(np.argmax(z[n_x:]))
    metrics = score(x_true, x_hat) if x_true is not None else None
    return AttackResult(x_hat, label, trace, label_source, scenario.value, bool(converged), metrics)


def victim_update(model: Model, x: np.ndarray, label: int, key: Key | None = None) -> GradientBundle:
    """The batch-1 gradient a client would upload for sample ``(x, label)``."""
    return forward_backward(model, x, np.array([label]), key).bundle


def attack_summary(result: AttackResult) -> dict:
    out = {"final_loss": result.final_loss, "iterations": len(result.trace), "label": result.label}
    if result.metrics is not None:
        out.update(asdict(result.metrics))
    return out
