"""Discrete-action soft actor-critic.

The policy is a softmax over action logits, so every expectation over actions
is computed exactly as a sum instead of being sampled. Two critics with
target copies provide the clipped (min) soft value target; the temperature is
learned in log space.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .approximator import (
    Adam,
    Network,
    NetworkConfig,
    backward,
    forward,
    load_checkpoint,
    network_arrays,
    network_from_arrays,
    polyak_update,
    save_checkpoint,
)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 100_000
    batch_size: int = 256
    buffer_size: int = 10_240
    lr: float = 3e-4
    lr_schedule: str = "linear"  # linear | constant
    gamma: float = 0.99
    tau: float = 0.005
    init_alpha: float = 0.5
    target_entropy_scale: float = 0.2
    update_every: int = 10
    updates_per_round: int = 1
    learning_starts: int | None = None
    hidden: int = 512
    embed_dim: int = 64
    conv_filters: tuple[int, int] = (8, 16)
    storage_dtype: str = "float32"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        if "conv_filters" in d:
            d["conv_filters"] = tuple(int(x) for x in d["conv_filters"])
        return cls(**d)

    @property
    def total_updates(self) -> int:
        return max(1, self.total_steps // self.update_every * self.updates_per_round)


# -- distributions and losses on plain arrays ---------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def floored_log(probs: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    return np.log(np.maximum(probs, floor))


def policy_distribution(net: Network, planes) -> np.ndarray:
    out, _ = forward(net, planes)
    logits = next(iter(out.values()))
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite policy logits")
    return softmax(logits.astype(np.float64))


def entropy(probs: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    return -np.sum(probs * floored_log(probs, floor), axis=-1)


def soft_value(q_values: np.ndarray, probs: np.ndarray, alpha: float, floor: float = PROB_FLOOR) -> np.ndarray:
    """Sum over actions of ``p(a) * (Q(a) - alpha * log p(a))``."""
    return np.sum(probs * (q_values - alpha * floored_log(probs, floor)), axis=-1)


def policy_objective(probs: np.ndarray, q_values: np.ndarray, alpha: float, floor: float = PROB_FLOOR) -> np.ndarray:
    """Per-state ``sum_a p(a) * (alpha * log p(a) - Q(a))``."""
    return np.sum(probs * (alpha * floored_log(probs, floor) - q_values), axis=-1)


def policy_logit_grad(logits: np.ndarray, q_values: np.ndarray, alpha: float, floor: float = PROB_FLOOR) -> np.ndarray:
    """Gradient of ``policy_objective`` with respect to the logits (per state)."""
    p = softmax(logits)
    live = (p > floor).astype(p.dtype)
    c = alpha * floored_log(p, floor) - q_values
    g = p * (c - np.sum(p * c, axis=-1, keepdims=True))
    g += alpha * p * (live - np.sum(p * live, axis=-1, keepdims=True))
    return g


def target_entropy(n_actions: int, scale: float = 0.2) -> float:
    return scale * math.log(n_actions)


# -- replay ------------------------------------------------------------------


@dataclass
class Batch:
    s: dict[str, np.ndarray]
    a: np.ndarray
    r: np.ndarray
    s_next: dict[str, np.ndarray]
    done: np.ndarray

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions."""

    def __init__(self, capacity: int, shapes: Mapping[str, tuple[int, ...]], dtype="float32"):
        self.capacity = capacity
        self.shapes = dict(shapes)
        self.s = {k: np.zeros((capacity, *v), dtype=dtype) for k, v in shapes.items()}
        self.s_next = {k: np.zeros((capacity, *v), dtype=dtype) for k, v in shapes.items()}
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity, dtype=np.float64)
        self.done = np.zeros(capacity, dtype=np.float64)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s_next, done) -> None:
        i = self.pos
        for k in self.shapes:
            self.s[k][i] = s[k]
            self.s_next[k][i] = s_next[k]
        self.a[i] = a
        self.r[i] = r
        self.done[i] = float(done)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        return rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(
            {k: v[idx] for k, v in self.s.items()},
            self.a[idx],
            self.r[idx],
            {k: v[idx] for k, v in self.s_next.items()},
            self.done[idx],
        )


# -- agent state ---------------------------------------------------------------


@dataclass
class SacState:
    policy: Network
    q1: Network
    q2: Network
    q1_target: Network
    q2_target: Network
    log_alpha: float
    target_entropy: float
    gamma: float = 0.99
    tau: float = 0.005
    policy_opt: Adam = field(default_factory=Adam)
    q1_opt: Adam = field(default_factory=Adam)
    q2_opt: Adam = field(default_factory=Adam)
    alpha_opt: Adam = field(default_factory=Adam)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @classmethod
    def create(cls, shapes: Mapping[str, tuple[int, int, int]], config: TrainConfig, n_actions: int = 3,
               dtype: str = "float32") -> "SacState":
        (h, w) = next(iter(shapes.values()))[:2]
        planes = tuple((k, int(v[2])) for k, v in shapes.items())
        common = dict(planes=planes, height=int(h), width=int(w), conv_filters=tuple(config.conv_filters),
                      embed_dim=config.embed_dim, hidden=config.hidden, dtype=dtype)
        ss = np.random.SeedSequence(config.seed)
        s_pol, s_q1, s_q2 = ss.spawn(3)
        policy = Network.init(NetworkConfig(heads=(("logits", n_actions),), **common), np.random.default_rng(s_pol))
        q_cfg = NetworkConfig(heads=(("q", n_actions),), **common)
        q1 = Network.init(q_cfg, np.random.default_rng(s_q1))
        q2 = Network.init(q_cfg, np.random.default_rng(s_q2))
        total = config.total_updates if config.lr_schedule == "linear" else None

        def opt():
            return Adam(lr=config.lr, total_steps=total)

        return cls(
            policy, q1, q2, q1.copy(), q2.copy(), math.log(config.init_alpha),
            target_entropy(n_actions, config.target_entropy_scale), config.gamma, config.tau,
            opt(), opt(), opt(), opt(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("policy", "q1", "q2", "q1_target", "q2_target"):
            out.update(network_arrays(getattr(self, name), name))
        out["log_alpha"] = np.array([self.log_alpha], dtype=np.float64)
        return out


def _head(out: dict[str, np.ndarray]) -> np.ndarray:
    return next(iter(out.values())).astype(np.float64)


def soft_targets(batch: Batch, state: SacState) -> np.ndarray:
    """``r + gamma * (1 - done) * V(s')`` using the min of the target critics."""
    q1n = _head(forward(state.q1_target, batch.s_next)[0])
    q2n = _head(forward(state.q2_target, batch.s_next)[0])
    pn = softmax(_head(forward(state.policy, batch.s_next)[0]))
    v = soft_value(np.minimum(q1n, q2n), pn, state.alpha)
    y = batch.r + state.gamma * (1.0 - batch.done) * v
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite critic targets")
    return y


def critic_loss(batch: Batch, state: SacState, y: np.ndarray | None = None):
    """Mean of ``0.5 * (Q(s, a) - y)^2`` for both critics.

    Returns ``(loss, {"q1": grads, "q2": grads}, {"q1": Q1(s), "q2": Q2(s)})``.
    """
    if y is None:
        y = soft_targets(batch, state)
    n = len(batch)
    rows = np.arange(n)
    loss = 0.0
    grads, values = {}, {}
    for name in ("q1", "q2"):
        net = getattr(state, name)
        out, tape = forward(net, batch.s)
        q = _head(out)
        err = q[rows, batch.a] - y
        loss += float(np.mean(0.5 * err**2))
        up = np.zeros_like(q)
        up[rows, batch.a] = err / n
        grads[name] = backward(net, tape, up.astype(net.config.dtype))
        values[name] = q
    return loss, grads, values


def policy_loss(batch: Batch, state: SacState, q_values: np.ndarray | None = None):
    """Mean over states of ``sum_a pi(a|s) * (alpha * log pi(a|s) - min Q(s, a))``.

    Returns ``(loss, grads, probs)``; critic values are treated as constants.
    """
    if q_values is None:
        q_values = np.minimum(_head(forward(state.q1, batch.s)[0]), _head(forward(state.q2, batch.s)[0]))
    out, tape = forward(state.policy, batch.s)
    logits = _head(out)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite policy logits")
    probs = softmax(logits)
    n = len(logits)
    loss = float(np.mean(policy_objective(probs, q_values, state.alpha)))
    g = policy_logit_grad(logits, q_values, state.alpha) / n
    grads = backward(state.policy, tape, g.astype(state.policy.config.dtype))
    return loss, grads, probs


def temperature_loss(probs: np.ndarray, state: SacState) -> tuple[float, float]:
    """``alpha * (mean entropy - target entropy)`` and its gradient w.r.t. log alpha."""
    h = float(np.mean(entropy(probs)))
    loss = state.alpha * (h - state.target_entropy)
    return loss, loss


def update(state: SacState, batch: Batch) -> dict[str, float]:
    """One gradient step for both critics, the policy and the temperature."""
    c_loss, c_grads, q_vals = critic_loss(batch, state)
    p_loss, p_grads, probs = policy_loss(batch, state, np.minimum(q_vals["q1"], q_vals["q2"]))
    a_loss, a_grad = temperature_loss(probs, state)
    if not (math.isfinite(c_loss) and math.isfinite(p_loss) and math.isfinite(a_loss)):
        raise FloatingPointError("non-finite loss")
    state.q1_opt.apply(state.q1.params, c_grads["q1"])
    state.q2_opt.apply(state.q2.params, c_grads["q2"])
    state.policy_opt.apply(state.policy.params, p_grads)
    la = {"log_alpha": np.array([state.log_alpha])}
    state.alpha_opt.apply(la, {"log_alpha": np.array([a_grad])})
    state.log_alpha = float(la["log_alpha"][0])
    polyak_update(state.q1_target, state.q1, state.tau)
    polyak_update(state.q2_target, state.q2, state.tau)
    return {"critic_loss": c_loss, "policy_loss": p_loss, "alpha_loss": a_loss, "alpha": state.alpha}


# -- training and evaluation -----------------------------------------------------


def _batched(obs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v[None] for k, v in obs.items()}


def _episode_seed(base: int, episode: int) -> int:
    return int(np.random.SeedSequence([base, episode]).generate_state(1)[0])


def save_agent(path, state: SacState, metadata: Mapping) -> None:
    meta = dict(metadata)
    meta["policy_config"] = state.policy.config.to_dict()
    meta["critic_config"] = state.q1.config.to_dict()
    meta["target_entropy"] = state.target_entropy
    save_checkpoint(path, state.arrays(), meta)


def load_policy(path) -> tuple[Network, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = NetworkConfig.from_dict(meta["policy_config"])
    return network_from_arrays(cfg, arrays, "policy"), meta


def train(
    env,
    config: TrainConfig,
    log_path: str | Path | None = None,
    diagnostic_path: str | Path | None = None,
    on_episode: Callable[[dict], None] | None = None,
) -> tuple[SacState, list[dict]]:
    """Interact with ``env`` for ``config.total_steps`` steps, updating every ``update_every``.

    Returns the trained state and the per-episode log records.
    """
    state = SacState.create(env.observation_shapes, config, env.n_actions)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    buffer = ReplayBuffer(config.buffer_size, env.observation_shapes, config.storage_dtype)
    starts = config.learning_starts if config.learning_starts is not None else config.batch_size
    records: list[dict] = []
    metrics = {"critic_loss": float("nan"), "policy_loss": float("nan"), "alpha_loss": float("nan")}
    log_file = open(log_path, "w") if log_path else None
    episode = 0
    obs = env.reset(_episode_seed(config.seed, episode))
    try:
        for t in range(1, config.total_steps + 1):
            probs = policy_distribution(state.policy, _batched(obs))[0]
            action = int(rng.choice(env.n_actions, p=probs))
            nxt, reward, done, info = env.step(action)
            buffer.add(obs, action, reward, nxt, done)
            obs = nxt
            if done:
                rec = {
                    "step": t,
                    "episode": episode,
                    "return": float(info.get("return", float("nan"))),
                    "length": int(info.get("steps", 0)),
                    "outcome": info.get("outcome"),
                    "alpha": state.alpha,
                    **{k: metrics[k] for k in ("critic_loss", "policy_loss", "alpha_loss")},
                }
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                if on_episode:
                    on_episode(rec)
                episode += 1
                obs = env.reset(_episode_seed(config.seed, episode))
            if t % config.update_every == 0 and len(buffer) >= max(starts, config.batch_size):
                for _ in range(config.updates_per_round):
                    try:
                        metrics = update(state, buffer.sample(config.batch_size, rng))
                    except FloatingPointError as exc:
                        ckpt = None
                        if diagnostic_path:
                            ckpt = str(diagnostic_path)
                            save_agent(ckpt, state, {"diverged_at_step": t, "error": str(exc)})
                        raise TrainingDivergedError(f"training diverged at step {t}: {exc}", ckpt) from exc
    finally:
        if log_file:
            log_file.close()
    return state, records


@dataclass
class EvalReport:
    results: list[dict]
    success_rate: float
    counts: dict[str, int]
    oob_share: float | None
    collision_share: float | None
    oob_to_collision: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(outcomes: list[str]) -> tuple[float, dict[str, int], float | None, float | None, float | None]:
    """Success rate and the OOB/collision breakdown of failures.

    Shares are fractions of OOB + collision failures; the ratio is ``None``
    when there are no collisions.
    """
    counts = {k: 0 for k in ("success", "collision", "oob", "timeout")}
    for o in outcomes:
        counts[o] = counts.get(o, 0) + 1
    n = len(outcomes)
    success = counts["success"] / n if n else 0.0
    failures = counts["oob"] + counts["collision"]
    if failures == 0:
        return success, counts, None, None, None
    oob_share = counts["oob"] / failures
    col_share = counts["collision"] / failures
    ratio = counts["oob"] / counts["collision"] if counts["collision"] else None
    return success, counts, oob_share, col_share, ratio


def greedy_action(policy: Network, obs: Mapping[str, np.ndarray]) -> int:
    out, _ = forward(policy, _batched(obs))
    return int(np.argmax(_head(out)[0]))


def evaluate(policy: Network | str | Path, env, episodes: int, seed: int = 0,
             representations: str | None = None) -> EvalReport:
    """Run ``episodes`` greedy episodes; ties go to the lowest action index."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if not isinstance(policy, Network):
        policy, meta = load_policy(policy)
        representations = meta.get("representations", representations)
    if representations is not None and representations != env.spec_string:
        raise CheckpointMismatchError(
            f"checkpoint was trained on {representations!r} but environment provides {env.spec_string!r}"
        )
    expected = {name for name, _ in policy.config.planes}
    if expected != set(env.observation_shapes):
        raise CheckpointMismatchError(f"policy planes {sorted(expected)} != env planes {sorted(env.observation_shapes)}")
    results = []
    for ep in range(episodes):
        obs = env.reset(_episode_seed(seed, ep))
        done = False
        while not done:
            obs, _, done, info = env.step(greedy_action(policy, obs))
        results.append({"episode": ep, "outcome": info.get("outcome"), "steps": info.get("steps"),
                        "return": info.get("return")})
    success, counts, oob, col, ratio = summarize([r["outcome"] for r in results])
    return EvalReport(results, success, counts, oob, col, ratio)
