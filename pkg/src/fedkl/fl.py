"""Deterministic FedAvg / FedKL simulator.

Clients train locally and upload a :class:`SharedUpdate`, whose bundle can only
hold shareable parameters.  The server averages the bundles in client-id order
and applies the result to a global model that holds shareable parameters only.
Lock parameters and keys stay on their client for its whole lifetime.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, split
from .errors import ConfigError, ShapeError
from .keylock import Key, KeyLockNorm, generate_key
from .layers import LOCK_PRIVATE, SHAREABLE
from .models import GradientBundle, Model, build_from_arch, forward_backward, init_params, sgd_step


@dataclass
class Client:
    client_id: int
    model: Model
    key: Key | None
    data: Dataset
    lr: float
    batch_size: int
    rng: np.random.Generator = field(repr=False)

    @property
    def n_samples(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class SharedUpdate:
    """What a client sends to the server: no key, no lock parameters."""

    client_id: int
    n_samples: int
    bundle: GradientBundle

    def __post_init__(self):
        if any(t != SHAREABLE for t in self.bundle.tags.values()):
            raise ValueError("a shared update may only carry shareable parameters")


@dataclass
class ServerState:
    params: dict[str, np.ndarray]
    tags: dict[str, str]
    lr: float
    round: int = 0

    def __post_init__(self):
        if any(t != SHAREABLE for t in self.tags.values()):
            raise ValueError("the global model may only hold shareable parameters")


@dataclass
class RoundRecord:
    round: int
    updates: list[SharedUpdate]
    aggregate: GradientBundle
    accuracy: dict[int, float]

    def __post_init__(self):
        if len(self.updates) != len({u.client_id for u in self.updates}):
            raise ValueError("one update per participating client")

    def to_json(self) -> dict:
        return {"round": self.round,
                "updates": [{"client": u.client_id, "n_samples": u.n_samples, "bundle": u.bundle.to_json()}
                            for u in self.updates],
                "aggregate": self.aggregate.to_json(),
                "accuracy": {str(k): v for k, v in sorted(self.accuracy.items())}}

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------- setup


def make_federation(arch: dict, dataset: Dataset, n_clients: int, master_seed: int, lr: float,
                    batch_size: int = 16, shards: list[Dataset] | None = None,
                    ) -> tuple[ServerState, list[Client]]:
    """Server plus ``n_clients`` clients, all seeded from ``master_seed``.

    Every client starts from the same shareable weights.  Lock weights and keys
    are drawn independently per client.
    """
    if n_clients < 1:
        raise ConfigError("need at least one client")
    seeds = np.random.SeedSequence(master_seed).spawn(n_clients + 2)
    template = build_from_arch(arch, seed=int(seeds[0].generate_state(1)[0]))
    if shards is None:
        shards = split(dataset, n_clients, int(seeds[1].generate_state(1)[0]))
    if len(shards) != n_clients:
        raise ConfigError(f"{len(shards)} shards for {n_clients} clients")
    key_len = next((layer.key_len for layer in template.layers if isinstance(layer, KeyLockNorm)), None)
    clients = []
    for cid, (ss, shard) in enumerate(zip(seeds[2:], shards)):
        key_seed, lock_seed, data_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        model = template
        key = None
        if key_len is not None:
            key = generate_key(key_seed, key_len)
            model = fresh_lock(template, np.random.default_rng(lock_seed))
        clients.append(Client(cid, model, key, shard, lr, batch_size, np.random.default_rng(data_seed)))
    shareable = template.shareable_names
    server = ServerState({n: template.params[n].copy() for n in shareable},
                         {n: SHAREABLE for n in shareable}, lr)
    return server, clients


def fresh_lock(model: Model, rng: np.random.Generator) -> Model:
    """Copy of ``model`` with newly initialized lock parameters."""
    locks = [layer for layer in model.layers if isinstance(layer, KeyLockNorm)]
    params, _ = init_params(locks, rng)
    return model.with_params(params)


# ---------------------------------------------------------------- client side


def install(client: Client, global_params: dict[str, np.ndarray]) -> None:
    """Overwrite the client's shareable parameters; its lock is left alone."""
    if set(global_params) != set(client.model.shareable_names):
        raise ShapeError("global parameters do not cover exactly the client's shareable registry")
    client.model = client.model.with_params(global_params)


def local_update(client: Client, global_params: dict[str, np.ndarray], epochs: int) -> SharedUpdate:
    """Install the global weights, train ``epochs`` passes, return ``(old - new) / lr``.

    The lock layer is trained along with everything else but its change is
    never reported.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    install(client, global_params)
    start = {n: client.model.params[n] for n in client.model.shareable_names}
    images, labels = client.data.images, client.data.labels
    for _ in range(epochs):
        order = client.rng.permutation(len(labels))
        for lo in range(0, len(order), client.batch_size):
            idx = order[lo:lo + client.batch_size]
            fb = forward_backward(client.model, images[idx], labels[idx], client.key)
            client.model = sgd_step(client.model, fb.bundle, client.lr)
    delta = {n: (start[n] - client.model.params[n]) / client.lr for n in start}
    return SharedUpdate(client.client_id, client.n_samples,
                        GradientBundle(delta, {n: SHAREABLE for n in delta}))


# ---------------------------------------------------------------- server side


def fedavg_aggregate(updates: list[SharedUpdate], weights=None) -> GradientBundle:
    """Weighted per-parameter mean; weights default to shard sizes.

    The sum runs in client-id order, so shuffling the inputs does not change
    a single bit of the result.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty list of updates")
    if weights is None:
        weights = [u.n_samples for u in updates]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(updates),) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative, one per update, with a positive sum")
    pairs = sorted(zip(updates, weights), key=lambda p: p[0].client_id)
    names = pairs[0][0].bundle.names()
    for u, _ in pairs:
        if u.bundle.names() != names:
            raise ShapeError(f"client {u.client_id} sent a different registry")
        if any(u.bundle.tags[n] == LOCK_PRIVATE for n in names):
            raise ValueError("lock parameters must never be aggregated")
    total = weights.sum()
    out = {}
    for n in names:
        acc = np.zeros_like(pairs[0][0].bundle.grads[n])
        for u, w in pairs:
            acc = acc + (w / total) * u.bundle.grads[n]
        out[n] = acc
    return GradientBundle(out, {n: SHAREABLE for n in names})


def apply_update(server: ServerState, aggregate: GradientBundle) -> ServerState:
    if set(aggregate.names()) != set(server.params):
        raise ShapeError("aggregate does not cover the global registry")
    params = {n: p - server.lr * aggregate.grads[n] for n, p in server.params.items()}
    return ServerState(params, dict(server.tags), server.lr, server.round + 1)


def fedkl_round(server: ServerState, clients: list[Client], epochs: int,
                eval_data: Dataset | None = None) -> tuple[ServerState, RoundRecord]:
    """One round: dispatch, local training, aggregation of shareable updates."""
    if not clients:
        raise ConfigError("a round needs at least one participating client")
    updates = [local_update(c, server.params, epochs) for c in sorted(clients, key=lambda c: c.client_id)]
    aggregate = fedavg_aggregate(updates)
    new = apply_update(server, aggregate)
    accuracy = {}
    if eval_data is not None:
        for c in clients:
            install(c, new.params)
            accuracy[c.client_id] = evaluate(c, eval_data)
    return new, RoundRecord(new.round, updates, aggregate, accuracy)


def fedavg_round(server: ServerState, clients: list[Client], epochs: int,
                 eval_data: Dataset | None = None) -> tuple[ServerState, RoundRecord]:
    """Plain FedAvg: every parameter is aggregated, so no key-lock block is allowed."""
    if any(c.model.lock_names for c in clients):
        raise ConfigError("FedAvg aggregates every parameter; use fedkl_round for key-lock models")
    return fedkl_round(server, clients, epochs, eval_data)


# ---------------------------------------------------------------- evaluation


def accuracy(model: Model, data: Dataset, key: Key | None, batch: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = 0
    for lo in range(0, len(data), batch):
        hits += int((model.predict(data.images[lo:lo + batch], key) == data.labels[lo:lo + batch]).sum())
    return hits / len(data)


def evaluate(client: Client, data: Dataset, key_source="own", *, clients: list[Client] | None = None,
             rng: np.random.Generator | None = None) -> float:
    """Top-1 accuracy of ``client.model`` run with a chosen key.

    ``key_source`` is ``"own"``, ``"random"`` (fresh key and fresh lock
    weights drawn from ``rng``) or ``("other_client", i)`` (client ``i``'s key
    with this client's lock).
    """
    model, key = client.model, client.key
    if key_source == "own":
        pass
    elif key_source == "random":
        if key is not None:
            rng = rng if rng is not None else np.random.default_rng()
            key = generate_key(int(rng.integers(2**63)), len(key))
            model = fresh_lock(model, rng)
    elif isinstance(key_source, tuple) and len(key_source) == 2 and key_source[0] == "other_client":
        other = {c.client_id: c for c in clients or []}.get(key_source[1])
        if other is None:
            raise ConfigError(f"unknown client {key_source[1]!r}")
        key = other.key
    else:
        raise ConfigError(f"unknown key source {key_source!r}")
    return accuracy(model, data, key)


def train_centralized(model: Model, data: Dataset, key: Key | None, epochs: int, lr: float,
                      batch_size: int, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            fb = forward_backward(model, data.images[idx], data.labels[idx], key)
            model = sgd_step(model, fb.bundle, lr)
    return model
