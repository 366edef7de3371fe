import io
from dataclasses import replace

import numpy as np
import pytest

from noisyfed.data import make_blobs, partition_iid
from noisyfed.errors import DomainError, ProtocolError
from noisyfed.federation import (
    ClientState, FederationConfig, aggregate_fedavg, aggregate_fednova, aggregate_scaffold,
    client_seed, init_states, run_federation, run_round,
)
from noisyfed.nn import SgdConfig, init_mlp, load_snapshot, sgd_epochs

DIMS = (4, 8, 6, 3)


def _data(n=120, seed=0):
    return make_blobs(n, 3, 3, seed)


def _config(strategy="fedavg", rounds=3, lr=1.0, batch=16, epochs=2, seed=5, **kw):
    return FederationConfig(rounds, lr, SgdConfig(0.1, batch, epochs, 0), strategy, seed, **kw)


# aggregation rules

def test_fedavg_symmetric_updates_cancel():
    rng = np.random.default_rng(0)
    W, u = rng.normal(size=10), rng.normal(size=10)
    for eta in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(aggregate_fedavg([W + u, W - u], W, eta), W, rtol=0, atol=1e-14)


def test_fedavg_plain_mean_and_scalar_case():
    ws = [np.array([1.0, 2.0]), np.array([3.0, 6.0])]
    np.testing.assert_array_equal(aggregate_fedavg(ws, np.zeros(2), 1.0), [2.0, 4.0])
    assert aggregate_fedavg([np.array([2.0]), np.array([4.0])], np.array([0.0]), 0.5)[0] == 1.5


def test_fedavg_stays_in_hull():
    rng = np.random.default_rng(1)
    W = rng.normal(size=50)
    ws = [rng.normal(size=50) for _ in range(3)]
    mean = np.mean(ws, axis=0)
    for eta in np.linspace(0, 1, 7):
        out = aggregate_fedavg(ws, W, eta)
        lo, hi = np.minimum(W, mean), np.maximum(W, mean)
        assert np.all(out >= lo - 1e-15) and np.all(out <= hi + 1e-15)


def test_fedavg_shape_mismatch():
    with pytest.raises(ProtocolError):
        aggregate_fedavg([np.zeros(3), np.zeros(4)], np.zeros(3), 1.0)


def test_fednova_equal_steps_is_fedavg():
    rng = np.random.default_rng(2)
    W = rng.normal(size=20)
    ws = [rng.normal(size=20) for _ in range(4)]
    np.testing.assert_allclose(aggregate_fednova(ws, [6, 6, 6, 6], W, 0.7),
                               aggregate_fedavg(ws, W, 0.7), rtol=0, atol=1e-12)


def test_fednova_halves_longer_client_delta():
    rng = np.random.default_rng(3)
    W = rng.normal(size=5)
    w1, w2 = rng.normal(size=5), rng.normal(size=5)
    tau = 4
    out = aggregate_fednova([w1, w2], [2 * tau, tau], W, 1.0)
    d1, d2 = (W - w1) / (2 * tau), (W - w2) / tau
    expected = W - 1.5 * tau * (d1 + d2) / 2
    np.testing.assert_allclose(out, expected, rtol=1e-14)
    # equivalently client 1's raw delta counts half as much as client 2's
    np.testing.assert_allclose(W - out, 1.5 * ((W - w1) / 2 + (W - w2)) / 2, rtol=1e-13)


def test_fednova_zero_lr_and_zero_steps():
    W = np.ones(3)
    np.testing.assert_array_equal(aggregate_fednova([np.zeros(3)], [3], W, 0.0), W)
    with pytest.raises(DomainError):
        aggregate_fednova([np.zeros(3)], [0], W, 1.0)


def test_scaffold_errors():
    W = np.zeros(4)
    with pytest.raises(ProtocolError):
        aggregate_scaffold([W], [1], [None], W, np.zeros(4), 1.0, 0.1)
    with pytest.raises(ProtocolError):
        aggregate_scaffold([W], [1], [np.zeros(3)], W, np.zeros(4), 1.0, 0.1)
    with pytest.raises(ProtocolError):
        aggregate_scaffold([W], [1], [np.zeros(4)], W, None, 1.0, 0.1)


def test_scaffold_variate_update_formula():
    W = np.array([1.0, 2.0])
    w = [np.array([0.5, 1.0]), np.array([0.0, 3.0])]
    c = np.array([0.1, -0.1])
    ck = [np.array([0.0, 0.2]), np.array([0.3, 0.0])]
    newW, newc, newck = aggregate_scaffold(w, [5, 10], ck, W, c, 1.0, 0.2)
    np.testing.assert_allclose(newck[0], ck[0] - c + (W - w[0]) / (5 * 0.2))
    np.testing.assert_allclose(newck[1], ck[1] - c + (W - w[1]) / (10 * 0.2))
    np.testing.assert_allclose(newc, c + ((newck[0] - ck[0]) + (newck[1] - ck[1])) / 2)
    np.testing.assert_array_equal(newW, aggregate_fedavg(w, W, 1.0))


# round engine

def test_zero_global_lr_freezes_model():
    model = init_mlp(DIMS, 0)
    res = run_federation(model, partition_iid(_data(), 2, 0), _config(lr=0.0, rounds=3))
    assert res.server.model == model


def test_single_client_matches_centralized():
    model = init_mlp(DIMS, 1)
    data = _data()
    cfg = _config(rounds=4)
    res = run_federation(model, [data], cfg)
    central = model
    for r in range(1, 5):
        central = sgd_epochs(central, data, replace(cfg.sgd, seed=client_seed(cfg.seed, 0, r)))
    assert np.array_equal(res.server.model.params, central.params)


def test_identical_clients_average_to_one_client():
    model = init_mlp(DIMS, 2)
    data = _data()
    cfg = _config(rounds=1)
    server, clients = init_states(model, [data, data, data], "fedavg")
    # give every client id 0's seed by overriding the cid
    clients = [ClientState(0, c.dataset, c.model, c.control) for c in clients]
    out = run_round(server, clients, cfg)
    single = sgd_epochs(model, data, replace(cfg.sgd, seed=client_seed(cfg.seed, 0, 1)))
    np.testing.assert_allclose(out.server.model.params, single.params, rtol=0, atol=1e-15)


def test_broadcast_consistency():
    model = init_mlp(DIMS, 3)
    server, clients = init_states(model, partition_iid(_data(), 3, 0), "fedavg")
    cfg = _config()
    for _ in range(3):
        out = run_round(server, clients, cfg)
        server, clients = out.server, out.clients
        assert all(c.model == server.model for c in clients)
    assert server.round == 3


def test_stale_client_is_protocol_error():
    model = init_mlp(DIMS, 3)
    server, clients = init_states(model, partition_iid(_data(), 2, 0), "fedavg")
    other = init_mlp(DIMS, 4)
    clients[1] = replace(clients[1], model=other)
    with pytest.raises(ProtocolError):
        run_round(server, clients, _config())


def test_scaffold_bad_variate_shape_in_round():
    model = init_mlp(DIMS, 3)
    server, clients = init_states(model, partition_iid(_data(), 2, 0), "scaffold")
    clients[0] = replace(clients[0], control=np.zeros(3))
    with pytest.raises(ProtocolError):
        run_round(server, clients, _config("scaffold"))


def test_order_and_thread_independence():
    model = init_mlp(DIMS, 5)
    shards = partition_iid(_data(150), 3, 1)
    for strategy in ("fedavg", "scaffold", "fednova"):
        cfg = _config(strategy, rounds=3)
        a = run_federation(model, shards, cfg)
        b = run_federation(model, shards, cfg, threads=3)
        assert np.array_equal(a.server.model.params, b.server.model.params)
        server, clients = init_states(model, shards, strategy)
        out = run_round(server, list(reversed(clients)), cfg)
        first = run_round(*init_states(model, shards, strategy), cfg)
        assert np.array_equal(out.server.model.params, first.server.model.params)


def test_fednova_equals_fedavg_on_equal_shards():
    model = init_mlp(DIMS, 6)
    shards = partition_iid(_data(128), 4, 0)
    a = run_federation(model, shards, _config("fedavg", rounds=3))
    b = run_federation(model, shards, _config("fednova", rounds=3))
    np.testing.assert_allclose(b.server.model.params, a.server.model.params, rtol=0, atol=1e-12)


def test_scaffold_first_round_equals_fedavg():
    model = init_mlp(DIMS, 7)
    shards = partition_iid(_data(), 2, 0)
    a = run_federation(model, shards, _config("fedavg", rounds=1))
    b = run_federation(model, shards, _config("scaffold", rounds=1))
    np.testing.assert_allclose(b.server.model.params, a.server.model.params, rtol=0, atol=1e-12)


def test_scaffold_homogeneous_clients_keep_equal_variates():
    model = init_mlp(DIMS, 8)
    data = _data(40)
    # full-batch steps make every client's trajectory independent of its shuffle
    cfg = _config("scaffold", rounds=3, batch=40)
    res = run_federation(model, [data, data, data], cfg)
    for c in res.clients[1:]:
        np.testing.assert_allclose(c.control, res.clients[0].control, rtol=1e-9, atol=1e-12)
    assert np.any(res.clients[0].control != 0)


def test_event_log_and_snapshots(tmp_path):
    model = init_mlp(DIMS, 9)
    log = io.StringIO()
    cfg = _config(rounds=4, snapshot_every=2)
    res = run_federation(model, partition_iid(_data(), 2, 0), cfg, event_log=log, snapshot_dir=tmp_path)
    lines = log.getvalue().splitlines()
    assert len(lines) == 4
    idx, losses, wall = lines[2].split("\t")
    assert idx == "3" and len(losses.split(",")) == 2 and float(wall) >= 0
    assert [float(x) for x in losses.split(",")] == list(res.losses[2])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["round_0002.rmlp", "round_0004.rmlp"]
    assert load_snapshot(tmp_path / "round_0004.rmlp") == res.server.model


def test_config_validation():
    with pytest.raises(DomainError):
        FederationConfig(rounds=0)
    with pytest.raises(DomainError):
        FederationConfig(global_lr=1.5)
    with pytest.raises(DomainError):
        FederationConfig(strategy="fedprox")


def test_client_seed_distinct():
    seeds = {client_seed(0, k, r) for k in range(5) for r in range(1, 6)}
    assert len(seeds) == 25
