import numpy as np
import pytest

from gradmask import protocol
from gradmask.aggregation import AggregationSpec
from gradmask.data import Dataset, load_named
from gradmask.nn import OptimizerSpec, build_model, dense_model, evaluate, train_epochs
from gradmask.obfuscation import ObfuscationSpec
from gradmask.protocol import ClientError, PartitionSpec, RoundConfig, partition, run_round, run_training


def toy(n=120, classes=3, seed=0):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    centers = r.standard_normal((classes, 6)) * 2
    x = centers[labels] + r.standard_normal((n, 6)) * 0.5
    return Dataset(x[:, :, None, None].reshape(n, 1, 2, 3), labels, classes, "toy")


def tiny_graph(ds, seed=0):
    return build_model(dense_model(ds.shape, ds.num_classes, seed=seed))


def test_iid_hundred_into_ten():
    shards = partition(np.arange(100) % 10, PartitionSpec("iid"), 10)
    assert [len(s) for s in shards] == [10] * 10
    assert len(np.unique(np.concatenate(shards))) == 100


def test_iid_is_stratified():
    labels = np.repeat(np.arange(4), 50)
    for s in partition(labels, PartitionSpec("iid", seed=3), 5):
        assert np.all(np.bincount(labels[s], minlength=4) == 10)


@pytest.mark.parametrize("kind", ["iid", "dirichlet"])
def test_partition_covers_disjointly(kind):
    labels = np.random.default_rng(0).integers(0, 10, 997)
    shards = partition(labels, PartitionSpec(kind, seed=1), 7)
    allidx = np.concatenate(shards)
    assert len(allidx) == 997 and len(np.unique(allidx)) == 997


def test_dirichlet_large_beta_matches_global():
    labels = np.repeat(np.arange(10), 1000)
    shards = partition(labels, PartitionSpec("dirichlet", beta=1e6, seed=0), 10)
    for s in shards:
        hist = np.bincount(labels[s], minlength=10)
        n, p = len(s), 0.1
        assert np.all(np.abs(hist - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_dirichlet_small_beta_skews():
    # a direct simulation of Dir(0.1) class splits puts the median dominant share near 0.7
    labels = np.repeat(np.arange(10), 200)
    shards = partition(labels, PartitionSpec("dirichlet", beta=0.1, seed=0), 10)
    shares = [np.bincount(labels[s], minlength=10).max() / len(s) for s in shards]
    assert np.median(shares) > 0.5


def test_dirichlet_min_shard_retries_then_fails():
    labels = np.arange(20) % 2
    with pytest.raises(ValueError):
        partition(labels, PartitionSpec("dirichlet", beta=0.01, min_shard=2, seed=0, max_retries=3), 10)
    with pytest.raises(ValueError):
        partition(labels, PartitionSpec("iid", min_shard=3), 10)


def test_single_client_round_equals_client_training():
    ds = toy()
    graph, central = tiny_graph(ds)
    cfg = RoundConfig(rounds=1, clients=1, optimizer=OptimizerSpec(lr=0.01))
    new, _ = run_round(graph, central, [ds], cfg, round_idx=0)
    direct = train_epochs(graph, central, ds.images, ds.labels, cfg.optimizer, seed=(0, 0, 0))
    assert new.equals(direct)


@pytest.mark.parametrize("kind", ["mean", "median"])
def test_identical_clients_aggregate_to_one_client(kind, monkeypatch):
    ds = toy()
    graph, central = tiny_graph(ds)
    cfg = RoundConfig(rounds=1, clients=3, optimizer=OptimizerSpec(lr=0.01), aggregation=AggregationSpec(kind))
    # identical data and identical per-client seeds make every client train the same way
    orig = protocol.client_update
    monkeypatch.setattr(protocol, "client_update", lambda g, c, s, cf, r, i: orig(g, c, s, cf, r, 0))
    new, _ = run_round(graph, central, [ds, ds, ds], cfg)
    one = train_epochs(graph, central, ds.images, ds.labels, cfg.optimizer, seed=(0, 0, 0))
    if kind == "median":
        assert new.equals(one)
    else:
        # (x + x + x) / 3 may round to a neighbour of x
        np.testing.assert_array_max_ulp(new.flatten(), one.flatten(), maxulp=1)


def test_masked_round_is_dense_and_different():
    ds = toy(200)
    graph, central = tiny_graph(ds)
    shards = [ds.subset(s) for s in partition(ds.labels, PartitionSpec(), 10)]
    plain, _ = run_round(graph, central, shards, RoundConfig(clients=10))
    masked, m = run_round(graph, central, shards,
                          RoundConfig(clients=10, obfuscation=ObfuscationSpec("mask", 0.4, 1)))
    assert masked.is_dense() and not masked.equals(plain)
    assert abs(m.masked_fraction - 0.4) <= 3 * np.sqrt(0.24 / (10 * central.total_count))


def test_client_errors_carry_client_id():
    ds = toy()
    graph, central = tiny_graph(ds)
    bad = Dataset(ds.images[:0], ds.labels[:0], ds.num_classes)
    with pytest.raises(ClientError) as err:
        run_round(graph, central, [ds, bad], RoundConfig(clients=2))
    assert err.value.client == 1


def test_clients_only_touch_their_shard(monkeypatch):
    ds = toy(90)
    ids = np.arange(90, dtype=np.float64)
    tagged = Dataset(np.broadcast_to(ids[:, None, None, None], ds.images.shape).copy(), ds.labels, 3)
    shard_idx = partition(tagged.labels, PartitionSpec(seed=4), 3)
    seen = {}
    real = protocol.train_epochs

    def logging_train(graph, central, images, labels, *a, **k):
        seen.setdefault(len(seen), set()).update(np.unique(images).astype(int).tolist())
        return real(graph, central, images, labels, *a, **k)

    monkeypatch.setattr(protocol, "train_epochs", logging_train)
    graph, central = tiny_graph(tagged)
    run_round(graph, central, [tagged.subset(s) for s in shard_idx], RoundConfig(clients=3))
    for client, idx in enumerate(shard_idx):
        assert seen[client] == set(idx.tolist())


def test_one_round_trace_and_determinism():
    ds = toy(150)
    test = toy(60, seed=1)
    cfg = RoundConfig(rounds=2, clients=3, optimizer=OptimizerSpec(lr=0.01), seed=2)
    model = dense_model(ds.shape, 3, seed=2)
    a = run_training(ds, test, cfg, PartitionSpec(seed=2), model)
    b = run_training(ds, test, cfg, PartitionSpec(seed=2), model)
    assert len(a) == 2 and a.accuracy[0] >= 1 / 3 - 0.05
    assert a.to_csv(timing=False) == b.to_csv(timing=False)
    assert a.final.equals(b.final)
    assert a.to_csv().splitlines()[0] == "round,accuracy,loss,wall_ms"


def test_weighted_mean_round_runs():
    ds = toy(100)
    graph, central = tiny_graph(ds)
    shards = [ds.subset(np.arange(0, 70)), ds.subset(np.arange(70, 100))]
    cfg = RoundConfig(clients=2, aggregation=AggregationSpec("mean", weighted=True))
    new, _ = run_round(graph, central, shards, cfg)
    assert new.is_dense()


def test_round_config_validation():
    with pytest.raises(ValueError):
        RoundConfig(rounds=0)
    with pytest.raises(ValueError):
        PartitionSpec("pathological")


@pytest.mark.slow
def test_digits_baseline_converges():
    train, test = load_named("digits", 2000, 1000)
    trace = run_training(train, test, RoundConfig(), PartitionSpec())
    assert trace.accuracy[-1] > 0.9
