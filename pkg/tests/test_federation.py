import math
import random

import numpy as np
import pytest

from conftest import config_text
from dpfed import federation as fed_mod
from dpfed.budget import BudgetSchedule
from dpfed.config import ConfigError, parse_config
from dpfed.errors import PrivacyError, ShapeError, TrainingAborted
from dpfed.federation import (
    RECORD_FIELDS,
    AggregationRule,
    ClientState,
    ClientUpdate,
    RoundRecord,
    ServerState,
    aggregate,
    aggregate_models,
    initial_params,
    local_update,
    prepare_federation,
    run_round,
    run_training,
)
from dpfed.mechanism import PrivacySpec
from dpfed.model import LayerShape, MlpSpec, ParamVector, init_params, lr_decay, sgd_epoch
from dpfed.seeding import derive_rng

CENTRAL = """
master_seed = {seed}
[data]
samples_per_class = 40
test_fraction = 0.0
[model]
hidden = [5, 4]
[partition]
clients = 1
[privacy]
enabled = false
[training]
rounds = 5
base_lr = 0.2
decay = 0.1
batch_size = 7
progress_source = "client_weighted_train_loss"
validation_fraction = 0.0
"""


def vec(*values) -> ParamVector:
    return ParamVector(np.array(values, dtype=np.float64), (LayerShape(1, len(values), False),))


def upd(cid, values, n=1):
    return ClientUpdate(cid, vec(*values), n, 0.0, vec(*values))


def collect(config, **kw):
    params = []
    result = run_training(config, on_round=lambda rec, p: params.append(p), **kw)
    return result, params


# ---------------------------------------------------------------- oracles


def centralized_trainer(fed, rounds):
    """Plain SGD on the whole dataset using the same init, shuffle streams, and lr schedule."""
    cfg = fed.config
    data = fed.dataset.batch(np.arange(len(fed.dataset)))
    params = init_params(fed.spec, fed_mod.derive_seed(cfg.master_seed, "init"))
    out = []
    for t in range(1, rounds + 1):
        lr = lr_decay(cfg.training.base_lr, cfg.training.decay, t - 1)
        rng = derive_rng(cfg.master_seed, "shuffle", 0, t)
        for _ in range(cfg.training.local_epochs):
            params = sgd_epoch(params, data, lr, cfg.training.batch_size, rng)
        out.append(params)
    return out


def plain_fedavg(fed, rounds):
    """Noise-free FedAvg: every client trains from the global model, server takes the mean model."""
    cfg = fed.config
    params = initial_params(fed)
    out = []
    for t in range(1, rounds + 1):
        lr = lr_decay(cfg.training.base_lr, cfg.training.decay, t - 1)
        models = []
        for client in fed.clients:
            local = params
            rng = derive_rng(cfg.master_seed, "shuffle", client.client_id, t)
            for _ in range(cfg.training.local_epochs):
                local = sgd_epoch(local, client.data, lr, cfg.training.batch_size, rng)
            models.append(local.values)
        w = 1.0 / len(models)
        acc = w * models[0]
        for m in models[1:]:
            acc = acc + w * m
        params = params.with_values(acc)
        out.append(params)
    return out


# ---------------------------------------------------------------- local_update


def test_zero_lr_gives_zero_update(small_config):
    fed = prepare_federation(small_config())
    params = initial_params(fed)
    u = local_update(fed.clients[0], params, 0.0)
    assert not u.delta.values.any()
    assert u.num_samples == len(fed.clients[0].data)
    with pytest.raises(ValueError):
        local_update(fed.clients[0], params, -0.1)


def test_local_update_deterministic(small_config):
    fed = prepare_federation(small_config())
    params = initial_params(fed)
    a = local_update(fed.clients[1], params, 0.1, round_index=3)
    b = local_update(fed.clients[1], params, 0.1, round_index=3)
    assert a.delta.values.tobytes() == b.delta.values.tobytes()


def test_single_client_local_update_equals_centralized_epoch():
    fed = prepare_federation(parse_config(CENTRAL.format(seed=8)))
    params = initial_params(fed)
    u = local_update(fed.clients[0], params, 0.2, round_index=1)
    want = sgd_epoch(params, fed.dataset.batch(), 0.2, 7, derive_rng(8, "shuffle", 0, 1))
    assert u.local_params.values.tobytes() == want.values.tobytes()
    assert u.delta.values.tobytes() == (want.values - params.values).tobytes()


def test_empty_client_rejected(small_config):
    fed = prepare_federation(small_config())
    with pytest.raises(ValueError):
        ClientState(0, fed.clients[0].data.subset(np.array([], dtype=int)))


# ---------------------------------------------------------------- aggregate


def test_aggregate_examples():
    assert aggregate([upd(0, [1, 2]), upd(1, [3, 4])]).values.tolist() == [2.0, 3.0]
    got = aggregate([upd(0, [0, 0], 10), upd(1, [4, 8], 30)], AggregationRule.SAMPLE_WEIGHTED)
    assert got.values.tolist() == [3.0, 6.0]


def test_sample_weighted_collapses_to_uniform():
    r = np.random.default_rng(0)
    ups = [upd(i, r.standard_normal(6), 17) for i in range(5)]
    np.testing.assert_allclose(
        aggregate(ups, "sample_weighted").values, aggregate(ups, "uniform_mean").values, rtol=0, atol=1e-12
    )


def test_aggregate_permutation_invariant_bitwise():
    r = np.random.default_rng(1)
    ups = [upd(i, r.standard_normal(9), int(r.integers(1, 50))) for i in range(6)]
    ref_u = aggregate(ups).values.tobytes()
    ref_w = aggregate(ups, "sample_weighted").values.tobytes()
    ref_m = aggregate_models(ups).values.tobytes()
    for seed in range(10):
        shuffled = ups[:]
        random.Random(seed).shuffle(shuffled)
        assert aggregate(shuffled).values.tobytes() == ref_u
        assert aggregate(shuffled, "sample_weighted").values.tobytes() == ref_w
        assert aggregate_models(shuffled).values.tobytes() == ref_m


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ShapeError):
        aggregate([upd(0, [1, 2]), upd(1, [1, 2, 3])])
    with pytest.raises(ValueError):
        aggregate([upd(0, [1]), upd(0, [2])])


# ---------------------------------------------------------------- run_round / run_training


def test_single_client_matches_centralized_bitwise():
    for seed in (0, 1, 2):
        config = parse_config(CENTRAL.format(seed=seed))
        _, per_round = collect(config)
        want = centralized_trainer(prepare_federation(config), 5)
        assert len(per_round) == 5
        for got, exp in zip(per_round, want):
            assert got.values.tobytes() == exp.values.tobytes()


def test_disabled_privacy_equals_plain_fedavg(small_config):
    config = small_config(enabled="false", clients=4)
    _, per_round = collect(config)
    want = plain_fedavg(prepare_federation(config), config.training.rounds)
    for got, exp in zip(per_round, want):
        assert got.values.tobytes() == exp.values.tobytes()


def test_run_round_client_order_irrelevant(small_config):
    config = small_config()
    fed = prepare_federation(config)
    params = initial_params(fed)
    state = ServerState(params, 1.0, fed.evaluation, fed.validation, fed.settings)
    outs = []
    for order in (fed.clients, fed.clients[::-1]):
        sched = BudgetSchedule(1.0, 6, 0.05)
        new, rec = run_round(state, order, sched, fed.privacy, 1)
        outs.append((new.values.tobytes(), rec))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]


def test_parallel_workers_identical(small_config, tmp_path):
    base = config_text(rounds=4)
    seq = run_training(parse_config(base))
    par = run_training(parse_config(base.replace("batch_size = 8", "batch_size = 8\nworkers = 3")))
    assert seq.params.values.tobytes() == par.params.values.tobytes()
    assert seq.trace == par.trace


def test_epsilon_plumbing(small_config):
    result = run_training(small_config(epsilon=2.5, rounds=8))
    eps = [r.epsilon_round for r in result.trace]
    assert eps == result.schedule.allocations
    assert abs(math.fsum(eps) - 2.5) <= 1e-9
    assert all(e > 0 for e in eps)
    for r in result.trace:
        assert r.sensitivity_per_client == (0.05, 0.05, 0.05)
        assert all(n > 0 for n in r.noise_l2_per_client)
        assert r.budget_remaining == pytest.approx(2.5 - math.fsum(eps[: r.round]), abs=1e-12)
    assert result.trace[0].epsilon_round == pytest.approx(2.5 / 8)


def test_disabled_trace_has_no_epsilon(small_config):
    result = run_training(small_config(enabled="false"))
    assert result.schedule is None
    assert all(r.epsilon_round is None and r.budget_remaining is None for r in result.trace)
    assert all(r.noise_l2_per_client == (0.0, 0.0, 0.0) for r in result.trace)


def test_zero_rounds_rejected():
    with pytest.raises(ConfigError, match="training.rounds"):
        parse_config(config_text(rounds=0))


def test_run_twice_bitwise(small_config):
    a = run_training(small_config(mode="label_skew"))
    b = run_training(small_config(mode="label_skew"))
    assert a.params.values.tobytes() == b.params.values.tobytes()
    assert [r.to_dict() for r in a.trace] == [r.to_dict() for r in b.trace]


def test_large_epsilon_close_to_disabled():
    diffs = []
    for seed in range(5):
        text = config_text(seed=seed, rounds=20, per_class=50).replace("clip_norm = 0.05", "clip_norm = 1.0")
        noisy = run_training(parse_config(text.replace("epsilon = 1.0", "epsilon = 1000000.0")))
        plain = run_training(parse_config(text.replace("enabled = true", "enabled = false")))
        diffs.append(noisy.trace[-1].metrics.accuracy - plain.trace[-1].metrics.accuracy)
    assert abs(np.mean(diffs)) < 0.01


def test_client_streams_do_not_depend_on_client_count():
    small = ClientState(0, _batch(), master_seed=5)
    a = small.noise_rng(3).standard_normal(4)
    b = ClientState(0, _batch(), master_seed=5).noise_rng(3).standard_normal(4)
    c = ClientState(1, _batch(), master_seed=5).noise_rng(3).standard_normal(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_adding_client_keeps_first_clients_noise():
    # the realized noise of client 0 is the same whether 2 or 3 clients take part
    base = ServerState(init_params(MlpSpec((2, 3, 3, 2)), 0), 1.0, _batch(), _batch())
    privacy = PrivacySpec(1.0, sensitivity_policy=fed_mod.Clipped(0.1))
    norms = []
    for k in (2, 3):
        clients = [ClientState(i, _batch(i), master_seed=9) for i in range(k)]
        _, rec = run_round(base, clients, BudgetSchedule(1.0, 4), privacy, 1)
        norms.append(rec.noise_l2_per_client)
    assert norms[0][:2] == norms[1][:2]


def _batch(seed=0):
    from dpfed.model import TrainingBatch

    r = np.random.default_rng(seed)
    return TrainingBatch(r.standard_normal((12, 2)), r.integers(0, 2, 12))


def test_failure_keeps_partial_trace(small_config, monkeypatch):
    real = fed_mod.release_parts
    calls = {"n": 0}

    def flaky(update, eps, privacy, rng):
        calls["n"] += 1
        if calls["n"] > 3 * 2:  # third round, first client
            raise PrivacyError("injected failure")
        return real(update, eps, privacy, rng)

    monkeypatch.setattr(fed_mod, "release_parts", flaky)
    with pytest.raises(TrainingAborted) as info:
        run_training(small_config())
    assert info.value.round_index == 3
    assert [r.round for r in info.value.trace] == [1, 2]


def test_privacy_without_schedule_rejected(small_config):
    fed = prepare_federation(small_config())
    state = ServerState(initial_params(fed), 1.0, fed.evaluation, fed.validation, fed.settings)
    with pytest.raises(ValueError):
        run_round(state, fed.clients, None, fed.privacy, 1)


def test_early_stopping(small_config):
    text = config_text(rounds=30).replace("batch_size = 8", "batch_size = 8\nearly_stop_threshold = 0.5\nearly_stop_patience = 2")
    result = run_training(parse_config(text))
    quiet = [abs(r.progress) < 0.5 for r in result.trace]
    stop = next(i for i in range(1, len(quiet)) if quiet[i] and quiet[i - 1]) + 1
    assert len(result.trace) == stop < 30


def test_record_round_trip_and_fields(small_config):
    result = run_training(small_config(rounds=2))
    for rec in result.trace:
        d = rec.to_dict()
        assert set(d) == RECORD_FIELDS
        assert RoundRecord.from_dict(d) == rec


def test_prepare_federation_splits(small_config):
    fed = prepare_federation(small_config(per_class=50, test_fraction=0.2, val=0.1))
    n = len(fed.dataset)
    train = np.concatenate(fed.client_indices)
    assert len(fed.evaluation) == 20
    assert len(fed.validation) + train.size + len(fed.evaluation) == n
    assert np.unique(train).size == train.size
    # standardized on the training pool, not on the test split
    pool_x = fed.dataset.features[fed.client_pool]
    np.testing.assert_allclose(pool_x.mean(axis=0), 0.0, atol=1e-12)
