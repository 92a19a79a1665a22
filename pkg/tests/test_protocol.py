"""Protocol: payload codec, replay exactness, sampling, round orchestration."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedspzo import costs, data, models, protocol
from fedspzo.errors import ConfigError, ContractViolation
from fedspzo.estimators import SplitConfig
from fedspzo.prng import SeedStream, fold_seed


@pytest.fixture(scope="module")
def task():
    spec = models.mlp_spec(6, (8,), 3)
    ds = data.standardize(data.make_blobs(120, 6, 3, 1.5, seed=5))
    theta0 = models.init_params(spec, 11)
    cfg = SplitConfig(p1=2, p2=8, eps=1e-3, mu=0.05)
    return spec, ds, theta0, cfg


def payload_strategy():
    seeds = st.integers(0, 2**64 - 1)
    scalars = st.floats(allow_nan=False, allow_infinity=False, width=64)

    @st.composite
    def build(draw):
        p1 = draw(st.integers(1, 3))
        ps = draw(st.integers(1, 3))
        p2 = draw(st.sampled_from([0, 2 * p1 * ps]))
        k = draw(st.integers(0, 4))
        mode = draw(st.sampled_from(["with_seeds", "scalars_only"]))
        steps = []
        for _ in range(k):
            if mode == "with_seeds":
                s1 = tuple(draw(seeds) for _ in range(p1))
                s2 = tuple(draw(seeds) for _ in range(p2))
            else:
                s1 = s2 = ()
            steps.append(protocol.StepRecord(g1=draw(scalars), g2=draw(scalars), s1=s1, s2=s2))
        root = draw(seeds) if mode == "scalars_only" else None
        return protocol.ClientPayload(client_id=draw(st.integers(0, 2**32 - 1)),
                                      round_id=draw(st.integers(0, 2**32 - 1)),
                                      mode=mode, p1=p1, p2=p2, steps=tuple(steps),
                                      root_seed=root)
    return build()


@settings(max_examples=150, deadline=None)
@given(payload_strategy())
def test_payload_codec_round_trip(payload):
    blob = protocol.encode_payload(payload)
    assert len(blob) == costs.payload_bytes(payload.k_steps, payload.p1, payload.p2,
                                            payload.mode)
    back = protocol.decode_payload(blob)
    assert back == payload


def test_payload_codec_rejects_garbage():
    with pytest.raises(ConfigError):
        protocol.decode_payload(b"FSPX" + b"\x00" * 40)
    good = protocol.encode_payload(protocol.ClientPayload(
        client_id=1, round_id=2, mode="with_seeds", p1=1, p2=2,
        steps=(protocol.StepRecord(0.5, -0.5, (3,), (4, 5)),)))
    with pytest.raises(ConfigError):
        protocol.decode_payload(good[:-3])
    with pytest.raises(ConfigError):
        protocol.decode_payload(good + b"\x00")


def test_scalars_only_payload_requires_root():
    with pytest.raises(ContractViolation):
        protocol.ClientPayload(client_id=0, round_id=0, mode="scalars_only",
                               p1=1, p2=2, steps=(), root_seed=None)


def test_with_seeds_payload_checks_lengths():
    with pytest.raises(ContractViolation):
        protocol.ClientPayload(client_id=0, round_id=0, mode="with_seeds", p1=2, p2=4,
                               steps=(protocol.StepRecord(0.0, 0.0, (1,), (2, 3, 4, 5)),))


def test_client_train_zero_steps(task):
    spec, ds, theta0, cfg = task
    payload, final = protocol.client_train(spec, theta0, cfg, 0, ds, 8,
                                           root_seed=1, batch_seed=2)
    assert payload.k_steps == 0
    assert np.array_equal(final, theta0)
    rebuilt = protocol.reconstruct(spec, theta0, payload, cfg.mu)
    assert np.array_equal(rebuilt, theta0)


def test_client_train_constant_loss_freezes_parameters():
    spec = models.mlp_spec(5, (6,), 1)  # single-logit head: loss identically 0
    ds = data.Dataset(np.ones((30, 5)), np.zeros(30, dtype=np.int64), 1)
    theta0 = models.init_params(spec, 3)
    cfg = SplitConfig(p1=2, p2=8, eps=1e-3, mu=0.1)
    payload, final = protocol.client_train(spec, theta0, cfg, 5, ds, 4,
                                           root_seed=9, batch_seed=1)
    assert all(rec.g1 == 0.0 and rec.g2 == 0.0 for rec in payload.steps)
    assert final.tobytes() == theta0.tobytes()


# frozen from the first verified run of this exact construction
CLIENT_TRAIN_LOSS_BEFORE = 1.2354431792358553
CLIENT_TRAIN_LOSS_AFTER = 0.6304306612467927


def test_client_train_regression_blobs():
    spec = models.mlp_spec(8, (10,), 3)
    ds = data.standardize(data.make_blobs(200, 8, 3, 1.0, seed=3))
    theta0 = models.init_params(spec, 1)
    cfg = SplitConfig(p1=2, p2=8, eps=1e-3, mu=0.05)
    payload, final = protocol.client_train(spec, theta0, cfg, 20, ds, 16,
                                           root_seed=42, batch_seed=9)
    assert payload.k_steps == 20
    assert all(len(r.s1) == 2 and len(r.s2) == 8 for r in payload.steps)
    before, _ = models.evaluate(spec, theta0, ds.features, ds.labels)
    after, _ = models.evaluate(spec, final, ds.features, ds.labels)
    assert before == pytest.approx(CLIENT_TRAIN_LOSS_BEFORE, rel=1e-9)
    assert after == pytest.approx(CLIENT_TRAIN_LOSS_AFTER, rel=1e-9)
    assert after < before


@pytest.mark.parametrize("precision", [64, 32])
@pytest.mark.parametrize("mode", ["with_seeds", "scalars_only"])
def test_reconstruction_bitwise(precision, mode, task):
    _, ds, _, cfg = task
    spec = models.mlp_spec(6, (8,), 3, precision=precision)
    theta0 = models.init_params(spec, 7)
    payload, final = protocol.client_train(spec, theta0, cfg, 20, ds, 8,
                                           root_seed=13, batch_seed=4, mode=mode)
    blob = protocol.encode_payload(payload)
    rebuilt = protocol.reconstruct(spec, theta0, protocol.decode_payload(blob), cfg.mu)
    assert rebuilt.tobytes() == final.tobytes()


def test_zero_gradient_payload_reconstructs_to_start(task):
    spec, _, theta0, cfg = task
    steps = tuple(protocol.StepRecord(0.0, 0.0, (1, 2), tuple(range(8)))
                  for _ in range(3))
    payload = protocol.ClientPayload(client_id=0, round_id=0, mode="with_seeds",
                                     p1=2, p2=8, steps=steps)
    rebuilt = protocol.reconstruct(spec, theta0, payload, cfg.mu)
    assert rebuilt.tobytes() == theta0.tobytes()


def test_mode_equivalence_same_root(task):
    spec, ds, theta0, cfg = task
    a = protocol.client_train(spec, theta0, cfg, 10, ds, 8, root_seed=21, batch_seed=5,
                              mode="with_seeds")
    b = protocol.client_train(spec, theta0, cfg, 10, ds, 8, root_seed=21, batch_seed=5,
                              mode="scalars_only")
    assert a[1].tobytes() == b[1].tobytes()
    for ra, rb in zip(a[0].steps, b[0].steps):
        assert ra.g1 == rb.g1 and ra.g2 == rb.g2


def test_derived_seeds_match_recorded_consumption(task):
    spec, ds, theta0, cfg = task
    payload, _ = protocol.client_train(spec, theta0, cfg, 20, ds, 8,
                                       root_seed=31, batch_seed=6, mode="with_seeds")
    stream = SeedStream(31)
    for rec in payload.steps:
        s1, s2 = protocol.derive_step_seeds(stream, cfg.p1, cfg.p2)
        assert s1 == rec.s1
        assert s2 == rec.s2


def test_seed_consumption_count_per_step():
    # p1 * (1 + 1 + 2 ps) draws per split step
    class CountingStream(SeedStream):
        def __init__(self, root):
            super().__init__(root)
            self.draws = 0

        def next_seed(self):
            self.draws += 1
            return super().next_seed()

    stream = CountingStream(1)
    p1, ps = 3, 2
    protocol.derive_step_seeds(stream, p1, 2 * p1 * ps)
    assert stream.draws == p1 * (1 + 1 + 2 * ps)
    stream2 = CountingStream(1)
    protocol.derive_step_seeds(stream2, 4, 0)
    assert stream2.draws == 4


def test_distinct_roots_give_distinct_sequences():
    a = protocol.derive_step_seeds(SeedStream(1), 2, 8)
    b = protocol.derive_step_seeds(SeedStream(2), 2, 8)
    assert a != b


def test_aggregate_identities():
    x = np.linspace(-1, 1, 9)
    assert np.array_equal(protocol.aggregate([x]), x)
    same = protocol.aggregate([x, x.copy(), x.copy()])
    assert np.max(np.abs(same - x)) <= np.finfo(float).eps * np.max(np.abs(x))
    zero = protocol.aggregate([x, -x])
    assert np.all(zero == 0)
    with pytest.raises(ContractViolation):
        protocol.aggregate([])
    with pytest.raises(ContractViolation):
        protocol.aggregate([x, np.zeros(4)])


def test_client_sampler_bounds_and_determinism():
    assert protocol.client_sampler(1, 5, 8, 8) == tuple(range(8))
    a = protocol.client_sampler(3, 17, 20, 2)
    assert a == protocol.client_sampler(3, 17, 20, 2)
    assert len(set(a)) == 2 and all(0 <= c < 20 for c in a)
    with pytest.raises(ConfigError):
        protocol.client_sampler(3, 17, 20, 21)


def test_client_sampler_uniform_over_many_rounds():
    n, m, rounds = 20, 2, 10_000
    counts = np.zeros(n)
    for r in range(rounds):
        for cid in protocol.client_sampler(123, r, n, m):
            counts[cid] += 1
    expect = rounds * m / n
    sigma = np.sqrt(rounds * (m / n) * (1 - m / n))
    assert np.all(np.abs(counts - expect) <= 3 * sigma)


def _mini_setting(method="fedspzo"):
    spec = models.mlp_spec(6, (8,), 3)
    ds = data.standardize(data.make_blobs(160, 6, 3, 1.5, seed=5))
    plan = data.partition(ds, 4, "iid", seed=2)
    client_data = [ds.subset(plan.client_indices(c)) for c in range(4)]
    theta0 = models.init_params(spec, 11)
    cfg = SplitConfig(p1=2, p2=8, eps=1e-3, mu=0.05)
    return spec, client_data, theta0, cfg


def test_run_round_single_client_equals_reconstruction():
    spec, client_data, theta0, cfg = _mini_setting()
    plan = protocol.RoundPlan(round_id=1, client_ids=(2,),
                              root_seeds=(fold_seed(7, protocol.TAG_ROOT, 1, 2),))
    new_theta, _ = protocol.run_round(spec, theta0, plan, "fedspzo", cfg, 5, 8,
                                      client_data, master_seed=7)
    payload, final = protocol.client_train(
        spec, theta0, cfg, 5, client_data[2], 8,
        root_seed=fold_seed(7, protocol.TAG_ROOT, 1, 2),
        batch_seed=fold_seed(7, protocol.TAG_BATCH, 1, 2), client_id=2, round_id=1)
    assert np.array_equal(new_theta, final)


def test_run_round_result_independent_of_worker_count():
    spec, client_data, theta0, cfg = _mini_setting()
    plan = protocol.plan_round(9, 1, 4, 3)
    seq, _ = protocol.run_round(spec, theta0, plan, "fedspzo", cfg, 3, 8,
                                client_data, master_seed=9, workers=1)
    par, _ = protocol.run_round(spec, theta0, plan, "fedspzo", cfg, 3, 8,
                                client_data, master_seed=9, workers=3)
    assert seq.tobytes() == par.tobytes()


def test_run_round_ledger_accounts_bytes():
    spec, client_data, theta0, cfg = _mini_setting()
    plan = protocol.plan_round(4, 2, 4, 2)
    ledger = costs.CostLedger()
    protocol.run_round(spec, theta0, plan, "fedspzo", cfg, 3, 8, client_data,
                       master_seed=4, payload_mode="scalars_only", ledger=ledger)
    assert ledger.upload_bytes == 2 * costs.payload_bytes(3, 2, 8, "scalars_only")
    assert ledger.download_bytes == 2 * spec.num_params * 8
    assert ledger.fw_flops > 0 and ledger.update_flops > 0


def test_run_round_fedavg_uploads_model_bytes():
    spec, client_data, theta0, _ = _mini_setting()
    from fedspzo.config import FirstOrderConfig
    plan = protocol.plan_round(4, 1, 4, 2)
    ledger = costs.CostLedger()
    new_theta, _ = protocol.run_round(spec, theta0, plan, "fedavg_fo",
                                      FirstOrderConfig(mu=0.1), 3, 8, client_data,
                                      master_seed=4, ledger=ledger)
    assert ledger.upload_bytes == 2 * spec.num_params * 8
    assert new_theta.shape == theta0.shape
    assert not np.array_equal(new_theta, theta0)
