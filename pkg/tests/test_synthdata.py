import numpy as np
import pytest

from fmtlsim import synthdata
from fmtlsim.numkernel import AdamWState, derive_stream
from fmtlsim.synthdata import (DOMAIN_TASKS, TASK_KINDS, build_world,
                               canonicalize_scenario, largest_remainder_shares,
                               make_scenario, pretrain_pool, scenario_spec)


def scenario(sid, seed=0, **kw):
    return make_scenario(scenario_spec(sid, seed, **kw))


# ---------------------------------------------------------------------------
# world generators
# ---------------------------------------------------------------------------

def test_world_is_deterministic():
    a = build_world(5, "A")
    b = build_world(5, "A")
    for t in DOMAIN_TASKS["A"]:
        assert np.array_equal(a.heads[t][0], b.heads[t][0])
    s1 = a.generate(50, derive_stream(5, "x")).x
    s2 = b.generate(50, derive_stream(5, "x")).x
    assert np.array_equal(s1, s2)


def test_domains_use_distinct_worlds_and_inputs():
    a = build_world(5, "A")
    b = build_world(5, "B")
    assert not np.array_equal(a.w1, b.w1)
    xb = b.generate(2000, derive_stream(5, "x")).x
    assert abs(xb.mean() - 1.5) < 0.1


def test_normals_labels_are_unit_vectors():
    world = build_world(1, "A")
    labels = world.generate(500, derive_stream(1, "x")).labels["normals_like"]
    norms = np.linalg.norm(labels, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_edge_positive_rate_near_target():
    world = build_world(2, "A")
    labels = world.generate(8000, derive_stream(2, "x")).labels["edge_like"]
    rate = labels.mean()
    assert 0.12 < rate < 0.30


def test_class_histograms_not_degenerate():
    # no class rarer than a tenth of uniform over a 10k draw
    for domain, task in (("A", "semseg_like"), ("B", "parts_like")):
        world = build_world(3, domain)
        labels = world.generate(10_000, derive_stream(3, "hist", domain)).labels[task]
        n_classes = TASK_KINDS[task].output_dim
        freqs = np.bincount(labels, minlength=n_classes) / len(labels)
        assert freqs.min() > 1.0 / (10 * n_classes), freqs
        assert freqs.max() < 1.0


# ---------------------------------------------------------------------------
# share arithmetic
# ---------------------------------------------------------------------------

def test_largest_remainder_exact_totals():
    assert largest_remainder_shares(2000, [1, 1, 1, 1]) == [500, 500, 500, 500]
    assert largest_remainder_shares(2000, [1, 1, 1]) == [667, 667, 666]
    assert sum(largest_remainder_shares(1234, [3, 2, 2, 1, 1])) == 1234


def test_geometric_shares_ratio_two():
    spec = scenario_spec("NIID-4", 0, train_a=1500)
    counts = [c.train_count for c in spec.clients]
    assert counts == [800, 400, 200, 100]  # proportional to 8:4:2:1


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

def test_scenario_id_canonicalization():
    assert canonicalize_scenario("iid-1") == "IID-1"
    assert canonicalize_scenario("NIID6") == "NIID-6"
    assert canonicalize_scenario("niid_2") == "NIID-2"
    with pytest.raises(ValueError):
        canonicalize_scenario("IID-9")


def test_iid1_four_clients_450_train_50_test():
    data = scenario("IID-1")
    assert len(data.clients) == 4
    for cd in data.clients:
        assert len(cd.train) == 450
        assert len(cd.local_test) == 50
        assert set(cd.spec.tasks) == set(DOMAIN_TASKS["A"])


def test_niid2_task_multiset_is_each_task_once():
    data = scenario("NIID-2")
    tasks = sorted(t for cd in data.clients for t in cd.spec.tasks)
    assert tasks == sorted(DOMAIN_TASKS["A"])
    assert all(len(cd.spec.tasks) == 1 for cd in data.clients)


def test_niid3_merges_both_populations():
    data = scenario("NIID-3")
    assert len(data.clients) == 8
    multi = [cd for cd in data.clients if len(cd.spec.tasks) == 4]
    single = [cd for cd in data.clients if len(cd.spec.tasks) == 1]
    assert len(multi) == 4 and len(single) == 4


def test_niid6_adds_large_cross_domain_multitask_client():
    data = scenario("NIID-6")
    assert len(data.clients) == 5
    b = data.clients[4]
    assert b.spec.domain == "B"
    assert set(b.spec.tasks) == {"normals_like", "parts_like"}
    assert b.spec.train_count > max(c.spec.train_count for c in data.clients[:4])
    assert set(data.global_test) == {"A", "B"}


def test_niid7_single_task_cross_domain_clients():
    data = scenario("NIID-7")
    assert len(data.clients) == 6
    assert data.clients[4].spec.domain == "B"
    assert data.clients[4].spec.tasks == ("parts_like",)
    assert data.clients[5].spec.tasks == ("normals_like",)


def test_client_count_override_only_for_iid1():
    data = scenario("IID-1", client_count=6)
    assert len(data.clients) == 6
    assert sum(c.train_count for c in data.spec.clients) == 2000
    with pytest.raises(ValueError):
        scenario_spec("NIID-2", 0, client_count=6)


@pytest.mark.parametrize("sid", synthdata.SCENARIO_IDS)
def test_shares_sum_to_pool_and_sets_are_disjoint(sid):
    data = scenario(sid)
    by_domain = {}
    for cd in data.clients:
        by_domain.setdefault(cd.spec.domain, []).append(cd)
    pools = {"A": 2000, "B": 4000}
    for domain, cds in by_domain.items():
        assert sum(c.spec.train_count for c in cds) == pools[domain]
        # disjointness across every split of every client plus the test pool
        rows = [cd.train.x for cd in cds] + [cd.local_test.x for cd in cds]
        rows.append(data.global_test[domain].x)
        stacked = np.concatenate(rows)
        assert len(np.unique(stacked, axis=0)) == len(stacked)


def test_scenario_regeneration_is_bit_identical():
    a = scenario("NIID-6", seed=11)
    b = scenario("NIID-6", seed=11)
    for ca, cb in zip(a.clients, b.clients):
        assert np.array_equal(ca.train.x, cb.train.x)
        for t in ca.spec.tasks:
            assert np.array_equal(ca.train.labels[t], cb.train.labels[t])
    assert np.array_equal(a.global_test["B"].x, b.global_test["B"].x)


def test_local_split_is_one_tenth():
    data = scenario("NIID-4")
    for cd in data.clients:
        total = len(cd.train) + len(cd.local_test)
        assert total == cd.spec.train_count
        assert len(cd.local_test) == int(round(total / 10))


# ---------------------------------------------------------------------------
# pretrain pool
# ---------------------------------------------------------------------------

def test_pretrain_pool_deterministic_and_sized():
    a = pretrain_pool(0, "A", 600)
    b = pretrain_pool(0, "A", 600)
    assert len(a.train) + len(a.local_test) == 600
    assert np.array_equal(a.train.x, b.train.x)


def test_pretrain_pool_disjoint_from_scenario_data():
    pool = pretrain_pool(0, "A", 600)
    data = scenario("IID-1", seed=0)
    scenario_x = np.concatenate([cd.train.x for cd in data.clients]
                                + [data.global_test["A"].x])
    merged = np.concatenate([pool.train.x, scenario_x])
    assert len(np.unique(merged, axis=0)) == len(merged)


# ---------------------------------------------------------------------------
# generator calibration: each task is learnable from the latent
# ---------------------------------------------------------------------------

def test_oracle_model_beats_trivial_predictors():
    from fmtlsim.evalstat import metric_value
    from fmtlsim.fedcore import ClientState, local_train
    from fmtlsim.models import ModelArch, init_params, predict
    from fmtlsim.synthdata import ClientSpec, ClientDataset

    world = build_world(0, "A")
    train = world.generate(600, derive_stream(0, "calib", "train"))
    test = world.generate(800, derive_stream(0, "calib", "test"))
    tasks = DOMAIN_TASKS["A"]

    arch = ModelArch("MD")
    params = init_params(arch, tasks, derive_stream(0, "calib-model"))
    cspec = ClientSpec(0, "A", tasks, 600)
    client = ClientState(0, ClientDataset(train, test, cspec), arch, params,
                         AdamWState.init(len(params)),
                         derive_stream(0, "calib", "shuffle").generator())
    local_train(client, lr=3e-3, epochs=12)

    preds = predict(client.params, arch, test.x, tasks)
    for t in tasks:
        kind = TASK_KINDS[t]
        learned = metric_value(t, preds[t], test.labels[t])
        trivial_pred = _trivial_prediction(t, train, test)
        trivial = metric_value(t, trivial_pred, test.labels[t])
        if kind.lower_is_better:
            assert learned < trivial, (t, learned, trivial)
        else:
            assert learned > trivial, (t, learned, trivial)


def _trivial_prediction(task, train, test):
    n = len(test)
    y = train.labels[task]
    if task == "depth_like":
        return np.full((n, 1), float(np.mean(y)))
    if task == "edge_like":
        # constant logit at the empirical base rate
        rate = float(np.clip(np.mean(y), 1e-6, 1 - 1e-6))
        return np.full((n, 1), np.log(rate / (1 - rate)))
    if task == "normals_like":
        mean = np.mean(y, axis=0)
        mean /= np.linalg.norm(mean)
        return np.tile(mean, (n, 1))
    # majority class via one-hot scores
    counts = np.bincount(train.labels[task], minlength=TASK_KINDS[task].output_dim)
    scores = np.zeros((n, TASK_KINDS[task].output_dim))
    scores[:, int(np.argmax(counts))] = 1.0
    return scores
