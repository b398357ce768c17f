import copy

import numpy as np
import pytest

from fmtlsim.fedcore import (ClientState, CommLedger, RunConfig, StrategyHyperparams,
                             StrategyId, aggregate, broadcast_volume_bytes,
                             build_clients, check_aggregation_layouts,
                             fedamp_mixing_weights, improvement_vs_target,
                             local_train, parse_strategy, payload_reals,
                             round_traffic, run_experiment,
                             train_pretrain_checkpoint)
from fmtlsim.models import ENCODER_LEN, ModelArch, init_params, layout_for
from fmtlsim.numkernel import (AdamWState, LayoutMismatch, SegmentedParams,
                               derive_stream, save_checkpoint)
from fmtlsim.synthdata import (DOMAIN_TASKS, ClientDataset, ClientSpec,
                               build_world, make_scenario, scenario_spec)

A_TASKS = DOMAIN_TASKS["A"]
HP = StrategyHyperparams()


def make_client(client_id, tasks=A_TASKS, arch_kind="MD", seed=0, n_train=40):
    world = build_world(seed, "A")
    train = world.generate(n_train, derive_stream(seed, "tr", client_id)).restrict(tasks)
    test = world.generate(10, derive_stream(seed, "te", client_id)).restrict(tasks)
    arch = ModelArch(arch_kind)
    params = init_params(arch, tasks, derive_stream(seed, "model"))
    spec = ClientSpec(client_id, "A", tuple(tasks), n_train)
    return ClientState(client_id, ClientDataset(train, test, spec), arch, params,
                       AdamWState.init(len(params)),
                       derive_stream(seed, "client", client_id, "train").generator())


def clone_client(c):
    out = copy.copy(c)
    out.params = c.params.copy()
    out.opt = AdamWState.init(len(c.params), weight_decay=c.opt.weight_decay)
    out.opt.step_count = c.opt.step_count
    out.opt.first_moment = c.opt.first_moment.copy()
    out.opt.second_moment = c.opt.second_moment.copy()
    out.gen = derive_stream(0, "client", c.client_id, "train").generator()
    out.extras = dict(c.extras)
    return out


# ---------------------------------------------------------------------------
# strategy ids
# ---------------------------------------------------------------------------

def test_strategy_parsing_and_forced_flags():
    assert parse_strategy("fedavg-E").decoupled
    assert parse_strategy("fedavg").label == "fedavg"
    assert parse_strategy("fedavg", True).label == "fedavg-E"
    assert StrategyId("matfl").decoupled          # decoupled by definition
    assert StrategyId("fedrep", False).decoupled
    assert not StrategyId("local", True).decoupled  # flag ignored
    with pytest.raises(ValueError):
        parse_strategy("fedsgd")


# ---------------------------------------------------------------------------
# ledger accounting
# ---------------------------------------------------------------------------

def test_payload_is_encoder_when_decoupled():
    layout = layout_for(ModelArch("MD"), A_TASKS)
    assert payload_reals(StrategyId("fedavg"), layout) == layout.total_length
    assert payload_reals(StrategyId("fedavg", True), layout) == ENCODER_LEN
    assert payload_reals(StrategyId("local"), layout) == 0


def test_round_traffic_shapes():
    assert round_traffic(StrategyId("local"), 4, 100) == (0, 0)
    assert round_traffic(StrategyId("fedavg"), 4, 100) == (3200, 3200)
    assert round_traffic(StrategyId("fedmtl"), 4, 100) == (3200, 12800)


def test_broadcast_volume_ratio_identities():
    k, enc, total = 4, 3168.0, 8448.0
    fedavg = broadcast_volume_bytes(StrategyId("fedavg"), k, total)
    matfl = broadcast_volume_bytes(StrategyId("matfl"), k, enc)
    fedmtl = broadcast_volume_bytes(StrategyId("fedmtl"), k, total)
    assert matfl / fedavg == pytest.approx(enc / total, rel=1e-12)
    assert fedmtl / fedavg == pytest.approx(k, rel=1e-12)


# ---------------------------------------------------------------------------
# local training
# ---------------------------------------------------------------------------

def test_local_train_is_deterministic():
    a = make_client(0)
    b = clone_client(a)
    local_train(a, 1e-3, 2)
    local_train(b, 1e-3, 2)
    assert np.array_equal(a.params.values, b.params.values)


def test_prox_zero_mu_is_bitwise_noop():
    a = make_client(0)
    b = clone_client(a)
    anchor = a.params.values.copy()
    local_train(a, 1e-3, 2)
    local_train(b, 1e-3, 2, prox=(0.0, anchor))
    assert np.array_equal(a.params.values, b.params.values)


def test_huge_mu_pins_params_to_anchor():
    c = make_client(0)
    anchor = c.params.values.copy()
    local_train(c, 1e-3, 2, prox=(1e6, anchor))
    assert np.max(np.abs(c.params.values - anchor)) < 1e-3


def test_freeze_encoder_keeps_encoder_bits():
    c = make_client(0)
    before = c.params.segment("encoder").copy()
    decoder_before = c.params.segment("decoder:depth_like").copy()
    local_train(c, 1e-3, 1, freeze="encoder")
    assert np.array_equal(c.params.segment("encoder"), before)
    assert not np.array_equal(c.params.segment("decoder:depth_like"), decoder_before)


def test_freeze_heads_keeps_all_but_encoder():
    c = make_client(0)
    dec_before = c.params.segment("decoder:edge_like").copy()
    enc_before = c.params.segment("encoder").copy()
    local_train(c, 1e-3, 1, freeze="heads")
    assert np.array_equal(c.params.segment("decoder:edge_like"), dec_before)
    assert not np.array_equal(c.params.segment("encoder"), enc_before)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_fedavg_over_identical_clients_is_identity():
    clients = [make_client(i) for i in range(3)]
    ref = clients[0].params.values.copy()
    ledger = CommLedger()
    aggregate(StrategyId("fedavg"), clients, clients[0].params.copy(), ledger, 1, HP)
    for c in clients:
        assert np.array_equal(c.params.values, ref)


def test_aggregate_ignores_client_list_order():
    def run(order):
        clients = [make_client(i) for i in range(4)]
        for i, c in enumerate(clients):
            local_train(c, 1e-3, 1)
        ledger = CommLedger()
        aggregate(StrategyId("fedavg"), [clients[i] for i in order],
                  clients[0].params.copy(), ledger, 1, HP)
        return clients[0].params.values

    np.testing.assert_array_equal(run([0, 1, 2, 3]), run([3, 1, 0, 2]))


def test_fedamp_identical_clients_anchor_is_own_params():
    clients = [make_client(i) for i in range(2)]
    aggregate(StrategyId("fedamp"), clients, None, CommLedger(), 1, HP)
    for c in clients:
        assert np.array_equal(c.extras["amp_anchor"], c.params.values)


def test_fedamp_mixing_rows_are_convex_after_rescue():
    gen = np.random.default_rng(0)
    vecs = [gen.standard_normal(50) * 0.01 for _ in range(5)]
    # alpha large enough that 4 * alpha * exp(-small) > 1 triggers the rescue
    for i in range(5):
        row = fedamp_mixing_weights(vecs, i, alpha=0.5, sigma=1.0)
        assert np.all(row >= 0)
        assert row.sum() == pytest.approx(1.0, abs=1e-12)
        assert row[i] >= 0


def test_fedmtl_anchor_is_population_mean_and_no_param_change():
    clients = [make_client(i) for i in range(3)]
    for c in clients:
        local_train(c, 1e-3, 1)
    before = [c.params.values.copy() for c in clients]
    aggregate(StrategyId("fedmtl"), clients, None, CommLedger(), 1, HP)
    mean = np.mean(before, axis=0)
    for c, b in zip(clients, before):
        assert np.array_equal(c.params.values, b)
        np.testing.assert_allclose(c.extras["mtl_anchor"], mean, atol=1e-12)


def test_matfl_identical_encoders_stay_fixed():
    clients = [make_client(i) for i in range(3)]
    enc = clients[0].params.segment("encoder").copy()
    aggregate(StrategyId("matfl"), clients, None, CommLedger(), 1, HP)
    for c in clients:
        np.testing.assert_allclose(c.params.segment("encoder"), enc, atol=1e-12)


def test_fedrep_averages_encoders_only():
    clients = [make_client(i) for i in range(2)]
    local_train(clients[0], 1e-3, 1)
    dec_before = [c.params.segment("decoder:depth_like").copy() for c in clients]
    encs = [c.params.segment("encoder").copy() for c in clients]
    aggregate(StrategyId("fedrep"), clients, None, CommLedger(), 1, HP)
    expected = encs[0] + 0.5 * (encs[1] - encs[0])
    for c, d in zip(clients, dec_before):
        np.testing.assert_allclose(c.params.segment("encoder"), expected, atol=1e-12)
        assert np.array_equal(c.params.segment("decoder:depth_like"), d)


def _surgery_fixture(direction_scale):
    """Clients whose deltas from the global model are mutually
    non-conflicting (positive multiples of one direction)."""
    clients = [make_client(i) for i in range(3)]
    global_p = clients[0].params.copy()
    gen = np.random.default_rng(5)
    u = gen.standard_normal(len(global_p))
    for i, c in enumerate(clients):
        c.params = SegmentedParams(global_p.values - (i + 1) * direction_scale * u,
                                   c.params.layout)
    return clients, global_p


@pytest.mark.parametrize("name", ["pcgrad", "cagrad"])
def test_surgery_on_non_conflicting_deltas_equals_fedavg(name):
    hp = StrategyHyperparams(cagrad_c=0.0)  # cagrad reduces to the mean at c=0
    clients, global_p = _surgery_fixture(1e-3)
    fedavg_clients = [clone_client(c) for c in clients]
    for fc, c in zip(fedavg_clients, clients):
        fc.params = c.params.copy()

    new_global = aggregate(StrategyId(name), clients, global_p.copy(),
                           CommLedger(), 1, hp, derive_stream(0, "surgery", 1))
    aggregate(StrategyId("fedavg"), fedavg_clients, global_p.copy(),
              CommLedger(), 1, hp)
    np.testing.assert_allclose(new_global.values, fedavg_clients[0].params.values,
                               rtol=0, atol=1e-12)


def test_null_rule_heterogeneous_full_model():
    spec = scenario_spec("NIID-6", 0)
    data = make_scenario(spec)
    cfg = RunConfig("NIID-6", "MD", StrategyId("fedavg"), seed=0)
    clients = build_clients(cfg, data)
    with pytest.raises(LayoutMismatch):
        check_aggregation_layouts(StrategyId("fedavg"), clients)
    with pytest.raises(LayoutMismatch):
        check_aggregation_layouts(StrategyId("fedmtl"), clients)
    # encoder-only federation over the same population is well defined
    check_aggregation_layouts(StrategyId("fedavg", True), clients)
    check_aggregation_layouts(StrategyId("matfl"), clients)


def test_single_task_population_aggregates_structurally():
    spec = scenario_spec("NIID-2", 0)
    data = make_scenario(spec)
    cfg = RunConfig("NIID-2", "MD", StrategyId("fedavg"), seed=0)
    clients = build_clients(cfg, data)
    check_aggregation_layouts(StrategyId("fedavg"), clients)  # no exception


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def small_cfg(**kw):
    base = dict(scenario="IID-1", arch="MD", strategy=StrategyId("fedavg"),
                seed=0, rounds=4, eval_interval=2, train_a=400, test_a=200,
                run_id="test")
    base.update(kw)
    return RunConfig(**base)


def test_local_strategy_has_zero_ledger(tmp_path):
    rep = run_experiment(small_cfg(strategy=StrategyId("local"), rounds=2),
                         tmp_path / "r")
    assert rep["comm"]["bytes_total"] == 0


def test_decoupled_round_bytes_exact(tmp_path):
    rep = run_experiment(small_cfg(strategy=StrategyId("fedavg", True), rounds=3),
                         tmp_path / "r")
    per_round = 2 * 4 * 8 * ENCODER_LEN
    assert rep["comm"]["bytes_total"] == 3 * per_round


def test_rerun_same_config_is_bit_identical(tmp_path):
    cfg = small_cfg(strategy=StrategyId("fedamp"), rounds=3)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("rounds.csv", "ledger.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_workers_match_sequential(tmp_path):
    run_experiment(small_cfg(rounds=3, workers=1), tmp_path / "seq")
    run_experiment(small_cfg(rounds=3, workers=4), tmp_path / "par")
    assert (tmp_path / "seq" / "rounds.csv").read_bytes() == \
        (tmp_path / "par" / "rounds.csv").read_bytes()


def test_fedprox_zero_mu_matches_fedavg_trajectory(tmp_path):
    cfg_a = small_cfg(strategy=StrategyId("fedavg"), rounds=3)
    cfg_b = small_cfg(strategy=StrategyId("fedprox"), rounds=3,
                      hyper=StrategyHyperparams(mu=0.0))
    run_experiment(cfg_a, tmp_path / "avg")
    run_experiment(cfg_b, tmp_path / "prox")
    assert (tmp_path / "avg" / "rounds.csv").read_bytes() == \
        (tmp_path / "prox" / "rounds.csv").read_bytes()


def test_null_run_records_status_without_crash(tmp_path):
    cfg = small_cfg(scenario="NIID-3", strategy=StrategyId("fedavg"), rounds=2,
                    train_a=800)
    rep = run_experiment(cfg, tmp_path / "r")
    assert rep["status"] == "null_baseline"
    assert (tmp_path / "r" / "report.json").exists()
    assert (tmp_path / "r" / "rounds.csv").read_text().strip() == \
        "round,client_id,task,split,metric_name,value"


def test_fedavg_improves_over_round_zero_snapshot(tmp_path):
    # frozen expectation from the first verified run of this config
    rep = run_experiment(small_cfg(rounds=12, train_a=1200, test_a=400),
                         tmp_path / "r")
    rows = (tmp_path / "r" / "rounds.csv").read_text().splitlines()[1:]
    values = {}
    for line in rows:
        round_idx, cid, task, split, metric, value = line.split(",")
        if split == "G":
            values.setdefault((task, int(round_idx)), []).append(float(value))
    improved = 0
    for task in {"depth_like@A", "edge_like@A", "normals_like@A", "semseg_like@A"}:
        first = np.mean(values[(task, 0)])
        last = np.mean(values[(task, 12)])
        lower = not task.startswith("semseg")
        improved += (last < first) if lower else (last > first)
    assert improved >= 3


def test_local_epochs_resolve_by_domain_mix():
    from fmtlsim.fedcore import resolved_epochs
    a_only = make_scenario(scenario_spec("IID-1", 0))
    with_b = make_scenario(scenario_spec("NIID-7", 0))
    cfg = RunConfig("IID-1", "MD", StrategyId("local"), seed=0)
    assert resolved_epochs(cfg, a_only) == 4
    assert resolved_epochs(cfg, with_b) == 1
    cfg_explicit = RunConfig("IID-1", "MD", StrategyId("local"), seed=0, local_epochs=2)
    assert resolved_epochs(cfg_explicit, with_b) == 2


def test_improvement_vs_target_validates_task_sets():
    finals = {"G": {"depth_like@A": {"mean": 1.0, "lower_is_better": True}},
              "P": {"depth_like@A": {"mean": 1.0, "lower_is_better": True}}}
    target = {"G": {}, "P": {}}
    with pytest.raises(ValueError, match="depth_like@A"):
        improvement_vs_target(finals, target)
    self_rep = improvement_vs_target(finals, None)
    assert self_rep["G"]["delta_percent"] == 0.0


def test_warm_start_overlays_matching_segments(tmp_path):
    params = train_pretrain_checkpoint(seed=0, arch_kind="MD", count=200, epochs=1)
    ckpt = tmp_path / "warm.fmtlckpt"
    save_checkpoint(ckpt, params)
    cfg = small_cfg(rounds=2, warm_start=str(ckpt))
    data = make_scenario(scenario_spec("IID-1", 0, train_a=400, test_a=200))
    clients = build_clients(cfg, data)
    for c in clients:
        assert np.array_equal(c.params.segment("encoder"), params.segment("encoder"))
