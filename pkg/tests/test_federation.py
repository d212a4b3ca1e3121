import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfs import numerics as nx
from hfs.analysis import read_rounds
from hfs.config import DatasetConfig, PartitionConfig, RunConfig
from hfs.errors import ConfigError, ContractError, InvariantError, NumericError
from hfs.federation import (EMPTY, ClientState, OptimizerSpec, Payload, aggregate, audit_hfn_payload,
                            client_theta_vectors, client_update_baseline, client_update_hfn, deployed_theta,
                            fine_tune, init_state, phi_payload, prepare, run_experiment, select_clients, sgd_step,
                            substream)
from hfs.hypernet import HyperNet, HyperNetConfig, generate_theta, param_count, serialize_phi
from hfs.mainnet import BetaParams, build_arch, forward
from hfs.numerics import Tensor


def tiny_cfg(**kw):
    base = dict(algorithm="hfn", clients=4, join_rate=0.5, rounds=2, local_epochs=1, fine_tune_epochs=1,
                batch_size=8, lr=0.005, embedding_size=2, seed=3,
                dataset=DatasetConfig(samples_per_class=10, noise_sigma=0.3))
    base.update(kw)
    return RunConfig(**base)


def hfn_setup(**kw):
    setup = prepare(tiny_cfg(**kw))
    server, clients = init_state(setup)
    return setup, server, clients


# -- seeding and optimizer ---------------------------------------------------------

def test_substreams_are_deterministic_and_distinct():
    a = substream(5, "selection", 1).random(4)
    np.testing.assert_array_equal(a, substream(5, "selection", 1).random(4))
    assert not np.array_equal(a, substream(5, "selection", 2).random(4))
    assert not np.array_equal(a, substream(5, "batching", 1).random(4))
    assert not np.array_equal(a, substream(6, "selection", 1).random(4))


def test_sgd_plain_step():
    spec = OptimizerSpec(lr=0.1, momentum=0.0, weight_decay=0.0)
    (p,), _ = sgd_step([Tensor([2.0])], [np.array([3.0])], [None], spec)
    np.testing.assert_allclose(p.data, [1.7])


def test_sgd_nesterov_hand_trace():
    spec = OptimizerSpec(lr=0.1, momentum=0.9, weight_decay=0.0)
    (p,), (u,) = sgd_step([Tensor([1.0])], [np.array([1.0])], [np.zeros(1)], spec)
    np.testing.assert_allclose(u, [1.0])
    np.testing.assert_allclose(p.data, [0.81])
    (p2,), (u2,) = sgd_step([p], [np.array([1.0])], [u], spec)
    np.testing.assert_allclose(u2, [1.9])
    np.testing.assert_allclose(p2.data, [0.81 - 0.1 * (1.0 + 0.9 * 1.9)])


def test_sgd_weight_decay_and_classical_momentum():
    spec = OptimizerSpec(lr=0.5, momentum=0.5, weight_decay=0.1, nesterov=False)
    (p,), (u,) = sgd_step([Tensor([2.0])], [np.array([0.0])], [np.array([1.0])], spec)
    np.testing.assert_allclose(u, [0.5 + 0.2])
    np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.7])


def test_sgd_zero_gradient_is_a_no_op():
    spec = OptimizerSpec(lr=0.1, momentum=0.9, weight_decay=0.0)
    (p,), _ = sgd_step([Tensor([1.5, -2.0])], [np.zeros(2)], [None], spec)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_rejects_non_finite_and_bad_shapes():
    spec = OptimizerSpec()
    with pytest.raises(NumericError, match="client 7"):
        sgd_step([Tensor([1.0])], [np.array([np.nan])], [None], spec, context="client 7")
    with pytest.raises(ContractError):
        sgd_step([Tensor([1.0])], [np.zeros(2)], [None], spec)


def test_multistep_schedule():
    cfg = RunConfig(lr=0.1, lr_schedule="multistep", rounds=8)
    spec = OptimizerSpec.from_config(cfg)
    assert spec.milestones == (4, 6)
    assert [round(spec.lr_at(t), 10) for t in (1, 4, 5, 6, 7)] == [0.1, 0.1, 0.01, 0.01, 0.001]


# -- selection and aggregation ------------------------------------------------------

@pytest.mark.parametrize("K,C,m", [(100, 0.25, 25), (3, 0.1, 1), (20, 0.25, 5), (10, 1.0, 10), (7, 0.3, 2)])
def test_select_clients_sizes(K, C, m):
    chosen = select_clients(K, C, np.random.default_rng(0))
    assert len(chosen) == m == max(math.floor(C * K + 1e-9), 1)
    assert chosen == sorted(set(chosen)) and all(0 <= k < K for k in chosen)


def test_select_clients_deterministic_and_validated():
    assert select_clients(50, 0.2, substream(1, "selection", 3)) == select_clients(50, 0.2, substream(1, "selection", 3))
    with pytest.raises(ConfigError):
        select_clients(0, 0.5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        select_clients(5, 0.0, np.random.default_rng(0))


def test_aggregate_examples():
    np.testing.assert_array_equal(aggregate([np.array([1.0, 1.0]), np.array([3.0, 3.0])], [1, 3]), [2.5, 2.5])
    p = np.array([0.1, -7.0, 3.3])
    assert aggregate([p], [5]).tobytes() == p.tobytes()
    assert aggregate([p, p.copy(), p.copy()], [1, 2, 9]).tobytes() == p.tobytes()


def test_aggregate_errors():
    with pytest.raises(ContractError):
        aggregate([], [])
    with pytest.raises(ContractError):
        aggregate([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(ContractError):
        aggregate([np.zeros(2)], [0])
    with pytest.raises(ContractError):
        aggregate([np.zeros(2)], [1, 2])


@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**32 - 1), st.floats(-4, 4))
@settings(max_examples=150, deadline=None)
def test_aggregate_oracle_and_linearity(n, length, seed, scale):
    rng = np.random.default_rng(seed)
    P = [rng.normal(size=length) for _ in range(n)]
    w = rng.integers(1, 100, size=n)
    oracle = sum(wk * p for wk, p in zip(w, P)) / w.sum()
    out = aggregate(P, w)
    assert np.max(np.abs(out - oracle)) <= 1e-13 * max(1.0, np.abs(P).max())
    np.testing.assert_allclose(aggregate([scale * p for p in P], w), scale * out, atol=1e-12)


# -- payloads -------------------------------------------------------------------------

def test_hfn_payload_is_phi_only():
    setup, server, _ = hfn_setup()
    payload = phi_payload(server.phi)
    audit_hfn_payload(payload, setup.hypernet)
    assert payload.size == param_count(setup.hypernet)
    assert payload.to_bytes() == serialize_phi(server.phi)
    assert payload.sources == {"phi.W", "phi.B", "phi.W_out", "phi.B_out"}


def test_audit_rejects_foreign_content():
    setup, server, clients = hfn_setup()
    leaky = Payload.pack([("phi.W", server.phi.W), ("v", clients[0].embeddings)])
    with pytest.raises(InvariantError, match="non-phi"):
        audit_hfn_payload(leaky, setup.hypernet)
    short = Payload.pack([("phi.W", server.phi.W)])
    with pytest.raises(InvariantError):
        audit_hfn_payload(short, setup.hypernet)


def _baseline_setup(alg):
    setup = prepare(tiny_cfg(algorithm=alg))
    server, clients = init_state(setup)
    return setup, server, clients


def test_local_uploads_nothing():
    setup, server, clients = _baseline_setup("local")
    payload, _, rep = client_update_baseline("local", clients[0], None, setup.arch, setup.spec,
                                             np.random.default_rng(0))
    assert payload is EMPTY and payload.size == 0
    assert rep.n_k == clients[0].n_k


def test_fedper_payload_is_conv_stack():
    setup, server, clients = _baseline_setup("fedper")
    payload, _, _ = client_update_baseline("fedper", clients[0], server.weights, setup.arch, setup.spec,
                                           np.random.default_rng(0))
    assert payload.size == setup.arch.conv_param_count()
    assert all(tag.startswith("conv") for tag in payload.sources)


def test_fedavg_payload_is_full_model():
    setup, server, clients = _baseline_setup("fedavg")
    payload, _, _ = client_update_baseline("fedavg", clients[0], server.weights, setup.arch, setup.spec,
                                           np.random.default_rng(0))
    assert payload.size == setup.arch.conv_param_count() + setup.arch.classifier_param_count()


def test_fedprox_zero_mu_matches_fedavg():
    setup, server, clients = _baseline_setup("fedprox")
    a, _, ra = client_update_baseline("fedprox", clients[1], server.weights, setup.arch, setup.spec,
                                      np.random.default_rng(4), mu_prox=0.0)
    b, _, rb = client_update_baseline("fedavg", clients[1], server.weights, setup.arch, setup.spec,
                                      np.random.default_rng(4))
    assert a.to_bytes() == b.to_bytes()
    assert ra.epoch_losses == rb.epoch_losses


def test_fedprox_loss_at_least_fedavg_loss():
    setup, server, clients = _baseline_setup("fedprox")
    c = clients[0]
    w = server.weights
    shifted = w + np.random.default_rng(1).normal(scale=0.1, size=w.size)
    conv_shapes = setup.arch.conv_shapes()
    sizes = [int(np.prod(s)) for s in conv_shapes] + [setup.arch.num_classes * setup.arch.in_features,
                                                      setup.arch.num_classes]
    shapes = conv_shapes + [(setup.arch.num_classes, setup.arch.in_features), (setup.arch.num_classes,)]
    pieces = np.split(shifted, np.cumsum(sizes)[:-1])
    params = [Tensor(p.reshape(s)) for p, s in zip(pieces, shapes)]
    batch = c.train_idx[:8]
    _, base = forward(setup.arch, params[:3], BetaParams(*params[3:]), c.data.images[batch], c.data.labels[batch])
    prox = sum(float(((p.data.ravel() - a) ** 2).sum()) for p, a in zip(params, np.split(w, np.cumsum(sizes)[:-1])))
    assert base.item() + 0.5 * 0.01 * prox > base.item()


def test_unknown_baseline_rejected():
    setup, server, clients = _baseline_setup("fedavg")
    with pytest.raises(ConfigError):
        client_update_baseline("fedsgd", clients[0], server.weights, setup.arch, setup.spec,
                               np.random.default_rng(0))


# -- HFN local update -------------------------------------------------------------------

def test_zero_learning_rate_leaves_phi_bitwise():
    setup, server, clients = hfn_setup()
    phi_k, _, rep = client_update_hfn(clients[0], server.phi, setup.arch, setup.spec, np.random.default_rng(0),
                                      lr=0.0)
    assert serialize_phi(phi_k) == serialize_phi(server.phi)
    assert len(rep.epoch_losses) == 1


def test_hfn_update_is_deterministic():
    setup, server, clients = hfn_setup()
    runs = [client_update_hfn(clients[2], server.phi, setup.arch, setup.spec, substream(0, "batching", 1, 2))
            for _ in range(2)]
    assert serialize_phi(runs[0][0]) == serialize_phi(runs[1][0])
    assert runs[0][1].embeddings.data.tobytes() == runs[1][1].embeddings.data.tobytes()
    assert serialize_phi(runs[0][0]) != serialize_phi(server.phi)


def test_hfn_scalar_toy_update_matches_hand_chain_rule():
    # All dims 1: one 1x1 conv, 1 input channel, 2 classes, one pixel, one sample.
    arch = build_arch({"convs": [{"c_in": 1, "c_out": 1, "f": 1}], "num_classes": 2})
    hcfg = HyperNetConfig(1, 1, 1, 1, 1)
    phi = HyperNet(hcfg, Tensor([[[0.7]]], requires_grad=True), Tensor([[0.2]], requires_grad=True),
                   Tensor([[[1.3]]], requires_grad=True), Tensor([[-0.1]], requires_grad=True))
    from hfs.data import Dataset
    ds = Dataset(np.full((1, 1, 1, 1), 0.6), np.array([1]), 2)
    beta = BetaParams(Tensor([[0.5], [-0.4]], requires_grad=True), Tensor([0.0, 0.1], requires_grad=True))
    v = Tensor([[0.9]], requires_grad=True)
    client = ClientState(0, ds, np.array([0]), np.array([], dtype=np.int64), beta, embeddings=v)
    spec = OptimizerSpec(lr=0.1, momentum=0.9, weight_decay=5e-4, batch_size=1, local_epochs=1)
    phi_k, new_client, _ = client_update_hfn(client, phi, arch, spec, np.random.default_rng(0))

    # Hand chain rule: w = W_out*(W*v + B) + B_out; h = relu(w*x); logits = beta_W*h + beta_b.
    x, W, B, Wo, Bo = 0.6, 0.7, 0.2, 1.3, -0.1
    a = W * 0.9 + B
    w = Wo * a + Bo
    h = max(w * x, 0.0)
    z = np.array([0.5 * h, -0.4 * h + 0.1])
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    dz = p - np.array([0.0, 1.0])
    dh = dz @ np.array([0.5, -0.4])
    dw = dh * x * (w * x > 0)
    grads = {"W": dw * Wo * 0.9, "B": dw * Wo, "W_out": dw * a, "B_out": dw, "v": dw * Wo * W}
    start = {"W": W, "B": B, "W_out": Wo, "B_out": Bo, "v": 0.9}
    step = lambda name: start[name] - 0.1 * 1.9 * (grads[name] + 5e-4 * start[name])
    got = dict(zip(("W", "B", "W_out", "B_out"), (float(t.data.ravel()[0]) for t in phi_k.params())))
    got["v"] = float(new_client.embeddings.data.ravel()[0])
    for name in got:
        assert got[name] == pytest.approx(step(name), rel=1e-12, abs=1e-15)

    # The same gradient through the generic checker.
    def loss(W_, B_, Wo_, Bo_, v_):
        theta = generate_theta(HyperNet(hcfg, W_, B_, Wo_, Bo_), v_, arch)
        return forward(arch, theta, beta, ds.images, ds.labels)[1]

    assert nx.gradient_check(loss, phi.params() + [v]) < 1e-6


def test_identical_clients_upload_identical_phi():
    setup, server, clients = hfn_setup()
    twin = dataclasses.replace(clients[0], cid=1)
    a, _, _ = client_update_hfn(clients[0], server.phi, setup.arch, setup.spec, np.random.default_rng(9))
    b, _, _ = client_update_hfn(twin, server.phi, setup.arch, setup.spec, np.random.default_rng(9))
    pa, pb = phi_payload(a), phi_payload(b)
    assert pa.to_bytes() == pb.to_bytes()
    assert aggregate([pa.data, pb.data], [twin.n_k, twin.n_k]).tobytes() == pa.data.tobytes()


def test_empty_client_is_skipped(caplog):
    setup, server, clients = hfn_setup()
    empty = dataclasses.replace(clients[0], train_idx=np.array([], dtype=np.int64))
    phi_k, same, rep = client_update_hfn(empty, server.phi, setup.arch, setup.spec, np.random.default_rng(0))
    assert rep.skipped and phi_k is server.phi and same is empty
    assert "no training data" in caplog.text


def test_embedding_init_modes():
    _, _, shared = hfn_setup()
    assert all(c.embeddings.data.tobytes() == shared[0].embeddings.data.tobytes() for c in shared)
    _, _, own = hfn_setup(embedding_init="per_client")
    assert own[0].embeddings.data.tobytes() != own[1].embeddings.data.tobytes()


# -- fine-tuning ----------------------------------------------------------------------

def test_fine_tune_zero_epochs_equals_evaluation():
    setup, server, clients = hfn_setup()
    theta, beta = deployed_theta("hfn", clients[0], setup.arch, server.phi)
    from hfs.federation import client_accuracy
    acc, _ = fine_tune(clients[0], server.phi, setup.arch, setup.spec, epochs=0)
    assert acc == client_accuracy(clients[0], setup.arch, theta, beta)


def test_fine_tune_freezes_theta():
    setup, server, clients = hfn_setup()
    before = [t.data.tobytes() for t in deployed_theta("hfn", clients[1], setup.arch, server.phi)[0]]
    phi_bytes = serialize_phi(server.phi)
    _, tuned = fine_tune(clients[1], server.phi, setup.arch, setup.spec, epochs=2)
    after = [t.data.tobytes() for t in deployed_theta("hfn", tuned, setup.arch, server.phi)[0]]
    assert before == after and serialize_phi(server.phi) == phi_bytes
    assert tuned.beta.W.data.tobytes() != clients[1].beta.W.data.tobytes()


def test_fine_tune_embeddings_flag_moves_v():
    setup, server, clients = hfn_setup()
    _, tuned = fine_tune(clients[1], server.phi, setup.arch, setup.spec, epochs=1, tune_embeddings=True)
    assert tuned.embeddings.data.tobytes() != clients[1].embeddings.data.tobytes()


# -- experiment driver ------------------------------------------------------------------

def test_zero_rounds_summary_matches_initial_evaluation():
    res = run_experiment(tiny_cfg(rounds=0, fine_tune_epochs=0))
    s = res.summary
    assert s["pre_finetune_accuracy"] == s["init_accuracy"] == s["final_accuracy"]
    assert res.reports == [] and s["cumulative_params"] == 0


@pytest.mark.parametrize("alg", ["hfn", "fedavg", "fedprox", "fedper", "local"])
def test_run_writes_results(tmp_path, alg):
    res = run_experiment(tiny_cfg(algorithm=alg), out_dir=tmp_path)
    rows = read_rounds(tmp_path / "rounds.csv")
    assert len(rows) == 2 * 2
    for row in rows:
        assert row["up_params"] + row["down_params"] == res.summary["cpr"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "ok" and len(summary["final_accuracy"]) == 4
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["master_seed"] == 3 and len(manifest["code_hash"]) == 40
    assert (tmp_path / "accuracy.dat").exists()


def test_hfn_round_accounting():
    res = run_experiment(tiny_cfg(rounds=3))
    n = param_count(res.setup.hypernet)
    for report in res.reports:
        assert len(report.selected) == 2
        assert all(c.up_params == n and c.down_params == n for c in report.clients)


def test_failed_run_leaves_partial_results(tmp_path):
    def boom(report):
        if report.round == 2:
            raise NumericError("injected")

    with pytest.raises(NumericError):
        run_experiment(tiny_cfg(rounds=3), out_dir=tmp_path, on_round=boom)
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "failed"
    assert {r["round"] for r in read_rounds(tmp_path / "rounds.csv")} == {1, 2}


def test_parallel_matches_serial(tmp_path):
    run_experiment(tiny_cfg(rounds=2), out_dir=tmp_path / "a", parallel=1)
    run_experiment(tiny_cfg(rounds=2), out_dir=tmp_path / "b", parallel=3)
    assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()


def test_eval_every_records_accuracy():
    res = run_experiment(tiny_cfg(rounds=2, eval_every=1))
    assert all(r.mean_accuracy is not None for r in res.reports)


def test_theta_vectors_for_group_partition():
    cfg = tiny_cfg(clients=4, dataset=DatasetConfig(num_classes=4, samples_per_class=10),
                   partition=PartitionConfig(kind="group", num_groups=2, clients_per_group=2, classes_per_client=2))
    res = run_experiment(cfg)
    vecs = client_theta_vectors(res)
    assert len(vecs) == 4 and vecs[0].size == res.setup.arch.conv_param_count()
    assert res.setup.partition.groups == [0, 0, 1, 1]


def test_partition_size_must_match_clients():
    from hfs.data import dirichlet_partition, split_train_test, synth_task
    ds = synth_task(4, 10, 8, 0.3, seed=0)
    part = split_train_test(dirichlet_partition(ds, 3, 1.0, seed=0))
    with pytest.raises(ConfigError, match="clients"):
        prepare(tiny_cfg(), dataset=ds, partition=part)
