"""End-to-end cluster behaviour: training, accounting, determinism, checkpoints."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import tiny_config
from skewsim.cluster import (
    Cluster,
    MetricsLog,
    build_dataset,
    checkpoint_bytes,
    cluster_from_bytes,
    run_experiment,
)
from skewsim.errors import ConfigError, FormatError
from skewsim.nn.io import save_model


def _run(**overrides):
    cfg = tiny_config(**overrides)
    log = MetricsLog()
    run_experiment(cfg, log=log)
    return log


# -- learning sanity ---------------------------------------------------------------


def test_separable_blobs_reach_high_accuracy():
    log = _run(
        synth_classes=10,
        synth_samples=5000,
        synth_dim=16,
        synth_separation=6.0,
        nodes=5,
        skew_fraction=0.0,
        epochs=5,
        lr0=0.05,
    )
    assert log.summary["final_val_acc"] >= 0.95
    assert log.summary["diverged"] is False


def test_divergence_is_detected_and_scored_zero():
    log = _run(lr0=1e3, weight_decay=2.0, epochs=3)
    assert log.summary["diverged"] is True
    assert log.summary["terminal_step"] is not None
    assert log.summary["final_val_acc"] == 0.0


# -- step and traffic accounting ------------------------------------------------------


def test_epoch_and_step_accounting():
    cfg = tiny_config(epochs=3, eval_every=2)
    cluster = Cluster(cfg)
    assert cluster.steps_per_epoch == math.ceil(max(cluster.partition_sizes) / cfg.batch_size)
    log = cluster.run()
    assert log.summary["steps"] == 3 * cluster.steps_per_epoch
    # eval at epoch 2 (cadence) and epoch 3 (final)
    evals = sorted({r[0] for r in log.rows if r[3] == "val_acc"})
    assert evals == [2, 3]


def test_bsp_ledger_closed_form():
    log = _run(epochs=2)
    m = log.summary["model_size"]
    k = log.summary["nodes"]
    steps = log.summary["steps"]
    assert log.summary["values_sent_per_node"] == [m * steps] * k
    assert log.summary["total_values_sent"] == k * m * steps
    assert log.summary["rounds"] == steps


def test_fedavg_ledger_closed_form():
    il = 4
    log = _run(algo="fedavg", fedavg_iter_local=il, epochs=2)
    m = log.summary["model_size"]
    k = log.summary["nodes"]
    rounds = math.ceil(log.summary["steps"] / il)
    assert log.summary["rounds"] == rounds
    assert log.summary["values_sent_per_node"] == [2 * m * rounds] * k
    assert log.summary["total_values_sent"] == 2 * m * rounds * k


def test_gaia_traffic_shrinks_as_threshold_grows():
    totals = []
    for t0 in (0.0, 0.02, 0.05, 0.10, 0.20):
        log = _run(algo="gaia", gaia_t0=t0, gaia_t_min=0.0, epochs=2)
        totals.append(log.summary["total_values_sent"])
    assert all(a >= b for a, b in zip(totals, totals[1:]))
    assert totals[-1] < totals[0]


def test_comm_rows_reconcile_with_the_ledger():
    log = _run(algo="gaia", epochs=2)
    assert log.last("comm_values_sent", node=-1) == log.summary["total_values_sent"]
    per_node = [log.last("comm_values_sent", node=i) for i in range(3)]
    assert sum(per_node) == log.summary["total_values_sent"]


# -- determinism ----------------------------------------------------------------------


def test_repeated_runs_are_byte_identical():
    a = _run(algo="gaia", epochs=2)
    b = _run(algo="gaia", epochs=2)
    assert a.csv_text() == b.csv_text()
    assert a.summary_text() == b.summary_text()


def test_metric_row_inventory():
    cfg = tiny_config(algo="gaia", epochs=2, moment_window=5, norm="group", group_size=2, arch="mlp", hidden=8)
    log = Cluster(cfg).run()
    names = {r[3] for r in log.rows}
    assert {"val_acc", "train_acc", "residual_delta", "comm_values_sent"} <= names
    assert any(n.startswith("moment_div.layer") for n in names)
    # gaia: per-node val accuracy plus a node -1 mean row
    nodes = {r[2] for r in log.rows if r[3] == "val_acc"}
    assert nodes == {-1, 0, 1, 2}
    mean_rows = log.values("val_acc", node=-1)
    per_node = [log.last("val_acc", node=i) for i in range(3)]
    assert mean_rows[-1] == pytest.approx(sum(per_node) / 3)


def test_moment_rows_appear_once_per_window():
    cfg = tiny_config(epochs=2, moment_window=5, norm="batch", arch="mlp", hidden=8)
    cluster = Cluster(cfg)
    log = cluster.run()
    rows = log.values("moment_div.layer0")
    assert len(rows) == cluster.total_steps // 5


def test_global_eval_model_averages_norm_state():
    cfg = tiny_config(norm="batch", arch="mlp", hidden=8)
    cluster = Cluster(cfg)
    for i, node in enumerate(cluster.nodes):
        for _, arr in node.model.state_arrays():
            arr[...] = float(i)
    merged = cluster.global_eval_model()
    want = sum(range(len(cluster.nodes))) / len(cluster.nodes)
    for _, arr in merged.state_arrays():
        assert np.allclose(arr, want)


# -- checkpointing ----------------------------------------------------------------------


def _advance(cluster, steps, log):
    for _ in range(steps):
        cluster.superstep(log)


def test_checkpoint_resume_is_bitwise_equal():
    cfg = tiny_config(algo="gaia", epochs=4, norm="group", group_size=2, arch="mlp", hidden=8)
    dataset = build_dataset(cfg)

    straight = Cluster(cfg, dataset)
    log_a = MetricsLog()
    _advance(straight, 16, log_a)

    broken = Cluster(cfg, dataset)
    log_b = MetricsLog()
    _advance(broken, 7, log_b)
    blob = checkpoint_bytes(broken)
    resumed = cluster_from_bytes(blob, dataset)
    _advance(resumed, 9, log_b)

    assert checkpoint_bytes(resumed) == checkpoint_bytes(straight)
    for a, b in zip(straight.nodes, resumed.nodes):
        assert a.w.data.tobytes() == b.w.data.tobytes()
        assert a.opt.u.data.tobytes() == b.opt.u.data.tobytes()
        assert a.v.data.tobytes() == b.v.data.tobytes()


def test_checkpoint_covers_residuals_and_sampler():
    """Tampering with any piece of restored state must show up downstream."""
    cfg = tiny_config(algo="gaia", epochs=4)
    dataset = build_dataset(cfg)
    cluster = Cluster(cfg, dataset)
    _advance(cluster, 7, MetricsLog())
    blob = checkpoint_bytes(cluster)

    def divergent_after(mutate):
        twin = cluster_from_bytes(blob, dataset)
        mutate(twin)
        _advance(twin, 9, MetricsLog())
        ref = cluster_from_bytes(blob, dataset)
        _advance(ref, 9, MetricsLog())
        return checkpoint_bytes(twin) != checkpoint_bytes(ref)

    assert divergent_after(lambda c: c.nodes[0].v.data.__iadd__(0.5))
    assert divergent_after(lambda c: c.nodes[1].opt.u.data.__iadd__(0.5))
    assert divergent_after(lambda c: c.nodes[2].sampler.restore(
        cluster_from_bytes(blob, dataset).nodes[0].sampler.state()))


def test_checkpoint_faults():
    cfg = tiny_config()
    dataset = build_dataset(cfg)
    cluster = Cluster(cfg, dataset)
    blob = checkpoint_bytes(cluster)
    with pytest.raises(FormatError, match="bad magic"):
        cluster_from_bytes(b"XXXX" + blob[4:], dataset)
    with pytest.raises(FormatError, match="unexpected EOF"):
        cluster_from_bytes(blob[:-10], dataset)
    with pytest.raises(FormatError, match="trailing bytes"):
        cluster_from_bytes(blob + b"\0", dataset)

    # same-length config patch: declared node count no longer matches the body
    assert blob.count(b'"nodes": 3') == 1
    patched = blob.replace(b'"nodes": 3', b'"nodes": 2')
    with pytest.raises(FormatError, match="node count"):
        cluster_from_bytes(patched, dataset)


def test_model_file_is_not_a_cluster_checkpoint(tmp_path):
    cfg = tiny_config()
    cluster = Cluster(cfg, build_dataset(cfg))
    path = tmp_path / "model.bin"
    save_model(cluster.nodes[0].model, str(path))
    with pytest.raises(FormatError, match="cluster"):
        cluster_from_bytes(path.read_bytes())


def test_empty_partition_is_rejected():
    with pytest.raises(ConfigError, match="no samples"):
        Cluster(tiny_config(synth_classes=2, synth_samples=8, nodes=12, skew_fraction=0.0))


# -- summary schema ----------------------------------------------------------------------


def test_summary_schema_and_config_echo():
    cfg = tiny_config(algo="gaia", epochs=2, tag="probe")
    log = Cluster(cfg).run()
    s = log.summary
    assert s["tag"] == "probe"
    for key in (
        "arch", "norm", "algo", "skew_fraction", "nodes", "model_size", "epochs",
        "steps", "steps_per_epoch", "final_val_acc", "total_values_sent",
        "total_values_received", "values_sent_per_node", "rounds", "diverged",
        "terminal_step", "seed_data", "seed_init", "seed_sampling", "dtype",
        "final_val_acc_per_node",
    ):
        assert key in s, key
    assert s["terminal_step"] is None
    json.dumps(s)  # must stay serializable for the run artifacts


def test_default_tag_reflects_setup():
    log = _run(algo="fedavg", skew_fraction=0.5, epochs=1)
    assert log.summary["tag"] == "logreg-none-fedavg-a0.5"
    assert "final_val_acc_per_node" not in log.summary
