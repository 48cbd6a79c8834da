import json

import numpy as np
import pytest

import geometer.cli as cli
from geometer.checkpoint import load_tensors
from geometer.config import ConfigError, ExperimentConfig, parse_config, write_config
from geometer.synth import write_synthetic_dataset


@pytest.fixture()
def workspace(tmp_path):
    data_dir = tmp_path / "data"
    write_synthetic_dataset(data_dir, classes=4, per_class=22, feature_dim=10,
                            p_in=0.3, p_out=0.02, seed=1)
    cfg = ExperimentConfig(
        dataset_dir=str(data_dir),
        manifest=str(tmp_path / "manifest.json"),
        run_dir=str(tmp_path / "runs"),
        base_class_count=2, novel_per_session=1, num_sessions=2, k_shot=3,
        hidden_dim=12, embedding_dim=8, class_attention_heads=2,
        k_max=4, k_qry=4, episodes_pretrain=12, episodes_finetune=6,
        seeds=(0, 1))
    cfg_path = tmp_path / "exp.cfg"
    write_config(cfg, cfg_path)
    return tmp_path, cfg, cfg_path


# --- config parsing ----------------------------------------------------------

def test_config_round_trip(workspace):
    _, cfg, cfg_path = workspace
    assert parse_config(cfg_path) == cfg


def test_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("hidden_dim = 32\nnot_a_key = 5\n")
    with pytest.raises(ConfigError) as err:
        parse_config(p)
    assert ":2:" in str(err.value) and "not_a_key" in str(err.value)


def test_config_rejects_bad_value_with_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("# comment\nhidden_dim = soup\n")
    with pytest.raises(ConfigError) as err:
        parse_config(p)
    assert ":2:" in str(err.value)


def test_config_pn_star_degeneration():
    cfg = ExperimentConfig(mode="pn_star", lambda_u=0.9, lambda_kd=0.9)
    weights = cfg.loss_weights()
    assert weights.lambda_u == 0.0 and weights.lambda_s == 0.0 and weights.lambda_kd == 0.0
    assert cfg.prototype_mode == "mean"


# --- prepare ------------------------------------------------------------------

def test_prepare_idempotent_and_shape(workspace):
    _, cfg, _ = workspace
    out1 = cli.cmd_prepare(cfg)
    first = out1.read_bytes()
    cli.cmd_prepare(cfg)
    assert out1.read_bytes() == first
    doc = json.loads(first)
    assert len(doc["base_classes"]) == 2
    assert len(doc["sessions"]) == 2
    for entry in doc["sessions"]:
        assert len(entry["novel_classes"]) == 1
        for sup in entry["supports"].values():
            assert len(sup) == 3


def test_prepare_explicit_classes(workspace):
    _, cfg, _ = workspace
    cfg2 = cfg.with_overrides(base_classes=(3, 2), novel_classes=(0, 1))
    cli.cmd_prepare(cfg2)
    doc = json.loads(open(cfg2.manifest).read())
    assert doc["base_classes"] == [3, 2]
    assert [s["novel_classes"] for s in doc["sessions"]] == [[0], [1]]


def test_prepare_errors_on_impossible_split(workspace):
    _, cfg, _ = workspace
    with pytest.raises(cli.CliError):
        cli.cmd_prepare(cfg.with_overrides(base_class_count=3, num_sessions=3))


# --- pretrain / stream / report ------------------------------------------------

def test_full_cli_pipeline(workspace):
    tmp_path, cfg, cfg_path = workspace
    assert cli.main(["prepare", "--config", str(cfg_path)]) == 0
    assert cli.main(["pretrain", "--config", str(cfg_path)]) == 0
    for seed in (0, 1):
        ckpt = tmp_path / "runs" / f"seed{seed}_session0.gfsp"
        assert ckpt.is_file()
        arrays = load_tensors(ckpt)
        assert int(arrays["meta/seed"][0]) == seed
        lines = (tmp_path / "runs" / f"metrics_seed{seed}.jsonl").read_text().splitlines()
        rec = json.loads(lines[0])
        assert rec["session"] == 0 and {"mean", "std", "per_class", "seconds"} <= set(rec)
    assert cli.main(["stream", "--config", str(cfg_path)]) == 0
    for seed in (0, 1):
        lines = (tmp_path / "runs" / f"metrics_seed{seed}.jsonl").read_text().splitlines()
        sessions = [json.loads(l)["session"] for l in lines]
        assert sessions == [0, 1, 2]  # monotone in session index
    assert cli.main(["report", "--config", str(cfg_path)]) == 0
    report = json.loads((tmp_path / "runs" / "report.json").read_text())
    assert [row["session"] for row in report["sessions"]] == [0, 1, 2]
    assert all(row["n_seeds"] == 2 for row in report["sessions"])


def test_pretrain_pn_star_checkpoint_has_mean_prototypes(workspace):
    tmp_path, cfg, _ = workspace
    pn_cfg = cfg.with_overrides(mode="pn_star", seeds=(0,), episodes_pretrain=0)
    cli.cmd_prepare(pn_cfg)
    cli.cmd_pretrain(pn_cfg)
    from geometer.backbone import encode
    from geometer.runner import arrays_to_model
    model = arrays_to_model(load_tensors(tmp_path / "runs" / "seed0_session0.gfsp"))
    _, stream = cli._load_stream(pn_cfg)
    g0 = stream.snapshots[0]
    emb = encode(model.backbone, g0).data
    for cls in stream.classes_at(0):
        rows = g0.rows_of(stream.eval_pools[0][cls])
        want = emb[rows].mean(axis=0)
        got = model.prototypes.vectors.data[model.prototypes.index_of(cls)]
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_stream_resume_reproduces_metrics(workspace):
    tmp_path, cfg, cfg_path = workspace
    cli.cmd_prepare(cfg)
    one_seed = cfg.with_overrides(seeds=(0,))
    cli.cmd_pretrain(one_seed)
    cli.cmd_stream(one_seed)
    baseline = [json.loads(l) for l in
                (tmp_path / "runs" / "metrics_seed0.jsonl").read_text().splitlines()]
    # resume from the session-1 checkpoint into a fresh run dir
    resume_cfg = one_seed.with_overrides(run_dir=str(tmp_path / "resume"))
    ckpt = tmp_path / "runs" / "seed0_session1.gfsp"
    cli.cmd_stream(resume_cfg, checkpoint=str(ckpt))
    resumed = [json.loads(l) for l in
               (tmp_path / "resume" / "metrics_seed0.jsonl").read_text().splitlines()]
    base_s2 = next(r for r in baseline if r["session"] == 2)
    res_s2 = next(r for r in resumed if r["session"] == 2)
    assert abs(base_s2["mean"] - res_s2["mean"]) < 1e-6


def test_stream_session_count_guard(workspace):
    tmp_path, cfg, cfg_path = workspace
    cli.cmd_prepare(cfg)
    one_seed = cfg.with_overrides(seeds=(0,))
    cli.cmd_pretrain(one_seed)
    cli.cmd_stream(one_seed)
    final = tmp_path / "runs" / "seed0_session2.gfsp"
    with pytest.raises(cli.CliError):
        cli.cmd_stream(one_seed, checkpoint=str(final))


def test_report_single_seed_zero_std(workspace):
    tmp_path, cfg, _ = workspace
    run_dir = tmp_path / "runs"
    run_dir.mkdir()
    for session, acc in ((0, 0.9), (1, 0.8)):
        cli._append_record(run_dir / "metrics_seed0.jsonl",
                           {"session": session, "mean": acc, "std": 0.0,
                            "per_class": {}, "seconds": 0.1, "seed": 0})
    summary = cli.summarize_records(cli.load_run_records(cfg))
    assert all(row["std"] == 0.0 for row in summary["sessions"])


def test_report_statistics_match_population_std(workspace):
    tmp_path, cfg, _ = workspace
    run_dir = tmp_path / "runs"
    run_dir.mkdir()
    rng = np.random.default_rng(3)
    accs = {seed: float(rng.random()) for seed in range(5)}
    for seed, acc in accs.items():
        cli._append_record(run_dir / f"metrics_seed{seed}.jsonl",
                           {"session": 0, "mean": acc, "std": 0.0,
                            "per_class": {}, "seconds": 0.1, "seed": seed})
    summary = cli.summarize_records(cli.load_run_records(cfg))
    values = np.array([accs[s] for s in sorted(accs)])
    assert summary["sessions"][0]["mean"] == pytest.approx(values.mean())
    assert summary["sessions"][0]["std"] == pytest.approx(values.std())


def test_report_inconsistent_sessions_rejected(workspace):
    tmp_path, cfg, _ = workspace
    run_dir = tmp_path / "runs"
    run_dir.mkdir()
    cli._append_record(run_dir / "metrics_seed0.jsonl",
                       {"session": 0, "mean": 0.5, "std": 0, "per_class": {},
                        "seconds": 0, "seed": 0})
    cli._append_record(run_dir / "metrics_seed1.jsonl",
                       {"session": 1, "mean": 0.5, "std": 0, "per_class": {},
                        "seconds": 0, "seed": 1})
    with pytest.raises(cli.ReportError):
        cli.summarize_records(cli.load_run_records(cfg))


# --- export --------------------------------------------------------------------

def test_export_row_counts_and_round_trip(workspace):
    tmp_path, cfg, cfg_path = workspace
    cli.cmd_prepare(cfg)
    one_seed = cfg.with_overrides(seeds=(0,))
    cli.cmd_pretrain(one_seed)
    g, stream = cli._load_stream(cfg)
    ckpt = tmp_path / "runs" / "seed0_session0.gfsp"
    out = tmp_path / "emb.tsv"
    cli.export_embeddings(cfg, str(ckpt), None, out)

    node_rows, proto_rows = [], []
    for line in out.read_text().splitlines():
        cols = line.split("\t")
        (node_rows if cols[0] == "node" else proto_rows).append(cols)
    pool_size = sum(len(stream.eval_pools[0][c]) for c in stream.classes_at(0))
    assert len(node_rows) == pool_size
    assert len(proto_rows) == len(stream.classes_at(0))

    # parse-back recovers float32 vectors exactly
    from geometer.backbone import encode
    from geometer.runner import arrays_to_model
    model = arrays_to_model(load_tensors(ckpt))
    emb = encode(model.backbone, stream.snapshots[0]).data
    for cols in node_rows[:10]:
        node, _ = int(cols[1]), int(cols[2])
        parsed = np.array([np.float32(v) for v in cols[3:]])
        np.testing.assert_array_equal(parsed, emb[stream.snapshots[0].row_of(node)])


def test_export_unknown_session(workspace):
    tmp_path, cfg, cfg_path = workspace
    cli.cmd_prepare(cfg)
    one_seed = cfg.with_overrides(seeds=(0,))
    cli.cmd_pretrain(one_seed)
    ckpt = tmp_path / "runs" / "seed0_session0.gfsp"
    with pytest.raises(cli.CliError):
        cli.export_embeddings(cfg, str(ckpt), 7, tmp_path / "x.tsv")


def test_cli_error_line_is_machine_parsable(tmp_path, capsys):
    rc = cli.main(["pretrain", "--config", str(tmp_path / "missing.cfg")])
    assert rc == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error kind=ConfigError message=")
    assert "\n" not in err
