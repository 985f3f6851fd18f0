"""End-to-end command-line runs on a small synthetic corpus."""

import contextlib
import io
import json
import os

import numpy as np
import pytest

from seqrec.cli import main
from seqrec.synthetic import markov_records, write_records_csv


def run_cli(*argv):
    """Invoke the CLI in-process, capturing (exit_code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


TRAIN_FLAGS = [
    "--hidden-dim", "8", "--heads", "2", "--layers", "2", "--max-len", "8",
    "--epochs", "2", "--batch-size", "16", "--lr", "0.01",
    "--val-every", "1", "--val-negatives", "2", "--seed", "0",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One prepared dataset plus bidirectional and causal checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    csv_path = root / "events.csv"
    records, _ = markov_records(num_items=12, num_users=30, seq_len=8, seed=1)
    write_records_csv(records, str(csv_path))

    data_dir = root / "data"
    code, out, err = run_cli(
        "prepare", "--input", str(csv_path), "--format", "csv",
        "--user-col", "0", "--item-col", "1", "--time-col", "2",
        "--out", str(data_dir),
    )
    assert code == 0, err

    run_dir = root / "run"
    code, out, err = run_cli(
        "train", "--data", str(data_dir), "--out", str(run_dir), *TRAIN_FLAGS)
    assert code == 0, err

    causal_dir = root / "run-causal"
    code, out, err = run_cli(
        "train", "--data", str(data_dir), "--out", str(causal_dir),
        "--attention-mode", "causal", *TRAIN_FLAGS)
    assert code == 0, err

    return {
        "root": root,
        "csv": csv_path,
        "data": data_dir,
        "run": run_dir,
        "checkpoint": run_dir / "checkpoint.bin",
        "causal_checkpoint": causal_dir / "checkpoint.bin",
    }


# ----- prepare -----------------------------------------------------------------


def test_prepare_writes_dataset_and_stats(workspace):
    data = workspace["data"]
    assert (data / "dataset.txt").exists()
    assert (data / "item_vocab.txt").exists()
    assert (data / "user_vocab.txt").exists()
    code, out, err = run_cli(
        "prepare", "--input", str(workspace["csv"]), "--format", "csv",
        "--user-col", "0", "--item-col", "1", "--time-col", "2",
        "--out", str(workspace["root"] / "data2"),
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "users\titems\tactions\tavg_length\tdensity"
    users, items, actions, avg, density = lines[1].split("\t")
    assert (users, items, actions) == ("30", "12", "240")
    assert avg == "8.00"
    assert density.endswith("%")
    assert "[prepare]" in err


def test_prepare_missing_input_exits_2(workspace, tmp_path):
    code, _, err = run_cli(
        "prepare", "--input", str(tmp_path / "nope.dat"), "--out", str(tmp_path / "o"))
    assert code == 2
    assert "error" in err.lower()


def test_prepare_malformed_movielens_exits_2(workspace, tmp_path):
    bad = tmp_path / "ratings.dat"
    bad.write_text("1::2::3::4\nbroken line\n")
    code, _, err = run_cli(
        "prepare", "--input", str(bad), "--format", "movielens",
        "--out", str(tmp_path / "o"))
    assert code == 2
    assert "ratings.dat:2" in err


# ----- train --------------------------------------------------------------------


def test_train_outputs(workspace):
    run = workspace["run"]
    assert (run / "checkpoint.bin").exists()
    assert (run / "best.bin").exists()
    assert (run / "training_curves.png").exists()
    log = (run / "train_log.tsv").read_text().splitlines()
    assert log[0] == "epoch\tloss\tval_HR@10\tval_NDCG@10\tlr\twallclock_s"
    assert len(log) == 3  # header + 2 epochs
    first = log[1].split("\t")
    assert first[0] == "1"
    assert float(first[1]) > 0


def test_train_echoes_config_and_progress_to_stderr(workspace, tmp_path):
    code, out, err = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "run"),
        "--no-figures", "--epochs", "1", "--batch-size", "16", "--lr", "0.01",
        "--hidden-dim", "8", "--max-len", "8", "--layers", "1",
        "--val-every", "1", "--val-negatives", "2",
    )
    assert code == 0
    assert "[train]" in err and "samples_per_s=" in err
    assert "final_checkpoint=" in out and "best_checkpoint=" in out
    assert "final_loss=" in out
    assert not (tmp_path / "run" / "training_curves.png").exists()


def test_train_resume_completes_plan(workspace, tmp_path):
    # a fresh 1-epoch plan, then resuming its finished checkpoint is a no-op
    out_dir = tmp_path / "resume"
    base = ["--data", str(workspace["data"]), "--no-figures",
            "--epochs", "1", "--batch-size", "16", "--lr", "0.01",
            "--hidden-dim", "8", "--max-len", "8", "--layers", "1",
            "--val-every", "0"]
    code, _, err = run_cli("train", "--out", str(out_dir), *base)
    assert code == 0, err
    code, out, err = run_cli(
        "train", "--out", str(out_dir), "--resume",
        str(out_dir / "checkpoint.bin"), *base)
    assert code == 0, err
    assert "epochs=1" in out


def test_train_resume_config_mismatch_exits_1(workspace, tmp_path):
    code, _, err = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "x"),
        "--resume", str(workspace["checkpoint"]),
        "--hidden-dim", "4", "--heads", "2", "--layers", "2", "--max-len", "8",
        "--epochs", "2", "--batch-size", "16",
    )
    assert code == 1
    assert "config" in err.lower()


def test_train_missing_dataset_exits_2(tmp_path):
    code, _, err = run_cli(
        "train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o"))
    assert code == 2


def test_config_file_layering(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nhidden-dim = 4\nepochs = 1\nbatch_size = 16\n"
                   "lr = 0.01\nmax-len = 8\nlayers = 1\nval-every = 0\n")
    code, out, err = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "r"),
        "--config", str(cfg), "--hidden-dim", "8", "--no-figures")
    assert code == 0, err
    # the explicit flag beats the file; the file beats the default
    assert "hidden_dim=8" in err
    assert "epochs=1" in err


def test_unknown_preset_exits_1(workspace, tmp_path):
    code, _, err = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "o"),
        "--preset", "netflix")
    assert code == 1
    assert "preset" in err


def test_preset_fills_mask_proportion(workspace, tmp_path):
    code, _, err = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "o"),
        "--preset", "beauty", "--no-figures", "--epochs", "1",
        "--batch-size", "16", "--hidden-dim", "8", "--max-len", "8",
        "--layers", "1", "--val-every", "0")
    assert code == 0, err
    assert "mask_proportion=0.6" in err


def test_bad_flag_value_exits_1(workspace, tmp_path):
    code, _, _ = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "o"),
        "--epochs", "many")
    assert code == 1


def test_unknown_ablation_exits_1(workspace, tmp_path):
    code, _, err = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "o"),
        "--ablate", "no-attention")
    assert code == 1
    assert "ablation" in err


def test_ablation_flags_run(workspace, tmp_path):
    code, _, err = run_cli(
        "train", "--data", str(workspace["data"]), "--out", str(tmp_path / "o"),
        "--ablate", "no-pe,no-dropout", "--no-figures", "--epochs", "1",
        "--batch-size", "16", "--hidden-dim", "8", "--max-len", "8",
        "--layers", "1", "--val-every", "0")
    assert code == 0, err
    assert "use_positional_embedding=False" in err


# ----- evaluate -----------------------------------------------------------------


def test_evaluate_reports_json(workspace, tmp_path):
    report_path = tmp_path / "report.json"
    ranks_path = tmp_path / "ranks.tsv"
    code, out, err = run_cli(
        "evaluate", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["checkpoint"]),
        "--num-negatives", "3", "--seed", "0",
        "--report", str(report_path), "--ranks", str(ranks_path))
    assert code == 0, err
    payload = json.loads(out)
    assert payload["split"] == "test"
    assert payload["num_users"] == 30
    assert payload["num_negatives"] == 3
    assert 0.0 <= payload["metrics"]["HR@10"] <= 1.0
    assert payload["metrics"]["NDCG@1"] == payload["metrics"]["HR@1"]
    assert json.loads(report_path.read_text()) == payload
    assert (tmp_path / "report.png").exists()
    ranks = ranks_path.read_text().splitlines()
    assert ranks[0] == "user\trank"
    assert len(ranks) == 31


def test_evaluate_is_deterministic(workspace):
    args = ("evaluate", "--data", str(workspace["data"]),
            "--checkpoint", str(workspace["checkpoint"]),
            "--num-negatives", "3", "--seed", "7")
    a = run_cli(*args)
    b = run_cli(*args)
    assert a[0] == b[0] == 0
    assert a[1] == b[1]


def test_evaluate_val_split(workspace):
    code, out, err = run_cli(
        "evaluate", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["checkpoint"]),
        "--split", "val", "--num-negatives", "3")
    assert code == 0, err
    assert json.loads(out)["split"] == "val"


def test_evaluate_pop_baseline(workspace):
    code, out, err = run_cli(
        "evaluate", "--data", str(workspace["data"]), "--baseline", "pop",
        "--num-negatives", "3")
    assert code == 0, err
    payload = json.loads(out)
    assert set(payload["metrics"]) == {
        "HR@1", "HR@5", "HR@10", "NDCG@1", "NDCG@5", "NDCG@10", "MRR"}


def test_evaluate_needs_exactly_one_scorer(workspace):
    code, _, err = run_cli("evaluate", "--data", str(workspace["data"]))
    assert code == 1
    code, _, err = run_cli(
        "evaluate", "--data", str(workspace["data"]), "--baseline", "pop",
        "--checkpoint", str(workspace["checkpoint"]))
    assert code == 1


def test_evaluate_corrupt_checkpoint_exits_2(workspace, tmp_path):
    blob = bytearray(workspace["checkpoint"].read_bytes())
    blob[50] ^= 0xFF
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(blob))
    code, _, err = run_cli(
        "evaluate", "--data", str(workspace["data"]), "--checkpoint", str(bad),
        "--num-negatives", "3")
    assert code == 2
    assert "corrupt" in err


def test_evaluate_fingerprint_mismatch_exits_1(workspace, tmp_path):
    # same catalog size, different interaction data
    records, _ = markov_records(num_items=12, num_users=30, seq_len=8, seed=9)
    csv_path = tmp_path / "other.csv"
    write_records_csv(records, str(csv_path))
    other = tmp_path / "other-data"
    code, _, err = run_cli(
        "prepare", "--input", str(csv_path), "--format", "csv",
        "--user-col", "0", "--item-col", "1", "--time-col", "2",
        "--out", str(other))
    assert code == 0, err
    code, _, err = run_cli(
        "evaluate", "--data", str(other),
        "--checkpoint", str(workspace["checkpoint"]), "--num-negatives", "3")
    assert code == 1
    assert "fingerprint" in err


# ----- recommend -----------------------------------------------------------------


def test_recommend_prints_external_ids_with_probabilities(workspace):
    code, out, err = run_cli(
        "recommend", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["checkpoint"]),
        "--history", "1,2,3", "--top-k", "5")
    assert code == 0, err
    lines = out.strip().splitlines()
    assert len(lines) == 5
    probs = []
    vocab = {line.split("\t")[1] for line in
             (workspace["data"] / "item_vocab.txt").read_text().splitlines()}
    for line in lines:
        external, prob = line.split("\t")
        assert external in vocab
        probs.append(float(prob))
    assert probs == sorted(probs, reverse=True)
    assert all(0.0 <= p <= 1.0 for p in probs)


def test_recommend_unknown_item_exits_2(workspace):
    code, _, err = run_cli(
        "recommend", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["checkpoint"]), "--history", "1,999")
    assert code == 2
    assert "999" in err


def test_recommend_is_deterministic(workspace):
    args = ("recommend", "--data", str(workspace["data"]),
            "--checkpoint", str(workspace["checkpoint"]), "--history", "4,5")
    assert run_cli(*args)[1] == run_cli(*args)[1]


# ----- export-attention ------------------------------------------------------------


def test_export_attention_writes_csv_and_figures(workspace, tmp_path):
    out_dir = tmp_path / "attn"
    code, out, err = run_cli(
        "export-attention", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["checkpoint"]),
        "--window", "4", "--out", str(out_dir))
    assert code == 0, err
    assert out.splitlines()[0] == "users=30"
    for layer in (1, 2):
        for head in (1, 2):
            name = f"attention_layer{layer}_head{head}"
            csv_path = out_dir / f"{name}.csv"
            assert csv_path.exists()
            assert (out_dir / f"{name}.png").exists()
            rows = [list(map(float, line.split(",")))
                    for line in csv_path.read_text().splitlines()]
            matrix = np.array(rows)
            assert matrix.shape == (4, 4)
            assert np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(matrix >= 0.0)


def test_export_attention_causal_upper_triangle_is_zero(workspace, tmp_path):
    out_dir = tmp_path / "attn-causal"
    code, out, err = run_cli(
        "export-attention", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["causal_checkpoint"]),
        "--window", "4", "--out", str(out_dir), "--no-figures")
    assert code == 0, err
    for layer in (1, 2):
        for head in (1, 2):
            rows = [list(map(float, line.split(","))) for line in
                    (out_dir / f"attention_layer{layer}_head{head}.csv")
                    .read_text().splitlines()]
            matrix = np.array(rows)
            assert np.all(matrix[np.triu_indices(4, k=1)] == 0.0)
            assert np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9)


def test_export_attention_max_users_caps_averaging(workspace, tmp_path):
    code, out, err = run_cli(
        "export-attention", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["checkpoint"]),
        "--window", "4", "--max-users", "5", "--out", str(tmp_path / "a"),
        "--no-figures")
    assert code == 0, err
    assert out.splitlines()[0] == "users=5"


def test_export_attention_oversized_window_exits_1(workspace, tmp_path):
    code, _, err = run_cli(
        "export-attention", "--data", str(workspace["data"]),
        "--checkpoint", str(workspace["checkpoint"]),
        "--window", "99", "--out", str(tmp_path / "a"))
    assert code == 1
    assert "window" in err


# ----- sweep -----------------------------------------------------------------------


def test_sweep_writes_tsv_and_figure(workspace, tmp_path):
    out_dir = tmp_path / "sweep"
    code, out, err = run_cli(
        "sweep", "--axis", "mask-proportion", "--values", "0.3,0.6",
        "--data", str(workspace["data"]), "--out", str(out_dir),
        "--num-negatives", "3",
        "--hidden-dim", "8", "--heads", "2", "--layers", "1", "--max-len", "8",
        "--epochs", "1", "--batch-size", "16", "--lr", "0.01", "--val-every", "0")
    assert code == 0, err
    tsv = (out_dir / "sweep.tsv").read_text()
    assert out.strip() == tsv.strip()
    lines = tsv.splitlines()
    assert lines[0].split("\t") == [
        "value", "HR@1", "HR@5", "HR@10", "NDCG@1", "NDCG@5", "NDCG@10",
        "MRR", "samples_per_s", "error"]
    assert len(lines) == 3
    assert lines[1].startswith("0.3\t")
    assert lines[2].startswith("0.6\t")
    assert (out_dir / "sweep.png").exists()


def test_sweep_records_per_value_failures(workspace, tmp_path):
    # hidden-dim 9 is indivisible by 2 heads: that value fails, others pass
    out_dir = tmp_path / "sweep-bad"
    code, out, err = run_cli(
        "sweep", "--axis", "hidden-dim", "--values", "8,9",
        "--data", str(workspace["data"]), "--out", str(out_dir),
        "--num-negatives", "3",
        "--heads", "2", "--layers", "1", "--max-len", "8",
        "--epochs", "1", "--batch-size", "16", "--lr", "0.01", "--val-every", "0")
    assert code == 0, err
    lines = (out_dir / "sweep.tsv").read_text().splitlines()
    good = lines[1].split("\t")
    bad = lines[2].split("\t")
    assert good[0] == "8" and good[-1] == ""
    assert bad[0] == "9" and bad[1] == "nan" and bad[-1] != ""


def test_sweep_unknown_axis_exits_1(workspace, tmp_path):
    code, _, err = run_cli(
        "sweep", "--axis", "optimizer", "--values", "1,2",
        "--data", str(workspace["data"]), "--out", str(tmp_path / "s"))
    assert code == 1


def test_sweep_bad_values_exit_1(workspace, tmp_path):
    code, _, err = run_cli(
        "sweep", "--axis", "hidden-dim", "--values", "8,wide",
        "--data", str(workspace["data"]), "--out", str(tmp_path / "s"))
    assert code == 1


# ----- top-level parser --------------------------------------------------------------


def test_no_subcommand_prints_usage_and_exits_1():
    code, out, err = run_cli()
    assert code == 1
    assert "usage" in err.lower()


def test_unknown_subcommand_exits_1():
    code, _, _ = run_cli("frobnicate")
    assert code == 1


def test_help_exits_0():
    code, out, _ = run_cli("--help")
    assert code == 0
