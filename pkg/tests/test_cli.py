"""End-to-end tests for the command-line pipeline.

Each test drives ``main()`` with an argv list and inspects exit codes and
the files written under --out. A tiny one-layer model keeps every training
command under a second.
"""

import json

import numpy as np
import pytest

from ailora import store
from ailora.adapters import load_adapters
from ailora.cli import main
from ailora.model import forward, model_from_store
from ailora.store import TensorStore
from ailora.training import apply_finetune

TINY = [
    "--layers", "1", "--dim", "16", "--heads", "2", "--ffn-dim", "24",
    "--vocab", "8", "--seq", "6", "--classes", "2",
    "--samples", "192", "--batch-size", "32",
]


def run_cli(*argv: str) -> int:
    return main(list(argv))


@pytest.fixture(scope="session")
def pretrained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrained")
    code = run_cli("pretrain", "--task", "majority", *TINY,
                   "--epochs", "2", "--seed", "0", "--out", str(out))
    assert code == 0
    return out


@pytest.fixture(scope="session")
def raw_weights(tmp_path_factory):
    """A plain store of two random matrices, for decompose tests."""
    path = tmp_path_factory.mktemp("raw") / "weights.tsr"
    rng = np.random.default_rng(7)
    ts = TensorStore()
    ts.add("layer0.q", rng.standard_normal((12, 9)))
    ts.add("layer1.v", rng.standard_normal((7, 7)))
    store.write(ts, path)
    return path


class TestDecompose:
    def test_round_trip(self, raw_weights, tmp_path):
        assert run_cli("decompose", "--weights", str(raw_weights),
                       "--rank", "3", "--kind", "minor", "--out", str(tmp_path)) == 0
        original = store.read(raw_weights)
        result = store.read(tmp_path / "checkpoint.tsr")
        for name in original.names():
            rebuilt = result[f"{name}.b"] @ result[f"{name}.a"] + result[f"{name}.residual"]
            assert np.abs(rebuilt - original[name]).max() < 1e-10
        assert result.metadata["kind"] == "minor"
        assert result.metadata["rank"] == "3"

    def test_full_rank_principal_leaves_zero_residual(self, raw_weights, tmp_path):
        assert run_cli("decompose", "--weights", str(raw_weights),
                       "--rank", "7", "--tensors", "layer1.v",
                       "--out", str(tmp_path)) == 0
        result = store.read(tmp_path / "checkpoint.tsr")
        assert list(result.names()) == ["layer1.v.a", "layer1.v.b", "layer1.v.residual"]
        assert np.abs(result["layer1.v.residual"]).max() < 1e-10

    def test_pattern_selects_subset(self, raw_weights, tmp_path):
        assert run_cli("decompose", "--weights", str(raw_weights),
                       "--rank", "2", "--tensors", "layer0.*",
                       "--out", str(tmp_path)) == 0
        result = store.read(tmp_path / "checkpoint.tsr")
        assert all(name.startswith("layer0.q") for name in result.names())

    def test_rank_zero_exits_2(self, raw_weights, tmp_path, capsys):
        assert run_cli("decompose", "--weights", str(raw_weights),
                       "--rank", "0", "--out", str(tmp_path)) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_rank_error_names_the_offending_tensor(self, raw_weights, tmp_path, capsys):
        # layer1.v is 7x7, so rank 9 is impossible there but fine nowhere else
        assert run_cli("decompose", "--weights", str(raw_weights),
                       "--rank", "9", "--out", str(tmp_path)) == 2
        assert "layer1.v" in capsys.readouterr().err

    def test_unmatched_pattern_exits_2(self, raw_weights, tmp_path):
        assert run_cli("decompose", "--weights", str(raw_weights),
                       "--rank", "2", "--tensors", "nothing.*",
                       "--out", str(tmp_path)) == 2

    def test_missing_weights_file_exits_2(self, tmp_path):
        assert run_cli("decompose", "--weights", str(tmp_path / "absent.tsr"),
                       "--rank", "2", "--out", str(tmp_path)) == 2

    def test_overflowing_input_exits_3(self, tmp_path, capsys):
        # finite but huge entries overflow the Gram matrix inside the SVD
        bad = TensorStore()
        bad.add("w", np.full((4, 3), 1e200))
        path = tmp_path / "bad.tsr"
        store.write(bad, path)
        assert run_cli("decompose", "--weights", str(path),
                       "--rank", "1", "--out", str(tmp_path / "out")) == 3
        assert capsys.readouterr().err.startswith("numeric failure:")


class TestInit:
    def test_adapters_reconstruct_pretrained_weights(self, pretrained_dir, tmp_path):
        ckpt = pretrained_dir / "checkpoint.tsr"
        assert run_cli("init", "--weights", str(ckpt), "--scheme", "ailora",
                       "--ranks", "q=2,v=2", "--out", str(tmp_path)) == 0
        weights = store.read(ckpt)
        result = store.read(tmp_path / "checkpoint.tsr")
        adapters, cfg = load_adapters(result)
        assert cfg.scheme.value == "ailora"
        for i, per_layer in adapters.items():
            for proj, layer in per_layer.items():
                original = weights[f"layer{i}.{proj}"]
                assert np.abs(layer.effective_weight() - original).max() < 1e-10
        # the classifier and model geometry ride along for later reloading
        assert np.array_equal(result["classifier.weight"], weights["classifier.weight"])
        assert result.metadata["dim"] == weights.metadata["dim"]

    def test_rank_beyond_dim_exits_2(self, pretrained_dir, tmp_path):
        ckpt = pretrained_dir / "checkpoint.tsr"
        assert run_cli("init", "--weights", str(ckpt),
                       "--ranks", "q=999", "--out", str(tmp_path)) == 2


class TestPretrain:
    def test_outputs_and_manifest(self, pretrained_dir):
        for name in ("checkpoint.tsr", "curves.csv", "manifest.json"):
            assert (pretrained_dir / name).exists()
        manifest = json.loads((pretrained_dir / "manifest.json").read_text())
        assert manifest["command"] == "pretrain"
        assert manifest["seeds"] == [0]
        assert manifest["outputs"] == ["checkpoint.tsr", "curves.csv"]
        assert manifest["config"]["epochs"] == 2
        lines = (pretrained_dir / "curves.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,eval_metric"
        assert len(lines) == 3

    def test_rerun_is_byte_identical(self, pretrained_dir, tmp_path):
        assert run_cli("pretrain", "--task", "majority", *TINY,
                       "--epochs", "2", "--seed", "0", "--out", str(tmp_path)) == 0
        for name in ("checkpoint.tsr", "curves.csv"):
            assert (tmp_path / name).read_bytes() == (pretrained_dir / name).read_bytes()

    def test_zero_epochs_writes_initial_model(self, tmp_path):
        assert run_cli("pretrain", *TINY, "--epochs", "0",
                       "--seed", "3", "--out", str(tmp_path)) == 0
        lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert lines == ["epoch,train_loss,eval_metric"]
        model = model_from_store(store.read(tmp_path / "checkpoint.tsr"))
        assert model.cfg.dim == 16

    def test_divergent_lr_exits_4(self, tmp_path, capsys):
        assert run_cli("pretrain", *TINY, "--epochs", "2", "--lr", "1e6",
                       "--seed", "0", "--out", str(tmp_path)) == 4
        assert capsys.readouterr().err.startswith("divergence:")


class TestFinetune:
    def test_outputs_load_and_apply(self, pretrained_dir, tmp_path):
        ckpt = pretrained_dir / "checkpoint.tsr"
        assert run_cli("finetune", "--weights", str(ckpt), "--scheme", "pissa",
                       "--ranks", "q=2", "--task", "parity", "--epochs", "1",
                       "--samples", "192", "--batch-size", "32",
                       "--seed", "11", "--out", str(tmp_path)) == 0
        result = store.read(tmp_path / "checkpoint.tsr")
        for suffix in ("a", "b", "base"):
            assert f"layer0.q.{suffix}" in result
        assert "classifier.weight" in result
        model = apply_finetune(store.read(ckpt), result)
        logits, _ = forward(model, np.zeros((2, 6), dtype=np.int64))
        assert np.all(np.isfinite(logits))

    def test_zero_epochs_preserves_effective_weights(self, pretrained_dir, tmp_path):
        ckpt = pretrained_dir / "checkpoint.tsr"
        assert run_cli("finetune", "--weights", str(ckpt), "--scheme", "ailora",
                       "--ranks", "q=2,v=2", "--epochs", "0",
                       "--seed", "11", "--out", str(tmp_path)) == 0
        weights = store.read(ckpt)
        adapters, _ = load_adapters(store.read(tmp_path / "checkpoint.tsr"))
        for i, per_layer in adapters.items():
            for proj, layer in per_layer.items():
                original = weights[f"layer{i}.{proj}"]
                assert np.abs(layer.effective_weight() - original).max() < 1e-10

    def test_rerun_is_byte_identical(self, pretrained_dir, tmp_path):
        ckpt = pretrained_dir / "checkpoint.tsr"
        args = ("finetune", "--weights", str(ckpt), "--ranks", "q=2,v=2",
                "--epochs", "1", "--samples", "192", "--batch-size", "32",
                "--seed", "23")
        assert run_cli(*args, "--out", str(tmp_path / "one")) == 0
        assert run_cli(*args, "--out", str(tmp_path / "two")) == 0
        for name in ("checkpoint.tsr", "curves.csv"):
            assert ((tmp_path / "one" / name).read_bytes()
                    == (tmp_path / "two" / name).read_bytes())

    def test_store_without_model_metadata_exits_2(self, raw_weights, tmp_path):
        assert run_cli("finetune", "--weights", str(raw_weights),
                       "--out", str(tmp_path)) == 2


class TestAnalyze:
    def test_similarity_of_checkpoint_with_itself_is_one(self, pretrained_dir, tmp_path):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        assert run_cli("analyze", "similarity", "--a", ckpt, "--b", ckpt,
                       "--proj", "q", "--rank", "4", "--out", str(tmp_path)) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["metric"] == "subspace_similarity"
        assert report["params"] == {"rank": 4, "projection": "q"}
        assert len(report["per_layer"]) == 1
        for value in report["per_layer"]:
            assert abs(value - 1.0) < 1e-9

    def test_delta_norms_of_identical_checkpoints_are_zero(self, pretrained_dir, tmp_path):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        assert run_cli("analyze", "delta-norms", "--pre", ckpt, "--ft", ckpt,
                       "--proj", "v", "--out", str(tmp_path)) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["metric"] == "delta_norm"
        assert report["per_layer"] == [0.0]

    def test_forgetting_report(self, pretrained_dir, tmp_path):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        ft_dir = tmp_path / "ft"
        assert run_cli("finetune", "--weights", ckpt, "--ranks", "q=2",
                       "--epochs", "1", "--samples", "192", "--batch-size", "32",
                       "--seed", "11", "--out", str(ft_dir)) == 0
        out = tmp_path / "report"
        assert run_cli("analyze", "forgetting", "--pre", ckpt,
                       "--ft", str(ft_dir / "checkpoint.tsr"),
                       "--task", "majority", "--samples", "128",
                       "--seed", "0", "--out", str(out)) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["metric"] == "forgetting_loss"
        assert report["params"]["sample_count"] == 128
        assert np.isfinite(report["value"]) and report["value"] >= 0.0

    def test_missing_inputs_exit_2(self, pretrained_dir, tmp_path, capsys):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        assert run_cli("analyze", "similarity", "--a", ckpt,
                       "--out", str(tmp_path)) == 2
        assert "--b" in capsys.readouterr().err


class TestSweep:
    def test_grid_layout(self, pretrained_dir, tmp_path):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        assert run_cli("sweep", "--weights", ckpt, "--proj", "q,v",
                       "--ranks", "2", "--seeds", "11,23", "--epochs", "1",
                       "--samples", "192", "--batch-size", "32",
                       "--out", str(tmp_path)) == 0
        for seed in (11, 23):
            leaf = tmp_path / "rank2" / f"seed{seed}"
            for name in ("checkpoint.tsr", "curves.csv", "manifest.json"):
                assert (leaf / name).exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["outputs"] == ["rank2/seed11", "rank2/seed23"]
        assert manifest["seeds"] == [11, 23]

    def test_threaded_run_matches_sequential(self, pretrained_dir, tmp_path, monkeypatch):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        args = ("sweep", "--weights", ckpt, "--proj", "q", "--ranks", "2",
                "--seeds", "11,23", "--epochs", "1",
                "--samples", "192", "--batch-size", "32")
        assert run_cli(*args, "--out", str(tmp_path / "seq")) == 0
        monkeypatch.setenv("AILORA_THREADS", "2")
        assert run_cli(*args, "--out", str(tmp_path / "par")) == 0
        for seed in (11, 23):
            rel = f"rank2/seed{seed}/checkpoint.tsr"
            assert ((tmp_path / "seq" / rel).read_bytes()
                    == (tmp_path / "par" / rel).read_bytes())

    def test_bad_seed_spec_exits_2(self, pretrained_dir, tmp_path):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        assert run_cli("sweep", "--weights", ckpt, "--seeds", "11,x",
                       "--out", str(tmp_path)) == 2

    def test_empty_rank_list_exits_2(self, pretrained_dir, tmp_path):
        ckpt = str(pretrained_dir / "checkpoint.tsr")
        assert run_cli("sweep", "--weights", ckpt, "--ranks", ",",
                       "--out", str(tmp_path)) == 2
