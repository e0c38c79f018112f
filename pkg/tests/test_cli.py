import json
from pathlib import Path

import numpy as np
import pytest

from otfpf.cli import main
from otfpf.model import OtfpfConfig
from otfpf.ot import SinkhornConfig, sinkhorn
from otfpf.tensor_io import load_tensor, save_tensor

TINY = dict(stage_channels=(4, 8, 16, 32), mlp_widths=(16, 8), otem_n_refs=2,
            otem_max_iterations=30, batch_size=4, max_epochs=1, seed=0)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_data")
    assert main(["generate", "--n", "10", "--size", "16", "--seed", "4",
                 "--out", str(d)]) == 0
    return d


class TestGenerate:
    def test_writes_dataset(self, dataset_dir):
        assert (dataset_dir / "manifest.json").exists()
        assert len(list(dataset_dir.glob("subj_*_t1.json"))) == 10

    def test_bad_n_is_config_error(self, tmp_path):
        assert main(["generate", "--n", "5", "--size", "16",
                     "--out", str(tmp_path / "x")]) == 2


class TestSinkhornSolve:
    def test_solves_and_reports(self, tmp_path, rng):
        c = rng.uniform(0, 1, (4, 3)).astype(np.float32)
        a = np.full(4, 0.25, np.float32)
        b = np.full(3, 1 / 3, np.float32)
        save_tensor(tmp_path / "c", c)
        save_tensor(tmp_path / "a", a)
        save_tensor(tmp_path / "b", b)
        out = tmp_path / "plan"
        code = main(["sinkhorn-solve", "--cost", str(tmp_path / "c"),
                     "--a", str(tmp_path / "a"), "--b", str(tmp_path / "b"),
                     "--epsilon", "0.1", "--max-iter", "500", "--tol", "1e-8",
                     "--out", str(out)])
        assert code == 0
        plan = load_tensor(out)
        report = json.loads((tmp_path / "plan.report.json").read_text())
        direct = sinkhorn(a, b, c.astype(np.float64),
                          SinkhornConfig(epsilon=0.1, max_iterations=500,
                                         tolerance=1e-8))
        np.testing.assert_allclose(plan, direct.plan, atol=1e-6)
        assert report["iterations"] == direct.iterations_used
        assert report["marginal_violation"] <= 1e-8
        assert {"cost", "entropy", "iterations", "marginal_violation"} <= set(report)

    def test_dimension_mismatch_is_data_error(self, tmp_path, rng):
        save_tensor(tmp_path / "c", rng.uniform(0, 1, (4, 3)).astype(np.float32))
        save_tensor(tmp_path / "a", np.full(3, 1 / 3, np.float32))
        save_tensor(tmp_path / "b", np.full(3, 1 / 3, np.float32))
        assert main(["sinkhorn-solve", "--cost", str(tmp_path / "c"),
                     "--a", str(tmp_path / "a"), "--b", str(tmp_path / "b"),
                     "--out", str(tmp_path / "plan")]) == 3

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["sinkhorn-solve", "--cost", str(tmp_path / "none"),
                     "--a", str(tmp_path / "none"), "--b", str(tmp_path / "none"),
                     "--out", str(tmp_path / "plan")]) == 3


class TestOtemEmbed:
    def test_embeds_to_fixed_shape(self, tmp_path, rng):
        save_tensor(tmp_path / "x", rng.standard_normal((40, 6)).astype(np.float32))
        cfg = {"sigma": 1.0, "n_refs": 3, "seed": 1, "epsilon": 0.1,
               "max_iterations": 200, "tolerance": 1e-8}
        (tmp_path / "otem.json").write_text(json.dumps(cfg))
        code = main(["otem-embed", "--input", str(tmp_path / "x"),
                     "--config", str(tmp_path / "otem.json"),
                     "--out", str(tmp_path / "emb")])
        assert code == 0
        emb = load_tensor(tmp_path / "emb")
        assert emb.shape == (3, 6)

    def test_unknown_config_field_is_config_error(self, tmp_path, rng):
        save_tensor(tmp_path / "x", rng.standard_normal((5, 2)).astype(np.float32))
        (tmp_path / "otem.json").write_text(json.dumps({"bogus": 1}))
        assert main(["otem-embed", "--input", str(tmp_path / "x"),
                     "--config", str(tmp_path / "otem.json"),
                     "--out", str(tmp_path / "emb")]) == 2

    def test_explicit_anchor_files(self, tmp_path, rng):
        x = rng.standard_normal((12, 4)).astype(np.float32)
        anchors = rng.standard_normal((4, 4)).astype(np.float32)
        refs = rng.standard_normal((2, 4)).astype(np.float32)
        save_tensor(tmp_path / "x", x)
        save_tensor(tmp_path / "w", anchors)
        save_tensor(tmp_path / "e", refs)
        cfg = {"sigma": 1.0, "anchors_path": str(tmp_path / "w"),
               "references_path": str(tmp_path / "e")}
        (tmp_path / "otem.json").write_text(json.dumps(cfg))
        assert main(["otem-embed", "--input", str(tmp_path / "x"),
                     "--config", str(tmp_path / "otem.json"),
                     "--out", str(tmp_path / "emb")]) == 0
        assert load_tensor(tmp_path / "emb").shape == (2, 4)


class TestTrainEvalAblate:
    @pytest.fixture(scope="class")
    def trained(self, dataset_dir, tmp_path_factory):
        out = tmp_path_factory.mktemp("cli_train")
        cfg_path = out / "cfg.json"
        OtfpfConfig(**TINY).to_json(cfg_path)
        code = main(["train", "--config", str(cfg_path),
                     "--manifest", str(dataset_dir), "--out", str(out)])
        assert code == 0
        return out

    def test_train_artifacts(self, trained):
        assert (trained / "checkpoint.json").exists()
        assert (trained / "metrics.json").exists()
        assert (trained / "scatter_test.txt").exists()
        assert (trained / "scatter_test.png").exists()

    def test_eval_exit_zero(self, trained, dataset_dir, tmp_path):
        assert main(["eval", "--ckpt", str(trained / "checkpoint"),
                     "--manifest", str(dataset_dir), "--split", "test",
                     "--out", str(tmp_path / "eval")]) == 0
        assert (tmp_path / "eval" / "scatter_test.txt").exists()

    def test_eval_missing_checkpoint_is_data_error(self, dataset_dir, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "nothing"),
                     "--manifest", str(dataset_dir)]) == 3

    def test_train_bad_config_is_config_error(self, dataset_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"not_a_field": True}))
        assert main(["train", "--config", str(bad),
                     "--manifest", str(dataset_dir),
                     "--out", str(tmp_path / "o")]) == 2

    def test_ablate_emits_six_rows(self, dataset_dir, tmp_path):
        out = tmp_path / "ablate"
        cfg_path = tmp_path / "cfg.json"
        OtfpfConfig(**TINY).to_json(cfg_path)
        assert main(["ablate", "--manifest", str(dataset_dir),
                     "--out", str(out), "--config", str(cfg_path),
                     "--epochs", "1"]) == 0
        table = json.loads((out / "ablation.json").read_text())
        assert len(table["ablations"]) == 6
        assert (out / "ablation.png").exists()
