import json
from pathlib import Path

import numpy as np
import pytest

from otfpf.data import generate_synthetic_dataset, load_samples
from otfpf.errors import NumericalError
from otfpf.experiment import (emit_scatter, evaluate_checkpoint,
                              mean_predictor_baseline, run_ablation,
                              run_experiment)
from otfpf.model import OtfpfConfig, OtfpfModel, predict_batch

TINY = dict(stage_channels=(4, 8, 16, 32), mlp_widths=(16, 8), otem_n_refs=2,
            otem_max_iterations=30, batch_size=4, max_epochs=2, seed=0)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    manifest = generate_synthetic_dataset(12, 16, seed=11, out_dir=d)
    return manifest, d


def test_emit_scatter_two_columns(tmp_path, rng):
    ages = rng.uniform(5, 90, 7)
    preds = ages + rng.standard_normal(7)
    path = emit_scatter(preds, ages, tmp_path / "scatter.txt")
    back = np.loadtxt(path)
    assert back.shape == (7, 2)
    np.testing.assert_allclose(back[:, 0], ages, atol=1e-6)
    np.testing.assert_allclose(back[:, 1], preds, atol=1e-6)


def test_mean_predictor_identity(rng):
    # a constant predictor at the eval split's own mean scores exactly the
    # mean absolute deviation of that split's ages
    ages = rng.uniform(3, 97, 25)
    mad = np.abs(ages - ages.mean()).mean()
    assert mean_predictor_baseline(ages, ages) == pytest.approx(mad)


def test_zero_trained_model_with_mean_bias_matches_baseline(dataset, rng):
    manifest, base = dataset
    test = load_samples(manifest, base, "test")
    ages = np.array([s.age for s in test])
    model = OtfpfModel(OtfpfConfig(**TINY))
    for _, p in model.named_parameters():
        p.data = np.zeros_like(p.data)
    model.mlp.head.bias.data = np.array([ages.mean()], np.float32)
    preds = predict_batch(model, test)
    mae = np.abs(preds - ages).mean()
    assert mae == pytest.approx(np.abs(ages - ages.mean()).mean(), abs=1e-4)


class TestRunExperiment:
    def test_artifacts_and_result(self, dataset, tmp_path):
        manifest, base = dataset
        cfg = OtfpfConfig(**TINY)
        out = tmp_path / "run"
        result = run_experiment(cfg, manifest, base, out, max_epochs=2)
        assert (out / "checkpoint.json").exists()
        assert (out / "checkpoint.bin").exists()
        assert (out / "metrics.json").exists()
        assert (out / "scatter_test.txt").exists()
        assert (out / "scatter_test.png").exists()
        assert (out / "training_curve.png").exists()
        assert (out / "history.tsv").exists()
        assert result.epochs_run == 2
        assert len(result.train_losses) == 2
        assert result.baseline_mae > 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["n"] == len(manifest.split_records("test"))
        assert payload["baseline_mae"] == pytest.approx(result.baseline_mae)
        assert payload["config"]["head_bias_init"] != OtfpfConfig().head_bias_init

    def test_no_figures_flag(self, dataset, tmp_path):
        manifest, base = dataset
        out = tmp_path / "nofig"
        run_experiment(OtfpfConfig(**TINY), manifest, base, out,
                       max_epochs=1, make_figures=False)
        assert (out / "scatter_test.txt").exists()
        assert not (out / "scatter_test.png").exists()

    def test_determinism(self, dataset, tmp_path):
        manifest, base = dataset
        r1 = run_experiment(OtfpfConfig(**TINY), manifest, base,
                            tmp_path / "r1", max_epochs=2, make_figures=False)
        r2 = run_experiment(OtfpfConfig(**TINY), manifest, base,
                            tmp_path / "r2", max_epochs=2, make_figures=False)
        assert r1.train_losses == r2.train_losses
        assert r1.metrics.mae == r2.metrics.mae
        assert ((tmp_path / "r1" / "checkpoint.bin").read_bytes()
                == (tmp_path / "r2" / "checkpoint.bin").read_bytes())

    def test_divergence_keeps_last_good_checkpoint(self, dataset, tmp_path):
        manifest, base = dataset
        cfg_dict = dict(TINY)
        cfg_dict["lr"] = 1e30
        out = tmp_path / "diverge"
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalError):
                run_experiment(OtfpfConfig(**cfg_dict), manifest, base, out,
                               max_epochs=3, make_figures=False)
        assert (out / "checkpoint.json").exists()
        assert (out / "checkpoint.bin").exists()


def test_evaluate_checkpoint_roundtrip(dataset, tmp_path):
    manifest, base = dataset
    out = tmp_path / "train"
    result = run_experiment(OtfpfConfig(**TINY), manifest, base, out,
                            max_epochs=1, make_figures=False)
    metrics = evaluate_checkpoint(out / "checkpoint", manifest, base,
                                  split="test", out_dir=tmp_path / "eval",
                                  make_figures=False)
    assert metrics.mae == pytest.approx(result.metrics.mae, abs=1e-5)
    assert (tmp_path / "eval" / "scatter_test.txt").exists()


def test_run_ablation_table(dataset, tmp_path):
    manifest, base = dataset
    out = tmp_path / "ablate"
    table = run_ablation(manifest, base, out, base_cfg=OtfpfConfig(**TINY),
                         epochs=1)
    assert len(table["ablations"]) == 6
    full = table["full"]["parameters"]
    by_name = {r["name"]: r for r in table["ablations"]}
    for removal in ("no_otem", "no_otem_no_fpfn",
                    "no_otem_no_fpfn_single_pathway", "no_sex_label",
                    "no_overlapped_downsampling"):
        assert by_name[removal]["parameters"] < full, removal
    assert by_name["classical_stage_depths"]["parameters"] > full
    assert (out / "ablation.tsv").exists()
    assert (out / "ablation.json").exists()
    assert (out / "ablation.png").exists()
    tsv = (out / "ablation.tsv").read_text().strip().splitlines()
    assert len(tsv) == 8  # header + full + six variants
