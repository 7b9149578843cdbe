import logging

import numpy as np
import pytest
import torch

from latent_ofer.config import ExperimentConfig
from latent_ofer.errors import DataError, ModelError
from latent_ofer.ferhead import FUSIONS, EXPRESSIONS
from latent_ofer.patchgrid import OcclusionMask
from latent_ofer.pipeline import (
    ASSEMBLY_STAGES,
    SEMANTIC_FER,
    EvaluationReport,
    LatentOfer,
    accuracy_from_confusion,
    confusion_matrix,
    fer_stage,
    image_seed,
)


def test_fer_stage_names():
    assert fer_stage("cnn+extracted") == "fer_cnn_extracted"
    assert fer_stage("full") == "fer_full"


def test_confusion_and_accuracy():
    counts = confusion_matrix([0, 1, 1, 6], [0, 1, 2, 6])
    assert counts[1, 2] == 1
    assert counts.sum() == 4
    assert accuracy_from_confusion(counts) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        accuracy_from_confusion(np.zeros((7, 7)))
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0])


def test_image_seed_is_stable():
    assert image_seed(3, 5) == image_seed(3, 5)
    assert image_seed(3, 5) != image_seed(3, 6)


def test_report_rejects_out_of_range_accuracy():
    with pytest.raises(ValueError):
        EvaluationReport(0, sweep={"random": {"0.00": 1.2}})
    with pytest.raises(ValueError):
        EvaluationReport(0, ablation=[{"reconstruction": False, "fusion": "cnn", "accuracy": -0.1}])


def test_report_round_trip(tmp_path):
    report = EvaluationReport(
        3,
        sweep={"random": {"0.00": 0.5}},
        reconstruction={"self-assembly": {"psnr": float("inf")}},
        ablation=[{"reconstruction": True, "fusion": "cnn", "accuracy": 0.25}],
    )
    path = report.save(str(tmp_path / "reports" / "report.json"))
    loaded = EvaluationReport.load(path)
    assert loaded.sweep == report.sweep
    assert loaded.reconstruction["self-assembly"]["psnr"] == "inf"
    with pytest.raises(DataError):
        EvaluationReport.load(str(tmp_path / "absent.json"))


def test_missing_stage_is_named(tiny_config, rng):
    ofer = LatentOfer(tiny_config)
    with pytest.raises(ModelError) as excinfo:
        ofer.predict(rng.random((32, 32, 3)))
    assert excinfo.value.stage == "svdd"
    with pytest.raises(ModelError) as excinfo:
        ofer.train_reconstructor()
    assert excinfo.value.stage == SEMANTIC_FER
    assert not ofer.has("reconstructor")


def test_generate_data_and_splits(tiny_config):
    ofer = LatentOfer(tiny_config)
    manifest = ofer.generate_data(n=8)
    assert manifest == tiny_config.manifest
    train, val = ofer.splits()
    assert (len(train), len(val)) == (6, 2)


def test_semantic_fer_training_is_seeded(tmp_path, tiny_overrides):
    weights = []
    for name in ("a", "b"):
        overrides = {**tiny_overrides, "data.n_images": 14, "paths.out_dir": str(tmp_path / name)}
        config = ExperimentConfig(overrides=overrides)
        ofer = LatentOfer(config)
        ofer.generate_data()
        weights.append(ofer.train_semantic_fer().state_dict())
    for key, tensor in weights[0].items():
        torch.testing.assert_close(weights[1][key], tensor, rtol=0, atol=0)


def test_every_stage_checkpointed(trained_ofer):
    stages = ["svdd", SEMANTIC_FER, *ASSEMBLY_STAGES.values(), *[fer_stage(f) for f in FUSIONS]]
    for stage in stages:
        assert trained_ofer.has(stage), stage


def test_stages_reload_from_disk(trained_ofer):
    fresh = LatentOfer(trained_ofer.config)
    image = trained_ofer.splits()[0].images[0]
    a, _ = trained_ofer.detect(image)
    b, _ = fresh.detect(image)
    np.testing.assert_array_equal(a.flags, b.flags)


def test_detect_training_image(trained_ofer):
    image = trained_ofer.splits()[0].images[0]
    mask, scores = trained_ofer.detect(image)
    assert (mask.rows, mask.cols) == (2, 2)
    assert len(scores) == 4
    assert [s.index for s in scores] == [0, 1, 2, 3]
    radius = trained_ofer.stage("svdd").radius
    assert all(s.occluded == (s.distance > radius) for s in scores)


def test_reconstruct_refuses_full_mask(trained_ofer):
    image = trained_ofer.splits()[0].images[0]
    with pytest.raises(DataError) as excinfo:
        trained_ofer.reconstruct(image, OcclusionMask(np.ones(4, dtype=bool), 2, 2))
    assert excinfo.value.code == "fully-occluded"


def test_reconstruct_with_conv_stage(trained_ofer):
    image = trained_ofer.splits()[0].images[1]
    mask = OcclusionMask([False, True, False, False], 2, 2)
    result = trained_ofer.reconstruct(image, mask, stage="reconstructor_conv")
    assert result.refined.shape == image.shape
    np.testing.assert_array_equal(result.refined[:, :16], image[:, :16])


@pytest.mark.parametrize("reconstruction", [True, False])
def test_predict(trained_ofer, reconstruction):
    image = trained_ofer.splits()[0].images[2]
    prediction = trained_ofer.predict(image, reconstruction=reconstruction)
    payload = prediction.to_dict()
    assert payload["expression"] in EXPRESSIONS
    assert sum(payload["probabilities"]) == pytest.approx(1.0)
    assert len(payload["selected_keys"]) == 2
    assert payload["selected_keys"] == sorted(payload["selected_keys"])


def test_predict_is_deterministic(trained_ofer):
    image = trained_ofer.splits()[0].images[3]
    a = trained_ofer.predict(image, fusion="cnn+full").to_dict()
    b = trained_ofer.predict(image, fusion="cnn+full").to_dict()
    assert a == b
    assert a["selected_keys"] == [0, 1, 2, 3]


def test_occlusion_sweep(trained_ofer):
    report = trained_ofer.run_occlusion_sweep()
    assert set(report.sweep) == {"random", "grad", "random+reconstruction"}
    for curve in report.sweep.values():
        assert list(curve) == ["0.00", "0.25", "0.50"]
        assert all(0.0 <= acc <= 1.0 for acc in curve.values())
    # nothing is occluded at p = 0, so both protocols classify the same images
    assert report.sweep["random"]["0.00"] == report.sweep["grad"]["0.00"]
    assert len(report.predictions["sweep/random"]) == 3 * 7

    again = trained_ofer.run_occlusion_sweep(with_reconstruction=False)
    assert again.sweep["random"] == report.sweep["random"]
    assert "random+reconstruction" not in again.sweep


def test_ablation_rows(trained_ofer):
    report = trained_ofer.run_ablation()
    assert len(report.ablation) == 10
    assert [row["reconstruction"] for row in report.ablation] == [False] * 5 + [True] * 5
    assert [row["fusion"] for row in report.ablation[:5]] == list(FUSIONS)
    for row in report.ablation:
        preds = report.predictions[f"ablation/{'recon' if row['reconstruction'] else 'plain'}/{row['fusion']}"]
        correct = sum(p["label"] == p["prediction"] for p in preds)
        assert row["accuracy"] == pytest.approx(correct / len(preds))


def test_detection_metrics_in_range(trained_ofer):
    metrics = trained_ofer.evaluate_detection()
    for value in metrics.as_tuple():
        assert 0.0 <= value <= 1.0


def test_reconstruction_variants_share_masks(trained_ofer):
    results = trained_ofer.evaluate_reconstruction()
    assert set(results) == {"self-assembly", "conv"}
    assert results["self-assembly"]["mask_proportion"] == results["conv"]["mask_proportion"]
    assert results["conv"]["assembly"] == "conv"
    assert set(results["conv"]["losses"]) == {"re", "c", "sc"}


def test_full_report(trained_ofer, tmp_path):
    report = trained_ofer.report()
    assert set(report.detection) == {"accuracy", "precision", "recall", "undefined"}
    assert len(report.ablation) == 10
    path = report.save(str(tmp_path / "report.json"))
    assert EvaluationReport.load(path).ablation == report.ablation


def test_training_histories(trained_ofer):
    histories = trained_ofer.training_histories()
    assert len(histories["reconstructor"]) == 1
    assert len(histories[fer_stage("cnn")]) == 2
    assert len(histories["svdd"]) == 2


def test_predict_refuses_fully_flagged_image(trained_ofer, monkeypatch):
    monkeypatch.setattr(trained_ofer.stage("svdd"), "radius", 0.0)
    image = trained_ofer.splits()[1].images[0]
    assert trained_ofer.detect(image)[0].flags.all()
    with pytest.raises(DataError) as excinfo:
        trained_ofer.predict(image)
    assert excinfo.value.code == "fully-occluded"


def test_restore_warns_on_fully_flagged_image(trained_ofer, monkeypatch, caplog):
    monkeypatch.setattr(trained_ofer.stage("svdd"), "radius", 0.0)
    image = trained_ofer.splits()[1].images[0]
    with caplog.at_level(logging.WARNING, logger="latent_ofer.pipeline"):
        view, latents = trained_ofer._restore(image)
    assert view is image
    assert (latents.rows, latents.cols) == (2, 2)
    assert "Every patch flagged as occluded" in caplog.text
