import numpy as np
import pytest

import megl


def test_tokenize_and_text_metrics():
    words = megl.tokenize("It is a Red circle, because it is round!")
    assert words == ["it", "is", "a", "red", "circle", "because", "it", "is", "round"]
    assert megl.bleu4(words, [words]) == pytest.approx(1.0)
    assert megl.rouge_l(words, [words]) == pytest.approx(1.0)
    assert megl.bleu4(["x", "y", "z", "w"], [words]) == 0.0
    corpus = [[words], [["something", "else", "entirely", "here"]]]
    assert megl.cider(words, [words], corpus) == pytest.approx(10.0)


def test_miou():
    a = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
    b = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=np.float32)
    assert megl.miou(a, a) == 1.0
    assert megl.miou(a, b) == pytest.approx(0.5)


def test_config_round_trip_and_errors(tmp_path):
    config = megl.Config()
    config.lambda_visual = 0.25
    config.epochs = 3
    again = megl.Config.from_text(config.to_text())
    assert again == config
    config.save(tmp_path / "run.cfg")
    assert megl.Config.load(tmp_path / "run.cfg") == config
    with pytest.raises(megl.Error, match="UnknownKey"):
        megl.Config.from_text("no_such_key = 1\n")
    config.lambda_visual = -1.0
    with pytest.raises(megl.Error, match="DomainError"):
        config.validate()


def test_train_explain_evaluate(tmp_path):
    stats = megl.generate_synthetic(tmp_path / "data", num_samples=40, annotation_fraction=0.5, seed=4)
    assert stats == {"total": 40, "with_text": 40, "with_visual": 20, "num_classes": 8}
    assert megl.manifest_stats(tmp_path / "data" / "manifest.tsv") == stats

    config = megl.Config()
    config.manifest = str(tmp_path / "data" / "manifest.tsv")
    config.output_dir = str(tmp_path / "run")
    config.epochs = 1
    config.batch_size = 16
    result = megl.train(config, validate_text=False)
    assert len(result["history"]) == 1
    losses = result["history"][0]["losses"]
    assert np.isfinite(losses["total"])
    assert losses["textual"] is not None

    model = megl.Model(result["checkpoint"])
    assert len(model.class_names) == 8
    image = megl.read_image(tmp_path / "data" / "images" / "img_00000.ppm")
    assert image.shape == (3, 32, 32)
    e = model.explain(image)
    assert e["saliency"].shape == (32, 32)
    assert 0.0 <= e["saliency"].min() and e["saliency"].max() <= 1.0
    assert e["class_name"] == model.class_names[e["predicted"]]
    assert isinstance(e["rationale"], str)

    report = model.evaluate("test", text=True)
    assert {"Accuracy", "Precision", "Recall", "F1 Score", "samples"} <= set(report)
    assert 0.0 <= report["Accuracy"] <= 1.0

    eff = model.efficiency(2, 5)
    assert eff["param_count"] > 0
    assert eff["fps"] * eff["latency_ms"] == pytest.approx(1000.0)
