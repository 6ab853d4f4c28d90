import numpy as np
import pytest
from PIL import Image

from grapemae.errors import InputError, ShapeError, UndefinedSimilarityError
from grapemae.evaluation import (
    ConfusionMatrix,
    attention_maps,
    cka_heatmap,
    confusion_matrix,
    confusion_matrix_export,
    export_attention,
    linear_cka,
    metrics,
    metrics_table,
    read_confusion_csv,
    write_cka_csv,
    write_metrics_csv,
)
from grapemae.models.vit import VitModel


def brute_force_scores(preds, truths, num_classes):
    """Per-class precision/recall/F1 recounted sample by sample."""
    out = []
    for c in range(num_classes):
        tp = sum(1 for p, t in zip(preds, truths) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, truths) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, truths) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


def hsic_cka(x, y):
    """Linear CKA through centered Gram matrices."""
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = h @ (x @ x.T) @ h, h @ (y @ y.T) @ h

    def hsic(a, b):
        return np.sum(a * b) / (n - 1) ** 2

    return hsic(k, l) / np.sqrt(hsic(k, k) * hsic(l, l))


# ---- confusion / metrics ----
def test_confusion_counts():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    np.testing.assert_array_equal(cm.counts, [[1, 0, 0], [0, 1, 0], [0, 1, 1]])
    assert cm.total == 4
    with pytest.raises(InputError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(InputError):
        confusion_matrix([0, 3], [0, 1], 3)


def test_metrics_match_brute_force_recount():
    rng = np.random.default_rng(42)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        preds = rng.integers(0, c, n).tolist()
        truths = rng.integers(0, c, n).tolist()
        report = metrics(confusion_matrix(preds, truths, c))
        expected = brute_force_scores(preds, truths, c)
        np.testing.assert_allclose(report.precision, [e[0] for e in expected], rtol=0, atol=1e-12)
        np.testing.assert_allclose(report.recall, [e[1] for e in expected], rtol=0, atol=1e-12)
        np.testing.assert_allclose(report.f1, [e[2] for e in expected], rtol=0, atol=1e-12)
        assert report.macro_f1 == pytest.approx(np.mean([e[2] for e in expected]), abs=1e-12)
        assert report.accuracy == pytest.approx(sum(p == t for p, t in zip(preds, truths)) / n)


def test_two_thirds_example():
    # class 0: TP=2, FP=1, FN=1
    cm = ConfusionMatrix(np.array([[2, 1], [1, 0]]))
    report = metrics(cm)
    assert report.precision[0] == pytest.approx(2 / 3)
    assert report.recall[0] == pytest.approx(2 / 3)
    assert report.f1[0] == pytest.approx(2 / 3)


def test_macro_f1_is_not_harmonic_mean_of_macro_scores():
    p, r = 0.7597, 0.8056
    assert 2 * p * r / (p + r) == pytest.approx(0.7820, abs=5e-5)
    cm = ConfusionMatrix(np.array([[5, 0, 0], [3, 1, 0], [1, 1, 2]]))
    report = metrics(cm)
    harmonic = 2 * report.macro_precision * report.macro_recall / (report.macro_precision + report.macro_recall)
    assert report.macro_f1 == pytest.approx(report.f1.mean())
    assert abs(report.macro_f1 - harmonic) > 1e-3


def test_zero_denominators_give_zero():
    # class 2 never predicted and never present
    report = metrics(ConfusionMatrix(np.array([[3, 1, 0], [0, 2, 0], [0, 0, 0]])))
    assert report.precision[2] == 0.0 and report.recall[2] == 0.0 and report.f1[2] == 0.0
    assert report.absent == [2]
    assert 2 not in report.low_accuracy
    with pytest.raises(InputError):
        metrics(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64)))


def test_low_accuracy_and_weighted():
    cm = ConfusionMatrix(np.array([[9, 1], [2, 2]]))
    report = metrics(cm, threshold=0.70)
    assert report.low_accuracy == [1]
    np.testing.assert_allclose(report.class_accuracy, [0.9, 0.5])
    weighted = metrics(cm, weighted=True)
    assert weighted.macro_recall == pytest.approx((9 + 2) / 14)


def test_metrics_outputs(tmp_path):
    report = metrics(ConfusionMatrix(np.array([[4, 1], [0, 5]])))
    table = metrics_table(report, ["a", "b"])
    assert "macro" in table and "accuracy" in table
    text = write_metrics_csv(report, ["a", "b"], tmp_path / "m.csv").read_text()
    assert text.splitlines()[0] == "class,precision,recall,f1,support"
    assert text.splitlines()[-1].startswith("accuracy,0.9")


def test_confusion_export(tmp_path):
    cm = ConfusionMatrix(np.array([[3, 0], [1, 7]]), ["red", "white"])
    confusion_matrix_export(cm, tmp_path / "cm.csv", tmp_path / "cm.png")
    back = read_confusion_csv(tmp_path / "cm.csv")
    np.testing.assert_array_equal(back.counts, cm.counts)
    assert back.class_names == ["red", "white"]
    pixels = np.asarray(Image.open(tmp_path / "cm.png"))
    assert pixels.shape == (2, 2)
    assert pixels[0, 1] == 0 and pixels[1, 1] == 255


def test_zero_matrix_exports_black(tmp_path):
    confusion_matrix_export(ConfusionMatrix(np.zeros((3, 3), dtype=np.int64)), tmp_path / "z.csv", tmp_path / "z.png")
    assert np.asarray(Image.open(tmp_path / "z.png")).max() == 0


# ---- linear CKA ----
def test_cka_matches_hsic_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(5, 40))
        x = rng.normal(size=(n, int(rng.integers(1, 12))))
        y = rng.normal(size=(n, int(rng.integers(1, 12))))
        assert linear_cka(x, y) == pytest.approx(hsic_cka(x, y), abs=1e-8)


def test_cka_independent_features_are_dissimilar():
    rng = np.random.default_rng(0)
    value = linear_cka(rng.normal(size=(300, 16)), rng.normal(size=(300, 16)))
    assert 0.0 < value < 0.35


def test_cka_invariances(rng):
    x = rng.normal(size=(30, 6))
    y = rng.normal(size=(30, 4)) + x[:, :4]
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    base = linear_cka(x, y)
    assert linear_cka(x @ q, y) == pytest.approx(base, abs=1e-8)
    assert linear_cka(3.7 * x, y) == pytest.approx(base, abs=1e-8)
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)
    assert linear_cka(x, y) == pytest.approx(linear_cka(y, x), abs=1e-12)


def test_cka_verdict_does_not_depend_on_scale(rng):
    x = rng.normal(size=(30, 6))
    y = rng.normal(size=(30, 4)) + x[:, :4]
    base = linear_cka(x, y)
    for scale in (1e-9, 1e-7, 1e7):
        assert linear_cka(scale * x, y) == pytest.approx(base, abs=1e-8)
    for level in (1e-9, 1e6):
        with pytest.raises(UndefinedSimilarityError):
            linear_cka(np.full((5, 3), level), y[:5])
    with pytest.raises(UndefinedSimilarityError):
        linear_cka(np.zeros((5, 3)), y[:5])


def test_cka_errors(rng):
    with pytest.raises(UndefinedSimilarityError):
        linear_cka(np.ones((5, 3)), rng.normal(size=(5, 3)))
    with pytest.raises(ShapeError):
        linear_cka(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))
    with pytest.raises(InputError):
        linear_cka(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))


def test_cka_heatmap_self_comparison(tiny_vit, rng, tmp_path):
    model = VitModel(tiny_vit, rng)
    images = rng.random((6, 16, 16, 3))
    heat = cka_heatmap(model, model, images, batch_size=4)
    assert heat.shape == (2, 2)
    np.testing.assert_allclose(np.diag(heat), 1.0, atol=1e-10)
    np.testing.assert_allclose(heat, heat.T, atol=1e-10)
    lines = write_cka_csv(heat, 6, tmp_path / "cka.csv").read_text().splitlines()
    assert lines[0] == "# images=6"
    assert lines[1] == "block_i,block_j,value"
    assert len(lines) == 6


# ---- attention ----
def test_attention_maps_shape_and_range(tiny_vit, rng):
    maps = attention_maps(VitModel(tiny_vit, rng), rng.random((16, 16, 3)))
    assert maps.shape == (2, 4, 4)
    assert maps.min() >= 0.0 and maps.max() <= 1.0


def test_uniform_attention_exports_half(tiny_vit, rng, tmp_path):
    model = VitModel(tiny_vit, rng)
    d = tiny_vit.embed_dim
    model.blocks[-1].attn.qkv.weight.data[:, : 2 * d] = 0.0
    image = rng.random((16, 16, 3))
    maps = attention_maps(model, image)
    np.testing.assert_allclose(maps, 0.5)
    written = export_attention(maps, image, tmp_path, stem="leaf")
    assert [p.name for p in written[:2]] == ["leaf_head00.png", "leaf_head00_overlay.png"]
    assert len(written) == 4
