import json

import numpy as np
import pytest

from sarmim.datakit import CorpusManifest
from sarmim.errors import ParameterError, SpecError
from sarmim.features import SarImage
from sarmim.imageio import read_image
from sarmim.specklesim import (
    SHAPES,
    SIZE_BINS,
    CorpusConfig,
    SceneSpec,
    SpeckleParams,
    Target,
    class_id_for,
    class_name,
    gamma_speckle,
    image_rng,
    make_corpus,
    random_scene_spec,
    speckle_factor,
    synth_scene,
    target_mask,
)


def test_speckle_variance_l4():
    s = speckle_factor((1_000_000,), 4, np.random.default_rng(0))
    assert s.var() == pytest.approx(0.25, rel=0.01)
    assert s.mean() == pytest.approx(1.0, abs=3 * np.sqrt(0.25 / s.size))


def test_mean_preserved_single_look():
    clean = np.full((512, 512), 37.0)
    out = gamma_speckle(clean, SpeckleParams(1, seed=11)).pixels
    assert 0.99 <= out.mean() / clean.mean() <= 1.01


def test_amplitude_domain_statistics():
    # sqrt of Gamma(1, 1) intensity has mean sqrt(pi)/2
    out = gamma_speckle(np.ones((512, 512)), SpeckleParams(1, seed=3), domain="amplitude").pixels
    assert out.mean() == pytest.approx(np.sqrt(np.pi) / 2, rel=0.01)
    assert (out**2).mean() == pytest.approx(1.0, rel=0.01)


def test_per_pixel_unbiased():
    clean = np.array([[1.0, 5.0], [0.5, 20.0]])
    looks, n = 2, 10_000
    acc = np.zeros_like(clean)
    for seed in range(n):
        acc += gamma_speckle(clean, SpeckleParams(looks, seed)).pixels
    mean = acc / n
    sigma = clean * np.sqrt(1.0 / (n * looks))
    assert np.all(np.abs(mean - clean) <= 3 * sigma)


def test_speckle_deterministic_and_validated():
    clean = np.random.default_rng(1).uniform(1, 2, (32, 32))
    a = gamma_speckle(clean, SpeckleParams(2, 99)).pixels
    b = gamma_speckle(clean, SpeckleParams(2, 99)).pixels
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ParameterError):
        SpeckleParams(0)
    with pytest.raises(ParameterError):
        SpeckleParams(1.5)
    with pytest.raises(ParameterError):
        gamma_speckle(clean, SpeckleParams(1), domain="log")


def test_speckle_keeps_meta():
    out = gamma_speckle(SarImage(np.ones((4, 4)), {"band": "C"}), SpeckleParams(4))
    assert out.meta == {"band": "C", "looks": 4}


def centred_spec(contrast, shape="rectangle", size=64):
    t = Target(shape, (size / 2, size / 2), (20.0, 12.0), 0.3, contrast, "small")
    return SceneSpec((size, size), 100.0, (t,))


def test_unit_contrast_vanishes():
    spec = centred_spec(1.0)
    image, label = synth_scene(spec, SpeckleParams(1, 5))
    mask = target_mask(64, 64, spec.targets[0])
    a, b = image.pixels[mask], image.pixels[~mask]
    t = (a.mean() - b.mean()) / np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(t) < 3
    assert label == class_id_for("rectangle", "small")


def test_contrast_eight_four_looks():
    spec = centred_spec(8.0, "ellipse")
    mask = target_mask(64, 64, spec.targets[0])
    for seed in range(100):
        px = synth_scene(spec, SpeckleParams(4, seed))[0].pixels
        assert px[mask].mean() > 4 * px[~mask].mean()


def test_scene_deterministic_and_label_stable():
    spec = random_scene_spec(np.random.default_rng(4), 5)
    a, la = synth_scene(spec, SpeckleParams(2, 1))
    b, lb = synth_scene(spec, SpeckleParams(2, 1))
    c, lc = synth_scene(spec, SpeckleParams(2, 2))
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert la == lb == lc == 5
    assert a.pixels.tobytes() != c.pixels.tobytes()


def test_class_ids():
    ids = {class_id_for(s, b) for s in SHAPES for b in SIZE_BINS}
    assert ids == set(range(8))
    assert class_name(class_id_for("L", "large")) == "L-large"
    with pytest.raises(SpecError):
        class_id_for("triangle", "small")


@pytest.mark.parametrize("class_id", range(8))
def test_random_specs_render(class_id):
    spec = random_scene_spec(np.random.default_rng(class_id), class_id)
    assert spec.class_id == class_id
    mask = target_mask(64, 64, spec.targets[0])
    assert mask.sum() > 10


def test_out_of_bounds_target():
    t = Target("ellipse", (3.0, 3.0), (20.0, 10.0))
    with pytest.raises(SpecError):
        synth_scene(SceneSpec((64, 64), 1.0, (t,)), SpeckleParams())
    with pytest.raises(SpecError):
        synth_scene(centred_spec(0.5), SpeckleParams())


def test_image_rng_streams_independent():
    assert image_rng(0, 1).integers(0, 2**62) != image_rng(0, 2).integers(0, 2**62)
    assert image_rng(0, 1).integers(0, 2**62) == image_rng(0, 1).integers(0, 2**62)


def test_corpus_balanced_and_reproducible(tmp_path):
    cfg = dict(num_images=80, num_classes=8, size=32, seed=7)
    m1 = make_corpus(CorpusConfig(out_dir=str(tmp_path / "a"), **cfg))
    m2 = make_corpus(CorpusConfig(out_dir=str(tmp_path / "b"), workers=3, **cfg))
    assert len(m1) == len(m2) == 80
    assert set(m1.class_counts().values()) == {10}
    text_a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    assert text_a == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    for rec in m1.records[:8]:
        pa = (tmp_path / "a" / rec.path).read_bytes()
        assert pa == (tmp_path / "b" / rec.path).read_bytes()
    # class histogram recomputed from the written file
    back = CorpusManifest.read(tmp_path / "a" / "manifest.jsonl")
    counts = {}
    for line in text_a.decode().splitlines():
        c = json.loads(line)["class"]
        counts[c] = counts.get(c, 0) + 1
    assert counts == dict(back.class_counts()) and len(counts) == 8
    splits = back.filter(split="test").class_counts()
    assert set(splits.values()) == {2}
    img = read_image(tmp_path / "a" / rec.path)
    assert img.shape == (32, 32) and img.meta["dtype"] == "uint16"


def test_default_corpus_arithmetic():
    cfg = CorpusConfig()
    cfg.validate()
    assert cfg.num_images // cfg.num_classes == 250


def test_generic_corpus(tmp_path):
    m = make_corpus(CorpusConfig(num_images=6, num_classes=1, size=32, kind="generic",
                                 out_dir=str(tmp_path)))
    assert {r.split for r in m} == {"unlabeled"}
    assert all(r.cls is None for r in m)


def test_corpus_config_errors(tmp_path):
    with pytest.raises(ParameterError):
        CorpusConfig(num_images=10, num_classes=8).validate()
    with pytest.raises(ParameterError):
        CorpusConfig(num_classes=9, num_images=18).validate()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        make_corpus(CorpusConfig(num_images=8, out_dir=str(blocker / "sub")))
