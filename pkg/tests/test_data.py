import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from affect_forge.data import (AU_RULES, LSD_CLASSES, MTL_CLASSES, AnnotationError, FaceLatent, ImageFormatError,
                               Sample, augment_image, batch_iter, expression_from_latent, file_checksum,
                               generate_dataset, hflip, label_from_latent, load_image, load_samples, mouth_box,
                               mouth_probe_features, parse_annotations, parse_row, render_face, save_ppm, synthesize,
                               write_annotations)

latents = st.builds(FaceLatent, st.floats(-1, 1), st.floats(0, 1), st.floats(-1, 1), st.floats(0, 1),
                    st.integers(0, 2 ** 31 - 1))

VALID_MTL = "img/0.ppm,0.5,-0.2,3,0,1,0,0,0,0,0,0,0,0,0,1"


def check_sample_invariants(s: Sample, mode: str) -> None:
    n_classes = len(LSD_CLASSES if mode == "LSD" else MTL_CLASSES)
    for x in (s.valence, s.arousal):
        assert x == -5 or -1 <= x <= 1
    assert (s.valence == -5) == (s.arousal == -5)
    assert s.expr == -1 or 0 <= s.expr < n_classes
    assert set(np.unique(s.aus)) <= {-1, 0, 1}
    assert s.valence != -5 or s.expr != -1 or np.any(s.aus != -1)


# --- rendering

def test_render_deterministic_and_in_range():
    z = FaceLatent(0.3, 0.7, -0.2, 0.4, jitter_seed=9)
    a, b = render_face(z, 48), render_face(z, 48)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 48, 48) and a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a[0], a[1])


@pytest.mark.parametrize("size", [32, 64])
def test_mouth_curvature_only_changes_mouth_box(size):
    happy = render_face(FaceLatent(1.0, 0.5, 0.1, 0.3, 4), size)
    sad = render_face(FaceLatent(-1.0, 0.5, 0.1, 0.3, 4), size)
    rows, cols = mouth_box(size)
    diff = happy != sad
    assert diff.any()
    outside = diff.copy()
    outside[:, rows, cols] = False
    assert not outside.any()


def test_mean_intensity_fixture():
    mean = render_face(FaceLatent(), 64).mean()
    assert 0.05 < mean < 0.95
    assert mean == pytest.approx(0.3632, abs=5e-3)  # frozen at first render


def test_render_rejects_small_size():
    with pytest.raises(ValueError):
        render_face(FaceLatent(), 16)


def test_latent_range_validation():
    with pytest.raises(ValueError):
        FaceLatent(mouth_curve=1.5)
    with pytest.raises(ValueError):
        FaceLatent(eye_open=-0.1)


# --- labels

def test_happy_latent():
    v, a, e, _ = label_from_latent(FaceLatent(1.0, 1.0, 0.0, 0.0))
    assert (v, a) == (1.0, 1.0)
    assert MTL_CLASSES[e] == "happiness"
    assert LSD_CLASSES[expression_from_latent(FaceLatent(1.0, 1.0, 0.0, 0.0), "LSD")] == "happiness"


def test_neutral_latent():
    v, a, e, aus = label_from_latent(FaceLatent(0.0, 0.5, 0.0, 0.0))
    assert MTL_CLASSES[e] == "neutral" and v == 0.0 and a == 0.0
    assert not aus.any()


def test_first_au_rule_is_inner_brow_raiser():
    assert AU_RULES[0][0].startswith("AU1 ")
    assert label_from_latent(FaceLatent(brow_raise=0.31))[3][0] == 1
    assert label_from_latent(FaceLatent(brow_raise=0.29))[3][0] == 0


@given(latents)
def test_labels_pure_and_consistent(z):
    a, b = label_from_latent(z), label_from_latent(FaceLatent(**{**z.__dict__}))
    assert a[:3] == b[:3] and np.array_equal(a[3], b[3])
    assert -1 <= a[0] <= 1 and -1 <= a[1] <= 1 and len(a[3]) == 12


@pytest.mark.parametrize("mode,classes", [("MTL", MTL_CLASSES), ("LSD", LSD_CLASSES)])
def test_class_balance_10k(mode, classes):
    rng = np.random.default_rng(0)
    ids = [expression_from_latent(FaceLatent.sample(rng), mode) for _ in range(10_000)]
    freq = np.bincount(ids, minlength=len(classes)) / 10_000
    C = len(classes)
    assert np.all(freq >= 1 / (3 * C)) and np.all(freq <= 3 / C), freq


def test_au_base_rates_are_non_degenerate():
    rng = np.random.default_rng(0)
    bits = np.array([label_from_latent(FaceLatent.sample(rng))[3] for _ in range(5000)])
    rates = bits.mean(axis=0)
    assert np.all(rates > 0.05) and np.all(rates < 0.95), rates


def test_mtl_masking_rate():
    samples = synthesize(1000, "MTL", seed=0, size=32)
    masked = sum(s.valence == -5 or s.expr == -1 or np.all(s.aus == -1) for s in samples)
    assert masked == 91  # frozen, within 100 +- 20
    for s in samples:
        check_sample_invariants(s, "MTL")


def test_lsd_samples_expression_only():
    for s in synthesize(20, "LSD", seed=1, size=32):
        assert s.valence == -5 and np.all(s.aus == -1) and 0 <= s.expr < 6


def test_mouth_probe_predicts_valence_sign():
    samples = synthesize(1000, "MTL", seed=0, size=64)
    X = np.array([mouth_probe_features(s.image) for s in samples])
    X = np.hstack([X, np.ones((len(X), 1))])
    y = np.sign([s.latent.mouth_curve for s in samples])
    w, *_ = np.linalg.lstsq(X[:500], y[:500], rcond=None)
    accuracy = np.mean(np.sign(X[500:] @ w) == y[500:])
    assert accuracy >= 0.95, accuracy


# --- files

def test_generate_dataset_deterministic(tmp_path):
    a = generate_dataset(10, "MTL", 3, tmp_path / "a", 32)
    b = generate_dataset(10, "MTL", 3, tmp_path / "b", 32)
    assert file_checksum(a) == file_checksum(b)
    assert file_checksum(a.parent / "img/00004.ppm") == file_checksum(b.parent / "img/00004.ppm")
    c = generate_dataset(10, "MTL", 4, tmp_path / "c", 32)
    assert file_checksum(a) != file_checksum(c)


def test_lsd_rows_have_two_fields(tmp_path):
    manifest = generate_dataset(12, "LSD", 0, tmp_path, 32)
    lines = manifest.read_text().splitlines()
    assert lines[0] == "path,expr" and len(lines) == 13
    assert all(len(line.split(",")) == 2 for line in lines)


def test_generate_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(2, "MTL", 0, blocker / "sub", 32)


def test_parse_example_row():
    s = parse_row(VALID_MTL, "MTL")
    assert s.expr == 3 and s.valence == 0.5 and s.arousal == -0.2 and s.path == "img/0.ppm"
    np.testing.assert_array_equal(s.aus, [0, 1] + [0] * 9 + [1])


def test_parse_rejects_out_of_range_valence_with_line():
    with pytest.raises(AnnotationError, match="line 7") as err:
        parse_row(VALID_MTL.replace(",0.5,", ",2.0,"), "MTL", line=7)
    assert err.value.line == 7


def test_parse_accepts_sentinels():
    s = parse_row("a.ppm,-5,-5,-1," + ",".join(["-1"] * 11 + ["1"]), "MTL")
    assert s.valence == -5 and s.expr == -1 and s.aus[-1] == 1
    with pytest.raises(AnnotationError):
        parse_row("a.ppm,-5,-5,-1," + ",".join(["-1"] * 12), "MTL")
    with pytest.raises(AnnotationError):
        parse_row("a.ppm,-5,0.1,2," + ",".join(["0"] * 12), "MTL")


def test_round_trip_write_parse(tmp_path):
    manifest = generate_dataset(30, "MTL", 2, tmp_path, 32)
    parsed = load_samples(manifest, "MTL")
    fresh = synthesize(30, "MTL", 2, 32)
    for p, s in zip(parsed, fresh):
        assert (p.valence, p.arousal, p.expr) == (s.valence, s.arousal, s.expr)
        np.testing.assert_array_equal(p.aus, s.aus)
        assert np.abs(p.image - s.image).max() <= 0.5 / 255 + 1e-12
    write_annotations(tmp_path / "again.csv", parsed, "MTL")
    assert (tmp_path / "again.csv").read_text() == manifest.read_text()


def test_parse_annotations_header_checks(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("path,expr\nx.ppm,1\n")
    with pytest.raises(AnnotationError, match="line 1"):
        parse_annotations(f, "MTL")
    f.write_text("")
    with pytest.raises(AnnotationError):
        parse_annotations(f, "LSD")
    f.write_text("path,expr\nx.ppm,1\nx.ppm,9\n")
    with pytest.raises(AnnotationError, match="line 3"):
        parse_annotations(f, "LSD")


def _mutations(rng):
    base = VALID_MTL.split(",")
    junk = ["", " ", "nan", "inf", "-inf", "1e999", "abc", "-5", "-1", "2", "1.5", "-1.0001", "3.7", "٣", "0x1",
            "1,2", "\x00", "9" * 400, "-0", "+1", "1_0", "\t1", "None", "8", "-2", "0.0.0"]
    for _ in range(10_000):
        parts = list(base)
        kind = rng.integers(0, 4)
        if kind == 0:
            for _ in range(rng.integers(1, 4)):
                parts[rng.integers(0, len(parts))] = junk[rng.integers(0, len(junk))]
        elif kind == 1:
            del parts[rng.integers(0, len(parts))]
        elif kind == 2:
            parts.insert(rng.integers(0, len(parts) + 1), junk[rng.integers(0, len(junk))])
        else:
            text = ",".join(parts)
            i = rng.integers(0, len(text))
            parts = (text[:i] + chr(int(rng.integers(0, 0x3000))) + text[i + 1:]).split(",")
        yield ",".join(parts)


def test_parser_fuzz_10k_lines():
    rng = np.random.default_rng(0)
    accepted = rejected = 0
    for line in _mutations(rng):
        for mode in ("MTL", "LSD"):
            try:
                s = parse_row(line, mode, line=1)
            except AnnotationError:
                rejected += 1
            else:
                accepted += 1
                check_sample_invariants(s, mode)
    assert rejected > 10_000


@given(st.text(max_size=80))
def test_parser_arbitrary_text(text):
    for mode in ("MTL", "LSD"):
        try:
            s = parse_row(text, mode)
        except AnnotationError:
            continue
        check_sample_invariants(s, mode)


# --- images

def test_all_white_pixmap(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
    np.testing.assert_array_equal(load_image(p), np.ones((3, 2, 2)))


def test_ppm_round_trip_and_comments(tmp_path, rng):
    img = rng.uniform(0, 1, (3, 5, 7))
    save_ppm(tmp_path / "a.ppm", img)
    back = load_image(tmp_path / "a.ppm")
    assert back.shape == (3, 5, 7) and np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    raw = (tmp_path / "a.ppm").read_bytes().replace(b"P6\n", b"P6\n# made by hand\n", 1)
    (tmp_path / "b.ppm").write_bytes(raw)
    np.testing.assert_array_equal(load_image(tmp_path / "b.ppm"), back)


@pytest.mark.parametrize("raw", [b"P5\n2 2\n255\n" + b"\0" * 12, b"P6\n2 2\n255\n" + b"\0" * 11, b"P6\n2",
                                 b"P6\n2 x\n255\n" + b"\0" * 12, b"P6\n2 2\n65535\n" + b"\0" * 24, b""])
def test_corrupt_pixmaps_rejected(tmp_path, raw):
    p = tmp_path / "bad.ppm"
    p.write_bytes(raw)
    with pytest.raises(ImageFormatError):
        load_image(p)


# --- batching

def _tiny(n):
    return synthesize(n, "MTL", 0, 32)


def test_batch_sizes_keep_last_partial():
    assert [len(b) for b in batch_iter(_tiny(10), 4, seed=0)] == [4, 4, 2]


def test_batch_order_seeded():
    s = _tiny(10)
    a = [b.indices.tolist() for b in batch_iter(s, 3, seed=5)]
    b = [b.indices.tolist() for b in batch_iter(s, 3, seed=5)]
    c = [b.indices.tolist() for b in batch_iter(s, 3, seed=5, epoch=1)]
    assert a == b and a != c
    assert sorted(sum(a, [])) == list(range(10))


def test_batch_errors():
    with pytest.raises(ValueError):
        next(batch_iter([], 4, 0))
    with pytest.raises(ValueError):
        next(batch_iter(_tiny(2), 0, 0))


def test_flip_is_involution(rng):
    x = rng.uniform(0, 1, (2, 3, 8, 8))
    assert hflip(hflip(x)).tobytes() == x.tobytes()


@given(st.integers(0, 10 ** 6))
def test_augment_keeps_shape_and_range(seed):
    img = render_face(FaceLatent(jitter_seed=seed % 1000), 32)
    out = augment_image(img, np.random.default_rng(seed))
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_augmented_batches_reproducible():
    s = _tiny(6)
    a = [b.images for b in batch_iter(s, 4, seed=1, augment=True)]
    b = [b.images for b in batch_iter(s, 4, seed=1, augment=True)]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    plain = next(batch_iter(s, 4, seed=1)).images
    assert not np.array_equal(a[0], plain)
