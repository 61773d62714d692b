import numpy as np
import pytest
from PIL import Image

from catw.corpus import (
    Corpus,
    CorpusError,
    CorpusSpec,
    center_crop_resize,
    ingest_folder,
    load_corpus,
    save_corpus,
    synth_corpus,
)


def test_default_corpus_shape_and_determinism():
    a = synth_corpus(CorpusSpec(), seed=3)
    b = synth_corpus(CorpusSpec(), seed=3)
    assert a.images.shape == (60, 3, 32, 32) and a.images.dtype == np.float32
    assert a.images.tobytes() == b.images.tobytes() and a.digest() == b.digest()
    assert synth_corpus(CorpusSpec(), seed=4).digest() != a.digest()
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_identities_differ_in_many_pixels():
    c = synth_corpus(CorpusSpec(), seed=0)
    fracs = []
    for i in range(5):
        for j in range(i + 1, 5):
            a, b = c.select(identity=i).images, c.select(identity=j).images
            fracs.append(np.mean(np.abs(a[:, None] - b[None]).max(axis=2) > 1 / 255))
    assert np.mean(fracs) >= 0.20


def test_splits_honored():
    c = synth_corpus(CorpusSpec(identities=3, images_per_identity=6, split=(2, 2, 2)), seed=0)
    for k in range(3):
        labels = c.select(identity=k).split
        assert labels == ["reference"] * 2 + ["protect_target"] * 2 + ["extra_reference"] * 2
    assert len(c.select(split="protect_target")) == 6


def test_spec_errors():
    with pytest.raises(CorpusError):
        CorpusSpec(split=(4, 4, 5))
    with pytest.raises(CorpusError):
        CorpusSpec(kind="folder")
    with pytest.raises(CorpusError):
        CorpusSpec(kind="video")


def test_save_load_roundtrip(tmp_path):
    c = synth_corpus(CorpusSpec(identities=2, images_per_identity=3, split=(1, 1, 1)), seed=1)
    save_corpus(c, tmp_path / "c", sidecar={"attack": "recon"})
    back = load_corpus(tmp_path / "c")
    assert back.images.tobytes() == c.images.tobytes()
    assert back.ids == c.ids and back.split == c.split and back.meta["sidecar"] == {"attack": "recon"}
    # PNG-only fallback is the 8-bit quantization of the same pixels
    (tmp_path / "c" / "pixels.npy").unlink()
    q = load_corpus(tmp_path / "c")
    assert np.max(np.abs(q.images - c.images)) <= 0.5 / 255 + 1e-6


# ------------------------------------------------------------------ ingestion


def _bilinear_oracle(img, size):
    """Scalar half-pixel-center bilinear sampling of a square image."""
    m = img.shape[0]
    out = np.zeros((size, size, img.shape[2]))
    for i in range(size):
        for j in range(size):
            y = min(max((i + 0.5) * m / size - 0.5, 0), m - 1)
            x = min(max((j + 0.5) * m / size - 0.5, 0), m - 1)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, m - 1), min(x0 + 1, m - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def test_crop_geometry():
    img = np.zeros((48, 64, 3))
    img[:, 8:56] = 1.0  # the centered 48x48 square
    out = center_crop_resize(img, 32)
    assert out.shape == (32, 32, 3)
    np.testing.assert_allclose(out, 1.0)


def test_square_input_unchanged():
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    np.testing.assert_array_equal(center_crop_resize(img, 32), img)


def test_gradient_image_matches_bilinear_oracle():
    yy, xx = np.mgrid[0:50, 0:50]
    img = np.stack([xx / 49, yy / 49, (xx + yy) / 98], axis=-1)
    img = img + 0.05 * np.sin(xx / 3.0)[..., None]
    out = center_crop_resize(img, 32)
    assert np.max(np.abs(out - _bilinear_oracle(img, 32))) <= 1 / 255


def test_ingest_folder(tmp_path):
    rng = np.random.default_rng(1)
    for ident in ("alice", "bob"):
        d = tmp_path / ident
        d.mkdir()
        for k in range(3):
            Image.fromarray(rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)).save(d / f"{k}.png")
    (tmp_path / "bob" / "broken.png").write_bytes(b"not an image")
    corpus, skipped = ingest_folder(tmp_path, size=16)
    assert isinstance(corpus, Corpus)
    assert corpus.images.shape == (6, 3, 16, 16)
    assert list(corpus.identity) == [0, 0, 0, 1, 1, 1]
    assert len(skipped) == 1 and skipped[0].endswith("broken.png")
    assert corpus.split[:3] == ["reference", "protect_target", "extra_reference"]


def test_ingest_same_size_keeps_pixels(tmp_path):
    arr = np.random.default_rng(2).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    corpus, _ = ingest_folder(tmp_path, size=16)
    np.testing.assert_allclose(corpus.images[0], arr.transpose(2, 0, 1) / 255.0, atol=1e-7)


def test_ingest_errors(tmp_path):
    with pytest.raises(CorpusError):
        ingest_folder(tmp_path / "nope")
    (tmp_path / "junk.png").write_bytes(b"zzz")
    with pytest.raises(CorpusError, match="no decodable"):
        ingest_folder(tmp_path)
