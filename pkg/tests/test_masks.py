import numpy as np
import pytest
from scipy import ndimage

from wain.masks import (BUCKETS, MaskGenerationError, MaskSpec, generate_mask, in_bucket, irregular_mask,
                        mask_ratio, read_mask, region_mask, sample_training_mask, write_mask)


def flood_components(mask):
    """Count 4-connected components with an explicit stack flood fill."""
    seen = np.zeros(mask.shape, bool)
    h, w = mask.shape
    count = 0
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        count += 1
        stack = [(y0, x0)]
        seen[y0, x0] = True
        while stack:
            y, x = stack.pop()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return count


def test_mask_ratio_examples():
    assert mask_ratio(np.zeros((4, 4))) == 0.0
    assert mask_ratio(np.ones((4, 4))) == 1.0
    assert mask_ratio(np.indices((6, 6)).sum(0) % 2) == 0.5


def test_bucket_edges():
    assert not in_bucket(0.10, BUCKETS["10-20"])
    assert in_bucket(0.20, BUCKETS["10-20"])
    assert in_bucket(0.10, (0.10, 0.40), closed_low=True)


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown mask kind"):
        MaskSpec("square")
    with pytest.raises(ValueError, match="unknown bucket"):
        MaskSpec("irregular", "5-10")
    with pytest.raises(ValueError, match=">= 32"):
        irregular_mask(16, 16, MaskSpec("irregular"))


@pytest.mark.parametrize("bucket", sorted(BUCKETS))
def test_irregular_buckets(bucket):
    for seed in range(40):
        m = irregular_mask(64, 64, MaskSpec("irregular", bucket, seed))
        assert m.dtype == np.uint8 and set(np.unique(m)) <= {0, 1}
        assert in_bucket(mask_ratio(m), BUCKETS[bucket])


def test_region_masks():
    for seed in range(40):
        m = region_mask(64, 64, MaskSpec("region", "any", seed))
        assert 0.10 <= mask_ratio(m) <= 0.40
        n = flood_components(m)
        assert 1 <= n <= 2
        assert n == ndimage.label(m)[1]


def test_region_bucket_and_larger_size():
    m = region_mask(128, 96, MaskSpec("region", "30-40", 3))
    assert m.shape == (128, 96) and in_bucket(mask_ratio(m), BUCKETS["30-40"])


def test_determinism():
    for kind in ("irregular", "region", "mixed"):
        spec = MaskSpec(kind, "20-30", 99)
        assert np.array_equal(generate_mask(64, 64, spec), generate_mask(64, 64, spec))
    a = [sample_training_mask(64, 64, np.random.default_rng(5)) for _ in range(2)]
    assert np.array_equal(a[0], a[1])


def test_unreachable_bucket_raises(monkeypatch):
    monkeypatch.setitem(BUCKETS, "tiny", (0.0, 1e-6))
    with pytest.raises(MaskGenerationError, match="unreachable"):
        irregular_mask(64, 64, MaskSpec("irregular", "tiny", 0))


def test_training_sampler_kinds_and_contracts():
    rng = np.random.default_rng(0)
    kinds = []
    for _ in range(200):
        m, kind = sample_training_mask(64, 64, rng, return_kind=True)
        kinds.append(kind)
        frac = mask_ratio(m)
        assert 0 < frac < 1
        if kind == "region":
            assert 0.10 <= frac <= 0.40
        else:
            assert any(in_bucket(frac, b) for b in BUCKETS.values())
    assert 70 < kinds.count("irregular") < 130


def test_png_round_trip(tmp_path):
    m = irregular_mask(64, 64, MaskSpec("irregular", "30-40", 1))
    write_mask(tmp_path / "m.png", m)
    from PIL import Image
    raw = np.asarray(Image.open(tmp_path / "m.png"))
    assert set(np.unique(raw)) == {0, 255}
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)
