import math

import numpy as np
import numpy.testing as npt
import pytest

from literati import _decode_kernels as kernels
from literati.eval_harness import iou
from literati.map_decoder import (
    DecodeParams,
    Detection,
    MapMeta,
    PeakRegion,
    decode,
    load_map,
    load_maps_dir,
    maximal_filter_regions,
    region_to_detection,
    save_map,
    softmax_map,
)
from literati.synthetic import make_planted_maps

from _oracles import brute_force_regions, region_lists_equal

BACKENDS = kernels.available_backends()


def _two_channel(disease: np.ndarray) -> np.ndarray:
    return np.stack([1.0 - disease, disease])


# --- softmax_map ----------------------------------------------------------------

def test_softmax_uniform():
    probs = softmax_map(np.zeros((2, 4, 4)))
    npt.assert_allclose(probs, 0.5)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 5, 5))
    shifted = logits + 7.25  # same constant on every channel of every cell
    npt.assert_allclose(softmax_map(logits), softmax_map(shifted), atol=1e-9)


def test_softmax_scalar_oracle():
    logits = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    want = [v / sum(e) for v in e]
    npt.assert_allclose(softmax_map(logits)[:, 0, 0], want, atol=1e-12)
    npt.assert_allclose(softmax_map(logits)[:, 0, 0],
                        [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_non_finite_names_cell():
    logits = np.zeros((2, 3, 3))
    logits[1, 2, 1] = np.inf
    with pytest.raises(ValueError, match=r"channel 1.*\(2, 1\)"):
        softmax_map(logits)


def test_softmax_normalization_property():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        logits = rng.normal(0, 5, size=(k, 3, 3))
        sums = softmax_map(logits).sum(axis=0)
        npt.assert_allclose(sums, 1.0, atol=1e-6)


# --- maximal_filter_regions ------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_delta_peak(backend):
    disease = np.full((8, 8), 0.01)
    disease[3, 4] = 0.9
    regions = maximal_filter_regions(_two_channel(disease), 1,
                                     DecodeParams(d=2, tau=0.1, alpha=0.5),
                                     backend=backend)
    assert len(regions) == 1
    assert regions[0].members == frozenset({(3, 4)})
    assert regions[0].centroid == (3.0, 4.0)
    assert regions[0].peak_prob == 0.9


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_gaussian_bumps(backend):
    rows = np.arange(41.0)[:, None]
    cols = np.arange(41.0)[None, :]
    bump = lambda r0, c0: np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * 3.0 ** 2))
    disease = 0.45 * bump(10, 10) + 0.45 * bump(30, 30) + 0.01
    regions = maximal_filter_regions(_two_channel(disease), 1,
                                     DecodeParams(d=5, tau=0.1, alpha=0.5),
                                     backend=backend)
    assert len(regions) == 2
    centroids = sorted(r.centroid for r in regions)
    assert abs(centroids[0][0] - 10) <= 0.5 and abs(centroids[0][1] - 10) <= 0.5
    assert abs(centroids[1][0] - 30) <= 0.5 and abs(centroids[1][1] - 30) <= 0.5


def test_uniform_map_above_tau_is_one_region():
    regions = maximal_filter_regions(np.full((2, 6, 6), 0.5), 1,
                                     DecodeParams(d=2, tau=0.4, alpha=0.5))
    assert len(regions) == 1
    assert regions[0].member_count == 36
    assert regions[0].peak == (0, 0)  # row-major plateau tie-break


def test_uniform_map_below_tau_empty():
    regions = maximal_filter_regions(np.full((2, 6, 6), 0.5), 1,
                                     DecodeParams(d=2, tau=0.6, alpha=0.5))
    assert regions == []


@pytest.mark.parametrize("backend", BACKENDS)
def test_oracle_equivalence_random_maps(backend):
    for seed in range(40):
        rng = np.random.default_rng(seed)
        H, W = int(rng.integers(4, 33)), int(rng.integers(4, 33))
        probs = softmax_map(rng.normal(0, 2, size=(2, H, W)))
        params = DecodeParams(d=int(rng.integers(1, 5)),
                              tau=float(rng.uniform(0, 0.8)),
                              alpha=float(rng.uniform(0.2, 1.0)))
        got = maximal_filter_regions(probs, 1, params, backend=backend)
        want = brute_force_regions(probs[1].tolist(), params.d, params.tau, params.alpha)
        assert region_lists_equal(got, want), f"seed {seed}"


@pytest.mark.parametrize("backend", BACKENDS)
def test_oracle_equivalence_plateau_maps(backend):
    # quantized values force ties; exercises the row-major tie-break
    for seed in range(30):
        rng = np.random.default_rng(900 + seed)
        H, W = int(rng.integers(4, 20)), int(rng.integers(4, 20))
        disease = rng.choice([0.1, 0.3, 0.5, 0.5, 0.7, 0.9], size=(H, W))
        params = DecodeParams(d=int(rng.integers(1, 4)),
                              tau=float(rng.choice([0.0, 0.3, 0.5])),
                              alpha=float(rng.choice([0.4, 0.7, 1.0])))
        got = maximal_filter_regions(_two_channel(disease), 1, params, backend=backend)
        want = brute_force_regions(disease.tolist(), params.d, params.tau, params.alpha)
        assert region_lists_equal(got, want), f"seed {seed}"


@pytest.mark.skipif(len(BACKENDS) < 2, reason="numba unavailable")
def test_backends_agree():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        probs = softmax_map(rng.normal(0, 2, size=(2, 24, 24)))
        params = DecodeParams(d=2, tau=0.3, alpha=0.5)
        a = maximal_filter_regions(probs, 1, params, backend="numba")
        b = maximal_filter_regions(probs, 1, params, backend="numpy")
        assert a == b


def test_peak_dominance_property():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        probs = softmax_map(rng.normal(0, 2, size=(2, 20, 20)))
        p = probs[1]
        d = int(rng.integers(1, 4))
        params = DecodeParams(d=d, tau=0.2, alpha=float(rng.uniform(0.2, 0.95)))
        for region in maximal_filter_regions(probs, 1, params):
            member_max = max(p[r, c] for r, c in region.members)
            assert region.peak_prob >= member_max
            pr, pc = region.peak
            window = p[max(0, pr - d):pr + d + 1, max(0, pc - d):pc + d + 1]
            assert region.peak_prob >= window.max()


def test_centroid_law():
    rng = np.random.default_rng(77)
    for _ in range(100):
        probs = softmax_map(rng.normal(0, 2, size=(2, 16, 16)))
        for region in maximal_filter_regions(probs, 1, DecodeParams(d=2, tau=0.3)):
            dr = sum(r - region.centroid[0] for r, _ in region.members)
            dc = sum(c - region.centroid[1] for _, c in region.members)
            assert abs(dr) < 1e-9 and abs(dc) < 1e-9


def test_tau_monotonicity():
    rng = np.random.default_rng(31)
    for _ in range(100):
        probs = softmax_map(rng.normal(0, 2, size=(2, 18, 18)))
        taus = sorted(rng.uniform(0, 0.9, size=3))
        counts = [len(maximal_filter_regions(probs, 1, DecodeParams(d=2, tau=t)))
                  for t in taus]
        assert counts == sorted(counts, reverse=True)


# --- region_to_detection ---------------------------------------------------------

def _region(members, peak_prob=0.8, class_index=1):
    rows = [r for r, _ in members]
    cols = [c for _, c in members]
    centroid = (sum(rows) / len(rows), sum(cols) / len(cols))
    peak = max(members, key=lambda rc: rc)
    return PeakRegion(class_index=class_index, members=frozenset(members),
                      centroid=centroid, peak_prob=peak_prob,
                      member_count=len(members), peak=peak)


def test_detection_single_cell():
    det = region_to_detection(_region({(5, 7)}))
    assert det.box.as_list() == [7, 5, 1, 1]
    assert det.box.space == "map"


def test_detection_block():
    members = {(r, c) for r in range(2, 5) for c in range(6, 9)}
    det = region_to_detection(_region(members))
    assert det.box.as_list() == [6, 2, 3, 3]
    assert det.centroid == (3.0, 7.0)


def test_detection_crescent_min_max_oracle():
    members = {(2, 4), (2, 5), (3, 3), (4, 3), (5, 4), (5, 5), (4, 7)}
    det = region_to_detection(_region(members))
    rows = [r for r, _ in members]
    cols = [c for _, c in members]
    assert det.box.as_list() == [min(cols), min(rows),
                                 max(cols) - min(cols) + 1,
                                 max(rows) - min(rows) + 1]


# --- decode -----------------------------------------------------------------------

def test_decode_uniform_below_tau_empty():
    assert decode(np.zeros((3, 8, 8)), DecodeParams(d=2, tau=0.6)) == []


def test_decode_planted_box():
    for planted in make_planted_maps(8, seed=21):
        dets = decode(planted.logits, DecodeParams())
        assert len(dets) == 1
        assert iou(dets[0].box, planted.boxes[0]) >= 0.5
        assert dets[0].confidence == pytest.approx(
            float(softmax_map(planted.logits)[1].max()))


def test_decode_deterministic():
    rng = np.random.default_rng(4)
    logits = rng.normal(0, 2, size=(3, 20, 20))
    params = DecodeParams(d=2, tau=0.35, alpha=0.6)
    assert decode(logits, params) == decode(logits, params)


def test_decode_sorted_by_confidence():
    rng = np.random.default_rng(8)
    logits = rng.normal(0, 2, size=(3, 24, 24))
    dets = decode(logits, DecodeParams(d=2, tau=0.3))
    confs = [d.confidence for d in dets]
    assert confs == sorted(confs, reverse=True)


def test_decode_skips_background_channel():
    disease = np.full((10, 10), -3.0)
    disease[4, 4] = 3.0
    logits = np.stack([np.zeros((10, 10)), disease])
    dets = decode(logits, DecodeParams(d=2, tau=0.5))
    assert {d.class_index for d in dets} == {1}


def test_decode_params_validation():
    with pytest.raises(ValueError):
        DecodeParams(d=0)
    with pytest.raises(ValueError):
        DecodeParams(tau=1.0)
    with pytest.raises(ValueError):
        DecodeParams(alpha=0.0)


# --- map files ---------------------------------------------------------------------

def test_map_save_load_round_trip(tmp_path):
    planted = make_planted_maps(2, seed=5)[0]
    save_map(tmp_path, planted.meta, planted.logits)
    loaded = load_map(tmp_path / f"{planted.meta.image_id}.npy")
    assert loaded.meta == planted.meta
    npt.assert_allclose(loaded.logits, planted.logits, atol=1e-6)  # float32 file
    # NPY version 1.0 magic
    with open(tmp_path / f"{planted.meta.image_id}.npy", "rb") as f:
        assert f.read(8) == b"\x93NUMPY\x01\x00"


def test_load_map_requires_sidecar(tmp_path):
    np.save(tmp_path / "orphan.npy", np.zeros((2, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="sidecar"):
        load_map(tmp_path / "orphan.npy")


def test_load_map_rejects_wrong_dtype(tmp_path):
    meta = MapMeta(image_id="x", classes=("background", "pneumonia"))
    np.save(tmp_path / "x.npy", np.zeros((2, 4, 4), dtype=np.float64))
    (tmp_path / "x.json").write_text(
        '{"image_id": "x", "classes": ["background", "pneumonia"], '
        '"space": "map", "map_to_net_scale": 1.0}')
    with pytest.raises(ValueError, match="float32"):
        load_map(tmp_path / "x.npy")


def test_load_maps_dir_empty(tmp_path):
    with pytest.raises(ValueError, match="no .npy"):
        load_maps_dir(tmp_path)
