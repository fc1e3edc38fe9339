"""Acceptance gate: every criterion at its stated tolerance and budget.

Each test prints one PASS/FAIL line (visible with pytest -s) and enforces
its runtime budget. Run with:  pytest tests/test_acceptance.py -v -s
"""

import json
import math
import time
from contextlib import contextmanager
from importlib import resources

import numpy as np
import pytest

from literati.annotation_store import make_split
from literati.eval_harness import (
    IOU_THRESHOLDS,
    accuracy_table,
    iou,
    load_table_fixture,
    match_image,
    micro_recall,
    render_table,
)
from literati.map_decoder import (
    DecodeParams,
    decode,
    maximal_filter_regions,
    softmax_map,
)
from literati.numeric_heads import (
    GRAD_CHECK_BOUNDS,
    GRAD_CHECK_OPS,
    conv1d_layer_select,
    grad_check,
    make_grad_check_inputs,
)
from literati.report_parser import (
    Report,
    classify_attributes,
    compose_referring_expression,
    default_lexicon,
    extract_disease_mentions,
    segment_sentences,
)
from literati.synthetic import make_planted_maps
from literati.tpe_tuner import ParamSpec, SearchSpace, TpeConfig, optimize

from _oracles import brute_force_regions, region_lists_equal


@contextmanager
def criterion(name: str, budget_s: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"FAIL: {name}")
        raise
    elapsed = time.perf_counter() - start
    if elapsed >= budget_s:
        print(f"FAIL: {name} (runtime {elapsed:.1f}s >= {budget_s:.0f}s)")
        pytest.fail(f"{name}: runtime {elapsed:.1f}s exceeds {budget_s:.0f}s budget")
    print(f"PASS: {name} ({elapsed:.2f}s)")


def test_table_regression():
    with criterion("table regression reproduces published rows byte-exactly", 1.0):
        tables = resources.files("literati").joinpath("data/tables")
        mimic = render_table(load_table_fixture(str(tables / "mimic_cxr.json")), "csv")
        assert "LITERATI NWS,0.349,0.125,0.060,0.024,0.007" in mimic.splitlines()

        ablation = render_table(load_table_fixture(str(tables / "nl_ablation.json")), "csv")
        lines = ablation.splitlines()
        assert lines[0] == "IOU,0.1,0.2,0.3,0.4,0.5"
        assert lines[1] == "Scene label,0.337,0.123,0.048,0.012,0.000"
        assert lines[2] == "Referring expression,0.349,0.125,0.051,0.014,0.002"
        assert lines[3] == "Referring disease emphasis,0.349,0.125,0.060,0.024,0.007"


def test_decoder_oracle_equivalence():
    with criterion("decoder equals exhaustive oracle on 200 random maps", 10.0):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            H, W = int(rng.integers(4, 33)), int(rng.integers(4, 33))
            probs = softmax_map(rng.normal(0, 2.0, size=(2, H, W)))
            params = DecodeParams(
                d=int(rng.integers(1, 5)),
                tau=float(rng.uniform(0.0, 0.8)),
                alpha=float(rng.uniform(0.2, 1.0)),
            )
            got = maximal_filter_regions(probs, 1, params)
            want = brute_force_regions(probs[1].tolist(), params.d,
                                       params.tau, params.alpha)
            assert region_lists_equal(got, want), f"seed {seed}"


def test_synthetic_end_to_end():
    with criterion("synthetic end-to-end: top1 accuracy 1.000, multi recall >= 0.95", 30.0):
        params = DecodeParams()

        single = make_planted_maps(50, seed=3, peaks_per_image=1)
        results = [
            match_image(decode(p.logits, params), list(p.boxes), IOU_THRESHOLDS,
                        mode="top1", image_id=p.meta.image_id)
            for p in single
        ]
        table = accuracy_table(results, method="synthetic")
        assert table.rows["synthetic"][IOU_THRESHOLDS.index(0.3)] == 1.0

        double = make_planted_maps(50, seed=4, peaks_per_image=2)
        multi = [
            match_image(decode(p.logits, params), list(p.boxes), 0.3,
                        mode="greedy_multi", image_id=p.meta.image_id)
            for p in double
        ]
        assert micro_recall(multi, 0.3) >= 0.95


def test_gradient_suite():
    with criterion("gradient suite: 5 ops x 100 seeds at h=1e-6", 60.0):
        for op in GRAD_CHECK_OPS:
            bound = GRAD_CHECK_BOUNDS[op]
            for seed in range(100):
                inputs = make_grad_check_inputs(op, np.random.default_rng(seed))
                err = grad_check(op, inputs, h=1e-6, projection_seed=seed)
                assert err < bound, f"{op} seed {seed}: {err:.3e} >= {bound:.0e}"


def test_parser_fixtures():
    with criterion("parser fixtures: quoted phrases and negation labels, 100%", 10.0):
        lexicon = default_lexicon()
        fixtures = resources.files("literati").joinpath("data/fixtures")

        phrases = json.loads(
            (fixtures / "referring_phrases.json").read_text(encoding="utf-8"))
        assert len(phrases) >= 16
        for entry in phrases:
            sents = segment_sentences(entry["phrase"])
            assert len(sents) == 1
            spans = classify_attributes(sents[0], lexicon)
            got = [[s.category, s.surface.lower()] for s in spans]
            assert got == entry["spans"], entry["phrase"]
            expr = compose_referring_expression(spans, sents[0], lexicon)
            assert expr is not None and expr.polarity == entry["polarity"], entry["phrase"]

        sentences = [
            json.loads(line) for line in
            (fixtures / "negation_sentences.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        assert len(sentences) == 50
        for i, doc in enumerate(sentences):
            report = Report("fixture", f"line{i}", doc["text"])
            polarity = {d: m.polarity
                        for m in extract_disease_mentions(report, lexicon)
                        for d in m.disease_tags}
            assert polarity.get(doc["disease"]) == doc["polarity"], doc["text"]


def test_baseline_recovery():
    with criterion("conv1d with uniform 1/4 kernel equals 4-layer average", 5.0):
        rng = np.random.default_rng(0)
        for _ in range(100):
            stack = rng.normal(size=(int(rng.integers(4, 13)), int(rng.integers(1, 9))))
            fused = conv1d_layer_select(stack[-4:], np.full(4, 0.25), stride=1)
            assert np.abs(fused - stack[-4:].mean(axis=0)).max() < 1e-12


def test_tpe_benchmark():
    with criterion("TPE median >= random search median on -(x-2)^2, best-x within 0.15", 10.0):
        space = SearchSpace((ParamSpec("x", "uniform", 0.0, 10.0),))
        tpe_obj, tpe_x, rs_obj = [], [], []
        for seed in range(20):
            best, _ = optimize(lambda p: -(p["x"] - 2.0) ** 2, space, 60,
                               TpeConfig(seed=seed))
            tpe_obj.append(best.objective)
            tpe_x.append(abs(best.params["x"] - 2.0))
            xs = np.random.default_rng(seed).uniform(0.0, 10.0, 60)
            rs_obj.append(float((-(xs - 2.0) ** 2).max()))
        assert np.median(tpe_obj) >= np.median(rs_obj)
        assert np.median(tpe_x) <= 0.15


def test_property_suites():
    with criterion("1000-case property suites: split, IOU, softmax, monotone tables", 30.0):
        from literati.annotation_store import Box, rescale_box

        # split partition law
        rng = np.random.default_rng(100)
        for case in range(1000):
            n = int(rng.integers(1, 30))
            ids = [f"{case}-{i}" for i in range(n)]
            r1 = float(rng.uniform(0, 1))
            r2 = float(rng.uniform(0, 1 - r1))
            split = make_split(ids, (r1, r2, 1 - r1 - r2),
                               seed=int(rng.integers(0, 1 << 32)))
            buckets = [split.train_ids, split.val_ids, split.test_ids]
            assert set().union(*map(set, buckets)) == set(ids)
            assert sum(len(b) for b in buckets) == n

        # IOU symmetry, bounds, scale invariance
        rng = np.random.default_rng(101)
        for _ in range(1000):
            a = Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 30, 2), "native")
            b = Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 30, 2), "native")
            v = iou(a, b)
            assert iou(b, a) == v and 0.0 <= v <= 1.0
            target = (int(rng.integers(10, 800)), int(rng.integers(10, 800)))
            v2 = iou(rescale_box(a, (100, 100), target),
                     rescale_box(b, (100, 100), target))
            assert abs(v2 - v) < 1e-9

        # softmax normalization
        rng = np.random.default_rng(102)
        for _ in range(1000):
            k = int(rng.integers(2, 6))
            probs = softmax_map(rng.normal(0, 5, size=(k, 3, 3)))
            assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-6

        # threshold monotonicity of generated tables
        rng = np.random.default_rng(103)
        from literati.map_decoder import Detection

        for _ in range(1000):
            dets = sorted(
                (Detection(1, Box(*rng.uniform(0, 20, 2), *rng.uniform(2, 8, 2), "map"),
                           float(rng.uniform()), (0.0, 0.0))
                 for _ in range(int(rng.integers(0, 3)))),
                key=lambda det: -det.confidence)
            gts = [Box(*rng.uniform(0, 20, 2), *rng.uniform(2, 8, 2), "map")]
            result = match_image(dets, gts, IOU_THRESHOLDS, mode="top1", image_id="x")
            accs = accuracy_table([result]).rows["detections"]
            assert list(accs) == sorted(accs, reverse=True)
