"""Acceptance suite: every release criterion as one test, each enforcing
its stated tolerance and time budget. A summary line per criterion is
printed at the end of the run (see conftest.py)."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from helpers import inject_ground_truth
from tubeground import dataio, geometry, metrics, nn
from tubeground import encoder as enc
from tubeground import spatial_decoder as sd
from tubeground import temporal_decoder as td
from tubeground.assignment import solve_assignment
from tubeground.cli import main as cli_main
from tubeground.config import RunConfig
from tubeground.gradcheck import run_gradcheck
from tubeground.losses import GroundTruthSample, hungarian_loss
from tubeground.model import build_params, transparent_params
from tubeground.synth import SynthConfig, synth_generate
from tubeground.tubes import Tube, build_tubes


def run_cli(*argv):
    return cli_main([str(a) for a in argv])


# ------------------------------------------------------------------ 1


def test_c01_hungarian_optimality():
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    for _ in range(1000):
        m = int(rng.integers(1, 8))
        n = int(rng.integers(1, 8))
        cost = rng.uniform(0.0, 10.0, size=(m, n))
        got = solve_assignment(cost)

        k = min(m, n)
        best = None
        for rows in itertools.combinations(range(m), k):
            for cols in itertools.permutations(range(n), k):
                total = math.fsum(cost[r, c] for r, c in zip(rows, cols))
                if best is None or total < best:
                    best = total
        assert got.total == best
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"hungarian acceptance took {elapsed:.1f}s"


# ------------------------------------------------------------------ 2


def test_c02_gradient_fidelity():
    started = time.perf_counter()
    report = run_gradcheck(seed=202, instances=100, h=1e-5, tolerance=1e-4)
    elapsed = time.perf_counter() - started
    for term in ("overlap", "coord_l1", "classification", "kl_temporal"):
        assert report.max_rel[term] < 1e-4, f"{term}: {report.max_rel[term]:.2e}"
    assert elapsed < 30.0, f"gradcheck took {elapsed:.1f}s"


# ------------------------------------------------------------------ 3


def _scalar_iou(a, b):
    # independent scalar IoU on xyxy corners for the oracle
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _viou_oracle(gt_tubes, gt_seg, pred_tubes, pred_seg):
    lo, hi = max(gt_seg[0], pred_seg[0]), min(gt_seg[1], pred_seg[1])
    inter = range(lo, hi + 1) if lo <= hi else []
    union = (gt_seg[1] - gt_seg[0] + 1) + (pred_seg[1] - pred_seg[0] + 1) - max(0, hi - lo + 1)

    def corners(box):
        cx, cy, w, h = box
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    overlap = np.zeros((len(gt_tubes), len(pred_tubes)))
    compatible = np.zeros_like(overlap, dtype=bool)
    for i, g in enumerate(gt_tubes):
        gmap = {int(f): g.boxes[k] for k, f in enumerate(g.frames)}
        for j, p in enumerate(pred_tubes):
            if g.class_word != p.class_word:
                continue
            compatible[i, j] = True
            pmap = {int(f): p.boxes[k] for k, f in enumerate(p.frames)}
            total = 0.0
            for f in inter:
                if f in gmap and f in pmap:
                    total += _scalar_iou(corners(gmap[f]), corners(pmap[f]))
            overlap[i, j] = total

    best = 0.0
    n_gt, n_pred = len(gt_tubes), len(pred_tubes)
    for k in range(0, min(n_gt, n_pred) + 1):
        for gt_subset in itertools.combinations(range(n_gt), k):
            for pred_sel in itertools.permutations(range(n_pred), k):
                if not all(compatible[i, j] for i, j in zip(gt_subset, pred_sel)):
                    continue
                best = max(best, math.fsum(overlap[i, j] for i, j in zip(gt_subset, pred_sel)))
    return best / (union * n_gt) if n_gt else 0.0


def test_c03_metric_oracle_equivalence():
    rng = np.random.default_rng(303)
    words = ["dog", "cat", "bear", "horse"]
    started = time.perf_counter()

    def random_tubes(n, lo, hi):
        out = []
        for _ in range(n):
            s = int(rng.integers(lo, hi + 1))
            e = int(rng.integers(s, hi + 1))
            frames = np.arange(s, e + 1)
            c = rng.uniform(0.25, 0.75, size=(len(frames), 2))
            wh = rng.uniform(0.05, 0.4, size=(len(frames), 2))
            out.append(
                Tube(
                    class_word=words[int(rng.integers(len(words)))],
                    span=(0, 1),
                    segment=(s, e),
                    frames=frames,
                    boxes=np.concatenate([c, wh], axis=1),
                )
            )
        return out

    for _ in range(200):
        n_frames = int(rng.integers(6, 14))
        g0 = int(rng.integers(0, n_frames - 1))
        g1 = int(rng.integers(g0, n_frames))
        p0 = int(rng.integers(0, n_frames - 1))
        p1 = int(rng.integers(p0, n_frames))
        gt_tubes = random_tubes(int(rng.integers(1, 7)), g0, g1)
        pred_tubes = random_tubes(int(rng.integers(0, 7)), p0, p1)
        got = metrics.sample_viou(gt_tubes, (g0, g1), pred_tubes, (p0, p1))
        want = _viou_oracle(gt_tubes, (g0, g1), pred_tubes, (p0, p1))
        assert got == pytest.approx(want, abs=1e-9)
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"metric oracle acceptance took {elapsed:.1f}s"


# ------------------------------------------------------------------ 4


@pytest.fixture(scope="module")
def synth_manifest_50(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth50")
    entries = []
    for i in range(50):
        cfg = SynthConfig(
            seed=4000 + i, n_frames=10, grid_h=3, grid_w=3, dim=16,
            n_targets=1 + i % 8, group_same_class=(i % 5 == 4 and i % 8 > 0),
        )
        bundle, record = synth_generate(cfg)
        feat = out / f"{record.video_id}.features.bin"
        ann = out / f"{record.video_id}.annotation.json"
        dataio.write_features(feat, bundle)
        dataio.save_annotation(ann, record)
        entries.append(dataio.ManifestEntry(record.video_id, ann, feat))
    dataio.save_manifest(out / "manifest.json", entries)
    return out


def test_c04_perfect_prediction_identity(synth_manifest_50, tmp_path):
    manifest = dataio.load_manifest(synth_manifest_50 / "manifest.json")
    videos = {}
    for e in manifest:
        record = dataio.load_annotation(e.annotation)
        videos[e.video_id] = {
            "segment": list(record.segment),
            "tubes": [
                {
                    "class_word": t.class_word,
                    "span": list(record.mentions[t.mention].span),
                    "segment": list(record.segment),
                    "boxes": {str(f): [float(x) for x in b] for f, b in t.boxes.items()},
                }
                for t in record.targets
            ],
        }
    pred_path = tmp_path / "gt_as_pred.json"
    pred_path.write_text(json.dumps({"videos": videos}))
    report_path = tmp_path / "report.json"
    code = run_cli("eval", synth_manifest_50 / "manifest.json", pred_path, "--out", report_path)
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["n_samples"] == 50
    assert report["mean_tiou"] == 1.0
    assert report["mean_viou"] == 1.0
    assert report["viou_at"]["0.3"] == 1.0
    assert report["viou_at"]["0.5"] == 1.0


# ------------------------------------------------------------------ 5


def test_c05_worked_example_fixtures():
    # temporal IoU fixture
    assert geometry.segment_iou((2, 5), (3, 7)) == pytest.approx(0.5, abs=1e-9)

    # GIoU fixture: disjoint unit boxes two apart
    giou = geometry.generalized_box_iou([0, 0, 1, 1], [2, 0, 3, 1])
    assert float(giou) == pytest.approx(-1 / 3, abs=1e-9)

    # spatio-temporal score fixture: 1/6
    gt_box = np.array([0.5, 0.5, 0.2, 0.2])
    half_box = np.array([0.5, 0.475, 0.2, 0.1])  # exact box IoU 0.5 against gt_box
    gt = [Tube("dog", (0, 1), (0, 3), np.arange(0, 4), np.tile(gt_box, (4, 1)))]
    pred = [Tube("dog", (0, 1), (2, 5), np.arange(2, 6), np.tile(half_box, (4, 1)))]
    got = metrics.sample_viou(gt, (0, 3), pred, (2, 5))
    assert got == pytest.approx(1 / 6, abs=1e-9)

    # matched-pair loss fixture: L_h = 3*0.75 + 5*0.01 = 2.30
    boxes = np.array([[[0.5, 0.5, 0.2, 0.2]]])
    probs = np.array([[[1.0, 0.0]]])
    gt_sample = GroundTruthSample(
        segment=(0, 0), boxes=np.array([[[0.5, 0.5, 0.4, 0.4]]]), class_slots=np.array([0])
    )
    res = hungarian_loss(boxes, probs, gt_sample, solve_assignment(np.zeros((1, 1))))
    assert res.combined == pytest.approx(2.30, abs=1e-9)


# ------------------------------------------------------------------ 6


def test_c06_pipeline_shapes_and_speed(tmp_path):
    out = tmp_path / "toy"
    out.mkdir()
    entries = []
    for i in range(8):
        cfg = SynthConfig(
            seed=600 + i, n_frames=8, grid_h=4, grid_w=4, dim=32,
            n_targets=1 + i % 3, pad_tokens_to=12,
        )
        bundle, record = synth_generate(cfg)
        assert len(record.tokens) == 12
        feat = out / f"{record.video_id}.features.bin"
        ann = out / f"{record.video_id}.annotation.json"
        dataio.write_features(feat, bundle)
        dataio.save_annotation(ann, record)
        entries.append(dataio.ManifestEntry(record.video_id, ann, feat))
    dataio.save_manifest(out / "manifest.json", entries)

    preds = tmp_path / "toy_preds"
    started = time.perf_counter()
    code = run_cli(
        "forward", out / "manifest.json", "--seed", 6,
        "--d-model", 32, "--grid-h", 4, "--grid-w", 4, "--n-text-max", 12,
        "--n-queries", 8, "--encoder-blocks", 2, "--decoder-layers", 2,
        "--heads", 4, "--top-m", 5, "--dims-equal", "--out", preds,
    )
    elapsed = time.perf_counter() - started
    assert code == 0
    assert elapsed / 8 < 1.0, f"forward took {elapsed / 8:.2f}s per video"

    for path in sorted(preds.glob("*.pred.bin")):
        arrays, _ = dataio.read_arrays(path)
        assert arrays["boxes"].shape == (8, 8, 4)
        assert arrays["class_probs"].shape == (8, 8, 13)
        assert arrays["temporal"].shape == (8, 2)
        for name in ("boxes", "class_probs", "temporal"):
            assert np.isfinite(arrays[name]).all()
        np.testing.assert_allclose(arrays["class_probs"].sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(arrays["temporal"].sum(0), 1.0, atol=1e-6)


# ------------------------------------------------------------------ 7


def test_c07_top_m_recovery():
    for i in range(100):
        n_targets = 1 + i % 5
        scfg = SynthConfig(
            seed=700 + i, n_frames=5, grid_h=4, grid_w=4, dim=24,
            n_targets=n_targets, margin=0.5,
        )
        bundle, record = synth_generate(scfg)

        # planted cells derived from the annotated box centers
        planted = set()
        for t in record.targets:
            box = next(iter(t.boxes.values()))
            planted.add(int(box[1] * scfg.grid_h) * scfg.grid_w + int(box[0] * scfg.grid_w))
        assert len(planted) == n_targets

        cfg = RunConfig(
            d_model=24, grid_h=4, grid_w=4, n_text_max=24, n_queries=6,
            n_frames_max=8, top_m=n_targets, encoder_blocks=0, decoder_layers=1,
            heads=2, d_appearance=24, d_motion=24, d_text=24,
        )
        params = transparent_params(cfg)
        fused = enc.encode_bundle(bundle, params.encoder, cfg.n_text_max)
        pooled = enc.pool_text(fused)
        for frame in range(scfg.n_frames):
            for grid in (fused.appearance, fused.motion):
                _, idx = sd.top_similar_mean(grid[frame], pooled, n_targets)
                assert set(idx.tolist()) == planted
                # exhaustive ranking oracle: planted strictly above the rest
                sims = sd.similarities(grid[frame], pooled)
                order = np.argsort(-sims, kind="stable")
                assert set(order[:n_targets].tolist()) == planted
                if n_targets < sims.size:
                    assert sims[order[n_targets - 1]] > sims[order[n_targets]]


# ------------------------------------------------------------------ 8


def _crossing_record():
    """Two objects with distinct classes swapping positions mid-segment."""
    n_frames = 7
    query = "watch the dog and the cat by the road"
    tokens = dataio.tokenize(query)
    mentions = [dataio.Mention("dog", (2, 3), 1), dataio.Mention("cat", (5, 6), 1)]
    xs = np.linspace(0.2, 0.8, n_frames)
    track_a = {f: np.array([xs[f], 0.5, 0.15, 0.15]) for f in range(n_frames)}
    track_b = {f: np.array([xs[n_frames - 1 - f], 0.52, 0.15, 0.15]) for f in range(n_frames)}
    targets = [
        dataio.TargetTrack("dog", 0, track_a),
        dataio.TargetTrack("cat", 1, track_b),
    ]
    return dataio.AnnotationRecord(
        video_id="crossing-000", num_frames=n_frames, fps=2.0, query=query,
        tokens=tokens, mentions=mentions, segment=(0, n_frames - 1), targets=targets,
    )


def _check_reconstruction(record, n_queries, scramble_seed=None):
    n_slots = len(record.tokens)
    boxes, dists, _ = inject_ground_truth(record, n_queries, n_slots)
    if scramble_seed is not None:
        rng = np.random.default_rng(scramble_seed)
        for f in range(1, boxes.shape[0]):
            perm = rng.permutation(n_queries)
            boxes[f] = boxes[f, perm]
            dists[f] = dists[f, perm]
    tubes = build_tubes(boxes, dists, record.segment, record.mentions, n_slots)
    assert len(tubes) == len(record.targets)
    unmatched = list(record.targets)
    for target in list(unmatched):
        for tube in tubes:
            if tube.class_word != target.class_word:
                continue
            if all(
                tube.box_at(f) is not None and np.array_equal(tube.box_at(f), target.boxes[f])
                for f in target.boxes
            ) and tube.segment == record.segment:
                unmatched.remove(target)
                break
    assert not unmatched, "some ground-truth tracks were not reproduced exactly"


def test_c08_tube_reconstruction():
    _check_reconstruction(_crossing_record(), n_queries=4, scramble_seed=88)
    for i in range(50):
        scfg = SynthConfig(seed=800 + i, n_frames=9, grid_h=3, grid_w=3, dim=16, n_targets=1 + i % 6)
        _, record = synth_generate(scfg)
        _check_reconstruction(record, n_queries=8, scramble_seed=i if i % 2 else None)


# ------------------------------------------------------------------ 9


def test_c09_invariant_suites():
    rng = np.random.default_rng(909)

    # softmax/attention row-stochasticity at 1e-6
    x = rng.normal(size=(20, 9)) * 30
    s = nn.softmax(x, axis=-1)
    assert (s >= 0).all() and np.allclose(s.sum(-1), 1.0, atol=1e-6)
    attn = nn.ParamInit(1).attention(16, 4)
    _, w = nn.multi_head_attention(
        rng.normal(size=(6, 16)), rng.normal(size=(11, 16)), rng.normal(size=(11, 16)),
        attn, return_weights=True,
    )
    assert np.allclose(w.sum(-1), 1.0, atol=1e-6)

    # query-permutation equivariance, exact
    cfg = RunConfig(
        d_model=16, grid_h=2, grid_w=2, n_text_max=8, n_queries=5, n_frames_max=8,
        top_m=2, encoder_blocks=1, decoder_layers=2, heads=2,
        d_appearance=16, d_motion=16, d_text=16,
    )
    params = build_params(cfg, seed=9)
    bundle = enc.FeatureBundle(
        appearance=rng.normal(size=(3, 2, 2, 16)),
        motion=rng.normal(size=(3, 2, 2, 16)),
        text=rng.normal(size=(4, 16)),
    )
    fused = enc.encode_bundle(bundle, params.encoder, cfg.n_text_max)
    pooled = enc.pool_text(fused)
    base = sd.run_spatial_decoder(fused, pooled, params.spatial, cfg.top_m, n_active=4)
    perm = np.array([4, 2, 0, 3, 1])
    params.spatial.query_embed = params.spatial.query_embed[perm]
    permuted = sd.run_spatial_decoder(fused, pooled, params.spatial, cfg.top_m, n_active=4)
    np.testing.assert_array_equal(permuted.boxes, base.boxes[:, perm])
    np.testing.assert_array_equal(permuted.class_probs, base.class_probs[:, perm])

    # encoder layout partition, bit-exact
    rebuilt = np.concatenate([fused.appearance, fused.motion, fused.text], axis=1)
    np.testing.assert_array_equal(rebuilt, fused.tokens)

    # segment decoding vs exhaustive pair search, exact, N_v <= 64
    for _ in range(150):
        n_v = int(rng.integers(1, 65))
        probs = nn.softmax(rng.normal(size=(n_v, 2)), axis=0)
        got = td.extract_segment(probs)
        best, best_pair = None, None
        for s0 in range(n_v):
            for e0 in range(s0, n_v):
                p = probs[s0, 0] * probs[e0, 1]
                if best is None or p > best:
                    best, best_pair = p, (s0, e0)
        assert got == best_pair


# ------------------------------------------------------------------ 10


def test_c10_determinism(tmp_path):
    def synth_run(out):
        return run_cli(
            "synth", "--count", 6, "--frames", 8, "--seed", 11,
            "--d-model", 16, "--grid-h", 2, "--grid-w", 2, "--n-text-max", 12,
            "--top-m", 2, "--dims-equal", "--out", out,
        )

    data1, data2 = tmp_path / "d1", tmp_path / "d2"
    assert synth_run(data1) == 0
    assert synth_run(data2) == 0
    for path in sorted(data1.iterdir()):
        if path.name != "manifest.json":  # manifest holds relative paths only
            assert path.read_bytes() == (data2 / path.name).read_bytes()

    dims = [
        "--d-model", 16, "--grid-h", 2, "--grid-w", 2, "--n-text-max", 12, "--top-m", 2,
        "--n-queries", 4, "--encoder-blocks", 1, "--decoder-layers", 1, "--heads", 2,
    ]
    outs = []
    for name, jobs in (("p1", 1), ("p2", 1), ("p3", 3)):
        out = tmp_path / name
        assert run_cli(
            "forward", data1 / "manifest.json", "--seed", 11, *dims,
            "--dims-equal", "--tubes", "--jobs", jobs, "--out", out,
        ) == 0
        outs.append(out)
    for other in outs[1:]:
        for path in sorted(outs[0].iterdir()):
            assert path.read_bytes() == (other / path.name).read_bytes(), path.name

    reports = []
    for i, src in enumerate(outs[:2]):
        report = tmp_path / f"r{i}.json"
        assert run_cli("eval", data1 / "manifest.json", src / "tubes.json", "--out", report) == 0
        reports.append(report.read_bytes())
    assert reports[0] == reports[1]
