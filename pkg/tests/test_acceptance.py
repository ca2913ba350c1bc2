"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
that is printed in the terminal summary."""

import io
import pickle
import random
import time
from functools import lru_cache

import numpy as np

from roadtubes.composition import CompositionMode, compose_scores
from roadtubes.detections import write_tubes
from roadtubes.evaluation import EvalConfig, frame_map, video_map
from roadtubes.geometry import BBox, TubeGeometry, tube_iou
from roadtubes.linker import ActiveTube, Linker, LinkerConfig, link_stream
from roadtubes.pipeline import build_tubes, label_tubes
from roadtubes.schema import TaskKind, derive_composite_vocabs, label_runs
from roadtubes.synth import NoiseConfig, SynthConfig, synth_generate, synth_perturb
from roadtubes.trimming import IN, OUT, TrimConfig, trim_tube, viterbi_labels

from conftest import ACCEPTANCE_LINES, TINY, annotation, det, frame, gt_tube
from instances import frame_instance, video_instance

BOX_TASKS = (TaskKind.AGENT, TaskKind.ACTION, TaskKind.LOC, TaskKind.DUPLEX, TaskKind.EVENT)


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_noiseless_closure():
    worst_time, worst_map = 0.0, 1.0
    for seed in range(10):
        t0 = time.perf_counter()
        ann, stream = synth_generate(SynthConfig(seed=seed, num_agents=10, num_frames=200))
        cv = derive_composite_vocabs(ann)
        tubes = build_tubes(stream, ann.vocab, LinkerConfig(lam=0.5, k=4), cv)
        for task in BOX_TASKS:
            for report in video_map(ann, tubes, EvalConfig(task, "video", (0.2, 0.5, 0.75)), cv):
                worst_map = min(worst_map, report.mean_ap)
        worst_time = max(worst_time, time.perf_counter() - t0)
    record(1, worst_map == 1.0 and worst_time < 1.0, f"min video-mAP {worst_map:.3f}, slowest run {worst_time:.3f}s")


def test_2_evaluator_oracle_equivalence():
    rng = random.Random(2024)
    worst = 0.0
    for _ in range(1000):
        ann, stream, delta, expected = frame_instance(rng)
        (report,) = frame_map(ann, stream, EvalConfig(TaskKind.AGENT, "frame", (delta,), jobs=1))
        worst = max(worst, abs(report.ap_of(0) - expected))
    for _ in range(1000):
        ann, tubes, delta, expected = video_instance(rng)
        (report,) = video_map(ann, tubes, EvalConfig(TaskKind.AGENT, "video", (delta,), jobs=1))
        worst = max(worst, abs(report.ap_of(0) - expected))
    record(2, worst <= 1e-12, f"1000 frame + 1000 video instances, max |AP - oracle| = {worst:.1e}")


def _tube(start, end, box=(0, 0, 10, 10)):
    return TubeGeometry.from_pairs((t, BBox(*box)) for t in range(start, end + 1))


def test_3_tube_iou_units():
    a = _tube(0, 9)
    identity = tube_iou(a, a)
    disjoint = tube_iou(_tube(0, 4), _tube(5, 9))
    half = tube_iou(_tube(0, 9), _tube(5, 14))
    ok = identity == 1.0 and disjoint == 0.0 and abs(half - 1 / 3) <= 1e-12
    record(3, ok, f"identity {identity}, disjoint {disjoint}, half-overlap {half:.15f}")


@lru_cache(maxsize=None)
def _labelings(n):
    grid = (np.arange(2**n)[:, None] >> np.arange(n)[::-1]) & 1
    switches = np.abs(np.diff(grid, axis=1)).sum(axis=1)
    return grid, switches, n - grid.sum(axis=1)


def _brute_best(scores, theta, alpha):
    grid, switches, n_out = _labelings(len(scores))
    obj = grid @ (np.asarray(scores) - theta) - alpha * switches
    # lexicographic max over (objective, n_out, -switches)
    pick = np.lexsort((-switches, n_out, obj))[-1]
    return obj.max(), (obj[pick], n_out[pick], -switches[pick])


def _agent_tube(agentness):
    frames = [(t, BBox(0, 0, 10, 10)) for t in range(len(agentness))]
    return ActiveTube(0, frames, [False] * len(frames), list(agentness), {}, matched=len(frames), agentness_sum=sum(agentness))


def test_4_dp_optimality():
    rng = np.random.default_rng(4)
    mismatches = 0
    n_seq = 0
    for n in range(1, 17):
        for _ in range(40):
            # dyadic values make every objective exact
            scores = rng.integers(0, 33, n) / 32
            theta = rng.integers(0, 33) / 32
            alpha = rng.integers(0, 17) / 16
            labels = viterbi_labels(scores.tolist(), theta, alpha)
            arr = np.array(labels)
            sw = int(np.abs(np.diff(arr)).sum()) if n > 1 else 0
            got = (float(arr @ (scores - theta) - alpha * sw), int((arr == OUT).sum()), -sw)
            best_obj, best_key = _brute_best(scores, theta, alpha)
            segments = trim_tube(_agent_tube(scores.tolist()), TrimConfig(theta, alpha, enabled=True))
            spans = [(s.start, s.end) for s in segments]
            ok = got[0] == best_obj and got == tuple(best_key) and spans == label_runs([l == IN for l in labels])
            mismatches += not ok
            n_seq += 1
    record(4, mismatches == 0 and n_seq >= 500, f"{n_seq} sequences with T <= 16, {mismatches} mismatches vs 2^T enumeration")


def _tube_bytes(tubes, k=4):
    buf = io.BytesIO()
    write_tubes(label_tubes(tubes, [TaskKind.AGENT, TaskKind.ACTION, TaskKind.LOC], k), buf)
    return buf.getvalue()


def test_5_online_batch_equivalence():
    differing = 0
    noise = NoiseConfig(jitter=3.0, dropout=0.25, distractors=1.5, score_noise=0.1)
    for seed in range(100):
        cfg = SynthConfig(seed=seed, num_agents=5, num_frames=60)
        ann, clean = synth_generate(cfg)
        stream = synth_perturb(clean, noise, seed, cfg.width, cfg.height, ann.vocab)
        replay = _tube_bytes(link_stream(stream, LinkerConfig(), ann.vocab))
        linker = Linker(LinkerConfig(), ann.vocab)
        for f in stream:
            # the state survives a save/restore between frames
            linker = pickle.loads(pickle.dumps(linker))
            linker.step(f)
        differing += _tube_bytes(linker.finalize()) != replay
    record(5, differing == 0, f"100 noisy streams, {differing} tube files differ")


def test_6_termination_semantics():
    results = []
    for patience in (0, 1, 5):
        box = (0.0, 0.0, 10.0, 10.0)
        kept = [frame(0, det(box))] + [frame(t) for t in range(1, patience + 1)] + [frame(patience + 1, det(box))]
        one = link_stream(kept, LinkerConfig(patience=patience), TINY)
        split = [frame(0, det(box))] + [frame(t) for t in range(1, patience + 2)] + [frame(patience + 2, det(box))]
        two = link_stream(split, LinkerConfig(patience=patience), TINY)
        results.append(
            len(one) == 1
            and one[0].interpolated == [False] + [True] * patience + [False]
            and len(two) == 2
        )
    record(6, all(results), f"patience 0/1/5 -> {results}")


def test_7_factorized_consistency():
    bad = 0
    for seed in range(100):
        cfg = SynthConfig(seed=seed, num_agents=4, num_frames=30, joint=True)
        ann, clean = synth_generate(cfg)
        cv = derive_composite_vocabs(ann)
        stream = synth_perturb(clean, NoiseConfig(score_noise=0.15, distractors=1.0), seed, cfg.width, cfg.height, ann.vocab, cv)
        dets = [d for f in stream for d in f.detections]
        generator = np.array([d.event for d in dets])
        product = np.array([compose_scores(d, cv, CompositionMode.PRODUCT)[1] for d in dets])
        for c in range(len(cv.event)):
            if not np.array_equal(np.argsort(-generator[:, c], kind="stable"), np.argsort(-product[:, c], kind="stable")):
                bad += 1
    record(7, bad == 0, f"100 seeds, {bad} event classes with a different ranking")


def test_8_monotone_degradation():
    noise = dict(jitter=2.0, distractors=1.0, score_noise=0.05)
    means = []
    for p in (0.0, 0.1, 0.3, 0.5):
        aps = []
        for seed in range(20):
            cfg = SynthConfig(seed=seed, num_agents=10, num_frames=200)
            ann, clean = synth_generate(cfg)
            stream = synth_perturb(clean, NoiseConfig(dropout=p, **noise), seed, cfg.width, cfg.height, ann.vocab)
            tubes = build_tubes(stream, ann.vocab)
            (report,) = video_map(ann, tubes, EvalConfig(TaskKind.AGENT, "video", (0.2,)))
            aps.append(report.mean_ap)
        means.append(float(np.mean(aps)))
    rises = [b - a for a, b in zip(means, means[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.01)
    record(8, ok, "mean agent video-mAP@0.2 for p=0/0.1/0.3/0.5: " + ", ".join(f"{m:.4f}" for m in means))


def test_9_composite_vocab_derivation():
    box = (10, 10, 20, 20)
    car, ped, tl = 0, 1, 2
    mov_away, mov_tow, tur_lft, red = 0, 1, 2, 3
    veh_lane, incom, lft_pav = 0, 1, 2
    ann = annotation(
        [
            # concurrent actions and locations expand to the Cartesian product
            gt_tube(0, car, [(0, box, {mov_away, tur_lft}, {veh_lane, incom})]),
            gt_tube(1, car, [(t, box, {mov_away}, {veh_lane}) for t in range(3)]),
            gt_tube(2, ped, [(0, box, {mov_tow}, {lft_pav}), (1, box, {tur_lft}, {lft_pav})]),
            # no location: contributes a pair but no triplet
            gt_tube(3, tl, [(0, box, {red}, set())]),
        ]
    )
    cv = derive_composite_vocabs(ann)
    pairs = {(car, mov_away), (car, tur_lft), (ped, mov_tow), (ped, tur_lft), (tl, red)}
    triplets = {
        (car, mov_away, veh_lane),
        (car, mov_away, incom),
        (car, tur_lft, veh_lane),
        (car, tur_lft, incom),
        (ped, mov_tow, lft_pav),
        (ped, tur_lft, lft_pav),
    }
    ok = set(cv.duplex) == pairs and set(cv.event) == triplets and len(cv.duplex) == 5 and len(cv.event) == 6
    record(
        9,
        ok,
        f"crafted set: {len(cv.duplex)} pairs, {len(cv.event)} triplets "
        "(39/68 on the full corpus is a reference value, not runnable here)",
    )
