import io
import pickle

import pytest
from hypothesis import given, settings, strategies as st

from roadtubes.detections import VectorLengthMismatch, write_tubes
from roadtubes.geometry import BBox, TubeGeometry, box_iou, nms_agentness, tube_iou
from roadtubes.linker import Linker, LinkerConfig, OutOfOrderFrame, link_stream, tube_top_k_labels
from roadtubes.pipeline import build_tubes, label_tubes
from roadtubes.schema import TaskKind, derive_composite_vocabs, extract_gt_tubes
from roadtubes.synth import NoiseConfig, SynthConfig, synth_generate, synth_perturb

from conftest import TINY, det, frame

B0 = (0.0, 0.0, 10.0, 10.0)


def shifted(box, dx):
    return (box[0] + dx, box[1], box[2] + dx, box[3])


def run(frames, **cfg):
    return link_stream(frames, LinkerConfig(**cfg), TINY)


class TestConfig:
    def test_defaults(self):
        cfg = LinkerConfig()
        assert (cfg.lam, cfg.k, cfg.min_score, cfg.nms_iou, cfg.patience) == (0.5, 4, 0.025, 0.45, 5)

    @pytest.mark.parametrize("bad", [{"lam": 0}, {"lam": 1.5}, {"k": 0}, {"patience": -1}, {"min_score": 1.0}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            LinkerConfig(**bad)

    def test_json_round_trip(self):
        cfg = LinkerConfig(lam=0.3, k=2, patience=1)
        assert LinkerConfig.from_json(cfg.to_json()) == cfg


class TestStep:
    def test_nothing_in_nothing_out(self):
        linker = Linker(LinkerConfig(), TINY)
        assert not linker.step(frame(0))
        assert linker.finalize() == []

    def test_first_detection_opens_tube(self):
        linker = Linker(LinkerConfig(), TINY)
        report = linker.step(frame(0, det(B0, 0.9)))
        assert report.opened == [0] and report.extended == [] and report.terminated == []

    def test_overlap_above_lambda_extends(self):
        nxt = shifted(B0, 2.5)
        assert box_iou(BBox(*B0), BBox(*nxt)) == pytest.approx(0.6)
        linker = Linker(LinkerConfig(lam=0.5), TINY)
        linker.step(frame(0, det(B0, 0.9)))
        report = linker.step(frame(1, det(nxt, 0.9)))
        assert report.extended == [0] and report.opened == []

    def test_overlap_below_lambda_opens_new(self):
        nxt = shifted(B0, 5.0)  # IoU 1/3
        linker = Linker(LinkerConfig(lam=0.5), TINY)
        linker.step(frame(0, det(B0, 0.9)))
        report = linker.step(frame(1, det(nxt, 0.9)))
        assert report.opened == [1] and report.extended == []

    def test_low_agentness_dropped(self):
        linker = Linker(LinkerConfig(), TINY)
        assert not linker.step(frame(0, det(B0, 0.02)))
        assert linker.step(frame(1, det(B0, 0.025))).opened == [0]

    def test_nms_applied_before_linking(self):
        linker = Linker(LinkerConfig(), TINY)
        report = linker.step(frame(0, det(B0, 0.5), det(shifted(B0, 1.0), 0.8)))
        assert report.opened == [0]
        assert linker.active[0].frames[0][1] == BBox(*shifted(B0, 1.0))

    def test_stronger_tube_claims_contested_detection(self):
        linker = Linker(LinkerConfig(nms_iou=1.0), TINY)
        linker.step(frame(0, det(B0, 0.3), det(shifted(B0, 1.0), 0.9)))
        strong = max(linker.active, key=lambda tb: tb.mean_agentness).uid
        # both tubes overlap the only detection
        report = linker.step(frame(1, det(shifted(B0, 0.5), 0.7)))
        assert report.extended == [strong]

    def test_tube_takes_highest_agentness_candidate(self):
        linker = Linker(LinkerConfig(nms_iou=1.0), TINY)
        linker.step(frame(0, det(B0, 0.9)))
        linker.step(frame(1, det(shifted(B0, 1.0), 0.4), det(shifted(B0, 2.0), 0.6)))
        tube = linker.active[0]
        assert tube.frames[-1][1] == BBox(*shifted(B0, 2.0))
        assert len(linker.active) == 2

    def test_out_of_order(self):
        linker = Linker(LinkerConfig(), TINY)
        linker.step(frame(3))
        with pytest.raises(OutOfOrderFrame):
            linker.step(frame(3))

    def test_vector_length_mismatch(self):
        linker = Linker(LinkerConfig(), TINY)
        with pytest.raises(VectorLengthMismatch):
            linker.step(frame(0, det(B0, 0.9, agent=(1.0,))))

    def test_skipped_frame_indices_count_as_misses(self):
        tubes = run([frame(0, det(B0)), frame(7, det(B0))], patience=5)
        assert [(t.start, t.end) for t in tubes] == [(0, 0), (7, 7)]
        tubes = run([frame(0, det(B0)), frame(6, det(B0))], patience=5)
        assert [(t.start, t.end) for t in tubes] == [(0, 6)]


class TestFinalize:
    def test_single_open_tube(self):
        linker = Linker(LinkerConfig(), TINY)
        linker.step(frame(0, det(B0)))
        tubes = linker.finalize()
        assert len(tubes) == 1 and tubes[0].frames == [(0, BBox(*B0))]

    def test_trailing_misses_removed(self):
        frames = [frame(t, det(B0)) for t in range(5)] + [frame(t) for t in range(5, 10)]
        (tube,) = run(frames, patience=5)
        # replay oracle: matched at 0..4, misses at 5..9 never exceed patience
        assert (tube.start, tube.end, tube.matched) == (0, 4, 5)
        assert tube.status == "terminated"

    def test_empty_stream(self):
        assert run([]) == []

    def test_uid_order(self):
        frames = [frame(0, det(B0)), frame(1, det(shifted(B0, 50)), det(B0))]
        assert [t.uid for t in run(frames)] == [0, 1]


class TestGaps:
    @pytest.mark.parametrize("patience", [0, 1, 5])
    def test_gap_of_patience_keeps_one_tube(self, patience):
        frames = [frame(0, det(B0))] + [frame(t) for t in range(1, patience + 1)]
        end = shifted(B0, 2.0 * (patience + 1) / 6)
        frames.append(frame(patience + 1, det(end)))
        tubes = run(frames, patience=patience)
        assert len(tubes) == 1
        tube = tubes[0]
        assert [t for t, _ in tube.frames] == list(range(patience + 2))
        assert tube.interpolated == [False] + [True] * patience + [False]
        for t, box in tube.frames:
            w = t / (patience + 1)
            assert box.x1 == pytest.approx(end[0] * w)

    @pytest.mark.parametrize("patience", [0, 1, 5])
    def test_gap_of_patience_plus_one_splits(self, patience):
        frames = [frame(0, det(B0))] + [frame(t) for t in range(1, patience + 2)]
        frames.append(frame(patience + 2, det(B0)))
        tubes = run(frames, patience=patience)
        assert [(t.start, t.end) for t in tubes] == [(0, 0), (patience + 2, patience + 2)]

    def test_scores_accumulate_on_matched_frames_only(self):
        frames = [frame(0, det(B0, 0.8, agent=(1, 0, 0))), frame(1), frame(2, det(B0, 0.4, agent=(0, 1, 0)))]
        (tube,) = run(frames)
        assert tube.matched == 2
        assert tube.mean_scores(TaskKind.AGENT).tolist() == [0.5, 0.5, 0.0]
        assert tube.mean_agentness == pytest.approx(0.6)
        assert tube.agentness == pytest.approx([0.8, 0.6, 0.4])


class TestTopK:
    def _tube(self, agent_scores):
        (tube,) = run([frame(0, det(B0, agent=agent_scores))])
        return tube

    def test_k_exceeds_classes(self):
        labels = tube_top_k_labels(self._tube((0.2, 0.7, 0.1)), TaskKind.AGENT, 10)
        assert [c for c, _ in labels] == [1, 0, 2]

    def test_one_hot(self):
        (tube,) = run([frame(t, det(B0, action=(0, 0, 0, 1))) for t in range(4)])
        labels = tube_top_k_labels(tube, TaskKind.ACTION, 4)
        assert labels[0] == (3, 1.0)
        assert [c for c, _ in labels[1:]] == [0, 1, 2]

    def test_equal_means_lower_id_first(self):
        # exhaustive over tie patterns on three classes
        for pattern in [(0.5, 0.5, 0.5), (0.1, 0.5, 0.5), (0.5, 0.1, 0.5), (0.5, 0.5, 0.1)]:
            labels = tube_top_k_labels(self._tube(pattern), TaskKind.AGENT, 3)
            expected = sorted(range(3), key=lambda c: (-pattern[c], c))
            assert [c for c, _ in labels] == expected

    def test_zero_matched_frames(self):
        tube = self._tube((1, 0, 0))
        tube.matched = 0
        with pytest.raises(ValueError):
            tube_top_k_labels(tube, TaskKind.AGENT, 1)


def _tube_bytes(tubes, k=4):
    buf = io.BytesIO()
    write_tubes(label_tubes(tubes, [TaskKind.AGENT, TaskKind.ACTION, TaskKind.LOC], k), buf)
    return buf.getvalue()


def _noisy_stream(seed, frames=60, agents=4):
    cfg = SynthConfig(seed=seed, num_frames=frames, num_agents=agents)
    ann, clean = synth_generate(cfg)
    noise = NoiseConfig(jitter=3.0, dropout=0.2, distractors=1.5, score_noise=0.1)
    return ann, synth_perturb(clean, noise, seed, cfg.width, cfg.height, ann.vocab)


def test_online_equals_batch_with_state_transfer():
    for seed in range(5):
        ann, stream = _noisy_stream(seed)
        batch = link_stream(stream, LinkerConfig(), ann.vocab)
        linker = Linker(LinkerConfig(), ann.vocab)
        for f in stream:
            linker = pickle.loads(pickle.dumps(linker))
            linker.step(f)
        assert _tube_bytes(linker.finalize()) == _tube_bytes(batch)


def test_each_detection_claimed_once():
    ann, stream = _noisy_stream(3)
    cfg = LinkerConfig()
    linker = Linker(cfg, ann.vocab)
    for f in stream:
        report = linker.step(f)
        kept = [d for d in f.detections if d.agentness >= cfg.min_score]
        survivors = nms_agentness([(d.box, d.agentness) for d in kept], cfg.nms_iou)
        assert len(report.extended) == len(set(report.extended))
        assert len(report.extended) + len(report.opened) == len(survivors)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mean_agentness_bounds(seed):
    ann, stream = _noisy_stream(seed, frames=30, agents=3)
    cfg = LinkerConfig()
    for tube in link_stream(stream, cfg, ann.vocab):
        assert cfg.min_score <= tube.mean_agentness <= 1.0
        ts = [t for t, _ in tube.frames]
        assert ts == list(range(ts[0], ts[-1] + 1))
        assert not tube.interpolated[0] and not tube.interpolated[-1]


def test_noiseless_recovers_every_gt_tube():
    ann, stream = synth_generate(SynthConfig(seed=5, num_agents=6, num_frames=80))
    tubes = link_stream(stream, LinkerConfig(), ann.vocab)
    geoms = [TubeGeometry.from_pairs(tb.frames) for tb in tubes]
    assert len(geoms) == len(ann.tubes)
    for _, gt in extract_gt_tubes(ann, TaskKind.AGENT):
        best = max(tube_iou(gt, g) for g in geoms)
        assert best == 1.0


def test_composite_tasks_labelled_when_vocab_given():
    ann, stream = synth_generate(SynthConfig(seed=1, num_agents=3, num_frames=20))
    cv = derive_composite_vocabs(ann)
    tubes = build_tubes(stream, ann.vocab, cv=cv)
    tasks = {t.task for t in tubes}
    assert tasks == {TaskKind.AGENT, TaskKind.ACTION, TaskKind.LOC, TaskKind.DUPLEX, TaskKind.EVENT}
    assert len({t.uid for t in tubes}) == 3
    assert all(len([t for t in tubes if t.uid == u and t.task is TaskKind.EVENT]) == 4 for u in range(3))


def test_min_len_filter():
    frames = [frame(0, det(B0)), frame(1, det(B0)), frame(2, det(shifted(B0, 40)))]
    tubes = build_tubes(frames, TINY, LinkerConfig(min_len=2))
    assert {t.uid for t in tubes} == {0}
