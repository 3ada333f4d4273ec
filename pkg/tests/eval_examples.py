"""Worked examples for the proxy metrics; shared by the unit tests and the acceptance gate."""

import numpy as np

from customttt.data import (
    MotionConcept,
    appearance_concept,
    canonical_motion_video,
    concept_prompt,
    motion_concept,
    render_reference_images,
    render_video,
)
from customttt.evaluation import (
    BenchmarkCase,
    appearance_similarity,
    benchmark,
    motion_similarity,
    temporal_consistency,
    text_alignment,
    video_features,
)


def appearance_self_similarity():
    ref = render_reference_images(appearance_concept(3), 1)[0]
    video = np.repeat(ref, 8, axis=0)
    assert abs(appearance_similarity(video, [ref]) - 1.0) < 1e-6


def appearance_disjoint_colors():
    # sks0 is solid red, sks3 stripes of yellow/orange: no shared palette entry
    a = render_video(appearance_concept(0), None)
    refs = render_reference_images(appearance_concept(3), 5)
    assert appearance_similarity(a, refs) < 0.9


def appearance_frame_order_symmetric():
    v = render_video(appearance_concept(5), motion_concept(4))
    refs = render_reference_images(appearance_concept(5), 5)
    perm = np.random.default_rng(0).permutation(8)
    assert abs(appearance_similarity(v, refs) - appearance_similarity(v[perm], refs)) < 1e-12


def appearance_empty_refs_rejected():
    try:
        appearance_similarity(render_video(appearance_concept(0), None), [])
    except ValueError:
        return
    raise AssertionError("empty reference set accepted")


def motion_self():
    v = render_video(appearance_concept(1), motion_concept(3))
    assert abs(motion_similarity(v, v) - 1.0) < 1e-12


def motion_orthogonal():
    right = render_video(appearance_concept(0), motion_concept(0))
    up = render_video(appearance_concept(0), motion_concept(1))
    assert abs(motion_similarity(right, up)) < 0.3


def motion_amplitude_invariant():
    a = render_video(appearance_concept(0), MotionConcept("linear_right", 0.3))
    b = render_video(appearance_concept(0), MotionConcept("linear_right", 0.15))
    assert motion_similarity(a, b) > 0.9


def motion_static_reference():
    static = render_video(appearance_concept(2), None)
    moving = render_video(appearance_concept(2), motion_concept(0))
    assert motion_similarity(static, static) == 1.0
    assert motion_similarity(moving, static) == 0.0


def motion_symmetric():
    for i, j in [(0, 3), (2, 5), (4, 1)]:
        a = render_video(appearance_concept(i), motion_concept(j))
        b = render_video(appearance_concept(j), motion_concept(i % 6), seed=3)
        assert abs(motion_similarity(a, b) - motion_similarity(b, a)) < 1e-9


def temporal_static():
    assert abs(temporal_consistency(render_video(appearance_concept(6), None)) - 1.0) < 1e-6


def temporal_noise_baseline():
    rng = np.random.default_rng(0)
    vals = [temporal_consistency(rng.uniform(-1, 1, (8, 3, 16, 16))) for _ in range(8)]
    assert np.mean(vals) < 0.9


def temporal_range():
    rng = np.random.default_rng(1)
    for v in [rng.standard_normal((8, 3, 16, 16)), render_video(appearance_concept(1), motion_concept(5))]:
        assert -1.0 <= temporal_consistency(v) <= 1.0


def text_self_consistency():
    for a in range(8):
        for m in range(6):
            v = render_video(appearance_concept(a), motion_concept(m))
            assert text_alignment(v, concept_prompt(a, m)) > 0.95, (a, m)


def text_wrong_motion_lower():
    v = render_video(appearance_concept(2), motion_concept(0))
    right = text_alignment(v, concept_prompt(2, 0))
    for m in range(1, 6):
        assert text_alignment(v, concept_prompt(2, m)) < right


def text_appearance_only_weighting():
    v = render_video(appearance_concept(4), motion_concept(2))
    refs = render_reference_images(appearance_concept(4), 5, seed=0)
    assert text_alignment(v, concept_prompt(4, None)) == appearance_similarity(v, refs)


def text_requires_concept_token():
    from customttt.data import Prompt

    try:
        text_alignment(render_video(appearance_concept(0), None), Prompt(("a", "square")))
    except ValueError:
        return
    raise AssertionError("prompt without concept tokens accepted")


def features_unit_and_deterministic():
    v = render_video(appearance_concept(7), motion_concept(1))
    f = video_features(v)
    assert f.shape == (8, 528)
    assert np.allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)
    assert np.array_equal(f, video_features(v))


def metrics_offset_invariant():
    v = render_video(appearance_concept(1), motion_concept(0))
    w = render_video(appearance_concept(1), motion_concept(2), seed=4)
    refs = render_reference_images(appearance_concept(1), 5)
    p = concept_prompt(1, 0)
    for off in (5e-4, -5e-4):
        assert abs(appearance_similarity(v + off, refs) - appearance_similarity(v, refs)) < 1e-3
        assert abs(motion_similarity(v + off, w) - motion_similarity(v, w)) < 1e-3
        assert abs(temporal_consistency(v + off) - temporal_consistency(v)) < 1e-3
        assert abs(text_alignment(v + off, p) - text_alignment(v, p)) < 1e-3


def benchmark_schema_and_order():
    refs = render_reference_images(appearance_concept(7), 5)
    mref = canonical_motion_video(3)
    case = BenchmarkCase(refs, mref, [concept_prompt(7, 3)], "toy")

    def sample_fn(model, adapters, prompt, seed):
        if model == "broken":
            raise RuntimeError("sampler exploded")
        return render_video(appearance_concept(7 if model == "good" else 0), motion_concept(3 if model == "good" else 0), seed=seed)

    report = benchmark([("Base", "bad", None), ("Broken", "broken", None), ("Ours", "good", None)], [case], [0, 1], sample_fn, "toy")
    assert [r.name for r in report.rows] == ["Base", "Broken", "Ours"]
    base, broken, ours = report.rows
    assert broken.error and "exploded" in broken.error
    for r in (base, ours):
        for k in ("text_alignment", "appearance_sim", "temporal_consistency", "motion_sim"):
            v = getattr(r, k)
            assert np.isfinite(v) and -1 <= v <= 1
        assert r.trainable_params >= 0 and len(r.per_seed_joint) == 2
    assert ours.appearance_sim > base.appearance_sim and ours.joint > base.joint
    csv = report.to_csv().splitlines()
    assert csv[0].startswith("method,trainable_params,text_alignment,appearance_sim,temporal_consistency,motion_sim,joint")
    assert len(csv) == 4 and "motion" in report.to_table()


EXAMPLES = [
    appearance_self_similarity, appearance_disjoint_colors, appearance_frame_order_symmetric, appearance_empty_refs_rejected,
    motion_self, motion_orthogonal, motion_amplitude_invariant, motion_static_reference, motion_symmetric,
    temporal_static, temporal_noise_baseline, temporal_range,
    text_self_consistency, text_wrong_motion_lower, text_appearance_only_weighting, text_requires_concept_token,
    features_unit_and_deterministic, metrics_offset_invariant, benchmark_schema_and_order,
]
