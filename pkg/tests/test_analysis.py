import logging

import numpy as np
import pytest
import torch

from customttt.analysis import (
    InjectionSpec,
    generate_with_injection,
    greedy_pair_search,
    layer_importance_scan,
)
from customttt.data import NULL_PROMPT, concept_prompt, embed_prompt
from customttt.model import CROSS_ATTN_LAYERS, PromptRouting
from customttt.scheduler import ddim_sample, make_schedule

from conftest import randomized

P = concept_prompt(1, 2)
P_STAR_APP = concept_prompt(4, 2)
P_STAR_MOT = concept_prompt(1, 0)
STEPS = 4


@pytest.fixture(scope="module")
def model(tiny32):
    return randomized(tiny32, seed=11)


def plain(model, prompt, seed):
    d = model.config.embed_dim
    z, _ = ddim_sample(model, PromptRouting.uniform(embed_prompt(prompt, d)), STEPS, 9.0, seed, make_schedule(),
                       uncond_routing=PromptRouting.uniform(embed_prompt(NULL_PROMPT, d)))
    return z


@pytest.mark.parametrize("seed", range(3))
def test_empty_set_equals_plain_p(model, seed):
    z = generate_with_injection(model, InjectionSpec(P, P_STAR_APP, set()), STEPS, seed=seed)
    assert torch.equal(z, plain(model, P, seed))


@pytest.mark.parametrize("seed", range(3))
def test_full_set_equals_plain_p_star(model, seed):
    z = generate_with_injection(model, InjectionSpec(P, P_STAR_APP, set(CROSS_ATTN_LAYERS)), STEPS, seed=seed)
    assert torch.equal(z, plain(model, P_STAR_APP, seed))


@pytest.mark.parametrize("layers", [{0}, {2, 6}, {1, 4, 8}, set(CROSS_ATTN_LAYERS)])
def test_routing_identity(model, layers):
    z = generate_with_injection(model, InjectionSpec(P, P, layers), STEPS, seed=5)
    assert torch.equal(z, plain(model, P, 5))


def test_injection_changes_output(model):
    a = generate_with_injection(model, InjectionSpec(P, P_STAR_APP, {2}), STEPS, seed=0)
    assert not torch.equal(a, plain(model, P, 0))


@pytest.mark.parametrize("bad", [{3}, {5}, {2, 9}])
def test_non_cross_attention_layer_rejected(bad):
    with pytest.raises(ValueError, match="cross-attention"):
        InjectionSpec(P, P_STAR_APP, bad)


def test_prompts_differing_in_two_concepts_rejected(model):
    with pytest.raises(ValueError, match="more than one"):
        layer_importance_scan(model, P, concept_prompt(4, 0), "appearance", seeds=[0], steps=STEPS)


def test_wrong_criterion_rejected(model):
    with pytest.raises(ValueError, match="motion token"):
        layer_importance_scan(model, P, P_STAR_MOT, "appearance", seeds=[0], steps=STEPS)
    with pytest.raises(ValueError, match="criterion"):
        layer_importance_scan(model, P, P_STAR_MOT, "color", seeds=[0], steps=STEPS)


@pytest.mark.parametrize("criterion", ["appearance", "motion"])
def test_identical_prompts_score_zero(model, criterion):
    report = layer_importance_scan(model, P, P, criterion, seeds=[0, 1], steps=STEPS)
    assert all(v == 0.0 for v in report.layer_scores.values())
    assert report.full_score == 0.0


@pytest.fixture(scope="module")
def app_report(model):
    return layer_importance_scan(model, P, P_STAR_APP, "appearance", seeds=[0, 1], steps=STEPS)


def test_scan_report_shape(app_report):
    assert set(app_report.layer_scores) == set(CROSS_ATTN_LAYERS)
    assert all(np.isfinite(v) for v in app_report.layer_scores.values())
    assert all(len(app_report.per_seed[f"layer{i}"]) == 2 for i in CROSS_ATTN_LAYERS)
    assert app_report.layer_scores[app_report.best_single] == max(app_report.layer_scores.values())


def test_full_row_matches_plain_p_star_score(model, app_report):
    from customttt.analysis import _Scorer

    Fr, _, H, W = model.video_shape
    scorer = _Scorer(P, P_STAR_APP, "appearance", Fr, H, W)
    expected = np.mean([scorer(plain(model, P_STAR_APP, s)) for s in (0, 1)])
    assert app_report.full_score == pytest.approx(expected, abs=1e-12)


def test_pair_search_contains_best_and_is_deterministic(model, app_report):
    best = app_report.best_single
    first = greedy_pair_search(model, P, P_STAR_APP, "appearance", best, seeds=[0, 1], steps=STEPS)
    again = greedy_pair_search(model, P, P_STAR_APP, "appearance", best, seeds=[0, 1], steps=STEPS)
    pair, score, scores, _ = first
    assert best in pair
    assert len(scores) == len(CROSS_ATTN_LAYERS) - 1
    assert score == max(scores.values())
    assert first[:3] == again[:3]


def test_pair_search_rejects_bad_layer(model):
    with pytest.raises(ValueError):
        greedy_pair_search(model, P, P_STAR_APP, "appearance", 3, seeds=[0], steps=STEPS)


def test_antisymmetry_recorded(model, caplog):
    with caplog.at_level(logging.WARNING):
        report = layer_importance_scan(model, P, P_STAR_MOT, "motion", seeds=[0], steps=STEPS, antisymmetry=True)
    assert set(report.antisymmetry) == set(CROSS_ATTN_LAYERS)
    assert all(np.isfinite(v) for v in report.antisymmetry.values())


def test_report_csv(app_report):
    text = app_report.to_csv()
    lines = text.splitlines()
    assert lines[0] == "cell,layers,score,antisymmetry_residual,per_seed"
    assert sum(line.startswith("layer") for line in lines) == len(CROSS_ATTN_LAYERS)
    assert any(line.startswith("full,") for line in lines)
    assert "criterion=appearance" in text and "appearance_similarity" in text


@pytest.mark.parametrize("criterion,p,p_star", [
    pytest.param("appearance", concept_prompt(0, 0), concept_prompt(4, 0), marks=pytest.mark.xfail(strict=True,
        reason="appearance is spread over more than two layers of the toy denoiser")),
    ("motion", concept_prompt(0, 0), concept_prompt(0, 1)),
])
def test_best_pair_nearly_matches_full_replacement(base, criterion, p, p_star):
    from customttt.analysis import full_analysis

    report = full_analysis(base, p, p_star, criterion)
    print(f"\n{criterion}: layers {report.layer_scores}, pair {report.pair} {report.pair_score:.3f}, full {report.full_score:.3f}")
    assert report.full_score > 0
    assert report.pair_score >= 0.9 * report.full_score
