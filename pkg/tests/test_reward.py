import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from creative_diffusion.classifiers import ConstantClassifier, StyleDistribution
from creative_diffusion.exceptions import DomainError
from creative_diffusion.reward import (
    MetricsWriter,
    PerPromptStatTracker,
    RewardRecord,
    UniformTarget,
    cross_entropy_to_uniform,
    normalize_advantages,
    reward_upper_bound,
    style_ambiguity_reward,
    torch_cross_entropy_to_uniform,
)


def direct_sum(p):
    n = len(p)
    return -sum((1.0 / n) * math.log(v) for v in p)


def test_uniform_target():
    u = UniformTarget(27)
    assert u.probs.sum() == pytest.approx(1.0)
    assert len(set(u.probs)) == 1


def test_ce_uniform_is_log_n():
    assert cross_entropy_to_uniform(np.full(27, 1 / 27)) == pytest.approx(3.29584, abs=1e-5)


def test_ce_two_class_value():
    assert cross_entropy_to_uniform([0.9, 0.1]) == pytest.approx(1.20397, abs=1e-5)
    assert cross_entropy_to_uniform([0.9, 0.1]) == pytest.approx(direct_sum([0.9, 0.1]), abs=1e-12)


def test_ce_domain():
    with pytest.raises(DomainError):
        cross_entropy_to_uniform([1.0, 0.0])


def test_ce_batch_rows():
    p = np.array([[0.5, 0.5], [0.9, 0.1]])
    np.testing.assert_allclose(cross_entropy_to_uniform(p), [math.log(2), direct_sum([0.9, 0.1])])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=30))
def test_gibbs_bound(weights):
    p = np.asarray(weights) / np.sum(weights)
    ce = cross_entropy_to_uniform(p)
    assert ce >= math.log(len(p)) - 1e-12
    assert ce == pytest.approx(direct_sum(p), rel=1e-12)
    perm = np.random.default_rng(0).permutation(len(p))
    assert cross_entropy_to_uniform(p[perm]) == pytest.approx(ce, rel=1e-12)


def test_torch_ce_matches():
    logits = torch.tensor([[2.0] + [0.0] * 26])
    got = torch_cross_entropy_to_uniform(logits=logits).item()
    p = torch.softmax(logits, -1)[0].numpy()
    assert got == pytest.approx(direct_sum(p), rel=1e-6)


class FixedClassifier:
    def __init__(self, probs):
        self.probs = np.asarray(probs)

    def classify(self, X):
        return StyleDistribution(np.tile(self.probs, (len(X), 1)), tuple(f"c{i}" for i in range(len(self.probs))))


def test_reward_uniform_bound():
    recs = style_ambiguity_reward(torch.zeros(3, 4, 4, 3), ConstantClassifier([0.0] * 27).fit(), classifier_id="const")
    assert [r.raw_reward for r in recs] == pytest.approx([-3.29584] * 3, abs=1e-5)
    assert recs[0].classifier_id == "const"
    assert reward_upper_bound(27) == pytest.approx(-3.29584, abs=1e-5)


def test_reward_two_class():
    (rec,) = style_ambiguity_reward(torch.zeros(1, 2, 2, 3), FixedClassifier([0.9, 0.1]), prompts=["picture of shapes"])
    assert rec.raw_reward == pytest.approx(-1.20397, abs=1e-5)
    assert rec.prompt_key == "picture of shapes"


def test_reward_monotone_toward_half():
    ps = np.linspace(0.99, 0.5, 50)
    rewards = [style_ambiguity_reward(torch.zeros(1, 1, 1, 3), FixedClassifier([p, 1 - p]))[0].raw_reward for p in ps]
    assert all(b > a for a, b in zip(rewards, rewards[1:]))


def test_reward_needs_two_classes():
    with pytest.raises(DomainError):
        style_ambiguity_reward(torch.zeros(1, 1, 1, 3), FixedClassifier([1.0]))


class TestAdvantages:
    def test_identical_rewards_zero(self):
        recs = [RewardRecord(-0.7, prompt_key="p") for _ in range(4)]
        normalize_advantages(recs, PerPromptStatTracker())
        assert [r.normalized_advantage for r in recs] == [0.0] * 4

    def test_two_point(self):
        recs = [RewardRecord(1.0, prompt_key="p"), RewardRecord(3.0, prompt_key="p")]
        normalize_advantages(recs, PerPromptStatTracker())
        assert [r.normalized_advantage for r in recs] == pytest.approx([-1.0, 1.0], abs=1e-7)

    def test_shift_invariance(self):
        raw = [0.3, -1.2, 0.8, 2.0]
        a = [RewardRecord(r, prompt_key="p") for r in raw]
        b = [RewardRecord(r + 5.0, prompt_key="p") for r in raw]
        normalize_advantages(a, PerPromptStatTracker())
        normalize_advantages(b, PerPromptStatTracker())
        np.testing.assert_allclose([r.normalized_advantage for r in a], [r.normalized_advantage for r in b], atol=1e-9)

    def test_per_prompt_separation_and_running(self):
        tracker = PerPromptStatTracker()
        normalize_advantages([RewardRecord(1.0, prompt_key="a"), RewardRecord(10.0, prompt_key="b")], tracker)
        recs = normalize_advantages([RewardRecord(3.0, prompt_key="a")], tracker)
        assert recs[0].normalized_advantage == pytest.approx(1.0, abs=1e-7)
        assert tracker.stats("b") == (10.0, 0.0)

    def test_buffer(self):
        tracker = PerPromptStatTracker(buffer_size=2)
        tracker.update("a", [100.0, 1.0, 3.0])
        assert tracker.stats("a") == (2.0, 1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            normalize_advantages([], PerPromptStatTracker())


def test_metrics_writer(tmp_path):
    path = tmp_path / "metrics.jsonl"
    with MetricsWriter(path) as w:
        w.write_rewards(3, [RewardRecord(-1.0, 0.5, "picture of shapes", "kmeans_image")])
    row = json.loads(path.read_text())
    assert row == {
        "schema": 1,
        "kind": "reward",
        "step": 3,
        "prompt": "picture of shapes",
        "raw_reward": -1.0,
        "advantage": 0.5,
        "classifier_id": "kmeans_image",
    }
