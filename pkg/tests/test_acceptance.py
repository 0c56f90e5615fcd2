"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed in the ``acceptance criteria`` section at the end
of the pytest run.
"""
import copy
import itertools
import json
import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

from creative_diffusion.can import DiscriminatorSpec, StyleHead
from creative_diffusion.classifiers import (
    CLIPStyleClassifier,
    GANStyleClassifier,
    KMeansStyleClassifier,
    clip_classify,
    kmeans_classify,
)
from creative_diffusion.config import load_config, profile_path
from creative_diffusion.ddpo import clipped_surrogate, collect_rollouts
from creative_diffusion.diffusion import NoiseSchedule, denoising_loss, sample, step_log_prob
from creative_diffusion.embedding import EmbeddingProvider, ToyEmbedder
from creative_diffusion.experiments import build_corpus, inference_schedule, new_denoiser, run, text_encoder
from creative_diffusion.kmeans import ClusterSet, fit_kmeans, inertia, lloyd
from creative_diffusion.lora import adapter_parameters, attach_lora
from creative_diffusion.models import GaussianMixtureDenoiser
from creative_diffusion.prompts import STYLES, PromptSpec, all_prompts, compose_prompts
from creative_diffusion.reward import ambiguity_rewards, cross_entropy_to_uniform

LN27 = math.log(27)


# 1. Reward bound


def test_criterion_01_reward_bound(acceptance):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    images = torch.rand(1000, 64, 64, 3, generator=g, dtype=torch.float64) * 2 - 1
    corpus = torch.rand(200, 64, 64, 3, generator=g, dtype=torch.float64) * 2 - 1
    emb = ToyEmbedder()
    torch.manual_seed(0)
    head = StyleHead(DiscriminatorSpec(image_dim=64, stem_channels=8, head_widths=(64, 32))).double().eval()
    zero_head = copy.deepcopy(head)
    with torch.no_grad():
        zero_head.style_head[-1].weight.zero_()
        zero_head.style_head[-1].bias.zero_()
    variants = {
        "clip": CLIPStyleClassifier(STYLES, emb).fit(),
        "kmeans_text": KMeansStyleClassifier(10, "text", emb, random_state=0).fit(STYLES),
        "kmeans_image": KMeansStyleClassifier(2, "image", emb, random_state=0).fit(corpus),
        "dcgan": GANStyleClassifier(head).fit(),
        "dcgan_zero": GANStyleClassifier(zero_head).fit(),
    }
    worst, details = -math.inf, []
    for name, clf in variants.items():
        r = ambiguity_rewards(images, clf)
        bound = -math.log(len(clf.classes_))
        worst = max(worst, float(np.max(r - bound)))
        details.append(f"{name} max {r.max():.5f} <= {bound:.5f}")
    zero_r = ambiguity_rewards(images, variants["dcgan_zero"])
    zero_err = float(np.max(np.abs(zero_r + LN27)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and zero_err <= 1e-6 and abs(-LN27 - (-3.29584)) <= 5e-6 and elapsed < 60
    acceptance(1, ok, f"max excess over -ln N {worst:.2e}; zero-logit head |r + ln 27| {zero_err:.1e}; "
                      f"{elapsed:.1f}s; " + "; ".join(details))


# 2. Reward arithmetic oracle


def test_criterion_02_reward_oracle(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        p = rng.dirichlet(np.full(n, rng.uniform(0.05, 5.0)))
        p = np.maximum(p, 1e-300)
        p /= p.sum()
        direct = -math.fsum(math.log(pi) / n for pi in p)
        worst = max(worst, abs(cross_entropy_to_uniform(p) - direct))
    two = cross_entropy_to_uniform([0.9, 0.1])
    ok = worst <= 1e-9 and abs(two - 1.20397) <= 1e-5
    acceptance(2, ok, f"max |CE - direct sum| {worst:.1e} over 100 distributions; CE(0.9, 0.1) = {two:.6f}")


# 3. Sampler correctness

MIX_W, MIX_MU, MIX_SD = (0.3, 0.7), (-1.2, 0.5), (0.55, 0.55)


def _mixture(n, g):
    first = torch.rand(n, generator=g, dtype=torch.float64) < MIX_W[0]
    z = torch.randn(n, generator=g, dtype=torch.float64)
    return torch.where(first, MIX_MU[0] + MIX_SD[0] * z, MIX_MU[1] + MIX_SD[1] * z)


def test_criterion_03_sampler_moments(acceptance):
    start = time.perf_counter()
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        schedule = NoiseSchedule.cosine(10, variance="beta")
        g = torch.Generator().manual_seed(0)
        torch.manual_seed(0)
        model = GaussianMixtureDenoiser(schedule, init_means=[-0.2, 0.2])
        steps = 4000
        opt = torch.optim.Adam(model.parameters(), lr=0.02)
        lr_decay = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        for _ in range(steps):
            loss = denoising_loss(model, _mixture(4096, g).reshape(-1, 1, 1, 1), None, schedule, g)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_decay.step()
        x, _ = sample(model, None, schedule, torch.Generator().manual_seed(1), (10_000, 1, 1, 1))
    finally:
        torch.set_default_dtype(previous)
    v = x.flatten().numpy()
    w, mu, sd = map(np.array, (MIX_W, MIX_MU, MIX_SD))
    m1, m2 = float(w @ mu), float(w @ (mu**2 + sd**2))
    z1 = (v.mean() - m1) / (v.std(ddof=1) / math.sqrt(v.size))
    z2 = ((v**2).mean() - m2) / ((v**2).std(ddof=1) / math.sqrt(v.size))
    elapsed = time.perf_counter() - start
    ok = abs(z1) <= 3 and abs(z2) <= 3 and elapsed < 300
    acceptance(3, ok, f"E[x] {v.mean():.4f} vs {m1:.4f} ({z1:+.2f} SE), E[x^2] {(v**2).mean():.4f} vs {m2:.4f} "
                      f"({z2:+.2f} SE); T=10 cosine schedule, beta variance; {elapsed:.1f}s")


# 4. Log-prob and gradient fidelity


def _gaussian_surrogate(theta, actions, old_logp, adv, eps, sigma):
    logp = -((actions - theta) ** 2) / (2 * sigma**2) - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    surr, _ = clipped_surrogate(logp - old_logp, adv, eps)
    return surr.mean()


def test_criterion_04_logprob_and_gradient(acceptance):
    cfg = load_config(profile_path("desk-ddpo-kmeans-image"), check_paths=False)
    model = new_denoiser(cfg)
    attach_lora(model)
    with torch.no_grad():
        for p in adapter_parameters(model):
            p.normal_(0, 0.05)
    schedule = inference_schedule(cfg)
    x = torch.rand(40, 8, 8, 3) * 2 - 1
    clf = KMeansStyleClassifier(2, provider=ToyEmbedder(scale=0.2), random_state=0).fit(x)
    prompts = [PromptSpec("picture of ", "shapes")] * 8
    rb = collect_rollouts(model, prompts, clf, schedule, torch.Generator().manual_seed(4), text_encoder(cfg), (8, 8, 3))
    traj = rb.trajectory
    replay_err = 0.0
    with torch.no_grad():
        for i in traj.policy_steps():
            replay_err = max(replay_err, float((step_log_prob(model, traj, i, schedule) - traj.log_probs[i]).abs().max()))

    g = torch.Generator().manual_seed(0)
    theta0, sigma = 0.3, 0.7
    actions = theta0 + sigma * torch.randn(256, generator=g, dtype=torch.float64)
    old_logp = -((actions - theta0) ** 2) / (2 * sigma**2) - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    adv = torch.randn(256, generator=g, dtype=torch.float64)
    worst_rel = 0.0
    for theta_val in (0.3, 0.31, 0.36, 0.5):
        theta = torch.tensor(theta_val, dtype=torch.float64, requires_grad=True)
        _gaussian_surrogate(theta, actions, old_logp, adv, 0.2, sigma).backward()
        h = 1e-6
        fp = _gaussian_surrogate(torch.tensor(theta_val + h, dtype=torch.float64), actions, old_logp, adv, 0.2, sigma)
        fm = _gaussian_surrogate(torch.tensor(theta_val - h, dtype=torch.float64), actions, old_logp, adv, 0.2, sigma)
        fd = (fp - fm).item() / (2 * h)
        worst_rel = max(worst_rel, abs(theta.grad.item() - fd) / max(abs(fd), 1e-12))
    ok = replay_err == 0.0 and worst_rel <= 1e-3
    acceptance(4, ok, f"replay max |dlogp| {replay_err:.1e} over {len(traj.policy_steps())} steps x 8 samples; "
                      f"clipped-surrogate gradient vs central FD max rel err {worst_rel:.1e}")


# 5. End-to-end creativity training

SEEDS = (0, 1, 2, 3, 4)


@pytest.mark.slow
def test_criterion_05_ddpo_creativity(acceptance, tmp_path):
    start = time.perf_counter()
    gains = []
    base = None
    for seed in SEEDS:
        overrides = [f"seed={seed}", f"output_dir={tmp_path / f'seed{seed}'}", "grid.images_per_prompt=1"]
        if base is not None:
            overrides.append(f"model.checkpoint={base}")
        manifest = run(load_config(profile_path("desk-ddpo-kmeans-image"), overrides))
        if base is None:
            base = tmp_path / f"seed{seed}" / "base.pt"
        r = np.array(manifest["results"]["mean_rewards"])
        assert len(r) == 30
        gains.append(float(r[-5:].mean() - r[:5].mean()))
    elapsed = time.perf_counter() - start
    wins = sum(g >= 0.1 for g in gains)
    ok = wins >= 4 and elapsed < 15 * 60
    acceptance(5, ok, f"last-5 minus first-5 mean reward per seed {[round(g, 3) for g in gains]} nats; "
                      f"{wins}/5 seeds >= 0.1; {elapsed:.0f}s")


# 6. CAN loop sanity


def moving_average(x, window):
    return np.convolve(x, np.ones(window) / window, mode="valid")


@pytest.mark.slow
def test_criterion_06_can_sanity(acceptance, tmp_path):
    cfg = load_config(profile_path("desk-can"), [f"output_dir={tmp_path}"])
    run(cfg)
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    epochs = [r for r in rows if r["kind"] == "can_epoch"]
    acc = np.array([r["heldout_style_accuracy"] for r in epochs])
    l_sa = np.array([r["style_ambiguity"] for r in epochs])
    ma = moving_average(l_sa, 20)
    first_ok = int(np.argmax(acc > 0.9)) if np.any(acc > 0.9) else None
    rises = int(np.sum(np.diff(ma) > 0))
    monotone = rises == 0
    toward_floor = abs(ma[-1] - LN27) < abs(ma[0] - LN27)
    ok = first_ok is not None and monotone and toward_floor
    acceptance(6, ok, f"held-out style accuracy > 0.9 first at epoch {first_ok} (final {acc[-1]:.3f}); "
                      f"L_SA 20-epoch MA {ma[0]:.3f} -> {ma[-1]:.3f} (floor ln 27 = {LN27:.3f}), "
                      f"{rises}/{len(ma) - 1} increasing steps")


# 7. Classifier properties


class _Table(EmbeddingProvider):
    """Image embedding is the first pixel; text embeddings from a table."""

    def __init__(self, table, dim):
        self.table, self.dim = table, dim

    def embed_image(self, images):
        return images[:, 0, 0, : self.dim].to(torch.float64)

    def embed_text(self, texts):
        return torch.stack([self.table[t] for t in texts])


def test_criterion_07_classifier_properties(acceptance):
    rng = np.random.default_rng(7)
    cases, failures = 0, []
    for case in range(10_000):
        n = int(rng.integers(2, 12))
        d = int(rng.integers(2, 6))
        scale = 10.0 ** rng.uniform(-3, 3)
        names = [f"s{i}" for i in range(n)]
        prov = _Table({nm: torch.as_tensor(rng.normal(size=d)) for nm in names}, d)
        centers = rng.normal(size=(n, d)) * scale
        if case % 4 == 0:
            vec = centers[int(rng.integers(n))].copy()
        else:
            vec = rng.normal(size=d) * scale
        x = torch.zeros(1, 2, 2, d, dtype=torch.float64)
        x[0, 0, 0] = torch.as_tensor(vec)
        perm = rng.permutation(n)
        temp = 10.0 ** rng.uniform(-3, 0)
        clip, clip_p = (clip_classify(x, nm, prov, temperature=temp) for nm in (names, [names[i] for i in perm]))
        km, km_p = (kmeans_classify(x, ClusterSet(c), prov) for c in (centers, centers[perm]))
        for dist in (clip, clip_p, km, km_p):
            p = dist.probs
            if not (np.all(np.isfinite(p)) and np.all(p > 0) and abs(p.sum() - 1) <= 1e-6):
                failures.append((case, "normalization/positivity"))
        if not (np.allclose(clip_p.probs[0], clip.probs[0][perm], rtol=1e-9, atol=1e-300)
                and np.allclose(km_p.probs[0], km.probs[0][perm], rtol=1e-9, atol=1e-300)):
            failures.append((case, "permutation equivariance"))
        if case % 4 == 0:
            # continuity at a center: nudging the embedding moves the probabilities only slightly
            x2 = x.clone()
            x2[0, 0, 0, 0] += 1e-9 * scale
            near = kmeans_classify(x2, ClusterSet(centers), prov, epsilon=1e-3 * scale).probs
            at = kmeans_classify(x, ClusterSet(centers), prov, epsilon=1e-3 * scale).probs
            if not np.abs(near - at).max() < 1e-4:
                failures.append((case, "continuity"))
        cases += 1
    ok = cases == 10_000 and not failures
    acceptance(7, ok, f"{cases} randomized cases (N in [2, 11], scales 1e-3..1e3, 1 in 4 on a center); "
                      f"{len(failures)} violations {failures[:3]}")


# 8. K-means oracle


def test_criterion_08_kmeans_oracle(acceptance):
    X = np.array([[0, 0], [0, 0.1], [10, 10], [10, 10.1]], dtype=float)
    best = min(
        (inertia(X, np.array([X[m].mean(0), X[~m].mean(0)])), tuple(m))
        for m in (np.array(bits, bool) for bits in itertools.product([0, 1], repeat=4))
        if m.any() and not m.all()
    )
    cs = fit_kmeans(X, 2, rng=0)
    optimum_ok = abs(cs.inertia - best[0]) <= 1e-12
    rng = np.random.default_rng(8)
    violations = 0
    for trial in range(300):
        n, d = int(rng.integers(3, 60)), int(rng.integers(1, 5))
        X = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
        k = int(min(rng.integers(1, 8), n))
        seeds = X[rng.choice(n, size=k, replace=False)] + rng.normal(scale=2.0, size=(k, d))
        histories = [lloyd(X, seeds)[2], fit_kmeans(X, k, rng=trial, n_init=2).inertia_history]
        for h in histories:
            violations += sum(b > a + 1e-9 * max(1.0, a) for a, b in zip(h, h[1:]))
    ok = optimum_ok and violations == 0
    acceptance(8, ok, f"4-point fit inertia {cs.inertia:.6f} vs exhaustive optimum {best[0]:.6f}; "
                      f"{violations} inertia increases over 300 random instances")


# 9. Prompt composer statistics


def test_criterion_09_prompt_statistics(acceptance):
    prompts = compose_prompts(100_000, np.random.default_rng(9))
    counts = Counter(p.text for p in prompts)
    null_rate = counts[""] / 1e5
    rates = [counts[p.text] / 1e5 for p in all_prompts()]
    worst = max(abs(r - 0.0375) for r in rates)
    literal = PromptSpec.from_text("picture of an animal")
    ok = abs(null_rate - 0.10) <= 0.005 and worst <= 0.003 and counts["picture of an animal"] > 0 and literal.text == "picture of an animal"
    acceptance(9, ok, f"null rate {null_rate:.4f}; per-combination rates {min(rates):.4f}..{max(rates):.4f} "
                      f"(max deviation {worst:.4f}); 'picture of an animal' drawn {counts['picture of an animal']} times")


# 10. Reproducibility

REPRO_RUNS = {
    "desk-ddpo-kmeans-image": ["trainer.epochs=3", "trainer.batches_per_epoch=2", "model.pretrain_steps=60"],
    "desk-ddpo-clip": ["trainer.epochs=2", "trainer.batches_per_epoch=2", "model.pretrain_steps=30"],
    "desk-can-16": ["can.epochs=3", "data.n_per_style=16"],
}


def test_criterion_10_reproducibility(acceptance, tmp_path):
    identical = {}
    for profile, overrides in REPRO_RUNS.items():
        blobs = []
        for rep in range(2):
            out = tmp_path / f"{profile}-{rep}"
            run(load_config(profile_path(profile), overrides + [f"output_dir={out}", "grid.images_per_prompt=1"]))
            blobs.append((out / "metrics.jsonl").read_bytes())
        identical[profile] = blobs[0] == blobs[1] and len(blobs[0]) > 0
    ev_overrides = [
        f"evaluate.base_checkpoint={tmp_path / 'desk-ddpo-kmeans-image-0' / 'base.pt'}",
        f"evaluate.adapters={{tuned: {tmp_path / 'desk-ddpo-kmeans-image-0' / 'checkpoints' / 'adapters-epoch002.pt'}}}",
        "evaluate.n_prompts=8", "evaluate.n_style_pairs=4",
    ]
    blobs = []
    for rep in range(2):
        out = tmp_path / f"evaluate-{rep}"
        run(load_config(profile_path("desk-evaluate"), ev_overrides + [f"output_dir={out}"]))
        blobs.append((out / "metrics.jsonl").read_bytes() + (out / "report.json").read_bytes())
    identical["desk-evaluate"] = blobs[0] == blobs[1]
    ok = all(identical.values())
    acceptance(10, ok, "metrics JSONL byte-identical across reruns: " + ", ".join(f"{k} {v}" for k, v in identical.items()))
