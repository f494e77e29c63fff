"""Acceptance suite: one test per release criterion, each printing a
[PASS]/[FAIL] line with its measured margin (run with `pytest -s -v` to see
the lines for passing criteria too).

Criteria rest on exact oracle agreement, numeric property sweeps, and
directional paired experiments on the synthetic world; tolerances are fixed
here and nowhere else.
"""

import time

import numpy as np
import pytest

from test_evalkit import brute_ap, random_single_class_fixture
from test_geometry import make_proposals, naive_negatives, naive_nms, random_boxes

from ovps.embedstore import (
    SPLIT_BASE,
    SPLIT_NOVEL,
    TextBank,
    RegionEmbeddingFile,
    derive_text_bank,
    generate_synthetic_world,
)
from ovps.evalkit import average_precision, evaluate, oracle_box_topk
from ovps.geometry import Box, boxes_to_array, nms, match_negatives, pairwise_iou
from ovps.plm import (
    BACKGROUND,
    PLMConfig,
    build_target_arrays,
    prepare_image_candidates,
    run_plm_step,
    targets_from_arrays,
)
from ovps.refine import RefinementConfig, offline_refine, retrain_with_refinement
from ovps.selftrain import (
    LinearHead,
    TrainConfig,
    predict_dataset,
    train,
    weighted_ce,
)
from ovps.zeroshot import FusionConfig, classify, classify_batch, fuse_scores_batch, probs_from_similarities


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Criterion 1: geometry oracle equivalence, 1000 instances, seeds 0-9, < 5 s.
# ---------------------------------------------------------------------------


def test_geometry_oracle_equivalence():
    start = time.perf_counter()
    checked = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            n = int(rng.integers(0, 61))
            boxes = random_boxes(rng, n)
            # Quantized scores produce score ties; both sides break ties on
            # the lower original index.
            scores = np.round(rng.uniform(0, 1, n), 2)
            thr = float(rng.uniform(0.2, 0.9))
            max_keep = int(rng.integers(1, 70))
            props = make_proposals(boxes, scores)
            assert nms(props, thr, max_keep) == naive_nms(boxes, scores, thr, max_keep)

            n_gt = int(rng.integers(0, 6))
            gts = random_boxes(rng, n_gt)
            neg_thr = float(rng.uniform(0.1, 0.9))
            assert match_negatives(props, [Box(*g) for g in gts], neg_thr) == (
                naive_negatives(boxes, gts, neg_thr) if n_gt else list(range(n))
            )
            checked += 1
    elapsed = time.perf_counter() - start
    report(
        "geometry oracle",
        checked == 1000 and elapsed < 5.0,
        f"{checked} instances agree with the naive O(n^2) references in {elapsed:.2f}s (< 5s)",
    )


# ---------------------------------------------------------------------------
# Criterion 2: cosine-softmax properties over 10,000 random calls, < 5 s.
# ---------------------------------------------------------------------------


def test_classification_softmax_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(123)
    dim, n_classes = 24, 8
    vectors = rng.standard_normal((n_classes + 1, dim)).astype(np.float32)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    bank = TextBank([f"c{i}" for i in range(n_classes)], [SPLIT_BASE] * n_classes, vectors)

    worst_sum = 0.0
    for _ in range(10_000):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        probs = classify(v, bank, temperature=float(rng.uniform(0.0, 150.0))).probs
        worst_sum = max(worst_sum, abs(probs.sum() - 1.0))
    assert worst_sum < 1e-6

    sims = rng.uniform(-1, 1, (10_000, n_classes + 1))
    shifts = rng.uniform(-10, 10, (10_000, 1))
    base = probs_from_similarities(sims, 90.0)
    shifted = probs_from_similarities(sims + shifts, 90.0)
    worst_shift = np.abs(base - shifted).max()
    assert worst_shift < 1e-6

    args = [probs_from_similarities(sims, t).argmax(axis=1) for t in (0.5, 7.3, 100.0)]
    assert np.array_equal(args[0], args[1]) and np.array_equal(args[1], args[2])

    elapsed = time.perf_counter() - start
    report(
        "classification softmax properties",
        elapsed < 5.0,
        f"10,000 calls: max |sum-1| {worst_sum:.2e} (< 1e-6), max shift drift "
        f"{worst_shift:.2e} (< 1e-6), argmax temperature-invariant, {elapsed:.2f}s (< 5s)",
    )


# ---------------------------------------------------------------------------
# Criterion 3: fusion exponent-collapse identities and monotonicity.
# ---------------------------------------------------------------------------


def test_score_fusion_properties():
    rng = np.random.default_rng(7)
    n = 10_000
    p = rng.uniform(0, 1, (n, 5))
    q = rng.uniform(0, 1, (n, 5))
    mask = np.array([False, True, False, True])

    collapsed_p = fuse_scores_batch(p, q, FusionConfig(alpha=0.0, beta=0.0), mask)
    exact_p = np.array_equal(collapsed_p, p)
    collapsed_q = fuse_scores_batch(p, q, FusionConfig(alpha=1.0, beta=1.0), mask)
    exact_q = np.array_equal(collapsed_q[:, :-1], q[:, :-1]) and np.array_equal(
        collapsed_q[:, -1], p[:, -1]
    )

    cfg = FusionConfig(alpha=0.35, beta=0.65)
    base = fuse_scores_batch(p, q, cfg, mask)
    bump = rng.uniform(0, 1, (n, 1))
    more_p = fuse_scores_batch(np.minimum(p + bump, 1.0), q, cfg, mask)
    more_q = fuse_scores_batch(p, np.minimum(q + bump, 1.0), cfg, mask)
    monotone = bool(
        np.all(more_p[:, :-1] >= base[:, :-1]) and np.all(more_q[:, :-1] >= base[:, :-1])
    )
    report(
        "score fusion properties",
        exact_p and exact_q and monotone,
        f"exponent collapse exact (alpha=0, beta=1), monotone on {n} random triples",
    )


# ---------------------------------------------------------------------------
# Criterion 4: analytic gradient vs central differences, 100 cases, < 1e-5.
# ---------------------------------------------------------------------------


def test_weighted_ce_gradient_check():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 12))
        logits = rng.standard_normal(k) * rng.uniform(0.5, 4.0)
        target = int(rng.integers(0, k))
        weights = rng.uniform(0.5, 2.0, k)
        _, grad = weighted_ce(logits, target, weights)
        numeric = np.zeros(k)
        h = 1e-6
        for i in range(k):
            up, down = logits.copy(), logits.copy()
            up[i] += h
            down[i] -= h
            numeric[i] = (
                weighted_ce(up, target, weights)[0] - weighted_ce(down, target, weights)[0]
            ) / (2 * h)
        rel = np.abs(grad - numeric).max() / max(1.0, np.abs(numeric).max())
        worst = max(worst, rel)
    report(
        "weighted cross-entropy gradient",
        worst < 1e-5,
        f"100 random cases, worst relative error {worst:.2e} (< 1e-5)",
    )


# ---------------------------------------------------------------------------
# Criterion 5: mining contract over 1000 randomized steps; threshold 1.0 is
# the identity; defaults are threshold 0.8 with K = 4.
# ---------------------------------------------------------------------------


def _random_mining_scenario(rng):
    dim, n_base, n_novel = 16, 4, 2
    frame = np.linalg.qr(rng.standard_normal((dim, n_base + n_novel + 1)))[0].T
    bank = TextBank(
        [f"b{i}" for i in range(n_base)] + [f"n{i}" for i in range(n_novel)],
        [SPLIT_BASE] * n_base + [SPLIT_NOVEL] * n_novel,
        frame.astype(np.float32),
    )
    n = int(rng.integers(1, 16))
    which = rng.integers(0, n_base + n_novel + 1, n)
    noise = rng.standard_normal((n, dim)) * rng.uniform(0.0, 0.5)
    vectors = frame[which] + noise
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    boxes = random_boxes(rng, n, span=200.0)
    objectness = np.where(rng.uniform(0, 1, n) < 0.15, 0.0, rng.uniform(0, 1, n))
    regions = RegionEmbeddingFile(
        np.zeros(n, dtype=np.int64),
        boxes.astype(np.float32),
        objectness.astype(np.float32),
        vectors.astype(np.float32),
    )
    proposals = make_proposals(regions.boxes.astype(np.float64), objectness)
    n_gt = int(rng.integers(0, 4))
    gt_boxes = [Box(*g) for g in random_boxes(rng, n_gt, span=200.0)]
    gt_labels = rng.integers(0, n_base, n_gt)
    rpn_arr, roi_arr = build_target_arrays(
        boxes, boxes_to_array(gt_boxes), gt_labels, pos_iou=0.5
    )
    return bank, regions, proposals, gt_boxes, rpn_arr, roi_arr


def test_pseudo_label_mining_contract():
    defaults = PLMConfig()
    assert defaults.threshold == 0.8 and defaults.k == 4

    rng = np.random.default_rng(321)
    selected_total = 0
    for step in range(1000):
        bank, regions, proposals, gt_boxes, rpn_arr, roi_arr = _random_mining_scenario(rng)
        cfg = PLMConfig()
        step_rng = np.random.default_rng(step)
        rpn_out, roi_out, diag = run_plm_step(
            proposals, gt_boxes, regions, bank, cfg, step_rng,
            targets_from_arrays(rpn_arr), targets_from_arrays(roi_arr),
        )
        assert diag["selected"] <= cfg.k
        negatives = set(match_negatives(proposals, gt_boxes, cfg.neg_iou_max))
        novel_mask = bank.novel_mask()
        for before, after in zip(targets_from_arrays(roi_arr), roi_out):
            if after == before:
                continue
            selected_total += 1
            assert before.label == BACKGROUND
            assert after.proposal_index in negatives
            assert novel_mask[after.label]
            probs = classify(
                regions.vectors[after.proposal_index].astype(np.float64), bank
            ).probs
            assert probs.argmax() == after.label
            assert probs[after.label] > cfg.threshold
            assert proposals[after.proposal_index].objectness > 0

        identity_rpn, identity_roi, _ = run_plm_step(
            proposals, gt_boxes, regions, bank, PLMConfig(threshold=1.0),
            np.random.default_rng(step), targets_from_arrays(rpn_arr),
            targets_from_arrays(roi_arr),
        )
        assert identity_rpn == targets_from_arrays(rpn_arr)
        assert identity_roi == targets_from_arrays(roi_arr)
    report(
        "pseudo-label mining contract",
        selected_total > 0,
        f"1000 randomized steps, {selected_total} selections re-verified "
        f"(score > 0.8, novel argmax, negative, <= K); threshold 1.0 is the identity; "
        f"defaults (0.8, K=4)",
    )


# ---------------------------------------------------------------------------
# Criterion 6: AP evaluator vs brute-force PR-curve oracle, 100 fixtures,
# agreement within 1e-9.
# ---------------------------------------------------------------------------


def test_average_precision_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        dets, gts = random_single_class_fixture(rng)
        thr = float(rng.choice([0.5, 0.6, 0.75, 0.9]))
        fast = average_precision(dets, gts, thr)
        slow = brute_ap(dets, gts, thr)
        worst = max(worst, abs(fast - slow))
    report(
        "average-precision oracle",
        worst < 1e-9,
        f"100 random fixtures, max |fast - brute| = {worst:.2e} (< 1e-9)",
    )


# ---------------------------------------------------------------------------
# Criteria 7 and 8: paired self-training and offline refinement on the
# synthetic world (10 base / 5 novel, dim 64, 500 images, sigma 0.15,
# 2000 iterations, 5 seeds).
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2, 3, 4)
FUSION = FusionConfig()


def _train_cfg(seed: int, plm_enabled: bool) -> TrainConfig:
    return TrainConfig(
        learning_rate=0.01,
        iterations=2000,
        batch_size=8,
        plm_enabled=plm_enabled,
        seed=seed,
        snapshot_interval=0,
    )


@pytest.fixture(scope="module")
def paired_runs():
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        bank, regions, dataset = generate_synthetic_world(10, 5, 64, 500, 0.15, seed=seed)
        entry = {"seed": seed, "bank": bank, "regions": regions, "dataset": dataset}
        for plm_enabled in (False, True):
            head, _ = train(
                LinearHead.from_bank(bank), dataset, regions, bank,
                _train_cfg(seed, plm_enabled),
            )
            rep = evaluate(predict_dataset(head, dataset, regions, bank, FUSION), dataset)
            entry["plm_head" if plm_enabled else "baseline_head"] = head
            entry["plm" if plm_enabled else "baseline"] = rep
        runs.append(entry)
    return {"runs": runs, "elapsed": time.perf_counter() - start}


def test_end_to_end_self_training_gain(paired_runs):
    runs = paired_runs["runs"]
    novel_gain = float(
        np.mean([r["plm"].ap50_novel - r["baseline"].ap50_novel for r in runs])
    )
    base_drop = float(
        np.mean([r["baseline"].ap50_base - r["plm"].ap50_base for r in runs])
    )
    elapsed = paired_runs["elapsed"]
    report(
        "end-to-end self-training",
        novel_gain >= 0.20 and base_drop < 0.05 and elapsed < 60.0,
        f"mean novel AP50 gain {novel_gain:+.4f} (>= 0.20), base AP50 drop "
        f"{base_drop:+.4f} (< 0.05), 5 paired seeds in {elapsed:.1f}s (< 60s)",
    )


def test_offline_refinement_ordering(paired_runs):
    start = time.perf_counter()
    plm_only, refined_hi, refined_lo = [], [], []
    for entry in paired_runs["runs"]:
        bank, regions, dataset = entry["bank"], entry["regions"], entry["dataset"]
        seed = entry["seed"]
        plm_only.append(entry["plm"].ap50_novel)
        for threshold, bucket in ((0.9, refined_hi), (0.5, refined_lo)):
            augmented = offline_refine(
                dataset, entry["plm_head"], regions, bank, FUSION,
                RefinementConfig(score_threshold=threshold),
            )
            head, _ = retrain_with_refinement(
                augmented, regions, bank, _train_cfg(seed, True)
            )
            rep = evaluate(predict_dataset(head, dataset, regions, bank, FUSION), dataset)
            bucket.append(rep.ap50_novel)
    mean_plm = float(np.mean(plm_only))
    mean_hi = float(np.mean(refined_hi))
    mean_lo = float(np.mean(refined_lo))
    elapsed = time.perf_counter() - start
    report(
        "offline refinement",
        mean_hi >= mean_plm and mean_hi >= mean_lo and elapsed < 120.0,
        f"novel AP50 means: PLM-only {mean_plm:.4f} <= +refine@0.9 {mean_hi:.4f}; "
        f"refine@0.9 {mean_hi:.4f} >= refine@0.5 {mean_lo:.4f}; {elapsed:.1f}s (< 120s)",
    )


# ---------------------------------------------------------------------------
# Criterion 9: vocabulary ablation. Base-only mining is empty; a superset
# vocabulary keeps at least 80% of the exact-vocabulary novel-AP50 gain.
# ---------------------------------------------------------------------------


def test_vocabulary_ablation():
    vocab_seeds = (0, 1)
    gains = {"exact": [], "superset": []}
    zero_candidates = True
    for seed in vocab_seeds:
        bank, regions, dataset = generate_synthetic_world(
            10, 5, 64, 500, 0.15, seed=seed, n_distractors=10
        )
        base_names = [c.name for c in dataset.categories if c.split == SPLIT_BASE]
        novel_names = [c.name for c in dataset.categories if c.split == SPLIT_NOVEL]
        distractors = [n for n in bank.class_names if n.startswith("distractor")]
        variants = {
            "exact": derive_text_bank(bank, base_names, novel_names),
            "superset": derive_text_bank(bank, base_names, novel_names + distractors),
        }
        base_only = derive_text_bank(bank, base_names, [])

        # Base-names-only vocabulary: nothing can argmax to a novel class.
        plm_cfg = PLMConfig()
        for image in dataset.images:
            rows = regions.rows_for_image(image.id)
            anns = [
                a for a in dataset.train_annotations() if a.image_id == image.id
            ]
            cands = prepare_image_candidates(
                regions.boxes[rows].astype(np.float64),
                regions.objectness[rows].astype(np.float64),
                regions.vectors[rows].astype(np.float64),
                boxes_to_array([a.box for a in anns]),
                base_only,
                plm_cfg,
            )
            if len(cands.indices):
                zero_candidates = False

        baseline_head, _ = train(
            LinearHead.from_bank(variants["exact"]), dataset, regions,
            variants["exact"], _train_cfg(seed, False),
        )
        baseline = evaluate(
            predict_dataset(baseline_head, dataset, regions, variants["exact"], FUSION),
            dataset,
        ).ap50_novel
        for name, vocab_bank in variants.items():
            head, _ = train(
                LinearHead.from_bank(vocab_bank), dataset, regions, vocab_bank,
                _train_cfg(seed, True),
            )
            rep = evaluate(
                predict_dataset(head, dataset, regions, vocab_bank, FUSION), dataset
            )
            gains[name].append(rep.ap50_novel - baseline)
    exact_gain = float(np.mean(gains["exact"]))
    superset_gain = float(np.mean(gains["superset"]))
    ok = zero_candidates and superset_gain >= 0.8 * exact_gain and exact_gain > 0
    report(
        "vocabulary ablation",
        ok,
        f"base-only mining empty on every image; superset gain {superset_gain:+.4f} vs "
        f"exact gain {exact_gain:+.4f} (>= 80%)",
    )


# ---------------------------------------------------------------------------
# Criterion 10: oracle-box top-k at sigma 0.3: novel top-5 >= top-1 >= 5x
# chance.
# ---------------------------------------------------------------------------


def test_oracle_box_topk_recognition():
    bank, regions, dataset = generate_synthetic_world(10, 5, 64, 400, 0.3, seed=0)
    top1 = oracle_box_topk(dataset, regions, bank, 1)
    top5 = oracle_box_topk(dataset, regions, bank, 5)
    chance = 1.0 / bank.num_classes
    ok = top5[SPLIT_NOVEL] >= top1[SPLIT_NOVEL] >= 5 * chance
    report(
        "oracle-box top-k recognition",
        ok,
        f"novel top-5 {top5[SPLIT_NOVEL]:.4f} >= top-1 {top1[SPLIT_NOVEL]:.4f} >= "
        f"5x chance {5 * chance:.4f}",
    )
