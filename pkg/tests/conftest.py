import functools
import re
import time

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_nearest(queries, reference):
    """O(NM) nearest neighbour with lowest-index tie breaking."""
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    idx = np.empty(len(q), dtype=np.int64)
    d2 = np.empty(len(q))
    for i, p in enumerate(q):
        diff = p - r
        dist = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        j = int(np.argmin(dist))
        idx[i] = j
        d2[i] = dist[j]
    return idx, d2


def parameter_roles(atlas):
    """True for arrays belonging to a parameterization net, False for classifiers."""
    roles = []
    for ch in atlas.charts:
        roles += [True] * len(ch.phi.arrays()) + [False] * len(ch.ltilde.arrays())
    return roles


def stopgrad_directional_fd(atlas, target, batch, weights, direction, h=1e-4):
    """Central difference of the training objective along ``direction``.

    The occupancy term treats maximal points as constants, so the
    parameterization part of the direction is differenced with that term
    switched off, and the classifier part with every term on.
    """
    from atlasforge.losses import LossWeights, objective

    roles = parameter_roles(atlas)

    def shifted_total(step, use_phi, w):
        moved = atlas.copy()
        for arr, d, is_phi in zip(moved.parameters(), direction, roles):
            if is_phi == use_phi:
                arr += step * d
        return objective(moved, target, batch, w, with_grad=False)[0].total

    no_occ = LossWeights(weights.rec, 0.0, weights.dist)
    phi_part = (shifted_total(h, True, no_occ) - shifted_total(-h, True, no_occ)) / (2 * h)
    lt_part = (shifted_total(h, False, weights) - shifted_total(-h, False, weights)) / (2 * h)
    return phi_part + lt_part


# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary
ACCEPTANCE_RESULTS = []


def record_criterion(cid, title, passed, detail=""):
    ACCEPTANCE_RESULTS.append((cid, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    order = lambda r: (int(re.match(r"\d+", r[0]).group()), r[0])
    for cid, title, passed, detail in sorted(ACCEPTANCE_RESULTS, key=order):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {cid:<4} {title}" + (f" | {detail}" if detail else ""))


# end-to-end desk fits, shared by every test in a session
DESK_ITERATIONS = 2000
TARGET_SEED, FIT_SEED, PROBE_SEED, EVAL_SEED = 0, 0, 1, 2


@functools.lru_cache(maxsize=None)
def desk_fit(kind, charts, lambda_dist=1e-5):
    """Fit ``kind`` with default settings; returns (atlas, history, report, seconds).

    ``seconds`` covers training plus label-frequency estimation.
    """
    from atlasforge.geom import synth_surface
    from atlasforge.infer import InferenceConfig, estimate_label_frequency
    from atlasforge.losses import LossWeights
    from atlasforge.metrics import evaluate
    from atlasforge.train import TrainConfig, fit

    target = synth_surface(kind, 2500, np.random.default_rng(TARGET_SEED))
    cfg = TrainConfig(charts=charts, iterations=DESK_ITERATIONS, seed=FIT_SEED,
                      weights=LossWeights(1.0, 1.0, lambda_dist))
    start = time.perf_counter()
    atlas, history = fit(target, cfg)
    icfg = InferenceConfig()
    atlas.set_label_frequency(
        estimate_label_frequency(atlas, icfg, np.random.default_rng(PROBE_SEED)))
    seconds = time.perf_counter() - start
    report = evaluate(atlas, target, np.random.default_rng(EVAL_SEED), 2500, icfg)
    return atlas, history, report, seconds
