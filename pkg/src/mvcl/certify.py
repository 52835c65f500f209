"""Finite-difference certification of every analytic gradient on random inputs."""

from dataclasses import replace

import numpy as np

from .gradients import (
    finite_diff_check,
    finite_diff_checks,
    grad_consistency,
    grad_contrastive,
    grad_image_to_text,
    grad_negative_pairs,
    grad_positive_pairs,
    grad_text_to_image,
)
from .linalg import Rng, l2_normalize_rows, mix
from .losses import (
    Batch,
    LossConfig,
    consistency_arrays,
    cosine_stack,
    image_to_text_from_cos,
    negative_from_cos,
    pair_cosine_arrays,
    positive_from_cos,
    text_to_image_from_cos,
)
from .pairs import build_negative_pairs, build_positive_pairs, labeled_views
from .pipeline import init_encoder, shard_loss_stack, shard_objective

# Central-difference step for certification. Truncation error is O(h^2) and the
# composed encoder objective at small tau has large third derivatives, so the
# default 1e-4 can exceed the tolerance on its own; 1e-5 keeps both truncation
# and round-off well below it.
CERTIFY_STEP = 1e-5

TERMS = ("image_to_text", "text_to_image", "contrastive", "consistency", "positive", "negative", "encoder")


def _contrastive_checks(rng, n, d, cfg, step):
    b = Batch(l2_normalize_rows(rng.normal((n, d))), l2_normalize_rows(rng.normal((n, d))))
    x = np.concatenate([b.visual, b.textual])

    def terms(z):
        # one cosine matrix per probe serves all three losses
        c = cosine_stack(z[:, :n], z[:, n:])
        i2t, t2i = image_to_text_from_cos(c, cfg.tau), text_to_image_from_cos(c, cfg.tau)
        return np.stack([i2t, t2i, (i2t + t2i) / 2], axis=-1)

    grads = [grad_image_to_text(b, cfg), grad_text_to_image(b, cfg), grad_contrastive(b, cfg)]
    reports = finite_diff_checks(terms, x, [np.concatenate([g.d_visual, g.d_textual]) for g in grads], step)
    return dict(zip(("image_to_text", "text_to_image", "contrastive"), reports))


def _consistency_check(rng, n, d, step):
    views = l2_normalize_rows(rng.normal((3 * n, d))).reshape(n, 3, d)
    texts = l2_normalize_rows(rng.normal((n, d)))
    dv, dt = grad_consistency(views, texts)
    x = np.concatenate([views.reshape(3 * n, d), texts])
    return finite_diff_check(
        lambda z: consistency_arrays(z[:, : 3 * n].reshape(-1, n, 3, d), z[:, 3 * n :]),
        x,
        np.concatenate([dv.reshape(3 * n, d), dt]),
        step,
        batched=True,
    )


def _pair_checks(rng, n, d, cfg, step):
    embs = l2_normalize_rows(rng.normal((3 * n, d)))
    labels = rng.integers(3, n)
    labels[0], labels[-1] = 0, 1  # at least two labels, so negatives exist
    lv = labeled_views(range(n), labels)
    pos = np.asarray(build_positive_pairs(lv), dtype=np.int64)
    neg = np.asarray(build_negative_pairs(lv, 8, rng), dtype=np.int64)
    both = np.concatenate([pos, neg])

    def terms(z):
        c = pair_cosine_arrays(z, both)
        return np.stack([positive_from_cos(c[..., : len(pos)], cfg), negative_from_cos(c[..., len(pos) :], cfg)], axis=-1)

    analytic = [grad_positive_pairs(embs, pos, cfg), grad_negative_pairs(embs, neg, cfg)]
    return dict(zip(("positive", "negative"), finite_diff_checks(terms, embs, analytic, step)))


def _encoder_check(rng, n, d, cfg, step, hidden):
    m = max(2, min(n, 4))
    f = 4
    params = init_encoder(f, d, hidden, seed=rng.spawn_seed())
    feats = rng.normal((m, 3, f))
    texts = l2_normalize_rows(rng.normal((m, d)))
    labels = np.arange(m) % 3
    neg_seed = rng.spawn_seed()
    _, grads = shard_objective(params, feats, texts, labels, cfg, 8, neg_seed)
    analytic = np.concatenate([g.reshape(-1) for g in grads])
    return finite_diff_check(
        lambda z: shard_loss_stack(params, z, feats, texts, labels, cfg, 8, neg_seed),
        params.flat(),
        analytic,
        step,
        batched=True,
    )


def certify_config(seed, n, d, tau, step=CERTIFY_STEP, loss_cfg=None, hidden=(4,)):
    """FdReport per loss term for one random (n, d, tau) configuration."""
    cfg = replace(loss_cfg or LossConfig(), tau=tau)
    rng = Rng(mix(seed, n, d, int(round(tau * 1000))))
    out = _contrastive_checks(rng, n, d, cfg, step)
    out["consistency"] = _consistency_check(rng, n, d, step)
    out.update(_pair_checks(rng, n, d, cfg, step))
    out["encoder"] = _encoder_check(rng, n, d, cfg, step, hidden)
    return out


GRID_D = (4, 16, 64)
GRID_N = (2, 8, 32)
GRID_TAU = (0.05, 0.5, 1.0)


def certification_plan(count=200, seed=0):
    """``count`` seeded configurations cycling through the full (d, N, tau) grid.

    Sign convention and pair reduction alternate so both branches of each
    pair loss are exercised.
    """
    grid = [(d, n, tau) for d in GRID_D for n in GRID_N for tau in GRID_TAU]
    plan = []
    for i in range(count):
        d, n, tau = grid[i % len(grid)]
        cfg = LossConfig(
            tau=tau,
            neg_sign="corrected" if (i // len(grid)) % 2 == 0 else "paper_literal",
            pair_reduction="mean" if (i // (2 * len(grid))) % 2 == 0 else "sum",
        )
        plan.append((mix(seed, i), n, d, tau, cfg))
    return plan



def _certify_chunk(_, plan, step):
    return [certify_config(seed, n, d, tau, step, cfg) for seed, n, d, tau, cfg in plan]


def run_certification(plan, step=CERTIFY_STEP, workers=1):
    """Worst FdReport per term over ``plan``; configurations are split across ``workers`` processes."""
    from .parallel import WorkerPool

    workers = max(1, min(workers, len(plan)))
    chunks = [(plan[w::workers], step) for w in range(workers)]
    worst = {}
    with WorkerPool(workers, "process") as pool:
        for (reports, _) in pool.run(_certify_chunk, None, chunks):
            for rep in reports:
                for term, r in rep.items():
                    if term not in worst or r.max_rel_error > worst[term].max_rel_error:
                        worst[term] = r
    return worst
