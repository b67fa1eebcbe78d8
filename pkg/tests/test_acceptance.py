"""Acceptance suite: one test per criterion, each logged as PASS or FAIL.

Desk setup: the synthetic desk interaction log (3000 users, 600 items, seed 0),
5-core, max_len 50, models trained once per module.
"""

import hashlib
import math

import numpy as np
import pytest
import yaml
from scipy.stats import spearmanr

import operator_checks as oc
from acceptance_log import criterion
from seqtta.augmentation import AugmentationSpec
from seqtta.cli import main
from seqtta.datasets import Catalog, build_sequences, k_core_filter, leave_one_out_split
from seqtta.evaluation import M_GRID, NOISE_GRID, SIGMA_GRID, evaluate, similarity_report, \
    sweep, timing_report
from seqtta.metrics import hit_at_k, ndcg_at_k, rank_of_target, ranks_of_targets
from seqtta.models import SequentialRecommender
from seqtta.synthetic import make_desk_interactions, make_key_dataset, write_interactions
from seqtta.tensor_core import finite_difference_check
from seqtta.tensor_core import kernels as K
from seqtta.tta import PredictionScores, TtaConfig, TtaEngine, aggregate

pytestmark = pytest.mark.slow

IDENTITY = AugmentationSpec("TNoise", noise_lo=0.0, noise_hi=0.0)
DESK_MODEL = dict(d=64, max_len=50, epochs=30, lr=0.005, batch_size=256, patience=10,
                  random_state=0)
ENCODERS = {"gru": dict(encoder="gru", n_blocks=1),
            "attention": dict(encoder="attention", n_blocks=2)}


@pytest.fixture(scope="module")
def desk_split():
    rows = k_core_filter(make_desk_interactions(seed=0), 5)
    cat = Catalog.from_interactions(rows)
    return leave_one_out_split(build_sequences(rows, cat, 50), cat.num_items)


@pytest.fixture(scope="module")
def desk_models(desk_split):
    return {name: SequentialRecommender(**kw, **DESK_MODEL).fit(desk_split)
            for name, kw in ENCODERS.items()}


@pytest.fixture(scope="module")
def sigma_sweeps(desk_models, desk_split):
    out = {}
    for name, model in desk_models.items():
        base = evaluate(model, desk_split)
        cfg = TtaConfig(AugmentationSpec("TMaskR", sigma=0.5), m=10)
        out[name] = (base, sweep(model, desk_split, "sigma", SIGMA_GRID, cfg))
    return out


def test_c01_operator_properties():
    with criterion(1) as info:
        runner = oc.CaseRunner()
        failures = {kind: oc.run_cases(kind, 1000, runner) for kind in oc.OPERATORS}
        n_fail = sum(len(f) for f in failures.values())
        info["detail"] = f"{len(oc.OPERATORS)} operators x 1000 cases, {n_fail} failures"
        assert n_fail == 0, {k: v[:3] for k, v in failures.items() if v}


def _gradient_cases(rng):
    """(name, loss, tensors, analytic, tolerance) for every kernel."""
    d = 8
    cases = []

    table = rng.normal(size=(9, d))
    ids = np.array([[1, 2, 2, 0], [8, 3, 1, 1]])
    R = rng.normal(size=(2, 4, d))
    cases.append(("embedding", lambda: float((K.embedding_forward(table, ids)[0] * R).sum()),
                  {"table": table}, {"table": K.embedding_backward(R, ids, table.shape, None)},
                  1e-6))

    x, W, b = rng.normal(size=(5, d)), rng.normal(size=(d, 4)), rng.normal(size=4)
    R2 = rng.normal(size=(5, 4))
    dx, g = K.linear_backward(R2, x, W)
    cases.append(("linear", lambda: float((K.linear_forward(x, W, b)[0] * R2).sum()),
                  {"x": x, "W": W, "b": b}, {"x": dx, "W": g["W"], "b": g["b"]}, 1e-6))

    s = rng.normal(size=(4, 12))
    t = np.array([1, 12, 5, 7])
    mask = np.array([True, True, False, True])
    _, gs = K.softmax_cross_entropy(s, t, mask)
    cases.append(("softmax_cross_entropy", lambda: K.softmax_cross_entropy(s, t, mask)[0],
                  {"scores": s}, {"scores": gs}, 1e-6))

    xl = rng.normal(size=(2, 3, d))
    gamma, beta = 1 + rng.normal(0, 0.2, d), rng.normal(0, 0.2, d)
    R3 = rng.normal(size=xl.shape)
    _, cache = K.layer_norm_forward(xl, gamma, beta)
    dxl, gl = K.layer_norm_backward(R3, cache)
    cases.append(("layer_norm", lambda: float((K.layer_norm_forward(xl, gamma, beta)[0]
                                               * R3).sum()),
                  {"x": xl, "gamma": gamma, "beta": beta},
                  {"x": dxl, "gamma": gl["gamma"], "beta": gl["beta"]}, 1e-4))

    W1, b1 = rng.normal(size=(d, d)), rng.normal(size=d)
    W2, b2 = rng.normal(size=(d, d)), rng.normal(size=d)
    _, cache = K.ffn_forward(xl, W1, b1, W2, b2)
    dxf, gf = K.ffn_backward(R3, cache)
    gf["x"] = dxf
    cases.append(("ffn", lambda: float((K.ffn_forward(xl, W1, b1, W2, b2)[0] * R3).sum()),
                  dict(x=xl, W1=W1, b1=b1, W2=W2, b2=b2), gf, 1e-4))

    p = {}
    for n in "qkvo":
        p["W" + n] = rng.normal(0, d ** -0.5, (d, d))
        p["b" + n] = rng.normal(0, 0.1, d)
    p.update(W1=rng.normal(0, d ** -0.5, (d, d)), b1=rng.normal(0, 0.1, d),
             W2=rng.normal(0, d ** -0.5, (d, d)), b2=rng.normal(0, 0.1, d),
             ln1_g=1 + rng.normal(0, 0.1, d), ln1_b=rng.normal(0, 0.1, d),
             ln2_g=1 + rng.normal(0, 0.1, d), ln2_b=rng.normal(0, 0.1, d))
    xa = rng.normal(size=(2, 5, d))
    valid = np.ones((2, 5), bool)
    valid[1, :2] = False
    allowed = K.attention_mask(valid)
    R4 = rng.normal(size=xa.shape)
    _, cache = K.block_forward(xa, p, allowed, 2)
    dxa, ga = K.block_backward(R4, cache, p)
    ga["x"] = dxa
    cases.append(("attention_block", lambda: float((K.block_forward(xa, p, allowed, 2)[0]
                                                    * R4).sum()),
                  dict(p, x=xa), ga, 1e-4))

    pg = {"Wx": rng.normal(0, 0.4, (d, 3 * d)), "Wh": rng.normal(0, 0.4, (d, 3 * d)),
          "bx": rng.normal(0, 0.1, 3 * d), "bh": rng.normal(0, 0.1, 3 * d)}
    R5 = rng.normal(size=xa.shape)
    _, cache = K.gru_forward(xa, pg, valid)
    dxg, gg = K.gru_backward(R5, cache, pg)
    gg["x"] = dxg
    cases.append(("gru", lambda: float((K.gru_forward(xa, pg, valid)[0] * R5).sum()),
                  dict(pg, x=xa), gg, 1e-4))
    return cases


def test_c02_gradients():
    with criterion(2) as info:
        worst = {}
        failed = []
        for name, loss, tensors, analytic, tol in _gradient_cases(np.random.default_rng(0)):
            rep = finite_difference_check(loss, tensors, analytic, h=1e-5, tolerance=tol)
            worst[name] = max(rep.errors.values())
            if not rep.passed:
                failed.append(f"{name}: {rep}")
        info["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        assert not failed, failed


def test_c03_metric_oracle():
    with criterion(3) as info:
        rng = np.random.default_rng(0)
        n_ties = 0
        for i in range(1000):
            v = int(rng.integers(2, 60))
            # half the vectors draw from a tiny value set to force ties
            s = (rng.integers(0, 4, size=v).astype(float) if i % 2 else rng.normal(size=v))
            target = int(rng.integers(1, v + 1))
            order = sorted(range(1, v + 1), key=lambda j: (-s[j - 1], j))
            want = order.index(target) + 1
            n_ties += len(np.unique(s)) < v
            got = rank_of_target(s, target)
            assert got == want
            assert ranks_of_targets(s[None], np.array([target]))[0] == want
            for k in (5, 10, 20):
                assert hit_at_k(got, k) == (1.0 if want <= k else 0.0)
                assert ndcg_at_k(got, k) == (1.0 / math.log2(want + 1) if want <= k else 0.0)
        info["detail"] = f"1000 vectors, {n_ties} with ties"


def test_c04_degenerate_identity(desk_models, desk_split):
    with criterion(4) as info:
        cfg = TtaConfig(IDENTITY, m=1, include_original=True)
        for name, model in desk_models.items():
            base, d0 = evaluate(model, desk_split, return_ranks=True)
            tta, d1 = evaluate(model, desk_split, tta=cfg, return_ranks=True)
            assert np.array_equal(d0["ranks"], d1["ranks"]), name
            assert {**tta.metrics_dict(), "label": "base"} == base.metrics_dict(), name
        info["detail"] = "bit-exact for gru and attention"


def test_c05_aggregation(desk_models, desk_split):
    with criterion(5) as info:
        rng = np.random.default_rng(0)
        worst = 0.0
        pools = [[PredictionScores(rng.normal(size=500) * 4) for _ in range(10)]
                 for _ in range(20)]
        engine = TtaEngine(desk_models["attention"],
                           TtaConfig(AugmentationSpec("TMaskR", sigma=0.4), m=10))
        logits = engine.variant_logits(desk_split.test_input[:20], desk_split.users[:20])
        pools += [[PredictionScores(r) for r in user] for user in logits]
        for pool in pools:
            ref = aggregate(pool).values
            worst = max(worst, abs(ref.sum() - 1.0))
            assert abs(ref.sum() - 1.0) <= 1e-9 and ref.min() >= 0
            for _ in range(20):
                order = rng.permutation(len(pool))
                assert np.array_equal(aggregate([pool[i] for i in order]).values, ref)
        info["detail"] = f"{len(pools)} pools, max |sum - 1| = {worst:.1e}"


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_c06_end_to_end_determinism(tmp_path):
    with criterion(6) as info:
        write_interactions(tmp_path / "raw.csv", make_desk_interactions(seed=0))
        cfg = {"dataset": {"path": "raw.csv"},
               "model": {"encoder": "gru", "n_blocks": 1, "epochs": 5, "lr": 0.005},
               "tta": {"operator": {"kind": "TMaskR", "sigma": 0.4}, "m": 10}, "seed": 0}
        (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(cfg))
        files = ["dataset.json", "model.json", "tta_report.json", "tta_report.csv",
                 "tta_predictions.jsonl"]
        digests = []
        for run in ("a", "b"):
            for cmd in ("prepare", "train", "tta-eval"):
                assert main([cmd, "--config", str(tmp_path / "cfg.yaml"),
                             "--out", str(tmp_path / run)]) == 0
            digests.append([_digest(tmp_path / run / f) for f in files])
        same = [f for f, a, b in zip(files, *digests) if a == b]
        info["detail"] = f"{len(same)}/{len(files)} output files hash-identical"
        assert same == files


def test_c07_similarity_monotone(desk_models, desk_split):
    with criterion(7) as info:
        parts = []
        for name, model in desk_models.items():
            means = [similarity_report(model, desk_split,
                                       TtaConfig(AugmentationSpec.tnoise_from_pair(a, b),
                                                 m=10)).mean for a, b in NOISE_GRID]
            parts.append(f"{name} " + " > ".join(f"{v:.4f}" for v in means))
            info["detail"] = "; ".join(parts)
            assert all(x > y for x, y in zip(means, means[1:])), name


def test_c08_complexity_ordering(desk_models, desk_split):
    with criterion(8) as info:
        n = desk_split.num_items
        sub = AugmentationSpec("Substitute", ratio=0.3)
        noise = AugmentationSpec.tnoise_from_pair(1, 0.5)
        tmr = AugmentationSpec("TMaskR", sigma=0.5)
        rep = timing_report(desk_models["gru"], desk_split, [sub, noise, tmr], [n, 8 * n],
                            m=10, repeats=3, max_users=500)
        r = rep.ratios()
        base = r["base"]
        info["detail"] = (f"sizes {n}->{8 * n}; growth base {base:.2f}, "
                          f"Substitute {r[sub.label()]:.2f}, TNoise {r[noise.label()]:.2f}, "
                          f"TMaskR {r[tmr.label()]:.2f}")
        assert r[sub.label()] > r[noise.label()]
        assert r[sub.label()] > r[tmr.label()]
        for spec in (noise, tmr):
            assert 1 / 1.5 <= r[spec.label()] / base <= 1.5, spec.label()


def test_c09_sigma_sweep(sigma_sweeps):
    with criterion(9) as info:
        parts, ok = [], []
        for name, (base, res) in sigma_sweeps.items():
            hr = [rep.hr[10] for rep in res.reports]
            best = SIGMA_GRID[int(np.argmax(hr))]
            interior = best not in (SIGMA_GRID[0], SIGMA_GRID[-1])
            beats = max(hr) >= base.hr[10]
            ok.append(interior and beats)
            parts.append(f"{name} best sigma {best} HR@10 {max(hr):.4f} vs base "
                         f"{base.hr[10]:.4f}")
        info["detail"] = "; ".join(parts)
        assert any(ok)


def test_c10_m_sweep(sigma_sweeps, desk_models, desk_split):
    with criterion(10) as info:
        parts = []
        for name, (_, res) in sigma_sweeps.items():
            sigma = float(res.best())
            cfg = TtaConfig(AugmentationSpec("TMaskR", sigma=sigma), m=10)
            hr = [rep.hr[10] for rep in sweep(desk_models[name], desk_split, "m", M_GRID,
                                              cfg).reports]
            rho = spearmanr(M_GRID, hr)[0]
            parts.append(f"{name} sigma {sigma}: HR@10 m=5 {hr[0]:.4f}, m=15 {hr[-1]:.4f}, "
                         f"spearman {rho:.2f}")
            info["detail"] = "; ".join(parts)
            assert hr[-1] >= hr[0], name
            assert rho >= 0, name


def test_c11_key_first_masking():
    with criterion(11) as info:
        split, keys = make_key_dataset(seed=0)
        model = SequentialRecommender(encoder="gru", d=32, n_blocks=1, max_len=10, epochs=15,
                                      eval_every=15, lr=0.005).fit(split)
        hr = {}
        for sel in ("Random", "KF", "NKF"):
            cfg = TtaConfig(AugmentationSpec("Mask", ratio=0.25, selection=sel), m=10)
            hr[sel] = evaluate(model, split, tta=cfg, keys=keys).hr[10]
        info["detail"] = ", ".join(f"{k} HR@10 {v:.3f}" for k, v in hr.items())
        assert hr["KF"] < hr["Random"]
