"""Acceptance criteria 1-11.

Each criterion is a function returning (passed, detail); the pytest wrappers
assert on it and record one summary line, printed at the end of the session
(see conftest.py). Run directly for the summary alone:

    python3 tests/test_acceptance.py
"""

import math
import sys
import tempfile
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import rankdata

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402
from vqt.attention import (  # noqa: E402
    dense_temporal_attention,
    init_attention_params,
    kl_divergence_score,
    select_keyframes,
    sta_forward,
)
from vqt.bench import flops_ratio, jl_error_bound, scaling_study  # noqa: E402
from vqt.cli import main as cli_main  # noqa: E402
from vqt.data import generate_synthetic_dataset, load_clip, read_manifest, save_clip  # noqa: E402
from vqt.gradcheck import check_grads  # noqa: E402
from vqt.metrics import krocc, plcc, rmse, srocc  # noqa: E402
from vqt.model import (  # noqa: E402
    ModelConfig,
    TrainSettings,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    smooth_l1,
    train,
)
from vqt.mptn import mptn_forward, plan_pathways  # noqa: E402
from vqt.tensor import Tensor  # noqa: E402

RESULTS: dict[int, str] = {}

# end-to-end run settings (desk scale; see README)
E2E_COUNT, E2E_EPOCHS, E2E_SEED = 256, 60, 0
E2E_SETTINGS = TrainSettings(epochs=E2E_EPOCHS, batch_size=8, lr=1e-3, weight_decay=0.1,
                             decay_every=30)


def _timed(limit_s, fn):
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    if elapsed > limit_s:
        ok = False
        detail += f"; runtime {elapsed:.1f}s over the {limit_s}s limit"
    return ok, f"{detail} [{elapsed:.1f}s]"


def _record(n, limit_s, fn):
    ok, detail = _timed(limit_s, fn)
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok, detail


# ---------------------------------------------------------------- criteria


def c1_kl_invariants():
    rng = np.random.default_rng(1)
    worst_gap, worst_eq, worst_shift = math.inf, 0.0, 0.0
    for i in range(1000):
        T = (4, 8, 16, 96)[i % 4]
        d = int(rng.integers(1, 33))
        q = rng.normal(size=d) * rng.uniform(0.1, 5)
        K = rng.normal(size=(T, d)) * rng.uniform(0.1, 5)
        s = kl_divergence_score(q, K)
        worst_gap = min(worst_gap, s - math.log(T))
        # equal scores: every key identical
        same = np.repeat(rng.normal(size=(1, d)), T, axis=0)
        worst_eq = max(worst_eq, abs(kl_divergence_score(q, same) - math.log(T)))
        # shift every score by c: move each key along q
        c = rng.uniform(-10, 10)
        u = c * math.sqrt(d) * q / float(q @ q)
        worst_shift = max(worst_shift, abs(kl_divergence_score(q, K + u) - s))
    ok = worst_gap >= -1e-9 and worst_eq <= 1e-9 and worst_shift <= 1e-9
    return ok, (f"min(score - ln T)={worst_gap:.3e}, equal-score err={worst_eq:.1e}, "
                f"shift err={worst_shift:.1e}")


def _formula_budgets(T):
    L = oracles.ceil_log2(T)
    m = int(math.floor(math.log2(T / L + 1))) - 1
    return tuple((2**a) * L for a in range(m + 1))


def c2_plan_fidelity():
    at96 = plan_pathways(96).budgets
    mismatched = [T for T in range(4, 513) if plan_pathways(T).budgets != _formula_budgets(T)]
    return at96 == (7, 14, 28) and not mismatched, (
        f"plan(96)={list(at96)}, formula mismatches on [4, 512]: {mismatched[:5] or 'none'}")


def c3_flop_ratio():
    ratio = flops_ratio(96, 196, 768)
    not_below = [T for T in range(8, 513) if plan_pathways(T).total >= T]
    ok = ratio == Fraction(49, 96) and not not_below
    return ok, f"ratio(96)={ratio}; T in [8, 512] with sum(budgets) >= T: {not_below or 'none'}"


def c4_scaling():
    res = scaling_study([8, 16, 32, 64, 128], repetitions=10)
    (sd, sd_se), (sm, sm_se) = res.slopes["dense"], res.slopes["mptn"]
    ok = 1.7 <= sd <= 2.3 and sm < sd
    flag = f"; high-variance points: {res.flagged}" if res.flagged else ""
    return ok, f"dense slope {sd:.3f}+/-{sd_se:.3f}, mptn slope {sm:.3f}+/-{sm_se:.3f}{flag}"


def c5_gradients():
    cfg = ModelConfig.preset("tiny", dtype="float64")
    params = init_params(cfg)
    rng = np.random.default_rng(5)
    for name, t in params.items():
        if "offset" in name:
            t.data = rng.normal(0, 0.3, size=t.shape)
    clip = np.random.default_rng(6).random((cfg.frames, cfg.height, cfg.width, 3))

    def loss():
        return smooth_l1(forward(clip, params, cfg, np.random.default_rng(7)), 2.0)

    errs = check_grads(loss, params, max_entries=12, rng=np.random.default_rng(8))
    bad = {k: e for k, e in errs.items() if e >= (1e-3 if "offset" in k else 1e-4)}
    worst = max(errs, key=errs.get)
    return not bad and set(errs) == set(params), (
        f"{len(errs)} parameter groups, worst {worst} rel err {errs[worst]:.2e}, failing: "
        f"{sorted(bad) or 'none'}")


def _np_params(p):
    out = {k: t.data for k, t in p.named().items()}
    out["heads"] = p.heads
    return out


def c6_oracles():
    rng = np.random.default_rng(60)
    errs = {}

    def pathway(d=8):
        p = init_attention_params(d, 2, rng, np.float64, offsets=True)
        p.offset_w.data[:] = rng.normal(0, 0.3, size=(d, 2))
        p.offset_b.data[:] = rng.uniform(-0.6, 0.6, size=2)
        return p

    x = rng.normal(size=(8, 4, 8))
    p = pathway()
    got = dense_temporal_attention(Tensor(x), p).data
    want = oracles.dense_temporal(x, p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, 2)
    errs["dense"] = np.abs(got - want).max()

    got, _ = sta_forward(Tensor(x), p, 3, np.random.default_rng(61))
    want, _ = oracles.sta(x, _np_params(p), 3, np.random.default_rng(61))
    errs["sta"] = np.abs(got.data - want).max()

    x16 = rng.normal(size=(16, 4, 8))
    plan = plan_pathways(16)
    ps = [pathway() for _ in plan.budgets]
    for mode in ("scatter", "literal"):
        got, _ = mptn_forward(Tensor(x16), ps, plan, np.random.default_rng(62), mode=mode)
        want = oracles.mptn(x16, [_np_params(q) for q in ps], plan.budgets,
                            np.random.default_rng(62).spawn(len(plan.budgets)), mode)
        errs[f"mptn-{mode}"] = np.abs(got.data - want).max()

    cfg = ModelConfig.preset("tiny", dtype="float64")
    params = init_params(cfg)
    for name, t in params.items():
        if "offset" in name:
            t.data = rng.normal(0, 0.3, size=t.shape)
    clip = rng.random((cfg.frames, cfg.height, cfg.width, 3))
    got = forward(clip, params, cfg, np.random.default_rng(63)).item()
    want = oracles.model_forward(clip, {k: t.data for k, t in params.items()}, cfg,
                                 np.random.default_rng(63))
    errs["model"] = abs(got - want)
    worst = max(errs.values())
    return worst <= 1e-8, "max abs err " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items())


def c7_keyframes():
    T, frame = 96, 5
    budget = oracles.ceil_log2(T)
    kl_hits = rand_hits = 0
    for i in range(200):
        rng = np.random.default_rng([70, i])
        Q, K = rng.normal(size=(T, 16)), rng.normal(size=(T, 16))
        Q[frame] *= 10.0
        sel = select_keyframes(Q, K, budget, np.random.default_rng([71, i]))
        kl_hits += frame in sel.indices
        rand = np.random.default_rng([72, i]).choice(T, size=budget, replace=False)
        rand_hits += frame in rand
    kl_rate, rand_rate = kl_hits / 200, rand_hits / 200
    return kl_rate >= 0.95 and rand_rate <= 0.15, (
        f"KL selection hit rate {kl_rate:.3f}, random {rand_rate:.3f} (budget {budget})")


def c8_end_to_end():
    base = ModelConfig.preset("tiny", seed=E2E_SEED)
    with tempfile.TemporaryDirectory() as tmp:
        man = read_manifest(generate_synthetic_dataset(Path(tmp), E2E_COUNT, base.frames,
                                                       base.height, base.width, seed=E2E_SEED))
        finals = {}
        for variant in ("mptn", "dense"):
            _, log = train(man, replace(base, temporal=variant), E2E_SETTINGS)
            finals[variant] = log[-1]
    m, d = finals["mptn"], finals["dense"]
    ok = m.srocc >= 0.80 and m.plcc >= 0.80 and m.srocc >= d.srocc
    return ok, (f"test split: mptn SROCC {m.srocc:.4f} PLCC {m.plcc:.4f}; "
                f"dense SROCC {d.srocc:.4f} PLCC {d.plcc:.4f}")


def _brute_ranks(x):
    return np.array([sum(1.0 for y in x if y < v) + (sum(1.0 for y in x if y == v) + 1) / 2
                     for v in x])


def _brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def _brute_kendall(x, y):
    n = len(x)
    c = dd = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            sx = (x[i] > x[j]) - (x[i] < x[j])
            sy = (y[i] > y[j]) - (y[i] < y[j])
            tx += sx == 0
            ty += sy == 0
            c += sx * sy > 0
            dd += sx * sy < 0
    pairs = n * (n - 1) // 2
    return (c - dd) / math.sqrt((pairs - tx) * (pairs - ty))


def c9_metrics():
    rng = np.random.default_rng(9)
    worst = {"plcc": 0.0, "srocc": 0.0, "rmse": 0.0}
    k_mismatch = 0
    done = 0
    while done < 1000:
        n = int(rng.integers(3, 51))
        if done % 2:
            x, y = rng.normal(size=n), rng.normal(size=n)
        else:  # heavy ties
            x = rng.integers(0, 5, size=n).astype(float)
            y = rng.integers(0, 5, size=n).astype(float)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        xl, yl = x.tolist(), y.tolist()
        worst["plcc"] = max(worst["plcc"], abs(plcc(x, y) - _brute_pearson(xl, yl)))
        worst["srocc"] = max(worst["srocc"], abs(
            srocc(x, y) - _brute_pearson(_brute_ranks(xl).tolist(), _brute_ranks(yl).tolist())))
        worst["rmse"] = max(worst["rmse"], abs(
            rmse(x, y) - math.sqrt(sum((a - b) ** 2 for a, b in zip(xl, yl)) / n)))
        k_mismatch += krocc(x, y) != _brute_kendall(xl, yl)
        done += 1
    assert np.array_equal(_brute_ranks([3.0, 1.0, 3.0]), rankdata([3.0, 1.0, 3.0]))
    ok = k_mismatch == 0 and max(worst.values()) <= 1e-10
    return ok, (f"krocc inexact on {k_mismatch}/1000; max err "
                + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def c10_jl():
    eps = jl_error_bound(96, 768)
    return 0.213 <= eps <= 0.223, f"jl_error_bound(96, 768) = {eps:.5f}"


def _cli(*argv):
    import contextlib
    import io
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli_main(list(argv))
    return code, out.getvalue()


def c11_reproducibility():
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        runs = []
        for tag in ("a", "b"):
            d, r = tmp / f"data_{tag}", tmp / f"run_{tag}"
            _cli("gen", "--count", "12", "--seed", "4", "--out", str(d))
            _cli("train", "--manifest", str(d / "manifest.tsv"), "--out", str(r),
                 "--epochs", "2", "--seed", "4")
            clips = [str(p) for p in sorted(d.glob("*.vqtc"))[:3]]
            _, scores = _cli("score", "--checkpoint", str(r / "model.vqtw"), *clips)
            files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
            runs.append((files, (r / "train.log").read_bytes(),
                         (r / "model.vqtw").read_bytes(), scores.replace(str(d), "")))
        if runs[0][0] != runs[1][0]:
            problems.append("gen differs")
        if runs[0][1] != runs[1][1] or runs[0][2] != runs[1][2]:
            problems.append("train differs")
        if runs[0][3] != runs[1][3] or not runs[0][3]:
            problems.append("score differs")

        frames = np.random.default_rng(11).random((4, 16, 16, 3)).astype(np.float32)
        save_clip(tmp / "c.vqtc", frames)
        if load_clip(tmp / "c.vqtc").frames.tobytes() != frames.tobytes():
            problems.append("clip round-trip")
        cfg = ModelConfig.preset("tiny")
        params = init_params(cfg)
        save_checkpoint(tmp / "m.vqtw", params, cfg)
        _, back = load_checkpoint(tmp / "m.vqtw")
        if any(back[k].data.tobytes() != params[k].data.tobytes() for k in params):
            problems.append("checkpoint round-trip")

        d = tmp / "data_a"
        clip_raw = (d / "clip_00000.vqtc").read_bytes()
        (tmp / "trunc.vqtc").write_bytes(clip_raw[:-9])
        (tmp / "magic.vqtc").write_bytes(b"XXXX" + clip_raw[4:])
        ck_raw = (tmp / "run_a" / "model.vqtw").read_bytes()
        (tmp / "trunc.vqtw").write_bytes(ck_raw[: len(ck_raw) // 3])
        ck = str(tmp / "run_a" / "model.vqtw")
        cases = {
            "truncated clip": ("score", "--checkpoint", ck, str(tmp / "trunc.vqtc")),
            "bad-magic clip": ("score", "--checkpoint", ck, str(tmp / "magic.vqtc")),
            "truncated checkpoint": ("score", "--checkpoint", str(tmp / "trunc.vqtw"),
                                     str(d / "clip_00000.vqtc")),
        }
        for name, argv in cases.items():
            code, _ = _cli(*argv)
            if code != 2:
                problems.append(f"{name} exit {code}")
    return not problems, f"problems: {problems or 'none'}"


CRITERIA = {
    1: (5, c1_kl_invariants),
    2: (1, c2_plan_fidelity),
    3: (1, c3_flop_ratio),
    4: (600, c4_scaling),
    5: (300, c5_gradients),
    6: (60, c6_oracles),
    7: (60, c7_keyframes),
    8: (1800, c8_end_to_end),
    9: (30, c9_metrics),
    10: (1, c10_jl),
    11: (300, c11_reproducibility),
}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    limit, fn = CRITERIA[n]
    ok, detail = _record(n, limit, fn)
    print(RESULTS[n])
    assert ok, detail


if __name__ == "__main__":
    for n in sorted(CRITERIA):
        _record(n, *CRITERIA[n])
        print(RESULTS[n], flush=True)
