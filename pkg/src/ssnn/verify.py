"""Verification suites: formula exactness, conservation, gradient checks,
the hand-derived BPTT micro-oracle, and data golden files.

Each suite returns a list of :class:`CheckResult` records so the CLI can
print machine-readable pass/fail lines and the test suite can assert on the
same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import eventdata as ed
from . import tensor as tt
from .neuron import NeuronConfig, lif_forward_sequence
from .shrink import (StagePlan, TemporalTransformer, average_timestep,
                     overhead_count, reassign, temporal_descriptor,
                     temporal_score)
from .tensor import Tape, Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float

    def as_dict(self):
        return {"check": self.name, "pass": bool(self.passed),
                "measured": float(self.measured), "tolerance": float(self.tolerance)}


# ---------------------------------------------------------------------------
# gradient checking

def numerical_gradient(fn, arrays, which, eps=1e-6):
    """Central finite differences of scalar fn w.r.t. arrays[which] (f64)."""
    base = [a.copy() for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = fn(*base)
        flat[j] = orig - eps
        lo = fn(*base)
        flat[j] = orig
        gflat[j] = (hi - lo) / (2 * eps)
    return grad


def gradcheck(build_loss, arrays, eps=1e-6):
    """Compare tape gradients against central differences.

    `build_loss(*tensors)` must return a scalar Tensor and be re-runnable
    from plain arrays. Returns the worst relative error over all inputs,
    measured as ||ana - num||_inf / max(||ana||_inf, ||num||_inf, 1e-12).
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(*tensors)
    store = tt.backward(tape, loss)

    def scalar_fn(*arrs):
        fresh = [Tensor(a) for a in arrs]
        return float(build_loss(*fresh).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        ana = store.grad_or_zero(t)
        num = numerical_gradient(scalar_fn, arrays, i, eps=eps)
        scale = max(np.abs(ana).max(initial=0), np.abs(num).max(initial=0), 1e-12)
        worst = max(worst, float(np.abs(ana - num).max(initial=0) / scale))
    return worst


def _projection(rng, shape):
    v = rng.standard_normal(shape)
    return lambda t: tt.sum_axes(tt.mul(t, Tensor(v)), tuple(range(len(shape))))


def gradcheck_cases(seed=0, n_cases=20):
    """Worst relative FD error per op family, on random small f64 instances."""
    results = {}

    def run(name, case_fn):
        worst = 0.0
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(results)]))
        for _ in range(n_cases):
            worst = max(worst, case_fn(rng))
        results[name] = worst

    def conv_case(rng):
        t, n, ci, co = 2, 2, 2, 3
        h = w = 5
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.standard_normal((t, n, ci, h, w))
        wk = rng.standard_normal((co, ci, 3, 3))
        b = rng.standard_normal(co)
        oh = (h + 2 * pad - 3) // stride + 1
        proj = _projection(rng, (t, n, co, oh, oh))
        return gradcheck(
            lambda xt, wt, bt: proj(tt.conv2d(xt, wt, bt, stride=stride, padding=pad)),
            [x, wk, b])

    def linear_case(rng):
        t, n, fi, fo = 3, 2, 5, 4
        x = rng.standard_normal((t, n, fi))
        w = rng.standard_normal((fo, fi))
        b = rng.standard_normal(fo)
        proj = _projection(rng, (t, n, fo))
        return gradcheck(lambda xt, wt, bt: proj(tt.linear(xt, wt, bt)), [x, w, b])

    def avgpool_case(rng):
        x = rng.standard_normal((2, 2, 2, 6, 6))
        k = int(rng.integers(2, 4))
        s = int(rng.integers(1, 3))
        oh = (6 - k) // s + 1
        proj = _projection(rng, (2, 2, 2, oh, oh))
        return gradcheck(lambda xt: proj(tt.avgpool2d(xt, k, s)), [x])

    def batchnorm_case(rng):
        x = rng.standard_normal((2, 3, 4, 3, 3))
        gamma = rng.standard_normal(4) + 1.5
        beta = rng.standard_normal(4)
        proj = _projection(rng, x.shape)

        def f(xt, gt, bt):
            return proj(tt.batch_norm(xt, gt, bt, tt.BatchNormState(), training=True))

        return gradcheck(f, [x, gamma, beta])

    def softmax_case(rng):
        x = rng.standard_normal((5, 3))
        proj = _projection(rng, (5, 3))
        return gradcheck(lambda xt: proj(tt.softmax(xt, axis=0)), [x])

    def ce_case(rng):
        n, k = 4, 5
        x = rng.standard_normal((n, k))
        labels = rng.integers(0, k, size=n)
        return gradcheck(lambda xt: tt.cross_entropy(xt, labels), [x])

    def transformer_case(rng):
        t1, t2, n, c, h, w = 5, 3, 2, 2, 3, 3
        o1 = rng.standard_normal((t1, n, c, h, w))
        wt = rng.standard_normal((t2, t1))
        proj = _projection(rng, (t2, n, c, h, w))

        def f(o, wm):
            return proj(reassign(o, temporal_score(temporal_descriptor(o), wm)))

        return gradcheck(f, [o1, wt])

    run("conv2d", conv_case)
    run("linear", linear_case)
    run("avgpool2d", avgpool_case)
    run("batchnorm", batchnorm_case)
    run("softmax", softmax_case)
    run("ce_loss", ce_case)
    run("temporal_transformer", transformer_case)
    return results


# ---------------------------------------------------------------------------
# the hand-derived BPTT micro-oracle

def micro_net_tape_grads(x, w, b, u, c, tau=2.0, theta=1.0, a=1.0):
    """Tape gradients for a 2-input, 1-LIF-neuron, linear-readout net.

    x: [T,2] input; w: [2] input weights; b, u, c: scalars (as 1-vectors).
    Loss is the time-averaged readout mean_t(u*S_t + c).
    """
    xt = Tensor(np.asarray(x, dtype=np.float64))
    wt = Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)
    bt = Tensor(np.asarray(b, dtype=np.float64), requires_grad=True)
    ut = Tensor(np.asarray(u, dtype=np.float64), requires_grad=True)
    ct = Tensor(np.asarray(c, dtype=np.float64), requires_grad=True)
    cfg = NeuronConfig(tau=tau, theta=theta)
    with Tape() as tape:
        i_seq = tt.add(tt.sum_axes(tt.mul(xt, tt.reshape(wt, (1, 2))), (1,)), bt)
        s = lif_forward_sequence(tt.reshape(i_seq, (len(x), 1)), cfg, a=a)
        y = tt.add(tt.mul(s, ut), ct)
        loss = tt.time_mean(y)
        loss = tt.sum_axes(loss, (0,))
        store = tt.backward(tape, loss)
    return {
        "w": store.grad_or_zero(wt),
        "b": store.grad_or_zero(bt),
        "u": store.grad_or_zero(ut),
        "c": store.grad_or_zero(ct),
        "loss": float(loss.data),
    }


def micro_net_hand_grads(x, w, b, u, c, tau=2.0, theta=1.0, a=1.0):
    """The same gradients via explicit adjoint recurrences, written out by
    hand and independent of the tape:

        H_t = (1 - 1/tau) U_{t-1} + w.x_t + b      (U_0 = 0)
        S_t = [H_t >= theta],  surrogate dS/dH = (1/a)[|H_t - theta| < a/2]
        U_t = H_t - theta S_t
        L   = (1/T) sum_t (u S_t + c)

    Reverse sweep (aH_{T+1} = 0):
        aU_t = (1 - 1/tau) aH_{t+1}
        aS_t = u/T - theta aU_t
        aH_t = aU_t + g_t aS_t
        dL/dw = sum_t aH_t x_t,  dL/db = sum_t aH_t,
        dL/du = (1/T) sum_t S_t,  dL/dc = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    big_t = len(x)
    leak = 1.0 - 1.0 / tau
    uu = float(np.asarray(u).reshape(()))

    hs, ss = [], []
    u_state = 0.0
    for t in range(big_t):
        h = leak * u_state + float(x[t] @ w) + float(np.asarray(b).reshape(()))
        s = 1.0 if h >= theta else 0.0
        u_state = h - theta * s
        hs.append(h)
        ss.append(s)

    gw = np.zeros(2)
    gb = 0.0
    a_h_next = 0.0
    for t in reversed(range(big_t)):
        a_u = leak * a_h_next
        a_s = uu / big_t - theta * a_u
        g_t = (1.0 / a) if abs(hs[t] - theta) < a / 2 else 0.0
        a_h = a_u + g_t * a_s
        gw += a_h * x[t]
        gb += a_h
        a_h_next = a_h

    return {
        "w": gw,
        "b": np.array([gb]),
        "u": np.array([sum(ss) / big_t]),
        "c": np.array([1.0]),
        "loss": float(np.mean([uu * s + float(np.asarray(c).reshape(())) for s in ss])),
    }


def micro_oracle_max_error(seed=0, n_random=10):
    """Max |tape - hand| over the fixed case plus random boundary-safe draws."""
    cases = [
        # drives each regime: spike, sub-threshold, surrogate window on/off
        (np.array([[1.3, 0.2], [0.1, 0.3], [0.8, 0.9]]),
         np.array([0.7, 0.4]), np.array([0.05]), np.array([0.9]), np.array([0.1])),
    ]
    rng = np.random.default_rng(seed)
    while len(cases) < 1 + n_random:
        x = rng.uniform(-1, 1.5, size=(3, 2))
        w = rng.uniform(-1, 1, size=2)
        b = rng.uniform(-0.3, 0.3, size=1)
        u = rng.uniform(-1, 1, size=1)
        c = rng.uniform(-1, 1, size=1)
        if _near_boundary(x, w, b):
            continue
        cases.append((x, w, b, u, c))

    worst = 0.0
    for x, w, b, u, c in cases:
        tape_g = micro_net_tape_grads(x, w, b, u, c)
        hand_g = micro_net_hand_grads(x, w, b, u, c)
        for key in ("w", "b", "u", "c"):
            worst = max(worst, float(np.abs(tape_g[key] - hand_g[key]).max()))
        worst = max(worst, abs(tape_g["loss"] - hand_g["loss"]))
    return worst


def _near_boundary(x, w, b, tau=2.0, theta=1.0, a=1.0, margin=1e-3):
    leak = 1.0 - 1.0 / tau
    u_state = 0.0
    for t in range(len(x)):
        h = leak * u_state + float(x[t] @ w) + float(b[0])
        if abs(h - theta) < margin or abs(abs(h - theta) - a / 2) < margin:
            return True
        s = 1.0 if h >= theta else 0.0
        u_state = h - theta * s
    return False


# ---------------------------------------------------------------------------
# suites

def suite_formulas():
    vgg = StagePlan((8, 6, 4, 2), (2, 2, 2, 2))
    res = StagePlan((8, 6, 4, 1), (5, 4, 4, 4))
    avg_v = average_timestep(vgg)
    avg_r = average_timestep(res)
    return [
        CheckResult("average_timestep_vgg9", avg_v == 5.0, avg_v, 0.0),
        CheckResult("average_timestep_resnet18", abs(avg_r - 4.94) <= 0.005,
                    avg_r, 0.005),
        CheckResult("overhead_vgg9", overhead_count(vgg) == 80,
                    overhead_count(vgg), 0.0),
        CheckResult("overhead_two_stage_9_1",
                    overhead_count(StagePlan((9, 1), (1, 1))) == 9,
                    overhead_count(StagePlan((9, 1), (1, 1))), 0.0),
        CheckResult("overhead_below_hundreds", overhead_count(vgg) < 1000,
                    overhead_count(vgg), 1000.0),
    ]


def suite_conservation(n_pairs=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = {"f32": 0.0, "f64": 0.0}
    worst_score = 0.0
    for _ in range(n_pairs):
        t1 = int(rng.integers(2, 11))
        t2 = int(rng.integers(1, t1))
        n = int(rng.integers(1, 4))
        c, h, w = (int(rng.integers(1, 4)) for _ in range(3))
        base = rng.standard_normal((t1, n, c, h, w))
        wmat = rng.standard_normal((t2, t1))
        for tag, dt in (("f32", np.float32), ("f64", np.float64)):
            o1 = Tensor(base.astype(dt))
            d = temporal_score(temporal_descriptor(o1), Tensor(wmat.astype(dt)))
            i2 = reassign(o1, d)
            gap = np.abs(i2.data.sum(axis=0) - o1.data.sum(axis=0)).max()
            worst[tag] = max(worst[tag], float(gap))
            score_gap = np.abs(d.data.sum(axis=0) - 1.0).max()
            worst_score = max(worst_score, float(score_gap))
    return [
        CheckResult("conservation_f32", worst["f32"] <= 1e-5, worst["f32"], 1e-5),
        CheckResult("conservation_f64", worst["f64"] <= 1e-12, worst["f64"], 1e-12),
        CheckResult("score_sum_to_one", worst_score <= 1e-6, worst_score, 1e-6),
    ]


def suite_gradcheck(seed=0, n_cases=20):
    return [
        CheckResult(f"gradcheck_{name}", err <= 1e-4, err, 1e-4)
        for name, err in gradcheck_cases(seed=seed, n_cases=n_cases).items()
    ]


def suite_oracle():
    err = micro_oracle_max_error()
    return [CheckResult("micro_bptt_oracle", err <= 1e-10, err, 1e-10)]


def suite_golden(seed=0):
    results = []

    streams, labels = ed.synth_moving_bars(10, size=16, t_frames=4, seed=seed)
    rt_fail = 0
    for s in streams:
        back = ed.parse_evt(ed.serialize_evt(s))
        same = (back.width == s.width and back.height == s.height
                and np.array_equal(back.events, s.events))
        rt_fail += 0 if same else 1
    results.append(CheckResult("evst_roundtrip_10", rt_fail == 0, rt_fail, 0.0))

    ev = np.array([(0, 0, 0, 1), (5000, 0, 0, 1), (12000, 1, 0, 0)],
                  dtype=ed.EVENT_DTYPE)
    clip = ed.integrate_frames(ed.EventStream(2, 2, ev), delta_ms=10, t_max=2)
    ok = (clip.frames[0, 1, 0, 0] == 2.0 and clip.frames[1, 0, 0, 1] == 1.0
          and clip.frames.sum() == 3.0)
    results.append(CheckResult("three_event_binning", ok,
                               float(clip.frames.sum()), 3.0))

    labels100 = np.repeat(np.arange(2), 50)
    tr, te = ed.split(labels100, seed=seed)
    tr2, te2 = ed.split(labels100, seed=seed)
    ok = (len(tr) == 90 and len(te) == 10
          and len(np.intersect1d(tr, te)) == 0
          and len(np.union1d(tr, te)) == 100
          and np.array_equal(tr, tr2) and np.array_equal(te, te2))
    results.append(CheckResult("split_9_1_exact", ok, float(len(te)), 10.0))
    return results


SUITES = {
    "formulas": suite_formulas,
    "conservation": suite_conservation,
    "gradcheck": suite_gradcheck,
    "oracle": suite_oracle,
    "golden": suite_golden,
}
