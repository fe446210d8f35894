"""Self-checks runnable from the command line (``sepmamba verify``).

Each suite returns a list of :class:`PropertyResult`.  The checks compare the
implementation against independent oracles: an RK4 integration of the
continuous-time system for the discretisation, a plain triple loop for the
scan, central finite differences for gradients, input perturbation for
causality and brute-force enumeration for the permutation search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from . import numerics as nx
from . import objective
from . import separator as sep
from . import ssm
from .mamba import BambaStackConfig, MambaBlockConfig, bamba_forward, init_bamba
from .numerics import Tensor

SUITES = ("scan", "grads", "causality", "metrics")


@dataclass(frozen=True)
class PropertyResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.suite}.{self.name}  {self.detail}".rstrip()


def toy_config(causal: bool = False, **kw) -> sep.SeparatorConfig:
    """Three-stage model small enough for finite differences."""
    base = dict(n_stages=3, base_dim=4, blocks_per_stage=2, kernel_size=4, stride=2, expand=2, n_state=4, d_conv=3)
    base.update(kw)
    return sep.SeparatorConfig(causal=causal, **base)


# ---------------------------------------------------------------------------
# scan


def rk4_step_response(a: float, b: float, u: float, h0: float, delta: float, substeps: int = 400) -> float:
    """State after ``delta`` seconds of ``h' = a h + b u`` with ``u`` held constant."""
    h, dt = h0, delta / substeps
    for _ in range(substeps):
        k1 = a * h + b * u
        k2 = a * (h + 0.5 * dt * k1) + b * u
        k3 = a * (h + 0.5 * dt * k2) + b * u
        k4 = a * (h + dt * k3) + b * u
        h += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return h


def random_scan_case(rng: np.random.Generator, L: int, E: int, N: int, dtype=np.float64):
    params = ssm.init_ssm_params(E, N, rng, dtype=dtype)
    x = rng.standard_normal((E, L)).astype(dtype)
    return params, x


def max_scan_gap(params, x, method_a=ssm.scan_sequential, method_b=ssm.scan_parallel) -> float:
    with nx.no_grad():
        ya, ha = method_a(params, x)
        yb, hb = method_b(params, x)
    return float(max(np.max(np.abs(ya.data - yb.data)), np.max(np.abs(ha - hb))))


def scan_equivalence(n_cases: int = 100, seed: int = 0, max_len: int = 1024, max_d: int = 16, max_n: int = 16) -> dict[str, float]:
    """Worst ``|parallel - sequential|`` over random cases, per precision."""
    rng = np.random.default_rng(seed)
    worst = {"f32": 0.0, "f64": 0.0}
    for _ in range(n_cases):
        L = int(rng.integers(1, max_len + 1))
        E = int(rng.integers(1, max_d + 1))
        N = int(rng.integers(1, max_n + 1))
        case_seed = int(rng.integers(2**31))
        for key, dtype in (("f32", np.float32), ("f64", np.float64)):
            params, x = random_scan_case(np.random.default_rng(case_seed), L, E, N, dtype)
            worst[key] = max(worst[key], max_scan_gap(params, x))
    return worst


def suite_scan(seed: int = 0, n_cases: int = 20, discretize_fn: Callable | None = None) -> list[PropertyResult]:
    discretize_fn = ssm.discretize if discretize_fn is None else discretize_fn
    out = []
    rng = np.random.default_rng(seed)

    # discretisation against the integrated ODE
    worst = 0.0
    for _ in range(20):
        a = -math.exp(rng.uniform(-2, 2))
        b, u, h0 = rng.standard_normal(3)
        delta = math.exp(rng.uniform(-5, 0))
        Ab, Bb = discretize_fn(np.float64(a), np.float64(b), np.float64(delta))
        worst = max(worst, abs(float(Ab * h0 + Bb * u) - rk4_step_response(a, b, u, h0, delta)))
    out.append(PropertyResult("scan", "zoh_matches_ode", worst < 1e-9, f"max err {worst:.2e}"))

    # fused kernel against the plain loop with the discretisation under test
    worst = 0.0
    for _ in range(5):
        E, N, L = (int(v) for v in rng.integers(1, 9, size=3))
        params, x = random_scan_case(rng, L, E, N)
        with nx.no_grad():
            y, h = ssm.scan_sequential(params, x)
            delta, B, C = ssm.project(params, Tensor(x))
        A = -np.exp(params.A_log.data)
        y_ref, h_ref = ssm.scan_reference(A, delta.data, B.data, C.data, x, params.D.data, discretize_fn=discretize_fn)
        worst = max(worst, float(np.max(np.abs(y.data - y_ref))), float(np.max(np.abs(h - h_ref))))
    out.append(PropertyResult("scan", "sequential_matches_loop", worst < 1e-10, f"max err {worst:.2e}"))

    gaps = scan_equivalence(n_cases, seed + 1)
    out.append(PropertyResult("scan", "parallel_matches_sequential_f32", gaps["f32"] < 1e-5, f"max err {gaps['f32']:.2e}"))
    out.append(PropertyResult("scan", "parallel_matches_sequential_f64", gaps["f64"] < 1e-10, f"max err {gaps['f64']:.2e}"))

    # chunked and step-wise evaluation carry state exactly
    params, x = random_scan_case(rng, 64, 6, 5)
    with nx.no_grad():
        y_full, h_full = ssm.scan_sequential(params, x)
        y1, h1 = ssm.scan_sequential(params, x[:, :23])
        y2, h2 = ssm.scan_sequential(params, x[:, 23:], h1)
    h = np.zeros((6, 5))
    steps = []
    for t in range(x.shape[1]):
        yt, h = ssm.scan_step(params, x[:, t], h)
        steps.append(yt)
    gap = max(
        float(np.max(np.abs(np.concatenate([y1.data, y2.data], axis=1) - y_full.data))),
        float(np.max(np.abs(np.stack(steps, axis=1) - y_full.data))),
        float(np.max(np.abs(h - h_full))),
    )
    out.append(PropertyResult("scan", "state_carry", gap < 1e-12, f"max err {gap:.2e}"))

    # both kernel backends agree
    with kernels.use_backend("numpy"):
        with nx.no_grad():
            y_np, _ = ssm.scan_sequential(params, x)
    gap = float(np.max(np.abs(y_np.data - y_full.data)))
    out.append(PropertyResult("scan", "backends_agree", gap < 1e-12, f"max err {gap:.2e}"))
    return out


# ---------------------------------------------------------------------------
# gradients


def finite_difference_check(f: Callable[[], Tensor], params: dict[str, Tensor | list[Tensor]], rng: np.random.Generator, n_dirs: int = 2, h: float = 1e-5) -> tuple[float, str]:
    """Worst relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.
    ``params`` maps a name to a tensor or a group of tensors perturbed
    together.  Each group moves along ``n_dirs`` unit directions
    ``v = normalise(g/|g| + r/|r|)`` with ``r`` random, and the error is
    ``|fd - g.v| / max(|fd|, |g.v|)``.  Leaning on the gradient keeps the
    directional derivative near ``|g|``, far above the rounding floor of the
    difference quotient (single coordinates of small-gradient tensors sit
    right on it); the random half still tests components off the gradient.
    """
    groups = {k: (list(v) if isinstance(v, (list, tuple)) else [v]) for k, v in params.items()}
    for ts in groups.values():
        for p in ts:
            p.grad = None
    loss = f()
    nx.backward(loss)
    worst, worst_name = 0.0, ""
    with nx.no_grad():
        for name, ts in groups.items():
            g = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) for p in ts]).astype(np.float64)
            olds = [p.data.copy() for p in ts]
            sizes = np.cumsum([0] + [p.size for p in ts])
            gn = np.linalg.norm(g)
            for _ in range(n_dirs):
                r = rng.standard_normal(g.size)
                v = r / np.linalg.norm(r) + (g / gn if gn > 0 else 0.0)
                v /= np.linalg.norm(v)

                def shifted(step):
                    for p, old, lo, hi in zip(ts, olds, sizes[:-1], sizes[1:]):
                        p.data[...] = old + step * v[lo:hi].reshape(p.shape)
                    return f().item()

                up, down = shifted(h), shifted(-h)
                for p, old in zip(ts, olds):
                    p.data[...] = old
                fd = (up - down) / (2 * h)
                an = float(g @ v)
                scale = max(abs(fd), abs(an))
                err = 0.0 if scale < 1e-12 else abs(fd - an) / scale
                if err > worst:
                    worst, worst_name = err, name
    return worst, worst_name


def _stage_groups(model: sep.ModelWeights) -> dict[str, list[Tensor]]:
    """Parameters grouped by layer: stem, each Bamba stage, each conv, head."""
    groups: dict[str, list[Tensor]] = {}
    for name, t in model.items():
        groups.setdefault(name.split(".")[0], []).append(t)
    return groups


def suite_grads(seed: int = 0, tol: float = 1e-5) -> list[PropertyResult]:
    out = []
    rng = np.random.default_rng(seed)
    with nx.precision("f64"):
        # scan parameters (both evaluation methods)
        params = ssm.init_ssm_params(6, 4, rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((6, 40)), requires_grad=True)
        w = rng.standard_normal((6, 40))
        named = {**params.tensors(), "x": x}
        for method in ("sequential", "parallel"):
            fn = ssm.scan_sequential if method == "sequential" else ssm.scan_parallel
            err, name = finite_difference_check(lambda: nx.tsum(nx.mul(fn(params, x)[0], w)), named, rng)
            out.append(PropertyResult("grads", f"scan_{method}", err < tol, f"rel err {err:.2e} ({name})"))

        # strided convolutions and their transposes in every padding mode
        worst, where = 0.0, ""
        for mode in nx.PADDING_MODES:
            xc = Tensor(rng.standard_normal((3, 37)), requires_grad=True)
            wc = Tensor(rng.standard_normal((5, 3, 6)), requires_grad=True)
            bc = Tensor(rng.standard_normal(5), requires_grad=True)
            wt = Tensor(rng.standard_normal((3, 2, 6)), requires_grad=True)
            probe = rng.standard_normal((5, nx.conv_output_length(37, 6, 2, mode)))

            def conv_loss():
                y = nx.conv1d(xc, wc, bc, stride=2, padding=mode)
                z = nx.conv_transpose1d(xc, wt, None, stride=2, padding=mode)
                return nx.add(nx.tsum(nx.mul(y, probe)), nx.tsum(nx.mul(z, z)))

            err, name = finite_difference_check(conv_loss, {"x": xc, "w": wc, "b": bc, "wt": wt}, rng)
            if err > worst:
                worst, where = err, f"{mode}/{name}"
        out.append(PropertyResult("grads", "conv", worst < tol, f"rel err {worst:.2e} ({where or 'all'})"))

        # a bidirectional Bamba stack
        cfg = BambaStackConfig(1, MambaBlockConfig(d_model=4, expand=2, n_state=3, d_conv=3))
        raw = init_bamba(cfg, rng, np.float64)
        weights = {b: [{k: Tensor(v, requires_grad=True) for k, v in blk.items()} for blk in blocks] for b, blocks in raw.items()}
        xb = Tensor(rng.standard_normal((4, 24)), requires_grad=True)
        wb = rng.standard_normal((4, 24))
        flat: dict[str, object] = {f"{b}.{i}": list(blk.values()) for b, blocks in weights.items() for i, blk in enumerate(blocks)}
        flat["x"] = xb
        err, name = finite_difference_check(lambda: nx.tsum(nx.mul(bamba_forward(cfg, weights, xb), wb)), flat, rng)
        out.append(PropertyResult("grads", "bamba_stack", err < tol, f"rel err {err:.2e} ({name})"))

        # uPIT loss through a whole toy separator
        config = toy_config()
        model = sep.build(config, seed=seed, precision="f64")
        L = 64
        refs = rng.standard_normal((2, L))
        mix = refs.sum(axis=0)[None, :]
        err, name = finite_difference_check(lambda: objective.upit_loss(sep.forward(model, mix), refs)[0], _stage_groups(model), rng)
        out.append(PropertyResult("grads", "upit_end_to_end", err < tol, f"rel err {err:.2e} ({name})"))
    return out


# ---------------------------------------------------------------------------
# causality and streaming


def causality_probe(config: sep.SeparatorConfig, length: int = 64, seed: int = 0) -> dict[str, int]:
    """Perturb single input samples and record which outputs move.

    ``observed_lookahead`` is the largest ``j - t`` over probes ``j`` and
    moved outputs ``t``; ``leaks`` counts moved outputs whose analytic
    dependency horizon ends before ``j`` (always zero for non-causal
    configs, which have no horizon; there ``early`` counts outputs moved
    more than ``frame - 1`` samples ahead of the probe).
    """
    w = sep.build(config, seed=seed, precision="f64")
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((1, length))
    base = sep.separate(w, x)
    leaks, early, observed = 0, 0, 0
    horizon = np.array([sep.dependency_horizon(config, t) for t in range(length)]) if config.causal else None
    for j in range(1, length):
        xp = x.copy()
        xp[0, j] += 1.0
        moved = np.any(np.abs(sep.separate(w, xp) - base) > 1e-12, axis=0)
        if not moved.any():
            continue
        observed = max(observed, j - int(np.argmax(moved)))
        if horizon is not None:
            leaks += int(np.sum(moved & (horizon < j)))
        early += int(np.sum(moved[: max(0, j - (config.frame - 1))]))
    return {"leaks": leaks, "early": early, "observed_lookahead": observed}


def streaming_gap(config: sep.SeparatorConfig, length: int = 96, chunk: int | None = None, seed: int = 0, precision="f32") -> float:
    """Worst difference between chunked streaming and batch output."""
    w = sep.build(config, seed=seed, precision=precision)
    x = np.random.default_rng(seed + 2).standard_normal(length).astype(w.dtype)
    batch = sep.separate(w, x[None, :])
    chunk = chunk or 2 * config.frame
    outs, state = [], None
    for lo in range(0, length, chunk):
        y, state = sep.forward_streaming(w, x[lo : lo + chunk], state)
        outs.append(y)
    stream = np.concatenate(outs, axis=1)
    valid = length - (length % config.frame)  # final partial frame still waits for lookahead
    return float(np.max(np.abs(stream[:, :valid] - batch[:, :valid])))


def suite_causality(seed: int = 0) -> list[PropertyResult]:
    out = []
    causal = toy_config(causal=True)
    lam = sep.lookahead(causal)
    res = causality_probe(causal, seed=seed)
    out.append(PropertyResult("causality", "no_dependence_beyond_lookahead", res["leaks"] == 0, f"lookahead {lam}, leaks {res['leaks']}"))
    out.append(PropertyResult("causality", "lookahead_is_tight", res["observed_lookahead"] == lam, f"observed {res['observed_lookahead']}, analytic {lam}"))
    res_nc = causality_probe(toy_config(causal=False), seed=seed)
    out.append(PropertyResult("causality", "noncausal_sees_future", res_nc["early"] > 0, f"{res_nc['early']} outputs move more than {lam} samples ahead"))
    gap = streaming_gap(causal, seed=seed)
    out.append(PropertyResult("causality", "streaming_matches_batch", gap < 1e-5, f"max err {gap:.2e} (f32)"))
    return out


# ---------------------------------------------------------------------------
# metrics


def brute_force_upit(est: np.ndarray, ref: np.ndarray, clamp_db: float = 30.0) -> tuple[float, tuple[int, int]]:
    """Both two-source assignments written out by hand."""

    def term(e, r):
        return max(-objective.si_sdr(e, r), -clamp_db)

    straight = 0.5 * (term(est[0], ref[0]) + term(est[1], ref[1]))
    swapped = 0.5 * (term(est[1], ref[0]) + term(est[0], ref[1]))
    return (straight, (0, 1)) if straight <= swapped else (swapped, (1, 0))


def suite_metrics(seed: int = 0, n_cases: int = 100) -> list[PropertyResult]:
    out = []
    rng = np.random.default_rng(seed)
    drift = 0.0
    for _ in range(n_cases):
        ref = rng.standard_normal(256)
        est = ref + 0.5 * rng.standard_normal(256)
        base = objective.si_sdr(est, ref)
        for c in (0.1, 1.0, 10.0):
            drift = max(drift, abs(objective.si_sdr(c * est, ref) - base))
    out.append(PropertyResult("metrics", "si_sdr_scale_invariance", drift < 1e-6, f"max drift {drift:.2e} dB"))

    perm_gap, clamp_ok, mismatches = 0.0, True, 0
    for _ in range(n_cases):
        ref = rng.standard_normal((2, 200))
        est = ref[rng.permutation(2)] + rng.uniform(0.01, 3.0) * rng.standard_normal((2, 200))
        with nx.no_grad():
            loss, perm = objective.upit_loss(est, ref)
            loss_sw, _ = objective.upit_loss(est[::-1].copy(), ref)
        perm_gap = max(perm_gap, abs(loss.item() - loss_sw.item()))
        clamp_ok &= loss.item() >= -30.0
        bf_loss, bf_perm = brute_force_upit(est, ref)
        mismatches += int(bf_perm != perm or abs(bf_loss - loss.item()) > 1e-9)
    out.append(PropertyResult("metrics", "upit_permutation_invariance", perm_gap < 1e-9, f"max gap {perm_gap:.2e}"))
    out.append(PropertyResult("metrics", "upit_matches_enumeration", mismatches == 0, f"{mismatches}/{n_cases} mismatches"))

    ref = rng.standard_normal((2, 200))
    with nx.no_grad():
        exact, _ = objective.upit_loss(ref, ref)
        swapped, p = objective.upit_loss(ref[::-1].copy(), ref)
    clamp_ok &= exact.item() == -30.0 and swapped.item() == -30.0 and p == (1, 0)
    out.append(PropertyResult("metrics", "loss_clamp", bool(clamp_ok), f"perfect estimate loss {exact.item():g}"))
    return out


# ---------------------------------------------------------------------------


def run_suite(name: str, seed: int = 0, **kw) -> list[PropertyResult]:
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, seed)]
    if name == "scan":
        return suite_scan(seed, **kw)
    if name == "grads":
        return suite_grads(seed, **kw)
    if name == "causality":
        return suite_causality(seed, **kw)
    if name == "metrics":
        return suite_metrics(seed, **kw)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")


def mutated_discretize(a, b, delta):
    """Discretisation with the sign of the exponent flipped (for mutation tests)."""
    _, Bb = _true_discretize(a, b, delta)
    return np.exp(-np.asarray(delta) * np.asarray(a)), Bb


_true_discretize = ssm.discretize


__all__ = [
    "PropertyResult",
    "SUITES",
    "run_suite",
    "scan_equivalence",
    "finite_difference_check",
    "causality_probe",
    "streaming_gap",
    "brute_force_upit",
    "mutated_discretize",
    "toy_config",
]
