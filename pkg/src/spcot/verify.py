"""Numerical certification of the self-paced weight and generalized-JSD results.

Every check pits the library routine against an independent brute-force or
straight-line oracle and reports the worst error it saw.  Checks are
deterministic per seed.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .model import SegNetTiny, Transform, forward

ALPHA_GRID = (0.0, 0.1, 0.5, 1.0)


@dataclass
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    passed: bool

    @classmethod
    def from_error(cls, name, cases, max_error, tolerance, extra_ok=True):
        return cls(name, cases, float(max_error), tolerance, bool(max_error <= tolerance and extra_ok))


def _simplex(rng, k, c):
    p = rng.dirichlet(np.ones(c), size=k)
    return np.clip(p, 1e-9, None) / np.clip(p, 1e-9, None).sum(axis=1, keepdims=True)


def _kl_rows(p, q):
    # straight-line KL for rows of p against a single distribution q
    return np.sum(p * np.log(p / q), axis=-1)


# ---------------------------------------------------------------------------
# optimal weights
# ---------------------------------------------------------------------------


def sp_objective(w, kl, gamma):
    """(gamma/2) w^2 + (kl - gamma) w, the per-pixel weight subproblem."""
    return 0.5 * gamma * w * w + (kl - gamma) * w


def linear_sp_weight(kl, gamma):
    """Minimizer of kl*w - gamma*w over [0,1]: the binary selection rule."""
    return np.where(np.asarray(kl) <= gamma, 1.0, 0.0)


def check_theorem1(seed=0, cases=1000, probes=10000, tol=1e-9):
    """Closed-form weight vs random probes and the stationarity condition."""
    if cases < 1:
        raise ValueError("cases must be >= 1")
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(0.01, 8.0, size=cases)
    kl = rng.uniform(0.0, 10.0, size=cases)
    # half the cases land inside the interior branch
    kl[::2] = rng.uniform(0.0, 1.0, size=len(kl[::2])) * gamma[::2]
    w_star = np.array([L.self_paced_weight(k, g, 0.0) for k, g in zip(kl, gamma)])
    f_star = sp_objective(w_star, kl, gamma)
    worst = 0.0
    for start in range(0, cases, 100):
        sl = slice(start, start + 100)
        w = rng.uniform(0.0, 1.0, size=(len(w_star[sl]), probes))
        f = sp_objective(w, kl[sl, None], gamma[sl, None])
        worst = max(worst, float(np.max(f_star[sl] - f.min(axis=1))))
    interior = kl < gamma
    station = np.abs(gamma * w_star + kl - gamma)[interior]
    worst = max(worst, float(station.max()) if station.size else 0.0)
    # contrast: the linear regularizer gives the binary rule
    lin = linear_sp_weight(kl, gamma)
    lin_ok = np.all(kl * lin - gamma * lin <= np.minimum(0.0, kl - gamma) + 1e-12)
    return CheckResult.from_error("theorem1_weights", cases, max(worst, 0.0), tol, lin_ok)


# ---------------------------------------------------------------------------
# pseudo-labels and the JSD identity
# ---------------------------------------------------------------------------


def _random_case(rng, eps=0.01):
    k = int(rng.choice([2, 3, 5]))
    c = int(rng.choice([2, 4]))
    p = _simplex(rng, k, c)
    w = rng.uniform(eps, 1.0, size=k)
    return p, w


def weighted_kl_sum(p, w, y):
    return float(np.sum(w * _kl_rows(p, y)))


def check_theorem2(seed=0, cases=1000, tol=1e-9):
    """sum_k w_k KL(p_k || y*) == rho * JSD_pi(p) with y* the pi-mixture."""
    if cases < 1:
        raise ValueError("cases must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        p, w = _random_case(rng)
        rho = w.sum()
        pi = w / rho
        y_star = (w[:, None] * p).sum(axis=0) / rho
        lhs = weighted_kl_sum(p, w, y_star)
        rhs = rho * L.generalized_jsd_alpha(list(p), pi, 0.0).item()
        worst = max(worst, abs(lhs - rhs))
    return CheckResult.from_error("theorem2_jsd_identity", cases, worst, tol)


def check_pseudo_label_optimality(seed=0, cases=200, probes=1000, slack=1e-12):
    """No random simplex point beats the weighted-mixture pseudo-label."""
    if probes < 100:
        raise ValueError("probes must be >= 100")
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(cases):
        p, w = _random_case(rng)
        y_star = (w[:, None] * p).sum(axis=0) / w.sum()
        best = weighted_kl_sum(p, w, y_star)
        ys = np.clip(rng.dirichlet(np.ones(p.shape[1]), size=probes), 1e-300, None)
        # [probes, K] KL table
        obj = np.sum(w * np.sum(p[None] * np.log(p[None] / ys[:, None, :]), axis=-1), axis=1)
        worst = max(worst, best - float(obj.min()))
    return CheckResult.from_error("pseudo_label_optimality", cases, max(worst, 0.0), slack)


def pace_bound_error(seed=0, cases=1000, eps=0.01):
    """Worst excess of KL(p_k || mixture) over -ln pi_k, and whether any
    self-paced weight at the pace ceiling landed on the floor."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    floor_hit = False
    for _ in range(cases):
        p, w = _random_case(rng, eps)
        pi = w / w.sum()
        mix = (pi[:, None] * p).sum(axis=0)
        worst = max(worst, float(np.max(_kl_rows(p, mix) + np.log(pi))))
        wmap, _ = L.mixture_weights(list(p), np.log(len(p) / eps), eps, axis=-1)
        floor_hit |= bool(np.any(wmap.w <= eps))
    return max(worst, 0.0), floor_hit


def alpha_monotone_error(seed=0, cases=1000):
    """Worst negativity or decrease of JSD^alpha along ALPHA_GRID."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        p, w = _random_case(rng)
        vals = [L.generalized_jsd_alpha(list(p), w / w.sum(), a).item() for a in ALPHA_GRID]
        worst = max(worst, -min(vals), max(vals[i] - vals[i + 1] for i in range(len(vals) - 1)))
    return worst


def check_bound_and_alpha(seed=0, cases=1000, slack=1e-12, eps=0.01):
    """KL(p_k || mixture) <= -ln pi_k; JSD^alpha >= 0 and nondecreasing in alpha;
    at the pace ceiling no self-paced weight sits on the floor."""
    if cases < 1:
        raise ValueError("cases must be >= 1")
    bound, floor_hit = pace_bound_error(seed, cases, eps)
    worst = max(bound, alpha_monotone_error(seed + 1, cases))
    return CheckResult.from_error("pace_bound_and_alpha", cases, worst, slack, not floor_hit)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def tape_grad(f, x):
    """Gradient of scalar Tensor-valued f at array x via the tape."""
    leaf = T.Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        out = f(leaf)
    tape.backward(out)
    return out.item(), leaf.grad


def _softmax(z):
    e = np.exp(z - z.max(axis=-3, keepdims=True))
    return e / e.sum(axis=-3, keepdims=True)


def gradient_errors(seed=0, hw=6, flip_sign=False):
    """Relative FD errors for each differentiable loss plus the detachment gap."""
    rng = np.random.default_rng(seed)
    c = 2
    sign = -1.0 if flip_sign else 1.0
    errs = {}

    def grad_pair(f_tensor, x):
        _, g = tape_grad(f_tensor, x)
        return sign * g, numeric_grad(lambda v: f_tensor(T.Tensor(v)).item(), x)

    # toy quadratic
    x0 = rng.normal(size=5)
    errs["quadratic"] = rel_error(*grad_pair(lambda t: T.sum_(t * t), x0))

    labels = rng.integers(c, size=(hw, hw))
    y = np.moveaxis(np.eye(c)[labels], -1, 0)
    z = rng.normal(size=(c, hw, hw))
    errs["supervised_ce"] = rel_error(*grad_pair(lambda t: L.supervised_ce(T.softmax_channels(t), y), z))

    z2 = rng.normal(size=(c, hw, hw))
    gamma, alpha = 0.7, 0.3

    def spc_of(t):
        return L.spc_loss([T.softmax_channels(t), T.Tensor(_softmax(z2))], gamma, alpha)[0]

    # weights are constants: compare against FD with pi and rho frozen at z
    _, wstats = L.mixture_weights([_softmax(z), _softmax(z2)], gamma)

    def frozen(t):
        jsd = L._jsd_alpha_t([T.softmax_channels(t), T.Tensor(_softmax(z2))], list(wstats.pi), alpha, -3)
        return T.mean(T.Tensor(wstats.rho) * jsd)

    g_spc = sign * tape_grad(spc_of, z)[1]
    g_frozen = tape_grad(frozen, z)[1]
    fd_frozen = numeric_grad(lambda v: frozen(T.Tensor(v)).item(), z)
    errs["spc_loss"] = rel_error(g_spc, fd_frozen)
    # the tape must carry no path through the weights: bitwise equal to frozen
    errs["spc_detached_weights"] = float(np.max(np.abs(g_spc - sign * g_frozen)))

    tau = Transform(1)
    teacher = _softmax(rng.normal(size=(c, hw, hw)))
    errs["consistency_loss"] = rel_error(
        *grad_pair(lambda t: L.consistency_loss(teacher, T.softmax_channels(t), tau), z)
    )

    # composite: network parameters -> total loss
    net = SegNetTiny.initialize(rng, c)
    img = rng.uniform(size=(1, hw, hw))
    other = _softmax(rng.normal(size=(c, hw, hw)))
    names = list(net.params)
    base_p = forward(net, img).data
    _, comp_stats = L.mixture_weights([base_p, other], gamma)

    def composite(m, frozen_stats=None):
        p = forward(m, img)
        p_rot = forward(m, tau(img))
        if frozen_stats is None:
            spc = L.spc_loss([p, T.Tensor(other)], gamma, alpha)[0]
        else:
            jsd = L._jsd_alpha_t([p, T.Tensor(other)], list(frozen_stats.pi), alpha, -3)
            spc = T.mean(T.Tensor(frozen_stats.rho) * jsd)
        return L.total_loss(L.supervised_ce(p, y), spc, L.consistency_loss(teacher, p_rot, tau), 0.5, 4.0)

    with T.Tape() as tape:
        loss = composite(net)
    tape.backward(loss)
    g_an = np.concatenate([net.params[n].grad.ravel() for n in names])
    theta = np.concatenate([net.params[n].data.ravel() for n in names])

    # FD through the composite would also move the weights; evaluate with the
    # base-point weights, which is what the tape differentiates.
    def total_frozen(vec):
        params, off = {}, 0
        for n in names:
            shape = net.params[n].shape
            size = int(np.prod(shape))
            params[n] = T.Tensor(vec[off:off + size].reshape(shape))
            off += size
        with T.no_tape():
            return composite(SegNetTiny(params, c), comp_stats).item()

    errs["composite"] = rel_error(sign * g_an, numeric_grad(total_frozen, theta))
    return errs


GRAD_TOL = 1e-4


def check_gradients(seed=0, flip_sign=False):
    errs = gradient_errors(seed, flip_sign=flip_sign)
    worst = max(v for k, v in errs.items() if k != "spc_detached_weights")
    detached_ok = errs["spc_detached_weights"] == 0.0
    return CheckResult.from_error("gradients", len(errs), worst, GRAD_TOL, detached_ok)


def run_all(seed=0, cases=1000, flip_sign=False):
    if cases < 1:
        raise ValueError("cases must be >= 1")
    return [
        check_theorem1(seed, cases),
        check_theorem2(seed, cases),
        check_pseudo_label_optimality(seed, max(1, cases // 5), 1000),
        check_bound_and_alpha(seed, cases),
        check_gradients(seed, flip_sign),
    ]


def write_report(results, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(["name", "cases", "max_error", "tolerance", "passed"])
        for r in results:
            w.writerow([r.name, r.cases, repr(r.max_error), repr(r.tolerance), str(r.passed).lower()])
