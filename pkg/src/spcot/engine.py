"""Self-paced, self-consistent co-training loop.

Each iteration runs in two per-view phases around a barrier:

1. every view, on its own tape, computes its supervised loss, its student
   prediction on the unlabeled batch and its teacher/student consistency term;
2. the K unlabeled predictions are gathered and the self-paced co-training
   loss is evaluated once on detached copies, giving dL/dp_k for each view;
3. every view backpropagates ``sup_k/K + lambda2*reg_k/K + lambda1*<dL/dp_k, p_k>``
   through its own tape, takes an Adam step and updates its EMA teacher.

Step 3's surrogate has exactly the gradient of the joint total loss with
respect to each view's parameters, so views never share a tape and the serial
and threaded paths produce bit-identical parameters.
"""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import data as D
from . import losses as L
from . import metrics as M
from . import tensor as T
from .model import Transform, forward, init, soft_vote
from .schedules import AlphaSchedule, LrSchedule, PaceSchedule, alpha_at, ema_update, lr_at, pace_at

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("epoch", "gamma", "alpha", "lr", "sup", "spc", "reg", "entropy", "dsc", "hd")


class TrainingAborted(FloatingPointError):
    def __init__(self, iteration, last_finite):
        super().__init__(f"non-finite loss at iteration {iteration}; last finite losses {last_finite}")
        self.iteration = iteration
        self.last_finite = last_finite


@dataclass
class TrainConfig:
    K: int = 2
    epochs: int = 100
    iters_per_epoch: int = 50
    n_labeled: int = 2
    n_unlabeled: int = 4
    lambda1: float = 0.5
    lambda2: float = 4.0
    epsilon_floor: float = 0.01
    gamma0: float = 0.2
    pace_epochs: int = 50
    alpha_max: float = 1e-4
    alpha_ramp_epochs: int = 50
    beta: float = 0.99
    base_lr: float = 1e-2
    warmup_epochs: int = 10
    seed: int = 0
    enable_spc: bool = True
    enable_consistency: bool = True
    augment: bool = True
    parallel_views: bool = False

    def validate(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.enable_spc and self.K < 2:
            raise ValueError("enable_spc requires K >= 2")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if not 0 < self.epsilon_floor < 1:
            raise ValueError("epsilon_floor must be in (0,1)")
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be > 0")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must be in [0,1)")
        if self.epochs < 0 or self.iters_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and iters_per_epoch >= 1")
        if self.n_labeled < 1 or self.n_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        return self

    def schedules(self):
        return (
            PaceSchedule.for_views(self.gamma0, self.K, self.epsilon_floor, self.pace_epochs),
            AlphaSchedule(self.alpha_max, self.alpha_ramp_epochs),
            LrSchedule(self.base_lr, min(self.warmup_epochs, max(self.epochs - 1, 0)), max(self.epochs, 1)),
        )


CONFIG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}


def optimizer_step(params, grads, state, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam step on a dict of parameter Tensors."""
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise T.ShapeError(f"{name}: grad {g.shape} vs param {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(ensemble, images, use_teachers=True):
    nets = ensemble.teachers if use_teachers else ensemble.students
    with T.no_tape():
        return soft_vote([forward(n, images) for n in nets])


def evaluate(ensemble, ds, use_teachers=True, idx=None):
    """(mean DSC, mean HD) of the soft-voted argmax over the test split.

    HD is averaged over images where both masks are non-empty.
    """
    idx = ds.test if idx is None else np.asarray(idx)
    if len(idx) == 0:
        raise ValueError("test split is empty")
    seg = predict(ensemble, ds.images[idx], use_teachers).argmax(axis=1)
    truth = ds.labels[idx]
    dscs, hds = [], []
    for c in range(1, ds.n_classes):
        d, h, n_undef = M.mean_metrics(seg == c, truth == c)
        if n_undef:
            log.debug("class %d: Hausdorff undefined on %d images", c, n_undef)
        dscs.append(d)
        hds.append(h)
    return float(np.mean(dscs)), float(np.nanmean(hds)) if not np.all(np.isnan(hds)) else math.nan


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _rotate_each(arr, rs):
    return np.stack([np.rot90(a, r, axes=(-2, -1)) for a, r in zip(arr, rs)])


class _View:
    """Per-view mutable state; touched only by the thread stepping it."""

    def __init__(self, k, student, teacher, rng):
        self.k = k
        self.student = student
        self.teacher = teacher
        self.rng = rng
        self.adam = AdamState()
        self.tape = None
        self.p_u = None
        self.sup = None
        self.reg = None

    def phase1(self, cfg, xs, ys, xu):
        nl, nu = len(xs), len(xu)
        use_unlabeled = cfg.enable_spc or cfg.enable_consistency
        if cfg.augment:
            rs = self.rng.integers(4, size=nl)
            xs, ys = _rotate_each(xs, rs), _rotate_each(ys, rs)
        self.tape = T.Tape()
        self.p_u = self.reg = None
        with self.tape:
            if use_unlabeled:
                # this view's own rotation draw tau_k(x_u); one batched student pass
                ru = self.rng.integers(4, size=nu)
                probs = forward(self.student, np.concatenate([xs, _rotate_each(xu, ru)]))
                p_s = T.rows(probs, 0, nl)
                s_u = T.rows(probs, nl, nl + nu)
                self._ent_src = s_u.data
                if cfg.enable_consistency:
                    with T.no_tape():
                        t_pred = forward(self.teacher, xu).data
                    self.reg = L.consistency_loss(t_pred, s_u, lambda a: _rotate_each(a, ru))
                if cfg.enable_spc:
                    # back to the shared frame so views are compared pixel by pixel
                    self.p_u = T.rot90_each(s_u, [-r for r in ru])
            else:
                p_s = forward(self.student, xs)
                with T.no_tape():
                    self._ent_src = forward(self.student, xu).data
            self.sup = L.supervised_ce(p_s, ys)

    def entropy(self):
        return float(L.entropy(self._ent_src, axis=1).mean())

    def phase2(self, cfg, spc_grad, lr):
        k_inv = 1.0 / cfg.K
        with self.tape:
            loss = self.sup * k_inv
            if self.reg is not None:
                loss = loss + (cfg.lambda2 * k_inv) * self.reg
            if spc_grad is not None:
                loss = loss + cfg.lambda1 * T.sum_(T.Tensor(spc_grad) * self.p_u)
        self.student.zero_grad()
        self.tape.backward(loss)
        params = self.student.params
        optimizer_step(params, {n: p.grad for n, p in params.items()}, self.adam, lr)
        ema_update(self.teacher.params, params, cfg.beta)
        self.tape = None
        self.p_u = None


def _spc_step(views, cfg, gamma, alpha):
    leaves = [T.Tensor(v.p_u.data, requires_grad=True) for v in views]
    with T.Tape() as tape:
        loss, wmap, _ = L.spc_loss(leaves, gamma, alpha, cfg.epsilon_floor)
    tape.backward(loss)
    return loss.item(), [p.grad for p in leaves], wmap


def train(cfg, ds, checkpoint_dir=None, on_epoch=None):
    """Run co-training; returns (ensemble, list of record dicts)."""
    cfg.validate()
    ens = init(cfg.seed, ds.n_classes, cfg.K)
    records = []
    if cfg.epochs == 0:
        return ens, records
    pace, alpha_s, lr_s = cfg.schedules()
    sampler = D.BatchSampler(ds, [cfg.seed, 1])
    views = [
        _View(k, ens.students[k], ens.teachers[k], np.random.default_rng([cfg.seed, 2, k]))
        for k in range(cfg.K)
    ]
    pool = ThreadPoolExecutor(max_workers=cfg.K) if cfg.parallel_views and cfg.K > 1 else None

    def each(fn):
        if pool is None:
            return [fn(v) for v in views]
        return list(pool.map(fn, views))

    it_global = 0
    last_finite = None
    try:
        for epoch in range(cfg.epochs):
            gamma, alpha, lr = pace_at(pace, epoch), alpha_at(alpha_s, epoch), lr_at(lr_s, epoch)
            acc = np.zeros(4)
            for _ in range(cfg.iters_per_epoch):
                (xs, ys), xu = D.sample_batch(ds, sampler, cfg.n_labeled, cfg.n_unlabeled)
                each(lambda v: v.phase1(cfg, xs, ys, xu))
                sup = sum(v.sup.item() for v in views) / cfg.K
                reg = sum(v.reg.item() for v in views) / cfg.K if cfg.enable_consistency else 0.0
                spc, grads = 0.0, [None] * cfg.K
                if cfg.enable_spc:
                    spc, grads, _ = _spc_step(views, cfg, gamma, alpha)
                ent = sum(v.entropy() for v in views) / cfg.K
                vals = (sup, spc, reg, ent)
                if not all(math.isfinite(x) for x in vals):
                    raise TrainingAborted(it_global, last_finite)
                last_finite = dict(zip(("sup", "spc", "reg"), vals[:3]))
                acc += vals
                each(lambda v: v.phase2(cfg, grads[v.k], lr))
                for t in ens.teachers:
                    assert all(p.grad is None for p in t.params.values())
                it_global += 1
            acc /= cfg.iters_per_epoch
            dsc, hd = evaluate(ens, ds, use_teachers=True)
            row = dict(zip(RECORD_COLUMNS, (epoch, gamma, alpha, lr, *acc, dsc, hd)))
            records.append(row)
            log.info("epoch %d sup=%.4f spc=%.4f reg=%.5f dsc=%.4f", epoch, acc[0], acc[1], acc[2], dsc)
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_dir is not None:
        save_checkpoint(ens, checkpoint_dir, cfg.epochs)
    return ens, records


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_record(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([_fmt(r[c]) for c in RECORD_COLUMNS])


def save_checkpoint(ens, out_dir, epoch):
    os.makedirs(out_dir, exist_ok=True)
    entries, views, roles = [], [], []
    for role, nets in (("student", ens.students), ("teacher", ens.teachers)):
        for k, net in enumerate(nets):
            for name, p in net.params.items():
                entries.append((f"{role}{k}.{name}", p.data))
                views.append(k)
                roles.append(role)
    D.save(
        os.path.join(out_dir, "checkpoint.spct"),
        entries,
        {"view": views, "role": roles, "epoch": [epoch] * len(entries)},
    )


def load_checkpoint(path, n_classes=2):
    """Rebuild a ViewEnsemble from ``checkpoint.spct`` (+ manifest)."""
    from .model import SegNetTiny, ViewEnsemble

    named = D.load(path)
    nets = {}
    for key, arr in named.items():
        head, pname = key.split(".", 1)
        nets.setdefault(head, {})[pname] = T.Tensor(arr.astype(np.float64), head.startswith("student"))
    k = sum(1 for h in nets if h.startswith("student"))
    students = [SegNetTiny(nets[f"student{i}"], n_classes) for i in range(k)]
    teachers = [SegNetTiny(nets[f"teacher{i}"], n_classes) for i in range(k)]
    return ViewEnsemble(students, teachers, 0, list(range(k)))


def config_dict(cfg):
    return asdict(cfg)
