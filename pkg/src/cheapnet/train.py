"""SGD training for the scratch, dark-knowledge, attention-transfer and online-distillation schemes."""
import contextlib
import csv
import io
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import distill
from .data import batches
from .distill import LossConfig
from .model import TeacherHead, instantiate
from .tensor import no_grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    base_lr: float = 0.1
    lr_drop_factor: float = 10.0
    drop_points: tuple = (0.5, 0.75)
    weight_decay: float = 2e-4
    momentum: float = 0.9
    seed: int = 0
    augment: bool = False
    val_frac: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        object.__setattr__(self, "drop_points", tuple(float(d) for d in self.drop_points))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("base_lr and lr_drop_factor must be > 0")
        d = self.drop_points
        if any(not 0 < x < 1 for x in d) or any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"drop_points must be strictly increasing fractions in (0, 1), got {d}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay must be >= 0 and momentum in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["drop_points"] = list(self.drop_points)
        return d


# The full-length CIFAR recipe; desk-scale runs use the TrainConfig defaults.
CIFAR_RECIPE = TrainConfig(epochs=300, batch_size=128)


def lr_at_epoch(cfg, epoch):
    """Step schedule: divide by ``lr_drop_factor`` at each drop point (fraction of total epochs)."""
    drops = sum(epoch >= frac * cfg.epochs for frac in cfg.drop_points)
    return cfg.base_lr / cfg.lr_drop_factor**drops


def sgd_step(params, cfg, lr):
    """Momentum SGD with L2 decay folded into the gradient: ``v = mu*v + g + wd*w; w -= lr*v``."""
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name or p.shape}")
        g = g + cfg.weight_decay * p.data if cfg.weight_decay else g
        if p.momentum_buf is None:
            p.momentum_buf = np.zeros_like(p.data)
        p.momentum_buf *= cfg.momentum
        p.momentum_buf += g
        p.data -= lr * p.momentum_buf


# -- metrics ---------------------------------------------------------------
class RunMetrics:
    """One row per epoch with a header fixed by the number of students and the teacher."""

    def __init__(self, students, teacher=False):
        self.students = students
        self.teacher = teacher
        self.rows = []

    @property
    def header(self):
        cols = ["epoch", "lr", "loss"]
        for i in range(self.students):
            cols += [f"s{i}_train_loss", f"s{i}_train_err", f"s{i}_val_err"]
        if self.teacher:
            cols += ["teacher_train_loss", "teacher_train_err", "teacher_val_err"]
        cols.append("argmax_invariant")
        return cols

    def append(self, row):
        missing = set(self.header) - set(row)
        if missing:
            raise KeyError(f"metrics row lacks {sorted(missing)}")
        self.rows.append({k: row[k] for k in self.header})

    def column(self, name):
        return [r[name] for r in self.rows]

    def final_val_errors(self):
        last = self.rows[-1]
        return [last[f"s{i}_val_err"] for i in range(self.students)]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in self.header])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return f"{float(v):.6f}"


def select_best_student(val_errors):
    """Index of the lowest validation error; ties go to the lowest index."""
    if len(val_errors) == 0:
        raise ValueError("no students to select from")
    return int(np.argmin(np.asarray(val_errors, dtype=float)))


# -- evaluation ------------------------------------------------------------
def _predict(forward, dataset, batch_size):
    preds = []
    with no_grad():
        for x, _ in batches(dataset, batch_size, shuffle=False):
            preds.append(np.argmax(forward(x), axis=1))
    return np.concatenate(preds) if preds else np.array([], dtype=np.intp)


def evaluate(net, dataset, batch_size=256):
    """Top-1 error (%) with BN in inference mode."""
    was = net.training
    net.eval()
    try:
        pred = _predict(lambda x: net(x).logits.data, dataset, batch_size)
    finally:
        net.train(was)
    return 100.0 * float(np.mean(pred != dataset.labels)) if len(dataset) else 0.0


def evaluate_teacher(students, head, dataset, batch_size=256):
    """Top-1 error (%) of the online teacher formed from ``students``."""
    mods = list(students) + [head]
    modes = [m.training for m in mods]
    for m in mods:
        m.eval()
    try:
        pred = _predict(lambda x: head([s(x).features for s in students]).data, dataset, batch_size)
    finally:
        for m, was in zip(mods, modes):
            m.train(was)
    return 100.0 * float(np.mean(pred != dataset.labels)) if len(dataset) else 0.0


# -- training --------------------------------------------------------------
@dataclass
class TrainResult:
    metrics: RunMetrics
    checkpoints: dict  # name -> state dict
    best: int

    @property
    def best_val_err(self):
        return self.metrics.final_val_errors()[self.best]

    @property
    def teacher_val_err(self):
        return self.metrics.rows[-1].get("teacher_val_err") if self.metrics.teacher else None


def _check_scheme(students, cfg, teacher, head, classes):
    scheme = cfg.loss.scheme
    if not students:
        raise ValueError("need at least one student network")
    for s in students:
        if s.arch.head.classes != classes:
            raise ValueError(f"model predicts {s.arch.head.classes} classes but data has {classes}")
    if scheme in ("dk", "at") and teacher is None:
        raise ValueError(f"scheme {scheme!r} needs a pre-trained teacher network")
    if scheme in ("dk", "at") and len(students) != 1:
        raise ValueError(f"scheme {scheme!r} trains exactly one student")
    if scheme == "od":
        if head is None:
            raise ValueError("scheme 'od' needs a teacher head")
        if len(students) != cfg.loss.branches:
            raise ValueError(f"od expects {cfg.loss.branches} branches, got {len(students)}")


def _errors(logits, y):
    return int(np.sum(np.argmax(logits, axis=1) != y))


def deterministic_mode(enabled=True):
    """Pin BLAS/OpenMP pools to one thread so reductions happen in a fixed order."""
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


def train(students, train_set, val_set, cfg, teacher=None, head=None, deterministic=True, log=None):
    """Train ``students`` (and the OD ``head``) with SGD; returns a :class:`TrainResult`.

    ``teacher`` is a frozen pre-trained network used by the ``dk`` and ``at``
    schemes.  Batch order depends only on ``cfg.seed`` and the epoch.
    """
    students = list(students)
    _check_scheme(students, cfg, teacher, head, train_set.classes)
    lc = cfg.loss
    od = lc.scheme == "od"
    m = len(students)
    params = [p for s in students for p in s.parameters()]
    if od:
        params += head.parameters()
    for p in params:
        p.momentum_buf = None
    if teacher is not None:
        teacher.eval()
    metrics = RunMetrics(m, teacher=od)

    with deterministic_mode(deterministic):
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for s in students:
                s.train()
            if od:
                head.train()
            sums = np.zeros(m + 1)
            errs = np.zeros(m + 1, dtype=np.int64)
            total, seen = 0.0, 0
            invariant = True
            for x, y in batches(train_set, cfg.batch_size, cfg.seed, epoch, augment=cfg.augment):
                n = len(y)
                outs = [s(x) for s in students]
                logits = [o.logits for o in outs]
                if od:
                    a_t = head([o.features for o in outs])
                    loss = distill.od_loss(y, logits, a_t, lc.temperature, lc.stop_gradient)
                    sums[m] += distill.ce_logits(y, a_t.detach()).item() * n
                    errs[m] += _errors(a_t.data, y)
                elif lc.scheme == "dk":
                    with no_grad():
                        a_t = teacher(x).logits
                    loss = distill.dk_loss(y, logits[0], a_t, lc.temperature)
                elif lc.scheme == "at":
                    with no_grad():
                        t_maps = teacher(x).stage_maps
                    loss = distill.at_loss(y, logits[0], outs[0].stage_maps, t_maps, lc.at_weight)
                else:
                    loss = None
                    for a in logits:
                        ce = distill.ce_logits(y, a)
                        loss = ce if loss is None else loss + ce
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(f"loss became {value} at epoch {epoch}")
                for i, a in enumerate(logits):
                    sums[i] += distill.ce_logits(y, a.detach()).item() * n
                    errs[i] += _errors(a.data, y)
                    # evaluated in float64 so that distinct float32 logits stay distinct after /T
                    soft = distill.softened_softmax(a.data.astype(np.float64), lc.temperature).data
                    invariant &= bool(np.array_equal(np.argmax(soft, 1), np.argmax(a.data, 1)))
                total += value * n
                seen += n
                for p in params:
                    p.zero_grad()
                loss.backward()
                sgd_step(params, cfg, lr)

            row = {"epoch": epoch, "lr": lr, "loss": total / seen, "argmax_invariant": invariant}
            for i, s in enumerate(students):
                row[f"s{i}_train_loss"] = sums[i] / seen
                row[f"s{i}_train_err"] = 100.0 * errs[i] / seen
                row[f"s{i}_val_err"] = evaluate(s, val_set)
            if od:
                row["teacher_train_loss"] = sums[m] / seen
                row["teacher_train_err"] = 100.0 * errs[m] / seen
                row["teacher_val_err"] = evaluate_teacher(students, head, val_set)
            metrics.append(row)
            if log is not None:
                log(row)

    checkpoints = {f"student{i}": s.state_dict() for i, s in enumerate(students)}
    if od:
        checkpoints["teacher_head"] = head.state_dict()
    best = select_best_student(metrics.final_val_errors())
    return TrainResult(metrics, checkpoints, best)


# -- checkpoints -------------------------------------------------------------
MAGIC = b"CHPNET"
VERSION = 1


def save_checkpoint(path, state):
    """Write named tensors: magic, version, count, then (name, shape, f32 LE payload) records."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (klen,) = take("<H")
        name = bytes(take(f"<{klen}s")[0]).decode("utf-8")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        state[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return state


def load_into(module, state, prefix=""):
    """Load a (possibly prefixed) checkpoint into ``module`` with dtype conversion."""
    sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    dtype = next(iter(module.parameters())).dtype
    module.load_state_dict({k: v.astype(dtype) for k, v in sub.items()})
    return module


def build_students(arch, branches, seed, dtype=np.float32):
    """``branches`` independently initialised copies of ``arch``; branch i uses seed ``[seed, i]``.

    Branch 0 therefore starts from exactly the weights a single scratch run with
    the same seed would use.
    """
    return [instantiate(arch, seed=[seed, i], dtype=dtype) for i in range(branches)]


def build_teacher_head(students, seed, dtype=np.float32):
    s = students[0]
    return TeacherHead(s.feature_channels, len(students), s.arch.head.classes, seed=[seed, 1000], dtype=dtype)


def run(arch, train_set, val_set, cfg, teacher=None, deterministic=True, log=None, dtype=np.float32):
    """Build the networks a scheme needs from ``arch`` and train them."""
    m = cfg.loss.branches if cfg.loss.scheme == "od" else 1
    students = build_students(arch, m, cfg.seed, dtype)
    head = build_teacher_head(students, cfg.seed, dtype) if cfg.loss.scheme == "od" else None
    result = train(students, train_set, val_set, cfg, teacher=teacher, head=head,
                   deterministic=deterministic, log=log)
    return result, students, head


def with_loss(cfg, **kw):
    return replace(cfg, loss=replace(cfg.loss, **kw))
