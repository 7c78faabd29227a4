"""Desk-scale self-distillation on synthetic hypersphere clusters.

The "backbone" is a single affine map R^d_in -> R^p followed by
L2-normalization and the prototype head. Student and teacher share that
architecture; only the student receives gradients (plain SGD) and the
teacher tracks it by EMA.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from vmfdino import kernels
from vmfdino.errors import DimensionError, DivergenceError, DomainError
from vmfdino.head import (
    MODES,
    VARIANTS,
    CenterState,
    PrototypeBank,
    Temperatures,
    center_statistics,
    ema_update,
    loss_and_grads,
    softmax,
    teacher_logits,
    update_center,
)
from vmfdino.movmf import MixtureModel, random_separated_directions, sample_mixture
from vmfdino.vmf import normalize


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDataset:
    points: np.ndarray
    labels: np.ndarray
    directions: np.ndarray
    kappa: float
    noise: float
    seed: int

    @property
    def n_classes(self) -> int:
        return self.directions.shape[0]

    @property
    def d_in(self) -> int:
        return self.points.shape[1]

    def split(self, test_fraction: float = 0.2):
        """(train_x, train_y, test_x, test_y); points are iid so the tail is held out."""
        n_test = int(round(test_fraction * len(self.labels)))
        cut = len(self.labels) - n_test
        return self.points[:cut], self.labels[:cut], self.points[cut:], self.labels[cut:]


def generate_dataset(K_true=4, d_in=16, n=2000, kappa_true=60.0, noise=0.0, seed=0, max_cos=0.3):
    """Equal-weight movMF in R^d_in with well-separated means, plus Gaussian noise."""
    if K_true < 2:
        raise DomainError("need at least two true clusters")
    rng = np.random.default_rng(seed)
    dirs = random_separated_directions(K_true, d_in, max_cos, rng)
    model = MixtureModel.from_arrays(dirs, [kappa_true] * K_true, np.full(K_true, 1.0 / K_true))
    pts, labels = sample_mixture(model, n, rng)
    if noise > 0:
        pts = pts + noise * rng.standard_normal(pts.shape)
    return SyntheticDataset(pts, labels, dirs, float(kappa_true), float(noise), int(seed))


def augment(x, sigma: float, seed=None):
    """Two views of ``x`` (a vector or a batch) with independent Gaussian noise."""
    if sigma < 0:
        raise DomainError("augmentation scale must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy(), x.copy()
    rng = np.random.default_rng(seed)
    return x + sigma * rng.standard_normal(x.shape), x + sigma * rng.standard_normal(x.shape)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderParams:
    weight: np.ndarray  # (p, d_in)
    bias: np.ndarray  # (p,)
    bank: PrototypeBank

    def __post_init__(self):
        p = self.weight.shape[0]
        if p < 4 or p % 2:
            raise DomainError(f"projection dimension must be even and >= 4, got {p}")
        if self.bias.shape != (p,) or self.bank.dim != p:
            raise DimensionError("encoder and prototype dimensions disagree")

    @property
    def proj_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def project(self, x):
        return np.asarray(x) @ self.weight.T + self.bias

    def represent(self, x):
        return normalize(self.project(x))

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.weight.ravel(), self.bias, self.bank.directions.ravel(), self.bank.log_magnitudes]
        )

    def with_flat(self, theta) -> "EncoderParams":
        p, d = self.weight.shape
        k = self.bank.n_prototypes
        i = 0
        w = theta[i : i + p * d].reshape(p, d)
        i += p * d
        b = theta[i : i + p]
        i += p
        v = theta[i : i + k * p].reshape(k, p)
        i += k * p
        lg = theta[i : i + k]
        if self.bank.l2_normalized:
            lg = np.zeros(k)
        bank = PrototypeBank(normalize(v), lg, self.bank.l2_normalized)
        return EncoderParams(w.copy(), b.copy(), bank)

    @classmethod
    def init(cls, d_in, p, k, rng, l2_normalized=False, log_magnitude=0.0):
        w = rng.standard_normal((p, d_in)) / math.sqrt(d_in)
        b = np.zeros(p)
        return cls(w, b, PrototypeBank.random(k, p, rng, l2_normalized, log_magnitude))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "vmf"
    center_variant: str = "probability"
    l2_normalize_prototypes: bool = False
    n_prototypes: int = 32
    proj_dim: int = 8
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_warmup_steps: int = 100
    ema_start: float = 0.996
    ema_end: float = 0.996
    center_momentum: float = 0.9
    batch_size: int = 64
    steps: int = 2000
    lr: float = 0.5
    seed: int = 0
    aug_sigma: float = 0.1
    init_log_magnitude: float = 0.0
    knn_k: int = 10
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}")
        if self.center_variant not in VARIANTS:
            raise DomainError(f"center_variant must be one of {VARIANTS}")
        if self.proj_dim < 4 or self.proj_dim % 2:
            raise DomainError("proj_dim must be even and >= 4")
        for name in ("n_prototypes", "batch_size", "knn_k"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.steps < 0 or self.tau_t_warmup_steps < 0:
            raise DomainError("step counts must be >= 0")
        if not (0 <= self.ema_start <= 1 and 0 <= self.ema_end <= 1):
            raise DomainError("EMA coefficients must lie in [0, 1]")
        if not 0 < self.center_momentum < 1:
            raise DomainError("center_momentum must lie in (0, 1)")
        Temperatures(self.tau_s, self.tau_t_start)
        Temperatures(self.tau_s, self.tau_t_end)
        if self.aug_sigma < 0 or self.lr <= 0:
            raise DomainError("aug_sigma must be >= 0 and lr > 0")
        if not 0 < self.test_fraction < 1:
            raise DomainError("test_fraction must lie in (0, 1)")

    def tau_t(self, step: int) -> float:
        if self.tau_t_warmup_steps == 0 or step >= self.tau_t_warmup_steps:
            return self.tau_t_end
        frac = step / self.tau_t_warmup_steps
        return self.tau_t_start + frac * (self.tau_t_end - self.tau_t_start)

    def ema(self, step: int) -> float:
        # cosine ramp from ema_start to ema_end
        if self.steps <= 1:
            return self.ema_start
        frac = step / (self.steps - 1)
        return self.ema_end - (self.ema_end - self.ema_start) * (math.cos(math.pi * frac) + 1.0) / 2.0

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _entropy(p, axis=-1):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis)


def collapse_metrics(teacher_probs):
    """(entropy of the batch-mean distribution, mean per-row entropy)."""
    p = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    if p.ndim != 2 or p.shape[0] == 0:
        raise DimensionError("expected a non-empty (B, K) probability matrix")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or np.abs(p.sum(axis=1) - 1.0).max() > 1e-9:
        raise DomainError("rows must be probability vectors")
    return float(_entropy(p.mean(axis=0))), float(_entropy(p, axis=1).mean())


def is_collapsed(marginal_entropy, n_prototypes, fraction=0.5):
    """Collapse detector: the teacher uses less than ``fraction`` of log K nats."""
    return marginal_entropy < fraction * math.log(n_prototypes)


METRIC_COLUMNS = ("step", "loss", "marginal_entropy", "conditional_entropy", "center_norm", "tau_t")


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(tuple(row[c] for c in METRIC_COLUMNS))

    def column(self, name):
        i = METRIC_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [format_float(x) for x in r[1:]])
        return buf.getvalue()


def format_float(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    student: EncoderParams
    teacher: EncoderParams
    center: CenterState
    metrics: MetricsLog
    config: TrainConfig
    collapsed: bool = False


def _sgd_step(params: EncoderParams, x, grads, lr):
    grad_w = grads.grad_z.T @ x
    grad_b = grads.grad_z.sum(axis=0)
    bank = params.bank
    v = normalize(bank.directions - lr * grads.grad_directions)
    lg = bank.log_magnitudes
    if not bank.l2_normalized:
        lg = lg - lr * grads.grad_magnitudes * bank.magnitudes
    return EncoderParams(
        params.weight - lr * grad_w,
        params.bias - lr * grad_b,
        PrototypeBank(v, lg, bank.l2_normalized),
    )


def distill_step(student, teacher, center, x, config: TrainConfig, step: int, rng):
    """One symmetrized student/teacher update on a batch of raw inputs ``x``."""
    tau_t = config.tau_t(step)
    temps = Temperatures(config.tau_s, tau_t)
    mode = config.mode
    view_a, view_b = augment(x, config.aug_sigma, rng)

    yt_a = teacher.represent(view_a)
    yt_b = teacher.represent(view_b)
    pt_a = softmax(teacher_logits(yt_a, teacher.bank, center, tau_t, mode, strict=False))
    pt_b = softmax(teacher_logits(yt_b, teacher.bank, center, tau_t, mode, strict=False))

    # student on view a learns teacher on view b and vice versa
    xs = np.concatenate([view_a, view_b])
    zs = student.project(xs)
    pt = np.concatenate([pt_b, pt_a])
    grads = loss_and_grads(zs, None, student.bank, teacher.bank, center, temps, mode, strict=False, p_t=pt)
    if not math.isfinite(grads.loss):
        raise DivergenceError(f"non-finite loss at step {step}", step=step)

    new_student = _sgd_step(student, xs, grads, config.lr)
    lam = config.ema(step)
    new_teacher = teacher.with_flat(ema_update(teacher.flat(), new_student.flat(), lam))

    stats = center_statistics(np.concatenate([yt_a, yt_b]), teacher.bank, tau_t, mode, config.center_variant)
    new_center = update_center(center, stats)
    h_marg, h_cond = collapse_metrics(pt)
    row = dict(
        step=step,
        loss=grads.loss,
        marginal_entropy=h_marg,
        conditional_entropy=h_cond,
        center_norm=float(np.linalg.norm(new_center.c)),
        tau_t=tau_t,
    )
    return new_student, new_teacher, new_center, row


def train(config: TrainConfig, dataset: SyntheticDataset, init=None) -> TrainResult:
    """Run the self-distillation loop; a pure function of (config, dataset)."""
    rng = np.random.default_rng(config.seed)
    train_x, _, _, _ = dataset.split(config.test_fraction)
    if init is None:
        student = EncoderParams.init(
            dataset.d_in,
            config.proj_dim,
            config.n_prototypes,
            rng,
            config.l2_normalize_prototypes,
            0.0 if config.l2_normalize_prototypes else config.init_log_magnitude,
        )
    else:
        student = init
    teacher = student
    center = CenterState.zeros(config.n_prototypes, config.center_momentum, config.center_variant)
    log = MetricsLog()
    n = train_x.shape[0]
    bs = min(config.batch_size, n)
    collapsed = False
    for step in range(config.steps):
        idx = rng.choice(n, size=bs, replace=False)
        student, teacher, center, row = distill_step(student, teacher, center, train_x[idx], config, step, rng)
        for key in ("loss", "marginal_entropy", "conditional_entropy", "center_norm"):
            if not math.isfinite(row[key]):
                raise DivergenceError(f"non-finite {key} at step {step}", step=step)
        collapsed = collapsed or is_collapsed(row["marginal_entropy"], config.n_prototypes)
        log.append(**row)
    return TrainResult(student, teacher, center, log, config, collapsed)


def final_teacher_probs(result: TrainResult, x) -> np.ndarray:
    cfg = result.config
    tau_t = cfg.tau_t(cfg.steps)
    y = result.teacher.represent(x)
    return softmax(teacher_logits(y, result.teacher.bank, result.center, tau_t, cfg.mode, strict=False))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def knn_predict(train_reps, train_labels, test_reps, k=10):
    train_reps = normalize(np.atleast_2d(train_reps))
    test_reps = normalize(np.atleast_2d(test_reps))
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if train_reps.shape[0] == 0 or test_reps.shape[0] == 0:
        raise DomainError("kNN needs non-empty train and test sets")
    if not 1 <= k <= train_reps.shape[0]:
        raise DomainError(f"k must lie in [1, {train_reps.shape[0]}], got {k}")
    sims = np.ascontiguousarray(test_reps @ train_reps.T)
    return kernels.knn_predict(sims, train_labels, int(k), int(train_labels.max()) + 1)


def knn_eval(train_reps, train_labels, test_reps, test_labels, k=10) -> float:
    """Cosine-similarity kNN accuracy with majority vote.

    Vote ties go to the class with the larger summed similarity, then to the
    lowest label.
    """
    pred = knn_predict(train_reps, train_labels, test_reps, k)
    return float(np.mean(pred == np.asarray(test_labels)))


def evaluate_knn(result: TrainResult, dataset: SyntheticDataset, k=None) -> float:
    tx, ty, vx, vy = dataset.split(result.config.test_fraction)
    enc = result.teacher
    return knn_eval(enc.represent(tx), ty, enc.represent(vx), vy, k or result.config.knn_k)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

# (cell id, head mode, L2-normalized prototypes, center variant)
ABLATION_CELLS = (
    ("none-logit", "dino", False, "logit"),
    ("none-probability", "dino", False, "probability"),
    ("l2-logit", "dino", True, "logit"),
    ("l2-probability", "dino", True, "probability"),
    ("vmf-logit", "vmf", False, "logit"),
    ("vmf-probability", "vmf", False, "probability"),
)

ABLATION_COLUMNS = (
    "cell",
    "normalization",
    "centering",
    "knn_accuracy",
    "unique_count",
    "largest_group_size",
    "final_marginal_entropy",
)


def cell_config(base: TrainConfig, cell: str) -> TrainConfig:
    for name, mode, l2, variant in ABLATION_CELLS:
        if name == cell:
            return replace(base, mode=mode, l2_normalize_prototypes=l2, center_variant=variant)
    raise KeyError(cell)


def run_ablation_grid(base_config: TrainConfig, dataset: SyntheticDataset, threshold=0.9):
    """Train all six normalization x centering cells with shared seeds."""
    from vmfdino.analysis import duplicate_sets

    rows = []
    for name, mode, l2, variant in ABLATION_CELLS:
        cfg = cell_config(base_config, name)
        res = train(cfg, dataset)
        report = duplicate_sets(res.teacher.bank, threshold)
        rows.append(
            dict(
                cell=name,
                normalization="vmf" if mode == "vmf" else ("l2" if l2 else "none"),
                centering=variant,
                knn_accuracy=evaluate_knn(res, dataset),
                unique_count=report.unique_count,
                largest_group_size=report.largest_group_size,
                final_marginal_entropy=float(res.metrics.column("marginal_entropy")[-1]),
            )
        )
    return rows


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
