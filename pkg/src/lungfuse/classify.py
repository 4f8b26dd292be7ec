"""Multi-modal classifier head and cross-validated evaluation.

Image features are hand crafted (wavelet band statistics plus a pooled
intensity grid) rather than taken from a pretrained backbone, which
keeps every number reproducible from this repository alone.  The heads
are a multinomial logistic regression baseline and a small MLP.  The
k-fold harness runs the full leakage-safe pipeline inside each fold:
preprocessing statistics, SMOTE, feature selection and the model are
all fitted on the training split only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .nnet import Adam, TrainConfig, glorot_uniform, relu, softmax
from .tabular import (
    BoostConfig,
    ColumnSpec,
    TabularDataset,
    apply_preprocess,
    boosted_importance,
    fit_preprocess,
    select_features,
    smote,
    take_rows,
)
from .wavelet import dwt2

__all__ = [
    "MLPSpec",
    "ClassifyConfig",
    "MMDataset",
    "MetricsReport",
    "LinearModel",
    "MLPModel",
    "extract_image_features",
    "train_logreg",
    "logreg_loss_grad",
    "train_mlp",
    "mlp_loss_grad",
    "predict",
    "predict_proba",
    "confusion_matrix",
    "metrics_from_confusion",
    "binary_metrics",
    "stratified_folds",
    "kfold_evaluate",
    "compare_modalities",
    "comparison_to_text",
]

_REPORT_SCHEMA_VERSION = 1

_NOTES = (
    "image features: wavelet band statistics + 8x8 pooled grid (hand crafted, "
    "no pretrained backbone); folds: stratified by class from a seeded shuffle; "
    "spread figures: sample std over fold metrics"
)


# --- image features ---


def extract_image_features(fused, levels: int = 2) -> np.ndarray:
    """Fixed-length feature vector from a fused image.

    Layout: for each decomposition level, (mean |c|, mean c^2) for the
    lh, lv, ld bands; then the same pair for the final ll band; then a
    flattened 8x8 block-mean grid.  Length = 2 (3 levels + 1) + 64.
    """
    img = np.asarray(fused, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"expected a 2D image, got shape {img.shape}")
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise ContractError(f"image must be at least 16x16, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ContractError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    if levels < 1:
        raise ContractError(f"levels must be >= 1, got {levels}")
    pyr = dwt2(img, "haar", levels)
    feats = []
    for lh, lv, ld in pyr.details:
        for band in (lh, lv, ld):
            feats.append(float(np.mean(np.abs(band))))
            feats.append(float(np.mean(band**2)))
    feats.append(float(np.mean(np.abs(pyr.ll))))
    feats.append(float(np.mean(pyr.ll**2)))
    grid = np.empty((8, 8))
    for i, strip in enumerate(np.array_split(img, 8, axis=0)):
        for j, cell in enumerate(np.array_split(strip, 8, axis=1)):
            grid[i, j] = cell.mean()
    return np.concatenate([feats, grid.ravel()])


# --- logistic regression baseline ---


@dataclass
class LinearModel:
    classes: list
    w: np.ndarray  # (d + 1, n_classes), last row is the bias


def _one_hot(idx, n):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def _with_bias(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def logreg_loss_grad(w, x, label_idx, n_classes):
    """Cross-entropy loss and gradient for a (d+1, C) weight matrix."""
    xb = _with_bias(np.asarray(x, dtype=np.float64))
    p = softmax(xb @ w)
    n = xb.shape[0]
    loss = float(-np.mean(np.log(p[np.arange(n), label_idx] + 1e-300)))
    grad = xb.T @ (p - _one_hot(label_idx, n_classes)) / n
    return loss, grad


def _class_index(labels):
    labels = np.asarray(labels)
    classes = [c for c in np.unique(labels)]
    if len(classes) < 2:
        raise DataError("need at least 2 classes")
    lut = {c: i for i, c in enumerate(classes)}
    return classes, np.array([lut[v] for v in labels.tolist()])


def train_logreg(x, labels, lr: float = 0.5, epochs: int = 200, seed: int = 0):
    """Full-batch gradient descent from zero weights.

    Returns (model, losses); losses[0] is evaluated before any update,
    so with balanced binary labels it equals ln 2.  Deterministic; the
    seed only names the run (zero init needs no randomness).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected a 2D matrix, got shape {x.shape}")
    classes, yi = _class_index(labels)
    if len(yi) != x.shape[0]:
        raise ContractError(f"{len(yi)} labels for {x.shape[0]} rows")
    w = np.zeros((x.shape[1] + 1, len(classes)))
    losses = []
    for _ in range(epochs):
        loss, grad = logreg_loss_grad(w, x, yi, len(classes))
        losses.append(loss)
        w -= lr * grad
    return LinearModel(classes, w), losses


# --- MLP ---


@dataclass(frozen=True)
class MLPSpec:
    hidden: tuple = (32, 16)
    dropout: float = 0.5  # first hidden layer only, training time only

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ContractError(f"hidden must be two positive widths, got {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class MLPModel:
    classes: list
    spec: MLPSpec
    params: list  # [w1, b1, w2, b2, w3, b3]


def mlp_loss_grad(params, x, label_idx, n_classes, mask=None):
    """Loss and per-parameter gradients; mask is the (already scaled)
    dropout multiplier for the first hidden layer, or None for off."""
    w1, b1, w2, b2, w3, b3 = params
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    a1 = x @ w1 + b1
    h1 = relu(a1)
    h1d = h1 if mask is None else h1 * mask
    a2 = h1d @ w2 + b2
    h2 = relu(a2)
    p = softmax(h2 @ w3 + b3)
    loss = float(-np.mean(np.log(p[np.arange(n), label_idx] + 1e-300)))
    gz = (p - _one_hot(label_idx, n_classes)) / n
    gw3 = h2.T @ gz
    gb3 = gz.sum(axis=0)
    ga2 = (gz @ w3.T) * (a2 > 0)
    gw2 = h1d.T @ ga2
    gb2 = ga2.sum(axis=0)
    gh1 = ga2 @ w2.T
    if mask is not None:
        gh1 = gh1 * mask
    ga1 = gh1 * (a1 > 0)
    gw1 = x.T @ ga1
    gb1 = ga1.sum(axis=0)
    return loss, [gw1, gb1, gw2, gb2, gw3, gb3]


def train_mlp(x, labels, spec: MLPSpec | None = None, cfg: TrainConfig | None = None) -> MLPModel:
    """Minibatch Adam with inverted dropout on the first hidden layer."""
    spec = spec or MLPSpec()
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected a 2D matrix, got shape {x.shape}")
    classes, yi = _class_index(labels)
    if len(yi) != x.shape[0]:
        raise ContractError(f"{len(yi)} labels for {x.shape[0]} rows")
    d = x.shape[1]
    h1, h2 = spec.hidden
    c = len(classes)
    rng = np.random.default_rng(cfg.rng_seed)
    params = [
        glorot_uniform(rng, (d, h1), d, h1),
        np.zeros(h1),
        glorot_uniform(rng, (h1, h2), h1, h2),
        np.zeros(h2),
        glorot_uniform(rng, (h2, c), h2, c),
        np.zeros(c),
    ]
    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    n = x.shape[0]
    batch = min(cfg.batch_size, n)
    keep = 1.0 - spec.dropout
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            mask = None
            if spec.dropout > 0:
                mask = (rng.uniform(size=(len(idx), h1)) < keep) / keep
            _, grads = mlp_loss_grad(params, x[idx], yi[idx], c, mask)
            opt.step(params, grads)
    return MLPModel(classes, spec, params)


def predict_proba(model, x) -> np.ndarray:
    """Class probabilities; dropout is never applied here."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, LinearModel):
        if x.shape[1] + 1 != model.w.shape[0]:
            raise ContractError(f"model expects {model.w.shape[0] - 1} features, got {x.shape[1]}")
        return softmax(_with_bias(x) @ model.w)
    if isinstance(model, MLPModel):
        w1, b1, w2, b2, w3, b3 = model.params
        if x.shape[1] != w1.shape[0]:
            raise ContractError(f"model expects {w1.shape[0]} features, got {x.shape[1]}")
        h = relu(relu(x @ w1 + b1) @ w2 + b2)
        return softmax(h @ w3 + b3)
    raise ContractError(f"unknown model type {type(model).__name__}")


def predict(model, x):
    idx = np.argmax(predict_proba(model, x), axis=1)
    return np.array([model.classes[i] for i in idx])


# --- metrics ---


def confusion_matrix(true_idx, pred_idx, n_classes: int) -> np.ndarray:
    """Counts indexed [true, predicted]."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(true_idx, pred_idx):
        cm[t, p] += 1
    return cm


def _safe_div(a, b):
    return a / b if b > 0 else 0.0


def metrics_from_confusion(cm) -> dict:
    """Accuracy plus macro precision/recall/F1 (zero denominators score 0)."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    precs, recs, f1s = [], [], []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        prec = _safe_div(tp, cm[:, c].sum())
        rec = _safe_div(tp, cm[c, :].sum())
        precs.append(prec)
        recs.append(rec)
        f1s.append(_safe_div(2 * prec * rec, prec + rec))
    return {
        "accuracy": float(np.trace(cm) / total),
        "precision_macro": float(np.mean(precs)),
        "recall_macro": float(np.mean(recs)),
        "f1_macro": float(np.mean(f1s)),
    }


def binary_metrics(tp: int, fp: int, fn: int, tn: int) -> dict:
    """Positive-class metrics from the four binary confusion counts."""
    if min(tp, fp, fn, tn) < 0 or tp + fp + fn + tn == 0:
        raise ContractError("counts must be non-negative and not all zero")
    prec = _safe_div(tp, tp + fp)
    rec = _safe_div(tp, tp + fn)
    return {
        "accuracy": _safe_div(tp + tn, tp + fp + fn + tn),
        "precision": prec,
        "recall": rec,
        "f1": _safe_div(2 * prec * rec, prec + rec),
    }


_METRIC_KEYS = ("accuracy", "precision_macro", "recall_macro", "f1_macro")


@dataclass
class MetricsReport:
    classes: list
    confusion: np.ndarray  # pooled over folds, rows = true class
    pooled: dict  # metric -> value over the pooled confusion
    fold_metrics: list  # per fold dicts
    summary: dict  # metric -> {"mean": m, "std": s}; sample std over folds
    k: int
    seed: int
    inputs: tuple
    fold_hash: str
    fold_fingerprints: list
    notes: str = _NOTES

    def to_dict(self) -> dict:
        return {
            "schema_version": _REPORT_SCHEMA_VERSION,
            "kind": "metrics-report",
            "classes": list(self.classes),
            "confusion_matrix": self.confusion.tolist(),
            "pooled": self.pooled,
            "fold_metrics": self.fold_metrics,
            "summary": self.summary,
            "k": self.k,
            "seed": self.seed,
            "inputs": list(self.inputs),
            "fold_hash": self.fold_hash,
            "fold_fingerprints": list(self.fold_fingerprints),
            "notes": self.notes,
        }


# --- folds ---


def stratified_folds(labels, k: int, seed: int = 0) -> list:
    """Test-index arrays, one per fold; each row appears exactly once.

    Rows are shuffled within each class and dealt round robin, so fold
    class mixes match the dataset to within one row per class.
    """
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise DataError(f"class {c!r} has {len(idx)} rows; stratified {k}-fold needs >= {k}")
        idx = idx[rng.permutation(len(idx))]
        for i, row in enumerate(idx):
            folds[i % k].append(int(row))
    return [np.array(sorted(f)) for f in folds]


def _fold_hash(folds) -> str:
    doc = json.dumps([f.tolist() for f in folds]).encode()
    return hashlib.sha256(doc).hexdigest()[:16]


# --- the multi-modal dataset and harness ---


@dataclass
class MMDataset:
    labels: list
    tabular: TabularDataset | None = None
    images: dict = field(default_factory=dict)  # modality -> (n, d) features

    def __post_init__(self):
        n = len(self.labels)
        if self.tabular is not None and self.tabular.n_rows != n:
            raise ContractError(
                f"tabular has {self.tabular.n_rows} rows, labels have {n}"
            )
        for name, m in self.images.items():
            m = np.asarray(m, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != n:
                raise ContractError(f"modality {name!r}: expected ({n}, d) matrix, got {m.shape}")
            self.images[name] = m


@dataclass
class ClassifyConfig:
    model: str = "mlp"  # mlp | logreg
    top_k: int = 16
    smote_k: int = 5
    levels: int = 2  # wavelet levels for image features
    boost: BoostConfig = field(default_factory=BoostConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mlp_hidden: tuple = (32, 16)
    mlp_dropout: float = 0.5
    logreg_lr: float = 0.5
    logreg_epochs: int = 200

    def __post_init__(self):
        if self.model not in ("mlp", "logreg"):
            raise ConfigError(f"model must be 'mlp' or 'logreg', got {self.model!r}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        self.mlp_spec()  # fail fast on bad width/dropout

    def mlp_spec(self) -> MLPSpec:
        return MLPSpec(hidden=tuple(self.mlp_hidden), dropout=self.mlp_dropout)


def _assemble(ds: MMDataset, inputs) -> TabularDataset:
    """One flat table: selected tabular columns plus image feature columns."""
    if not inputs:
        raise ConfigError("inputs is empty; select at least one modality")
    for name in inputs:
        if name == "tabular":
            if ds.tabular is None:
                raise ConfigError("inputs include 'tabular' but the dataset has none")
        elif name not in ds.images:
            known = sorted(ds.images) + ["tabular"]
            raise ConfigError(f"unknown modality {name!r}; dataset has {known}")
    rows = [[] for _ in range(len(ds.labels))]
    columns = []
    for name in inputs:
        if name == "tabular":
            columns.extend(ds.tabular.columns)
            for ri, row in enumerate(ds.tabular.rows):
                rows[ri].extend(row)
        else:
            m = ds.images[name]
            columns.extend(
                ColumnSpec(f"img_{name}_{j}", "numeric") for j in range(m.shape[1])
            )
            for ri in range(m.shape[0]):
                rows[ri].extend(float(v) for v in m[ri])
    return TabularDataset(columns, rows, list(ds.labels))


def _fingerprint(parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def kfold_evaluate(
    ds: MMDataset,
    inputs=("fused", "tabular"),
    k: int = 5,
    cfg: ClassifyConfig | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Stratified k-fold evaluation of the full in-fold pipeline.

    Inside each fold, on training rows only: fit preprocessing, SMOTE
    balance, rank features with the booster, keep top_k, train the
    configured head.  Test rows see only the fitted transforms.
    """
    cfg = cfg or ClassifyConfig()
    table = _assemble(ds, tuple(inputs))
    labels = np.asarray(table.labels)
    classes = [c for c in np.unique(labels)]
    lut = {c: i for i, c in enumerate(classes)}
    folds = stratified_folds(labels, k, seed)
    all_idx = np.arange(table.n_rows)

    pooled_cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    fold_metrics, fingerprints = [], []
    for test_idx in folds:
        train_idx = np.setdiff1d(all_idx, test_idx)
        train_ds = take_rows(table, train_idx)
        test_ds = take_rows(table, test_idx)
        prep = fit_preprocess(train_ds)
        x_train = apply_preprocess(prep, train_ds)
        x_test = apply_preprocess(prep, test_ds)
        y_train = labels[train_idx]
        xb, yb = smote(x_train, y_train, k=cfg.smote_k, seed=seed)
        top_k = min(cfg.top_k, xb.shape[1])
        report = boosted_importance(xb, yb, cfg.boost)
        sel = select_features(report, top_k)
        xb_sel = xb[:, sel]
        if cfg.model == "logreg":
            model, _ = train_logreg(
                xb_sel, yb, lr=cfg.logreg_lr, epochs=cfg.logreg_epochs, seed=seed
            )
        else:
            model = train_mlp(xb_sel, yb, cfg.mlp_spec(), cfg.train)
        pred = predict(model, x_test[:, sel])
        t_idx = np.array([lut[v] for v in labels[test_idx]])
        p_idx = np.array([lut[v] for v in pred])
        cm = confusion_matrix(t_idx, p_idx, len(classes))
        pooled_cm += cm
        fold_metrics.append(metrics_from_confusion(cm))
        stats_doc = {
            "numeric": {k_: list(v) for k_, v in prep.numeric_stats.items()},
            "modes": dict(prep.modes),
        }
        weight_arrays = (
            [model.w] if isinstance(model, LinearModel) else list(model.params)
        )
        fingerprints.append(
            _fingerprint([stats_doc, xb, np.asarray(yb, dtype="U16"), list(map(int, sel))] + weight_arrays)
        )

    summary = {}
    for key in _METRIC_KEYS:
        vals = np.array([m[key] for m in fold_metrics])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1))}
    return MetricsReport(
        classes=classes,
        confusion=pooled_cm,
        pooled=metrics_from_confusion(pooled_cm),
        fold_metrics=fold_metrics,
        summary=summary,
        k=k,
        seed=seed,
        inputs=tuple(inputs),
        fold_hash=_fold_hash(folds),
        fold_fingerprints=fingerprints,
    )


_COMPARE_CONFIGS = (
    ("tabular-only", ("tabular",)),
    ("ct-only", ("ct",)),
    ("fused", ("fused",)),
    ("multimodal", ("fused", "tabular")),
)


def compare_modalities(ds: MMDataset, seed: int = 0, k: int = 5,
                       cfg: ClassifyConfig | None = None) -> dict:
    """The four-way input comparison, all runs on identical folds."""
    out = {}
    for name, inputs in _COMPARE_CONFIGS:
        out[name] = kfold_evaluate(ds, inputs=inputs, k=k, cfg=cfg, seed=seed)
    hashes = {r.fold_hash for r in out.values()}
    if len(hashes) != 1:  # same labels + seed must give same folds
        raise ContractError("fold assignments diverged across configurations")
    return out


def comparison_to_text(comparison: dict) -> str:
    """Plain-text comparison table, one row per input configuration."""
    lines = []
    first = next(iter(comparison.values()))
    lines.append("model comparison: accuracy / macro precision / macro recall / macro F1")
    lines.append(f"k={first.k} seed={first.seed} (mean +/- sample std over folds)")
    lines.append(f"note: {first.notes}")
    lines.append("")
    header = f"{'input':<14}" + "".join(f"{h:>20}" for h in ("accuracy", "precision", "recall", "f1"))
    lines.append(header)
    lines.append("-" * len(header))
    for name, rep in comparison.items():
        cells = []
        for key in _METRIC_KEYS:
            s = rep.summary[key]
            cells.append(f"{s['mean']:.3f} +/- {s['std']:.3f}")
        lines.append(f"{name:<14}" + "".join(f"{c:>20}" for c in cells))
    return "\n".join(lines) + "\n"
