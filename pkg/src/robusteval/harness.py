"""Experiment orchestration: train, attack, measure and report.

A run trains (or loads) one classifier, draws a class-balanced set of test
samples, attacks them with every configured attack and records accuracy,
loss, image quality and perturbation size per attack. All randomness flows
from the run seed through :func:`derive_seed`, so a ``(config, seed)`` pair
reproduces the same numbers and the same CSV bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from . import attacks as atk
from .dataset import (
    CIFAR_DATASETS,
    IDX_DATASETS,
    LabeledDataset,
    load_dataset,
    subsample,
    synthetic_dataset,
)
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    UndefinedRateError,
    UnknownDatasetError,
)
from .metrics import QualityReport, quality_report
from .nncore import ModelSpec, build_model, evaluate, load_model, train

CSV_COLUMNS = (
    "dataset", "attack", "N", "R", "nb", "O", "eps",
    "baseline_loss", "baseline_acc", "adv_loss", "adv_acc",
    "ergas", "psnr", "ssim_mean", "ssim_cs", "sam",
    "success_rate", "linf", "l2", "seconds",
)

# returned by robustness_threshold when even eps = 1 leaves the prediction intact
NO_COMPROMISE = math.inf

# seed streams within one run
STREAM_MODEL, STREAM_SAMPLES, STREAM_ATTACK, STREAM_CASE, STREAM_DATA = 1, 2, 3, 4, 5

_MASK64 = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master, *path):
    """Child seed for the stream named by the integer ``path`` under ``master``.

    Each step advances the parent state one splitmix64 round, xors in the
    path element and finalizes again, so sibling streams are decorrelated
    and the mapping is stable across platforms.
    """
    state = _splitmix64(int(master) & _MASK64)
    for p in path:
        # the extra round on the parent keeps (master, p) from commuting
        state = _splitmix64(_splitmix64(state) ^ (int(p) & _MASK64))
    return state


# -- configuration --------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_train: int = 400
    n_test: int = 200
    shape: tuple = (12, 12, 1)
    num_classes: int = 2
    noise: float = 0.05


@dataclass
class ExperimentConfig:
    """One experiment: data, model, attacks and sampling.

    ``model.seed`` is ignored; the model stream is derived from ``seed``.
    ``model_path`` loads a saved model instead of training one.
    """

    dataset: str = "synthetic"
    data_dir: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    attacks: list = field(default_factory=lambda: [atk.AttackConfig("fgsm")])
    sample_count: int = 100
    train_count: int | None = None
    seed: int = 0
    output_dir: str = "out"
    model_path: str | None = None
    export_images: int = 0
    case_id: str = ""

    def validate(self):
        if not self.attacks:
            raise ConfigurationError("attacks", "at least one attack is required")
        if not isinstance(self.sample_count, int) or self.sample_count < 1:
            raise ConfigurationError("sample_count", f"must be an integer >= 1, got {self.sample_count!r}")
        if self.train_count is not None and self.train_count < 1:
            raise ConfigurationError("train_count", "must be >= 1 when given")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError("seed", f"must be a non-negative integer, got {self.seed!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["synthetic"]["shape"] = list(self.synthetic.shape)
        d["attacks"] = [asdict(a) for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(unknown[0], "unknown configuration key")
        try:
            if "synthetic" in d:
                syn = dict(d["synthetic"])
                if "shape" in syn:
                    syn["shape"] = tuple(syn["shape"])
                d["synthetic"] = SyntheticSpec(**syn)
            if "model" in d:
                d["model"] = ModelSpec(**d["model"])
            if "attacks" in d:
                d["attacks"] = [atk.AttackConfig(**a) for a in d["attacks"]]
        except TypeError as exc:
            raise ConfigurationError("config", str(exc)) from None
        except ValueError as exc:
            raise ConfigurationError("attacks", str(exc)) from None
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- records --------------------------------------------------------------

@dataclass
class AttackRecord:
    kind: str
    eps: float
    adv_loss: float
    adv_acc: float
    quality: QualityReport
    success_rate: float | None
    linf: float
    l2: float
    seconds: float
    adversarial: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "adversarial"}
        d["quality"] = asdict(self.quality)
        return d

    @classmethod
    def from_dict(cls, d, adversarial=None):
        d = dict(d)
        d["quality"] = QualityReport(**d["quality"])
        return cls(**d, adversarial=adversarial)


@dataclass
class RunRecord:
    """Outcome of one run.

    ``status`` is ``"ok"`` for a completed run and ``"config-error"`` when
    the configuration was rejected; ``expected_valid`` echoes the test
    design, so :attr:`as_expected` tells whether the outcome matched it.
    Baseline figures are measured on the attacked samples;
    ``test_loss``/``test_acc`` cover the whole test split.
    """

    config: dict
    status: str = "ok"
    error: str = ""
    expected_valid: bool = True
    test_loss: float | None = None
    test_acc: float | None = None
    baseline_loss: float | None = None
    baseline_acc: float | None = None
    attacks: list = field(default_factory=list)
    originals: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def as_expected(self):
        return (self.status == "ok") == self.expected_valid

    def to_dict(self):
        return {
            "config": self.config,
            "status": self.status,
            "error": self.error,
            "expected_valid": self.expected_valid,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
            "baseline_loss": self.baseline_loss,
            "baseline_acc": self.baseline_acc,
            "attacks": [a.to_dict() for a in self.attacks],
        }


def save_record(record, path):
    """Write ``record`` as JSON at ``path`` and its images next to it (``.npz``)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    arrays = {}
    if record.originals is not None:
        arrays["originals"] = record.originals
        arrays["labels"] = record.labels
    for i, a in enumerate(record.attacks):
        if a.adversarial is not None:
            arrays[f"adversarial{i}"] = a.adversarial
    if arrays:
        np.savez_compressed(_image_archive(path), **arrays)


def _image_archive(path):
    return os.path.splitext(path)[0] + "_images.npz"


def load_record(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    arrays = {}
    archive = _image_archive(path)
    if os.path.exists(archive):
        with np.load(archive, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    attacks = [
        AttackRecord.from_dict(a, arrays.get(f"adversarial{i}"))
        for i, a in enumerate(d.pop("attacks"))
    ]
    return RunRecord(**d, attacks=attacks, originals=arrays.get("originals"), labels=arrays.get("labels"))


# -- measurements ---------------------------------------------------------

def success_rate(model, originals, adversarials, labels):
    """Fraction of the originally correct samples whose adversarial version is misclassified.

    Raises
    ------
    UndefinedRateError
        No sample was classified correctly before the attack.
    """
    originals = np.asarray(originals, dtype=np.float64)
    adversarials = np.asarray(adversarials, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not len(originals) == len(adversarials) == len(labels):
        raise ValueError("originals, adversarials and labels must have equal lengths")
    correct = model.predict(originals) == labels
    if not correct.any():
        raise UndefinedRateError("success rate undefined: no sample is classified correctly")
    flipped = model.predict(adversarials[correct]) != labels[correct]
    return float(flipped.mean())


def robustness_threshold(model, x, y, tol=1e-3, cfg=None):
    """Smallest FGSM budget in ``[0, 1]`` that flips the prediction on ``x``.

    Bisection stops once the bracket is narrower than ``tol`` and returns
    its upper end, so FGSM at the returned budget succeeds and at
    ``result - tol`` it did not. Returns 0 for an input that is already
    misclassified and :data:`NO_COMPROMISE` when eps = 1 is not enough.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    cfg = cfg or atk.AttackConfig("fgsm")
    x = np.asarray(x, dtype=np.float64)
    if int(model.predict(x[None])[0]) != int(y):
        return 0.0

    def flips(eps):
        return bool(atk.fgsm(model, x, y, cfg.with_(eps=eps)).success)

    if not flips(1.0):
        return NO_COMPROMISE
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if flips(mid):
            hi = mid
        else:
            lo = mid
    return hi


def paired_t_test(before, after):
    """Two-sided paired t-test on ``d = before - after``.

    Returns ``(t, p)`` with ``n - 1`` degrees of freedom. Identical
    differences with zero mean give ``(0.0, 1.0)``.

    Raises
    ------
    ValueError
        Fewer than two pairs or unequal lengths.
    DegenerateInputError
        All differences equal and nonzero (infinite t).
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape or before.ndim != 1:
        raise ValueError("before and after must be 1-d sequences of equal length")
    if len(before) < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = before - after
    if np.all(d == d[0]):
        if d[0] == 0:
            return 0.0, 1.0
        raise DegenerateInputError("all differences are equal and nonzero: t is infinite")
    res = stats.ttest_rel(before, after)
    return float(res.statistic), float(res.pvalue)


# -- running --------------------------------------------------------------

def _load_data(cfg):
    name = cfg.dataset
    if name == "synthetic":
        syn = cfg.synthetic
        seed = derive_seed(cfg.seed, STREAM_DATA)
        full = synthetic_dataset(seed, syn.n_train + syn.n_test, syn.shape, syn.num_classes, syn.noise)
        cut = np.arange(len(full))
        return full.take(cut[:syn.n_train]), full.take(cut[syn.n_train:])
    if name not in IDX_DATASETS + CIFAR_DATASETS:
        raise UnknownDatasetError(name)
    if not cfg.data_dir:
        raise ConfigurationError("data_dir", f"dataset {name!r} needs a data directory")
    return load_dataset(name, cfg.data_dir, "train"), load_dataset(name, cfg.data_dir, "test")


def _with_classes(ds, nb):
    """Adapt a dataset to a classifier with ``nb`` outputs.

    Extra outputs are simply never targeted; with fewer outputs than
    dataset classes only the samples of the first ``nb`` classes are kept.
    """
    if nb >= ds.num_classes:
        return LabeledDataset(ds.images, ds.labels, nb, ds.name)
    keep = np.flatnonzero(ds.labels < nb)
    return LabeledDataset(ds.images[keep], ds.labels[keep], nb, ds.name)


def prepare(cfg):
    """Validate ``cfg``, load data and train or load the model.

    Returns ``(model, train_set, test_set)``; configuration problems raise
    :class:`ConfigurationError` before any data is read.
    """
    cfg.validate()
    spec = replace(cfg.model, seed=derive_seed(cfg.seed, STREAM_MODEL) % (1 << 63))
    if cfg.model_path is None:
        spec.validate()
    if cfg.dataset != "synthetic" and cfg.dataset not in IDX_DATASETS + CIFAR_DATASETS:
        raise UnknownDatasetError(cfg.dataset)
    train_ds, test_ds = _load_data(cfg)
    if cfg.model_path is not None:
        model = load_model(cfg.model_path)
        nb = model.num_classes
    else:
        nb = spec.num_classes
    train_ds, test_ds = _with_classes(train_ds, nb), _with_classes(test_ds, nb)
    if cfg.train_count is not None and cfg.train_count < len(train_ds):
        train_ds = subsample(train_ds, cfg.train_count, derive_seed(cfg.seed, STREAM_DATA, 1))
    if cfg.model_path is None:
        model = build_model(spec, test_ds.shape)
        train(model, train_ds)
    elif model.input_shape != test_ds.shape:
        raise ConfigurationError("model_path", f"model input {model.input_shape} does not match data {test_ds.shape}")
    return model, train_ds, test_ds


def attack_samples(cfg, test_ds):
    if cfg.sample_count > len(test_ds):
        raise ConfigurationError(
            "sample_count", f"{cfg.sample_count} samples requested from a test split of {len(test_ds)}"
        )
    return subsample(test_ds, cfg.sample_count, derive_seed(cfg.seed, STREAM_SAMPLES))


def measure_attack(model, samples, acfg):
    """Attack ``samples`` with ``acfg`` and measure the outcome."""
    start = time.monotonic()
    result = atk.run_attack(model, samples.images, samples.labels, acfg)
    seconds = time.monotonic() - start
    adv = LabeledDataset(result.adversarial, samples.labels, samples.num_classes, samples.name)
    adv_loss, adv_acc = evaluate(model, adv)
    try:
        rate = success_rate(model, samples.images, adv.images, samples.labels)
    except UndefinedRateError:
        rate = None
    return AttackRecord(
        kind=acfg.kind,
        eps=float(acfg.eps),
        adv_loss=float(adv_loss),
        adv_acc=float(adv_acc),
        quality=quality_report(samples.images, adv.images),
        success_rate=rate,
        linf=float(np.mean(result.perturbation_linf)),
        l2=float(np.mean(result.perturbation_l2)),
        seconds=seconds,
        adversarial=np.array(adv.images),
    )


def run_matrix(cfg, expected_valid=True):
    """Run every attack of ``cfg`` on one trained model.

    Configuration errors are captured in the record (``status =
    "config-error"``) so that error-seeking test cases can be judged;
    operational errors such as missing files propagate.
    """
    echo = cfg.to_dict()
    try:
        model, _, test_ds = prepare(cfg)
        samples = attack_samples(cfg, test_ds)
    except ConfigurationError as exc:
        return RunRecord(echo, "config-error", str(exc), expected_valid)
    test_loss, test_acc = evaluate(model, test_ds)
    base_loss, base_acc = evaluate(model, samples)
    record = RunRecord(
        echo, "ok", "", expected_valid,
        float(test_loss), float(test_acc), float(base_loss), float(base_acc),
        originals=np.array(samples.images), labels=np.array(samples.labels),
    )
    for i, acfg in enumerate(cfg.attacks):
        acfg = acfg.with_(seed=derive_seed(cfg.seed, STREAM_ATTACK, i) % (1 << 63))
        record.attacks.append(measure_attack(model, samples, acfg))
    return record


# -- reports --------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_rows(records, include_timing=False):
    """Data rows (dicts keyed by :data:`CSV_COLUMNS`) in deterministic order."""
    if isinstance(records, RunRecord):
        records = [records]
    keyed = []
    for record in records:
        if record.status != "ok":
            continue
        cfg = record.config
        model = cfg.get("model", {})
        for a in record.attacks:
            q = a.quality
            row = {
                "dataset": cfg.get("dataset", ""),
                "attack": a.kind,
                "N": model.get("hidden_neurons"),
                "R": model.get("dropout_rate"),
                "nb": model.get("num_classes"),
                "O": model.get("optimizer"),
                "eps": a.eps,
                "baseline_loss": record.baseline_loss,
                "baseline_acc": record.baseline_acc,
                "adv_loss": a.adv_loss,
                "adv_acc": a.adv_acc,
                "ergas": q.ergas,
                "psnr": q.psnr,
                "ssim_mean": q.ssim_mean,
                "ssim_cs": q.ssim_cs,
                "sam": q.sam,
                "success_rate": a.success_rate,
                "linf": a.linf,
                "l2": a.l2,
                "seconds": f"{a.seconds:.3f}" if include_timing else None,
            }
            keyed.append(((row["dataset"], row["attack"], _case_key(cfg.get("case_id", ""))), row))
    keyed.sort(key=lambda kr: kr[0])
    return [row for _, row in keyed]


def _case_key(case_id):
    # T2 < T10: compare the numeric suffix numerically
    head = case_id.rstrip("0123456789")
    tail = case_id[len(head):]
    return (head, int(tail) if tail else -1)


def render_csv(records, include_timing=False):
    """CSV text for ``records``; wall time is left blank unless ``include_timing``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in csv_rows(records, include_timing):
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def export_csv(records, path, include_timing=False):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(render_csv(records, include_timing))


_TEXT_COLUMNS = ("dataset", "attack", "O")
_INT_COLUMNS = ("N", "nb")


def read_csv(path):
    """Parse an exported CSV back into typed row dicts (blank cells become ``None``)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = {}
            for c in CSV_COLUMNS:
                v = raw[c]
                if v == "":
                    row[c] = None
                elif c in _TEXT_COLUMNS:
                    row[c] = v
                elif c in _INT_COLUMNS:
                    row[c] = int(v)
                else:
                    row[c] = float(v)
            rows.append(row)
    return rows


def _to_bytes(img):
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img):
    """Binary PGM (one band) or PPM (three bands), maxval 255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, b = img.shape
    if b not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 bands, got {b}")
    magic = b"P5" if b == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_bytes(img).tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM written by :func:`write_pnm` as ``(h, w, b)`` floats in ``[0, 1]``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported PNM variant {magic!r} maxval {maxval}")
    b = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * b, offset=pos)
    return data.reshape(h, w, b) / 255.0


def difference_image(original, adversarial):
    """Signed difference stretched to the full byte range; zero maps to 128/255."""
    diff = np.asarray(adversarial, dtype=np.float64) - np.asarray(original, dtype=np.float64)
    peak = np.abs(diff).max()
    scaled = diff / peak if peak > 0 else diff
    return (128.0 + 127.0 * scaled) / 255.0


def export_image_pair(original, adversarial, path_prefix):
    """Write original, adversarial and difference images; returns the three paths."""
    original = np.asarray(original, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if original.shape != adversarial.shape:
        raise ValueError("original and adversarial shapes differ")
    ext = ".pgm" if (original.ndim == 2 or original.shape[-1] == 1) else ".ppm"
    paths = [f"{path_prefix}_{tag}{ext}" for tag in ("original", "adversarial", "diff")]
    write_pnm(paths[0], original)
    write_pnm(paths[1], adversarial)
    write_pnm(paths[2], difference_image(original, adversarial))
    return paths


def write_outputs(records, out_dir, count=0, include_timing=False, name="results"):
    """Write ``<name>.csv`` and up to ``count`` image triples per attack under ``out_dir``."""
    if isinstance(records, RunRecord):
        records = [records]
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    export_csv(records, csv_path, include_timing)
    if count > 0:
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        for record in records:
            if record.originals is None:
                continue
            case = record.config.get("case_id") or "run"
            for i, a in enumerate(record.attacks):
                if a.adversarial is None:
                    continue
                for j in range(min(count, len(record.originals))):
                    prefix = os.path.join(img_dir, f"{case}_{i}_{a.kind}_{j}")
                    export_image_pair(record.originals[j], a.adversarial[j], prefix)
    return csv_path
