"""Dataset I/O, the F-measure evaluation protocol, and a procedural
synthetic face-like dataset for desk-scale end-to-end experiments.

Label maps are single-channel 8-bit PNGs whose pixel value is the class
id (lossless round trip).  Images load as float64 in [0, 1].  Manifests
are plain text, one `image_path<TAB>label_path` line per example, with
relative paths resolved against the manifest's directory.

Per-class F scores come from pooled (micro) confusion counts over all
images by default; per-image (macro) averaging is available as an
option since published tables rarely say which convention they use.
"""

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, InvalidArgumentError

DEFAULT_CLASS_NAMES = ("background", "skin", "hair")


# ---------------------------------------------------------------------------
# metrics


def f_measure(pred, gt, class_id):
    """Per-class precision, recall and F over one prediction/target pair.

    Conventions: P=0 when nothing was predicted for the class, R=0 when
    the class is absent from the target, F=0 when P+R=0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(
            f"prediction shape {pred.shape} != target shape {gt.shape}"
        )
    tp = int(np.sum((pred == class_id) & (gt == class_id)))
    fp = int(np.sum((pred == class_id) & (gt != class_id)))
    fn = int(np.sum((pred != class_id) & (gt == class_id)))
    return _prf(tp, fp, fn)


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


@dataclass
class EvalReport:
    precision: np.ndarray       # (K,)
    recall: np.ndarray          # (K,)
    f: np.ndarray               # (K,)
    overall_accuracy: float
    class_names: tuple = None

    @property
    def mean_f(self):
        return float(np.mean(self.f))

    def render(self):
        """Machine-parseable block with fixed field names."""
        lines = []
        for k in range(self.f.size):
            lines.append(f"f_class_{k} = {float(self.f[k])!r}")
            lines.append(f"precision_{k} = {float(self.precision[k])!r}")
            lines.append(f"recall_{k} = {float(self.recall[k])!r}")
        lines.append(f"overall_accuracy = {float(self.overall_accuracy)!r}")
        return "\n".join(lines) + "\n"

    def table(self):
        """Human-readable layout: one F column per class plus overall."""
        names = self.class_names or tuple(
            f"class_{k}" for k in range(self.f.size)
        )
        header = "".join(f"{('F-' + n)[:12]:>14}" for n in names) + f"{'overall':>14}"
        row = "".join(f"{v:14.4f}" for v in self.f) + f"{self.overall_accuracy:14.4f}"
        return header + "\n" + row


def parse_report(text):
    """Inverse of EvalReport.render()."""
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = float(value.strip())
    k = sum(1 for key in fields if key.startswith("f_class_"))
    return EvalReport(
        precision=np.array([fields[f"precision_{i}"] for i in range(k)]),
        recall=np.array([fields[f"recall_{i}"] for i in range(k)]),
        f=np.array([fields[f"f_class_{i}"] for i in range(k)]),
        overall_accuracy=fields["overall_accuracy"],
    )


def evaluate(preds, gts, n_classes, average="micro", class_names=None):
    """Score aligned prediction/target lists.

    micro: confusion counts pooled over all pixels of all images before
    P/R/F are computed.  macro: per-image F averaged across images.
    Overall accuracy is always pooled over pixels.
    """
    if len(preds) != len(gts) or not preds:
        raise InvalidArgumentError("need equally many predictions and targets")
    if average not in ("micro", "macro"):
        raise InvalidArgumentError("average must be 'micro' or 'macro'")
    correct = 0
    total = 0
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    per_image = np.zeros((len(preds), n_classes, 3))
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise InvalidArgumentError(f"example {i}: shape mismatch")
        correct += int((pred == gt).sum())
        total += gt.size
        for k in range(n_classes):
            a = int(np.sum((pred == k) & (gt == k)))
            b = int(np.sum((pred == k) & (gt != k)))
            c = int(np.sum((pred != k) & (gt == k)))
            tp[k] += a
            fp[k] += b
            fn[k] += c
            per_image[i, k] = _prf(a, b, c)
    if average == "micro":
        stats = np.array([_prf(tp[k], fp[k], fn[k]) for k in range(n_classes)])
    else:
        stats = per_image.mean(axis=0)
    return EvalReport(
        precision=stats[:, 0],
        recall=stats[:, 1],
        f=stats[:, 2],
        overall_accuracy=correct / total,
        class_names=tuple(class_names) if class_names else None,
    )


# ---------------------------------------------------------------------------
# image and manifest I/O


def load_image(path):
    """Load an image as float64 H x W x C with values in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image: {exc}", path=path) from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise FormatError(f"expected 8-bit image, got {arr.dtype}", path=path)
    return arr.astype(np.float64) / 255.0


def save_image(array01, path):
    """Save a float [0,1] H x W x C array as an 8-bit PNG."""
    arr = np.clip(np.asarray(array01), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)


def load_labels(path, n_classes=None):
    """Load a label map (single-channel 8-bit PNG, pixel value = class id)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode label map: {exc}", path=path) from exc
    if arr.ndim != 2:
        raise FormatError("label map must be single-channel", path=path)
    labels = arr.astype(np.int32)
    if n_classes is not None and labels.max() >= n_classes:
        raise FormatError(
            f"label id {labels.max()} exceeds class count {n_classes}", path=path
        )
    return labels


def save_labelmap(labels, path):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise InvalidArgumentError("label ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


@dataclass
class DatasetManifest:
    pairs: list                 # [(image_path, label_path)]
    n_classes: int
    class_names: tuple = DEFAULT_CLASS_NAMES

    def __len__(self):
        return len(self.pairs)


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w") as f:
        for image_path, label_path in manifest.pairs:
            f.write(f"{image_path}\t{label_path}\n")


def load_manifest(path, n_classes, class_names=None):
    """Read a manifest and check that every referenced file exists."""
    pairs = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(
                    f"line {lineno}: expected image_path<TAB>label_path", path=path
                )
            base = os.path.dirname(os.path.abspath(path))
            resolved = tuple(
                p if os.path.isabs(p) else os.path.join(base, p) for p in parts
            )
            for p in resolved:
                if not os.path.exists(p):
                    raise FormatError(f"line {lineno}: missing file {p}", path=path)
            pairs.append(resolved)
    return DatasetManifest(
        pairs=pairs,
        n_classes=n_classes,
        class_names=tuple(class_names) if class_names else DEFAULT_CLASS_NAMES,
    )


def load_examples(manifest: DatasetManifest):
    """Materialize (image, labels) pairs; errors carry the file path."""
    examples = []
    for image_path, label_path in manifest.pairs:
        image = load_image(image_path)
        labels = load_labels(label_path, manifest.n_classes)
        if labels.shape != image.shape[:2]:
            raise FormatError(
                f"label dims {labels.shape} do not match image {image.shape[:2]}",
                path=label_path,
            )
        examples.append((image, labels))
    return examples


# ---------------------------------------------------------------------------
# synthetic data

BG, SKIN, HAIR = 0, 1, 2


def _ellipse_mask(size, cy, cx, ay, ax):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def toy_face(rng, size):
    """One synthetic example: background gradient + noise texture, a
    randomized 'skin' ellipse, and a 'hair' crescent capping it.

    The three classes carry distinct color statistics (gray-ish
    background, warm bright skin, dark red-dominant hair) so the task
    is learnable by a small network from color plus local context.

    Returns (image size x size x 3 in [0,1], labels size x size int32)."""
    top = rng.uniform(0.25, 0.45)
    bottom = rng.uniform(0.55, 0.85)
    tint = rng.uniform(-0.04, 0.04, size=3)
    ramp = np.linspace(0.0, 1.0, size)[:, None, None]
    image = (top + ramp * (bottom - top)) + tint
    image = image + rng.normal(0.0, 0.02, size=(size, size, 3))

    cy = rng.uniform(0.48, 0.58) * size
    cx = rng.uniform(0.42, 0.58) * size
    ay = rng.uniform(0.20, 0.27) * size
    ax = rng.uniform(0.17, 0.24) * size
    skin = _ellipse_mask(size, cy, cx, ay, ax)
    skin_color = np.array(
        [rng.uniform(0.8, 0.95), rng.uniform(0.55, 0.68), rng.uniform(0.42, 0.55)]
    )

    thickness = rng.uniform(0.08, 0.12) * size
    shift = rng.uniform(0.02, 0.05) * size
    outer = _ellipse_mask(size, cy - shift, cx, ay + thickness, ax + thickness)
    yy = np.arange(size)[:, None]
    hair = outer & ~skin & (yy < cy)
    hair_color = np.array(
        [rng.uniform(0.4, 0.55), rng.uniform(0.1, 0.2), rng.uniform(0.05, 0.15)]
    )

    image[skin] = skin_color
    image[hair] = hair_color
    image = image + rng.normal(0.0, 0.05, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    labels = np.full((size, size), BG, dtype=np.int32)
    labels[skin] = SKIN
    labels[hair] = HAIR
    return image, labels


def generate_toy_faces(seed, count, size, out_dir, n_classes=3, depth=3):
    """Write a synthetic dataset (images, label maps, manifest) to disk.

    Fully determined by the seed.  Images get sigma=0.05 Gaussian noise;
    labels are the exact generating masks.
    """
    if n_classes != 3:
        raise InvalidArgumentError("the generator produces exactly 3 classes")
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    if size % (2**depth):
        raise InvalidArgumentError(
            f"size {size} not divisible by the network downsampling 2^{depth}"
        )
    rng = np.random.default_rng(seed)
    image_dir = os.path.join(out_dir, "images")
    label_dir = os.path.join(out_dir, "labels")
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(label_dir, exist_ok=True)
    pairs = []
    for i in range(count):
        image, labels = toy_face(rng, size)
        image_path = os.path.join(image_dir, f"face_{i:04d}.png")
        label_path = os.path.join(label_dir, f"face_{i:04d}.png")
        save_image(image, image_path)
        save_labelmap(labels, label_path)
        pairs.append((image_path, label_path))
    manifest = DatasetManifest(pairs=pairs, n_classes=3)
    save_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    return manifest
