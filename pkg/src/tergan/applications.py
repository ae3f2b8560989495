"""End uses of a trained model: expression transfer and editing, recognition
from the detached expression encoder, k-fold evaluation and embedding dumps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from skimage.transform import resize
from sklearn.exceptions import NotFittedError
from sklearn.linear_model import LogisticRegression
from sklearn.manifold import TSNE
from sklearn.metrics import confusion_matrix, silhouette_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from ._validation import NotTrainedError, ValidationError, check_images
from .data import DatasetManifest, load_images
from .networks import concat_embeddings
from .trainer import TrainState

ENCODE_BATCH = 256


# ---------------------------------------------------------------------------
# Image plumbing


def prepare_images(images, image_size: int, name: str = "images") -> np.ndarray:
    """Validate and, when needed, resize to ``image_size``; always returns a batch."""
    arr = check_images(images, name=name)
    if arr.shape[1] != image_size:
        arr = np.stack([resize(a, (image_size, image_size, 3), order=1, anti_aliasing=True)
                        for a in arr]).astype(np.float32)
        arr = np.clip(arr, 0.0, 1.0)
    return arr


def _require_trained(state: TrainState):
    if not state.is_pretrained or state.stage_steps.get("adversarial", 0) == 0:
        raise NotTrainedError(
            f"model has not been trained adversarially yet (stage={state.stage}, "
            f"adversarial steps={state.stage_steps.get('adversarial', 0)})")


def _batched(fn, x: np.ndarray, batch_size: int = ENCODE_BATCH) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(fn(torch.from_numpy(x[i:i + batch_size])).numpy())
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Transfer and editing


def transfer(state: TrainState, source, target) -> np.ndarray:
    """Render the expression of ``source`` on the identity of ``target``.

    Accepts single images ``[H, W, 3]`` or equal-length batches; the return
    value has the same rank as ``source``.
    """
    _require_trained(state)
    size = state.spec.image_size
    xs = prepare_images(source, size, "source")
    xt = prepare_images(target, size, "target")
    if len(xs) != len(xt):
        raise ValidationError(f"source and target batch sizes differ: {len(xs)} vs {len(xt)}")
    nets = state.nets.eval()
    with torch.no_grad():
        out = nets.generate(torch.from_numpy(xs), torch.from_numpy(xt)).numpy()
    return out[0] if np.ndim(source) == 3 else out


def edit(state: TrainState, target, expression_exemplar) -> np.ndarray:
    """Give ``target`` the expression shown by ``expression_exemplar``.

    The exemplar may or may not share the target's identity.
    """
    return transfer(state, expression_exemplar, target)


# ---------------------------------------------------------------------------
# Recognition


def encode_expressions(state: TrainState, images, baseline: bool = False) -> np.ndarray:
    """f(e) for a batch of images; ``baseline`` uses the frozen pre-trained encoder."""
    enc = state.frozen_expr if baseline else state.nets.expr_encoder
    if enc is None:
        raise NotTrainedError("no frozen pre-trained expression encoder in this state")
    x = prepare_images(images, state.spec.image_size)
    enc.eval()
    return _batched(lambda t: enc(t)[0], x)


def make_probe(seed: int = 0):
    """The shallow classifier: standardised multinomial logistic regression."""
    return make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000, random_state=seed))


def recognize(state: TrainState, images, classifier) -> np.ndarray:
    """Expression labels predicted from f(e) alone."""
    try:
        check_is_fitted(classifier)
    except NotFittedError as exc:
        raise NotTrainedError(f"classifier is not fitted: {exc}") from None
    return np.asarray(classifier.predict(encode_expressions(state, images)))


@dataclass
class FERResult:
    per_fold: List[float]
    mean: float
    confusion: List[List[int]]
    test_identities: List[List[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_fold": self.per_fold, "mean": self.mean, "confusion": self.confusion}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def evaluate_fer(source, manifest: DatasetManifest, k: int,
                 probe_factory: Callable = make_probe,
                 images: Optional[np.ndarray] = None) -> FERResult:
    """Identity-independent k-fold accuracy of a shallow probe on f(e).

    ``source`` is a :class:`TrainState` (its live expression encoder) or a
    precomputed ``[n_records, d]`` embedding array. Each fold is tested on
    the records of its identities after fitting on every other fold.
    """
    if manifest.folds is None or manifest.n_folds != k:
        raise ValidationError(
            f"k={k} does not match the manifest's fold assignment "
            f"({manifest.n_folds} folds); run make_folds with k={k}")
    if isinstance(source, TrainState):
        imgs = load_images(manifest) if images is None else images
        emb = encode_expressions(source, imgs)
    else:
        emb = np.asarray(source, dtype=np.float64)
        if emb.ndim != 2 or len(emb) != len(manifest):
            raise ValidationError(f"embeddings must be [{len(manifest)}, d], got {emb.shape}")
    y, ids = manifest.expressions, manifest.identities
    labels = list(range(manifest.n_expressions))
    per_fold, held_out = [], []
    confusion = np.zeros((manifest.n_expressions, manifest.n_expressions), dtype=np.int64)
    for fold in range(k):
        test = manifest.record_indices([fold])
        train = manifest.record_indices([f for f in range(k) if f != fold])
        leaked = set(ids[train].tolist()) & set(ids[test].tolist())
        assert not leaked, f"fold {fold}: identities {sorted(leaked)} in both train and test"
        probe = probe_factory().fit(emb[train], y[train])
        pred = probe.predict(emb[test])
        per_fold.append(float(np.mean(pred == y[test])))
        confusion += confusion_matrix(y[test], pred, labels=labels)
        held_out.append(sorted(set(ids[test].tolist())))
    return FERResult(per_fold, float(np.mean(per_fold)), confusion.tolist(), held_out)


# ---------------------------------------------------------------------------
# Disentanglement diagnostics


def probe_accuracy(emb: np.ndarray, labels: np.ndarray, train: np.ndarray, test: np.ndarray) -> float:
    probe = make_probe().fit(emb[train], labels[train])
    return float(probe.score(emb[test], labels[test]))


def identity_probe(emb: np.ndarray, manifest: DatasetManifest, indices: Sequence[int]) -> float:
    """How well identity is linearly decodable from ``emb`` among ``indices``.

    Leave-one-expression-out: the probe never sees the expression it is
    tested on, so it must rely on identity information alone.
    """
    idx = np.asarray(indices)
    y_e, y_i = manifest.expressions[idx], manifest.identities[idx]
    accs = []
    for e in np.unique(y_e):
        train, test = idx[y_e != e], idx[y_e == e]
        if len(np.unique(manifest.identities[train])) < 2:
            continue
        accs.append(probe_accuracy(emb, manifest.identities, train, test))
    if not accs:
        raise ValidationError("identity probe needs at least 2 identities and 2 expressions")
    return float(np.mean(accs))


def expression_silhouette(emb: np.ndarray, labels: np.ndarray) -> float:
    return float(silhouette_score(emb, labels))


@dataclass
class DisentanglementReport:
    fer: float
    identity_probe: float
    silhouette: float

    def to_dict(self):
        return {"fer": self.fer, "identity_probe": self.identity_probe,
                "silhouette": self.silhouette}


def disentanglement(emb: np.ndarray, manifest: DatasetManifest,
                    test_folds: Sequence[int]) -> DisentanglementReport:
    """FER probe fitted on the other folds, plus identity probe and silhouette on ``test_folds``."""
    test = manifest.record_indices(test_folds)
    train = manifest.record_indices([f for f in range(manifest.n_folds) if f not in set(test_folds)])
    y = manifest.expressions
    return DisentanglementReport(
        fer=probe_accuracy(emb, y, train, test),
        identity_probe=identity_probe(emb, manifest, test),
        silhouette=expression_silhouette(emb[test], y[test]),
    )


# ---------------------------------------------------------------------------
# Embedding dumps


@dataclass
class EmbeddingDump:
    expression: np.ndarray
    identity: np.ndarray
    vectors: np.ndarray
    coords: Optional[np.ndarray] = None
    variant: str = "trained"

    def __len__(self):
        return len(self.vectors)

    def to_csv(self, path) -> None:
        d = self.vectors.shape[1]
        header = ["expression", "identity"] + [f"f{j}" for j in range(d)]
        if self.coords is not None:
            header += ["x", "y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [int(self.expression[i]), int(self.identity[i])]
                row += [repr(float(v)) for v in self.vectors[i]]
                if self.coords is not None:
                    row += [repr(float(v)) for v in self.coords[i]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "EmbeddingDump":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64).reshape(-1, len(rows[0]))
        d = sum(h.startswith("f") for h in header)
        return cls(body[:, 0].astype(np.int64), body[:, 1].astype(np.int64), body[:, 2:2 + d],
                   body[:, 2 + d:] if "x" in header else None)


def project_2d(vectors: np.ndarray, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    """t-SNE to two dimensions; perplexity is capped for small inputs."""
    n = len(vectors)
    if n < 3:
        raise ValidationError("projection needs at least 3 rows")
    perp = min(perplexity, (n - 1) / 3.0)
    return TSNE(n_components=2, perplexity=perp, random_state=seed, init="pca").fit_transform(
        np.asarray(vectors, dtype=np.float64))


def dump_embeddings(state: TrainState, manifest: DatasetManifest, project: bool = False,
                    baseline: bool = False, images: Optional[np.ndarray] = None,
                    seed: int = 0) -> EmbeddingDump:
    """f(e) for every record; ``baseline`` dumps the frozen pre-trained encoder instead."""
    imgs = load_images(manifest) if images is None else images
    vec = encode_expressions(state, imgs, baseline=baseline)
    coords = project_2d(vec, seed) if project else None
    return EmbeddingDump(manifest.expressions, manifest.identities, vec, coords,
                         "baseline" if baseline else "trained")


# ---------------------------------------------------------------------------
# Image grids


def save_grid(path, rows: Sequence[Sequence[np.ndarray]], row_labels: Sequence[str] = (),
              col_labels: Sequence[str] = (), header: int = 14) -> np.ndarray:
    """Tile images into one PNG with optional header strips; returns the canvas."""
    if not rows or not rows[0]:
        raise ValidationError("grid needs at least one image")
    side = np.asarray(rows[0][0]).shape[0]
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    top = header if col_labels else 0
    left = 4 * header if row_labels else 0
    canvas = Image.new("RGB", (left + n_cols * side, top + n_rows * side), "white")
    draw = ImageDraw.Draw(canvas)
    for j, label in enumerate(col_labels):
        draw.text((left + j * side + 2, 1), str(label), fill="black")
    for i, row in enumerate(rows):
        if i < len(row_labels):
            draw.text((2, top + i * side + side // 2 - 5), str(row_labels[i]), fill="black")
        for j, img in enumerate(row):
            tile = np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8)
            canvas.paste(Image.fromarray(tile), (left + j * side, top + i * side))
    canvas.save(path, format="PNG")
    return np.asarray(canvas)
