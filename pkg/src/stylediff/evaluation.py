"""Style and semantics oracles for generated images.

Both oracles are pure functions of rendered data and the frozen feature
net; no trained parameter influences them.
"""

from dataclasses import dataclass, field

import numpy as np

from . import synthdata as sd
from .encoders import gram_of_image
from .rng import make_rng


def _normalized(g):
    n = np.linalg.norm(g)
    return g / n if n > 1e-12 else g


class StyleCentroids:
    """Nearest-centroid style classifier over normalized Gram vectors."""

    def __init__(self, encoders, seed, per_family=50, size=32, families=sd.FAMILIES):
        self.families = tuple(families)
        self.centroids = {}
        for fi, family in enumerate(self.families):
            rng = make_rng(seed, 808, fi)
            grams = []
            for _ in range(per_family):
                style = sd.sample_style_spec(family, rng)
                content = sd.sample_content_spec(rng)
                sample = sd.render(style, content, seed=int(rng.integers(0, 2**31)), size=size)
                grams.append(_normalized(gram_of_image(encoders, sample.image)))
            self.centroids[family] = np.mean(grams, axis=0)

    def classify(self, encoders, image):
        g = _normalized(gram_of_image(encoders, image))
        dists = {f: float(np.linalg.norm(g - c)) for f, c in self.centroids.items()}
        return min(dists, key=dists.get)


def detect_shape_mask(image, threshold=0.22):
    """Pixels that plainly differ from the neutral background gray."""
    return np.abs(np.asarray(image) - sd.BACKGROUND).max(axis=0) > threshold


def mask_iou(a, b):
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 0.0


def semantic_iou(image, content, size=None):
    """IoU of the detected non-background region vs the prompted analytic mask."""
    size = size or image.shape[-1]
    return mask_iou(detect_shape_mask(image), sd.shape_mask(content, size))


@dataclass
class EvalReport:
    style_score: float
    semantic_score: float
    n_samples: int
    confusion: dict = field(default_factory=dict)  # (target, predicted) -> count

    def lines(self):
        out = [
            f"style_score={self.style_score:.4f}",
            f"semantic_score={self.semantic_score:.4f}",
            f"n_samples={self.n_samples}",
        ]
        for (target, predicted), count in sorted(self.confusion.items()):
            out.append(f"confusion\t{target}\t{predicted}\t{count}")
        return out


EVAL_SCALE = 0.42  # analytic-mask scale prompted during evaluation


def eval_contents():
    """One centered content spec per shape (the prompted semantics)."""
    return [sd.ContentSpec(shape, (0.5, 0.5), EVAL_SCALE) for shape in sd.SHAPES]


def reference_set_for(family, seed, size=32, n_refs=3):
    """Fresh reference set for a family, built exactly like training refs."""
    rng = make_rng(seed, 707, sd.FAMILIES.index(family))
    style = sd.sample_style_spec(family, rng)
    content = sd.sample_content_spec(rng)
    sample = sd.render(style, content, seed=int(rng.integers(0, 2**31)), size=size)
    return sd.make_reference_set(sample, n_refs, seed=int(rng.integers(0, 2**31)))


def evaluate_model(
    model,
    n_per_style=50,
    seed=0,
    sampler_steps=25,
    n_refs=3,
    families=sd.FAMILIES,
    centroids=None,
    max_batch=18,
):
    """Sample per (style, shape) pair and score style and semantics.

    Style: Gram nearest-centroid hit rate against the prompted family.
    Semantics: IoU of the detected shape region against the prompted mask.
    Centroids are rebuilt per call unless supplied (pure oracle either way).
    """
    size = model.config.image_size
    centroids = centroids or StyleCentroids(model.frozen, seed=seed, size=size, families=families)
    contents = eval_contents()
    per_shape = [n_per_style // len(contents)] * len(contents)
    for i in range(n_per_style - sum(per_shape)):
        per_shape[i] += 1
    hits = 0
    ious = []
    confusion = {}
    total = 0
    for fi, family in enumerate(families):
        refs = reference_set_for(family, seed, size=size, n_refs=n_refs)
        for ci, (content, count) in enumerate(zip(contents, per_shape)):
            prompts = np.tile(sd.prompt_for(content), (count, 1))
            done = 0
            while done < count:
                k = min(max_batch, count - done)
                images = model.sample(
                    prompts[done : done + k],
                    refs.images,
                    refs.caption_tokens,
                    seed=seed * 1000 + fi * 100 + ci * 10 + done,
                    steps=sampler_steps,
                )
                for img in images:
                    predicted = centroids.classify(model.frozen, img)
                    confusion[(family, predicted)] = confusion.get((family, predicted), 0) + 1
                    hits += predicted == family
                    ious.append(semantic_iou(img, content))
                    total += 1
                done += k
    return EvalReport(
        style_score=hits / total,
        semantic_score=float(np.mean(ious)),
        n_samples=total,
        confusion=confusion,
    )
