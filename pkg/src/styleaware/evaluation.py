"""Style-transfer deception rate.

The deception rate of a stylizer for a target artist is the fraction of its
outputs that an artist classifier attributes to that artist.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Union

import numpy as np
import torch

from .errors import ClassifierError, StyleAwareError
from .grouping import ArtistClassifier, StyleSet, predict
from .imaging import stylize_image


class EvaluationError(StyleAwareError):
    pass


@dataclass
class DeceptionReport:
    per_style: Dict[str, float]
    mean_rate: float
    n_images_per_style: int
    classifier_holdout_accuracy: float
    records: List[dict] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("records")
        return {"type": "summary", **out}

    def write(self, path) -> None:
        """One JSON record per (style, image, predicted artist), then the summary."""
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps({"type": "prediction", **rec}, sort_keys=True) + "\n")
            fh.write(json.dumps(self.summary(), sort_keys=True) + "\n")


def deception_rate(stylized: Sequence[torch.Tensor], target_artist: str, classifier: ArtistClassifier) -> float:
    if len(stylized) == 0:
        raise EvaluationError("deception rate needs at least one image")
    target = classifier.label_index(target_artist)
    preds = predict(classifier, list(stylized))
    return float(np.count_nonzero(preds == target)) / len(preds)


def _as_callable(stylizer) -> Callable:
    if callable(stylizer) and not isinstance(stylizer, torch.nn.Module):
        return stylizer
    return lambda x: stylize_image(stylizer, x)


def evaluate_suite(
    stylizers: Mapping[str, object],
    content: Union[Mapping[str, torch.Tensor], Sequence[torch.Tensor]],
    styles: Sequence[StyleSet],
    classifier: ArtistClassifier,
    n_per_style: int,
    seed: int = 0,
) -> DeceptionReport:
    """Deception rate of every style's stylizer on ``n_per_style`` content images.

    ``stylizers`` maps a style's ``query_id`` to either trained networks or a
    plain callable on ``[1, 3, H, W]`` batches.  Each ``StyleSet`` must carry
    the target ``artist``.  Content images are drawn with a generator seeded
    by ``(seed, style position)``.
    """
    if n_per_style <= 0:
        raise EvaluationError("n_per_style must be positive")
    if not styles:
        raise EvaluationError("no styles to evaluate")
    if isinstance(content, Mapping):
        names, images = list(content.keys()), list(content.values())
    else:
        names, images = [str(i) for i in range(len(content))], list(content)
    if not images:
        raise EvaluationError("content corpus is empty")

    per_style, records = {}, []
    for pos, style in enumerate(styles):
        if style.artist is None:
            raise EvaluationError(f"style {style.query_id}: no target artist set")
        if style.query_id not in stylizers:
            raise EvaluationError(f"style {style.query_id}: no stylizer given")
        run = _as_callable(stylizers[style.query_id])
        rng = np.random.default_rng([seed, pos])
        picks = rng.choice(len(images), size=n_per_style, replace=n_per_style > len(images))
        outputs = []
        for k in picks:
            x = images[k] if images[k].dim() == 4 else images[k].unsqueeze(0)
            try:
                outputs.append(run(x))
            except Exception as exc:
                raise EvaluationError(f"style {style.query_id}, image {names[k]}: {exc}") from exc
        try:
            target = classifier.label_index(style.artist)
            preds = predict(classifier, [o[0] if o.dim() == 4 else o for o in outputs])
        except ClassifierError as exc:
            raise EvaluationError(f"style {style.query_id}: {exc}") from exc
        per_style[style.query_id] = float(np.count_nonzero(preds == target)) / len(preds)
        for k, p in zip(picks, preds):
            records.append({"style": style.query_id, "image": names[k],
                            "predicted": classifier.labels[int(p)], "target": style.artist})
    mean = float(np.mean(list(per_style.values())))
    return DeceptionReport(per_style, mean, n_per_style, float(classifier.holdout_accuracy), records)
