"""
OOD-aware evaluation: OOD score, OVA classification, AUROC, FPR95 and
selection audits against hidden noise tags.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from scipy.stats import rankdata

from errors import ContractError, UndefinedMetricError
from identify import SamplePartition
from nets import ForwardOutput
from noisegen import LabeledDataset, NoiseTag

logger = logging.getLogger(__name__)

FLOAT_DIGITS = 8


def _first_argmax(values: torch.Tensor) -> np.ndarray:
    # numpy argmax returns the first maximum, i.e. the smallest class id on ties
    return np.argmax(values.detach().cpu().numpy(), axis=-1)


def classify_output(out: ForwardOutput) -> np.ndarray:
    return _first_argmax(out.ova_pos)


def classify(model, x: torch.Tensor) -> np.ndarray:
    """argmax_c p^c(z=1|x); ties go to the smallest class id"""
    with torch.no_grad():
        return classify_output(model(x))


def _neg_at(out: ForwardOutput, classes: np.ndarray) -> np.ndarray:
    neg = out.ova_neg.detach().cpu().numpy()
    return neg[np.arange(len(classes)), classes]


def ood_score_output(out: ForwardOutput) -> np.ndarray:
    return _neg_at(out, _first_argmax(out.proto_logits))


def ood_score(model, x: torch.Tensor) -> np.ndarray:
    """
    s(x) = p^{y_proto}(z=0|x) with y_proto the nearest prototype; higher is more open-set-like.

    Raises:
        ContractError: prototypes not initialized yet
    """
    if not model.has_prototypes:
        raise ContractError("ood_score needs initialized prototypes")
    with torch.no_grad():
        return ood_score_output(model(x))


def ova_route_score(out: ForwardOutput) -> np.ndarray:
    """Warm-up stand-in for ood_score: route by the OVA-predicted class"""
    return _neg_at(out, classify_output(out))


def msp_score(logits: torch.Tensor) -> np.ndarray:
    """1 - max softmax probability, the score of the cross-entropy baseline"""
    probs = torch.softmax(logits.detach(), dim=-1).cpu().numpy()
    return 1.0 - probs.max(axis=-1)


def _check_scores(scores_known, scores_open):
    known = np.asarray(scores_known, dtype=np.float64).ravel()
    opened = np.asarray(scores_open, dtype=np.float64).ravel()
    if known.size == 0 or opened.size == 0:
        raise UndefinedMetricError("AUROC/FPR95 need nonempty known and open score lists")
    return known, opened


def auroc(scores_known, scores_open) -> float:
    """P(open score > known score) + 0.5 * P(equal), from average ranks (open is positive)"""
    known, opened = _check_scores(scores_known, scores_open)
    ranks = rankdata(np.concatenate((opened, known)))
    n_open, n_known = len(opened), len(known)
    u = ranks[:n_open].sum() - n_open * (n_open + 1) / 2.0
    return float(u / (n_open * n_known))


def fpr95(scores_known, scores_open, recall: float = 0.95) -> float:
    """
    Fraction of known scores at or above the threshold where open-set recall reaches 95%.

    The threshold is the largest t with at least ceil(0.95 * n_open) open scores >= t.
    """
    known, opened = _check_scores(scores_known, scores_open)
    needed = int(math.ceil(round(recall * len(opened), 9)))
    threshold = np.sort(opened)[::-1][max(needed, 1) - 1]
    return float((known >= threshold).mean())


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def selection_audit(partition: SamplePartition, hidden_tags: np.ndarray) -> Dict[str, Optional[float]]:
    """Precision/recall of each identified subset against the hidden noise tags (None on empty sets)"""
    hidden_tags = np.asarray(hidden_tags)
    audit: Dict[str, Optional[float]] = {}
    for name, idx, tag in (("clean", partition.clean_idx, NoiseTag.CLEAN),
                           ("close", partition.close_idx, NoiseTag.CLOSED),
                           ("open", partition.open_idx, NoiseTag.OPEN)):
        hits = int((hidden_tags[idx] == tag).sum())
        audit[f"{name}_precision"] = _ratio(hits, len(idx))
        audit[f"{name}_recall"] = _ratio(hits, int((hidden_tags == tag).sum()))
    return audit


@dataclass
class MetricsReport:
    """One epoch of metrics; None marks a metric without a defined value"""
    epoch: int
    phase: str
    lr: float
    accuracy: float
    auroc: Optional[float] = None
    fpr95: Optional[float] = None
    mean_score_known: Optional[float] = None
    mean_score_open: Optional[float] = None
    clean_precision: Optional[float] = None
    clean_recall: Optional[float] = None
    close_precision: Optional[float] = None
    close_recall: Optional[float] = None
    open_precision: Optional[float] = None
    open_recall: Optional[float] = None
    n_clean: Optional[int] = None
    n_close: Optional[int] = None
    n_open: Optional[int] = None
    losses: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        """JSON-ready dict with floats rounded so records compare byte-for-byte"""
        def fmt(value):
            if isinstance(value, float):
                return round(value, FLOAT_DIGITS) if math.isfinite(value) else None
            if isinstance(value, dict):
                return {k: fmt(v) for k, v in value.items()}
            return value
        return {key: fmt(value) for key, value in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


@torch.no_grad()
def evaluate_model(model, test_set: LabeledDataset, batch_size: int = 1024, device: str = "cpu",
                   method: str = "dual") -> Dict[str, Optional[float]]:
    """
    Known-class accuracy and OOD metrics on a test split.

    Accuracy counts known-class samples only. OOD scores use the prototype route once
    prototypes exist, the OVA route before that, and MSP for the cross-entropy baseline.
    AUROC/FPR95 are None when the split has no open-set samples.
    """
    was_training = model.training
    model.eval()
    x = torch.as_tensor(test_set.features, dtype=torch.float32)
    preds, scores = [], []
    try:
        for start in range(0, x.shape[0], batch_size):
            out = model(x[start:start + batch_size].to(device))
            if method == "ce":
                preds.append(_first_argmax(out.ova_logits))
                scores.append(msp_score(out.ova_logits))
            else:
                preds.append(classify_output(out))
                scores.append(ood_score_output(out) if model.has_prototypes else ova_route_score(out))
    finally:
        model.train(was_training)

    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    score = np.concatenate(scores) if scores else np.zeros(0)
    is_open = test_set.true_label >= test_set.num_classes
    known = ~is_open
    result: Dict[str, Optional[float]] = {
        "accuracy": float((pred[known] == test_set.true_label[known]).mean()) if known.any() else None,
        "auroc": None,
        "fpr95": None,
        "mean_score_known": float(score[known].mean()) if known.any() else None,
        "mean_score_open": float(score[is_open].mean()) if is_open.any() else None,
    }
    if is_open.any() and known.any():
        result["auroc"] = auroc(score[known], score[is_open])
        result["fpr95"] = fpr95(score[known], score[is_open])
    return result


def write_summary(path: Union[str, Path], summary: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return path
