"""
Margin-based sample identification.

An EmbeddingBank snapshots embeddings and OVA probabilities once per epoch. From it
the neighbor label (softmax-weighted k-NN aggregate of neighbors' OVA positives) and
the neighbor margin drive class-balanced clean selection; the negative margin filters
open-set noise; what remains is closed-set noise weighted by its neighbor margin.
Ties are broken by ascending sample index everywhere.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from errors import ContractError
from noisegen import NoiseTag

logger = logging.getLogger(__name__)


class Subset(IntEnum):
    CLEAN = 0
    CLOSE = 1
    OPEN = 2


@dataclass(frozen=True)
class EmbeddingBank:
    """Per-epoch snapshot of unit embeddings and OVA probabilities for the train set"""
    z: torch.Tensor
    ova_pos: torch.Tensor
    ova_neg: torch.Tensor
    labels: torch.Tensor
    epoch: int

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def num_classes(self) -> int:
        return self.ova_pos.shape[1]


@torch.no_grad()
def build_bank(model, features: Union[np.ndarray, torch.Tensor], labels: Union[np.ndarray, torch.Tensor],
               epoch: int = 0, batch_size: int = 1024, device: str = "cpu") -> EmbeddingBank:
    """Forward the whole train set in eval mode (no augmentation) and snapshot the outputs"""
    was_training = model.training
    model.eval()
    x = torch.as_tensor(features, dtype=torch.float32)
    z_parts, pos_parts, neg_parts = [], [], []
    try:
        for start in range(0, x.shape[0], batch_size):
            out = model(x[start:start + batch_size].to(device))
            z_parts.append(out.z.cpu())
            pos_parts.append(out.ova_pos.cpu())
            neg_parts.append(out.ova_neg.cpu())
    finally:
        model.train(was_training)
    return EmbeddingBank(
        z=torch.cat(z_parts),
        ova_pos=torch.cat(pos_parts),
        ova_neg=torch.cat(neg_parts),
        labels=torch.as_tensor(labels, dtype=torch.long).clone(),
        epoch=epoch,
    )


def _clamp_k(k: int, n: int) -> int:
    if k >= n:
        logger.warning("k=%d neighbors requested from %d samples; clamping to %d", k, n, n - 1)
        return n - 1
    return k


def knn(bank: EmbeddingBank, k: int, rows: Optional[np.ndarray] = None,
        chunk: int = 1024) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact k nearest neighbors by cosine similarity, excluding the sample itself.

    Returns:
        (indices, similarities), each (len(rows), k), nearest first
    """
    n = bank.size
    k = _clamp_k(k, n)
    rows = np.arange(n) if rows is None else np.asarray(rows)
    z = bank.z.double().numpy()
    indices = np.empty((len(rows), k), dtype=np.int64)
    sims = np.empty((len(rows), k), dtype=np.float64)
    for start in range(0, len(rows), chunk):
        block = rows[start:start + chunk]
        s = z[block] @ z.T
        s[np.arange(len(block)), block] = -np.inf
        order = np.argsort(-s, axis=1, kind="stable")[:, :k]
        indices[start:start + len(block)] = order
        sims[start:start + len(block)] = np.take_along_axis(s, order, axis=1)
    return indices, sims


def _aggregate(bank: EmbeddingBank, indices: np.ndarray, sims: np.ndarray, tau: float) -> np.ndarray:
    weights = torch.softmax(torch.as_tensor(sims) / tau, dim=1).numpy()
    pos = bank.ova_pos.double().numpy()
    return np.einsum("nk,nkc->nc", weights, pos[indices])


def neighbor_label(bank: EmbeddingBank, i: int, k: int, tau: float) -> np.ndarray:
    """q_Neigh for one sample: softmax(z_i . z_j / tau)-weighted sum of neighbors' p^c(z=1)"""
    indices, sims = knn(bank, k, rows=np.array([i]))
    return _aggregate(bank, indices, sims, tau)[0]


def neighbor_labels(bank: EmbeddingBank, k: int, tau: float) -> np.ndarray:
    """q_Neigh for every sample, shape (N, C)"""
    indices, sims = knn(bank, k)
    return _aggregate(bank, indices, sims, tau)


def neighbor_margin(q: np.ndarray, y: Union[int, np.ndarray], K: int) -> Union[float, np.ndarray]:
    """q^y minus the mean of the top-K entries over j != y; range [-1, 1]"""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = q[None, :] if single else q
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    C = q2.shape[1]
    if K > C - 1:
        logger.warning("K=%d exceeds C-1=%d; clamping", K, C - 1)
        K = C - 1
    rows = np.arange(len(q2))
    label_prob = q2[rows, y]
    if K == 0:
        margins = label_prob
    else:
        others = q2.copy()
        others[rows, y] = -np.inf
        top = -np.sort(-others, axis=1)[:, :K]
        margins = label_prob - top.mean(axis=1)
    return float(margins[0]) if single else margins


def _budget(fraction: float, count: int) -> int:
    # rounding guards against 0.9 * 10 = 9.000000000000002
    return int(math.ceil(round(fraction * count, 9)))


def select_clean(margins: np.ndarray, labels: np.ndarray, neighbor_argmax: np.ndarray, alpha_id: float,
                 num_classes: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Class-balanced clean selection.

    Per class c, n_c counts samples labelled c whose neighbor label argmax is c; the
    top ceil(alpha_id * n_c) samples of class c by descending margin are kept. A
    class with n_c = 0 keeps its single highest-margin sample.

    Returns:
        (sorted clean indices, per-class cutoff gamma_c; NaN for classes with no samples)
    """
    margins = np.asarray(margins, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    neighbor_argmax = np.asarray(neighbor_argmax, dtype=np.int64)
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    gamma = np.full(C, np.nan)
    chosen = []
    for c in range(C):
        rows = np.flatnonzero(labels == c)
        if len(rows) == 0:
            logger.warning("Class %d has no samples; nothing to select", c)
            continue
        n_c = int((neighbor_argmax[rows] == c).sum())
        if n_c == 0:
            logger.warning("Class %d has zero consistency degree; keeping its highest-margin sample", c)
            budget = 1
        else:
            budget = min(len(rows), _budget(alpha_id, n_c))
        order = rows[np.lexsort((rows, -margins[rows]))][:budget]
        gamma[c] = margins[order[-1]]
        chosen.append(order)
    clean_idx = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    return clean_idx, gamma


def negative_margin(neg_probs: np.ndarray, y: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
    """|p^y(z=0) - max_{j != y} p^j(z=0)|; smaller means more open-set-like"""
    neg = np.asarray(neg_probs, dtype=np.float64)
    single = neg.ndim == 1
    neg2 = neg[None, :] if single else neg
    if neg2.shape[1] < 2:
        raise ContractError("negative_margin needs at least two classes")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(len(neg2))
    others = neg2.copy()
    others[rows, y] = -np.inf
    margins = np.abs(neg2[rows, y] - others.max(axis=1))
    return float(margins[0]) if single else margins


def select_open(neg_margins: np.ndarray, clean_idx: np.ndarray, alpha_ood: float) -> Tuple[np.ndarray, float]:
    """
    Among non-clean samples take the floor(alpha_ood * N) smallest negative margins.

    Returns:
        (sorted open indices, gamma_Neg = largest selected margin, NaN when none)
    """
    neg_margins = np.asarray(neg_margins, dtype=np.float64)
    n = len(neg_margins)
    candidates = np.setdiff1d(np.arange(n), np.asarray(clean_idx, dtype=np.int64))
    quota = int(math.floor(round(alpha_ood * n, 9)))
    if quota > len(candidates):
        logger.warning("Open-set quota %d exceeds %d non-clean samples; taking all", quota, len(candidates))
        quota = len(candidates)
    order = candidates[np.lexsort((candidates, neg_margins[candidates]))][:quota]
    gamma_neg = float(neg_margins[order].max()) if len(order) else float("nan")
    return np.sort(order), gamma_neg


def assign_weights(clean_idx: np.ndarray, open_idx: np.ndarray, margins: np.ndarray) -> np.ndarray:
    """1 on clean, 0 on open, (M_i + 1) / (M_max + 1) on the remaining close samples"""
    margins = np.asarray(margins, dtype=np.float64)
    weights = np.zeros(len(margins))
    m_max = float(margins.max()) if len(margins) else 0.0
    if m_max + 1.0 <= 0.0:
        logger.warning("Maximum neighbor margin is -1; close-set weights fall back to 0.5")
        weights[:] = 0.5
    else:
        weights[:] = np.clip((margins + 1.0) / (m_max + 1.0), 0.0, 1.0)
    weights[np.asarray(clean_idx, dtype=np.int64)] = 1.0
    weights[np.asarray(open_idx, dtype=np.int64)] = 0.0
    return weights


@dataclass
class SamplePartition:
    """Per-epoch split of the train set into clean / close / open with sample weights"""
    clean_idx: np.ndarray
    close_idx: np.ndarray
    open_idx: np.ndarray
    weights: np.ndarray
    margins_neigh: np.ndarray
    margins_neg: np.ndarray
    gamma_c: np.ndarray
    gamma_neg: float
    epoch: int = 0
    neighbor_argmax: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.weights)

    def membership(self) -> np.ndarray:
        codes = np.full(self.size, -1, dtype=np.int64)
        codes[self.clean_idx] = Subset.CLEAN
        codes[self.close_idx] = Subset.CLOSE
        codes[self.open_idx] = Subset.OPEN
        return codes

    def check(self):
        """
        Raises:
            ContractError: the three sets do not partition 0..N-1
        """
        everything = np.concatenate((self.clean_idx, self.close_idx, self.open_idx))
        if len(everything) != self.size or not np.array_equal(np.sort(everything), np.arange(self.size)):
            raise ContractError("clean/close/open sets must partition the train set")

    def counts(self) -> Dict[str, int]:
        return {"n_clean": len(self.clean_idx), "n_close": len(self.close_idx), "n_open": len(self.open_idx)}


def all_clean_partition(n: int, epoch: int = 0) -> SamplePartition:
    """Warm-up partition: every sample clean with weight 1"""
    return SamplePartition(
        clean_idx=np.arange(n), close_idx=np.zeros(0, dtype=np.int64), open_idx=np.zeros(0, dtype=np.int64),
        weights=np.ones(n), margins_neigh=np.zeros(n), margins_neg=np.zeros(n),
        gamma_c=np.zeros(0), gamma_neg=float("nan"), epoch=epoch,
    )


def identify_samples(bank: EmbeddingBank, k: int, tau: float, K: int, alpha_id: float,
                     alpha_ood: float) -> SamplePartition:
    """Run neighbor margin, clean selection, negative margin, open filtering and weighting"""
    labels = bank.labels.numpy()
    q = neighbor_labels(bank, k, tau)
    margins_neigh = neighbor_margin(q, labels, K)
    neighbor_argmax = q.argmax(axis=1)
    clean_idx, gamma_c = select_clean(margins_neigh, labels, neighbor_argmax, alpha_id, bank.num_classes)

    margins_neg = negative_margin(bank.ova_neg.double().numpy(), labels)
    open_idx, gamma_neg = select_open(margins_neg, clean_idx, alpha_ood)

    close_idx = np.setdiff1d(np.arange(bank.size), np.concatenate((clean_idx, open_idx)))
    weights = assign_weights(clean_idx, open_idx, margins_neigh)
    partition = SamplePartition(
        clean_idx=clean_idx, close_idx=close_idx, open_idx=open_idx, weights=weights,
        margins_neigh=margins_neigh, margins_neg=margins_neg, gamma_c=gamma_c, gamma_neg=gamma_neg,
        epoch=bank.epoch, neighbor_argmax=neighbor_argmax,
    )
    partition.check()
    logger.debug("epoch %d partition: %s", bank.epoch, partition.counts())
    return partition


def init_prototypes(bank: EmbeddingBank, clean_idx: np.ndarray, num_classes: Optional[int] = None,
                    seed: int = 0) -> torch.Tensor:
    """P_c = normalize(mean of clean embeddings labelled c); random unit vector on cancellation"""
    C = bank.num_classes if num_classes is None else num_classes
    gen = torch.Generator().manual_seed(seed)
    clean_idx = torch.as_tensor(np.asarray(clean_idx, dtype=np.int64))
    z = bank.z[clean_idx]
    labels = bank.labels[clean_idx]
    prototypes = torch.empty(C, bank.z.shape[1], dtype=bank.z.dtype)
    for c in range(C):
        members = z[labels == c]
        mean = members.mean(dim=0) if len(members) else torch.zeros(bank.z.shape[1], dtype=bank.z.dtype)
        norm = mean.norm()
        if len(members) == 0 or norm < 1e-8:
            logger.warning("Prototype %d has no usable clean mean; using a random unit vector", c)
            mean = torch.randn(bank.z.shape[1], generator=gen).to(bank.z.dtype)
            norm = mean.norm()
        prototypes[c] = mean / norm
    return prototypes


def write_identification_report(path: Union[str, Path], partition: SamplePartition,
                                noise_tags: Optional[np.ndarray] = None) -> Path:
    """One JSONL record per train sample: margins, subset, weight and the hidden noise tag"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    membership = partition.membership()
    with open(path, "w", encoding="utf-8") as f:
        for i in range(partition.size):
            record = {
                "index": i,
                "M_Neigh": round(float(partition.margins_neigh[i]), 8),
                "M_Neg": round(float(partition.margins_neg[i]), 8),
                "partition": Subset(int(membership[i])).name.lower(),
                "weight": round(float(partition.weights[i]), 8),
                "noise_tag": NoiseTag(int(noise_tags[i])).label if noise_tags is not None else None,
            }
            f.write(json.dumps(record) + "\n")
    return path
