"""Pairwise ranking loss -log sigmoid(u . (p - n)) with a per-pair ridge term.

Gradients follow d/dw[-log sigmoid(w)] = -(1 - sigmoid(w)), so subtracting them
moves the positive item's score above the negative's.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from drift.model import GradientBundle

DEFAULT_REG = 0.01


class UndefinedBlockError(ValueError):
    """Block with no negatives or no positives: its loss is 0/0."""


def sigmoid(w):
    """Logistic function without overflow for large |w|."""
    w = np.asarray(w, dtype=float)
    e = np.exp(-np.abs(w))
    out = np.where(w >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out.item() if out.ndim == 0 else out


def softplus_neg(w):
    """-log sigmoid(w) = log(1 + exp(-w)), stable on both tails."""
    w = np.asarray(w, dtype=float)
    out = np.log1p(np.exp(-np.abs(w))) + np.maximum(-w, 0.0)
    return out.item() if out.ndim == 0 else out


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _same_length(*vs: np.ndarray) -> None:
    if len({v.shape[-1] for v in vs}) != 1:
        raise ValueError("vectors must have equal length")


def pair_margin(user, item_pos, item_neg) -> float:
    u, p, n = _vec(user), _vec(item_pos), _vec(item_neg)
    _same_length(u, p, n)
    return float(u @ (p - n))


def pair_loss(user, item_pos, item_neg, reg_weight: float = DEFAULT_REG) -> float:
    u, p, n = _vec(user), _vec(item_pos), _vec(item_neg)
    w = pair_margin(u, p, n)
    ridge = reg_weight * (u @ u + p @ p + n @ n)
    return float(softplus_neg(w) + ridge)


@dataclass
class PairGradients:
    d_user: np.ndarray
    d_item_pos: np.ndarray
    d_item_neg: np.ndarray


def pair_gradients(user, item_pos, item_neg, reg_weight: float = DEFAULT_REG) -> PairGradients:
    u, p, n = _vec(user), _vec(item_pos), _vec(item_neg)
    coef = 1.0 - sigmoid(pair_margin(u, p, n))
    return PairGradients(
        d_user=-coef * (p - n) + 2.0 * reg_weight * u,
        d_item_pos=-coef * u + 2.0 * reg_weight * p,
        d_item_neg=coef * u + 2.0 * reg_weight * n,
    )


def _block_arrays(user, positives, negatives):
    u = _vec(user)
    P = np.asarray(positives, dtype=float).reshape(-1, u.shape[0])
    N = np.asarray(negatives, dtype=float).reshape(-1, u.shape[0])
    if len(P) == 0 or len(N) == 0:
        raise UndefinedBlockError("block needs at least one negative and one positive")
    return u, P, N


def block_loss(user, positives, negatives, reg_weight: float = DEFAULT_REG) -> float:
    """Mean pair loss over negatives x positives."""
    u, P, N = _block_arrays(user, positives, negatives)
    diff = P[None, :, :] - N[:, None, :]  # (n_neg, n_pos, d)
    w = (diff * u).sum(axis=-1)
    ridge = reg_weight * ((u * u).sum() + (P * P).sum(axis=1)[None, :] + (N * N).sum(axis=1)[:, None])
    return float((softplus_neg(w) + ridge).mean())


def block_loss_and_gradients(
    user_id: int,
    user,
    pos_ids: Sequence[int],
    positives,
    neg_ids: Sequence[int],
    negatives,
    reg_weight: float = DEFAULT_REG,
    do_id: int = -1,
) -> tuple[float, GradientBundle]:
    """Block loss plus one scaled gradient triple per (negative, positive) pair.

    Pairs are visited negative-major. Item gradients interleave as
    (positive, negative) per pair, user gradients appear once per pair.
    """
    u, P, N = _block_arrays(user, positives, negatives)
    n_neg, n_pos, d = len(N), len(P), u.shape[0]
    scale = 1.0 / (n_neg * n_pos)

    diff = P[None, :, :] - N[:, None, :]
    w = (diff * u).sum(axis=-1)
    coef = sigmoid(-w)[..., None]  # 1 - sigmoid(w)
    two_reg = 2.0 * reg_weight

    d_user = scale * (-coef * diff + two_reg * u)
    d_pos = scale * (-coef * u + two_reg * P[None, :, :])
    d_neg = scale * (coef * u + two_reg * N[:, None, :])

    item_grads = np.stack([d_pos, d_neg], axis=2).reshape(-1, d)
    pos_ids = np.asarray(pos_ids, dtype=np.int64)
    neg_ids = np.asarray(neg_ids, dtype=np.int64)
    item_ids = np.stack(
        [np.broadcast_to(pos_ids[None, :], (n_neg, n_pos)), np.broadcast_to(neg_ids[:, None], (n_neg, n_pos))],
        axis=2,
    ).reshape(-1)
    user_ids = np.full(n_neg * n_pos, user_id, dtype=np.int64)

    ridge = reg_weight * ((u * u).sum() + (P * P).sum(axis=1)[None, :] + (N * N).sum(axis=1)[:, None])
    loss = float((softplus_neg(w) + ridge).mean())
    return loss, GradientBundle(do_id, user_ids, d_user.reshape(-1, d), item_ids, item_grads)


def block_gradients(
    user_id: int,
    user,
    pos_ids: Sequence[int],
    positives,
    neg_ids: Sequence[int],
    negatives,
    reg_weight: float = DEFAULT_REG,
    do_id: int = -1,
) -> GradientBundle:
    return block_loss_and_gradients(
        user_id, user, pos_ids, positives, neg_ids, negatives, reg_weight, do_id
    )[1]
