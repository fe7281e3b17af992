"""Momentum-contrastive training of the domain-agnostic feature extractor.

A query encoder sees style-translated images, a momentum copy of it sees the
untranslated originals, and negatives come from a FIFO dictionary of earlier
keys from the same domain as the positive.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from . import core
from .errors import ContractError, NumericError
from .losses import info_nce
from .networks import Encoder, ProjectionHead


class ContrastiveQueue:
    """Fixed-capacity FIFO of key embeddings, oldest first."""

    def __init__(self, capacity: int, dim: int = 128, dtype=torch.float32):
        if capacity < 1:
            raise ContractError("queue capacity must be positive")
        self.capacity = capacity
        self.entries = torch.zeros((0, dim), dtype=dtype)

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    def enqueue(self, keys) -> None:
        keys = keys.detach()
        if keys.dim() == 1:
            keys = keys.unsqueeze(0)
        self.entries = torch.cat([self.entries, keys.to(self.entries.dtype)])[-self.capacity :].clone()


def negatives_from_queue(queue: ContrastiveQueue):
    return queue.entries


@dataclass
class EncoderPair:
    query_net: Encoder
    query_head: ProjectionHead
    key_net: Encoder
    key_head: ProjectionHead
    m: float = 0.99

    @classmethod
    def from_query(cls, query_net: Encoder, query_head: ProjectionHead, m: float = 0.99) -> "EncoderPair":
        """Key side starts as an exact copy of the query side."""
        key_net = copy.deepcopy(query_net)
        key_head = copy.deepcopy(query_head)
        for p in list(key_net.parameters()) + list(key_head.parameters()):
            p.requires_grad_(False)
        return cls(query_net, query_head, key_net, key_head, m)

    def query_params(self) -> dict:
        out = {f"net.{k}": v for k, v in self.query_net.named_parameters()}
        out.update({f"head.{k}": v for k, v in self.query_head.named_parameters()})
        return out

    def key_params(self) -> dict:
        out = {f"net.{k}": v for k, v in self.key_net.named_parameters()}
        out.update({f"head.{k}": v for k, v in self.key_head.named_parameters()})
        return out


def normalize(z):
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericError("cannot normalize a zero embedding")
    return z / norms


def embed_query(pair: EncoderPair, images):
    return normalize(pair.query_head(pair.query_net.embed(images)))


@torch.no_grad()
def embed_key(pair: EncoderPair, images):
    return normalize(pair.key_head(pair.key_net.embed(images)))


def form_pairs(query_images, key_images, pair: EncoderPair):
    """Embeddings for index-aligned query and positive-key images."""
    if query_images.shape[0] < 1 or query_images.shape[0] != key_images.shape[0]:
        raise ContractError("form_pairs: need equally sized, non-empty batches")
    return embed_query(pair, query_images), embed_key(pair, key_images)


def form_pairs_target(x_s, G_st, pair: EncoderPair):
    """Query is the fake target ``G_st(x_s)``; positive is ``x_s`` itself."""
    with torch.no_grad():
        fake = G_st(x_s)
    return form_pairs(fake, x_s, pair)


def form_pairs_source(x_t, G_ts, pair: EncoderPair):
    """Mirror of :func:`form_pairs_target`: query ``G_ts(x_t)``, positive ``x_t``."""
    with torch.no_grad():
        fake = G_ts(x_t)
    return form_pairs(fake, x_t, pair)


@torch.no_grad()
def momentum_update(pair: EncoderPair) -> EncoderPair:
    qp, kp = pair.query_params(), pair.key_params()
    if list(qp) != list(kp) or any(qp[n].shape != kp[n].shape for n in qp):
        raise ContractError("momentum_update: query and key networks differ in structure")
    if not 0.0 <= pair.m <= 1.0:
        raise ContractError(f"momentum must lie in [0, 1], got {pair.m}")
    for n, k in kp.items():
        k.copy_(pair.m * k + (1.0 - pair.m) * qp[n].detach())
    return pair


def contrastive_step(batch, pair: EncoderPair, queue: ContrastiveQueue, G, tau: float, opt) -> float:
    """One optimisation step; returns the loss value.

    ``batch`` is either the positive image batch (queries are ``G(batch)``)
    or a ``(query_images, key_images)`` tuple when translations are cached.
    ``opt`` must own only the query-side parameters.
    """
    if isinstance(batch, (tuple, list)):
        query_images, key_images = batch
    else:
        with torch.no_grad():
            query_images = G(batch)
        key_images = batch
    params = pair.query_params()
    core.zero_grad(params)
    q, k_pos = form_pairs(query_images, key_images, pair)
    negs = negatives_from_queue(queue)
    loss = info_nce(q, k_pos, negs, tau)
    core.backward(loss, params, retain_graph=False)
    opt.step()
    momentum_update(pair)
    queue.enqueue(k_pos)
    return loss.item()

