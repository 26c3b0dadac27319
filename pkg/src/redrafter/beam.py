"""Draft-side beam search and the dynamic tree structure over its output.

Candidate sequences all have the same length, which lets shared prefixes be
found with plain tensor operations (elementwise match matrix, cumulative sum,
first-match argmax) instead of a trie.  The deduplicated beam is flattened
into a "packed" token list whose ancestor-closure mask drives tree-masked
verification in the base model.
"""

from dataclasses import dataclass

import numpy as np

from . import drafter
from .errors import ConfigError, ContractError

ROOT_PARENT = -1  # parent index meaning "the guaranteed token in committed context"


@dataclass
class Beam:
    """Fixed-length candidate sequences, best first.

    Rows are sorted by cumulative drafter log-probability descending, ties by
    ascending row index.
    """

    tokens: np.ndarray   # (beam_width, beam_length) int64
    logp: np.ndarray     # (beam_width,) float64 cumulative log-probabilities
    states: np.ndarray = None  # (beam_width, d_s) final recurrent states, optional

    @property
    def width(self):
        return self.tokens.shape[0]

    @property
    def length(self):
        return self.tokens.shape[1]


@dataclass
class TreeMask:
    """Ancestor-closure attention mask over packed draft tokens."""

    n: int
    allowed: np.ndarray   # (n, n) bool; allowed[i, j] iff j is i or an ancestor of i
    depths: np.ndarray    # (n,) 1-based distance from the guaranteed token
    parents: np.ndarray   # (n,) parent flat index, ROOT_PARENT at depth 1


@dataclass
class PackedBeam:
    """Deduplicated, flattened beam plus the bookkeeping to map back."""

    tokens: np.ndarray          # (n,) flat draft tokens, candidate-major order
    parents: np.ndarray         # (n,)
    depths: np.ndarray          # (n,)
    owner: np.ndarray           # (n, 2) first-owning (candidate, position)
    candidate_node: np.ndarray  # (beam_width, beam_length) -> flat index
    mask: TreeMask

    @property
    def n(self):
        return self.tokens.shape[0]

    def candidate_path(self, i):
        """Flat indices of candidate i's root-to-leaf path."""
        return self.candidate_node[i]


def beam_search(params, embeddings, h, last_token, beam_width, beam_length):
    """Beam search over drafter log-probabilities.

    Expansion is vocabulary-wide (exact at small vocab sizes); scores are pure
    cumulative log-probabilities, and ties keep the lower flat expansion index
    so runs are deterministic.
    """
    if beam_width < 1 or beam_length < 1:
        raise ConfigError("beam_width and beam_length must be >= 1")
    vocab = params.vocab_size
    if beam_width > vocab:
        raise ConfigError(f"beam_width {beam_width} exceeds vocab size {vocab}")

    state0 = drafter.init_state(h, last_token, embeddings)
    states = state0.s[None, :]
    cum_logp = np.zeros(1)
    tokens = np.zeros((1, 0), dtype=np.int64)

    for _ in range(beam_length):
        logp = drafter.head_logp_batch(states, state0.h, params)
        scores = (cum_logp[:, None] + logp).ravel()
        keep = np.argsort(-scores, kind="stable")[:beam_width]
        parent = keep // vocab
        tok = keep % vocab
        tokens = np.concatenate([tokens[parent], tok[:, None]], axis=1)
        cum_logp = scores[keep]
        states = drafter.step_batch(states[parent], tok, params, embeddings)

    return Beam(tokens=tokens, logp=cum_logp, states=states)


def dedup_prefix(tokens):
    """For each candidate prefix, the smallest candidate index sharing it.

    Returns a (beam_width, beam_length) table where entry (i, j) = k means
    tokens[i][:j+1] == tokens[k][:j+1] and no smaller k qualifies.  Pure
    tensor construction: a pairwise token-match cube, a cumulative sum turning
    token matches into full-prefix matches, and a lowest-index argmax.
    """
    tokens = np.asarray(tokens)
    width, length = tokens.shape
    matches = tokens[:, None, :] == tokens[None, :, :]          # (i, k, pos)
    seq_matches = np.cumsum(matches, axis=2) == np.arange(1, length + 1)
    return np.argmax(seq_matches, axis=1)                        # ties -> lowest k


def pack_beam(beam, prefix_tree):
    """Flatten a beam keeping one copy of each shared prefix token.

    A token (i, j) owns a flat slot iff prefix_tree[i][j] == i; other
    candidates reference the owner's slot.  Flat order is candidate-major,
    position-minor, so parents always precede children.
    """
    tokens = np.asarray(beam.tokens)
    prefix_tree = np.asarray(prefix_tree)
    if prefix_tree.shape != tokens.shape or not np.array_equal(prefix_tree, dedup_prefix(tokens)):
        raise ContractError("prefix_tree is inconsistent with the beam")
    width, length = tokens.shape

    candidate_node = np.full((width, length), -1, dtype=np.int64)
    flat_tokens, parents, depths, owner = [], [], [], []
    for i in range(width):
        for j in range(length):
            if prefix_tree[i, j] == i:
                idx = len(flat_tokens)
                flat_tokens.append(tokens[i, j])
                parents.append(ROOT_PARENT if j == 0 else candidate_node[i, j - 1])
                depths.append(j + 1)
                owner.append((i, j))
                candidate_node[i, j] = idx
            else:
                candidate_node[i, j] = candidate_node[prefix_tree[i, j], j]

    n = len(flat_tokens)
    parents = np.asarray(parents, dtype=np.int64)
    depths = np.asarray(depths, dtype=np.int64)
    allowed = np.zeros((n, n), dtype=bool)
    for i in range(n):
        if parents[i] != ROOT_PARENT:
            allowed[i] = allowed[parents[i]]
        allowed[i, i] = True

    mask = TreeMask(n=n, allowed=allowed, depths=depths, parents=parents)
    return PackedBeam(tokens=np.asarray(flat_tokens, dtype=np.int64), parents=parents,
                      depths=depths, owner=np.asarray(owner, dtype=np.int64),
                      candidate_node=candidate_node, mask=mask)


def compression_ratio(beam, packed):
    """Raw beam token count divided by packed token count (>= 1)."""
    return (beam.width * beam.length) / packed.n
