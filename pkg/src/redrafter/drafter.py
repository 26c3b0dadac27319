"""Recurrent draft head: embedding-driven RNN state, MLP head with residual
connections over the concatenated state, and analytic gradients for training.

The head is shared across prediction positions, so the parameter count does
not depend on how many future tokens it is trained or asked to predict.
Draft-side math runs in float64: the drafter only proposes tokens (the base
model verifies them), so it has no bit-reproducibility constraint, and the
extra precision keeps finite-difference gradient checks clean.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, VocabError


def silu(x):
    return x / (1.0 + np.exp(-x))


def dsilu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return sig * (1.0 + x * (1.0 - sig))


@dataclass
class DrafterParams:
    """Trainable parameters.

    u, w, b drive the recurrence ``s' = silu(u @ s + w @ e + b)``; the head
    applies ``x <- x + silu(Wm @ x + bm)`` residual layers to the concatenated
    ``[s, h]`` vector followed by a projection to vocab logits.
    """

    u: np.ndarray                 # (d_s, d_s)
    w: np.ndarray                 # (d_s, d_e)
    b: np.ndarray                 # (d_s,)
    mlp: list = field(default_factory=list)   # [(Wm (d_g, d_g), bm (d_g,)), ...]
    out_proj: np.ndarray = None   # (vocab, d_g)

    def __post_init__(self):
        d_s, d_e = self.w.shape
        if self.u.shape != (d_s, d_s) or self.b.shape != (d_s,):
            raise ShapeError(f"inconsistent recurrence shapes: u {self.u.shape}, "
                             f"w {self.w.shape}, b {self.b.shape}")
        d_g = self.out_proj.shape[1]
        if d_g <= d_s:
            raise ShapeError(f"head width {d_g} must exceed state width {d_s}")
        for i, (wm, bm) in enumerate(self.mlp):
            if wm.shape != (d_g, d_g) or bm.shape != (d_g,):
                raise ShapeError(f"mlp layer {i}: expected ({d_g},{d_g})/({d_g},), "
                                 f"got {wm.shape}/{bm.shape}")

    @property
    def d_s(self):
        return self.u.shape[0]

    @property
    def d_e(self):
        return self.w.shape[1]

    @property
    def d_model(self):
        return self.out_proj.shape[1] - self.d_s

    @property
    def vocab_size(self):
        return self.out_proj.shape[0]

    @classmethod
    def random(cls, rng, d_model, vocab_size, n_mlp=2, scale=0.1):
        """Seeded random initialization with d_s = d_e = d_model."""
        d_s = d_model
        d_g = d_s + d_model
        return cls(
            u=rng.normal(0.0, scale, (d_s, d_s)),
            w=rng.normal(0.0, scale, (d_s, d_s)),
            b=np.zeros(d_s),
            mlp=[(rng.normal(0.0, scale, (d_g, d_g)), np.zeros(d_g)) for _ in range(n_mlp)],
            out_proj=rng.normal(0.0, scale, (vocab_size, d_g)),
        )

    def flat_arrays(self):
        """Parameter tensors in a fixed order (for optimizers and serialization)."""
        out = [("u", self.u), ("w", self.w), ("b", self.b)]
        for i, (wm, bm) in enumerate(self.mlp):
            out.append((f"mlp{i}_w", wm))
            out.append((f"mlp{i}_b", bm))
        out.append(("out_proj", self.out_proj))
        return out

    def copy(self):
        return DrafterParams(u=self.u.copy(), w=self.w.copy(), b=self.b.copy(),
                             mlp=[(wm.copy(), bm.copy()) for wm, bm in self.mlp],
                             out_proj=self.out_proj.copy())


@dataclass
class DrafterState:
    """Recurrent state plus the frozen base-model hidden vector for this step."""

    s: np.ndarray  # (d_s,)
    h: np.ndarray  # (d_model,)


def _check_tokens(tokens, vocab_size):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise VocabError(f"token id outside vocab of size {vocab_size}")
    return tokens


def init_state(h, last_token, embeddings):
    """Start the recurrence from the embedding of the last committed token."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if not 0 <= last_token < embeddings.shape[0]:
        raise VocabError(f"token {last_token} outside vocab of size {embeddings.shape[0]}")
    return DrafterState(s=embeddings[last_token].copy(), h=np.asarray(h, dtype=np.float64))


def step(state, token, params, embeddings):
    if params.d_e != params.d_s:
        raise ConfigError("state seeds from the token embedding, so d_s must equal d_e")
    e = init_state(state.h, token, embeddings).s
    pre = params.u @ state.s + params.w @ e + params.b
    return DrafterState(s=silu(pre), h=state.h)


def head_logp(state, params):
    if state.s.shape[0] != params.d_s or state.h.shape[0] != params.d_model:
        raise ShapeError(f"state dims ({state.s.shape[0]},{state.h.shape[0]}) do not match "
                         f"params ({params.d_s},{params.d_model})")
    logp = head_logp_batch(state.s[None, :], state.h[None, :], params)
    return logp[0]


# ---------------------------------------------------------------------------
# batched forward (beam search and training share these)
# ---------------------------------------------------------------------------

def step_batch(s, tokens, params, embeddings):
    """Advance a batch of recurrent states by one token each."""
    e = np.asarray(embeddings, dtype=np.float64)[tokens]
    pre = s @ params.u.T + e @ params.w.T + params.b
    return silu(pre)


def head_logp_batch(s, h, params):
    """Log-probabilities over the vocab for a batch of states. h broadcasts if shared."""
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (s.shape[0], params.d_model))
    x = np.concatenate([s, h], axis=1)
    for wm, bm in params.mlp:
        x = x + silu(x @ wm.T + bm)
    z = x @ params.out_proj.T
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# teacher-forced loss and analytic gradients (reverse accumulation)
# ---------------------------------------------------------------------------

@dataclass
class DrafterGrads:
    u: np.ndarray
    w: np.ndarray
    b: np.ndarray
    mlp: list
    out_proj: np.ndarray

    @classmethod
    def zeros_like(cls, params):
        return cls(u=np.zeros_like(params.u), w=np.zeros_like(params.w),
                   b=np.zeros_like(params.b),
                   mlp=[(np.zeros_like(wm), np.zeros_like(bm)) for wm, bm in params.mlp],
                   out_proj=np.zeros_like(params.out_proj))

    def flat_arrays(self):
        out = [("u", self.u), ("w", self.w), ("b", self.b)]
        for i, (wm, bm) in enumerate(self.mlp):
            out.append((f"mlp{i}_w", wm))
            out.append((f"mlp{i}_b", bm))
        out.append(("out_proj", self.out_proj))
        return out

    def scale(self, c):
        self.u *= c
        self.w *= c
        self.b *= c
        for wm, bm in self.mlp:
            wm *= c
            bm *= c
        self.out_proj *= c
        return self


def batch_loss(params, embeddings, h, s0, teacher, with_grads=True):
    """Summed teacher-forced loss over a batch, optionally with gradients.

    ``s0`` is the batch of initial recurrent states (embeddings of the last
    committed tokens).  Position k's head (evaluated at the state after k-1
    teacher-forced steps) is scored against teacher token k; that token then
    drives the next recurrence step.  Loss is the plain sum over batch and
    positions; callers divide for mean reductions.  The embedding table is
    frozen, so no gradient flows into ``s0``.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    teacher = _check_tokens(teacher, params.vocab_size)
    if teacher.ndim != 2 or teacher.shape[1] < 1:
        raise ContractError("teacher batch must be (batch, T) with T >= 1")
    if params.d_e != params.d_s:
        raise ConfigError("state seeds from the token embedding, so d_s must equal d_e")
    bsz, horizon = teacher.shape
    d_s = params.d_s
    n_mlp = len(params.mlp)
    rows = np.arange(bsz)

    states = [np.asarray(s0, dtype=np.float64)]     # s_0 .. s_{T-1}
    pre_acts = []                                   # recurrence pre-activations
    head_x = []                                     # per position: mlp layer inputs/pre-acts
    head_soft = []                                  # per position: softmax over logits
    loss = 0.0
    for k in range(horizon):
        x = np.concatenate([states[-1], np.broadcast_to(h, (bsz, params.d_model))], axis=1)
        xs, acts = [x], []
        for wm, bm in params.mlp:
            a = x @ wm.T + bm
            x = x + silu(a)
            acts.append(a)
            xs.append(x)
        z = x @ params.out_proj.T
        z = z - z.max(axis=1, keepdims=True)
        logz = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss += -logz[rows, teacher[:, k]].sum()
        if with_grads:
            head_x.append((xs, acts))
            head_soft.append(np.exp(logz))
        if k + 1 < horizon:
            e = emb[teacher[:, k]]
            pre = states[-1] @ params.u.T + e @ params.w.T + params.b
            pre_acts.append((pre, e))
            states.append(silu(pre))

    if not with_grads:
        return float(loss), None

    grads = DrafterGrads.zeros_like(params)
    ds = np.zeros((bsz, d_s))
    for k in range(horizon - 1, -1, -1):
        xs, acts = head_x[k]
        dz = head_soft[k].copy()
        dz[rows, teacher[:, k]] -= 1.0
        grads.out_proj += dz.T @ xs[-1]
        dx = dz @ params.out_proj
        for layer in range(n_mlp - 1, -1, -1):
            wm, _ = params.mlp[layer]
            da = dx * dsilu(acts[layer])
            gw, gb = grads.mlp[layer]
            gw += da.T @ xs[layer]
            gb += da.sum(axis=0)
            dx = dx + da @ wm
        ds += dx[:, :d_s]
        if k > 0:
            pre, e = pre_acts[k - 1]
            dp = ds * dsilu(pre)
            grads.u += dp.T @ states[k - 1]
            grads.w += dp.T @ e
            grads.b += dp.sum(axis=0)
            ds = dp @ params.u
    return float(loss), grads


def backward(teacher_tokens, state_0, params, embeddings):
    """Loss and gradients for one teacher-forced sequence starting at state_0."""
    teacher_tokens = np.asarray(teacher_tokens)
    if teacher_tokens.size == 0:
        raise ContractError("teacher sequence must be non-empty")
    loss, grads = batch_loss(params, embeddings, state_0.h[None, :],
                             state_0.s[None, :], teacher_tokens[None, :])
    return loss, grads
