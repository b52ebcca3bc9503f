"""Minibatch SGD on the hinge objective plus block support reassignment.

The parameters split into a dense partition (embeddings, concept matrices,
pre-softmax scores), trained by SGD with the assignment vectors held
fixed, and a sparse partition (the assignment vectors themselves), updated
by periodically scoring every concept as the sole projector of each
relation side and keeping the k cheapest.  Entity rows are renormalized to
unit length after every optimizer step.

Energies of projected vectors are additionally kept near the unit ball by
a hinged penalty on the squared projected norms, since the projected
vectors are derived quantities rather than stored parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import TripleStore
from .model import (
    SIDE_HEAD,
    SIDE_TAIL,
    Hyperparams,
    ModelParams,
    attention_vector,
    composed_matrix,
    init_params,
    single_matrix_energy,
)
from .sampling import DomainSampler, corrupt_batch


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable optimization failure."""


def hinge_loss(pos_energy: float, neg_energy: float, gamma: float) -> float:
    """max(gamma + pos - neg, 0)."""
    return max(gamma + pos_energy - neg_energy, 0.0)


def _norms(u: np.ndarray, ell: int) -> np.ndarray:
    if ell == 1:
        return np.abs(u).sum(axis=1)
    return np.sqrt((u * u).sum(axis=1))


def _norm_grad(u: np.ndarray, norms: np.ndarray, ell: int) -> np.ndarray:
    """Subgradient of the norm; 0 at the nondifferentiable points."""
    if ell == 1:
        return np.sign(u)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms[:, None] > 0, u / safe[:, None], 0.0)


@dataclass
class _RelationCtx:
    """Per-batch cache for one relation: support, attention, projector."""

    rows: np.ndarray            # batch positions using this relation
    act_h: np.ndarray           # active head concept indices
    act_t: np.ndarray
    alpha_h: np.ndarray         # attention over act_h
    alpha_t: np.ndarray
    w_h: np.ndarray             # (n, n) materialized projectors
    w_t: np.ndarray


def _relation_contexts(params: ModelParams, hp: Hyperparams, rels: np.ndarray) -> dict[int, _RelationCtx]:
    ctxs: dict[int, _RelationCtx] = {}
    uniq, inv = np.unique(rels, return_inverse=True)
    D = params.concept_tensor
    for u, r in enumerate(uniq):
        r = int(r)
        ah_full = attention_vector(params, hp, r, SIDE_HEAD)
        at_full = attention_vector(params, hp, r, SIDE_TAIL)
        act_h = np.nonzero(ah_full)[0]
        act_t = np.nonzero(at_full)[0]
        w_h = (
            np.tensordot(ah_full[act_h], D[act_h], axes=(0, 0))
            if len(act_h)
            else np.zeros((params.n, params.n))
        )
        w_t = (
            np.tensordot(at_full[act_t], D[act_t], axes=(0, 0))
            if len(act_t)
            else np.zeros((params.n, params.n))
        )
        ctxs[r] = _RelationCtx(
            rows=np.nonzero(inv == u)[0],
            act_h=act_h,
            act_t=act_t,
            alpha_h=ah_full[act_h],
            alpha_t=at_full[act_t],
            w_h=w_h,
            w_t=w_t,
        )
    return ctxs


def _forward(params: ModelParams, hp: Hyperparams, pos: np.ndarray, neg: np.ndarray):
    """Shared forward pass over a batch of (positive, corrupted) pairs.

    Returns everything both the loss and the gradients need: projected
    entities, norm subgradient inputs, hinge activity, penalty slacks, and
    the per-relation contexts.
    """
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 3)
    h, r, t = pos[:, 0], pos[:, 1], pos[:, 2]
    h2, t2 = neg[:, 0], neg[:, 2]
    ent = params.entity_emb
    eh, et, eh2, et2 = ent[h], ent[t], ent[h2], ent[t2]

    translating = hp.model == "transe"
    if translating:
        ctxs = {}
        ph, pt, ph2, pt2 = eh, et, eh2, et2
    else:
        ctxs = _relation_contexts(params, hp, r)
        ph = np.empty_like(eh)
        pt = np.empty_like(et)
        ph2 = np.empty_like(eh2)
        pt2 = np.empty_like(et2)
        for rr, ctx in ctxs.items():
            idx = ctx.rows
            heads = np.concatenate([eh[idx], eh2[idx]]) @ ctx.w_h.T
            tails = np.concatenate([et[idx], et2[idx]]) @ ctx.w_t.T
            b = len(idx)
            ph[idx], ph2[idx] = heads[:b], heads[b:]
            pt[idx], pt2[idx] = tails[:b], tails[b:]

    rv = params.relation_emb[r]
    u_pos = ph + rv - pt
    u_neg = ph2 + rv - pt2
    e_pos = _norms(u_pos, hp.ell)
    e_neg = _norms(u_neg, hp.ell)
    margins = hp.gamma + e_pos - e_neg
    active = margins > 0
    # maximum() propagates NaN energies into the loss so the caller's
    # finite check can abort with diagnostics
    loss = float(np.maximum(margins, 0.0).sum())

    # hinged penalty keeping projected positive entities near unit norm
    q_h = q_t = None
    if hp.proj_penalty > 0 and not translating:
        slack_h = (ph * ph).sum(axis=1) - 1.0
        slack_t = (pt * pt).sum(axis=1) - 1.0
        loss += hp.proj_penalty * (
            float(np.clip(slack_h, 0, None).sum()) + float(np.clip(slack_t, 0, None).sum())
        )
        q_h = 2.0 * hp.proj_penalty * ph * (slack_h > 0)[:, None]
        q_t = 2.0 * hp.proj_penalty * pt * (slack_t > 0)[:, None]

    if hp.attention_mode == "dense_l1" and not translating:
        for rr, ctx in ctxs.items():
            weight_mass = np.abs(params.head_scores[rr]).sum() + np.abs(params.tail_scores[rr]).sum()
            loss += hp.l1_coef * weight_mass * len(ctx.rows)

    return {
        "pos": pos, "neg": neg, "ctxs": ctxs, "loss": loss,
        "eh": eh, "et": et, "eh2": eh2, "et2": et2,
        "ph": ph, "pt": pt,
        "u_pos": u_pos, "u_neg": u_neg, "e_pos": e_pos, "e_neg": e_neg,
        "active": active, "q_h": q_h, "q_t": q_t,
    }


def batch_loss(params: ModelParams, hp: Hyperparams, pos: np.ndarray, neg: np.ndarray) -> float:
    """Total batch objective (hinge terms plus any penalties)."""
    return _forward(params, hp, pos, neg)["loss"]


def batch_gradients(params: ModelParams, hp: Hyperparams, pos: np.ndarray, neg: np.ndarray):
    """Subgradients of :func:`batch_loss` w.r.t. the dense partition.

    Returns ``(loss, grads)`` where grads holds sparse per-id updates:
    ``entity`` / ``relation`` as (ids, rows), ``concept`` as {slice: (n, n)},
    ``head_scores`` / ``tail_scores`` as {relation: (m,)}.
    """
    fw = _forward(params, hp, pos, neg)
    pos, neg, ctxs = fw["pos"], fw["neg"], fw["ctxs"]
    h, r, t = pos[:, 0], pos[:, 1], pos[:, 2]
    h2, t2 = neg[:, 0], neg[:, 2]
    active = fw["active"]

    g_pos = _norm_grad(fw["u_pos"], fw["e_pos"], hp.ell) * active[:, None]
    g_neg = _norm_grad(fw["u_neg"], fw["e_neg"], hp.ell) * active[:, None]
    q_h, q_t = fw["q_h"], fw["q_t"]
    coef_h = g_pos if q_h is None else g_pos + q_h         # multiplies h rows
    coef_t = -g_pos if q_t is None else -g_pos + q_t       # multiplies t rows

    translating = hp.model == "transe"
    n = params.n
    if translating:
        gh, gt, gh2, gt2 = coef_h, coef_t, -g_neg, g_neg
    else:
        gh = np.empty_like(coef_h)
        gt = np.empty_like(coef_t)
        gh2 = np.empty_like(g_neg)
        gt2 = np.empty_like(g_neg)
        for rr, ctx in ctxs.items():
            idx = ctx.rows
            heads = np.concatenate([coef_h[idx], -g_neg[idx]]) @ ctx.w_h
            tails = np.concatenate([coef_t[idx], g_neg[idx]]) @ ctx.w_t
            b = len(idx)
            gh[idx], gh2[idx] = heads[:b], heads[b:]
            gt[idx], gt2[idx] = tails[:b], tails[b:]

    ids = np.concatenate([h, t, h2, t2])
    vecs = np.concatenate([gh, gt, gh2, gt2])
    uids, uinv = np.unique(ids, return_inverse=True)
    ent_acc = np.zeros((len(uids), n))
    np.add.at(ent_acc, uinv, vecs)

    rvecs = g_pos - g_neg
    urel = np.unique(r)
    rel_acc = np.zeros((len(urel), n))
    np.add.at(rel_acc, np.searchsorted(urel, r), rvecs)

    grads = {
        "entity": (uids, ent_acc),
        "relation": (urel, rel_acc),
        "concept": {},
        "head_scores": {},
        "tail_scores": {},
    }
    if translating:
        return fw["loss"], grads

    D = params.concept_tensor
    eh, et, eh2, et2 = fw["eh"], fw["et"], fw["eh2"], fw["et2"]
    concept_acc: dict[int, np.ndarray] = grads["concept"]
    for rr, ctx in ctxs.items():
        idx = ctx.rows
        s_head = (
            np.concatenate([coef_h[idx], -g_neg[idx]]).T
            @ np.concatenate([eh[idx], eh2[idx]])
        )
        s_tail = (
            np.concatenate([coef_t[idx], g_neg[idx]]).T
            @ np.concatenate([et[idx], et2[idx]])
        )
        for a, i in enumerate(ctx.act_h):
            i = int(i)
            g = ctx.alpha_h[a] * s_head
            if i in concept_acc:
                concept_acc[i] += g
            else:
                concept_acc[i] = g
        for a, i in enumerate(ctx.act_t):
            i = int(i)
            g = ctx.alpha_t[a] * s_tail
            if i in concept_acc:
                concept_acc[i] += g
            else:
                concept_acc[i] = g

        if hp.attention_mode == "dense_l1":
            a_head = np.einsum("ijk,jk->i", D, s_head)
            a_tail = np.einsum("ijk,jk->i", D, s_tail)
            l1 = hp.l1_coef * len(idx)
            grads["head_scores"][rr] = a_head + l1 * np.sign(params.head_scores[rr])
            grads["tail_scores"][rr] = a_tail + l1 * np.sign(params.tail_scores[rr])
        else:
            gv_h = np.zeros(params.m)
            gv_t = np.zeros(params.m)
            if len(ctx.act_h):
                a_act = np.einsum("ijk,jk->i", D[ctx.act_h], s_head)
                gv_h[ctx.act_h] = ctx.alpha_h / hp.tau * (a_act - ctx.alpha_h @ a_act)
            if len(ctx.act_t):
                a_act = np.einsum("ijk,jk->i", D[ctx.act_t], s_tail)
                gv_t[ctx.act_t] = ctx.alpha_t / hp.tau * (a_act - ctx.alpha_t @ a_act)
            grads["head_scores"][rr] = gv_h
            grads["tail_scores"][rr] = gv_t

    return fw["loss"], grads


def apply_gradients(params: ModelParams, hp: Hyperparams, grads: dict) -> None:
    """One lr-scaled step, then renormalize every touched entity row.

    Rows whose step is exactly zero are left alone: they are already unit
    norm from the previous step, so skipping keeps null updates bitwise
    null instead of churning last bits through a redundant renormalize.
    """
    lr = hp.lr
    uids, ent_acc = grads["entity"]
    delta = lr * ent_acc
    moved = np.any(delta != 0.0, axis=1)
    if moved.any():
        uids = uids[moved]
        params.entity_emb[uids] -= delta[moved]
        rows = params.entity_emb[uids]
        nrm = np.linalg.norm(rows, axis=1, keepdims=True)
        nrm[nrm == 0] = 1.0
        params.entity_emb[uids] = rows / nrm

    urel, rel_acc = grads["relation"]
    params.relation_emb[urel] -= lr * rel_acc
    for i, g in grads["concept"].items():
        params.concept_tensor[i] -= lr * g
    for rr, g in grads["head_scores"].items():
        params.head_scores[rr] -= lr * g
    for rr, g in grads["tail_scores"].items():
        params.tail_scores[rr] -= lr * g
    if hp.attention_mode == "dense_l1":
        for rr in grads["head_scores"]:
            np.maximum(params.head_scores[rr], 0.0, out=params.head_scores[rr])
            np.maximum(params.tail_scores[rr], 0.0, out=params.tail_scores[rr])


@dataclass
class TrainState:
    """Mutable optimization state threaded through epochs."""

    params: ModelParams
    rng: np.random.Generator
    block_rng: np.random.Generator
    sampler: DomainSampler
    epoch: int = 0
    running_loss: float = 0.0
    next_block_epoch: int = 0


def make_state(
    store: TripleStore,
    hp: Hyperparams,
    seed: int,
    warm_start: ModelParams | None = None,
) -> TrainState:
    params = init_params(store.n_entities, store.n_relations, hp, seed, warm_start)
    ss = np.random.SeedSequence([seed, 0x5D])
    epoch_child, block_child = ss.spawn(2)
    rng = np.random.default_rng(epoch_child)
    return TrainState(
        params=params,
        rng=rng,
        block_rng=np.random.default_rng(block_child),
        sampler=DomainSampler(store, hp.domain_lambda, rng),
        next_block_epoch=hp.block_every if _block_updates_enabled(hp) else 0,
    )


def _block_updates_enabled(hp: Hyperparams) -> bool:
    return hp.model == "itransf" and hp.attention_mode == "sparse"


def sgd_epoch(state: TrainState, store: TripleStore, hp: Hyperparams) -> float:
    """One pass over the shuffled training set; returns the mean pair loss.

    Assignment vectors stay fixed for the whole epoch; each positive gets
    one corrupted partner drawn under the configured sampling mode.
    """
    n_train = len(store.train)
    if n_train == 0:
        state.epoch += 1
        state.running_loss = 0.0
        return 0.0
    order = state.rng.permutation(n_train)
    total = 0.0
    for start in range(0, n_train, hp.batch_size):
        batch_idx = order[start:start + hp.batch_size]
        pos = store.train[batch_idx]
        neg = corrupt_batch(pos, store, hp.sampling_mode, state.sampler, hp.domain_side_rule)
        loss, grads = batch_gradients(state.params, hp, pos, neg)
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {loss!r} at epoch {state.epoch + 1}, "
                f"batch starting at {start} (lr={hp.lr}, gamma={hp.gamma})"
            )
        apply_gradients(state.params, hp, grads)
        total += loss
    state.epoch += 1
    state.running_loss = total / n_train
    return state.running_loss


def _block_pairs(
    store: TripleStore,
    r: int,
    side: str,
    hp: Hyperparams,
    budget: int | None,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Positive/corrupted pairs used to score relation r's concepts.

    The draw depends on (seed, r, side) only, never on the concept index,
    so every concept is scored on identical pairs.
    """
    rows = store.by_relation.get(r)
    if rows is None or len(rows) == 0:
        empty = np.zeros((0, 3), dtype=np.int64)
        return empty, empty
    rng = np.random.default_rng(np.random.SeedSequence([seed, r, 0 if side == SIDE_HEAD else 1]))
    if budget is not None and len(rows) > budget:
        rows = rows[rng.choice(len(rows), size=budget, replace=False)]
    sampler = DomainSampler(store, hp.domain_lambda, rng)
    neg = corrupt_batch(rows, store, hp.sampling_mode, sampler, hp.domain_side_rule)
    return rows, neg


def single_matrix_cost(
    side: str,
    r: int,
    i: int,
    store: TripleStore,
    params: ModelParams,
    hp: Hyperparams,
    budget: int | None = None,
    seed: int = 0,
) -> float:
    """Hinge cost of relation r with concept i as its sole ``side`` projector.

    Summed over the relation's (possibly budget-subsampled) training triples
    with freshly corrupted partners; defined directly through the scalar
    energies, one pair at a time.
    """
    pos, neg = _block_pairs(store, r, side, hp, budget, seed)
    cost = 0.0
    for (ph_, pr_, pt_), (nh_, _, nt_) in zip(pos.tolist(), neg.tolist()):
        e_pos = single_matrix_energy(side, i, ph_, pr_, pt_, params, hp)
        e_neg = single_matrix_energy(side, i, nh_, pr_, nt_, params, hp)
        cost += hinge_loss(e_pos, e_neg, hp.gamma)
    return cost


def _side_costs(
    store: TripleStore,
    r: int,
    side: str,
    params: ModelParams,
    hp: Hyperparams,
    seed: int,
) -> np.ndarray | None:
    """All m single-concept costs of one relation side, vectorized."""
    pos, neg = _block_pairs(store, r, side, hp, hp.block_budget, seed)
    if len(pos) == 0:
        return None
    ent = params.entity_emb
    D = params.concept_tensor
    other = SIDE_TAIL if side == SIDE_HEAD else SIDE_HEAD
    w_other = composed_matrix(params, hp, r, other)
    rv = params.relation_emb[r]
    if side == SIDE_HEAD:
        fixed_pos = rv - ent[pos[:, 2]] @ w_other.T
        fixed_neg = rv - ent[neg[:, 2]] @ w_other.T
        var_pos = np.einsum("ijk,bk->ibj", D, ent[pos[:, 0]])
        var_neg = np.einsum("ijk,bk->ibj", D, ent[neg[:, 0]])
        u_pos = var_pos + fixed_pos[None]
        u_neg = var_neg + fixed_neg[None]
    else:
        fixed_pos = ent[pos[:, 0]] @ w_other.T + rv
        fixed_neg = ent[neg[:, 0]] @ w_other.T + rv
        var_pos = np.einsum("ijk,bk->ibj", D, ent[pos[:, 2]])
        var_neg = np.einsum("ijk,bk->ibj", D, ent[neg[:, 2]])
        u_pos = fixed_pos[None] - var_pos
        u_neg = fixed_neg[None] - var_neg
    if hp.ell == 1:
        e_pos = np.abs(u_pos).sum(axis=2)
        e_neg = np.abs(u_neg).sum(axis=2)
    else:
        e_pos = np.sqrt((u_pos * u_pos).sum(axis=2))
        e_neg = np.sqrt((u_neg * u_neg).sum(axis=2))
    return np.maximum(hp.gamma + e_pos - e_neg, 0.0).sum(axis=1)


def block_update(params: ModelParams, store: TripleStore, hp: Hyperparams, seed: int = 0) -> None:
    """Reassign every relation's head and tail supports to the k cheapest
    concepts.

    Costs for both sides are computed against the pre-update attentions
    (a simultaneous update), and ties keep the lower concept index.
    Relations absent from training keep their current supports.
    """
    new_head: dict[int, np.ndarray] = {}
    new_tail: dict[int, np.ndarray] = {}
    for r in store.by_relation:
        for side, out in ((SIDE_HEAD, new_head), (SIDE_TAIL, new_tail)):
            costs = _side_costs(store, r, side, params, hp, seed)
            if costs is None:
                continue
            out[r] = np.sort(np.argsort(costs, kind="stable")[: hp.k])
    for r, chosen in new_head.items():
        params.head_assign[r] = 0
        params.head_assign[r, chosen] = 1
    for r, chosen in new_tail.items():
        params.tail_assign[r] = 0
        params.tail_assign[r, chosen] = 1


def train(
    store: TripleStore,
    hp: Hyperparams,
    seed: int,
    warm_start: ModelParams | None = None,
    eval_split: np.ndarray | None = None,
    eval_every: int = 0,
    early_stop_patience: int = 0,
    log_fn=None,
    on_epoch=None,
) -> tuple[ModelParams, dict]:
    """Full optimization loop: SGD epochs interleaved with block updates.

    Block updates run every ``hp.block_every`` epochs while the epoch count
    has not passed ``hp.effective_block_stop()`` (they only apply to the
    sparse-attention shared-concept model).  Optional validation metrics
    are recorded every ``eval_every`` epochs; with ``early_stop_patience``
    > 0 training stops once hits@10 has not improved for that many epochs.
    ``on_epoch(state, epoch, loss)`` may return True to stop early.
    """
    from .evaluation import evaluate  # local import; evaluation depends on model only

    state = make_state(store, hp, seed, warm_start)
    history: dict = {"epochs": [], "block_updates": [], "evals": [], "stopped_epoch": None}
    block_stop = hp.effective_block_stop()
    best_metric = -np.inf
    best_epoch = 0
    for epoch in range(1, hp.epochs + 1):
        t0 = time.perf_counter()
        loss = sgd_epoch(state, store, hp)
        wall = time.perf_counter() - t0
        history["epochs"].append({"epoch": epoch, "loss": loss, "seconds": wall})
        if log_fn:
            log_fn(f"epoch={epoch} loss={loss:.6f} wall={wall:.2f}s")

        if (
            _block_updates_enabled(hp)
            and hp.block_every > 0
            and epoch % hp.block_every == 0
            and epoch <= block_stop
        ):
            bseed = int(state.block_rng.integers(2**31))
            block_update(state.params, store, hp, seed=bseed)
            state.next_block_epoch = epoch + hp.block_every
            history["block_updates"].append({"epoch": epoch, "seed": bseed})

        if eval_every and eval_split is not None and len(eval_split) and epoch % eval_every == 0:
            report = evaluate(eval_split, state.params, hp, store)
            history["evals"].append(
                {"epoch": epoch, "mean_rank": report.mean_rank, "hits_at_10": report.hits_at_10}
            )
            if log_fn:
                log_fn(
                    f"eval epoch={epoch} mean_rank={report.mean_rank:.1f} "
                    f"hits@10={report.hits_at_10:.2f}"
                )
            if report.hits_at_10 > best_metric:
                best_metric = report.hits_at_10
                best_epoch = epoch
            elif early_stop_patience and epoch - best_epoch >= early_stop_patience:
                history["stopped_epoch"] = epoch
                if log_fn:
                    log_fn(f"early stop at epoch {epoch} (best hits@10 at {best_epoch})")
                break

        if on_epoch and on_epoch(state, epoch, loss):
            history["stopped_epoch"] = epoch
            break
    return state.params, history
