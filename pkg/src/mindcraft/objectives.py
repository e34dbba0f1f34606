"""Training losses, the metadata-indexed replay buffer and the hard-negative miner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc


class LengthMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class NoPositive(LookupError):
    pass


class InsufficientBatch(ValueError):
    pass


_NEG = -1e30  # additive mask for excluded logits; exp() underflows to exactly 0


@dataclass
class LossWeights:
    lambda_qa: float = 1.0
    lambda_c: float = 0.1
    lambda_s: float = 0.2
    lambda_r: float = 0.1
    gamma: float = 0.1
    tau: float = 0.07
    tau_atlas: float = 1.0
    n_spatial: int = 8
    n_semantic: int = 8
    n_unrelated: int = 16
    detach_negatives: bool = True
    backfill: bool = True

    def validate(self):
        if self.tau <= 0 or self.tau_atlas <= 0:
            raise ValueError("temperatures must be positive")
        for k in ("lambda_qa", "lambda_c", "lambda_s", "lambda_r", "gamma"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        for k in ("n_spatial", "n_semantic", "n_unrelated"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        return self

    @property
    def counts(self):
        return (self.n_spatial, self.n_semantic, self.n_unrelated)


# ---------------------------------------------------------------------------
# imitation + answering

def mindcraft_loss(action_logits, gt_action, answer_logits=None, gt_answer=None, lambda_qa=1.0):
    """CE(action) + lambda_qa * mean per-token CE(answer) when a query was asked.

    answer_logits rows are aligned with gt_answer ids (already including the
    end token if the caller scores it).
    """
    loss = nc.cross_entropy(action_logits, gt_action)
    if answer_logits is None:
        return loss
    tgt = np.atleast_1d(np.asarray(gt_answer, dtype=np.int64))
    if answer_logits.shape[0] != tgt.shape[0]:
        raise LengthMismatch(f"{answer_logits.shape[0]} answer rows for {tgt.shape[0]} targets")
    qa = nc.mean(nc.cross_entropy(answer_logits, tgt))
    return nc.add(loss, nc.scale(qa, lambda_qa))


# ---------------------------------------------------------------------------
# contrastive

def _check_nonzero(*arrays):
    for a in arrays:
        a = np.asarray(a)
        if a.size and np.any(np.linalg.norm(a.reshape(-1, a.shape[-1]), axis=-1) == 0):
            raise ZeroVector("zero-norm vector in contrastive input")


def info_nce(anchor, positive, negatives, tau, detach_negatives=True):
    """-log softmax over [cos(a,p), cos(a,n_1), ...] / tau, taking the positive entry."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    anchor, positive = nc.tensor(anchor), nc.tensor(positive)
    if isinstance(negatives, (list, tuple)):
        if not negatives:
            raise ValueError("need at least one negative")
        negatives = nc.concat([nc.reshape(nc.tensor(n), (1, -1)) for n in negatives], axis=0)
    negatives = nc.tensor(negatives)
    if negatives.shape[0] == 0:
        raise ValueError("need at least one negative")
    _check_nonzero(anchor.data, positive.data, negatives.data)
    if detach_negatives:
        negatives = negatives.detach()
    a = nc.l2_normalize(anchor)
    s_pos = nc.reshape(nc.sum_(nc.mul(a, nc.l2_normalize(positive))), (1,))
    s_neg = nc.matmul(nc.l2_normalize(negatives, axis=-1), a)
    logits = nc.scale(nc.concat([s_pos, s_neg]), 1.0 / tau)
    return nc.cross_entropy(logits, 0)


def info_nce_batch(anchors, positives, negatives, neg_mask, tau):
    """Row-wise InfoNCE. anchors, positives: (A, D); negatives: (A, N, D);
    neg_mask: (A, N) bool of real negatives. Returns per-anchor losses (A,).
    Negatives are constants; padded rows are zero and stay zero after normalizing."""
    A = anchors.shape[0]
    a = nc.l2_normalize(anchors)
    s_pos = nc.sum_(nc.mul(a, nc.l2_normalize(positives)), axis=-1, keepdims=True)
    neg = np.asarray(nc.tensor(negatives).data)
    norm = np.sqrt(np.sum(neg * neg, axis=-1, keepdims=True))
    neg = nc.Tensor(np.where(np.asarray(neg_mask)[..., None], neg / np.where(norm > 0, norm, 1.0), 0.0).astype(neg.dtype))
    s_neg = nc.reshape(nc.matmul(neg, nc.reshape(a, (A, -1, 1))), (A, -1))
    logits = nc.scale(nc.concat([s_pos, s_neg], axis=1), 1.0 / tau)
    pad = np.concatenate([np.zeros((A, 1)), np.where(neg_mask, 0.0, _NEG)], axis=1)
    logits = nc.add(logits, nc.Tensor(pad.astype(logits.dtype)))
    return nc.cross_entropy(logits, np.zeros(A, np.int64))


# ---------------------------------------------------------------------------
# replay buffer and mining

@dataclass(frozen=True)
class ReplayEntry:
    episode_id: str
    asked_at: int
    template_id: int
    qtype: str
    query_class: str
    fact_id: str
    region_id: tuple      # (scene_seed, region id): regions are only unique within a scene
    gt_answer: tuple
    scene_seed: int
    query_id: str = ""
    experience_ref: tuple = ()   # (episode index in the dataset, query index)

    @property
    def experience(self):
        return (self.episode_id, self.asked_at)

    @classmethod
    def from_query(cls, episode, query, episode_index=0, query_index=0):
        return cls(
            episode_id=episode.episode_id, asked_at=query.asked_at, template_id=query.template_id,
            qtype=query.qtype, query_class=query.query_class, fact_id=query.fact_id,
            region_id=(episode.scene_seed, query.region_id_at_ask), gt_answer=tuple(query.gt_answer),
            scene_seed=episode.scene_seed, query_id=query.query_id,
            experience_ref=(episode_index, query_index),
        )


@dataclass
class NegativeSet:
    spatial: list = field(default_factory=list)
    semantic: list = field(default_factory=list)
    unrelated: list = field(default_factory=list)
    shortfall: dict = field(default_factory=dict)

    def all(self):
        return self.spatial + self.semantic + self.unrelated

    def __len__(self):
        return len(self.spatial) + len(self.semantic) + len(self.unrelated)


def classify(anchor: ReplayEntry, entry: ReplayEntry):
    """Role of ``entry`` relative to ``anchor``: positive/spatial/semantic/unrelated/None."""
    if entry.experience == anchor.experience:
        return None
    same_class = entry.query_class == anchor.query_class
    same_answer = entry.gt_answer == anchor.gt_answer
    if same_class and same_answer and entry.scene_seed == anchor.scene_seed:
        return "positive"
    if same_class and not same_answer:
        return "spatial"
    same_region = entry.region_id == anchor.region_id
    same_family = entry.qtype == anchor.qtype
    if same_region and not same_family and not same_answer:
        return "semantic"
    if not same_region and not same_family:
        return "unrelated"
    return None


class ReplayBuffer:
    """Query records indexed by their metadata, for vectorised mining."""

    def __init__(self, entries=()):
        self.entries = []
        self._keys = {k: {} for k in ("exp", "cls", "ans", "reg", "fam", "scene")}
        self._cols = {k: [] for k in self._keys}
        self._arrays = None
        for e in entries:
            self.add(e)

    def __len__(self):
        return len(self.entries)

    def _code(self, kind, value):
        table = self._keys[kind]
        if value not in table:
            table[value] = len(table)
        return table[value]

    def add(self, entry: ReplayEntry):
        self.entries.append(entry)
        for kind, value in (("exp", entry.experience), ("cls", entry.query_class),
                            ("ans", entry.gt_answer), ("reg", entry.region_id),
                            ("fam", entry.qtype), ("scene", entry.scene_seed)):
            self._cols[kind].append(self._code(kind, value))
        self._arrays = None

    def _arr(self):
        if self._arrays is None:
            self._arrays = {k: np.array(v, np.int64) for k, v in self._cols.items()}
        return self._arrays

    def candidates(self, anchor: ReplayEntry):
        """Index arrays of every role, derived column-wise (same rules as ``classify``)."""
        a = self._arr()

        def code(kind, value):
            return self._keys[kind].get(value, -1)

        other = a["exp"] != code("exp", anchor.experience)
        same_cls = a["cls"] == code("cls", anchor.query_class)
        same_ans = a["ans"] == code("ans", anchor.gt_answer)
        same_reg = a["reg"] == code("reg", anchor.region_id)
        same_fam = a["fam"] == code("fam", anchor.qtype)
        same_scene = a["scene"] == code("scene", anchor.scene_seed)
        pos = other & same_cls & same_ans & same_scene
        spatial = other & same_cls & ~same_ans
        rest = other & ~same_cls
        semantic = rest & same_reg & ~same_fam & ~same_ans
        unrelated = rest & ~same_reg & ~same_fam
        return {k: np.flatnonzero(v) for k, v in
                (("positive", pos), ("spatial", spatial), ("semantic", semantic), ("unrelated", unrelated))}


def mine(buffer: ReplayBuffer, anchor: ReplayEntry, counts, rng, backfill=True):
    """Sample a positive and spatial/semantic/unrelated negatives for ``anchor``.

    Missing spatial or semantic negatives are backfilled with extra unrelated
    ones when ``backfill`` is set; the unmet counts are recorded in
    ``shortfall``. Raises NoPositive when no positive exists.
    """
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    n_sp, n_se, n_un = counts
    cand = buffer.candidates(anchor)
    if cand["positive"].size == 0:
        raise NoPositive(f"no positive for {anchor.query_id or anchor.experience}")
    positive = buffer.entries[int(rng.choice(cand["positive"]))]

    def take(pool, n):
        n = min(n, pool.size)
        return rng.choice(pool, size=n, replace=False) if n else np.zeros(0, np.int64)

    sp = take(cand["spatial"], n_sp)
    se = take(cand["semantic"], n_se)
    missing = (n_sp - sp.size) + (n_se - se.size)
    want_un = n_un + (missing if backfill else 0)
    un = take(cand["unrelated"], want_un)
    shortfall = {}
    if n_sp - sp.size:
        shortfall["spatial"] = int(n_sp - sp.size)
    if n_se - se.size:
        shortfall["semantic"] = int(n_se - se.size)
    if want_un - un.size:
        shortfall["unrelated"] = int(want_un - un.size)
    neg = NegativeSet(
        spatial=[buffer.entries[i] for i in sp],
        semantic=[buffer.entries[i] for i in se],
        unrelated=[buffer.entries[i] for i in un],
        shortfall=shortfall,
    )
    return positive, neg


def st_crl_loss(params, cfg, anchor_exp, positive_exp, negative_exps, tau, detach_negatives=True):
    """InfoNCE over activated maps recomputed with the current parameters.

    Returns (loss, skipped); an empty negative list contributes zero and is flagged.
    """
    from .model import forward_batch
    if not negative_exps:
        return nc.Tensor(np.zeros((), np.float64)), True
    out = forward_batch(params, cfg, [anchor_exp, positive_exp])
    if detach_negatives:
        with nc.no_grad():
            neg = forward_batch(params, cfg, list(negative_exps)).m_prime
    else:
        neg = forward_batch(params, cfg, list(negative_exps)).m_prime
    anchor = nc.reshape(nc.gather_rows(out.m_prime, [0]), (-1,))
    positive = nc.reshape(nc.gather_rows(out.m_prime, [1]), (-1,))
    return info_nce(anchor, positive, neg, tau, detach_negatives=detach_negatives), False


# ---------------------------------------------------------------------------
# atlas regulariser

def entropy(p, eps=1e-12):
    """H(p) = -sum p log p (natural log) for a probability vector Tensor."""
    return nc.scale(nc.sum_(nc.mul(p, nc.log(nc.add(p, eps)))), -1.0)


def soft_usage(features, atlas, tau_a=1.0):
    """Batch-mean soft assignment softmax_k(-||F - e_k||^2 / tau_a); also returns d^2."""
    f = nc.tensor(features).detach()
    N, D = f.shape
    diff = nc.sub(nc.reshape(f, (N, 1, D)), nc.reshape(atlas, (1, -1, D)))
    d2 = nc.sum_(nc.mul(diff, diff), axis=-1)
    p = nc.mean(nc.softmax(nc.scale(d2, -1.0 / tau_a), axis=-1), axis=0)
    return p, d2


def atlas_loss(features, atlas, gamma, tau_a=1.0):
    """Commitment of each (stop-gradient) feature to its nearest code, minus gamma * usage entropy."""
    f = nc.tensor(features)
    if f.shape[0] == 0:
        raise ValueError("empty feature batch")
    p, d2 = soft_usage(f, atlas, tau_a)
    nearest = np.argmin(d2.data, axis=1)   # ties -> lowest index
    onehot = np.zeros(d2.shape, dtype=d2.dtype)
    onehot[np.arange(d2.shape[0]), nearest] = 1.0
    commit = nc.scale(nc.sum_(nc.mul(d2, nc.Tensor(onehot))), 1.0 / d2.shape[0])
    return nc.sub(commit, nc.scale(entropy(p), gamma))


def usage_entropy(features, atlas, tau_a=1.0):
    with nc.no_grad():
        p, _ = soft_usage(features, atlas, tau_a)
        return float(entropy(p).data)


# ---------------------------------------------------------------------------
# episodic discrimination

def episodic_loss(frames, owner, tau, rng, min_norm=1e-8):
    """One anchor per episode against a random other timestep of the same episode;
    every frame of the other episodes is a negative (gradients flow through all).

    frames: (R, D) Tensor; owner: (R,) episode index per row. Frames with
    (near-)zero norm carry no direction and are left out.
    """
    owner = np.asarray(owner)
    keep = np.linalg.norm(np.asarray(frames.data, dtype=np.float64), axis=1) > min_norm
    episodes = [e for e in np.unique(owner) if np.sum(keep & (owner == e)) >= 2]
    if len(episodes) < 2:
        raise InsufficientBatch("need >= 2 episodes with >= 2 usable timesteps")
    rows = np.flatnonzero(keep)
    f = nc.l2_normalize(nc.gather_rows(frames, rows))
    own = owner[rows]
    anchors, positives = [], []
    for e in episodes:
        idx = np.flatnonzero(own == e)
        a, p = rng.choice(idx, size=2, replace=False)
        anchors.append(a)
        positives.append(p)
    fa = nc.gather_rows(f, anchors)
    s_pos = nc.sum_(nc.mul(fa, nc.gather_rows(f, positives)), axis=-1, keepdims=True)
    s_all = nc.matmul(fa, nc.transpose(f))
    mask = own[None, :] != np.array(episodes)[:, None]
    pad = np.concatenate([np.zeros((len(episodes), 1)), np.where(mask, 0.0, _NEG)], axis=1)
    logits = nc.add(nc.scale(nc.concat([s_pos, s_all], axis=1), 1.0 / tau),
                    nc.Tensor(pad.astype(f.dtype)))
    return nc.mean(nc.cross_entropy(logits, np.zeros(len(episodes), np.int64)))


# ---------------------------------------------------------------------------
# trajectory objective

def total_loss(mc, crl, has_query, sem, epi, weights: LossWeights, T=None):
    """(1/T) sum_t [L_mc,t + lambda_c I_t L_crl,t + lambda_s L_sem,t] + lambda_r L_epi.

    mc, crl, sem: per-timestep Tensors (T,) or numbers (sem may be a scalar
    shared by every step); has_query: (T,) 0/1.
    """
    mc = nc.tensor(mc)
    T = int(T if T is not None else mc.shape[0])
    if T < 1:
        raise ValueError("T must be >= 1")
    ind = np.asarray(has_query, dtype=mc.dtype).reshape(mc.shape)
    per_t = nc.add(mc, nc.scale(nc.mul(nc._as(crl, mc), nc.Tensor(ind)), weights.lambda_c))
    sem = nc._as(sem, mc)
    sum_sem = nc.scale(sem, T) if sem.ndim == 0 else nc.sum_(sem)
    traj = nc.add(nc.sum_(per_t), nc.scale(sum_sem, weights.lambda_s))
    return nc.add(nc.scale(traj, 1.0 / T), nc.scale(nc._as(epi, mc), weights.lambda_r))
