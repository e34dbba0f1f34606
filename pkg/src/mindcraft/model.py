"""Navigation and query-answering agent built on numcore.

Pipeline per decision step:
  observation -> (F_vis, F_geo) -> fused frame F' -> episodic memory
  memory -> pooled summary z -> atlas readout m (the cognitive map)
  [BOS, instruction, sampled frames, QRY, query, MAP=m, ANS] -> causal head
Output is one token stream in the shared vocabulary: the ANS position
predicts the action token; when a query was asked, the (chosen) action token
is fed back and the answer is decoded greedily after it, up to EOS. m' is
the final hidden state at the MAP slot.

Everything is batched over *experiences*: one experience is (frames seen so
far, timestep, instruction, optional query, optional answer prefix).
Experiences sharing a ``key`` share encoded frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import nn
from .vocab import CATEGORIES, COLORS, VOCAB

N_PAIRS = len(CATEGORIES) * len(COLORS)
_CAT = {c: i for i, c in enumerate(CATEGORIES)}
_COL = {c: i for i, c in enumerate(COLORS)}
_BEAR = {"left": 0, "center": 1, "right": 2}

FRAME = -1  # layout placeholders
MAP = -2


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    n_atlas: int = 16
    k_frames: int = 8
    max_answer_len: int = 8
    view_depth: int = 6
    max_len: int = 160
    use_geo: bool = True   # False: fused frame is F_vis (fusion bypass)
    use_map: bool = True   # False: no <MAP> slot in the head input
    init_std: float = 0.02
    dtype: str = "float32"

    def validate(self):
        if self.d_model % self.heads:
            raise nc.ShapeMismatch(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.n_atlas < 2:
            raise ValueError("atlas needs at least 2 codes")
        if self.k_frames < 2:
            raise ValueError("k_frames must be >= 2")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    @property
    def n_geo(self):
        return 3 + 3 + self.view_depth + 1


# ---------------------------------------------------------------------------
# parameters

def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    cfg.validate()
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    D, std = cfg.d_model, cfg.init_std
    p = {}

    def normal(name, shape, s=std):
        p[name] = nc.Parameter(rng.normal(0.0, s, shape).astype(dt), name)

    normal("enc.pair_emb", (N_PAIRS, D))
    normal("enc.geo_w", (cfg.n_geo, D))
    nn.init_attention(p, "fuse", D, rng, std, dt)
    normal("pool.query", (D,))
    normal("pool.wk", (D, D))
    normal("atlas", (cfg.n_atlas, D), 1.0 / np.sqrt(D))
    nn.init_attention(p, "map", D, rng, std, dt)
    normal("frame.w", (D, D))
    p["frame.b"] = nc.Parameter(np.zeros(D, dt), "frame.b")
    normal("tok_emb", (len(VOCAB), D))
    normal("pos_emb", (cfg.max_len, D))
    for i in range(cfg.layers):
        nn.init_block(p, f"blk{i}", D, rng, std=std, dtype=dt)
    p["ln_f.g"] = nc.Parameter(np.ones(D, dt), "ln_f.g")
    p["ln_f.b"] = nc.Parameter(np.zeros(D, dt), "ln_f.b")
    return p


# ---------------------------------------------------------------------------
# observation channels

def observation_channels(obs, view_depth=6):
    """Raw (visual, geometric) input vectors of one observation.

    visual: per-(category, colour) counts divided by the number of visible
    objects, so a linear map of it is the mean object embedding.
    geometric: [depth profile (3); bearing counts (3); distance counts (depth+1)].
    """
    vis = np.zeros(N_PAIRS)
    geo = np.zeros(3 + 3 + view_depth + 1)
    geo[:3] = obs.depth_profile
    n = len(obs.visible)
    for v in obs.visible:
        vis[_CAT[v.category] * len(COLORS) + _COL[v.attribute]] += 1.0
        geo[3 + _BEAR[v.bearing]] += 1.0
        geo[6 + min(v.distance, view_depth)] += 1.0
    if n:
        vis /= n
    return vis, geo


def episode_channels(observations, view_depth=6):
    if not observations:
        return np.zeros((0, N_PAIRS)), np.zeros((0, 3 + 3 + view_depth + 1))
    pairs = [observation_channels(o, view_depth) for o in observations]
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])


def encode_observation(obs, params, cfg: ModelConfig):
    """(F_vis, F_geo) as D-vectors."""
    vis, geo = observation_channels(obs, cfg.view_depth)
    dt = params["atlas"].dtype
    f_vis = nc.matmul(nc.Tensor(vis.astype(dt)), params["enc.pair_emb"])
    f_geo = nc.matmul(nc.Tensor(geo.astype(dt)), params["enc.geo_w"])
    return f_vis, f_geo


def fuse(f_vis, f_geo, params, cfg: ModelConfig):
    """F' = F_vis + CrossAttn(F_vis, F_geo, F_geo); accepts (D,) or (N, D)."""
    if not cfg.use_geo:
        return f_vis
    single = f_vis.ndim == 1
    q = nc.reshape(f_vis, (-1, 1, cfg.d_model))
    kv = nc.reshape(f_geo, (-1, 1, cfg.d_model))
    out = nn.attention(params, "fuse", q, kv, cfg.heads)
    out = nc.reshape(out, (cfg.d_model,) if single else (f_vis.shape[0], cfg.d_model))
    return nc.add(f_vis, out)


def sample_frames(n_frames: int, k: int) -> list:
    """Indices of up to k frames spread uniformly over 0..n_frames-1, ends included."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_frames <= k:
        return list(range(n_frames))
    t = n_frames - 1
    picked = sorted({int(np.floor(j * t / (k - 1) + 0.5)) for j in range(k)})
    if len(picked) < k:
        rest = [i for i in range(n_frames) if i not in set(picked)]
        picked = sorted(picked + rest[:k - len(picked)])
    return picked


# ---------------------------------------------------------------------------
# cognitive map

def attend_table(q_in, table, params, prefix, heads):
    """Multi-head attention of queries (N, D) over a shared key/value table (M, D)."""
    N, D = q_in.shape
    M = table.shape[0]
    dh = D // heads
    q = nc.reshape(nc.matmul(q_in, params[f"{prefix}.wq"]), (N, heads, 1, dh))
    k = nc.transpose(nc.reshape(nc.matmul(table, params[f"{prefix}.wk"]), (M, heads, dh)), (1, 2, 0))
    v = nc.transpose(nc.reshape(nc.matmul(table, params[f"{prefix}.wv"]), (M, heads, dh)), (1, 0, 2))
    a = nc.softmax(nc.scale(nc.matmul(q, k), 1.0 / np.sqrt(dh)), axis=-1)
    out = nc.reshape(nc.matmul(a, v), (N, D))
    return nc.matmul(out, params[f"{prefix}.wo"])


def pool_prefixes(frames, rows, mask, params):
    """Attention pooling of frame prefixes.

    frames: (R, D) fused frames; rows: (N, L) row indices; mask: (N, L) valid.
    A learned query scores every frame; each output is the softmax-weighted
    mean of its own rows.
    """
    D = frames.shape[1]
    keys = nc.matmul(frames, params["pool.wk"])
    s = nc.scale(nc.matmul(keys, params["pool.query"]), 1.0 / np.sqrt(D))
    w = nc.softmax(nc.gather_rows(s, rows), axis=-1, mask=mask)
    gathered = nc.gather_rows(frames, rows)
    return nc.sum_(nc.mul(nc.reshape(w, w.shape + (1,)), gathered), axis=1)


def build_map(memory, params, cfg: ModelConfig):
    """(z_t, m_t) for a memory of fused frames (t+1, D)."""
    if memory.shape[0] == 0:
        raise ValueError("episodic memory is empty")
    n = memory.shape[0]
    z = pool_prefixes(memory, np.arange(n)[None, :], np.ones((1, n), bool), params)
    m = attend_table(z, params["atlas"], params, "map", cfg.heads)
    return nc.reshape(z, (cfg.d_model,)), nc.reshape(m, (cfg.d_model,))


# ---------------------------------------------------------------------------
# sequence assembly

def layout(instr, n_frames, query, answer, cfg: ModelConfig, action=None):
    """Token ids with FRAME / MAP placeholders, plus the ANS and MAP positions.

    With an answer prefix (possibly empty) the action token and the prefix
    follow ANS.
    """
    ids = [VOCAB.bos] + list(instr) + [FRAME] * n_frames + [VOCAB.pad] * (cfg.k_frames - n_frames)
    if query is not None:
        ids += [VOCAB.qry] + list(query)
    map_pos = None
    if cfg.use_map:
        map_pos = len(ids)
        ids.append(MAP)
    ans_pos = len(ids)
    ids.append(VOCAB.ans)
    if answer is not None:
        if action is None:
            raise ValueError("answer decoding needs the action token")
        ids += [VOCAB.action_ids[int(action)]] + list(answer)
    return ids, ans_pos, map_pos


def assemble_input(instr_tokens, frames, m, query_tokens, params, cfg: ModelConfig):
    """Embedded head input for one step, before positional encodings.

    frames: (k, D) already-projected frame embeddings, k <= K; m: (D,) or None.
    Returns (x (L, D), ids with placeholders, map_pos).
    """
    instr = VOCAB.encode(instr_tokens)
    query = VOCAB.encode(query_tokens) if query_tokens is not None else None
    ids, _, map_pos = layout(instr, frames.shape[0], query, None, cfg)
    L = len(ids)
    arr = np.array(ids)
    tok_pos = np.flatnonzero(arr >= 0)
    x = nc.scatter_rows(nc.embedding_lookup(params["tok_emb"], arr[tok_pos]), tok_pos, L)
    if frames.shape[0]:
        x = nc.add(x, nc.scatter_rows(frames, np.flatnonzero(arr == FRAME), L))
    if map_pos is not None:
        x = nc.add(x, nc.scatter_rows(nc.reshape(m, (1, -1)), [map_pos], L))
    return x, ids, map_pos


# ---------------------------------------------------------------------------
# batched forward

@dataclass
class Experience:
    key: str             # experiences with equal keys share their frame inputs
    vis: np.ndarray      # (>= t+1, N_PAIRS)
    geo: np.ndarray      # (>= t+1, n_geo)
    instr: list          # token ids
    t: int
    query: list | None = None   # token ids
    answer: list | None = None  # teacher answer ids (EOS not included)
    action: int | None = None   # action index emitted at ANS, needed with an answer


@dataclass
class BatchOutput:
    action_logits: nc.Tensor          # (N, 4)
    answer_logits: nc.Tensor | None   # (M, |answer vocab|) over all answer rows
    answer_targets: np.ndarray | None  # (M,) indices into VOCAB.answer_ids
    answer_owner: np.ndarray | None    # (M,) experience index of each row
    m_prime: nc.Tensor | None         # (N, D) final hidden state at MAP
    m: nc.Tensor | None               # (N, D)
    z: nc.Tensor                      # (N, D)
    frames: nc.Tensor                 # (R, D) fused frames of every key
    frame_key: np.ndarray             # (R,) key index of each frame row
    keys: list = field(default_factory=list)
    key_rows: dict = field(default_factory=dict)   # key -> (offset, count)


_ANSWER_INDEX = {tok: i for i, tok in enumerate(VOCAB.answer_ids)}


def forward_batch(params, cfg: ModelConfig, exps) -> BatchOutput:
    if not exps:
        raise ValueError("empty batch")
    dt = params["atlas"].dtype
    D = cfg.d_model

    # frames of each distinct key, encoded and fused once
    keys, key_rows, vis_parts, geo_parts, owner = [], {}, [], [], []
    need = {}
    for e in exps:
        need[e.key] = max(need.get(e.key, 0), e.t + 1)
    ref = {}
    for e in exps:
        if e.key not in key_rows:
            key_rows[e.key] = (sum(len(v) for v in vis_parts), need[e.key])
            keys.append(e.key)
            ref[e.key] = e
            vis_parts.append(e.vis[:need[e.key]])
            geo_parts.append(e.geo[:need[e.key]])
            owner.append(np.full(need[e.key], len(keys) - 1))
    V = nc.Tensor(np.concatenate(vis_parts).astype(dt))
    G = nc.Tensor(np.concatenate(geo_parts).astype(dt))
    f_vis = nc.matmul(V, params["enc.pair_emb"])
    f_geo = nc.matmul(G, params["enc.geo_w"])
    frames = fuse(f_vis, f_geo, params, cfg)

    # pooled memory and cognitive map per experience
    N = len(exps)
    Tmax = max(e.t + 1 for e in exps)
    rows = np.zeros((N, Tmax), np.int64)
    mask = np.zeros((N, Tmax), bool)
    for i, e in enumerate(exps):
        off = key_rows[e.key][0]
        rows[i, :e.t + 1] = off + np.arange(e.t + 1)
        rows[i, e.t + 1:] = off
        mask[i, :e.t + 1] = True
    z = pool_prefixes(frames, rows, mask, params)
    m = attend_table(z, params["atlas"], params, "map", cfg.heads) if cfg.use_map else None

    # head input
    proj = nc.add(nc.matmul(frames, params["frame.w"]), params["frame.b"])
    lays = [layout(e.instr, len(sample_frames(e.t + 1, cfg.k_frames)), e.query, e.answer, cfg, e.action)
            for e in exps]
    L = max(len(ids) for ids, _, _ in lays)
    if L > cfg.max_len:
        raise nc.ShapeMismatch(f"sequence length {L} exceeds max_len {cfg.max_len}")
    tok_pos, tok_ids, fr_pos, fr_rows, map_pos, ans_pos = [], [], [], [], [], []
    key_mask = np.zeros((N, L), bool)
    for i, (e, (ids, a_pos, m_pos)) in enumerate(zip(exps, lays)):
        base = i * L
        sel = sample_frames(e.t + 1, cfg.k_frames)
        arr = np.array(ids)
        tp = np.flatnonzero(arr >= 0)
        tok_pos.append(base + tp)
        tok_ids.append(arr[tp])
        fr_pos.append(base + np.flatnonzero(arr == FRAME))
        fr_rows.append(key_rows[e.key][0] + np.array(sel, np.int64))
        if m_pos is not None:
            map_pos.append(base + m_pos)
        ans_pos.append(base + a_pos)
        key_mask[i, :len(ids)] = arr != VOCAB.pad
    tok_pos = np.concatenate(tok_pos)
    x = nc.scatter_rows(nc.embedding_lookup(params["tok_emb"], np.concatenate(tok_ids)), tok_pos, N * L)
    fr_pos = np.concatenate(fr_pos)
    if fr_pos.size:
        x = nc.add(x, nc.scatter_rows(nc.gather_rows(proj, np.concatenate(fr_rows)), fr_pos, N * L))
    if cfg.use_map:
        x = nc.add(x, nc.scatter_rows(m, np.array(map_pos), N * L))
    x = nc.add(nc.reshape(x, (N, L, D)), nc.gather_rows(params["pos_emb"], np.arange(L)))

    h = x
    for li in range(cfg.layers):
        h = nn.causal_self_attention_block(params, f"blk{li}", h, cfg.heads, key_mask=key_mask)
    h = nc.layer_norm(h, params["ln_f.g"], params["ln_f.b"])
    hf = nc.reshape(h, (N * L, D))
    out_w = nc.transpose(params["tok_emb"])   # output layer tied to the token embeddings

    ans_pos = np.array(ans_pos)
    act_logits = nc.select(nc.matmul(nc.gather_rows(hf, ans_pos), out_w), VOCAB.action_ids, axis=1)
    m_prime = nc.gather_rows(hf, np.array(map_pos)) if cfg.use_map else None

    ans_rows, targets, owners = [], [], []
    for i, e in enumerate(exps):
        if e.answer is None:
            continue
        n = len(e.answer)
        ans_rows.extend(range(ans_pos[i] + 1, ans_pos[i] + n + 2))
        targets.extend(_ANSWER_INDEX.get(tok, -1) for tok in list(e.answer) + [VOCAB.eos])
        owners.extend([i] * (n + 1))
    ans_logits = None
    if ans_rows:
        ans_logits = nc.select(nc.matmul(nc.gather_rows(hf, np.array(ans_rows)), out_w),
                               VOCAB.answer_ids, axis=1)
    return BatchOutput(
        action_logits=act_logits,
        answer_logits=ans_logits,
        answer_targets=np.array(targets, np.int64) if ans_rows else None,
        answer_owner=np.array(owners, np.int64) if ans_rows else None,
        m_prime=m_prime, m=m, z=z, frames=frames,
        frame_key=np.concatenate(owner), keys=keys, key_rows=key_rows,
    )


# ---------------------------------------------------------------------------
# experiences from records, inference

def episode_experiences(ep, cfg: ModelConfig, with_answers=True, channels=None):
    """One teacher-forced experience per decision step of an EpisodeRecord."""
    vis, geo = channels if channels is not None else episode_channels(ep.observations, cfg.view_depth)
    instr = VOCAB.encode(ep.instruction)
    out = []
    for t in range(len(ep.expert_actions)):
        q = ep.query_at(t)
        out.append(Experience(
            key=ep.episode_id, vis=vis, geo=geo, instr=instr, t=t,
            query=VOCAB.encode(q.tokens) if q is not None else None,
            answer=VOCAB.encode(q.gt_answer) if (q is not None and with_answers) else None,
            action=int(ep.expert_actions[t]),
        ))
    return out


def query_experience(ep, query, cfg: ModelConfig, channels=None):
    vis, geo = channels if channels is not None else episode_channels(ep.observations, cfg.view_depth)
    return Experience(key=ep.episode_id, vis=vis, geo=geo, instr=VOCAB.encode(ep.instruction),
                      t=query.asked_at, query=VOCAB.encode(query.tokens))


def greedy_actions(params, cfg: ModelConfig, exps):
    with nc.no_grad():
        out = forward_batch(params, cfg, exps)
    return [int(a) for a in np.argmax(out.action_logits.data, axis=1)]


def greedy_answers(params, cfg: ModelConfig, exps):
    """Greedy answer decoding for experiences that carry a query.

    The answer follows the action token; experiences without ``action`` use
    the model's own greedy action.
    """
    done = [[] for _ in exps]
    active = list(range(len(exps)))
    missing = [i for i, e in enumerate(exps) if e.action is None]
    actions = [e.action for e in exps]
    if missing:
        for i, a in zip(missing, greedy_actions(params, cfg, [exps[i] for i in missing])):
            actions[i] = a
    with nc.no_grad():
        for _ in range(cfg.max_answer_len):
            if not active:
                break
            batch = []
            for i in active:
                e = exps[i]
                batch.append(Experience(e.key, e.vis, e.geo, e.instr, e.t, e.query, list(done[i]),
                                        actions[i]))
            out = forward_batch(params, cfg, batch)
            logits = out.answer_logits.data
            owner = out.answer_owner
            still = []
            for j, i in enumerate(active):
                last = np.flatnonzero(owner == j)[-1]
                tok = VOCAB.answer_ids[int(np.argmax(logits[last]))]
                if tok == VOCAB.eos:
                    continue
                done[i].append(tok)
                still.append(i)
            active = still
    return [VOCAB.decode(a) for a in done]


@dataclass
class ForwardOutput:
    action_logits: np.ndarray
    answer: list | None
    m: np.ndarray | None
    m_prime: np.ndarray | None
    z: np.ndarray


@dataclass
class AgentState:
    observations: list = field(default_factory=list)
    pose: object = None

    @property
    def t(self):
        return len(self.observations) - 1


def act(state: AgentState, observation, instruction, query, params, cfg: ModelConfig, key="agent"):
    """Append ``observation`` to memory and run one decision step."""
    state.observations.append(observation)
    vis, geo = episode_channels(state.observations, cfg.view_depth)
    exp = Experience(key, vis, geo, VOCAB.encode(instruction), state.t,
                     VOCAB.encode(query) if query is not None else None)
    with nc.no_grad():
        out = forward_batch(params, cfg, [exp])
    exp.action = int(np.argmax(out.action_logits.data[0]))
    answer = greedy_answers(params, cfg, [exp])[0] if query is not None else None
    return ForwardOutput(
        action_logits=out.action_logits.data[0],
        answer=answer,
        m=out.m.data[0] if out.m is not None else None,
        m_prime=out.m_prime.data[0] if out.m_prime is not None else None,
        z=out.z.data[0],
    )
