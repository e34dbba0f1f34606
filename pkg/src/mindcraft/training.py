"""Teacher-forced training loop with AdamW and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import numcore as nc
from .model import ModelConfig, episode_channels, episode_experiences, forward_batch, init_params
from .model import query_experience
from .objectives import (
    InsufficientBatch, LossWeights, NoPositive, ReplayBuffer, ReplayEntry, atlas_loss,
    episodic_loss, info_nce_batch, mine, total_loss, usage_entropy,
)
from .vocab import VOCAB


class NonFiniteGradient(FloatingPointError):
    def __init__(self, step, name=""):
        super().__init__(f"non-finite gradient at step {step}" + (f" ({name})" if name else ""))
        self.step = step


@dataclass
class TrainConfig:
    lr_peak: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.03
    epochs: int = 10
    batch_size: int = 8
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be > 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.weights.validate()
        self.model.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        w = LossWeights(**d.pop("weights", {}))
        m = ModelConfig(**d.pop("model", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(weights=w, model=m, **d).validate()


def lr_at(step, total_steps, cfg: TrainConfig):
    """Linear warmup to lr_peak over warmup_fraction*total_steps, cosine to 0 at total_steps."""
    if total_steps <= 0:
        return 0.0
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.lr_peak * step / warm
    span = total_steps - warm
    frac = (step - warm) / span if span > 0 else 1.0
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * min(max(frac, 0.0), 1.0)))


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class TrainState:
    step: int
    params: dict
    m: dict
    v: dict
    seed: int = 0

    @classmethod
    def fresh(cls, params, seed=0):
        return cls(0, params, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, seed)


def decays(name, value):
    """Weight decay applies to matrices only (not gains, biases, vectors)."""
    return value.ndim >= 2


def optimizer_step(state: TrainState, grads: dict, lr, cfg: TrainConfig):
    """AdamW with bias correction; grads clipped to global norm first (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(state.step, name)
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    clip = 1.0
    if cfg.grad_clip and norm > cfg.grad_clip:
        clip = cfg.grad_clip / norm
    b1, b2 = cfg.betas
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g * clip
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(name, p.data):
            p.data -= (lr * cfg.weight_decay) * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# data plumbing

def build_buffer(dataset):
    return ReplayBuffer(ReplayEntry.from_query(ep, q, i, j)
                        for i, ep in enumerate(dataset) for j, q in enumerate(ep.queries))


def steps_per_epoch(n, batch_size):
    return max(1, n // batch_size) if n >= 2 else 0


def batch_indices(n, batch_size, seed, epoch):
    """Deterministic per-epoch shuffle; the tail joins the last batch."""
    order = np.random.default_rng([seed, 7, epoch]).permutation(n)
    k = steps_per_epoch(n, batch_size)
    out = [order[i * batch_size:(i + 1) * batch_size] for i in range(k)]
    if k and k * batch_size < n:
        out[-1] = np.concatenate([out[-1], order[k * batch_size:]])
    return out


def total_steps_for(n, cfg: TrainConfig):
    total = cfg.epochs * steps_per_epoch(n, cfg.batch_size)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    return total


class Trainer:
    def __init__(self, dataset, cfg: TrainConfig, state: TrainState | None = None):
        if not dataset:
            raise ValueError("empty dataset")
        self.cfg = cfg.validate()
        self.data = list(dataset)
        mc = cfg.model
        self.channels = [episode_channels(ep.observations, mc.view_depth) for ep in self.data]
        self.buffer = build_buffer(self.data)
        self.state = state or TrainState.fresh(init_params(mc, cfg.seed), cfg.seed)
        self.total = total_steps_for(len(self.data), cfg)
        self.log = []

    def _exp(self, entry):
        i, j = entry.experience_ref
        ep = self.data[i]
        return query_experience(ep, ep.queries[j], self.cfg.model, self.channels[i])

    def batch_loss(self, batch_idx, step):
        """Total loss Tensor and a dict of logged components for one batch."""
        cfg, w, mc = self.cfg, self.cfg.weights, self.cfg.model
        params = self.state.params
        eps = [self.data[i] for i in batch_idx]
        main, spans, gt_actions = [], [], []
        for i, ep in zip(batch_idx, eps):
            ex = episode_experiences(ep, mc, True, self.channels[i])
            spans.append((len(main), len(ex)))
            main.extend(ex)
            gt_actions.extend(int(a) for a in ep.expert_actions)  # Action order matches the action tokens
        n_main = len(main)
        has_q = np.array([e.query is not None for e in main])

        # contrastive samples
        use_crl = w.lambda_c > 0 and mc.use_map
        anchors, pos_exps, neg_sets, n_short = [], [], [], 0
        if use_crl:
            rng = np.random.default_rng([cfg.seed, 11, step])
            for k, (i, ep) in enumerate(zip(batch_idx, eps)):
                off = spans[k][0]
                for j, q in enumerate(ep.queries):
                    entry = ReplayEntry.from_query(ep, q, i, j)
                    try:
                        pos, neg = mine(self.buffer, entry, w.counts, rng, w.backfill)
                    except NoPositive:
                        continue
                    n_short += sum(neg.shortfall.values())
                    if len(neg) == 0:
                        continue
                    anchors.append(off + q.asked_at)
                    pos_exps.append(self._exp(pos))
                    neg_sets.append([self._exp(e) for e in neg.all()])

        out = forward_batch(params, mc, main + pos_exps)
        ce_act = nc.cross_entropy(nc.gather_rows(out.action_logits, np.arange(n_main)), gt_actions)
        mc_t = ce_act
        qa_val = 0.0
        if out.answer_logits is not None:
            ce_ans = nc.cross_entropy(out.answer_logits, out.answer_targets)
            owner = out.answer_owner
            counts = np.bincount(owner, minlength=n_main)
            wrow = (1.0 / counts[owner]).astype(ce_ans.dtype)
            per_item = nc.reshape(nc.scatter_rows(nc.reshape(nc.mul(ce_ans, nc.Tensor(wrow)), (-1, 1)),
                                                  owner, n_main), (n_main,))
            qa_val = float(per_item.data[has_q].mean()) if has_q.any() else 0.0
            if w.lambda_qa:
                mc_t = nc.add(ce_act, nc.scale(per_item, w.lambda_qa))

        crl_t = nc.Tensor(np.zeros(n_main, dtype=ce_act.dtype))
        crl_val = 0.0
        if anchors:
            with nc.no_grad():
                flat = [e for s in neg_sets for e in s]
                neg_m = forward_batch(params, mc, flat).m_prime.data
            A, nmax = len(anchors), max(len(s) for s in neg_sets)
            negs = np.zeros((A, nmax, mc.d_model), dtype=neg_m.dtype)
            mask = np.zeros((A, nmax), bool)
            o = 0
            for a, s in enumerate(neg_sets):
                negs[a, :len(s)] = neg_m[o:o + len(s)]
                mask[a, :len(s)] = True
                o += len(s)
            m_anchor = nc.gather_rows(out.m_prime, anchors)
            m_pos = nc.gather_rows(out.m_prime, np.arange(n_main, n_main + A))
            crl = info_nce_batch(m_anchor, m_pos, nc.Tensor(negs), mask, w.tau)
            crl_val = float(crl.data.mean())
            crl_t = nc.reshape(nc.scatter_rows(nc.reshape(crl, (-1, 1)), anchors, n_main), (n_main,))

        n_frames = sum(len(ep.expert_actions) for ep in eps)
        frames = nc.gather_rows(out.frames, np.arange(n_frames))
        owner = out.frame_key[:n_frames]
        sem, sem_val = 0.0, 0.0
        if w.lambda_s > 0:
            sem = atlas_loss(frames, params["atlas"], w.gamma, w.tau_atlas)
            sem_val = float(sem.data)
        epi, epi_val = 0.0, 0.0
        if w.lambda_r > 0:
            try:
                epi = episodic_loss(frames, owner, w.tau, np.random.default_rng([cfg.seed, 13, step]))
                epi_val = float(epi.data)
            except InsufficientBatch:
                epi = 0.0

        per_ep = []
        for off, T in spans:
            idx = np.arange(off, off + T)
            per_ep.append(total_loss(nc.select(mc_t, idx, 0), nc.select(crl_t, idx, 0), has_q[idx],
                                     sem, epi, w, T))
        loss = nc.scale(sum_tensors(per_ep), 1.0 / len(per_ep))
        parts = {
            "loss_action": float(ce_act.data.mean()),
            "loss_qa": qa_val,
            "loss_crl": crl_val,
            "loss_sem": sem_val,
            "loss_epi": epi_val,
            "atlas_entropy": usage_entropy(frames.data, params["atlas"], w.tau_atlas),
            "n_anchors": len(anchors),
            "neg_shortfall": int(n_short),
        }
        return loss, parts

    def step(self, batch_idx):
        st = self.state
        lr = lr_at(st.step, self.total, self.cfg)
        for p in st.params.values():
            p.grad = None
        loss, parts = self.batch_loss(batch_idx, st.step)
        if not np.isfinite(loss.data):
            raise NonFiniteGradient(st.step, "loss")
        loss.backward()
        grads = {k: p.grad for k, p in st.params.items() if p.grad is not None}
        step_no = st.step
        optimizer_step(st, grads, lr, self.cfg)
        rec = {"step": step_no, "lr": lr, "loss_total": float(loss.data)}
        rec.update(parts)
        self.log.append(rec)
        return rec

    def run(self, stop_at=None, callback=None):
        """Train until total steps (or ``stop_at``); resumes from state.step."""
        spe = steps_per_epoch(len(self.data), self.cfg.batch_size)
        end = self.total if stop_at is None else min(stop_at, self.total)
        while self.state.step < end:
            epoch, k = divmod(self.state.step, spe)
            batches = batch_indices(len(self.data), self.cfg.batch_size, self.cfg.seed, epoch)
            rec = self.step(batches[k])
            if callback:
                callback(rec)
        return self.state.params, self.log


def sum_tensors(ts):
    out = ts[0]
    for t in ts[1:]:
        out = nc.add(out, t)
    return out


def train(dataset, cfg: TrainConfig, state=None, stop_at=None, callback=None):
    """Returns (params, log). ``state`` resumes an interrupted run."""
    tr = Trainer(dataset, cfg, state)
    return tr.run(stop_at, callback)


# ---------------------------------------------------------------------------
# checkpoints

def save_params(path, params, cfg: TrainConfig, extra_meta=None):
    meta = {"config": cfg.to_dict(), "kind": "params"}
    meta.update(extra_meta or {})
    checkpoint.save(path, {k: p.data for k, p in params.items()}, meta)


def load_params(path):
    arrays, meta = checkpoint.load(path)
    cfg = TrainConfig.from_dict(meta["config"])
    dt = np.dtype(cfg.model.dtype)
    params = {k: nc.Parameter(v.astype(dt), k) for k, v in arrays.items()}
    return params, cfg, meta


def save_state(path, state: TrainState, cfg: TrainConfig):
    arrays = {}
    for k, p in state.params.items():
        arrays[f"param/{k}"] = p.data
    for k in state.params:
        arrays[f"m/{k}"] = state.m[k]
        arrays[f"v/{k}"] = state.v[k]
    checkpoint.save(path, arrays, {"config": cfg.to_dict(), "kind": "train_state",
                                   "step": state.step, "seed": state.seed})


def load_state(path):
    arrays, meta = checkpoint.load(path)
    cfg = TrainConfig.from_dict(meta["config"])
    dt = np.dtype(cfg.model.dtype)
    params = {k[6:]: nc.Parameter(v.astype(dt), k[6:]) for k, v in arrays.items() if k.startswith("param/")}
    m = {k: arrays[f"m/{k}"].astype(dt) for k in params}
    v = {k: arrays[f"v/{k}"].astype(dt) for k in params}
    return TrainState(meta["step"], params, m, v, meta["seed"]), cfg
