"""Closed-loop rollouts and the navigation / query-answering metric suite."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .gridworld import Action, cell_distances, observe, step
from .model import Experience, forward_batch, greedy_answers, observation_channels
from .vocab import VOCAB


class EmptyLog(ValueError):
    pass


class NoProbeSets(ValueError):
    pass


@dataclass
class QueryRecord:
    query_id: str
    fact_id: str
    template_id: int
    qtype: str
    predicted: tuple
    gt_answer: tuple
    correct: int
    asked_at: int = 0

    @classmethod
    def make(cls, q, predicted, asked_at=None):
        predicted = tuple(predicted)
        return cls(q.query_id, q.fact_id, q.template_id, q.qtype, predicted, tuple(q.gt_answer),
                   int(predicted == tuple(q.gt_answer)),
                   q.asked_at if asked_at is None else asked_at)


@dataclass
class EpisodeResult:
    episode_id: str
    success: int
    path_length: int
    shortest_length: int
    min_goal_distance: int
    queries: list = field(default_factory=list)


@dataclass
class ProbeSet:
    set_id: int
    members: list   # query_ids
    fact_id: str
    gt_answer: tuple


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class StepInput:
    episode: object
    t: int
    observations: list
    vis: list
    geo: list
    query: object = None
    action: object = None   # action already taken at this step, if any


class ModelPolicy:
    """Greedy actions and answers from trained parameters."""

    def __init__(self, params, cfg):
        self.params, self.cfg = params, cfg

    def _exp(self, s):
        q = VOCAB.encode(s.query.tokens) if s.query is not None else None
        return Experience(key=s.episode.episode_id, vis=np.array(s.vis), geo=np.array(s.geo),
                          instr=VOCAB.encode(s.episode.instruction), t=s.t, query=q,
                          action=None if s.action is None else int(s.action))

    def actions(self, inputs):
        with nc.no_grad():
            out = forward_batch(self.params, self.cfg, [self._exp(s) for s in inputs])
        return [Action(int(i)) for i in np.argmax(out.action_logits.data, axis=1)]

    def answers(self, inputs):
        return greedy_answers(self.params, self.cfg, [self._exp(s) for s in inputs])


def rollout(policy, episodes, scenes, success_radius=1, max_steps=None, batch=64):
    """Run ``policy`` autonomously on every episode.

    scenes maps scene_seed -> SceneGraph. Queries are asked at their scripted
    timesteps; if the agent stops before a query's timestep the query is asked
    at its final state. Distances are geodesic cell distances.
    """
    results = []
    for lo in range(0, len(episodes), batch):
        results.extend(_rollout_chunk(policy, episodes[lo:lo + batch], scenes, success_radius, max_steps))
    return results


def _rollout_chunk(policy, episodes, scenes, radius, max_steps):
    n = len(episodes)
    state = []
    for ep in episodes:
        scene = scenes[ep.scene_seed]
        dist = cell_distances(scene, tuple(ep.goal))
        limit = max_steps if max_steps is not None else 2 * len(ep.expert_actions) + 10
        state.append({
            "scene": scene, "dist": dist, "pose": ep.start, "obs": [], "vis": [], "geo": [],
            "path": 0, "min_d": dist[ep.start.cell()], "done": False, "limit": limit,
            "answers": {}, "last_t": 0,
        })
    view_depth = getattr(getattr(policy, "cfg", None), "view_depth", 6)
    t = 0
    while not all(s["done"] for s in state):
        active = [i for i in range(n) if not state[i]["done"]]
        inputs = []
        for i in active:
            s, ep = state[i], episodes[i]
            o = observe(s["scene"], s["pose"], t)
            vis, geo = observation_channels(o, view_depth)
            s["obs"].append(o)
            s["vis"].append(vis)
            s["geo"].append(geo)
            s["last_t"] = t
            inputs.append(StepInput(ep, t, s["obs"], s["vis"], s["geo"], ep.query_at(t)))
        acts = policy.actions(inputs)
        for inp, a in zip(inputs, acts):
            inp.action = a
        asked = [k for k, inp in enumerate(inputs) if inp.query is not None]
        if asked:
            for k, ans in zip(asked, policy.answers([inputs[k] for k in asked])):
                state[active[k]]["answers"][inputs[k].query.query_id] = (ans, t)
        for i, a in zip(active, acts):
            s = state[i]
            if a == Action.STOP:
                s["done"] = True
                continue
            new = step(s["scene"], s["pose"], a)
            if new.cell() != s["pose"].cell():
                s["path"] += 1
            s["pose"] = new
            s["min_d"] = min(s["min_d"], s["dist"][new.cell()])
            if t + 1 >= s["limit"]:
                s["done"] = True
        t += 1

    # queries scheduled after the agent stopped are asked at its final state
    late = []
    for i, ep in enumerate(episodes):
        s = state[i]
        for q in ep.queries:
            if q.query_id not in s["answers"]:
                late.append((i, q))
    if late:
        inputs = [StepInput(episodes[i], state[i]["last_t"], state[i]["obs"], state[i]["vis"],
                            state[i]["geo"], q) for i, q in late]
        for (i, q), ans in zip(late, policy.answers(inputs)):
            state[i]["answers"][q.query_id] = (ans, state[i]["last_t"])

    out = []
    for i, ep in enumerate(episodes):
        s = state[i]
        final_d = s["dist"][s["pose"].cell()]
        recs = [QueryRecord.make(q, s["answers"][q.query_id][0], s["answers"][q.query_id][1])
                for q in ep.queries]
        out.append(EpisodeResult(ep.episode_id, int(final_d <= radius), s["path"],
                                 int(s["dist"][ep.start.cell()]), int(s["min_d"]), recs))
    return out


# ---------------------------------------------------------------------------
# metrics

def _queries(log):
    return [q for ep in log for q in ep.queries]


def qa_acc(log):
    qs = _queries(log)
    if not qs:
        raise EmptyLog("no queries in log")
    return sum(q.correct for q in qs) / len(qs)


def gca(log):
    """QA accuracy over queries on successful trajectories; None if there are none."""
    qs = [q for ep in log if ep.success for q in ep.queries]
    if not qs:
        return None
    return sum(q.correct for q in qs) / len(qs)


def build_probe_sets(queries):
    """Partition queries by (fact_id, gt_answer), keeping groups of size >= 2."""
    groups = {}
    for q in queries:
        groups.setdefault((q.fact_id, tuple(q.gt_answer)), []).append(q.query_id)
    sets = []
    for (fact, ans), members in groups.items():
        if len(members) >= 2:
            sets.append(ProbeSet(len(sets), members, fact, ans))
    return sets


def cmc(log, probe_sets=None):
    """Fraction of agreeing predicted-answer pairs within probe sets."""
    pred = {q.query_id: tuple(q.predicted) for q in _queries(log)}
    if probe_sets is None:
        probe_sets = build_probe_sets(_queries(log))
    agree = pairs = 0
    for ps in probe_sets:
        counts = Counter(pred[m] for m in ps.members)
        k = len(ps.members)
        pairs += k * (k - 1) // 2
        agree += sum(c * (c - 1) // 2 for c in counts.values())
    if pairs == 0:
        raise NoProbeSets("no probe pairs")
    return agree / pairs


def cmc_per_set(log, probe_sets):
    """Per probe set: (set_id, fact_id, k, agreeing pairs, total pairs)."""
    pred = {q.query_id: tuple(q.predicted) for q in _queries(log)}
    out = []
    for ps in probe_sets:
        counts = Counter(pred[m] for m in ps.members)
        k = len(ps.members)
        out.append({"set_id": ps.set_id, "fact_id": ps.fact_id, "k": k,
                    "agree": sum(c * (c - 1) // 2 for c in counts.values()), "pairs": k * (k - 1) // 2})
    return out


def sr_wa(log):
    eps = [ep for ep in log if any(not q.correct for q in ep.queries)]
    if not eps:
        return None
    return sum(ep.success for ep in eps) / len(eps)


def sr(log):
    if not log:
        raise EmptyLog("no episodes in log")
    return sum(ep.success for ep in log) / len(log)


def spl(log):
    if not log:
        raise EmptyLog("no episodes in log")
    total = 0.0
    for ep in log:
        if not ep.success:
            continue
        longest = max(ep.path_length, ep.shortest_length)
        total += 1.0 if longest == 0 else ep.shortest_length / longest
    return total / len(log)


def os_(log, success_radius=1):
    if not log:
        raise EmptyLog("no episodes in log")
    return sum(ep.min_goal_distance <= success_radius for ep in log) / len(log)


def majority_baseline(log):
    """Accuracy of always answering the most frequent ground-truth answer."""
    qs = _queries(log)
    if not qs:
        raise EmptyLog("no queries in log")
    return Counter(q.gt_answer for q in qs).most_common(1)[0][1] / len(qs)


def _safe(fn, *a):
    try:
        return fn(*a)
    except (EmptyLog, NoProbeSets):
        return None


def report(log, success_radius=1):
    qs = _queries(log)
    sets = build_probe_sets(qs)
    per = {}
    for qt in sorted({q.qtype for q in qs}):
        sub = [q for q in qs if q.qtype == qt]
        per[qt] = {"n": len(sub), "qa_acc": sum(q.correct for q in sub) / len(sub)}
    return {
        "qa_acc": _safe(qa_acc, log),
        "gca": gca(log),
        "cmc": _safe(cmc, log, sets),
        "sr_wa": sr_wa(log),
        "sr": _safe(sr, log),
        "spl": _safe(spl, log),
        "os": _safe(os_, log, success_radius),
        "n_episodes": len(log),
        "n_queries": len(qs),
        "n_probe_sets": len(sets),
        "majority_baseline": _safe(majority_baseline, log),
        "per_qtype": per,
        "cmc_per_set": cmc_per_set(log, sets),
    }


def log_to_dicts(log):
    return [asdict(ep) for ep in log]
