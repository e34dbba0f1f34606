"""Procedural cognitive-query generation over expert trajectories.

An expert trajectory is replayed to build a path memory log (what was visible,
where and when). Query types become eligible only when their preconditions hold
on that log; answers are derived from the ground-truth scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gridworld import (
    Action, Heading, Observation, Pose, SceneGraph, Unreachable,
    expert_path as plan_expert_path, make_instruction, observe, step,
)


class InvalidQuery(Exception):
    pass


TIER_OF = {
    "object_attribute_recall": "retrospective",
    "temporal_relation_recall": "retrospective",
    "self_localization": "introspective",
    "local_spatial_relation": "introspective",
    "topological_adjacency": "prospective",
    "future_landmark": "prospective",
}
QTYPES = tuple(TIER_OF)
TIERS = ("retrospective", "introspective", "prospective")

TEMPLATES = {
    "object_attribute_recall": ("what color was the {cat} you saw ?",
                                "what color was the {cat} seen earlier ?"),
    "temporal_relation_recall": ("did you see the {a} before or after the {b} ?",
                                 "was the {a} seen before or after the {b} ?"),
    "self_localization": ("which room are you in ?", "what room is this ?"),
    "local_spatial_relation": ("is the {cat} on your left or right ?",
                               "is the {cat} on the left or right side ?"),
    "topological_adjacency": ("is the {room} next to this room ?",
                              "does this room connect to the {room} ?"),
    "future_landmark": ("which room will you enter next ?", "what room comes next ?"),
}

MIN_VIEW_FRACTION = 0.10   # apparent size needed for a memorable sighting
UNIQUENESS_RADIUS = 5      # cells, Chebyshev


@dataclass(frozen=True)
class LogEntry:
    t: int
    pose: Pose
    region_id: int
    visible: tuple  # VisibleObject records


@dataclass
class PathMemoryLog:
    episode_id: str
    entries: list
    first_seen: dict

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class Fact:
    qtype: str
    fact_id: str
    query_class: str
    answer: tuple
    fill: tuple  # template slots as sorted (key, value) pairs


@dataclass
class CognitiveQuery:
    query_id: str
    tier: str
    qtype: str
    template_id: int
    fact_id: str
    asked_at: int
    tokens: list
    gt_answer: list
    region_id_at_ask: int
    query_class: str = ""

    def to_dict(self):
        return {
            "query_id": self.query_id, "tier": self.tier, "qtype": self.qtype,
            "template_id": self.template_id, "fact_id": self.fact_id,
            "asked_at": self.asked_at, "tokens": list(self.tokens),
            "gt_answer": list(self.gt_answer), "region_id_at_ask": self.region_id_at_ask,
            "query_class": self.query_class,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EpisodeRecord:
    episode_id: str
    scene_seed: int
    start: Pose
    goal: tuple
    instruction: list
    expert_actions: list
    observations: list
    queries: list = field(default_factory=list)

    def __len__(self):
        return len(self.expert_actions)

    def query_at(self, t):
        for q in self.queries:
            if q.asked_at == t:
                return q
        return None

    def to_dict(self):
        return {
            "episode_id": self.episode_id,
            "scene_seed": self.scene_seed,
            "start": [self.start.x, self.start.y, self.start.heading.name],
            "goal": list(self.goal),
            "instruction": list(self.instruction),
            "expert_actions": [Action(a).name for a in self.expert_actions],
            "observations": [o.to_dict() for o in self.observations],
            "queries": [q.to_dict() for q in self.queries],
        }

    @classmethod
    def from_dict(cls, d):
        x, y, h = d["start"]
        return cls(
            episode_id=d["episode_id"],
            scene_seed=d["scene_seed"],
            start=Pose(x, y, Heading[h]),
            goal=tuple(d["goal"]),
            instruction=list(d["instruction"]),
            expert_actions=[Action[a] for a in d["expert_actions"]],
            observations=[Observation.from_dict(o) for o in d["observations"]],
            queries=[CognitiveQuery.from_dict(q) for q in d["queries"]],
        )


def build_log(scene: SceneGraph, start: Pose, actions, episode_id="") -> PathMemoryLog:
    entries = []
    first_seen = {}
    pose = start
    for t in range(len(actions) + 1):
        if t > 0:
            pose = step(scene, pose, actions[t - 1])
        obs = observe(scene, pose, t)
        entries.append(LogEntry(t, pose, obs.region_id, obs.visible))
        for v in obs.visible:
            first_seen.setdefault(v.object_id, t)
    return PathMemoryLog(episode_id, entries, first_seen)


def _cheb(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def _fill(**kw):
    return tuple(sorted(kw.items()))


def _seen_until(log, t):
    """object_id -> first timestep seen, restricted to entries <= t."""
    return {o: ft for o, ft in log.first_seen.items() if ft <= t}


def check_precondition(log: PathMemoryLog, scene: SceneGraph, t: int, qtype: str) -> list:
    """Facts a query of ``qtype`` may target at timestep ``t`` (empty = not eligible)."""
    if not 0 <= t < len(log.entries):
        raise IndexError(f"t={t} outside log of length {len(log.entries)}")
    entry = log.entries[t]
    s = scene.seed
    objects = scene.objects
    facts = []

    if qtype == "object_attribute_recall":
        now = {v.object_id for v in entry.visible}
        seen = _seen_until(log, t)
        seen_cats = {}
        for o in seen:
            seen_cats[objects[o].category] = seen_cats.get(objects[o].category, 0) + 1
        for oid in sorted(seen):
            if oid in now:
                continue
            obj = objects[oid]
            origin = None
            for e in log.entries[:t]:
                rec = next((v for v in e.visible if v.object_id == oid), None)
                if rec is not None and rec.apparent_size >= MIN_VIEW_FRACTION:
                    origin = e.pose.cell()
                    break
            if origin is None:
                continue
            crowded = any(other.object_id != oid and other.category == obj.category
                          and _cheb(other.cell, origin) <= UNIQUENESS_RADIUS for other in objects)
            if crowded or seen_cats[obj.category] != 1:
                continue
            facts.append(Fact(qtype, f"s{s}:color:o{oid}", f"{qtype}:{obj.category}",
                              (obj.attribute,), _fill(cat=obj.category)))

    elif qtype == "temporal_relation_recall":
        seen = _seen_until(log, t)
        by_cat = {}
        for o in seen:
            by_cat.setdefault(objects[o].category, []).append(o)
        singles = sorted(v[0] for v in by_cat.values() if len(v) == 1)
        for a in singles:
            for b in singles:
                if a == b or seen[a] == seen[b]:
                    continue
                ca, cb = objects[a].category, objects[b].category
                ans = "before" if seen[a] < seen[b] else "after"
                facts.append(Fact(qtype, f"{log.episode_id}:order:o{a}:o{b}",
                                  f"{qtype}:{ca}:{cb}", (ans,), _fill(a=ca, b=cb)))

    elif qtype == "self_localization":
        r = entry.region_id
        facts.append(Fact(qtype, f"s{s}:room:r{r}", qtype, (scene.room_type_of(r),), ()))

    elif qtype == "local_spatial_relation":
        counts = {}
        for v in entry.visible:
            counts[v.category] = counts.get(v.category, 0) + 1
        p = entry.pose
        for v in sorted(entry.visible, key=lambda v: v.object_id):
            if v.bearing == "center" or counts[v.category] != 1:
                continue
            facts.append(Fact(qtype, f"s{s}:side:o{v.object_id}:p{p.x}.{p.y}.{int(p.heading)}",
                              f"{qtype}:{v.category}", (v.bearing,), _fill(cat=v.category)))

    elif qtype == "topological_adjacency":
        r = entry.region_id
        here = scene.room_type_of(r)
        neighbor_types = {scene.room_type_of(n) for n in scene.adjacency[r]}
        all_types = {room.room_type for room in scene.rooms} - {here}
        yes = sorted(all_types & neighbor_types)
        no = sorted(all_types - neighbor_types)
        if yes and no:
            for rt in sorted(all_types):
                ans = "yes" if rt in neighbor_types else "no"
                facts.append(Fact(qtype, f"s{s}:adj:r{r}:{rt}", f"{qtype}:{rt}",
                                  (ans,), _fill(room=rt)))

    elif qtype == "future_landmark":
        r = entry.region_id
        nxt = next((e.region_id for e in log.entries[t + 1:] if e.region_id != r), None)
        if nxt is not None:
            facts.append(Fact(qtype, f"s{s}:room:r{nxt}", qtype, (scene.room_type_of(nxt),), ()))

    else:
        raise ValueError(f"unknown qtype {qtype!r}")
    return facts


def _make_query(fact, template_id, t, log, query_id):
    text = TEMPLATES[fact.qtype][template_id].format(**dict(fact.fill))
    return CognitiveQuery(
        query_id=query_id,
        tier=TIER_OF[fact.qtype],
        qtype=fact.qtype,
        template_id=template_id,
        fact_id=fact.fact_id,
        asked_at=t,
        tokens=text.split(" "),
        gt_answer=list(fact.answer),
        region_id_at_ask=log.entries[t].region_id,
        query_class=fact.query_class,
    )


def _find_fact(log, scene, t, fact):
    for f in check_precondition(log, scene, t, fact.qtype):
        if f.fact_id == fact.fact_id and f.answer == fact.answer:
            return f
    return None


def generate_queries(log: PathMemoryLog, scene: SceneGraph, expert_path, rng, budget: int,
                     dup_fraction: float = 0.3, min_gap: int = 2) -> list:
    """Schedule up to ``budget`` queries along the logged trajectory.

    Only decision timesteps (one per expert action) are used. Tiers rotate
    round-robin over whatever is eligible at each chosen timestep. With
    probability ``dup_fraction`` a primary query is followed by a paraphrase
    and a re-ask of the same fact one or two steps later.
    """
    T = min(len(expert_path), len(log.entries)) if expert_path is not None else len(log.entries)
    queries = []
    if budget <= 0 or T == 0:
        return queries
    spacing = max(min_gap, T // (budget + 1))
    occupied = set()
    tier_ptr = 0

    def emit(fact, template_id, t):
        q = _make_query(fact, template_id, t, log, f"{log.episode_id}:q{len(queries)}")
        queries.append(q)
        occupied.add(t)

    t = int(rng.integers(0, 2))
    while len(queries) < budget and t < T:
        eligible = {q: check_precondition(log, scene, t, q) for q in QTYPES}
        tiers_ok = [tr for tr in TIERS if any(eligible[q] and TIER_OF[q] == tr for q in QTYPES)]
        if not tiers_ok:
            t += 1
            continue
        for k in range(len(TIERS)):
            tier = TIERS[(tier_ptr + k) % len(TIERS)]
            if tier in tiers_ok:
                break
        tier_ptr = (TIERS.index(tier) + 1) % len(TIERS)
        qtypes = [q for q in QTYPES if TIER_OF[q] == tier and eligible[q]]
        qtype = qtypes[int(rng.integers(len(qtypes)))]
        facts = eligible[qtype]
        fact = facts[int(rng.integers(len(facts)))]
        template_id = int(rng.integers(len(TEMPLATES[qtype])))
        emit(fact, template_id, t)
        last = t
        if rng.random() < dup_fraction:
            paraphrase = (template_id + 1) % len(TEMPLATES[qtype])
            for tmpl in (paraphrase, template_id):
                if len(queries) >= budget:
                    break
                for shift in (1, 2):
                    t2 = last + shift
                    if t2 < T and t2 not in occupied and _find_fact(log, scene, t2, fact):
                        emit(fact, tmpl, t2)
                        last = t2
                        break
        t = last + spacing + int(rng.integers(0, 2))
    return queries


def _parse_fact(fact_id):
    parts = fact_id.split(":")
    return parts[1], parts


def answer_oracle(scene: SceneGraph, log: PathMemoryLog, expert_path, query: CognitiveQuery) -> list:
    """Re-derive a query's answer from the scene and log; InvalidQuery if ineligible."""
    t = query.asked_at
    facts = check_precondition(log, scene, t, query.qtype) if 0 <= t < len(log.entries) else []
    if not any(f.fact_id == query.fact_id for f in facts):
        raise InvalidQuery(f"{query.query_id}: {query.fact_id} not eligible at t={t}")
    kind, parts = _parse_fact(query.fact_id)
    if kind == "color":
        return [scene.objects[int(parts[2][1:])].attribute]
    if kind == "order":
        a, b = int(parts[2][1:]), int(parts[3][1:])
        return ["before" if log.first_seen[a] < log.first_seen[b] else "after"]
    if kind == "room":
        return [scene.room_type_of(int(parts[2][1:]))]
    if kind == "side":
        oid = int(parts[2][1:])
        rec = next(v for v in log.entries[t].visible if v.object_id == oid)
        return [rec.bearing]
    if kind == "adj":
        r, rt = int(parts[2][1:]), parts[3]
        return ["yes" if any(scene.room_type_of(n) == rt for n in scene.adjacency[r]) else "no"]
    raise InvalidQuery(f"unrecognised fact id {query.fact_id}")


# ---------------------------------------------------------------------------
# episodes and datasets

def sample_episode(scene: SceneGraph, episode_id: str, rng, budget: int,
                   min_len: int = 6, max_len: int = 40, cross_room_prob: float = 0.85,
                   dup_fraction: float = 0.3, max_tries: int = 200) -> EpisodeRecord:
    cells = [c for room in scene.rooms for c in room.cells()]
    for _ in range(max_tries):
        sx, sy = cells[int(rng.integers(len(cells)))]
        start = Pose(sx, sy, Heading(int(rng.integers(4))))
        r0 = scene.region_at(sx, sy)
        if len(scene.rooms) > 1 and rng.random() < cross_room_prob:
            pool = [c for c in cells if scene.region_at(*c) != r0]
        else:
            pool = [c for c in cells if c != (sx, sy)]
        if not pool:
            continue
        goal = pool[int(rng.integers(len(pool)))]
        try:
            actions = plan_expert_path(scene, start, goal)
        except Unreachable:
            continue
        if not min_len <= len(actions) <= max_len:
            continue
        log = build_log(scene, start, actions[:-1], episode_id)
        queries = generate_queries(log, scene, actions, rng, budget, dup_fraction=dup_fraction)
        observations = [observe(scene, e.pose, e.t) for e in log.entries]
        return EpisodeRecord(
            episode_id=episode_id,
            scene_seed=scene.seed,
            start=start,
            goal=tuple(goal),
            instruction=make_instruction(scene, actions, start),
            expert_actions=list(actions),
            observations=observations,
            queries=queries,
        )
    raise RuntimeError(f"could not sample an episode in scene {scene.seed}")


def generate_dataset(scenes, n_episodes: int, budget: int, seed: int, prefix="ep", **kw) -> list:
    """Episode i lives in scene i mod len(scenes) and has its own rng stream."""
    episodes = []
    for i in range(n_episodes):
        scene = scenes[i % len(scenes)]
        rng = np.random.default_rng([seed, i])
        episodes.append(sample_episode(scene, f"{prefix}{i}", rng, budget, **kw))
    return episodes


def write_jsonl(episodes, path):
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_dict(), sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path) as f:
        return [EpisodeRecord.from_dict(json.loads(line)) for line in f if line.strip()]
