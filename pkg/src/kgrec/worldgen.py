"""Synthetic cohort worlds with controllable text informativeness.

Users belong to cohorts; each cohort has a latent topic preference and a
``knowledge_alignment`` in [-1, 1] that controls the text tokens attached
to its users' interactions: aligned text (+1) is drawn from the vocabulary
band of the item's own topic, anti-aligned text (-1) is drawn mostly from
a fixed *wrong* topic's band, mixed with uniform noise so it carries less
information overall while pointing in a systematically wrong direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    pass


@dataclass
class CohortSpec:
    name: str
    users: int
    knowledge_alignment: float  # in [-1, 1]


@dataclass
class WorldSpec:
    cohorts: list[CohortSpec]
    n_items: int = 400
    n_topics: int = 8
    vocab: int = 256
    tokens_per_item: int = 8
    d_content: int = 18
    min_interactions: int = 6
    max_interactions: int = 12
    content_noise: float = 0.5
    anti_concentration: float = 0.7


def default_world_spec() -> WorldSpec:
    """Four 500-user cohorts spanning the alignment range."""
    return WorldSpec(cohorts=[
        CohortSpec("young_f", 500, 1.0),
        CohortSpec("young_m", 500, 0.5),
        CohortSpec("older_f", 500, 0.0),
        CohortSpec("older_m", 500, -1.0),
    ])


@dataclass
class WorldUser:
    user_id: int
    cohort: str
    interest: np.ndarray          # distribution over topics
    items: list[int]              # chronological interactions
    text: list[list[int]]         # per-interaction text token streams


@dataclass
class SyntheticWorld:
    seed: int
    spec: WorldSpec
    item_topics: np.ndarray       # (n_items,)
    item_content: np.ndarray      # (n_items, d_content)
    users: list[WorldUser]
    cohort_of: dict[int, str] = field(default_factory=dict)

    def users_in_cohort(self, name: str) -> list[WorldUser]:
        return [u for u in self.users if u.cohort == name]


def _validate(spec: WorldSpec):
    if not spec.cohorts:
        raise ConfigurationError("world needs at least one cohort")
    if spec.n_items < 2 * spec.n_topics:
        raise ConfigurationError(
            f"{spec.n_items} items cannot cover {spec.n_topics} topics "
            "with >= 2 items each")
    if spec.vocab < 2 * spec.n_topics:
        raise ConfigurationError("vocabulary too small for per-topic bands")
    if spec.min_interactions < 4:
        # two train interactions plus one validation and one test target
        raise ConfigurationError("users need at least four interactions")
    for c in spec.cohorts:
        if not -1.0 <= c.knowledge_alignment <= 1.0:
            raise ConfigurationError(
                f"cohort {c.name}: alignment {c.knowledge_alignment} "
                "outside [-1, 1]")
        if c.users < 1:
            raise ConfigurationError(f"cohort {c.name}: no users")


def _topic_bands(spec: WorldSpec) -> list[np.ndarray]:
    """Partition the text vocabulary into one contiguous band per topic."""
    return [np.array_split(np.arange(spec.vocab), spec.n_topics)[t]
            for t in range(spec.n_topics)]


def _cohort_preference(idx: int, n_topics: int) -> np.ndarray:
    pref = np.full(n_topics, 0.2 / n_topics)
    a = (2 * idx) % n_topics
    b = (2 * idx + 1) % n_topics
    pref[a] += 0.4
    pref[b] += 0.4
    return pref / pref.sum()


def _sample_text(rng: np.random.Generator, topic: int, alignment: float,
                 spec: WorldSpec, bands: list[np.ndarray],
                 ) -> list[int]:
    out = []
    # misleading text names one uniformly random wrong topic per
    # interaction: never the true topic, yet no stable mapping exists that
    # a model could invert or use as a per-user fingerprint
    wrong = (topic + int(rng.integers(1, spec.n_topics))) % spec.n_topics
    for _ in range(spec.tokens_per_item):
        r = rng.random()
        if alignment >= 0:
            if r < alignment:
                band = bands[topic]
            else:
                band = np.arange(spec.vocab)
        else:
            if r < spec.anti_concentration * (-alignment):
                band = bands[wrong]
            else:
                band = np.arange(spec.vocab)
        out.append(int(rng.choice(band)))
    return out


def generate_world(spec: WorldSpec, seed: int) -> SyntheticWorld:
    _validate(spec)
    rng = np.random.default_rng(seed)

    # items: round-robin topic assignment, content = prototype + noise
    topics = np.arange(spec.n_items) % spec.n_topics
    protos = rng.normal(size=(spec.n_topics, spec.d_content))
    content = protos[topics] + spec.content_noise * rng.normal(
        size=(spec.n_items, spec.d_content))

    bands = _topic_bands(spec)
    items_by_topic = [np.flatnonzero(topics == t)
                      for t in range(spec.n_topics)]

    users: list[WorldUser] = []
    uid = 0
    for ci, cohort in enumerate(spec.cohorts):
        pref = _cohort_preference(ci, spec.n_topics)
        for _ in range(cohort.users):
            interest = pref + 0.02 * rng.random(spec.n_topics)
            interest /= interest.sum()
            n = int(rng.integers(spec.min_interactions,
                                 spec.max_interactions + 1))
            item_ids, texts = [], []
            for _ in range(n):
                t = int(rng.choice(spec.n_topics, p=interest))
                item = int(rng.choice(items_by_topic[t]))
                item_ids.append(item)
                texts.append(_sample_text(rng, int(topics[item]),
                                          cohort.knowledge_alignment,
                                          spec, bands))
            users.append(WorldUser(uid, cohort.name, interest,
                                   item_ids, texts))
            uid += 1

    world = SyntheticWorld(seed=seed, spec=spec, item_topics=topics,
                           item_content=content, users=users)
    world.cohort_of = {u.user_id: u.cohort for u in users}
    return world


@dataclass
class Split:
    train: dict[int, list[int]]   # user_id -> item prefix
    validation: dict[int, int]
    test: dict[int, int]
    excluded: int = 0


def leave_one_out_split(world: SyntheticWorld) -> Split:
    """Per user: last interaction -> test, second-to-last -> validation,
    remainder -> train.  Users with fewer than three interactions are
    excluded and counted."""
    train, val, test, excluded = {}, {}, {}, 0
    for u in world.users:
        if len(u.items) < 3:
            excluded += 1
            continue
        train[u.user_id] = list(u.items[:-2])
        val[u.user_id] = u.items[-2]
        test[u.user_id] = u.items[-1]
    return Split(train, val, test, excluded)


def text_topic_mutual_information(world: SyntheticWorld) -> float:
    """Plug-in mutual information (nats) between a text token and the
    topic of the item it was attached to, over all generated tokens."""
    t_max = world.spec.n_topics
    v_max = world.spec.vocab
    joint = np.zeros((t_max, v_max))
    topic_of = world.item_topics
    for u in world.users:
        for item, toks in zip(u.items, u.text):
            for tok in toks:
                joint[topic_of[item], tok] += 1
    joint /= joint.sum()
    pt = joint.sum(axis=1, keepdims=True)
    pv = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float(np.sum(joint[mask] * np.log(
        joint[mask] / (pt @ pv)[mask])))


# ---------------------------------------------------------------------------
# serialization


def write_world_jsonl(world: SyntheticWorld, path: str):
    with open(path, "w") as f:
        spec = world.spec
        f.write(json.dumps({
            "record": "header", "seed": world.seed,
            "cohorts": [[c.name, c.users, c.knowledge_alignment]
                        for c in spec.cohorts],
            "n_items": spec.n_items, "n_topics": spec.n_topics,
            "vocab": spec.vocab, "tokens_per_item": spec.tokens_per_item,
            "d_content": spec.d_content,
            "min_interactions": spec.min_interactions,
            "max_interactions": spec.max_interactions,
            "content_noise": spec.content_noise,
            "anti_concentration": spec.anti_concentration,
        }) + "\n")
        for i in range(spec.n_items):
            f.write(json.dumps({
                "record": "item", "item_id": i,
                "topic": int(world.item_topics[i]),
                "content": [round(x, 12) for x in world.item_content[i]],
            }) + "\n")
        for u in world.users:
            f.write(json.dumps({
                "record": "user", "user_id": u.user_id, "cohort": u.cohort,
                "interest": [round(x, 12) for x in u.interest],
                "items": u.items, "text": u.text,
            }) + "\n")


def read_world_jsonl(path: str) -> SyntheticWorld:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("record") != "header":
            raise ConfigurationError("world file missing header record")
        spec = WorldSpec(
            cohorts=[CohortSpec(n, u, a) for n, u, a in header["cohorts"]],
            n_items=header["n_items"], n_topics=header["n_topics"],
            vocab=header["vocab"], tokens_per_item=header["tokens_per_item"],
            d_content=header["d_content"],
            min_interactions=header["min_interactions"],
            max_interactions=header["max_interactions"],
            content_noise=header["content_noise"],
            anti_concentration=header["anti_concentration"])
        topics = np.zeros(spec.n_items, dtype=np.int64)
        content = np.zeros((spec.n_items, spec.d_content))
        users = []
        for line in f:
            rec = json.loads(line)
            if rec["record"] == "item":
                topics[rec["item_id"]] = rec["topic"]
                content[rec["item_id"]] = rec["content"]
            elif rec["record"] == "user":
                users.append(WorldUser(rec["user_id"], rec["cohort"],
                                       np.array(rec["interest"]),
                                       rec["items"], rec["text"]))
    world = SyntheticWorld(seed=header["seed"], spec=spec, item_topics=topics,
                           item_content=content, users=users)
    world.cohort_of = {u.user_id: u.cohort for u in users}
    return world


def parse_review_jsonl(path: str) -> dict[str, list[tuple[float, str]]]:
    """Review-style records {reviewerID, asin, unixReviewTime} grouped into
    per-user chronological item lists."""
    by_user: dict[str, list[tuple[float, str]]] = {}
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            by_user.setdefault(rec["reviewerID"], []).append(
                (float(rec.get("unixReviewTime", 0)), rec["asin"]))
    for seq in by_user.values():
        seq.sort()
    return by_user
