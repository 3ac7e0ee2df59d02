"""Synthetic community-structured HIN with ratings, for tests and benchmarks.

Users and items each belong to one of ``n_communities`` latent communities.
Users join groups (type G) and items carry tags (type T); both attribute
pools are partitioned by community and links stay inside the own community
with probability ``attr_purity``. Ratings depend on whether the user's and
the item's communities agree, so the attribute structure is informative
about ratings that were never observed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .hin import HinGraph, NetworkSchema, RatingDataset, RatingRecord, _GraphBuilder

USER, ITEM, GROUP, TAG = "U", "I", "G", "T"

SCHEMA = NetworkSchema([USER, ITEM, GROUP, TAG], [(USER, ITEM), (USER, GROUP), (ITEM, TAG)])

META_PATHS = "[user]\nUGU\nUIU\n[item]\nITI\nIUI\n"


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 1000
    n_communities: int = 3
    n_ratings: int = 20000
    groups_per_community: int = 10
    tags_per_community: int = 10
    links_per_user: int = 3
    links_per_item: int = 3
    attr_purity: float = 0.85
    like: float = 4.2  # mean rating inside the own community
    dislike: float = 2.0
    noise: float = 0.6
    seed: int = 0


@dataclass
class SynthData:
    graph: HinGraph  # attribute edges only; rating edges are added per split
    ratings: RatingDataset
    user_community: dict
    item_community: dict


def generate(cfg: SynthConfig = SynthConfig()) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    C = cfg.n_communities
    users = [f"u:{k}" for k in range(cfg.n_users)]
    items = [f"i:{k}" for k in range(cfg.n_items)]
    cu = rng.integers(0, C, size=cfg.n_users)
    ci = rng.integers(0, C, size=cfg.n_items)

    b = _GraphBuilder(SCHEMA)
    for v in users:
        b.add_node(v, USER)
    for v in items:
        b.add_node(v, ITEM)
    groups = [[f"g:{c}.{k}" for k in range(cfg.groups_per_community)] for c in range(C)]
    tags = [[f"t:{c}.{k}" for k in range(cfg.tags_per_community)] for c in range(C)]
    for pool, t in ((groups, GROUP), (tags, TAG)):
        for row in pool:
            for v in row:
                b.add_node(v, t)

    def link(entities, comm, pool, n_links):
        for v, c in zip(entities, comm):
            for _ in range(n_links):
                home = c if rng.random() < cfg.attr_purity else rng.integers(0, C)
                b.add_edge(v, pool[home][rng.integers(0, len(pool[home]))])

    link(users, cu, groups, cfg.links_per_user)
    link(items, ci, tags, cfg.links_per_item)

    n_pairs = cfg.n_users * cfg.n_items
    if cfg.n_ratings > n_pairs:
        raise ValueError("more ratings requested than user-item pairs")
    flat = rng.choice(n_pairs, size=cfg.n_ratings, replace=False)
    ui, ii = np.divmod(flat, cfg.n_items)
    mean = np.where(cu[ui] == ci[ii], cfg.like, cfg.dislike)
    vals = np.clip(np.rint(mean + cfg.noise * rng.standard_normal(cfg.n_ratings)), 1, 5)
    records = [RatingRecord(users[u], items[i], float(r)) for u, i, r in zip(ui, ii, vals)]
    return SynthData(b.build(), RatingDataset(records, (1.0, 5.0)),
                     dict(zip(users, cu.tolist())), dict(zip(items, ci.tolist())))


def write(data: SynthData, directory) -> dict:
    """Write nodes/edges/schema/ratings/meta-path files; returns their paths."""
    from .hin import write_graph, write_ratings

    os.makedirs(directory, exist_ok=True)
    paths = {k: os.path.join(directory, f) for k, f in (
        ("nodes", "nodes.tsv"), ("edges", "edges.tsv"), ("schema", "schema.json"),
        ("ratings", "ratings.tsv"), ("meta_paths", "metapaths.txt"))}
    with open(paths["nodes"], "w") as fn, open(paths["edges"], "w") as fe:
        write_graph(data.graph, fn, fe)
    with open(paths["schema"], "w") as fh:
        json.dump(SCHEMA.to_json(), fh, indent=1)
    with open(paths["ratings"], "w") as fh:
        write_ratings(data.ratings, fh)
    with open(paths["meta_paths"], "w") as fh:
        fh.write(META_PATHS)
    return paths
