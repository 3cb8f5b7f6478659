"""Regularized (aging) evolution over genotypes, plus the baselines.

Fitness is a black-box callable genotype -> float where LOWER is better
(validation log loss in the real pipeline).  Each iteration samples a
tournament without replacement, mutates the winner into a batch of
children, inserts them, and retires the oldest members so the population
size stays constant.
"""

from __future__ import annotations

import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import space as S


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 128
    iterations: int = 240
    tournament: int = 64
    children_per_iter: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.tournament > self.population_size:
            raise ValueError("tournament cannot exceed the population size")
        if self.children_per_iter < 1:
            raise ValueError("children_per_iter must be >= 1")


@dataclass
class SearchRecord:
    genotype: S.Genotype
    fitness: float
    iteration: int
    record_id: int
    parent_id: int | None = None
    flagged: bool = False       # non-finite fitness, ranked as worst

    def sort_key(self) -> float:
        return math.inf if self.flagged else self.fitness

    def to_json_obj(self) -> dict:
        return {"id": self.record_id, "iteration": self.iteration,
                "parent": self.parent_id, "fitness": self.fitness,
                "flagged": self.flagged,
                "genotype": S.to_json_obj(self.genotype)}

    @staticmethod
    def from_json_obj(obj) -> "SearchRecord":
        return SearchRecord(
            genotype=S.deserialize(json.dumps(obj["genotype"])),
            fitness=float(obj["fitness"]), iteration=int(obj["iteration"]),
            record_id=int(obj["id"]),
            parent_id=None if obj.get("parent") is None else int(obj["parent"]),
            flagged=bool(obj.get("flagged", False)),
        )


def _evaluate(fitness_fn, genotypes, workers: int):
    if workers <= 1 or len(genotypes) <= 1:
        values = [fitness_fn(g) for g in genotypes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(fitness_fn, genotypes))
    out = []
    for v in values:
        v = float(v)
        out.append((v, not math.isfinite(v)))
    return out


DUPLICATE_RETRIES = 5


def evolve(fitness_fn, cfg: EvolutionConfig, space: S.SpaceConfig,
           workers: int = 1, history: list | None = None) -> list:
    """Run aging evolution; returns the full history of SearchRecord.

    Passing a previous ``history`` resumes: the newest population_size
    records re-form the population and iterations continue from there.
    """
    rng = np.random.default_rng(cfg.seed)
    records: list[SearchRecord] = list(history) if history else []
    population: deque[SearchRecord] = deque()
    if records:
        population.extend(records[-cfg.population_size:])
        start_iter = records[-1].iteration + 1
        # keep the resumed rng stream distinct from a fresh run's
        rng = np.random.default_rng(cfg.seed + start_iter)
    else:
        genotypes = [S.random_genotype(space, rng) for _ in range(cfg.population_size)]
        for rid, (g, (value, flagged)) in enumerate(
                zip(genotypes, _evaluate(fitness_fn, genotypes, workers))):
            rec = SearchRecord(g, value, iteration=0, record_id=rid, flagged=flagged)
            records.append(rec)
            population.append(rec)
        start_iter = 1
    next_id = records[-1].record_id + 1 if records else 0
    for it in range(start_iter, start_iter + cfg.iterations):
        idx = rng.choice(len(population), size=cfg.tournament, replace=False)
        parent = min((population[int(i)] for i in idx), key=SearchRecord.sort_key)
        seen = {S.serialize(rec.genotype) for rec in population}
        children = []
        for _ in range(cfg.children_per_iter):
            child = S.mutate(parent.genotype, space, rng)
            for _ in range(DUPLICATE_RETRIES):
                if S.serialize(child) not in seen:
                    break
                child = S.mutate(parent.genotype, space, rng)
            seen.add(S.serialize(child))
            children.append(child)
        for g, (value, flagged) in zip(children, _evaluate(fitness_fn, children, workers)):
            rec = SearchRecord(g, value, iteration=it, record_id=next_id,
                               parent_id=parent.record_id, flagged=flagged)
            next_id += 1
            records.append(rec)
            population.append(rec)
        for _ in range(cfg.children_per_iter):
            population.popleft()   # aging rule: retire the oldest members
    return records


def random_search(fitness_fn, n_samples: int, space: S.SpaceConfig, seed: int = 0,
                  workers: int = 1) -> list:
    rng = np.random.default_rng(seed)
    genotypes = [S.random_genotype(space, rng) for _ in range(n_samples)]
    records = []
    for rid, (g, (value, flagged)) in enumerate(
            zip(genotypes, _evaluate(fitness_fn, genotypes, workers))):
        records.append(SearchRecord(g, value, iteration=0, record_id=rid, flagged=flagged))
    return records


def best_record(history) -> SearchRecord:
    return min(history, key=SearchRecord.sort_key)


LR_GRID = (0.10, 0.15, 0.20)


def select_top_k(history, retrain_fn, k: int = 15, lr_grid=None) -> list:
    """Retrain the k best-by-search-fitness distinct genotypes from scratch.

    ``retrain_fn(genotype, lr)`` must return a dict with at least
    ``val_loss`` (lr is None when no grid is used).  Results come back
    sorted ascending by from-scratch validation loss.
    """
    distinct = {}
    for rec in history:
        key = S.serialize(rec.genotype)
        if key not in distinct or rec.sort_key() < distinct[key].sort_key():
            distinct[key] = rec
    ranked = sorted(distinct.values(), key=SearchRecord.sort_key)[:k]
    results = []
    for rec in ranked:
        best = None
        for lr in (lr_grid or (None,)):
            out = dict(retrain_fn(rec.genotype, lr))
            out["lr"] = lr
            if best is None or out["val_loss"] < best["val_loss"]:
                best = out
        best["genotype"] = rec.genotype
        best["search_fitness"] = rec.fitness
        results.append(best)
    results.sort(key=lambda r: r["val_loss"])
    return results


def save_history(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec.to_json_obj(), sort_keys=True) + "\n")


def load_history(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(SearchRecord.from_json_obj(json.loads(line)))
    return records
