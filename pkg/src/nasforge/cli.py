"""Command-line front door.

One JSON config carries every knob (sections: space, train, evolution,
ranking, pruning, hw); defaults mirror the published experimental setup.
Flags override config values.  Every command writes its artifacts plus the
exact effective config into ``--out`` for provenance, and all randomized
commands are reproducible under ``--seed``.

Exit codes: 0 success, 1 validation/config error, 2 runtime error,
64 usage error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evolution as E
from . import pim as PM
from . import pruning as PR
from . import ranking as RK
from . import space as S
from . import storage
from . import profiling
from . import supernet as SN
from .data import (Dataset, load_criteo_tsv, load_dataset, save_dataset, split,
                   synth_generate)
from .metrics import auc, log_loss
from .seeding import splitmix64
from .training import TrainConfig, predict, train

DEFAULT_CONFIG = {
    "space": {
        "preset": "full",            # full | small
        "num_blocks": 7,
        "dense_dims": [16, 32, 64, 128, 256, 512, 768, 1024],
        "sparse_dims": [16, 32, 48, 64],
        "weight_bits_choices": [4, 8],
        "dim_s": 16,
        "allow_mergers": True,
        "attn_heads": 2,
        "dp_balanced": True,
    },
    "train": {
        "batch_size": 1024,
        "lr0": 0.12,
        "epochs": 1,
        "embedding_cap": 500_000,
        "seed": 0,
        "max_steps": None,
        "log_every": 50,
        "strategy": "single_op_any_conn",
        "warmup_fraction": 0.2,
        "split": [0.8, 0.1, 0.1],
    },
    "evolution": {
        "population_size": 128,
        "iterations": 240,
        "tournament": 64,
        "children_per_iter": 8,
        "val_rows": 50_000,
        "finetune_candidates": False,
        "finetune_steps": 500,
        "top_k": 15,
        "lr_grid": False,
        "retrain_max_steps": None,
        "retrain_epochs": 1,
    },
    "ranking": {
        "n_subnets": 100,
        "finetune": False,
        "finetune_steps": 500,
        "top_fraction": 0.5,
        "scratch_max_steps": 2000,
        "scratch_batch_size": 1024,
    },
    "pruning": {
        "iterations": 5,
        "rate": 0.2,
        "per_matrix": True,
        "variant": "mask",           # mask | magnitude
        "budget_max_steps": None,
        "budget_epochs": 1,
    },
    "hw": {
        "rows": 128, "cols": 128, "cell_bits": 2, "dac_bits": 1, "adc_bits": 8,
        "cycle_ns": 100.0, "xbar_pass_pj": 20.0, "xbar_area_um2": 625.0,
        "ns_per_mac": 0.5, "pj_per_mac": 0.1, "digital_area_um2": 50_000.0,
        "buffer_pj_per_elem": 0.01,
        "act_bits": 8, "alpha": 1.0, "beta": 0.2,
    },
}


class ConfigError(ValueError):
    pass


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(64)


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    _merge_checked(cfg, user, "")
    return cfg


def _merge_checked(base: dict, user: dict, where: str):
    for key, value in user.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {where + key!r} must be an object")
            _merge_checked(base[key], value, where + key + ".")
        else:
            base[key] = value


def space_from_config(cfg: dict) -> S.SpaceConfig:
    sec = cfg["space"]
    maker = S.full_space if sec["preset"] == "full" else S.small_space
    return maker(num_blocks=sec["num_blocks"],
                 dense_dims=tuple(sec["dense_dims"]),
                 sparse_dims=tuple(sec["sparse_dims"]),
                 weight_bits_choices=tuple(sec["weight_bits_choices"]),
                 dim_s=sec["dim_s"],
                 allow_mergers=sec["allow_mergers"])


def train_config(cfg: dict, seed: int) -> TrainConfig:
    sec = cfg["train"]
    return TrainConfig(batch_size=sec["batch_size"], lr0=sec["lr0"], epochs=sec["epochs"],
                       seed=seed, log_every=sec["log_every"],
                       embedding_cap=sec["embedding_cap"], max_steps=sec["max_steps"])


def hw_from_config(cfg: dict) -> PM.HwConfig:
    sec = {k: v for k, v in cfg["hw"].items() if k not in ("act_bits", "alpha", "beta")}
    return PM.HwConfig(**sec)


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def ensure_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(out: Path, cfg: dict, command: str, overrides: dict):
    payload = {"command": command, "config": cfg, "overrides": overrides}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class JsonLog:
    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "a", encoding="utf-8")

    def event(self, kind, **fields):
        self.fh.write(json.dumps({"event": kind, **fields}, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(x) for x in row])


def resolve_dataset(path: str) -> Dataset:
    candidate = Path(path)
    if not candidate.exists():
        cache = os.environ.get("NASFORGE_CACHE")
        if cache and (Path(cache) / path).exists():
            candidate = Path(cache) / path
    if not candidate.exists():
        raise ConfigError(f"dataset not found: {path}")
    return load_dataset(candidate)


def three_way_split(data: Dataset, cfg: dict, seed: int):
    return split(data, tuple(cfg["train"]["split"]), seed=splitmix64(seed, 901) % (2 ** 31))


def load_genotype_arg(path: str) -> S.Genotype:
    try:
        return S.deserialize(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read genotype {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args, cfg):
    out = ensure_out(args)
    data = synth_generate(args.dense, args.sparse, args.vocab, args.rows, seed=args.seed)
    path = out / "dataset.bin"
    save_dataset(data, path)
    (out / "dataset.sha256").write_text(storage.file_sha256(path) + "\n")
    log = JsonLog(out / "log.jsonl")
    log.event("synth-data", rows=args.rows, dense=args.dense, sparse=args.sparse,
              vocab=args.vocab, seed=args.seed, checksum=data.checksum())
    log.close()
    return 0


def cmd_ingest(args, cfg):
    out = ensure_out(args)
    data = load_criteo_tsv(args.tsv, num_dense=args.dense, num_sparse=args.sparse,
                           cap=args.cap if args.cap else cfg["train"]["embedding_cap"])
    path = out / "dataset.bin"
    save_dataset(data, path)
    (out / "dataset.sha256").write_text(storage.file_sha256(path) + "\n")
    JsonLog(out / "log.jsonl").event("ingest", rows=len(data), source=str(args.tsv))
    return 0


def cmd_train_supernet(args, cfg):
    out = ensure_out(args)
    data = resolve_dataset(args.data)
    train_ds, val_ds, _ = three_way_split(data, cfg, args.seed)
    space = space_from_config(cfg)
    net = SN.Supernet(space, data.feature_spec, seed=splitmix64(args.seed, 1) % (2 ** 31),
                      dp_balanced=cfg["space"]["dp_balanced"],
                      attn_heads=cfg["space"]["attn_heads"])
    strategy = SN.SamplingStrategy(cfg["train"]["strategy"], total_steps=1,
                                   warmup_fraction=cfg["train"]["warmup_fraction"])
    tc = train_config(cfg, splitmix64(args.seed, 2) % (2 ** 31))
    log = JsonLog(out / "log.jsonl")
    log.event("train-supernet", rows=len(train_ds), space=cfg["space"]["preset"])
    history = train(net, train_ds, tc, val=val_ds, strategy=strategy)
    SN.save_supernet(net, out / "supernet.bin")
    write_csv(out / "metrics.csv", ("step", "lr", "train_loss", "val_loss", "val_auc"),
              [(r["step"], r["lr"], r["train_loss"], r["val_loss"], r["val_auc"])
               for r in history.rows])
    log.event("done", val_loss=history.final("val_loss"))
    log.close()
    return 0


def _evolution_fitness(net, cfg, train_ds, val_slice, seed):
    finetune = cfg["evolution"]["finetune_candidates"]
    steps = cfg["evolution"]["finetune_steps"]
    batch = cfg["train"]["batch_size"]
    counter = {"i": 0}

    def fitness(g):
        idx = counter["i"]
        counter["i"] += 1
        if finetune:
            sub = SN.extract_subnet(net, g)
            SN.finetune_head(sub, train_ds, steps=steps,
                             seed=splitmix64(seed, idx) % (2 ** 31))
            return log_loss(predict(sub, val_slice, batch), val_slice.labels)
        from .training import supernet_val_loss
        return supernet_val_loss(net, g, val_slice, batch)

    return fitness


def cmd_evolve(args, cfg):
    out = ensure_out(args)
    net = SN.load_supernet(args.supernet)
    data = resolve_dataset(args.data)
    train_ds, val_ds, _ = three_way_split(data, cfg, args.seed)
    val_slice = val_ds.head(cfg["evolution"]["val_rows"])
    evo = E.EvolutionConfig(population_size=cfg["evolution"]["population_size"],
                            iterations=cfg["evolution"]["iterations"],
                            tournament=cfg["evolution"]["tournament"],
                            children_per_iter=cfg["evolution"]["children_per_iter"],
                            seed=splitmix64(args.seed, 3) % (2 ** 31))
    fitness = _evolution_fitness(net, cfg, train_ds, val_slice, args.seed)
    previous = E.load_history(args.resume) if args.resume else None
    log = JsonLog(out / "log.jsonl")
    log.event("evolve", population=evo.population_size, iterations=evo.iterations,
              resumed=bool(previous))
    history = E.evolve(fitness, evo, net.cfg, workers=args.workers, history=previous)
    E.save_history(history, out / "history.jsonl")
    best = E.best_record(history)
    (out / "best.json").write_text(S.serialize(best.genotype))
    write_csv(out / "fitness.csv", ("record_id", "iteration", "fitness"),
              [(r.record_id, r.iteration, r.fitness) for r in history])
    log.event("done", best_fitness=best.fitness)
    log.close()
    return 0


def cmd_select_top(args, cfg):
    out = ensure_out(args)
    net = SN.load_supernet(args.supernet)
    data = resolve_dataset(args.data)
    train_ds, val_ds, test_ds = three_way_split(data, cfg, args.seed)
    history = E.load_history(args.history)
    scratch_source = SN.Supernet(net.cfg, net.feature_spec,
                                 seed=splitmix64(args.seed, 4) % (2 ** 31),
                                 dp_balanced=net.dp_balanced, attn_heads=net.attn_heads)
    sec = cfg["evolution"]
    counter = {"i": 0}

    def retrain(genotype, lr):
        idx = counter["i"]
        counter["i"] += 1
        model = SN.extract_subnet(scratch_source, genotype)
        tc = TrainConfig(batch_size=cfg["train"]["batch_size"],
                         lr0=lr if lr is not None else cfg["train"]["lr0"],
                         epochs=sec["retrain_epochs"],
                         seed=splitmix64(args.seed, 100 + idx) % (2 ** 31),
                         max_steps=sec["retrain_max_steps"],
                         log_every=cfg["train"]["log_every"])
        train(model, train_ds, tc)
        val_probs = predict(model, val_ds, tc.batch_size)
        test_probs = predict(model, test_ds, tc.batch_size)
        return {"model": model,
                "val_loss": log_loss(val_probs, val_ds.labels),
                "val_auc": auc(val_probs, val_ds.labels),
                "test_loss": log_loss(test_probs, test_ds.labels),
                "test_auc": auc(test_probs, test_ds.labels)}

    grid = E.LR_GRID if (args.lr_grid or sec["lr_grid"]) else None
    results = E.select_top_k(history, retrain, k=args.k or sec["top_k"], lr_grid=grid)
    write_csv(out / "top_models.csv",
              ("rank", "search_fitness", "lr", "val_loss", "val_auc",
               "test_loss", "test_auc", "mflops"),
              [(i + 1, r["search_fitness"], r["lr"], r["val_loss"], r["val_auc"],
                r["test_loss"], r["test_auc"],
                profiling.mflops(SN.prune_unreachable(r["genotype"]), net.cfg,
                                 net.feature_spec, dp_balanced=net.dp_balanced,
                                 attn_heads=net.attn_heads))
               for i, r in enumerate(results)])
    best = results[0]
    (out / "best.json").write_text(S.serialize(SN.prune_unreachable(best["genotype"])))
    (out / "report.json").write_text(json.dumps(
        {"test_log_loss": best["test_loss"], "test_auc": best["test_auc"],
         "val_log_loss": best["val_loss"], "lr": best["lr"]},
        indent=2, sort_keys=True) + "\n")
    JsonLog(out / "log.jsonl").event("select-top", k=len(results),
                                     best_test_loss=best["test_loss"])
    return 0


def cmd_rank_eval(args, cfg):
    out = ensure_out(args)
    net = SN.load_supernet(args.supernet)
    data = resolve_dataset(args.data)
    train_ds, val_ds, _ = three_way_split(data, cfg, args.seed)
    sec = cfg["ranking"]
    scratch = TrainConfig(batch_size=sec["scratch_batch_size"],
                          max_steps=sec["scratch_max_steps"],
                          seed=args.seed, log_every=10 ** 9)
    report, cdf_rows = RK.rank_experiment(
        net, args.n or sec["n_subnets"], train_ds, val_ds,
        finetune=args.finetune or sec["finetune"],
        top_fraction=sec["top_fraction"], scratch=scratch, seed=args.seed,
        finetune_steps=sec["finetune_steps"])
    (out / "rank_report.json").write_text(
        json.dumps(report.to_json_obj(), indent=2, sort_keys=True) + "\n")
    write_csv(out / "cdf.csv", ("rank", "log_loss", "cum_fraction"), cdf_rows)
    JsonLog(out / "log.jsonl").event("rank-eval", n=report.n, tau=report.tau,
                                     rho=report.rho)
    return 0


def cmd_prune(args, cfg):
    out = ensure_out(args)
    genotype = load_genotype_arg(args.genotype)
    data = resolve_dataset(args.data)
    train_ds, val_ds, _ = three_way_split(data, cfg, args.seed)
    if args.supernet:
        net = SN.load_supernet(args.supernet)
    else:
        space = space_from_config(cfg)
        net = SN.Supernet(space, data.feature_spec,
                          seed=splitmix64(args.seed, 5) % (2 ** 31),
                          dp_balanced=cfg["space"]["dp_balanced"],
                          attn_heads=cfg["space"]["attn_heads"])
    model = SN.extract_subnet(net, SN.prune_unreachable(genotype))
    sec = cfg["pruning"]
    budget = TrainConfig(batch_size=cfg["train"]["batch_size"], lr0=cfg["train"]["lr0"],
                         epochs=sec["budget_epochs"],
                         seed=splitmix64(args.seed, 6) % (2 ** 31),
                         max_steps=sec["budget_max_steps"],
                         log_every=cfg["train"]["log_every"])
    variant = args.variant or sec["variant"]
    runner = PR.iterate_prune if variant == "mask" else PR.magnitude_prune
    per_matrix = not args.global_rank if args.global_rank is not None else sec["per_matrix"]
    _, state, rows = runner(model, (train_ds, val_ds), args.iters or sec["iterations"],
                            budget, seed=splitmix64(args.seed, 7) % (2 ** 31),
                            per_matrix=per_matrix, rate=sec["rate"])
    csv_rows = PR.report_csv_rows(args.dataset_name, variant, rows)
    write_csv(out / "pruning.csv", csv_rows[0], csv_rows[1:])
    JsonLog(out / "log.jsonl").event("prune", variant=variant,
                                     surviving=state.surviving_fraction())
    return 0


def cmd_cosim(args, cfg):
    out = ensure_out(args)
    hw = hw_from_config(cfg)
    (out / "hw.json").write_text(hw.to_json() + "\n")
    if args.genotype:
        genotype = load_genotype_arg(args.genotype)
        space = space_from_config(cfg)
        fs_dense, fs_sparse = args.dense, args.sparse
        from .data import FeatureSpec
        fs = FeatureSpec(fs_dense, tuple([2] * fs_sparse))
        report = PM.cost(SN.prune_unreachable(genotype), space, fs, hw,
                         act_bits=cfg["hw"]["act_bits"],
                         dp_balanced=cfg["space"]["dp_balanced"],
                         attn_heads=cfg["space"]["attn_heads"])
        (out / "cost.json").write_text(
            json.dumps(report.to_json_obj(), indent=2, sort_keys=True) + "\n")
        return 0
    net = SN.load_supernet(args.supernet)
    data = resolve_dataset(args.data)
    _, val_ds, _ = three_way_split(data, cfg, args.seed)
    evo = E.EvolutionConfig(population_size=cfg["evolution"]["population_size"],
                            iterations=cfg["evolution"]["iterations"],
                            tournament=cfg["evolution"]["tournament"],
                            children_per_iter=cfg["evolution"]["children_per_iter"],
                            seed=splitmix64(args.seed, 8) % (2 ** 31))
    history, annotations, pareto = PM.cosearch(
        net, net.cfg, val_ds.head(cfg["evolution"]["val_rows"]), evo, hw,
        alpha=cfg["hw"]["alpha"], beta=args.beta if args.beta is not None else cfg["hw"]["beta"],
        act_bits=cfg["hw"]["act_bits"], batch_size=cfg["train"]["batch_size"],
        workers=args.workers)
    E.save_history(history, out / "history.jsonl")
    write_csv(out / "pareto.csv", ("loss", "latency_ns", "energy_pj", "genotype_id"),
              [(annotations[history[i].record_id]["loss"],
                annotations[history[i].record_id]["latency_ns"],
                annotations[history[i].record_id]["energy_pj"],
                history[i].record_id) for i in pareto])
    JsonLog(out / "log.jsonl").event("cosim", pareto_size=len(pareto))
    return 0


def cmd_flops(args, cfg):
    out = ensure_out(args)
    genotype = SN.prune_unreachable(load_genotype_arg(args.genotype))
    space = space_from_config(cfg)
    from .data import FeatureSpec
    fs = FeatureSpec(args.dense, tuple([2] * args.sparse))
    value = profiling.mflops(genotype, space, fs,
                             dp_balanced=cfg["space"]["dp_balanced"],
                             attn_heads=cfg["space"]["attn_heads"])
    params = profiling.op_params(genotype, space, fs,
                                 dp_balanced=cfg["space"]["dp_balanced"],
                                 attn_heads=cfg["space"]["attn_heads"])
    (out / "flops.json").write_text(json.dumps(
        {"mflops": value, "op_params": params}, indent=2, sort_keys=True) + "\n")
    print(f"{value:.6f} MFLOPs/sample, {params} operator weights")
    return 0


def cmd_export_dot(args, cfg):
    out = ensure_out(args)
    genotype = load_genotype_arg(args.genotype)
    if args.prune:
        genotype = SN.prune_unreachable(genotype)
    (out / "genotype.dot").write_text(S.to_dot(genotype))
    return 0


PIPELINE_STAGES = ("dataset", "supernet", "evolve", "select")


def cmd_pipeline(args, cfg):
    out = ensure_out(args)
    log = JsonLog(out / "log.jsonl")

    class A:  # tiny namespace for reusing the command bodies
        pass

    dataset_path = out / "dataset.bin"
    if dataset_path.exists():
        log.event("skip", stage="dataset")
    else:
        a = A(); a.out = str(out); a.rows = args.rows; a.dense = args.dense
        a.sparse = args.sparse; a.vocab = args.vocab
        a.seed = splitmix64(args.seed, 11) % (2 ** 31)
        cmd_synth_data(a, cfg)
        log.event("stage", stage="dataset")

    supernet_path = out / "supernet.bin"
    if supernet_path.exists():
        log.event("skip", stage="supernet")
    else:
        a = A(); a.out = str(out); a.data = str(dataset_path); a.seed = args.seed
        cmd_train_supernet(a, cfg)
        log.event("stage", stage="supernet")

    history_path = out / "history.jsonl"
    if history_path.exists():
        log.event("skip", stage="evolve")
    else:
        a = A(); a.out = str(out); a.data = str(dataset_path); a.seed = args.seed
        a.supernet = str(supernet_path); a.resume = None; a.workers = args.workers
        cmd_evolve(a, cfg)
        log.event("stage", stage="evolve")

    report_path = out / "report.json"
    if report_path.exists():
        log.event("skip", stage="select")
    else:
        a = A(); a.out = str(out); a.data = str(dataset_path); a.seed = args.seed
        a.supernet = str(supernet_path); a.history = str(history_path)
        a.k = None; a.lr_grid = False
        cmd_select_top(a, cfg)
        log.event("stage", stage="select")
    log.close()
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> UsageParser:
    parser = UsageParser(prog="nasforge",
                         description="architecture search for CTR recommender models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset cache")
    common(p)
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--dense", type=int, default=13)
    p.add_argument("--sparse", type=int, default=26)
    p.add_argument("--vocab", type=int, default=1000)

    p = sub.add_parser("ingest", help="ingest a tab-separated click-log file")
    common(p)
    p.add_argument("--tsv", required=True)
    p.add_argument("--dense", type=int, default=13)
    p.add_argument("--sparse", type=int, default=26)
    p.add_argument("--cap", type=int, default=None)

    p = sub.add_parser("train-supernet", help="train the shared-weight supernet")
    common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("evolve", help="regularized evolution over the supernet")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--supernet", required=True)
    p.add_argument("--space", choices=("full", "small"), default=None)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--tournament", type=int, default=None)
    p.add_argument("--children", type=int, default=None)
    p.add_argument("--resume", default=None, help="existing history.jsonl to continue")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("select-top", help="retrain the best searched genotypes")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--supernet", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--lr-grid", action="store_true", dest="lr_grid")

    p = sub.add_parser("rank-eval", help="supernet ranking fidelity experiment")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--supernet", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--finetune", action="store_true")

    p = sub.add_parser("prune", help="iterative structured pruning of a genotype")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--genotype", required=True)
    p.add_argument("--supernet", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--variant", choices=("mask", "magnitude"), default=None)
    p.add_argument("--global", action="store_true", dest="global_rank", default=None,
                   help="rank prune candidates across all matrices")
    p.add_argument("--dataset-name", default="synthetic")

    p = sub.add_parser("cosim", help="hardware cost report or model-hardware co-search")
    common(p)
    p.add_argument("--genotype", default=None, help="single-genotype cost report")
    p.add_argument("--supernet", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--dense", type=int, default=13)
    p.add_argument("--sparse", type=int, default=26)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("flops", help="closed-form FLOPs of a genotype")
    common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--dense", type=int, default=13)
    p.add_argument("--sparse", type=int, default=26)

    p = sub.add_parser("export-dot", help="DOT visualization of a genotype")
    common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--prune", action="store_true", help="mark unused blocks dashed")

    p = sub.add_parser("pipeline", help="synthesize, train, evolve, select")
    common(p)
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--dense", type=int, default=13)
    p.add_argument("--sparse", type=int, default=26)
    p.add_argument("--vocab", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    return parser


COMMANDS = {
    "synth-data": cmd_synth_data,
    "ingest": cmd_ingest,
    "train-supernet": cmd_train_supernet,
    "evolve": cmd_evolve,
    "select-top": cmd_select_top,
    "rank-eval": cmd_rank_eval,
    "prune": cmd_prune,
    "cosim": cmd_cosim,
    "flops": cmd_flops,
    "export-dot": cmd_export_dot,
    "pipeline": cmd_pipeline,
}


def apply_flag_overrides(args, cfg) -> dict:
    applied = {}
    mapping = {"population": ("evolution", "population_size"),
               "tournament": ("evolution", "tournament"),
               "children": ("evolution", "children_per_iter"),
               "space": ("space", "preset")}
    if getattr(args, "command", None) == "evolve" and getattr(args, "iters", None) is not None:
        cfg["evolution"]["iterations"] = args.iters
        applied["evolution.iterations"] = args.iters
    for flag, (section, key) in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
            applied[f"{section}.{key}"] = value
    return applied


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 64
    try:
        cfg = load_config(args.config)
        overrides = apply_flag_overrides(args, cfg)
        out = ensure_out(args)
        echo_config(out, cfg, args.command, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, S.ParseError, SN.GenotypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
