"""
Command-line pipeline.

    metadet <subcommand> [--config run.json] [--<key> value ...]

Subcommands run in dependency order and reuse finished stages: ``evaluate``
on a fresh output directory trains the victim, generates attacks, builds the
pools and trains the detector first. Victims and adversarial sets live under
``<out-dir>/shared`` keyed by the hash of the settings they depend on; all other
outputs live under ``<out-dir>/<config hash>``.
"""

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import torch

from . import __version__
from .attacks.advset import build_adv_dataset, canonical_adversary, load_adv_dataset
from .attacks.budgets import default_budgets
from .datasets import data_root, download, load_split, parse_domain
from .errors import ConfigurationError, IngestionError, MetadetError, ProtocolError
from .evalbench import (
    EvaluationReport,
    evaluate_sweep,
    make_protocol,
    measure_inference,
    white_box_advset,
    white_box_generate,
)
from .meta import DnnConfig, MasterCheckpoint, MetaConfig, train_dnn, train_meta
from .seeding import derive_seed
from .serialization import file_sha256, json_sha256, read_json, write_json
from .tasks import TaskConfig, build_task_pool, load_pool, materialize, save_pool
from .victims import VictimTrainConfig, accuracy, build_victim, load_victim, train_victim, victim_hash

log = logging.getLogger("metadet")

METHODS = ("meta", "dnn", "dnn_balanced")
SUBCOMMANDS = ("prepare-data", "train-victim", "gen-attacks", "build-pool", "train", "evaluate", "sweep", "report")
PATH_KEYS = ("data_root", "out_dir")


@dataclass(frozen=True)
class RunConfig:
    # few-shot and meta-learning defaults
    shots: int = 1
    ways: int = 2
    train_query_size: int = 70
    test_query_size: int = 30
    task_number: int = 30
    inner_update_times: int = 12
    finetune_times: int = 20
    total_tasks: int = 20000
    inner_lr: float = 0.001
    outer_lr: float = 0.0001
    dataset: str = "AdvCIFAR"
    backbone: str = "conv-3"
    benchmark: str = "cross-adversary"
    # everything else
    seed: int = 0
    epochs: int = 4
    way_mode: str = "fixed"
    meta_gradient_mode: str = "second_order"
    finetune_lr: float = 0.001
    test_tasks: int = 1000
    val_tasks: int = 500
    protocol: int = None  # row of the cross-domain / cross-architecture table
    train_adversaries: list = None
    test_adversaries: list = None
    validation_adversary: str = "BIM"  # "none": no validation tasks, the last epoch is kept
    white_box_attack: str = "I-FGSM"
    white_box_images: int = 1000
    victim_arch: str = "conv4"
    victim_epochs: int = 5
    victim_max_train: int = None
    max_train_images: int = None
    max_test_images: int = None
    dnn_epochs: int = 4
    dnn_batch_size: int = 128
    dnn_lr: float = 0.001
    data_root: str = None
    out_dir: str = "runs"

    def __post_init__(self):
        if self.backbone.lower().replace("-", "") != "conv3":
            raise ConfigurationError("only the conv-3 detector backbone is available")
        if self.ways != 2:
            raise ConfigurationError("only two-way tasks are supported")
        parse_domain(self.dataset)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def config_hash(self):
        return json_sha256({k: v for k, v in self.to_dict().items() if k not in PATH_KEYS})

    @property
    def domain(self):
        return parse_domain(self.dataset).value

    def task_config(self, total, salt):
        return TaskConfig(ways=self.ways, shots=self.shots, train_query_size=self.train_query_size,
                          test_query_size=self.test_query_size, way_mode=self.way_mode, total_tasks=total,
                          seed=derive_seed(self.seed, "pool", salt))

    def meta_config(self):
        return MetaConfig(inner_lr=self.inner_lr, outer_lr=self.outer_lr, inner_steps=self.inner_update_times,
                          tasks_per_batch=self.task_number, epochs=self.epochs, way_mode=self.way_mode,
                          shots=self.shots, meta_gradient_mode=self.meta_gradient_mode,
                          finetune_steps=self.finetune_times, finetune_lr=self.finetune_lr)

    def dnn_config(self):
        return DnnConfig(epochs=self.dnn_epochs, batch_size=self.dnn_batch_size, lr=self.dnn_lr,
                         finetune_steps=self.finetune_times, finetune_lr=self.finetune_lr)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.run_dir = self.out / cfg.config_hash[:12]
        self.shared = self.out / "shared"
        self.root = data_root(cfg.data_root)

    # -- protocol ----------------------------------------------------------

    def protocol(self):
        settings = {"domain": self.cfg.domain, "arch": self.cfg.victim_arch, "shots": self.cfg.shots,
                "finetune_steps": self.cfg.finetune_times, "test_tasks": self.cfg.test_tasks,
                "validation_adversary": self.cfg.validation_adversary}
        if str(self.cfg.validation_adversary).lower() == "none":
            settings["validation_adversary"] = None
        kind = self.cfg.benchmark.replace("-", "_")
        if kind == "cross_adversary":
            if self.cfg.train_adversaries is not None:
                settings["train_adversaries"] = self.cfg.train_adversaries
            if self.cfg.test_adversaries is not None:
                settings["test_adversaries"] = self.cfg.test_adversaries
        if kind in ("cross_domain", "cross_architecture") and self.cfg.protocol is not None:
            settings["protocol"] = self.cfg.protocol
        if kind == "white_box":
            settings["attack"] = self.cfg.white_box_attack
        return make_protocol(kind, settings)

    def sources(self):
        """{(domain, arch): {split: [adversaries]}} needed by the protocol."""
        proto = self.protocol()
        plan = {}
        for part in (proto.train, proto.validation, proto.test):
            if not part or part["adversaries"] and part["adversaries"][0].startswith("white_box_"):
                continue
            key = (part["domain"], part["arch"])
            split_plan = plan.setdefault(key, {})
            names = split_plan.setdefault(part["split"], [])
            names.extend(a for a in part["adversaries"] if a not in names)
        return proto, plan

    # -- data and victims ----------------------------------------------------

    def prepare_data(self):
        _, plan = self.sources()
        for domain in sorted({d for d, _ in plan}):
            try:
                load_split(domain, "test", self.root)
                load_split(domain, "train", self.root)
                log.info("dataset %s present under %s", domain, self.root)
            except IngestionError:
                log.info("dataset %s missing, downloading", domain)
                download(domain, self.root)

    def victim_dir(self, domain, arch):
        key = {"domain": domain, "arch": arch, "epochs": self.cfg.victim_epochs,
               "max_train": self.cfg.victim_max_train, "seed": self.cfg.seed}
        return self.shared / "victims" / f"{domain}-{arch}-{json_sha256(key)[:12]}"

    def victim(self, domain, arch):
        path = self.victim_dir(domain, arch)
        if not (path / "params.bin").exists():
            log.info("training victim %s/%s", domain, arch)
            vcfg = VictimTrainConfig(epochs=self.cfg.victim_epochs, seed=derive_seed(self.cfg.seed, "victim", domain, arch),
                                     max_train=self.cfg.victim_max_train)
            clf = build_victim(arch, domain, seed=derive_seed(self.cfg.seed, "victim-init", domain, arch))
            train_victim(clf, load_split(domain, "train", self.root), vcfg, load_split(domain, "test", self.root), path)
            log.info("victim %s/%s test accuracy %.4f", domain, arch, clf.metadata["test_accuracy"])
        return load_victim(path), victim_hash(path)

    def train_victims(self):
        _, plan = self.sources()
        return {key: self.victim(*key) for key in sorted(plan)}

    # -- adversarial sets ----------------------------------------------------

    def advset_dir(self, domain, arch, split_plan):
        _, vhash = self.victim(domain, arch)
        caps = {"train": self.cfg.max_train_images, "test": self.cfg.max_test_images}
        budgets = {k: v.to_dict() for k, v in default_budgets(domain).items()}
        key = {"victim": vhash, "plan": {s: sorted(v) for s, v in sorted(split_plan.items())}, "caps": caps,
               "seed": self.cfg.seed, "budgets": budgets}
        return self.shared / "advsets" / f"{domain}-{arch}-{json_sha256(key)[:12]}"

    def advset(self, domain, arch, split_plan):
        path = self.advset_dir(domain, arch, split_plan)
        if not (path / "manifest.json").exists():
            victim, vhash = self.victim(domain, arch)
            log.info("generating adversarial examples %s/%s: %s", domain, arch, split_plan)
            caps = {"train": self.cfg.max_train_images, "test": self.cfg.max_test_images}
            build_adv_dataset(domain, victim, split_plan, root=self.root, out_dir=path,
                              seed=derive_seed(self.cfg.seed, "attacks", domain, arch),
                              max_per_split=caps, victim_hash=vhash)
        return load_adv_dataset(path)

    def gen_attacks(self):
        _, plan = self.sources()
        return {key: self.advset(*key, plan[key]) for key in sorted(plan)}

    # -- pools ---------------------------------------------------------------

    def _part_advset(self, part):
        _, plan = self.sources()
        key = (part["domain"], part["arch"])
        return self.advset(*key, plan[key]).restrict(part["adversaries"], [part["split"]])

    def pools(self):
        """{"train", "val", "test"} -> (pool, advset); test is absent for white-box runs."""
        proto = self.protocol()
        pdir = self.run_dir / "pools"
        parts = {"train": (proto.train, self.cfg.total_tasks), "val": (proto.validation, self.cfg.val_tasks),
                 "test": (proto.test, self.cfg.test_tasks)}
        out = {}
        for name, (part, total) in parts.items():
            if not part or proto.kind == "white_box" and name == "test":
                continue
            advset = self._part_advset(part)
            path = pdir / f"{name}.pool"
            if path.exists():
                pool = load_pool(path)
                if pool.source_hash != advset.manifest_hash:
                    raise ConfigurationError(f"{path} was built from a different adversarial set")
            else:
                pdir.mkdir(parents=True, exist_ok=True)
                pool = build_task_pool(advset, self.cfg.task_config(total, name), part["split"])
                save_pool(pool, path)
                log.info("%s pool: %d tasks over %s", name, len(pool), pool.adversaries)
            out[name] = (pool, advset)
        self._write_run_config()
        write_json(pdir / "pools.json", {"config_hash": self.cfg.config_hash,
                                          **{k: {"pool_hash": p.pool_hash, "advset_hash": a.manifest_hash,
                                                 "tasks": len(p), "adversaries": p.adversaries}
                                             for k, (p, a) in out.items()}})
        return out

    def _write_run_config(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_json(self.run_dir / "config.json", {"config": self.cfg.to_dict(), "config_hash": self.cfg.config_hash,
                                                   "version": __version__})

    # -- detectors -----------------------------------------------------------

    def checkpoint(self, method):
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
        path = self.run_dir / "checkpoints" / method
        if (path / "params.bin").exists():
            return MasterCheckpoint.load(path)
        pools = self.pools()
        train_pool, train_set = pools["train"]
        val_pool, val_set = pools.get("val", (None, None))
        prov = {"config_hash": self.cfg.config_hash, "protocol": self.protocol().to_dict()}
        t0 = time.perf_counter()
        log.info("training %s detector", method)
        if method == "meta":
            ckpt = train_meta(train_pool, train_set, self.cfg.meta_config(), seed=derive_seed(self.cfg.seed, "meta"),
                              val_pool=val_pool, val_advset=val_set, out_dir=path, provenance=prov)
        else:
            ckpt = train_dnn(train_set, method == "dnn_balanced", self.cfg.dnn_config(),
                             seed=derive_seed(self.cfg.seed, method), val_pool=val_pool, val_advset=val_set,
                             out_dir=path, adversaries=train_pool.adversaries, provenance=prov)
        write_json(path / "timing.json", {"train_seconds": time.perf_counter() - t0})
        return ckpt

    def _white_box_test(self, method, ckpt):
        proto = self.protocol()
        wdir = self.run_dir / "white_box" / method
        if not (wdir / "manifest.json").exists():
            domain, arch = proto.test["domain"], proto.test["arch"]
            victim, _ = self.victim(domain, arch)
            test = load_split(domain, "test", self.root)
            n = min(self.cfg.white_box_images, len(test))
            x, y = test.images[:n], test.labels[:n]
            res = white_box_generate(victim, ckpt.params, x, y, proto.test["attack"])
            wset = white_box_advset(domain, arch, x, y, res, proto.test["attack"])
            from .attacks.advset import save_adv_dataset
            save_adv_dataset(wset, wdir)
        wset = load_adv_dataset(wdir)
        path = wdir / "test.pool"
        if path.exists():
            pool = load_pool(path)
        else:
            pool = build_task_pool(wset, self.cfg.task_config(self.cfg.test_tasks, "test"), "test")
            save_pool(pool, path)
        return pool, wset

    def evaluate(self, method, steps_values=None, tag=None):
        """Reports keyed by fine-tune steps; written under reports/ (or sweeps/ with a tag)."""
        ckpt = self.checkpoint(method)
        if self.protocol().kind == "white_box":
            test_pool, test_set = self._white_box_test(method, ckpt)
        else:
            test_pool, test_set = self.pools()["test"]
        steps_values = steps_values or [self.cfg.finetune_times]
        ckpt_hash = file_sha256(self.run_dir / "checkpoints" / method / "params.bin")
        hashes = {"config": self.cfg.config_hash, "checkpoint": ckpt_hash, "test_advset": test_set.manifest_hash}
        reports = evaluate_sweep(ckpt.params, test_pool, test_set, steps_values, self.cfg.finetune_lr,
                                 method=method, protocol=self.protocol().to_dict(), hashes=hashes)
        probe = materialize(test_pool[0], test_set).query_x
        timing = measure_inference(ckpt.params, probe, repetitions=20)
        out = {}
        for steps, rep in reports.items():
            rep.timing = {**rep.timing, "inference": timing}
            if tag is None:
                path = self.run_dir / "reports" / f"{method}.json"
            else:
                path = self.run_dir / "sweeps" / tag / f"{method}_{steps}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            doc = {**rep.to_dict(), "sweep": {"param": "finetune_times", "value": steps} if tag else None,
                   "config_hash": self.cfg.config_hash}
            write_json(path, doc)
            log.info("%s %s steps=%d mean F1 %.4f over %d tasks -> %s", method, self.protocol().kind, steps,
                     rep.mean_f1, len(rep.per_task_f1), path)
            out[steps] = doc
        return out


# ---------------------------------------------------------------------------
# reports and plots
# ---------------------------------------------------------------------------


def emit_plots(reports, out_dir, param=None):
    """Mean F1 against the swept parameter, one line per method, plus a CSV of the plotted values.

    Returns (png path, csv path).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not reports:
        raise ConfigurationError("no reports to plot")
    rows = []
    for r in reports:
        sweep = r.get("sweep") or {}
        p = param or sweep.get("param") or "shots"
        value = sweep.get("value") if sweep.get("param") == p else r.get("steps" if p == "finetune_times" else p)
        rows.append((r["method"], value, r["mean_f1"]))
    p = param or (reports[0].get("sweep") or {}).get("param") or "shots"
    rows.sort(key=lambda t: (t[0], t[1]))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"f1_vs_{p}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", p, "mean_f1"])
        for method, value, f1 in rows:
            w.writerow([method, value, repr(f1)])
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for method in sorted({r[0] for r in rows}):
        xs = [r[1] for r in rows if r[0] == method]
        ys = [r[2] for r in rows if r[0] == method]
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel(p)
    ax.set_ylabel("mean F1")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"f1_vs_{p}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path, csv_path


def _read_reports(run_dir):
    run_dir = Path(run_dir)
    cfg = read_json(run_dir / "config.json")
    found = []
    for path in sorted(run_dir.glob("reports/*.json")) + sorted(run_dir.glob("sweeps/*/*.json")):
        doc = read_json(path)
        if doc.get("config_hash") != cfg["config_hash"]:
            raise ConfigurationError(f"{path}: config hash {doc.get('config_hash')} != run {cfg['config_hash']}")
        ckpt = run_dir.parent / doc.get("source_run", run_dir.name) / "checkpoints" / doc["method"] / "params.bin"
        if ckpt.exists() and file_sha256(ckpt) != doc["hashes"]["checkpoint"]:
            raise ConfigurationError(f"{path}: produced by a different {doc['method']} checkpoint")
        found.append((path, doc))
    return cfg, found


def summarize(run_dirs, out_dir):
    """Summary JSON and plots over the reports of one or more runs sharing one test set."""
    rows, test_sets = [], set()
    for rd in run_dirs:
        cfg, reports = _read_reports(rd)
        for path, doc in reports:
            test_sets.add(doc["hashes"]["test_advset"])
            rows.append({"run": cfg["config_hash"][:12], "file": str(path.relative_to(rd)), "method": doc["method"],
                         "shots": doc["shots"], "steps": doc["steps"], "way_mode": cfg["config"]["way_mode"],
                         "mean_f1": doc["mean_f1"], "tasks": len(doc["per_task_f1"]), "sweep": doc.get("sweep")})
    if len(test_sets) > 1:
        raise ConfigurationError("reports were evaluated on different test sets; refusing to combine them")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "summary.json", {"reports": rows})
    plain = [r for r in rows if not r["sweep"]]
    for param in sorted({r["sweep"]["param"] for r in rows if r["sweep"]}):
        emit_plots([r for r in rows if r["sweep"] and r["sweep"]["param"] == param], out_dir, param=param)
    if plain:
        emit_plots(plain, out_dir, param="shots")
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _flag_type(f):
    if f.type in (int, "int"):
        return int
    if f.type in (float, "float"):
        return float
    if f.type in (list, "list"):
        return lambda s: [x for x in s.split(",") if x]
    return str


def build_parser():
    parser = argparse.ArgumentParser(prog="metadet", description="Few-shot meta-learned adversarial example detection.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of run settings")
    common.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        common.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_flag_type(f), default=None)
    helps = {
        "prepare-data": "check (or download) the source datasets",
        "train-victim": "train the attacked classifiers",
        "gen-attacks": "generate and filter adversarial examples",
        "build-pool": "build the train / validation / test task pools",
        "train": "train a detector",
        "evaluate": "few-shot evaluation on the test tasks",
        "sweep": "evaluate over a range of one setting",
        "report": "summarize reports and draw plots",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("train", "evaluate", "sweep"):
            p.add_argument("--method", choices=METHODS + ("all",), default="meta")
        if name == "sweep":
            p.add_argument("--param", required=True)
            p.add_argument("--values", required=True, help="comma-separated values")
        if name == "report":
            p.add_argument("--runs", nargs="*", default=[], help="extra run directories to include")
    return parser


def load_config(args) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigurationError("config file must hold a JSON object")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return RunConfig.from_dict({**base, **overrides})


def _methods(args):
    return list(METHODS) if args.method == "all" else [args.method]


def _parse_value(field_, text):
    return _flag_type(field_)(text)


def run(args, cfg):
    pipe = Pipeline(cfg)
    cmd = args.command
    if cmd == "prepare-data":
        pipe.prepare_data()
    elif cmd == "train-victim":
        for (domain, arch), (victim, vhash) in pipe.train_victims().items():
            log.info("victim %s/%s ready (%s)", domain, arch, vhash[:12])
    elif cmd == "gen-attacks":
        for key, advset in pipe.gen_attacks().items():
            log.info("adversarial set %s: %r", key, advset)
    elif cmd == "build-pool":
        pipe.pools()
    elif cmd == "train":
        for m in _methods(args):
            pipe.checkpoint(m)
    elif cmd == "evaluate":
        for m in _methods(args):
            doc = pipe.evaluate(m)[cfg.finetune_times]
            print(json.dumps({"method": m, "mean_f1": doc["mean_f1"], "tasks": len(doc["per_task_f1"])}))
    elif cmd == "sweep":
        by_name = {f.name: f for f in fields(RunConfig)}
        if args.param not in by_name:
            raise ConfigurationError(f"unknown sweep parameter {args.param!r}")
        values = [_parse_value(by_name[args.param], v) for v in args.values.split(",") if v]
        docs = []
        for m in _methods(args):
            if args.param == "finetune_times":
                # one adaptation run per task serves every step count
                docs += list(pipe.evaluate(m, values, tag=args.param).values())
                continue
            for v in values:
                child = Pipeline(replace(cfg, **{args.param: v}))
                doc = child.evaluate(m)[child.cfg.finetune_times]
                doc = {**doc, "sweep": {"param": args.param, "value": v}, "source_run": child.run_dir.name}
                path = pipe.run_dir / "sweeps" / args.param / f"{m}_{v}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                doc["config_hash"] = cfg.config_hash
                write_json(path, doc)
                docs.append(doc)
        pipe._write_run_config()
        png, csv_path = emit_plots(docs, pipe.run_dir / "sweeps" / args.param, param=args.param)
        print(json.dumps({"plot": str(png), "table": str(csv_path),
                          "points": [[d["method"], d["sweep"]["value"], d["mean_f1"]] for d in docs]}))
    elif cmd == "report":
        rows = summarize([pipe.run_dir] + list(args.runs), pipe.run_dir / "summary")
        for r in rows:
            print(f"{r['run']} {r['method']:13s} shots={r['shots']} steps={r['steps']} {r['way_mode']:10s} "
                  f"mean F1 {r['mean_f1']:.4f} ({r['tasks']} tasks) {r['file']}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
    except (ConfigurationError, TypeError) as exc:
        parser.error(str(exc))
    try:
        return run(args, cfg)
    except (ConfigurationError, ProtocolError) as exc:
        log.error("invalid configuration: %s", exc)
        return 2
    except MetadetError as exc:
        prov = getattr(exc, "provenance", None)
        log.error("%s: %s%s", type(exc).__name__, exc, f" provenance={json.dumps(prov, sort_keys=True)}" if prov else "")
        return 1
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        log.exception("failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
