"""Batch command line front-end.

Commands:
  gen-data      generate a synthetic dataset and save it
  train         train one model per seed under the configured defense stack
  attack        write attacked copies of a split's scenes
  evaluate      score saved models (clean and under each configured attack)
  pipeline-run  train, evaluate, gate, and append to the model ledger
  registry      log / verify / rollback / safe-mode against a ledger file
  threat-model  render the STRIDE threat matrix and its risk ranking
  monitor-sim   replay a confidence stream against a drift baseline
  table         aggregate metric reports into a comparison CSV

Exit codes: 0 success (gate pass), 2 gate fail, 3 ledger invalid,
4 config error, 5 runtime error.

Configs are JSON, validated against the bundled schema; every path inside
a config is resolved relative to the config file.  Outputs land under the
config's out_dir: metrics/*.json, tables/*.csv, models/, ledger.jsonl,
incidents.jsonl.  The HMAC key comes from SECMLOPS_LEDGER_KEY.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema

from . import attacks, defenses, detector, govern, metrics, synthdata, threatmodel
from .canon import canonical_json, digest_json
from .errors import (InvalidConfig, LedgerInvalid, MatrixFormatError,
                     SecMLOpsError)

PRESET_NAMES = ("canonical", "desk")
_SCHEMA = None


def config_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = (resources.files("secmlops.data")
                .joinpath("experiment_config.schema.json").read_text())
        _SCHEMA = json.loads(text)
    return _SCHEMA


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class ExperimentConfig:
    """One experiment: data, training recipe, defense stack, attack suite.

    `semantic` is the fully defaulted config dict minus filesystem paths;
    its digest identifies the experiment in reports and ledger records.
    """

    dataset: synthdata.DatasetConfig
    dataset_seed: int
    train: detector.TrainConfig
    stack: defenses.DefenseStack
    stack_name: str
    attacks: list
    preset: str
    seeds: list[int]
    out_dir: Path
    model_id: str = "model"
    data_dir: Path | None = None
    poison: attacks.PoisonSpec | None = None
    gate: govern.GatePolicy = field(default_factory=govern.GatePolicy)
    approvals: list[str] = field(default_factory=lambda: list(govern.REQUIRED_APPROVALS))
    score_threshold: float = 0.05
    split: str = "test"
    monitor: dict = field(default_factory=dict)
    semantic: dict = field(default_factory=dict)

    def digest(self) -> str:
        return digest_json(self.semantic)


def load_config(path: str | Path, out_override: str | None = None
                ) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise InvalidConfig(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, config_schema())
    except jsonschema.ValidationError as exc:
        raise InvalidConfig(f"config rejected by schema: {exc.message}") from exc

    base = path.resolve().parent
    ds_dict = dict(raw.get("dataset", {}))
    dataset_seed = int(ds_dict.pop("seed", 0))
    ds_cfg = synthdata.DatasetConfig(**ds_dict)
    ds_cfg.validate()
    train_cfg = detector.TrainConfig(**raw.get("train", {}))
    train_cfg.validate()

    stack_raw = raw.get("stack", "none")
    if isinstance(stack_raw, str):
        stack = defenses.named_stack(stack_raw)
        stack_name = stack_raw
    else:
        stack = defenses.DefenseStack.from_dict(stack_raw)
        stack_name = "custom"
    stack.validate()

    attack_specs = [attacks.spec_from_dict(d) for d in raw.get("attacks", [])]
    for spec in attack_specs:
        spec.validate()
        if isinstance(spec, attacks.PoisonSpec):
            raise InvalidConfig("the attack suite is evaluation-time only; "
                                "configure poisoning via the 'poison' field")
    poison = None
    if "poison" in raw:
        poison = attacks.PoisonSpec(gamma=float(raw["poison"]["gamma"]),
                                    seed=int(raw["poison"].get("seed", 0)))
        poison.validate()

    preset = raw.get("preset", "desk")
    seeds = [int(s) for s in raw.get("seeds", [0])]
    gate = govern.GatePolicy.from_dict(raw.get("gate", {}))
    gate.validate()
    out_dir = Path(out_override) if out_override else base / raw["out_dir"]
    data_dir = (base / raw["data_dir"]) if "data_dir" in raw else None

    cfg = ExperimentConfig(
        dataset=ds_cfg, dataset_seed=dataset_seed, train=train_cfg,
        stack=stack, stack_name=stack_name, attacks=attack_specs,
        preset=preset, seeds=seeds, out_dir=out_dir,
        model_id=raw.get("model_id", "model"), data_dir=data_dir,
        poison=poison, gate=gate,
        approvals=list(raw.get("approvals", govern.REQUIRED_APPROVALS)),
        score_threshold=float(raw.get("score_threshold", 0.05)),
        split=raw.get("split", "test"), monitor=dict(raw.get("monitor", {})))
    cfg.semantic = {
        "model_id": cfg.model_id,
        "dataset": {**ds_cfg.to_dict(), "seed": dataset_seed},
        "poison": (attacks.spec_dict(poison) if poison else None),
        "train": train_cfg.to_dict(),
        "stack": {"name": stack_name, **stack.to_dict()},
        "attacks": [attacks.spec_dict(s) for s in attack_specs],
        "preset": preset,
        "seeds": seeds,
        "split": cfg.split,
        "score_threshold": cfg.score_threshold,
        "gate": gate.to_dict(),
        "approvals": cfg.approvals,
        "monitor": cfg.monitor,
    }
    return cfg


# ---------------------------------------------------------------------------
# shared plumbing


def _training_dataset(cfg: ExperimentConfig) -> tuple[synthdata.Dataset, list]:
    """The dataset as the pipeline ingests it: generated or loaded, then
    label-poisoned when the config says so.  Returns (dataset, flips)."""
    if cfg.data_dir is not None:
        ds = synthdata.load_dataset(cfg.data_dir)
    else:
        ds = synthdata.generate(cfg.dataset, cfg.dataset_seed)
    if cfg.poison is not None:
        return attacks.poison_labels(ds, cfg.poison)
    return ds, []


def _eval_dataset(cfg: ExperimentConfig,
                  trained_on: synthdata.Dataset) -> synthdata.Dataset:
    """Evaluation always scores against clean labels."""
    if cfg.poison is None:
        return trained_on
    if cfg.data_dir is not None:
        return synthdata.load_dataset(cfg.data_dir)
    return synthdata.generate(cfg.dataset, cfg.dataset_seed)


def _model_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.out_dir / "models" / f"{cfg.model_id}-seed{seed}"


def _attack_names(specs: list) -> list[str]:
    kinds = [s.kind for s in specs]
    return [k if kinds.count(k) == 1 else f"{k}-{i}"
            for i, k in enumerate(kinds)]


def _write_metrics(path: Path, run: dict, report: metrics.MetricReport) -> None:
    doc = {"created_at": _now_iso(), "run": run, "report": report.to_dict()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _train_one(cfg: ExperimentConfig, dataset: synthdata.Dataset, seed: int,
               flips: list) -> detector.DetectorModel:
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    model, history, provenance = defenses.apply_stack(dataset, cfg.stack,
                                                      train_cfg)
    mdir = _model_dir(cfg, seed)
    mdir.mkdir(parents=True, exist_ok=True)
    detector.save_model(model, mdir)
    (mdir / "history.json").write_text(history.to_json() + "\n")
    provenance = {**provenance, "stack_name": cfg.stack_name,
                  "config_digest": cfg.digest()}
    (mdir / "provenance.json").write_text(
        json.dumps(provenance, sort_keys=True, indent=2) + "\n")
    if flips:
        (mdir / "flips.json").write_text(json.dumps(
            [f.to_dict() for f in flips], sort_keys=True, indent=2) + "\n")
    return model


def _evaluate_suite(cfg: ExperimentConfig, model, dataset: synthdata.Dataset,
                    seed: int) -> tuple[metrics.MetricReport,
                                        list[tuple[object, metrics.MetricReport]]]:
    digest = cfg.digest()
    clean = metrics.evaluate(model, dataset, split=cfg.split, preset=cfg.preset,
                             score_threshold=cfg.score_threshold,
                             config_digest=digest)
    attacked = []
    for spec in cfg.attacks:
        rep = metrics.evaluate(model, dataset, split=cfg.split,
                               preset=cfg.preset, attack=spec, attack_seed=seed,
                               score_threshold=cfg.score_threshold,
                               config_digest=digest)
        attacked.append((spec, rep))
    return clean, attacked


def _write_suite(cfg: ExperimentConfig, seed: int, clean: metrics.MetricReport,
                 attacked: list[tuple[object, metrics.MetricReport]]) -> dict:
    """Write metrics/*.json for one seed; returns {name: report digest}."""
    mdir = cfg.out_dir / "metrics"
    names = ["clean"] + _attack_names([s for s, _ in attacked])
    reports = [clean] + [r for _, r in attacked]
    digests = {}
    for name, report in zip(names, reports):
        run = {"model_id": cfg.model_id, "stack": cfg.stack_name,
               "seed": seed, "attack": name}
        _write_metrics(mdir / f"{cfg.model_id}-seed{seed}-{name}.json",
                       run, report)
        digests[name] = report.digest()
    return digests


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.out)
    ds = synthdata.generate(cfg.dataset, cfg.dataset_seed)
    target = cfg.out_dir / "data"
    target.mkdir(parents=True, exist_ok=True)
    synthdata.save_dataset(ds, target)
    print(f"wrote {len(ds.scenes)} scenes to {target}")
    print(f"dataset digest {ds.digest()}")
    return 0


def _seed_list(cfg: ExperimentConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else cfg.seeds


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.out)
    dataset, flips = _training_dataset(cfg)
    for seed in _seed_list(cfg, args):
        _train_one(cfg, dataset, seed, flips)
        print(f"trained {cfg.model_id}-seed{seed} "
              f"(stack={cfg.stack_name}) -> {_model_dir(cfg, seed)}")
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config, args.out)
    if not cfg.attacks:
        raise InvalidConfig("no attacks configured")
    dataset, _ = _training_dataset(cfg)
    eval_ds = _eval_dataset(cfg, dataset)
    for seed in _seed_list(cfg, args):
        model = detector.load_model(_model_dir(cfg, seed))
        for name, spec in zip(_attack_names(cfg.attacks), cfg.attacks):
            adv_dir = cfg.out_dir / "adv" / f"seed{seed}" / name
            adv_dir.mkdir(parents=True, exist_ok=True)
            entries = []
            for sid in sorted(eval_ds.scene_ids(cfg.split)):
                scene = eval_ds.scenes[sid]
                adv = attacks.attack_scene(model, scene, eval_ds.gts[sid],
                                           spec, seed=seed)
                p = adv_dir / f"scene-{sid:04d}.bin"
                synthdata.write_scene_file(p, adv.pixels, synthdata.MAGIC_ADV)
                entries.append({"scene_id": sid,
                                "sha256": synthdata.pixel_sha256(adv.pixels)})
            (adv_dir / "index.json").write_text(canonical_json(
                {"attack": attacks.spec_dict(spec), "split": cfg.split,
                 "seed": seed, "scenes": entries}) + "\n")
            print(f"wrote {len(entries)} attacked scenes to {adv_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.out)
    dataset, _ = _training_dataset(cfg)
    eval_ds = _eval_dataset(cfg, dataset)
    for seed in _seed_list(cfg, args):
        model = detector.load_model(_model_dir(cfg, seed))
        clean, attacked = _evaluate_suite(cfg, model, eval_ds, seed)
        _write_suite(cfg, seed, clean, attacked)
        lamr = clean.lamr.get("Reasonable")
        shown = "n/a" if lamr is None else f"{lamr:.4f}"
        print(f"seed {seed}: clean Reasonable laMR {shown}")
    return 0


def cmd_pipeline_run(args) -> int:
    cfg = load_config(args.config, args.out)
    key = govern.load_ledger_key()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ledger = govern.Ledger(cfg.out_dir / "ledger.jsonl")
    incidents = govern.IncidentLog(cfg.out_dir / "incidents.jsonl")
    dataset, flips = _training_dataset(cfg)
    eval_ds = _eval_dataset(cfg, dataset)
    any_fail = False
    for seed in cfg.seeds:
        model = _train_one(cfg, dataset, seed, flips)
        clean, attacked = _evaluate_suite(cfg, model, eval_ds, seed)
        verdict = govern.evaluate_gate(clean, attacked, cfg.gate)
        digests = _write_suite(cfg, seed, clean, attacked)
        prov_path = _model_dir(cfg, seed) / "provenance.json"
        payload = {
            "model_id": f"{cfg.model_id}-seed{seed}",
            "dataset_digest": dataset.digest(),
            "config_digest": cfg.digest(),
            "provenance": json.loads(prov_path.read_text()),
            "metrics_digest": digest_json(digests),
            "gate": verdict.to_dict(),
            "approvals": cfg.approvals if verdict.passed else [],
        }
        record = ledger.append(payload, key)
        status = "pass" if verdict.passed else "FAIL"
        print(f"seed {seed}: gate {status} "
              f"(ratios {canonical_json(verdict.ratios)}) "
              f"ledger record {record['record_index']}")
        if not verdict.passed:
            any_fail = True
            incidents.append(govern.make_incident(
                "gate-fail", record_index=record["record_index"],
                detail="; ".join(verdict.reasons)))
            try:
                target = ledger.rollback_target()
                print(f"recommend rollback to {target['model_id']} "
                      f"(record {target['record_index']})")
            except SecMLOpsError:
                print("no approved passing record available for rollback")
    _write_table(cfg.out_dir / "metrics", cfg.out_dir / "tables")
    return 2 if any_fail else 0


def cmd_registry(args) -> int:
    ledger = govern.Ledger(args.ledger)
    key = govern.load_ledger_key()
    if args.registry_cmd == "log":
        payload = json.loads(Path(args.payload).read_text())
        record = ledger.append(payload, key)
        print(f"appended record {record['record_index']}")
        return 0
    result = ledger.verify(key)
    if args.registry_cmd == "verify":
        if result.valid:
            print(f"valid ({len(ledger.records())} records)")
            return 0
        print(f"broken at record {result.broken_at}: {result.reason}")
        return 3
    if not result.valid:
        print(f"broken at record {result.broken_at}: {result.reason}",
              file=sys.stderr)
        return 3
    target = (ledger.rollback_target() if args.registry_cmd == "rollback"
              else ledger.safe_mode_target())
    print(canonical_json({"model_id": target["model_id"],
                          "record_index": target["record_index"]}))
    return 0


def cmd_threat_model(args) -> int:
    matrix = (threatmodel.load_csv_file(args.csv) if args.csv
              else threatmodel.load_bundled())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix.csv").write_text(threatmodel.render_csv(matrix))
        (out / "matrix.md").write_text(threatmodel.render_markdown(matrix))
        lines = ["rank,element,threat,likelihood,impact,score"]
        for rank, (cell, score) in enumerate(threatmodel.prioritize(matrix), 1):
            lines.append(f"{rank},{cell.element_id},{cell.threat},"
                         f"{cell.likelihood},{cell.impact},{score}")
        (out / "priorities.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote threat matrix report to {out}")
        return 0
    if args.format == "csv":
        print(threatmodel.render_csv(matrix), end="")
    elif args.format == "json":
        ranked = threatmodel.prioritize(matrix)
        print(canonical_json([{"element": c.element_id, "threat": c.threat,
                               "likelihood": c.likelihood, "impact": c.impact,
                               "score": s} for c, s in ranked]))
    else:
        print(threatmodel.render_markdown(matrix), end="")
    return 0


def cmd_monitor_sim(args) -> int:
    cfg = load_config(args.config, args.out)
    mon = cfg.monitor
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    model = detector.load_model(_model_dir(cfg, seed))
    dataset, _ = _training_dataset(cfg)
    eval_ds = _eval_dataset(cfg, dataset)

    def confidences(split: str) -> list[float]:
        rep = metrics.evaluate(model, eval_ds, split=split, preset=cfg.preset,
                               score_threshold=cfg.score_threshold,
                               config_digest=cfg.digest())
        return rep.confidences

    base_conf = confidences(mon.get("baseline_split", "val"))
    window = confidences(mon.get("window_split", "test"))
    shift = float(mon.get("shift", 0.0))
    if shift:
        window = [min(1.0, max(0.0, c + shift)) for c in window]
    baseline = govern.DriftBaseline.from_confidences(
        base_conf, threshold=float(mon.get("threshold", 0.15)),
        min_window=int(mon.get("min_window", 200)))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    incidents = govern.IncidentLog(cfg.out_dir / "incidents.jsonl")
    result = govern.drift_check(baseline, window, incident_log=incidents)
    print(canonical_json({"alert": result.alert,
                          "ks_statistic": result.ks_statistic,
                          "threshold": result.threshold,
                          "n_window": result.n_window}))
    return 0


_TABLE_ORDER = ("clean", "poison", "fgsm", "pgd", "deepfool")


def _write_table(metrics_dir: Path, out_dir: Path,
                 subset: str = "Reasonable") -> Path:
    docs = []
    for p in sorted(metrics_dir.glob("*.json")):
        doc = json.loads(p.read_text())
        if "run" in doc and "report" in doc:
            docs.append(doc)
    names = {d["run"]["attack"] for d in docs}
    columns = [n for n in _TABLE_ORDER if n in names]
    columns += sorted(names - set(columns))
    rows: dict[tuple, dict] = {}
    for doc in docs:
        run = doc["run"]
        key = (run["model_id"], run["stack"], run["seed"])
        value = doc["report"]["lamr"].get(subset)
        rows.setdefault(key, {})[run["attack"]] = value
    lines = ["model_id,stack,seed," + ",".join(columns)]
    for key in sorted(rows):
        cells = [("" if rows[key].get(c) is None else f"{rows[key][c]:.6f}")
                 for c in columns]
        lines.append(",".join([key[0], key[1], str(key[2])] + cells))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "comparison.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def cmd_table(args) -> int:
    path = _write_table(Path(args.metrics), Path(args.out))
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and exit-code mapping


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; 2 means gate fail here
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="secmlops", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, config=True, seed=False, out=True):
        p = sub.add_parser(name)
        if config:
            p.add_argument("--config", required=True)
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", default=None)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("train", cmd_train, seed=True)
    add("attack", cmd_attack, seed=True)
    add("evaluate", cmd_evaluate, seed=True)
    add("pipeline-run", cmd_pipeline_run)
    add("monitor-sim", cmd_monitor_sim, seed=True)

    reg = sub.add_parser("registry")
    reg_sub = reg.add_subparsers(dest="registry_cmd", required=True)
    for name in ("log", "verify", "rollback", "safe-mode"):
        p = reg_sub.add_parser(name)
        p.add_argument("--ledger", required=True)
        if name == "log":
            p.add_argument("--payload", required=True)
        p.set_defaults(fn=cmd_registry)

    tm = sub.add_parser("threat-model")
    tm_sub = tm.add_subparsers(dest="tm_cmd", required=True)
    rep = tm_sub.add_parser("report")
    rep.add_argument("--csv", default=None)
    rep.add_argument("--out", default=None)
    rep.add_argument("--format", choices=("csv", "markdown", "json"),
                     default="markdown")
    rep.set_defaults(fn=cmd_threat_model)

    tab = sub.add_parser("table")
    tab.add_argument("--metrics", required=True)
    tab.add_argument("--out", required=True)
    tab.set_defaults(fn=cmd_table)
    return parser


def entry(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 4
    except (InvalidConfig, MatrixFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except LedgerInvalid as exc:
        print(f"ledger invalid: {exc}", file=sys.stderr)
        return 3
    except SecMLOpsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except Exception as exc:  # noqa: BLE001 - last-resort CLI boundary
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 5


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
