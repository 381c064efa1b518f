"""Command-line driver for the workbench pipeline stages.

Every stage reads a JSON config file (plus flag overrides), requires a seed,
and writes its artifacts into --out. Exit code 0 iff the stage succeeded.
Config keys are documented in the README; --set key=value overrides any of
them (dotted paths reach into nested objects, values parsed as JSON when
possible).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import containers, crafting, defense, recovery, reports, training
from .convert import dequantize_model, quantize_model
from .datasets import load_cifar10_bin, load_mnist_idx, synthetic_dataset
from .engine import QuantModel, infer_batch
from .errors import SeabenchError, ValidationError
from .faults import Polarity


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path.name}: bad JSON at offset {e.pos}: {e.msg}")
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def _require_seed(cfg, args) -> int:
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed")
    if seed is None:
        raise ValidationError("a seed is mandatory (config key 'seed' or --seed)")
    return int(seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_from_cfg(cfg: dict, split: str):
    if not cfg:
        raise ValidationError("missing dataset config")
    kind = cfg.get("kind")
    if kind == "mnist":
        return load_mnist_idx(cfg["dir"], split)
    if kind == "cifar10":
        return load_cifar10_bin(cfg["dir"], split)
    if kind in ("synthetic-mlp", "synthetic-cnn"):
        train, test = synthetic_dataset(kind.split("-")[1],
                                        int(cfg.get("n_train", 20000)),
                                        int(cfg.get("n_test", 4000)),
                                        int(cfg.get("seed", 1234)))
        return train if split == "train" else test
    if kind == "container":
        return containers.load_dataset(cfg["path"])
    raise ValidationError(f"unknown dataset kind {kind!r}")


def _hyperparams(cfg: dict, seed: int, defaults: dict | None = None) -> training.HyperParams:
    merged = dict(defaults or {})
    merged.update({k: cfg[k] for k in (
        "epochs", "batch_size", "lr", "momentum", "weight_decay", "augment",
        "lr_decay_epochs", "lr_decay_factor",
    ) if k in cfg})
    if "lr_decay_epochs" in merged:
        merged["lr_decay_epochs"] = tuple(merged["lr_decay_epochs"])
    if cfg.get("dtype") == "float32":
        merged["dtype"] = np.float32
    return training.HyperParams(seed=seed, **merged)


def _load_quant(path) -> QuantModel:
    model = containers.load_model(path)
    if not isinstance(model, QuantModel):
        raise ValidationError(f"{path}: expected a quantized model container")
    return model


def cmd_train_victim(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = _out_dir(args)
    dataset = _dataset_from_cfg(cfg.get("dataset"), "train")
    hp = _hyperparams(cfg, seed)
    arch = cfg.get("arch", "mlp")
    model, history = training.train_victim(arch, dataset, hp,
                                           progress=_epoch_logger(args))
    containers.save_model(out / "victim_float.qnnm", model)
    reports.write_training_curve(out / "victim_train_curve.csv", history)
    print(f"trained {arch} victim for {hp.epochs} epochs -> {out / 'victim_float.qnnm'}")
    return 0


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    _require_seed(cfg, args)
    out = _out_dir(args)
    fmodel = containers.load_model(cfg["float_model"])
    calib = _dataset_from_cfg(cfg.get("dataset"), "train")
    n = int(cfg.get("calib_samples", 256))
    qmodel = quantize_model(fmodel, calib.images[:n])
    containers.save_model(out / "victim_q8.qnnm", qmodel)
    test = _dataset_from_cfg(cfg.get("dataset"), "test")
    acc = defense.accuracy(qmodel, test)
    print(f"quantized model accuracy on test split: {acc:.2f}% -> {out / 'victim_q8.qnnm'}")
    return 0


def cmd_craft(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = _out_dir(args)
    rng = np.random.default_rng(seed)
    model = _load_quant(cfg["model"])
    strategy = crafting.Strategy(args.strategy or cfg.get("strategy", "random"))
    n = int(args.n or cfg.get("n", 1000))
    ga_cfg = crafting.GAConfig(**cfg.get("ga", {}))
    dataset = None
    if strategy is crafting.Strategy.TESTSET:
        dataset = _dataset_from_cfg(cfg.get("dataset"), cfg.get("split", "test"))
    value_range = tuple(cfg.get("value_range", (-127, 127)))
    attack = crafting.build_attack_set(model, n, strategy, rng, ga_cfg,
                                       value_range, dataset,
                                       progress=_craft_logger(args))
    from .datasets import DatasetHandle
    handle = DatasetHandle(attack.inputs, np.zeros(attack.inputs.shape[0], dtype=np.int64),
                           "attack", attack.provenance, model.num_labels)
    containers.save_dataset(out / "attack_set.qnnd", handle)
    rep = attack.report
    reports.write_prediction_types(out / "prediction_types.csv", [
        (cfg.get("label", "model"), 100.0 * rep.n_certain / rep.n,
         100.0 * rep.n_uncertain / rep.n),
    ])
    if rep.accuracy_all is not None:
        reports.write_accuracy_by_category(out / "accuracy_by_category.csv", [
            (cfg.get("label", "model"), rep.accuracy_all, rep.accuracy_uncertain,
             rep.accuracy_certain),
        ])
    print(f"{attack.provenance} attack set: {rep.n} inputs, "
          f"{100.0 * rep.uncertain_fraction:.2f}% uncertain -> {out / 'attack_set.qnnd'}")
    return 0


def cmd_campaign(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = _out_dir(args)
    model = _load_quant(cfg["model"])
    attack = containers.load_dataset(cfg["attack_set"])
    bits = args.bits if args.bits is not None else cfg.get("bits", list(range(8)))
    if isinstance(bits, str):
        bits = [int(b) for b in bits.split(",")]
    stop = args.stop_msb if args.stop_msb is not None else cfg.get("stop_msb")
    config = recovery.CampaignConfig(
        bit_subset=tuple(int(b) for b in bits),
        polarity=Polarity(cfg.get("polarity", "set")),
        max_inputs=cfg.get("max_inputs"),
        stop_msb_fraction=stop,
    )
    curve = []

    def track(k):
        with_lsbl = recovery.lsbl_propagate(k)
        curve.append((k.inputs_consumed, sum(k.per_input_recovered),
                      100.0 * with_lsbl.msb_known_fraction(),
                      100.0 * with_lsbl.known_count() / (8 * k.total_params)))
        if args.verbose and k.inputs_consumed % 25 == 0:
            print(f"  input {k.inputs_consumed}: msb {curve[-1][2]:.2f}%")

    t0 = time.time()
    knowledge = recovery.run_campaign(model, attack.images, config, progress=track)
    wall = time.time() - t0
    containers.save_knowledge(out / "knowledge.qnnk", knowledge)
    record = containers.CampaignRecord(
        {"seed": seed, "bits": list(config.bit_subset), "polarity": config.polarity.value,
         "stop_msb": config.stop_msb_fraction, "max_inputs": config.max_inputs,
         "attack_set": str(cfg["attack_set"]), "model": str(cfg["model"])},
        knowledge, [(i, m) for i, _, m, _ in curve], wall,
    )
    containers.save_record(out / "campaign_record.json", record)
    reports.write_recovery_curve(out / "recovery_curve.csv", curve)
    msb = 100.0 * recovery.lsbl_propagate(knowledge).msb_known_fraction()
    print(f"campaign: {knowledge.inputs_consumed} inputs, {knowledge.probes_executed} probes, "
          f"msb(with lsbl) {msb:.2f}% in {wall:.1f}s -> {out / 'knowledge.qnnk'}")
    return 0


def cmd_lsbl(args) -> int:
    cfg = _load_config(args)
    _require_seed(cfg, args)
    out = _out_dir(args)
    knowledge = containers.load_knowledge(cfg["knowledge"])
    propagated = recovery.lsbl_propagate(knowledge)
    containers.save_knowledge(out / "knowledge_lsbl.qnnk", propagated)
    line = f"lsbl: msb known {100.0 * propagated.msb_known_fraction():.2f}%"
    if cfg.get("truth_model"):
        truth = _load_quant(cfg["truth_model"])
        containers.validate_knowledge_for_model(propagated, truth)
        report = recovery.recovery_stats(propagated, truth)
        reports.write_layer_recovery(out / "layer_recovery.csv", report)
        err = report.lsbl_error_pct
        line += f", lsbl error {err:.3f}%" if err is not None else ", lsbl error n/a"
    print(line + f" -> {out / 'knowledge_lsbl.qnnk'}")
    return 0


def cmd_train_substitute(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = _out_dir(args)
    victim = _load_quant(cfg["victim"])
    knowledge = containers.load_knowledge(cfg["knowledge"])
    containers.validate_knowledge_for_model(knowledge, victim)
    dataset = _dataset_from_cfg(cfg.get("dataset"), "train")
    hp = _hyperparams(cfg, seed)
    model, history = training.train_substitute(
        cfg.get("arch", "mlp"), knowledge, victim, dataset, hp,
        dataset_fraction=float(cfg.get("fraction", 0.08)),
        lam=float(cfg.get("lambda", 1e-4)),
        progress=_epoch_logger(args),
    )
    containers.save_model(out / "substitute_float.qnnm", model)
    reports.write_training_curve(out / "substitute_train_curve.csv", history)
    print(f"substitute trained on {cfg.get('fraction', 0.08):.0%} of the data "
          f"-> {out / 'substitute_float.qnnm'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    _require_seed(cfg, args)
    out = _out_dir(args)
    victim = _load_quant(cfg["victim"])
    substitute = containers.load_model(cfg["substitute"])
    dataset = _dataset_from_cfg(cfg.get("dataset"), cfg.get("split", "test"))
    eps = float(cfg.get("eps", 0.3))
    steps = int(cfg.get("steps", 40))
    acc = defense.accuracy(substitute, dataset)
    fid = defense.fidelity(victim, substitute, dataset)
    under = defense.aua(victim, substitute, dataset, eps, steps)
    rows = [(cfg.get("label", "substitute"), cfg.get("msb_pct"), acc, fid, under)]
    if cfg.get("include_victim", True):
        wrow = (
            "victim",
            None,
            defense.accuracy(victim, dataset),
            100.0,
            defense.aua(victim, dequantize_model(victim), dataset, eps, steps),
        )
        rows.append(wrow)
    reports.write_substitute_performance(out / "evaluation.csv", rows)
    print(f"accuracy {acc:.2f} fidelity {fid:.2f} aua {under:.2f} -> {out / 'evaluation.csv'}")
    return 0


def cmd_defend(args) -> int:
    cfg = _load_config(args)
    seed = _require_seed(cfg, args)
    out = _out_dir(args)
    rng = np.random.default_rng(seed)
    model = _load_quant(cfg["model"])
    dcfg = defense.DefenseConfig(**cfg.get("defense", {}))
    dcfg.resolve_layer(model)

    rows = []
    if cfg.get("dataset"):
        test = _dataset_from_cfg(cfg["dataset"], "test")
        nominal = defense.accuracy(model, test)
        defended = defense.defended_accuracy(model, test, dcfg, rng)
        print(f"accuracy nominal {nominal:.2f}% defended {defended:.2f}%")

    if cfg.get("attack_set"):
        inputs = containers.load_dataset(cfg["attack_set"]).images
    else:
        inputs = crafting.random_inputs(int(cfg.get("n_inputs", 64)),
                                        model.input_shape, rng)
    for n in cfg.get("repeats", (2, 10, 100, 1000)):
        mean, std = defense.expectation_delta(model, inputs, int(n), dcfg, rng)
        rows.append((int(n), mean, std))
        print(f"expectation N={n}: delta_y {mean:.3f} (std {std:.3f})")
    reports.write_expectation_impact(out / "expectation_impact.csv", rows)

    probe_cfg = cfg.get("probes")
    if probe_cfg:
        probe_rows = []
        specs = _sample_probe_specs(model, int(probe_cfg.get("count", 100)), rng)
        camp = recovery.CampaignConfig(bit_subset=tuple(probe_cfg.get("bits", range(8))))
        for probe_n, tau in probe_cfg.get("modes", ((1, 0.0), (1000, 2.0))):
            _, rep = defense.sea_under_defense(
                model, inputs[: int(probe_cfg.get("n_inputs", 1))], camp, dcfg, rng,
                probe_n=int(probe_n), tau=float(tau), probe_specs=specs)
            probe_rows.append(("defended", probe_n, tau, rep.probes, rep.marks,
                               rep.wrong_marks, rep.false_positive_rate))
            print(f"probes N={probe_n} tau={tau}: {rep.marks} marks, "
                  f"fp rate {rep.false_positive_rate}")
        reports.write_defense_probe_report(out / "defense_probes.csv", probe_rows)
    return 0


def _sample_probe_specs(model, count, rng):
    from .faults import FaultSpec
    weighted = model.weighted_indices
    sizes = [model.layers[i].weight.size for i in weighted]
    total = sum(sizes)
    specs = []
    for _ in range(count):
        flat = int(rng.integers(total))
        for li, size in zip(weighted, sizes):
            if flat < size:
                specs.append(FaultSpec(li, flat, int(rng.integers(8))))
                break
            flat -= size
    return specs


def cmd_report(args) -> int:
    cfg = _load_config(args)
    _require_seed(cfg, args)
    out = _out_dir(args)
    run = Path(cfg.get("run_dir", args.out))
    victim_path = cfg.get("victim", run / "victim_q8.qnnm")
    written = []
    victim = _load_quant(victim_path) if Path(victim_path).exists() else None

    if victim is not None and cfg.get("dataset"):
        test = _dataset_from_cfg(cfg["dataset"], "test")
        scores = infer_batch(victim, test.images)
        unc = crafting.classify_batch(scores)
        pred = np.argmax(scores, axis=1)
        ok = pred == test.labels
        reports.write_accuracy_by_category(out / "accuracy_by_category.csv", [(
            cfg.get("label", "victim"), 100.0 * ok.mean(),
            100.0 * ok[unc].mean() if unc.any() else None,
            100.0 * ok[~unc].mean() if (~unc).any() else None,
        )])
        written.append("accuracy_by_category.csv")
        reports.write_prediction_types(out / "prediction_types.csv", [(
            cfg.get("label", "victim"), 100.0 * (~unc).mean(), 100.0 * unc.mean(),
        )])
        written.append("prediction_types.csv")

    knowledge_path = cfg.get("knowledge", run / "knowledge.qnnk")
    if victim is not None and Path(knowledge_path).exists():
        knowledge = containers.load_knowledge(knowledge_path)
        if knowledge.matches_model(victim):
            report = recovery.recovery_stats(recovery.lsbl_propagate(knowledge), victim)
            reports.write_layer_recovery(out / "layer_recovery.csv", report)
            written.append("layer_recovery.csv")

    record_path = cfg.get("record", run / "campaign_record.json")
    if Path(record_path).exists():
        record = containers.load_record(record_path)
        cum = np.cumsum(record.knowledge.per_input_recovered)
        points = [(i, int(cum[i - 1]) if i else 0, m, float("nan"))
                  for i, m in record.msb_curve]
        reports.write_recovery_curve(out / "recovery_curve.csv",
                                     [(i, b, m, None) for i, b, m, _ in points])
        written.append("recovery_curve.csv")

    print("report wrote: " + (", ".join(written) if written else "nothing (no artifacts found)"))
    return 0


def _epoch_logger(args):
    if not args.verbose:
        return None
    return lambda st: print(f"  epoch {st.epoch}: loss {st.loss:.4f} ({st.seconds:.1f}s)")


def _craft_logger(args):
    if not args.verbose:
        return None
    return lambda n: (print(f"  crafted {n} inputs") if n % 25 == 0 else None)


COMMANDS = {
    "train-victim": cmd_train_victim,
    "quantize": cmd_quantize,
    "craft": cmd_craft,
    "campaign": cmd_campaign,
    "lsbl": cmd_lsbl,
    "train-substitute": cmd_train_substitute,
    "evaluate": cmd_evaluate,
    "defend": cmd_defend,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seabench",
        description="Safe-error-attack model-extraction workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="run", help="output directory")
        p.add_argument("--verbose", action="store_true")
        if name == "craft":
            p.add_argument("--strategy", choices=[s.value for s in crafting.Strategy])
            p.add_argument("--n", type=int)
        if name == "campaign":
            p.add_argument("--bits", help="comma-separated bit indices, e.g. 0 or 0,1,2")
            p.add_argument("--stop-msb", type=float, dest="stop_msb",
                           help="stop once this fraction of MSBs is known")
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SeabenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyError as e:
        print(f"error: missing config key {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
