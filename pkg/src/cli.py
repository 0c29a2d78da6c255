#!/usr/bin/env python3
"""
Experiment runner.

    python -m src.cli train-victim --preset desk-blobs
    python -m src.cli serve --preset desk-blobs --port 5055 --round 2
    python -m src.cli steal --preset desk-blobs --set attack.N=20
    python -m src.cli evaluate | pgd | detect | metrics --preset desk-blobs

Every command writes resolved_config.json into the output directory.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.adversarial import PGD_PRESETS, PgdConfig, transfer_eval
from src.api_client import OracleAPIClient, RemoteOracle
from src.config import Config
from src.data import (
    LabeledDataset,
    ShiftSpec,
    SoftDataset,
    export_csv,
    gen_blobs,
    gen_digits_like,
    load_dataset,
    make_auxiliary,
    save_dataset,
    train_test_split,
)
from src.detect import PradaDetector, replay_attack_stream
from src.errors import CheckpointError, ConfigError, DatasetFormatError, ESLabError
from src.experiment_config import ExperimentConfig
from src.metrics import accuracy, agreement, metrics_report
from src.models import Network, build_zoo_network, load_checkpoint, predict_proba, save_checkpoint
from src.oracle import DefenseConfig, OracleSession
from src.steal import StealConfig, baseline_steal, run_es_attack
from src.synthesis import SynthesisConfig
from src.training import TrainingConfig, fit_classifier
from src.utils.reports import write_json

logger = logging.getLogger(__name__)

COMMANDS = ("train-victim", "serve", "steal", "evaluate", "pgd", "detect", "metrics")


def setup_logging(output_dir: Path, level: str = Config.LOG_LEVEL) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(output_dir / "eslab.log"),
        ],
        force=True,
    )


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out = config.output_dir

    # -- artifacts -----------------------------------------------------------

    def _path(self, explicit: Optional[str], default_name: str) -> Path:
        return Path(explicit) if explicit else self.out / default_name

    @property
    def victim_path(self) -> Path:
        return self._path(self.config.victim.checkpoint, "victim.ckpt")

    @property
    def substitute_path(self) -> Path:
        return self._path(self.config.evaluation.substitute_checkpoint, "substitute.ckpt")

    def datasets(self) -> Tuple[LabeledDataset, LabeledDataset]:
        ds = self.config.dataset
        train_path = self._path(ds.train_path, "train.esd")
        test_path = self._path(ds.test_path, "test.esd")
        if ds.train_path or ds.test_path or (train_path.exists() and test_path.exists()):
            train, test = load_dataset(train_path), load_dataset(test_path)
            if not isinstance(train, LabeledDataset) or not isinstance(test, LabeledDataset):
                raise DatasetFormatError("train and test files must hold labeled datasets")
            return train, test

        total = ds.n_train + ds.n_test
        if ds.kind == "blobs":
            full = gen_blobs(ds.classes, ds.dim, total, ds.spread, ds.seed)
        elif ds.kind == "digits":
            full = gen_digits_like(total, ds.seed, ds.noise)
        else:
            raise ConfigError(f"unknown dataset kind {ds.kind!r}")
        return train_test_split(full, ds.n_test / total, ds.seed)

    def load_victim(self) -> Network:
        if not self.victim_path.exists():
            raise CheckpointError(f"victim checkpoint not found: {self.victim_path} (run train-victim first)")
        return load_checkpoint(self.victim_path)

    def load_substitute(self) -> Network:
        if not self.substitute_path.exists():
            raise CheckpointError(f"substitute checkpoint not found: {self.substitute_path} (run steal first)")
        return load_checkpoint(self.substitute_path)

    def defense(self, rounding: Optional[int] = None, topk: Optional[int] = None, use_config: bool = True) -> DefenseConfig:
        oc = self.config.oracle
        return DefenseConfig(
            rounding_decimals=oc.rounding if use_config else rounding,
            topk=oc.topk if use_config else topk,
            detection_enabled=oc.detection,
            detection_threshold=oc.detection_threshold,
        )

    def session(self, victim: Network, defense: Optional[DefenseConfig] = None) -> OracleSession:
        oc = self.config.oracle
        return OracleSession(
            victim,
            defense or self.defense(),
            budget=oc.budget,
            price_per_1k=oc.price_per_1k,
            record_queries=oc.record_queries,
        )

    def oracle(self, victim: Optional[Network]):
        if self.config.oracle.endpoint:
            logger.info("Using remote oracle at %s", self.config.oracle.endpoint)
            return RemoteOracle(OracleAPIClient(self.config.oracle.endpoint))
        return self.session(victim if victim is not None else self.load_victim())

    # -- commands ------------------------------------------------------------

    def train_victim(self) -> Dict:
        vc = self.config.victim
        train, test = self.datasets()
        save_dataset(train, self.out / "train.esd")
        save_dataset(test, self.out / "test.esd")
        if self.config.dataset.export_csv:
            export_csv(train, self.out / "train.csv")
            export_csv(test, self.out / "test.csv")

        victim = build_zoo_network(vc.arch, train.input_shape, train.class_count, vc.seed)
        training = TrainingConfig(
            epochs=vc.epochs,
            lr=vc.lr,
            optimizer=vc.optimizer,
            momentum=vc.momentum,
            milestones=tuple(vc.milestones),
            batch_size=vc.batch_size,
            seed=vc.seed,
        )
        history = fit_classifier(victim, train, training, test)
        save_checkpoint(victim, self.victim_path)
        report = {
            "arch": vc.arch,
            "parameters": victim.parameter_count(),
            "train_accuracy": accuracy(victim, train),
            "test_accuracy": accuracy(victim, test),
            "best_epoch": history.best_epoch,
            "checkpoint": str(self.victim_path),
        }
        write_json(self.out / "victim_report.json", report)
        logger.info("✅ Victim %s test accuracy %.4f", vc.arch, report["test_accuracy"])
        return report

    def serve(self) -> None:
        from api.oracle_api import serve

        oc = self.config.oracle
        serve(self.session(self.load_victim()), oc.host, oc.port)

    def _steal_once(self, oracle, train: LabeledDataset, test: LabeledDataset):
        ac = self.config.attack
        # a remote oracle does not report its defense; trust the configured top-K
        topk = oracle.defense.topk if isinstance(oracle, OracleSession) else self.config.oracle.topk
        if ac.mode in ("random", "auxiliary"):
            aux = make_auxiliary(train, ShiftSpec(self.config.dataset.aux_shift), ac.seed) if ac.mode == "auxiliary" else None
            return baseline_steal(
                oracle,
                ac.substitute,
                ac.mode,
                epochs=ac.N * ac.M,
                lr=ac.kd_lr,
                auxiliary=aux,
                n_queries=ac.S,
                seed=ac.seed,
                batch_size=ac.batch_size,
                use_augment=ac.augment,
                record_every=ac.M,
                test_set=test,
            )
        synthesis = SynthesisConfig(
            samples_per_epoch=ac.S,
            opt_iterations=ac.m,
            synth_lr=ac.synth_lr,
            lambda_ms=ac.lambda_ms,
            mode=ac.mode,
            generator_steps=ac.generator_steps,
            generator_lr=ac.generator_lr,
            generator_batch=ac.generator_batch,
            latent_dim=ac.latent_dim,
            generator_hidden=ac.generator_hidden,
            reinit_generator=ac.reinit_generator,
        )
        steal = StealConfig(
            N=ac.N,
            M=ac.M,
            synthesis=synthesis,
            kd_lr=ac.kd_lr,
            seed=ac.seed,
            batch_size=ac.batch_size,
            augment=ac.augment,
            replay_all=ac.replay_all,
            fillup_topk=topk if ac.fillup else None,
        )
        initial = load_checkpoint(ac.resume) if ac.resume else None
        return run_es_attack(oracle, ac.substitute, steal, test_set=test, initial_substitute=initial)

    def steal(self) -> Dict:
        oc = self.config.oracle
        train, test = self.datasets()
        if oc.sweep_round or oc.sweep_topk:
            return self._defense_sweep(train, test)

        oracle = self.oracle(None)
        f_s, trace = self._steal_once(oracle, train, test)
        save_checkpoint(f_s, self.out / "substitute.ckpt")
        if trace.best_network is not None:
            save_checkpoint(trace.best_network, self.out / "substitute_best.ckpt")
        trace.save(self.out)

        for tag, inputs in (("initial", trace.initial_inputs), ("final", trace.final_inputs)):
            if inputs is not None:
                save_dataset(SoftDataset(inputs, predict_proba(f_s, inputs), name=f"synthetic-{tag}"),
                             self.out / f"synthetic_{tag}.esd")
        if isinstance(oracle, OracleSession):
            stream = oracle.recorded_stream()
            if stream is not None:
                save_dataset(stream, self.out / "queries.esd")
            stats = oracle.stats()
        else:
            stats = oracle.client.stats()
        summary = {**trace.summary(), "oracle": stats}
        write_json(self.out / "steal_report.json", summary)
        if trace.error:
            raise ESLabError(f"attack stopped early: {trace.error} (partial outputs written)")
        return summary

    def _defense_sweep(self, train: LabeledDataset, test: LabeledDataset) -> Dict:
        oc = self.config.oracle
        victim = self.load_victim()
        settings: List[Tuple[Optional[int], Optional[int]]] = [(None, None)]
        settings += [(r, None) for r in oc.sweep_round]
        settings += [(None, k) for k in oc.sweep_topk]
        rows = []
        for rounding, topk in settings:
            session = self.session(victim, self.defense(rounding, topk, use_config=False))
            f_s, trace = self._steal_once(session, train, test)
            rows.append({
                "defense": session.defense.describe(),
                "rounding": rounding,
                "topk": topk,
                "best_accuracy": trace.best_accuracy,
                "final_accuracy": trace.final_accuracy,
                "queries": session.query_count,
            })
            logger.info("Sweep %s: best=%s last=%s", rows[-1]["defense"], trace.best_accuracy, trace.final_accuracy)
        pd.DataFrame(rows).to_csv(self.out / "defense_sweep.csv", index=False)
        report = {"victim_accuracy": accuracy(victim, test), "settings": rows}
        write_json(self.out / "defense_sweep.json", report)
        return report

    def _synthetic_sets(self) -> Dict[str, np.ndarray]:
        sets = {}
        for tag in ("initial", "final"):
            path = self.out / f"synthetic_{tag}.esd"
            if path.exists():
                sets[tag] = load_dataset(path).inputs
        return sets

    def evaluate(self) -> Dict:
        train, test = self.datasets()
        victim = self.load_victim()
        substitute = self.load_substitute()
        tagged = {"test": test.inputs, **self._synthetic_sets()}
        report = {
            "victim_accuracy": accuracy(victim, test),
            "substitute_accuracy": accuracy(substitute, test),
            "agreement": agreement(victim, substitute, test.inputs),
            "datasets": metrics_report(victim, tagged, train.inputs, substitute, test),
        }
        write_json(self.out / "metrics.json", report)
        return report

    def metrics(self) -> Dict:
        train, _ = self.datasets()
        victim = self.load_victim()
        paths = self.config.evaluation.inputs
        tagged = {Path(p).stem: load_dataset(p).inputs for p in paths} if paths else self._synthetic_sets()
        if not tagged:
            raise ConfigError("no input sets to score: pass evaluation.inputs or run steal first")
        report = metrics_report(victim, tagged, train.inputs)
        write_json(self.out / "quality.json", report)
        return report

    def pgd(self) -> Dict:
        ev = self.config.evaluation
        _, test = self.datasets()
        victim = None if self.config.oracle.endpoint else self.load_victim()
        substitute = self.load_substitute()
        if ev.pgd_preset:
            if ev.pgd_preset not in PGD_PRESETS:
                raise ConfigError(f"unknown PGD preset {ev.pgd_preset!r}")
            base = PGD_PRESETS[ev.pgd_preset]
            cfg = PgdConfig(base.epsilon, base.step_size, base.iterations, random_start=ev.random_start)
        else:
            cfg = PgdConfig(ev.epsilon, ev.step_size, ev.iterations, random_start=ev.random_start)
        n = min(ev.pgd_samples, len(test))
        subset = LabeledDataset(test.inputs[:n], test.labels[:n], test.class_count, name=f"{test.name}-pgd")
        report = transfer_eval(substitute, self.oracle(victim), subset, cfg, victim=victim)
        write_json(self.out / "pgd_report.json", report)
        return report

    def detect(self) -> Dict:
        ev = self.config.evaluation
        path = self._path(ev.stream, "queries.esd")
        stream = None
        if path.exists():
            stream = load_dataset(path)
            if not isinstance(stream, LabeledDataset):
                raise DatasetFormatError(f"{path}: not a recorded query stream")
        else:
            logger.warning("No query stream at %s; the report will be indeterminate", path)
        report = replay_attack_stream(PradaDetector(ev.detection_threshold), stream, ev.report_every).to_dict()
        write_json(self.out / "detection_report.json", report)
        return report

    def run(self, command: str):
        self.config.write_resolved()
        handlers = {
            "train-victim": self.train_victim,
            "serve": self.serve,
            "steal": self.steal,
            "evaluate": self.evaluate,
            "pgd": self.pgd,
            "detect": self.detect,
            "metrics": self.metrics,
        }
        return handlers[command]()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Desk-scale model extraction lab.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="experiment config JSON file")
    parser.add_argument("--preset", help="name of a file under presets/")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    parser.add_argument("--output", help="output directory")
    parser.add_argument("--checkpoint", help="victim checkpoint path")
    parser.add_argument("--endpoint", help="remote oracle base URL")
    parser.add_argument("--host")
    parser.add_argument("--port", type=int)
    parser.add_argument("--round", dest="rounding", type=int, help="rounding defense decimals")
    parser.add_argument("--topk", type=int, help="top-K defense")
    parser.add_argument("--budget", type=int, help="oracle query budget")
    parser.add_argument("--price-per-1k", type=float)
    parser.add_argument("--mode", choices=("opt_syn", "dnn_syn", "random", "auxiliary"))
    parser.add_argument("--substitute", help="substitute architecture")
    parser.add_argument("--seed", type=int, help="attack seed")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    if args.config:
        config = ExperimentConfig.load(args.config)
    elif args.preset:
        config = ExperimentConfig.preset(args.preset)
    else:
        config = ExperimentConfig()
    config.override(args.overrides)
    config.set("output", "dir", args.output)
    config.set("victim", "checkpoint", args.checkpoint)
    config.set("oracle", "endpoint", args.endpoint)
    config.set("oracle", "host", args.host)
    config.set("oracle", "port", args.port)
    config.set("oracle", "rounding", args.rounding)
    config.set("oracle", "topk", args.topk)
    config.set("oracle", "budget", args.budget)
    config.set("oracle", "price_per_1k", args.price_per_1k)
    config.set("attack", "mode", args.mode)
    config.set("attack", "substitute", args.substitute)
    config.set("attack", "seed", args.seed)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
    except ESLabError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error("❌ %s", e)
        return 1
    setup_logging(config.output_dir)

    try:
        ExperimentRunner(config).run(args.command)
    except ESLabError as e:
        logger.error("❌ %s failed: %s", args.command, e)
        return 1
    except Exception:
        logger.exception("%s failed", args.command)
        return 1
    logger.info("🎉 %s completed", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
