# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""survival-benchmarks command line

    survival-benchmarks synth --n 2000 --seed 7 --out data/
    survival-benchmarks train --cohort data/cohort.tsv --out model/
    survival-benchmarks eval --checkpoint model/checkpoint.pt --cohort data/cohort.tsv --out report/
    survival-benchmarks baseline-fit --design data/design.csv --out cox/

Every configuration key is also a flag of the same name; values are resolved as
dataclass default < package YAML < --config FILE < flag.
"""

import argparse
import dataclasses
import logging
import os
import sys

import torch
import yaml

from survival_benchmarks.base.base_risk_model import cohort_data_from_design, cohort_data_from_records
from survival_benchmarks.base.config import ConfigMixin, load_yaml, split_config
from survival_benchmarks.base.errors import ConfigError, DataError, NumericalError
from survival_benchmarks.base.prediction import read_predictions, write_predictions
from survival_benchmarks.cox import baseline_cph
from survival_benchmarks.cox.cox_risk_model import CoxRiskModel
from survival_benchmarks.data import synth
from survival_benchmarks.data.ehr_data import (build_vocabulary, read_cohort, read_vocabulary, write_cohort,
                                               write_vocabulary)
from survival_benchmarks.evaluation.metrics import evaluate, oracle_c_index
from survival_benchmarks.evaluation.reports import write_report
from survival_benchmarks.explain import integrated_gradients as ig
from survival_benchmarks.transformer import model_core, trainer
from survival_benchmarks.transformer.checkpoint import load_checkpoint, save_checkpoint
from survival_benchmarks.transformer.losses import LossConfig
from survival_benchmarks.transformer.transformer_risk_model import TransformerRiskModel

logger = logging.getLogger("survival_benchmarks")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting with argparse's status 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclasses.dataclass
class DataOptions(ConfigMixin):
    min_prevalence: float = 0.0


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #

FLAG_ALIASES = {"n_patients": ["--n"]}

# set by the common flags or by the vocabulary
RESERVED_KEYS = ("seed", "vocab_size")

COMMAND_CONFIGS = {
    "synth": [(synth.SynthConfig, [synth.DEFAULT_CFG])],
    "train": [(model_core.ModelConfig, [model_core.DEFAULT_CFG]),
              (trainer.TrainConfig, [trainer.DEFAULT_CFG]),
              (LossConfig, [trainer.DEFAULT_CFG]),
              (DataOptions, [])],
    "finetune": [(trainer.TrainConfig, [trainer.DEFAULT_CFG]),
                 (LossConfig, [trainer.DEFAULT_CFG])],
    "eval": [],
    "explain": [(ig.AttributionConfig, [ig.DEFAULT_CFG])],
    "baseline-fit": [],
    "baseline-eval": [],
}


def _add_config_flags(parser, config_classes):
    seen = set()
    group = parser.add_argument_group("configuration keys")
    for cls, _ in config_classes:
        defaults = cls()
        for field in dataclasses.fields(cls):
            if field.name in seen or field.name in RESERVED_KEYS:
                continue
            seen.add(field.name)
            flags = ["--" + field.name] + FLAG_ALIASES.get(field.name, [])
            group.add_argument(*flags, dest=field.name, default=None, metavar="VALUE",
                               help="(default: {})".format(getattr(defaults, field.name)))


def _routed(cfg, config_classes):
    """Keep the keys the command's classes declare, routed per class"""
    known = {k: v for k, v in cfg.items()
             if any(k in cls.field_names() for cls, _ in config_classes)}
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise ConfigError("Unknown configuration key(s): {}".format(", ".join(unknown)))
    return split_config(known, *[cls for cls, _ in config_classes])


def resolve_configs(command, args):
    """Typed configs of `command`, from defaults, package YAML, --config FILE and flags"""
    config_classes = COMMAND_CONFIGS[command]
    if not config_classes:
        return []

    layers = []
    for cls, files in config_classes:
        package = {}
        for f in files:
            package.update({k: v for k, v in load_yaml(f).items() if k in cls.field_names()})
        layers.append(package)

    user_file = _routed(load_yaml(args.config), config_classes) if args.config else [{} for _ in config_classes]

    configs = []
    for (cls, _), package, user in zip(config_classes, layers, user_file):
        cfg = dict(package)
        cfg.update(user)
        for name in cls.field_names():
            value = getattr(args, name, None)
            if value is not None:
                cfg[name] = value
        if "seed" in cls.field_names() and args.seed is not None:
            cfg["seed"] = args.seed
        configs.append(cls.from_dict(cfg))
    return configs


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #

def _common(parser):
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--config", default=None, help="YAML file of configuration keys")
    parser.add_argument("--seed", type=int, default=None, help="seed of every random stream")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")


def _evaluation_flags(parser):
    parser.add_argument("--horizon", type=float, default=36.0, help="prediction horizon in months (default: 36)")
    parser.add_argument("--impact_threshold", type=float, default=0.5, help="decision threshold (default: 0.5)")
    parser.add_argument("--n_bootstrap", type=int, default=1000, help="C-index bootstrap replicates (default: 1000)")


def build_parser():
    parser = ArgumentParser(prog="survival-benchmarks", description=__doc__.split("\n")[0])
    commands = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    commands.required = True

    p = commands.add_parser("synth", help="generate a synthetic cohort with known hazards")
    _common(p)

    p = commands.add_parser("train", help="train the survival transformer")
    _common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--resume", default=None, help="checkpoint of an earlier run to continue from its best epoch")

    p = commands.add_parser("finetune", help="fine-tune a checkpoint on a new cohort")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--vocab", default=None, help="vocabulary the checkpoint is remapped onto")
    p.add_argument("--allow-vocab-mismatch", "--allow_vocab_mismatch", dest="allow_vocab_mismatch",
                   action="store_true")

    p = commands.add_parser("eval", help="metrics of predictions (file or checkpoint + cohort)")
    _common(p)
    p.add_argument("--preds", default=None, help="patient_id, risk, event_time, event_indicator TSV")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--cohort", default=None)
    p.add_argument("--oracle", default=None, help="oracle sidecar for the C-index ceiling")
    _evaluation_flags(p)

    p = commands.add_parser("explain", help="integrated-gradients attributions")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)

    p = commands.add_parser("baseline-fit", help="fit the Cox baseline")
    _common(p)
    p.add_argument("--design", required=True)
    p.add_argument("--spec", default=None, help="covariate spec YAML (default: inferred from the design)")

    p = commands.add_parser("baseline-eval", help="metrics of the Cox baseline")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--design", required=True)
    _evaluation_flags(p)

    for name, sub in commands.choices.items():
        _add_config_flags(sub, COMMAND_CONFIGS[name])
    return parser


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #

def cmd_synth(args, configs):
    config, = configs
    cohort, oracles = synth.generate(config)
    write_cohort(cohort, os.path.join(args.out, "cohort.tsv"))
    synth.write_oracle(oracles, os.path.join(args.out, "oracle.tsv"))
    baseline_cph.write_design(synth.baseline_design(cohort, config), os.path.join(args.out, "design.csv"))


def cmd_train(args, configs):
    model_config, train_config, loss_config, data_options = configs
    cohort = read_cohort(args.cohort)
    history_path = os.path.join(args.out, "training_log.tsv")
    if args.resume:
        previous = load_checkpoint(args.resume)
        vocab = previous.vocab
        checkpoint = trainer.resume_training(previous, cohort, train_config, loss_config, history_path=history_path)
    else:
        vocab = build_vocabulary(cohort, data_options.min_prevalence)
        checkpoint = trainer.train_from_scratch(cohort, vocab, model_config, train_config, loss_config,
                                               history_path=history_path)
    save_checkpoint(checkpoint, os.path.join(args.out, "checkpoint.pt"))
    write_vocabulary(vocab, os.path.join(args.out, "vocab.tsv"))


def cmd_finetune(args, configs):
    train_config, loss_config = configs
    vocab = read_vocabulary(args.vocab) if args.vocab else None
    pretrained = load_checkpoint(args.checkpoint, vocab=vocab, allow_vocab_mismatch=args.allow_vocab_mismatch)
    cohort = read_cohort(args.cohort)
    checkpoint = trainer.fine_tune(pretrained, cohort, train_config, loss_config,
                                   history_path=os.path.join(args.out, "training_log.tsv"))
    save_checkpoint(checkpoint, os.path.join(args.out, "checkpoint.pt"))
    write_vocabulary(checkpoint.vocab, os.path.join(args.out, "vocab.tsv"))


def _report(args, preds):
    extra = {}
    if getattr(args, "oracle", None):
        hazards = {o.patient_id: o.true_hazard_per_month for o in synth.read_oracle(args.oracle)}
        missing = [pid for pid in preds.patient_ids if pid not in hazards]
        if missing:
            raise DataError("oracle lacks patient {}".format(missing[0]))
        extra["oracle_c_index"] = float(oracle_c_index([hazards[pid] for pid in preds.patient_ids], preds))

    seed = resolved_seed(args, [])
    report = evaluate(preds, args.horizon, impact_threshold=args.impact_threshold,
                      n_bootstrap=args.n_bootstrap, seed=seed)
    write_report(report, args.out, extra=extra)


def cmd_eval(args, configs):
    if args.preds:
        preds = read_predictions(args.preds, args.horizon)
    elif args.checkpoint and args.cohort:
        model = TransformerRiskModel({"checkpoint": args.checkpoint})
        preds = model.predict_risk(cohort_data_from_records(read_cohort(args.cohort)), args.horizon)
        write_predictions(preds, os.path.join(args.out, "predictions.tsv"))
    else:
        raise UsageError("eval needs --preds, or --checkpoint with --cohort")
    _report(args, preds)


def cmd_explain(args, configs):
    config, = configs
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.model()
    cohort = read_cohort(args.cohort)
    attributions = ig.explain_cohort(model, cohort, checkpoint.vocab, config)
    ig.write_attribution_report(ig.aggregate(attributions, cohort, config), args.out)


def cmd_baseline_fit(args, configs):
    frame = baseline_cph.read_design(args.design)
    spec = baseline_cph.CovariateSpec.from_yaml(args.spec) if args.spec else None
    model = baseline_cph.fit_design(frame, spec)
    baseline_cph.save_cph_model(model, os.path.join(args.out, "cph_model.yaml"))


def cmd_baseline_eval(args, configs):
    model = CoxRiskModel({"model": args.model})
    preds = model.predict_risk(cohort_data_from_design(baseline_cph.read_design(args.design)), args.horizon)
    write_predictions(preds, os.path.join(args.out, "predictions.tsv"))
    _report(args, preds)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "baseline-fit": cmd_baseline_fit,
    "baseline-eval": cmd_baseline_eval,
}


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #

def _configure_logging(out_dir, verbose):
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    formatter = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")

    handlers = [logging.StreamHandler(sys.stderr),
                logging.FileHandler(os.path.join(out_dir, "run.log"), mode="w")]
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    logging.captureWarnings(True)
    return handlers


def resolved_seed(args, configs):
    """Seed the command actually runs with: its config's, else --seed, else 0"""
    for config in configs:
        if hasattr(config, "seed"):
            return config.seed
    return 0 if args.seed is None else args.seed


def _write_run_config(args, configs):
    inputs = {k: v for k, v in vars(args).items()
              if k in ("cohort", "checkpoint", "vocab", "preds", "design", "spec", "model", "oracle", "config",
                       "horizon", "impact_threshold", "n_bootstrap", "allow_vocab_mismatch", "resume")}
    resolved = {"command": args.command,
                "seed": resolved_seed(args, configs),
                "inputs": inputs,
                "config": {type(c).__name__: c.to_dict() for c in configs}}
    with open(os.path.join(args.out, "run_config.yaml"), "w") as f:
        yaml.safe_dump(resolved, f, sort_keys=False)


def run(argv=None):
    """Run one command; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE

    os.makedirs(args.out, exist_ok=True)
    handlers = _configure_logging(args.out, args.verbose)
    try:
        if args.threads is not None:
            torch.set_num_threads(args.threads)
        configs = resolve_configs(args.command, args)
        _write_run_config(args, configs)
        logger.info("%s: resolved configuration written to %s", args.command,
                    os.path.join(args.out, "run_config.yaml"))

        COMMANDS[args.command](args, configs)
        return EXIT_OK

    except ConfigError as e:
        logger.error("usage: %s", e)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except NumericalError as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    finally:
        root = logging.getLogger()
        for handler in handlers:
            root.removeHandler(handler)
            handler.close()
        logging.captureWarnings(False)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
