"""
Ligne de commande.

    python -m backend.cli run configs/colored_mnist.yaml
    python -m backend.cli eval --data runs/x/data --weights runs/x/weights.jsonl --model configs/model_256.yaml
    python -m backend.cli gen configs/group_shift.yaml --out data/group_shift
    python -m backend.cli sweep configs/colored_mnist.yaml --repeats 20
    python -m backend.cli oracle --seed 0

Codes de sortie : 0 succès, 1 configuration invalide, 2 échec du run, 3 échec de l'oracle.
"""

from pathlib import Path
import argparse
import sys

from pydantic import ValidationError

from backend.data.dataset_io import save_dataset
from backend.harness.config import DatasetSection, config_hash, load_config, read_yaml, resolve_output_dir
from backend.harness.experiment import EXIT_OK, EXIT_RUN_FAILURE, EXIT_VALIDATION, eval_weighted_erm, run_experiment
from backend.harness.oracle_suite import OracleCheckFailure, ensure_passed, oracle_suite
from backend.harness.sweep import sweep_generalization_gap
from backend.reweighting.inner_trainer import DivergenceError
from backend.utils.logger import log_error, log_info, log_success, normalize_text, setup_logger

EXIT_ORACLE_FAILURE = 3


def _validation_failed(source, error: ValidationError) -> int:
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"])
        log_error(f"{source}: {location}: {item['msg']}")
    return EXIT_VALIDATION


def cmd_run(args) -> int:
    return run_experiment(args.config)


def cmd_eval(args) -> int:
    try:
        record = eval_weighted_erm(args.data, args.weights, args.model)
    except ValidationError as e:
        return _validation_failed(args.model, e)
    except (OSError, ValueError) as e:
        log_error(f"Evaluation impossible: {e}")
        return EXIT_VALIDATION
    except DivergenceError as e:
        log_error(str(e))
        return EXIT_RUN_FAILURE

    log_success(f"Precision moyenne {record.average_accuracy:.4f}, pire groupe {record.worst_group_accuracy:.4f}")
    for group, accuracy in sorted(record.group_accuracy.items()):
        log_info(f"  groupe {group}: {accuracy:.4f}")
    return EXIT_OK


def cmd_gen(args) -> int:
    """Le fichier contient `seed` et soit une section `dataset`, soit directement ses champs."""
    try:
        data = read_yaml(args.config)
        seed = int(data.pop("seed", 0))
        section = DatasetSection.model_validate(data.get("dataset", data))
        bundle = section.build(seed)
    except ValidationError as e:
        return _validation_failed(args.config, e)
    except (OSError, ValueError) as e:
        log_error(f"Generation impossible: {e}")
        return EXIT_VALIDATION

    save_dataset(bundle, args.out, config_hash(section))
    log_success(f"{bundle.train.n} / {bundle.val.n} / {bundle.test.n} echantillons ecrits dans {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
    except ValidationError as e:
        return _validation_failed(args.config, e)
    except (OSError, ValueError) as e:
        log_error(f"Configuration illisible: {e}")
        return EXIT_VALIDATION

    try:
        result = sweep_generalization_gap(cfg, repeats=args.repeats, max_workers=args.workers)
    except Exception as e:
        log_error(f"Balayage echoue: {type(e).__name__}: {e}")
        return EXIT_RUN_FAILURE

    out = resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(out / "sweep.csv", index=False)
    result.gaps.to_csv(out / "sweep_gaps.csv", index=False)
    log_info(normalize_text(result.table.to_string(index=False)))
    log_success(f"Pente log-log {result.slope:.3f} ; tableau ecrit dans {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    report = oracle_suite(seed=args.seed, n_joints=args.n_joints, inject_wrong_weight=args.inject_wrong_weight)
    try:
        ensure_passed(report)
    except OracleCheckFailure as e:
        log_error(str(e))
        return EXIT_ORACLE_FAILURE
    log_success("Toutes les verifications de l'oracle passent")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reweigh", description="Repondération d'échantillons bi-niveau")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Exécute une expérience décrite par un fichier YAML")
    run.add_argument("config", type=Path)
    run.set_defaults(handler=cmd_run)

    evaluate = sub.add_parser("eval", help="ERM pondéré avec des poids figés")
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--weights", type=Path, required=True)
    evaluate.add_argument("--model", type=Path, required=True)
    evaluate.set_defaults(handler=cmd_eval)

    gen = sub.add_parser("gen", help="Génère et écrit un jeu de données")
    gen.add_argument("config", type=Path)
    gen.add_argument("--out", type=Path, required=True)
    gen.set_defaults(handler=cmd_gen)

    sweep = sub.add_parser("sweep", help="Écart de généralisation en fonction de n_val")
    sweep.add_argument("config", type=Path)
    sweep.add_argument("--repeats", type=int, default=20)
    sweep.add_argument("--workers", type=int, default=None)
    sweep.set_defaults(handler=cmd_sweep)

    oracle = sub.add_parser("oracle", help="Batterie de vérifications de l'oracle de population")
    oracle.add_argument("--seed", type=int, default=0)
    oracle.add_argument("--n-joints", type=int, default=100)
    oracle.add_argument("--inject-wrong-weight", action="store_true")
    oracle.set_defaults(handler=cmd_oracle)
    return parser


def main(argv=None) -> int:
    setup_logger()
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
