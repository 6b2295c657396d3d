import logging
import os

from fmtnet import settings
from fmtnet.commands import split_root
from fmtnet.errors import InvalidArgument
from fmtnet.evaluation import experiment_compare, experiment_motion, experiment_static, render_report, write_report
from fmtnet.models import EvalConfig, ExperimentName
from fmtnet.networks import load_checkpoint
from fmtnet.synthdata import SequenceDataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="run one filter experiment and write its report")
    parser.add_argument("--experiment", choices=[e.value for e in ExperimentName], required=True)
    parser.add_argument("--data", default=settings.DATA_DIR)
    parser.add_argument("--ckpt", required=True, help="filter checkpoint")
    parser.add_argument("--baseline", help="unfiltered baseline checkpoint (compare only)")
    parser.add_argument("--out", default=settings.REPORT_DIR)
    parser.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    parser.add_argument("--max-sequences", type=int)
    parser.add_argument("--blank-last", action="store_true", help="replace the last frame by noise (compare only)")
    parser.add_argument("--no-images", action="store_true")
    parser.set_defaults(handler=run)


def run(args) -> None:
    experiment = ExperimentName(args.experiment)
    config = EvalConfig(
        seed=args.seed,
        max_sequences=args.max_sequences,
        blank_last=args.blank_last,
        emit_images=not args.no_images,
    )
    dataset = SequenceDataset(split_root(args.data, "test"))
    store = load_checkpoint(args.ckpt)
    image_dir = os.path.join(args.out, f"{experiment.value}_images")
    if experiment == ExperimentName.STATIC:
        report = experiment_static(dataset, store, config, image_dir)
    elif experiment == ExperimentName.MOTION:
        report = experiment_motion(dataset, store, config, image_dir)
    else:
        if not args.baseline:
            raise InvalidArgument("the compare experiment needs --baseline")
        report = experiment_compare(dataset, store, load_checkpoint(args.baseline), config, image_dir)
    write_report(report, args.out)
    print(render_report(report), end="")
