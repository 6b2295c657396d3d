import logging

from fmtnet import settings
from fmtnet.models import SequenceKind
from fmtnet.synthdata import generate_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen-data", help="render a synthetic train/test dataset")
    parser.add_argument("--out", default=settings.DATA_DIR)
    parser.add_argument("--train", type=int, default=100, help="number of training sequences")
    parser.add_argument("--test", type=int, default=20, help="number of test sequences")
    parser.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    parser.add_argument("--length", type=int, default=7)
    parser.add_argument("--size", type=int, default=32, help="image height and width")
    parser.add_argument("--classes", type=int, default=6)
    parser.add_argument("--kind", choices=[k.value for k in SequenceKind], default=SequenceKind.DYNAMIC.value)
    parser.set_defaults(handler=run)


def run(args) -> None:
    written = generate_dataset(
        args.out, args.train, args.test, args.seed,
        height=args.size, width=args.size, length=args.length,
        class_count=args.classes, kind=SequenceKind(args.kind),
    )
    logger.info("Dataset ready under %s: %s", args.out, written)
