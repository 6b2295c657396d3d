from fmtnet import settings
from fmtnet.perturb import perturb_dataset


def register(subparsers) -> None:
    parser = subparsers.add_parser("perturb", help="apply noise, clutter and lighting to a dataset")
    parser.add_argument("--in", dest="source", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    parser.set_defaults(handler=run)


def run(args) -> None:
    perturb_dataset(args.source, args.out, args.seed)
