from fmtnet.networks import FILTER_GROUPS, count_parameters, load_checkpoint


def register(subparsers) -> None:
    parser = subparsers.add_parser("info", help="parameter counts of a checkpoint")
    parser.add_argument("--ckpt", required=True)
    parser.set_defaults(handler=run)


def run(args) -> None:
    counts = count_parameters(load_checkpoint(args.ckpt))
    for group, count in sorted(counts.items()):
        print(f"{group:<16}{count:>10}")
    print(f"{'filter':<16}{sum(counts.get(g, 0) for g in FILTER_GROUPS):>10}")
    print(f"{'total':<16}{sum(counts.values()):>10}")
