import logging
import os
from typing import Optional

from pydantic import ValidationError

from fmtnet import settings
from fmtnet.commands import split_root
from fmtnet.errors import InvalidArgument
from fmtnet.filter import init_model
from fmtnet.models import Stage, TrainConfig
from fmtnet.networks import load_checkpoint, save_checkpoint
from fmtnet.synthdata import SequenceDataset
from fmtnet.trainer import train_stage

logger = logging.getLogger(__name__)

METRICS_LOG = "metrics.jsonl"


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="run one training stage")
    parser.add_argument("--stage", choices=[s.value for s in Stage], required=True)
    parser.add_argument("--data", default=settings.DATA_DIR)
    parser.add_argument("--out", default=settings.CHECKPOINT_DIR)
    parser.add_argument("--config", help="TrainConfig JSON file")
    parser.add_argument("--init", help="checkpoint whose matching parameters initialize the model")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--max-sequences", type=int)
    parser.set_defaults(handler=run)


def load_config(path: Optional[str]) -> TrainConfig:
    if not path:
        return TrainConfig()
    with open(path) as handle:
        try:
            return TrainConfig.model_validate_json(handle.read())
        except ValidationError as exc:
            raise InvalidArgument(f"invalid training config {path}: {exc}")


def run(args) -> None:
    overrides = {"stage": Stage(args.stage)}
    for key in ("seed", "epochs", "max_sequences"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    config = load_config(args.config)
    initial = load_checkpoint(args.init) if args.init else None
    if initial is not None and not args.config:
        overrides["net"] = initial.config
    if "seed" not in overrides and not args.config:
        overrides["seed"] = settings.DEFAULT_SEED
    try:
        config = TrainConfig.model_validate({**config.model_dump(), **overrides})
    except ValidationError as exc:
        raise InvalidArgument(str(exc))

    store = init_model(config.net, config.seed)
    if initial is not None:
        copied = store.copy_matching(initial)
        logger.info("Initialized %d tensors from %s", copied, args.init)
    dataset = SequenceDataset(split_root(args.data, "train"), limit=config.max_sequences)
    logger.info("Training stage %s on %d sequences from %s", config.stage.value, len(dataset), dataset.root)
    train_stage(config.stage, dataset, store, config, log_path=os.path.join(args.out, METRICS_LOG))
    save_checkpoint(store, args.out)
