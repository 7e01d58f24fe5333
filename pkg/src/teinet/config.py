"""JSON run configuration shared by the ``train``, ``ablate`` and ``bench`` commands.

Example::

    {
      "seed": 0,
      "network": {"stages": [[1, 8], [1, 16], [1, 32]], "stem_stride": 2,
                  "insertion": [0, 1, 2], "variant": "mem+tim", "tim_init": "shift"},
      "data": {"task": "direction4", "n_per_class": 50, "train_split_seed": 1,
               "eval_split_seed": 2},
      "train": {"epochs": 30, "batch_size": 8, "lr": 0.01}
    }

Every section is optional; missing keys take the defaults below. Unknown keys
anywhere raise :class:`ContractError`.
"""
import json
from dataclasses import asdict, dataclass, field, fields

from .backbone import LRSchedule, NetworkSpec
from .data import SyntheticVideoConfig
from .errors import ContractError


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    milestones: tuple = (0.6, 0.85)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ContractError("lr, momentum and weight_decay must be nonnegative")
        if any(not 0 <= m <= 1 for m in self.milestones):
            raise ContractError(f"milestones are fractions of training, got {list(self.milestones)}")
        return self

    def schedule(self):
        return LRSchedule(self.lr, tuple(self.milestones), self.lr_factor)


@dataclass
class DataConfig:
    """Synthetic generator settings plus split sizes and seeds."""

    n_per_class: int = 50
    train_split_seed: int = 1
    eval_split_seed: int = 2
    video: SyntheticVideoConfig = field(default_factory=SyntheticVideoConfig)

    def train_set(self):
        from .data import generate_dataset
        return generate_dataset(self.video, self.n_per_class, self.train_split_seed, "train")

    def eval_set(self):
        from .data import generate_dataset
        return generate_dataset(self.video, self.n_per_class, self.eval_split_seed, "eval")


# the preset used by the ablation acceptance run
ABLATION_NETWORK = {
    "stages": [[1, 8], [1, 16], [1, 32]],
    "stem_stride": 2,
    "insertion": [0, 1, 2],
    "tim_init": "shift",
}


@dataclass
class RunConfig:
    seed: int = 0
    network: NetworkSpec = field(default_factory=lambda: NetworkSpec(**ABLATION_NETWORK))
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ContractError("configuration must be a JSON object")
        _reject_unknown(d, {"seed", "network", "data", "train"}, "top-level")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ContractError(f"seed must be a nonnegative integer, got {seed!r}")

        data_d = dict(d.get("data", {}))
        split_keys = {"n_per_class", "train_split_seed", "eval_split_seed"}
        video_keys = {f.name for f in fields(SyntheticVideoConfig)}
        _reject_unknown(data_d, split_keys | video_keys, "data")
        video = SyntheticVideoConfig(**{k: v for k, v in data_d.items() if k in video_keys})
        data = DataConfig(video=video, **{k: v for k, v in data_d.items() if k in split_keys})
        video.validate()
        if data.n_per_class < 1:
            raise ContractError("data.n_per_class must be >= 1")

        net_d = dict(ABLATION_NETWORK)
        net_d.update(d.get("network", {}))
        net_d.setdefault("num_classes", video.num_classes)
        _reject_unknown(net_d, {f.name for f in fields(NetworkSpec)}, "network")
        try:
            network = NetworkSpec(**net_d).validate()
        except (TypeError, ValueError) as exc:
            raise ContractError(f"invalid network section: {exc}") from exc
        if network.num_classes != video.num_classes:
            raise ContractError(f"network.num_classes={network.num_classes} but task "
                                f"{video.task!r} has {video.num_classes} classes")

        train_d = d.get("train", {})
        _reject_unknown(train_d, {f.name for f in fields(TrainConfig)}, "train")
        train = TrainConfig(**train_d)
        train.milestones = tuple(train.milestones)
        train.validate()
        return cls(seed, network, data, train)

    def to_dict(self):
        data = {"n_per_class": self.data.n_per_class,
                "train_split_seed": self.data.train_split_seed,
                "eval_split_seed": self.data.eval_split_seed}
        data.update(self.data.video.to_dict())
        train = asdict(self.train)
        train["milestones"] = list(train["milestones"])
        return {"seed": self.seed, "network": self.network.to_dict(), "data": data, "train": train}


def _reject_unknown(d, allowed, section):
    if not isinstance(d, dict):
        raise ContractError(f"{section} section must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ContractError(f"unknown {section} keys: {', '.join(unknown)}")


def load_config(path):
    """Parse a JSON config file. A malformed file raises ContractError; a missing one OSError."""
    with open(path) as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)
