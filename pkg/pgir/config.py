from pathlib import Path
from dataclasses import dataclass, field, asdict
import inspect
import yaml

from pgir.util import logger
from pgir.align import AlignParams
from pgir.cost import CostWeights


@dataclass
class LabelerConfig:
    """Connection and batching settings of the intent labeler.

    Parameters
    ----------
    endpoint : str
        URL of a chat-completion style endpoint.
    model : str
        Model name sent with every request.
    api_key_env : str
        Environment variable holding the API credential.
    temperature : float
        Sampling temperature.
    timeout : float
        Seconds before a request is abandoned.
    max_attempts : int
        Attempts per pair before it counts as a labeler failure.
    backoff : float
        Base delay in seconds, doubled after every failed attempt.
    workers : int
        Requests in flight at the same time.
    min_request_interval : float
        Minimum seconds between two request starts.
    context_tokens : int
        Context budget of the model; longer prompts are not sent.
    chars_per_token : int
        Characters counted as one token when checking the budget.
    transcript : str
        JSONL file every request and response is appended to.
    replay : str
        Transcript to answer from instead of the endpoint.
    label_unchanged : bool
        Also query steps without a predicate change.
    """

    endpoint: str = None
    model: str = None
    api_key_env: str = "PGIR_LLM_API_KEY"
    temperature: float = 0.0
    timeout: float = 120.0
    max_attempts: int = 3
    backoff: float = 1.0
    workers: int = 4
    min_request_interval: float = 0.0
    context_tokens: int = 128000
    chars_per_token: int = 4
    transcript: str = None
    replay: str = None
    label_unchanged: bool = False


@dataclass
class RepoSpec:
    path: str
    ref: str = "HEAD"
    name: str = None
    filters: list[str] = field(default_factory=list)

    @property
    def label(self) -> str:
        return self.name or Path(self.path).resolve().name


@dataclass
class RunConfig:
    repos: list[RepoSpec] = field(default_factory=list)
    out: str = "pgir-out"
    convert_cmd: str = None
    rename_threshold: float = 0.6
    theta_flip: float = 0.5
    align: AlignParams = field(default_factory=AlignParams)
    weights: CostWeights = field(default_factory=CostWeights)
    labeler: LabelerConfig = field(default_factory=LabelerConfig)
    skip_intent: bool = False
    dump_graphs: bool = False
    workers: int = 4
    aba_collapse_repeats: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, config_path: str | Path) -> None:
        with open(config_path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def from_dict(cls, cfg: dict) -> "RunConfig":
        cfg = dict(cfg or {})

        nested = {
            "align": AlignParams,
            "weights": CostWeights,
            "labeler": LabelerConfig,
        }
        for key, sub_cls in nested.items():
            if key in cfg:
                cfg[key] = _construct(sub_cls, cfg[key] or {})

        if "repos" in cfg:
            cfg["repos"] = [
                _construct(RepoSpec, r if isinstance(r, dict) else {"path": r})
                for r in cfg["repos"] or []
            ]

        return _construct(cls, cfg)


def _construct(cls: type, values: dict):
    sig = inspect.signature(cls.__init__)
    kw = {}

    # Match the args from the config to the current implementation in case it changed
    for key, val in values.items():
        if key in sig.parameters:
            kw[key] = val
        else:
            logger.warning(f"Ignoring unknown {cls.__name__} setting {key}")

    return cls(**kw)


def load_config(config_path: str | Path) -> RunConfig:
    config_path = Path(config_path)
    if not config_path.is_file():
        raise ValueError(f"Config file not found: {config_path}")

    with config_path.open(encoding="utf-8") as f:
        try:
            cfg = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValueError(f"Invalid config file {config_path}") from e

    if cfg is not None and not isinstance(cfg, dict):
        raise ValueError(f"Config file {config_path} must hold a mapping")

    return RunConfig.from_dict(cfg)
