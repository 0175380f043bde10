from .common import (REGIMES, AgentConfig, ConfigError, LossResult, TrainResult, act,
                     build_agent_network, compute_returns, epsilon_at)
from .dqn import dqn_loss, train_dqn
from .reinforce import Trajectory, pg_loss, rollout, train_reinforce
from .replay import ReplayBuffer, Transition


def output_reg_loss(*args, trainer: str = "reinforce", **kwargs):
    """The loss with the penalty on the network output instead of the feature layer."""
    kwargs["target"] = "output"
    if trainer == "dqn":
        return dqn_loss(*args, **kwargs)
    return pg_loss(*args, **kwargs)


def train(cfg: AgentConfig, env, rng, log=None) -> TrainResult:
    if cfg.trainer == "dqn":
        return train_dqn(cfg, env, rng, log)
    return train_reinforce(cfg, env, rng, log)
