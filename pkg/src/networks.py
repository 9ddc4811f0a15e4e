#!/usr/bin/env python3
"""
Agent Networks Module
=====================
Networks shared by every agent: observation encoder, the two attention
modules, the policy and critic heads and the world model. One parameter set
serves all agents; there are no per-agent weights.

Key Concepts:
- Rows: a batch of joint states is flattened to ``B * n`` rows, row ``b*n + i``
  holding agent ``i`` of joint state ``b``
- Peer slots: agent ``i`` sees its peers in the fixed order ``peer_layout(n)[i]``;
  each slot carries the peer's action index, or -1 when that action is unknown
  (lower-level agent, or no action sharing)
- Action attention: query from the agent's own hidden state, keys/values from
  peer messages (hidden state + one-hot action); its context is concatenated
  with the agent's own hidden state before the heads
- World attention: runs over all n agents including the agent itself; the self
  key uses the same key projection as the peers
- Checkpoints: ``.npz`` archive of named arrays plus a JSON meta record
"""

import copy
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from autodiff import (
    DTYPE, Tensor, add, as_tensor, concat, gather, log_softmax, log_softmax_array,
    matmul, mul, one_hot, reduce_mean, reduce_sum, reshape, scale, softmax,
    take_columns, take_rows, tanh,
)
from errors import InvalidArgumentError
from logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
FORMAT_KEY = '__format_version__'
META_KEY = '__meta__'

HIDDEN_WIDTH = 48
KEY_WIDTH = 32
MLP_WIDTH = 100
ACTION_EMBED_WIDTH = 16


def peer_layout(n_agents: int) -> np.ndarray:
    """(n, n-1) table: row i lists agent i's peers in increasing id order"""
    if n_agents < 1:
        raise InvalidArgumentError(f"need at least one agent, got {n_agents}")
    return np.array([[j for j in range(n_agents) if j != i] for i in range(n_agents)],
                    dtype=np.int64).reshape(n_agents, n_agents - 1)


def joint_rows(batch: int, n_agents: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row indices for a flattened (batch, n) block of agents

    Returns:
        tuple: self rows (batch*n,) and peer rows (batch*n, n-1)
    """
    layout = peer_layout(n_agents)
    base = (np.arange(batch, dtype=np.int64) * n_agents)[:, None]
    self_rows = (base + np.arange(n_agents)[None, :]).reshape(-1)
    peer_rows = (base[:, :, None] + layout[None, :, :]).reshape(batch * n_agents, n_agents - 1)
    return self_rows, peer_rows


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

class Linear:
    """Fully connected layer, weights drawn uniformly in +-1/sqrt(fan_in)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 name: str, bias: bool = True):
        bound = 1.0 / math.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(rng.uniform(-bound, bound, (in_features, out_features)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = None
        if bias:
            self.bias = Tensor(rng.uniform(-bound, bound, (out_features,)),
                               requires_grad=True, name=f"{name}.bias")

    def __call__(self, x) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out

    def parameters(self) -> List[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Categorical:
    """
    Categorical distribution over discrete actions

    Works on a single logit vector or a batch of rows (last axis = actions).
    """

    def __init__(self, logits):
        logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=DTYPE)
        self.logits = logits
        self.log_probs = log_softmax_array(logits)
        self.probs = np.exp(self.log_probs)

    @property
    def n_actions(self) -> int:
        return self.logits.shape[-1]

    def mode(self):
        """Most likely action; ties go to the lowest index"""
        return np.argmax(self.probs, axis=-1)

    def sample(self, rng: np.random.Generator):
        return self.inverse_cdf(rng.random(self.probs.shape[:-1]))

    def inverse_cdf(self, u):
        """Action whose cumulative probability first reaches ``u`` (per row)"""
        u = np.asarray(u, dtype=DTYPE)
        cumulative = np.cumsum(self.probs, axis=-1)
        picks = (cumulative < np.expand_dims(u, -1)).sum(axis=-1)
        return np.minimum(picks, self.n_actions - 1)

    def log_prob(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise InvalidArgumentError(f"action index out of range for {self.n_actions} actions")
        if self.log_probs.ndim == 1:
            return self.log_probs[actions]
        return np.take_along_axis(self.log_probs, actions[:, None], axis=-1)[:, 0]

    def entropy(self):
        return -(self.probs * self.log_probs).sum(axis=-1)


class EncoderNet:
    """Observation encoder: one fully connected layer with tanh, width 48"""

    def __init__(self, obs_dim: int, rng: np.random.Generator, width: int = HIDDEN_WIDTH):
        self.obs_dim = obs_dim
        self.width = width
        self.fc = Linear(obs_dim, width, rng, 'encoder.fc')

    def encode(self, observation) -> Tensor:
        """
        Map observations to hidden states

        Args:
            observation: (obs_dim,) vector or (B, obs_dim) batch

        Returns:
            Tensor: (width,) or (B, width)

        Raises:
            InvalidArgumentError: If the observation width is wrong
        """
        obs = as_tensor(observation)
        if obs.shape[-1:] != (self.obs_dim,) or obs.ndim not in (1, 2):
            raise InvalidArgumentError(
                f"observation width {obs.shape[-1:] or obs.shape} does not match encoder width {self.obs_dim}")
        if obs.ndim == 1:
            return reshape(tanh(self.fc(reshape(obs, (1, self.obs_dim)))), (self.width,))
        return tanh(self.fc(obs))

    def parameters(self) -> List[Tensor]:
        return self.fc.parameters()


class AttentionModule:
    """
    Scaled dot-product attention with single-layer query/key/value projections

    alpha_j = softmax_j(q . k_j / sqrt(d_k)),  context = sum_j alpha_j v_j
    """

    def __init__(self, query_dim: int, entry_dim: int, value_dim: int,
                 rng: np.random.Generator, name: str, key_dim: int = KEY_WIDTH):
        self.query_dim = query_dim
        self.entry_dim = entry_dim
        self.value_dim = value_dim
        self.key_dim = key_dim
        self.query = Linear(query_dim, key_dim, rng, f"{name}.query", bias=False)
        self.key = Linear(entry_dim, key_dim, rng, f"{name}.key", bias=False)
        self.value = Linear(entry_dim, value_dim, rng, f"{name}.value", bias=False)
        self._summers: Dict[int, np.ndarray] = {}

    def _summer(self, m: int) -> np.ndarray:
        # (m*dv, dv) stack of identities: sums m consecutive value blocks
        if m not in self._summers:
            self._summers[m] = np.tile(np.eye(self.value_dim, dtype=DTYPE), (m, 1))
        return self._summers[m]

    def attend_pairs(self, queries, entries, entry_index, m: int) -> Tuple[Tensor, Tensor]:
        """
        Batched attention where query row r looks at m entry rows

        Args:
            queries: (R, query_dim)
            entries: (E, entry_dim)
            entry_index: (R*m,) entry row for each (query, slot) pair
            m (int): entries per query

        Returns:
            tuple: context (R, value_dim) and weights (R, m)
        """
        if m < 1:
            raise InvalidArgumentError("attention needs at least one entry")
        queries, entries = as_tensor(queries), as_tensor(entries)
        entry_index = np.asarray(entry_index, dtype=np.int64).reshape(-1)
        rows = queries.shape[0]
        if entry_index.size != rows * m:
            raise InvalidArgumentError(f"expected {rows * m} entry indices, got {entry_index.size}")

        q = self.query(queries)
        k = self.key(entries)
        v = self.value(entries)
        q_rows = np.repeat(np.arange(rows, dtype=np.int64), m)
        scores = reduce_sum(mul(take_rows(q, q_rows), take_rows(k, entry_index)), axis=1)
        scores = scale(reshape(scores, (rows, m)), 1.0 / math.sqrt(self.key_dim))
        weights = softmax(scores)
        weighted = mul(reshape(weights, (rows * m, 1)), take_rows(v, entry_index))
        context = matmul(reshape(weighted, (rows, m * self.value_dim)), self._summer(m))
        return context, weights

    def attend(self, query_source, entries) -> Tuple[Tensor, Tensor]:
        """
        Attend from one query vector over a list of entry vectors

        Returns:
            tuple: context (value_dim,) and weights (len(entries),)

        Raises:
            InvalidArgumentError: If the entry list is empty
        """
        if entries is None or len(entries) == 0:
            raise InvalidArgumentError("attention needs at least one entry")
        if isinstance(entries, Tensor):
            stacked = entries
        else:
            stacked = np.stack([np.asarray(e, dtype=DTYPE) for e in entries])
        query = reshape(as_tensor(query_source), (1, self.query_dim))
        m = stacked.shape[0]
        context, weights = self.attend_pairs(query, stacked, np.arange(m), m)
        return reshape(context, (self.value_dim,)), reshape(weights, (m,))

    def parameters(self) -> List[Tensor]:
        return self.query.parameters() + self.key.parameters() + self.value.parameters()


class PolicyNet:
    """Hidden layer of width 100 with tanh, then action logits"""

    def __init__(self, in_dim: int, n_actions: int, rng: np.random.Generator, width: int = MLP_WIDTH):
        self.n_actions = n_actions
        self.fc1 = Linear(in_dim, width, rng, 'policy.fc1')
        self.fc2 = Linear(width, n_actions, rng, 'policy.fc2')

    def __call__(self, features) -> Tensor:
        return self.fc2(tanh(self.fc1(features)))

    def parameters(self) -> List[Tensor]:
        return self.fc1.parameters() + self.fc2.parameters()


class CriticNet:
    """Hidden layer of width 100 with tanh, then one value per row"""

    def __init__(self, in_dim: int, rng: np.random.Generator, width: int = MLP_WIDTH):
        self.fc1 = Linear(in_dim, width, rng, 'critic.fc1')
        self.fc2 = Linear(width, 1, rng, 'critic.fc2')

    def __call__(self, features) -> Tensor:
        out = self.fc2(tanh(self.fc1(features)))
        return reshape(out, (out.shape[0],))

    def parameters(self) -> List[Tensor]:
        return self.fc1.parameters() + self.fc2.parameters()


class WorldModelNet:
    """
    Predicts next joint observations and team reward from joint hidden states
    and joint actions

    Each agent row is x_i = [h_i, action_encoder(a_i)]. World attention over all
    n rows gives c_i; the decoder maps [x_i, c_i] to agent i's next observation
    plus a reward estimate. The team reward is the mean of the n estimates, so
    the network does not depend on n.
    """

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator,
                 hidden_width: int = HIDDEN_WIDTH, action_width: int = ACTION_EMBED_WIDTH,
                 mlp_width: int = MLP_WIDTH, key_width: int = KEY_WIDTH):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden_width = hidden_width
        x_width = hidden_width + action_width
        self.action_encoder = Linear(n_actions, action_width, rng, 'world.action_encoder')
        self.attention = AttentionModule(x_width, x_width, x_width, rng, 'world.attention', key_width)
        self.decoder_fc = Linear(2 * x_width, mlp_width, rng, 'world.decoder_fc')
        self.decoder_out = Linear(mlp_width, obs_dim + 1, rng, 'world.decoder_out')

    def forward(self, joint_hidden, joint_actions) -> Tuple[Tensor, Tensor]:
        """
        Args:
            joint_hidden: (n, hidden) for one joint state or (B, n, hidden)
            joint_actions: (n,) or (B, n) action indices

        Returns:
            tuple: predicted observations (n*obs_dim,) or (B, n*obs_dim) and
                predicted reward (1,) or (B, 1)

        Raises:
            InvalidArgumentError: On count or width mismatches
        """
        hidden = np.asarray(joint_hidden.data if isinstance(joint_hidden, Tensor) else joint_hidden,
                            dtype=DTYPE)
        actions = np.asarray(joint_actions, dtype=np.int64)
        single = hidden.ndim == 2
        if single:
            hidden, actions = hidden[None], actions.reshape(1, -1)
        if hidden.ndim != 3 or hidden.shape[2] != self.hidden_width:
            raise InvalidArgumentError(
                f"joint hidden states must be (n, {self.hidden_width}), got {np.shape(joint_hidden)}")
        batch, n = hidden.shape[:2]
        if actions.shape != (batch, n):
            raise InvalidArgumentError(
                f"got {n} hidden states but actions of shape {np.shape(joint_actions)}")
        if n < 1:
            raise InvalidArgumentError("world model needs at least one agent")

        acts = one_hot(actions.reshape(-1), self.n_actions)
        x = concat([hidden.reshape(batch * n, self.hidden_width), tanh(self.action_encoder(acts))], axis=1)
        # every row attends to all n rows of its own joint state
        entry_index = (np.arange(batch)[:, None, None] * n
                       + np.broadcast_to(np.arange(n), (n, n))[None]).reshape(-1)
        context, _ = self.attention.attend_pairs(x, x, entry_index, n)
        out = self.decoder_out(tanh(self.decoder_fc(concat([x, context], axis=1))))

        obs_pred = reshape(take_columns(out, np.arange(self.obs_dim)), (batch, n * self.obs_dim))
        reward = reduce_mean(reshape(take_columns(out, [self.obs_dim]), (batch, n)), axis=1, keepdims=True)
        if single:
            return reshape(obs_pred, (n * self.obs_dim,)), reshape(reward, (1,))
        return obs_pred, reward

    __call__ = forward

    def parameters(self) -> List[Tensor]:
        return (self.action_encoder.parameters() + self.attention.parameters()
                + self.decoder_fc.parameters() + self.decoder_out.parameters())


# ============================================================================
# SHARED AGENT NETWORKS
# ============================================================================

class AgentNetworks:
    """
    Every network an agent uses, shared by all agents

    Attributes:
        encoder (EncoderNet): observation -> hidden state
        action_attention (AttentionModule): peer messages -> context (AM_a)
        policy (PolicyNet): [hidden, context] -> action logits
        critic (CriticNet): [hidden, context] -> value
        world_model (WorldModelNet): joint hidden + joint actions -> next obs, reward
    """

    def __init__(self, obs_dim: int, n_actions: int, seed: int = 0,
                 hidden_width: int = HIDDEN_WIDTH, mlp_width: int = MLP_WIDTH,
                 key_width: int = KEY_WIDTH, action_embed_width: int = ACTION_EMBED_WIDTH):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.seed = seed
        self.widths = {
            'hidden_width': hidden_width,
            'mlp_width': mlp_width,
            'key_width': key_width,
            'action_embed_width': action_embed_width,
        }
        rng = np.random.default_rng(seed)
        self.encoder = EncoderNet(obs_dim, rng, hidden_width)
        self.action_attention = AttentionModule(
            hidden_width, hidden_width + n_actions, hidden_width, rng, 'action_attention', key_width)
        self.policy = PolicyNet(2 * hidden_width, n_actions, rng, mlp_width)
        self.critic = CriticNet(2 * hidden_width, rng, mlp_width)
        self.world_model = WorldModelNet(obs_dim, n_actions, rng, hidden_width,
                                         action_embed_width, mlp_width, key_width)

    @classmethod
    def from_config(cls, obs_dim: int, n_actions: int, network_config, seed: int = 0) -> 'AgentNetworks':
        return cls(obs_dim, n_actions, seed,
                   hidden_width=network_config.hidden_width,
                   mlp_width=network_config.mlp_width,
                   key_width=network_config.key_width,
                   action_embed_width=network_config.action_embed_width)

    @property
    def hidden_width(self) -> int:
        return self.widths['hidden_width']

    # --- forward passes ----------------------------------------------------

    def encode(self, observation) -> Tensor:
        return self.encoder.encode(observation)

    def features(self, hidden, self_rows, peer_rows, peer_actions, share_hidden: bool = True) -> Tensor:
        """
        Head input [h_self, AM_a context] for selected agent rows

        Args:
            hidden: (N, hidden) hidden states of all agents in the batch
            self_rows: (R,) rows of the deciding agents
            peer_rows: (R, m) rows of each agent's peers
            peer_actions: (R, m) peer action indices, -1 where unknown
            share_hidden (bool): False gives a zero context (no communication)

        Returns:
            Tensor: (R, 2 * hidden)
        """
        hidden = as_tensor(hidden)
        self_rows = np.asarray(self_rows, dtype=np.int64).reshape(-1)
        own = take_rows(hidden, self_rows)
        rows = self_rows.size
        peer_rows = np.asarray(peer_rows, dtype=np.int64).reshape(rows, -1)
        m = peer_rows.shape[1]
        if not share_hidden or m == 0:
            context = Tensor(np.zeros((rows, self.action_attention.value_dim), dtype=DTYPE))
        else:
            peer_actions = np.asarray(peer_actions, dtype=np.int64).reshape(rows, m)
            entries = concat([take_rows(hidden, peer_rows.reshape(-1)),
                              one_hot(peer_actions.reshape(-1), self.n_actions)], axis=1)
            context, _ = self.action_attention.attend_pairs(own, entries, np.arange(rows * m), m)
        return concat([own, context], axis=1)

    def forward_joint(self, joint_obs, peer_actions, share_hidden: bool = True) -> Tuple[Tensor, Tensor]:
        """
        Policy logits and values for every agent of a batch of joint states

        Args:
            joint_obs: (B, n, obs_dim)
            peer_actions: (B, n, n-1) peer slots per agent

        Returns:
            tuple: logits (B*n, n_actions) and values (B*n,)
        """
        joint_obs = np.asarray(joint_obs, dtype=DTYPE)
        batch, n = joint_obs.shape[:2]
        hidden = self.encode(joint_obs.reshape(batch * n, self.obs_dim))
        self_rows, peer_rows = joint_rows(batch, n)
        feats = self.features(hidden, self_rows, peer_rows,
                              np.asarray(peer_actions).reshape(batch * n, n - 1), share_hidden)
        return self.policy(feats), self.critic(feats)

    def policy_forward(self, h_self, peer_hidden_states, peer_actions=None,
                       share_hidden: bool = True) -> Categorical:
        """
        Action distribution of one agent

        Args:
            h_self: (hidden,) the agent's own hidden state
            peer_hidden_states: list of peer hidden states (may be empty)
            peer_actions: action per peer aligned with peer_hidden_states;
                None or -1 marks a peer whose action is not known
                (empty conditioning for the level-1 agent)

        Raises:
            InvalidArgumentError: If an action index is out of range
        """
        peers = [np.asarray(h, dtype=DTYPE) for h in peer_hidden_states]
        m = len(peers)
        slots = [-1 if a is None else int(a) for a in (peer_actions or [None] * m)]
        if len(slots) != m:
            raise InvalidArgumentError(f"{m} peer hidden states but {len(slots)} peer actions")
        if any(a < -1 or a >= self.n_actions for a in slots):
            raise InvalidArgumentError(f"action index out of range for {self.n_actions} actions")
        hidden = np.vstack([np.asarray(h_self, dtype=DTYPE).reshape(1, -1)] + [p.reshape(1, -1) for p in peers])
        feats = self.features(hidden, [0], np.arange(1, m + 1).reshape(1, m), np.array(slots).reshape(1, m),
                              share_hidden)
        return Categorical(self.policy(feats).data[0])

    def log_probs(self, logits: Tensor, actions) -> Tensor:
        """Differentiable log pi(a) per row"""
        return gather(log_softmax(logits), actions)

    def world_forward(self, joint_hidden, joint_actions) -> Tuple[Tensor, Tensor]:
        return self.world_model.forward(joint_hidden, joint_actions)

    # --- parameter groups --------------------------------------------------

    def actor_parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.action_attention.parameters() + self.policy.parameters()

    def critic_parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.action_attention.parameters() + self.critic.parameters()

    def world_parameters(self) -> List[Tensor]:
        return self.world_model.parameters()

    def parameters(self) -> List[Tensor]:
        return (self.encoder.parameters() + self.action_attention.parameters() + self.policy.parameters()
                + self.critic.parameters() + self.world_model.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """
        Raises:
            InvalidArgumentError: If names or shapes do not match
        """
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise InvalidArgumentError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, param in params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != param.shape:
                raise InvalidArgumentError(f"{name}: shape {value.shape} does not match {param.shape}")
            param.data = value.copy()

    def meta(self) -> Dict[str, int]:
        return {'obs_dim': self.obs_dim, 'n_actions': self.n_actions, 'seed': self.seed, **self.widths}

    def clone(self) -> 'AgentNetworks':
        return copy.deepcopy(self)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(path, networks: AgentNetworks, extra: Optional[Dict] = None) -> Path:
    """
    Write every parameter to a versioned ``.npz`` archive

    Layout: one array per parameter under its dotted name, the integer
    ``__format_version__`` and ``__meta__``, a JSON string with the network
    widths plus any ``extra`` fields.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(networks.meta())
    meta.update(extra or {})
    arrays = networks.state_dict()
    arrays[FORMAT_KEY] = np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64)
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    logger.debug(f"Saved checkpoint with {len(arrays) - 2} tensors to {path}")
    return path


def read_checkpoint_meta(path) -> Dict:
    with np.load(Path(path), allow_pickle=False) as archive:
        return json.loads(str(archive[META_KEY]))


def load_checkpoint(path) -> AgentNetworks:
    """
    Rebuild networks from a checkpoint written by save_checkpoint()

    Raises:
        FileNotFoundError: If the file does not exist
        InvalidArgumentError: If the format version is unknown or tensors mismatch
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if FORMAT_KEY not in archive.files:
            raise InvalidArgumentError(f"{path} is not a checkpoint (no {FORMAT_KEY})")
        version = int(archive[FORMAT_KEY])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported checkpoint format version {version}")
        meta = json.loads(str(archive[META_KEY]))
        state = {name: archive[name] for name in archive.files if name not in (FORMAT_KEY, META_KEY)}
    networks = AgentNetworks(meta['obs_dim'], meta['n_actions'], meta.get('seed', 0),
                             hidden_width=meta['hidden_width'], mlp_width=meta['mlp_width'],
                             key_width=meta['key_width'], action_embed_width=meta['action_embed_width'])
    networks.load_state_dict(state)
    return networks
