"""Small builders shared by several test modules."""
import numpy as np

from pamrl.config import parse_config
from pamrl.encoder import AdapterNet, FrozenEncoder, StateRepresentation
from pamrl.prompt import DEFAULT_TEMPLATE, ContextTokens, TokenVocab
from pamrl.nn import Adam, Tensor
from pamrl.sac import ActorNet, Batch, CriticNet, SacConfig, Transition, actor_update

D_MODEL = 16


def make_srm(obs_dim: int, n_ctx: int = 2, d_f: int = 4, seed: int = 0, frozen: bool = True):
    vocab = TokenVocab.from_templates([DEFAULT_TEMPLATE])
    enc = FrozenEncoder(len(vocab), d_model=D_MODEL, n_blocks=1, d_ff=16, seed=seed)
    ctx = ContextTokens(n_ctx, D_MODEL, np.random.default_rng([seed, 1]))
    rng = np.random.default_rng([seed, 2])
    srm = StateRepresentation(enc, vocab, ctx, AdapterNet("numeric", obs_dim, d_f, rng, hidden=6),
                              AdapterNet("text", D_MODEL, d_f, rng, hidden=6))
    if frozen:
        srm.f_c1.freeze()
        srm.f_c2.freeze()
    return srm


def random_batch(srm, n: int, obs_dim: int, act_dim: int, seed: int = 0, n_actors: int = 1) -> Batch:
    """Transitions whose stored fused states are consistent with their prompts."""
    rng = np.random.default_rng(seed)
    items = []
    for k in range(n):
        feats = rng.uniform(0, 1, obs_dim)
        text = f"Slice 1 has a QoS level of {rng.uniform(0, 2):.2f} and a throughput of {rng.uniform(0, 50):.2f} Mbps."
        ids = srm.vocab.tokenize(text)
        fused = srm.fuse(feats, srm.hidden_constant(text, ids)).data
        items.append(Transition(fused, rng.uniform(-0.9, 0.9, act_dim), rng.normal(size=fused.shape),
                                float(rng.normal()), False, feats, text, tuple(ids), k % n_actors))
    return Batch.from_transitions(items)


def mean_log_std_after_update(beta, head_bias, seed=0, hidden=(64, 64), state_dim=8, act_dim=3, n=64):
    """Mean actor log-std after one update on a frozen random batch.

    ``head_bias`` sets the initial log-std through the bias of the output
    layer; the batch, noise and initial weights depend only on ``seed``.
    """
    rng = np.random.default_rng([seed, 3])
    items = [Transition(rng.normal(size=state_dim), rng.uniform(-1, 1, act_dim), rng.normal(size=state_dim),
                        float(rng.normal()), False) for _ in range(n)]
    batch = Batch.from_transitions(items)
    noise = np.random.default_rng(seed + 100).standard_normal((n, act_dim))
    rng = np.random.default_rng(seed)
    actor, critic = ActorNet(state_dim, act_dim, hidden, rng), CriticNet(state_dim, act_dim, hidden, rng)
    actor.body.layers[-1][1].data[act_dim:] = head_bias
    actor_update(batch, actor, critic, Adam(actor.parameters(), lr=1e-4), SacConfig(beta=beta, batch_size=4),
                 None, noise=noise)
    return float(actor(Tensor(batch.fused))[1].data.mean())


TOY_INI = """
[run]
variant = {variant}
seeds = 1
out = {out}
env = {env}

[toy]
n_rbs = 2
n_ues = 2

[prompt]
n_ctx = {n_ctx}

[sac]
hidden = 8,8
batch_size = 8
buffer_capacity = 1000
actor_lr = 1e-3
critic_lr = 1e-3
ctx_lr = 1e-3

[train]
iterations = {iterations}
n_actors = 2
steps_per_iteration = 1
episode_length = 3
warmup_steps = 8
eval_interval = 5
eval_episodes = 2
convergence_window = 50
convergence_tol = 1e-6
sequential = true

[encoder]
d_model = 8
n_blocks = 1
d_ff = 8
d_f = 4
adapter_hidden = 6
pretrain_pairs = 32
pretrain_epochs = 2
pretrain_batch = 16
"""


def toy_config(out, variant="pa-mrl", env="semantic_toy", n_ctx=2, iterations=20):
    text = TOY_INI.format(variant=variant, out=out, env=env, n_ctx=n_ctx, iterations=iterations)
    return parse_config(text, source="toy.ini")
