//! MADDPG: per-agent actors trained against centralized critics
//! `Q^i(s, a^1, ..., a^N)`, with optional opponent models `mu(a^j | s)` that
//! replace live co-actors in the decentralized variant.
//!
//! Critic input is `concat(s, enc(a^1), ..., enc(a^N))` in agent order, with
//! one-hot encoding for discrete actions and the raw scalar for boxes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::buffer::ReplayBuffer;
use crate::envs::{sample_categorical, Action, ActionSpace, JointTransition, MarkovGame};
use crate::error::{Error, Result};
use crate::ndiff::{clip_grad_norm, polyak_update, Activation, AdamState, DenseNet, Graph, Tensor, Var};
use crate::oracle::argmax;
use crate::qmix::GRAD_CLIP;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaddpgVariant {
    Ctde,
    Decentralized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaddpgConfig {
    pub variant: MaddpgVariant,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub model_lr: f64,
    pub tau: f64,
    pub noise_sigma: f64,
    /// Entropy weight of the opponent-model objective.
    pub beta: f64,
}

impl Default for MaddpgConfig {
    fn default() -> Self {
        Self {
            variant: MaddpgVariant::Ctde,
            hidden: vec![32],
            gamma: 0.99,
            critic_lr: 1e-3,
            actor_lr: 1e-3,
            model_lr: 1e-2,
            tau: 0.01,
            noise_sigma: 0.1,
            beta: 0.01,
        }
    }
}

/// Differentiable per-agent critic `[B, 1]` from states `[B, S]` and
/// encoded joint actions `[B, W]`.
pub trait CriticFn {
    fn q(&self, g: &mut Graph, agent: usize, s: Var, a: Var) -> Result<Var>;
}

/// Learned critic nets bound as constants.
pub struct FrozenCritics<'a>(pub &'a [DenseNet]);

impl CriticFn for FrozenCritics<'_> {
    fn q(&self, g: &mut Graph, agent: usize, s: Var, a: Var) -> Result<Var> {
        let net = &self.0[agent];
        let bound = net.bind_frozen(g);
        let x = g.concat(&[s, a])?;
        net.forward(g, &bound, x)
    }
}

/// Policy head applied to raw actor output.
fn policy_head(g: &mut Graph, space: &ActionSpace, z: Var) -> Result<Var> {
    match *space {
        ActionSpace::Discrete(_) => Ok(g.softmax(z)),
        ActionSpace::Box1D { lo, hi } => {
            let t = g.tanh(z);
            let t = g.scale(t, (hi - lo) / 2.0)?;
            g.add_scalar(t, (hi + lo) / 2.0)
        }
    }
}

fn one_hot_rows(idx: &[usize], k: usize) -> Vec<f64> {
    let mut v = vec![0.0; idx.len() * k];
    for (r, &a) in idx.iter().enumerate() {
        v[r * k + a] = 1.0;
    }
    v
}

#[derive(Clone, Debug)]
pub struct MaddpgLearner {
    cfg: MaddpgConfig,
    spaces: Vec<ActionSpace>,
    state_width: usize,
    actors: Vec<DenseNet>,
    target_actors: Vec<DenseNet>,
    critics: Vec<DenseNet>,
    target_critics: Vec<DenseNet>,
    /// `models[owner][j]`, present for discrete `j != owner`.
    models: Vec<Vec<Option<DenseNet>>>,
    actor_opt: Vec<AdamState>,
    critic_opt: Vec<AdamState>,
    model_opt: Vec<Vec<Option<AdamState>>>,
    frozen: Vec<bool>,
    steps: u64,
}

impl MaddpgLearner {
    pub fn new<R: Rng + ?Sized>(game: &MarkovGame, cfg: MaddpgConfig, rng: &mut R) -> Result<Self> {
        let spaces = game.action_spaces().to_vec();
        let n = spaces.len();
        let state_width = game.state_width();
        if cfg.variant == MaddpgVariant::Decentralized && !game.is_discrete() {
            return Err(Error::ContinuousOpponent);
        }
        let joint_width: usize = spaces.iter().map(ActionSpace::encoded_width).sum();
        let mut actors = Vec::with_capacity(n);
        let mut critics = Vec::with_capacity(n);
        for space in &spaces {
            actors.push(DenseNet::mlp(state_width, &cfg.hidden, space.encoded_width(), Activation::Relu, rng)?);
        }
        for _ in 0..n {
            critics.push(DenseNet::mlp(state_width + joint_width, &cfg.hidden, 1, Activation::Relu, rng)?);
        }
        let mut models = Vec::with_capacity(n);
        for owner in 0..n {
            let mut row = Vec::with_capacity(n);
            for (j, space) in spaces.iter().enumerate() {
                row.push(match space {
                    ActionSpace::Discrete(k) if j != owner => {
                        let mut net = DenseNet::mlp(state_width, &cfg.hidden, *k, Activation::Relu, rng)?;
                        net.zero_output_layer();
                        Some(net)
                    }
                    _ => None,
                });
            }
            models.push(row);
        }
        let actor_opt = actors.iter().map(|a| AdamState::new(cfg.actor_lr, a.params())).collect();
        let critic_opt = critics.iter().map(|c| AdamState::new(cfg.critic_lr, c.params())).collect();
        let model_opt = models
            .iter()
            .map(|row| {
                row.iter()
                    .map(|m| m.as_ref().map(|m| AdamState::new(cfg.model_lr, m.params())))
                    .collect()
            })
            .collect();
        Ok(Self {
            target_actors: actors.clone(),
            target_critics: critics.clone(),
            actors,
            critics,
            models,
            actor_opt,
            critic_opt,
            model_opt,
            frozen: vec![false; n],
            steps: 0,
            spaces,
            state_width,
            cfg,
        })
    }

    pub fn config(&self) -> &MaddpgConfig {
        &self.cfg
    }
    pub fn n_agents(&self) -> usize {
        self.spaces.len()
    }
    pub fn actors(&self) -> &[DenseNet] {
        &self.actors
    }
    pub fn actor_mut(&mut self, agent: usize) -> &mut DenseNet {
        &mut self.actors[agent]
    }
    pub fn critics(&self) -> &[DenseNet] {
        &self.critics
    }
    pub fn critic_mut(&mut self, agent: usize) -> &mut DenseNet {
        &mut self.critics[agent]
    }
    pub fn opponent_model(&self, owner: usize, j: usize) -> Option<&DenseNet> {
        self.models[owner][j].as_ref()
    }
    pub fn steps(&self) -> u64 {
        self.steps
    }
    pub fn is_frozen(&self, agent: usize) -> bool {
        self.frozen[agent]
    }

    /// Pins a discrete agent to a state-independent policy `probs` in both
    /// the online and target actors and stops training it.
    pub fn freeze_actor(&mut self, agent: usize, probs: &[f64]) -> Result<()> {
        if self.spaces[agent].n() != Some(probs.len()) {
            return Err(Error::WrongShape("fixed policy width".into()));
        }
        for net in [&mut self.actors[agent], &mut self.target_actors[agent]] {
            net.zero_output_layer();
            let last = net.params().len() - 1;
            let logits: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln()).collect();
            net.params_mut()[last].value_mut().copy_from_slice(&logits);
        }
        self.frozen[agent] = true;
        Ok(())
    }

    fn joint_width(&self) -> usize {
        self.spaces.iter().map(ActionSpace::encoded_width).sum()
    }

    /// Policy outputs for a batch of states: box actions `[B, 1]` or
    /// probabilities `[B, k]`.
    fn policy_values(&self, net: &DenseNet, agent: usize, s: &[f64]) -> Result<Vec<f64>> {
        let rows = s.len() / self.state_width;
        let mut g = Graph::new();
        let sv = g.constant(&[rows, self.state_width], s.to_vec())?;
        let bound = net.bind_frozen(&mut g);
        let z = net.forward(&mut g, &bound, sv)?;
        let out = policy_head(&mut g, &self.spaces[agent], z)?;
        Ok(g.value(out).to_vec())
    }

    /// `pi^i(.|s)` or the deterministic box action for one state.
    pub fn policy(&self, agent: usize, s: &[f64]) -> Result<Vec<f64>> {
        self.policy_values(&self.actors[agent], agent, s)
    }

    /// Opponent-model distribution `mu_owner(.|s)` over agent `j`'s actions.
    pub fn model_probs(&self, owner: usize, j: usize, s: &[f64]) -> Result<Vec<f64>> {
        let net = self.models[owner][j].as_ref().ok_or(Error::ContinuousOpponent)?;
        let rows = s.len() / self.state_width;
        let mut g = Graph::new();
        let sv = g.constant(&[rows, self.state_width], s.to_vec())?;
        let bound = net.bind_frozen(&mut g);
        let z = net.forward(&mut g, &bound, sv)?;
        let p = g.softmax(z);
        Ok(g.value(p).to_vec())
    }

    /// Behavior actions: box actions get clipped Gaussian noise when
    /// `explore`, discrete actions are sampled from the policy.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], explore: bool, rng: &mut R) -> Result<(Vec<Action>, Vec<f64>)> {
        let noise = Normal::new(0.0, self.cfg.noise_sigma.max(0.0))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut actions = Vec::with_capacity(self.n_agents());
        let mut probs = Vec::with_capacity(self.n_agents());
        for (i, space) in self.spaces.iter().enumerate() {
            let out = self.policy(i, s)?;
            match *space {
                ActionSpace::Discrete(_) => {
                    let a = sample_categorical(&out, rng.random());
                    probs.push(out[a]);
                    actions.push(Action::Discrete(a));
                }
                ActionSpace::Box1D { lo, hi } => {
                    let mut a = out[0];
                    if explore {
                        a += noise.sample(rng);
                    }
                    probs.push(1.0);
                    actions.push(Action::Continuous(a.clamp(lo, hi)));
                }
            }
        }
        Ok((actions, probs))
    }

    /// Noise-free box actions and argmax discrete actions.
    pub fn greedy(&self, s: &[f64]) -> Result<Vec<Action>> {
        self.spaces
            .iter()
            .enumerate()
            .map(|(i, space)| {
                let out = self.policy(i, s)?;
                Ok(match space {
                    ActionSpace::Discrete(_) => Action::Discrete(argmax(&out)),
                    ActionSpace::Box1D { .. } => Action::Continuous(out[0]),
                })
            })
            .collect()
    }

    fn encode_batch_actions(&self, batch: &[JointTransition]) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch.len() * self.joint_width());
        for t in batch {
            for (a, space) in t.actions.iter().zip(&self.spaces) {
                out.extend(a.encode(space));
            }
        }
        out
    }

    /// Encoded next joint actions per row: own target actors everywhere,
    /// except agents listed in `models_for` (owner), whose actions are
    /// drawn from that owner's opponent models. Discrete draws use
    /// `uniforms[row][agent]`.
    fn next_joint(&self, s_next: &[f64], rows: usize, owner_models: Option<usize>, uniforms: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.n_agents();
        let mut per_agent: Vec<Vec<f64>> = Vec::with_capacity(n);
        for j in 0..n {
            let vals = match owner_models {
                Some(owner) if j != owner => self.model_probs(owner, j, s_next)?,
                _ => self.policy_values(&self.target_actors[j], j, s_next)?,
            };
            per_agent.push(vals);
        }
        let mut out = Vec::with_capacity(rows * self.joint_width());
        for r in 0..rows {
            for (j, space) in self.spaces.iter().enumerate() {
                match space {
                    ActionSpace::Discrete(k) => {
                        let p = &per_agent[j][r * k..(r + 1) * k];
                        let a = sample_categorical(p, uniforms[r][j]);
                        out.extend((0..*k).map(|x| if x == a { 1.0 } else { 0.0 }));
                    }
                    ActionSpace::Box1D { .. } => out.push(per_agent[j][r]),
                }
            }
        }
        Ok(out)
    }

    fn targets_with(&self, batch: &[JointTransition], owner_models: Option<usize>, uniforms: &[Vec<f64>], agents: &[usize]) -> Result<Vec<Vec<f64>>> {
        let rows = batch.len();
        let s_next: Vec<f64> = batch.iter().flat_map(|t| t.s_next.iter().copied()).collect();
        let a_next = self.next_joint(&s_next, rows, owner_models, uniforms)?;
        let mut g = Graph::new();
        let sv = g.constant(&[rows, self.state_width], s_next)?;
        let av = g.constant(&[rows, self.joint_width()], a_next)?;
        let critics = FrozenCritics(&self.target_critics);
        let mut out = vec![Vec::with_capacity(agents.len()); rows];
        for &i in agents {
            let q = critics.q(&mut g, i, sv, av)?;
            for (r, t) in batch.iter().enumerate() {
                let boot = if t.done { 0.0 } else { self.cfg.gamma * g.value(q)[r] };
                out[r].push(t.rewards[i] + boot);
            }
        }
        Ok(out)
    }

    /// `y = r + gamma (1 - done) Q_target(s', a')` with `a'` from target
    /// actors; returns `[row][agent]`.
    pub fn ctde_targets(&self, batch: &[JointTransition], uniforms: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let all: Vec<usize> = (0..self.n_agents()).collect();
        self.targets_with(batch, None, uniforms, &all)
    }

    /// Owner's target with co-agent next actions drawn from its opponent
    /// models.
    pub fn decentralized_targets(&self, batch: &[JointTransition], owner: usize, uniforms: &[Vec<f64>]) -> Result<Vec<f64>> {
        for j in 0..self.n_agents() {
            if j != owner && self.models[owner][j].is_none() {
                return Err(Error::ContinuousOpponent);
            }
        }
        Ok(self
            .targets_with(batch, Some(owner), uniforms, &[owner])?
            .into_iter()
            .map(|v| v[0])
            .collect())
    }

    fn draw_uniforms<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..self.n_agents()).map(|_| rng.random()).collect())
            .collect()
    }

    /// Regresses critics `agents` onto `targets[row][k]`; returns the
    /// summed per-agent MSE before the step.
    fn fit_critics(&mut self, batch: &[JointTransition], agents: &[usize], targets: &[Vec<f64>]) -> Result<f64> {
        let rows = batch.len();
        let s: Vec<f64> = batch.iter().flat_map(|t| t.s.iter().copied()).collect();
        let mut g = Graph::new();
        let sv = g.constant(&[rows, self.state_width], s)?;
        let av = g.constant(&[rows, self.joint_width()], self.encode_batch_actions(batch))?;
        let x = g.concat(&[sv, av])?;
        let mut bound = Vec::with_capacity(agents.len());
        let mut total: Option<Var> = None;
        for (k, &i) in agents.iter().enumerate() {
            let b = self.critics[i].bind(&mut g);
            let q = self.critics[i].forward(&mut g, &b, x)?;
            let y = g.constant(&[rows, 1], targets.iter().map(|t| t[k]).collect())?;
            let d = g.sub(q, y)?;
            let sq = g.square(d);
            let l = g.mean(sq);
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
            bound.push(b);
        }
        let loss = total.ok_or(Error::Empty)?;
        g.backward(loss)?;
        for (&i, b) in agents.iter().zip(&bound) {
            let net = &mut self.critics[i];
            net.accumulate_grads(&g, b);
            clip_grad_norm(net.params_mut().iter_mut(), GRAD_CLIP);
            self.critic_opt[i].step(net.params_mut().iter_mut())?;
        }
        Ok(g.item(loss))
    }

    pub fn critic_update_ctde<R: Rng + ?Sized>(&mut self, batch: &[JointTransition], rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        let u = self.draw_uniforms(batch.len(), rng);
        let y = self.ctde_targets(batch, &u)?;
        let all: Vec<usize> = (0..self.n_agents()).collect();
        self.fit_critics(batch, &all, &y)
    }

    pub fn critic_update_decentralized<R: Rng + ?Sized>(&mut self, batch: &[JointTransition], owner: usize, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        let u = self.draw_uniforms(batch.len(), rng);
        let y: Vec<Vec<f64>> = self
            .decentralized_targets(batch, owner, &u)?
            .into_iter()
            .map(|v| vec![v])
            .collect();
        self.fit_critics(batch, &[owner], &y)
    }

    /// Co-agent action blocks for the actor objective, as constants.
    fn coagent_blocks<R: Rng + ?Sized>(&self, g: &mut Graph, s: &[f64], rows: usize, me: usize, rng: &mut R) -> Result<Vec<Option<Var>>> {
        let decentralized = self.cfg.variant == MaddpgVariant::Decentralized;
        let mut blocks = Vec::with_capacity(self.n_agents());
        for (j, space) in self.spaces.iter().enumerate() {
            if j == me {
                blocks.push(None);
                continue;
            }
            let vals = if decentralized {
                self.model_probs(me, j, s)?
            } else {
                self.policy(j, s)?
            };
            let block = match space {
                ActionSpace::Discrete(k) => {
                    let idx: Vec<usize> = vals.chunks(*k).map(|p| sample_categorical(p, rng.random())).collect();
                    g.constant(&[rows, *k], one_hot_rows(&idx, *k))?
                }
                ActionSpace::Box1D { .. } => g.constant(&[rows, 1], vals)?,
            };
            blocks.push(Some(block));
        }
        Ok(blocks)
    }

    /// One policy step for `agent` against the learner's own critics.
    pub fn actor_update<R: Rng + ?Sized>(&mut self, batch: &[JointTransition], agent: usize, rng: &mut R) -> Result<f64> {
        let critics = std::mem::take(&mut self.critics);
        let res = self.actor_update_with(&FrozenCritics(&critics), batch, agent, rng);
        self.critics = critics;
        res
    }

    /// Continuous actors ascend `E_s Q^i(s, pi^i(s), a^-i)` through the
    /// critic; discrete actors take a score-function step
    /// `grad log pi^i(a^i|s) (Q^i - mean Q^i)` on freshly sampled actions.
    /// Only agent `agent`'s parameters change. Returns the mean critic
    /// value before the step.
    pub fn actor_update_with<R: Rng + ?Sized>(
        &mut self,
        critic: &dyn CriticFn,
        batch: &[JointTransition],
        agent: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        let rows = batch.len();
        let s: Vec<f64> = batch.iter().flat_map(|t| t.s.iter().copied()).collect();
        let mut g = Graph::new();
        let sv = g.constant(&[rows, self.state_width], s.clone())?;
        let blocks = self.coagent_blocks(&mut g, &s, rows, agent, rng)?;
        let bound = self.actors[agent].bind(&mut g);
        let z = self.actors[agent].forward(&mut g, &bound, sv)?;
        let out = policy_head(&mut g, &self.spaces[agent], z)?;

        let (loss, objective) = match self.spaces[agent] {
            ActionSpace::Box1D { .. } => {
                let parts: Vec<Var> = blocks.iter().map(|b| b.unwrap_or(out)).collect();
                let a = g.concat(&parts)?;
                let q = critic.q(&mut g, agent, sv, a)?;
                let j = g.mean(q);
                (g.neg(j), g.item(j))
            }
            ActionSpace::Discrete(k) => {
                let probs = g.value(out).to_vec();
                let idx: Vec<usize> = probs.chunks(k).map(|p| sample_categorical(p, rng.random())).collect();
                let mine = g.constant(&[rows, k], one_hot_rows(&idx, k))?;
                let parts: Vec<Var> = blocks.iter().map(|b| b.unwrap_or(mine)).collect();
                let a = g.concat(&parts)?;
                let q = critic.q(&mut g, agent, sv, a)?;
                let qv = g.value(q).to_vec();
                let baseline = qv.iter().sum::<f64>() / rows as f64;
                let adv = g.constant(&[rows, 1], qv.iter().map(|x| x - baseline).collect())?;
                let p_taken = g.select_cols(out, &idx)?;
                let logp = g.log(p_taken);
                let weighted = g.mul(logp, adv)?;
                let j = g.mean(weighted);
                (g.neg(j), baseline)
            }
        };
        g.backward(loss)?;
        let net = &mut self.actors[agent];
        net.accumulate_grads(&g, &bound);
        clip_grad_norm(net.params_mut().iter_mut(), GRAD_CLIP);
        self.actor_opt[agent].step(net.params_mut().iter_mut())?;
        Ok(objective)
    }

    /// Maximum likelihood of observed co-agent actions with an entropy
    /// bonus; returns the summed NLL before the step.
    pub fn opponent_model_update(&mut self, batch: &[JointTransition], owner: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        let n = self.n_agents();
        if (0..n).any(|j| j != owner && self.models[owner][j].is_none()) {
            return Err(Error::ContinuousOpponent);
        }
        let rows = batch.len();
        let s: Vec<f64> = batch.iter().flat_map(|t| t.s.iter().copied()).collect();
        let mut total_nll = 0.0;
        for j in (0..n).filter(|&j| j != owner) {
            let idx: Vec<usize> = batch
                .iter()
                .map(|t| t.actions[j].index().ok_or(Error::ContinuousOpponent))
                .collect::<Result<_>>()?;
            let net = self.models[owner][j].as_mut().expect("checked above");
            let mut g = Graph::new();
            let sv = g.constant(&[rows, self.state_width], s.clone())?;
            let bound = net.bind(&mut g);
            let z = net.forward(&mut g, &bound, sv)?;
            let p = g.softmax(z);
            let taken = g.select_cols(p, &idx)?;
            let logp = g.log(taken);
            let ll = g.mean(logp);
            let nll = g.neg(ll);
            let logp_all = g.log(p);
            let plogp = g.mul(p, logp_all)?;
            let neg_ent = g.sum(plogp);
            let neg_ent = g.scale(neg_ent, self.cfg.beta / rows as f64)?;
            let loss = g.add(nll, neg_ent)?;
            g.backward(loss)?;
            total_nll += g.item(nll);
            net.accumulate_grads(&g, &bound);
            clip_grad_norm(net.params_mut().iter_mut(), GRAD_CLIP);
            self.model_opt[owner][j]
                .as_mut()
                .expect("model has optimizer")
                .step(net.params_mut().iter_mut())?;
        }
        Ok(total_nll)
    }

    /// Polyak update of all target nets.
    pub fn soft_update(&mut self) -> Result<()> {
        let tau = self.cfg.tau;
        for (src, dst) in self.actors.iter().zip(self.target_actors.iter_mut()) {
            polyak_update(src.params(), dst.params_mut(), tau)?;
        }
        for (src, dst) in self.critics.iter().zip(self.target_critics.iter_mut()) {
            polyak_update(src.params(), dst.params_mut(), tau)?;
        }
        Ok(())
    }

    /// Critic update(s), then actor updates, then opponent models, then
    /// target tracking.
    pub fn learner_step<R: Rng + ?Sized>(&mut self, batch: &[JointTransition], rng: &mut R) -> Result<StepStats> {
        let n = self.n_agents();
        let mut stats = StepStats::default();
        match self.cfg.variant {
            MaddpgVariant::Ctde => stats.critic_loss = self.critic_update_ctde(batch, rng)?,
            MaddpgVariant::Decentralized => {
                for i in 0..n {
                    stats.critic_loss += self.critic_update_decentralized(batch, i, rng)?;
                }
            }
        }
        for i in 0..n {
            if !self.frozen[i] {
                stats.actor_objective += self.actor_update(batch, i, rng)?;
            }
        }
        if self.cfg.variant == MaddpgVariant::Decentralized {
            for i in 0..n {
                stats.model_nll += self.opponent_model_update(batch, i)?;
            }
        }
        self.soft_update()?;
        self.steps += 1;
        Ok(stats)
    }

    pub fn collect_episode<R: Rng + ?Sized>(&self, game: &MarkovGame, rng: &mut R) -> Result<Vec<JointTransition>> {
        let mut st = game.reset(rng);
        let mut out = Vec::new();
        while !st.done {
            let s = game.encode_state(st.state);
            let (actions, probs) = self.act(&s, true, rng)?;
            let step = game.step(&st, &actions, rng)?;
            out.push(JointTransition {
                s,
                actions,
                rewards: step.rewards,
                s_next: game.encode_state(step.next.state),
                done: step.done,
                behavior_probs: Some(probs),
            });
            st = step.next;
        }
        Ok(out)
    }

    /// Noise-free rollouts (discrete policies are sampled); per-agent mean
    /// discounted return.
    pub fn evaluate<R: Rng + ?Sized>(&self, game: &MarkovGame, episodes: usize, rng: &mut R) -> Result<Vec<f64>> {
        let mut totals = vec![0.0; self.n_agents()];
        for _ in 0..episodes {
            let mut st = game.reset(rng);
            let mut disc = 1.0;
            while !st.done {
                let (actions, _) = self.act(&game.encode_state(st.state), false, rng)?;
                let step = game.step(&st, &actions, rng)?;
                for (t, r) in totals.iter_mut().zip(&step.rewards) {
                    *t += disc * r;
                }
                disc *= game.gamma();
                st = step.next;
            }
        }
        Ok(totals.into_iter().map(|t| t / episodes.max(1) as f64).collect())
    }

    pub fn to_json(&self) -> Value {
        let named = |nets: &[DenseNet]| nets.iter().map(DenseNet::to_named).collect::<Vec<_>>();
        let models: Vec<Vec<Value>> = self
            .models
            .iter()
            .map(|row| {
                row.iter()
                    .map(|m| m.as_ref().map_or(Value::Null, |m| json!(m.to_named())))
                    .collect()
            })
            .collect();
        json!({
            "actors": named(&self.actors),
            "critics": named(&self.critics),
            "opponent_models": models,
            "targets": {
                "actors": named(&self.target_actors),
                "critics": named(&self.target_critics),
            },
            "frozen": self.frozen,
        })
    }

    pub fn load_json(&mut self, v: &Value) -> Result<()> {
        let bad = |m: &str| Error::MalformedCheckpoint(m.into());
        let load = |nets: &mut [DenseNet], v: Option<&Value>| -> Result<()> {
            let list = v.and_then(Value::as_array).ok_or_else(|| bad("missing network list"))?;
            if list.len() != nets.len() {
                return Err(bad("network count mismatch"));
            }
            for (net, item) in nets.iter_mut().zip(list) {
                net.load_named(&serde_json::from_value(item.clone())?)?;
            }
            Ok(())
        };
        load(&mut self.actors, v.get("actors"))?;
        load(&mut self.critics, v.get("critics"))?;
        let targets = v.get("targets").ok_or_else(|| bad("missing targets"))?;
        load(&mut self.target_actors, targets.get("actors"))?;
        load(&mut self.target_critics, targets.get("critics"))?;
        let rows = v
            .get("opponent_models")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing opponent_models"))?;
        if rows.len() != self.models.len() {
            return Err(bad("opponent model count mismatch"));
        }
        for (row, vrow) in self.models.iter_mut().zip(rows) {
            let vrow = vrow.as_array().ok_or_else(|| bad("opponent model row"))?;
            if vrow.len() != row.len() {
                return Err(bad("opponent model row length"));
            }
            for (m, item) in row.iter_mut().zip(vrow) {
                match (m, item) {
                    (Some(net), item) if !item.is_null() => net.load_named(&serde_json::from_value(item.clone())?)?,
                    (None, Value::Null) => {}
                    _ => return Err(bad("opponent model presence mismatch")),
                }
            }
        }
        if let Some(f) = v.get("frozen") {
            self.frozen = serde_json::from_value(f.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub model_nll: f64,
}

/// One exploratory episode plus one learner step per iteration.
pub struct MaddpgTrainer {
    pub learner: MaddpgLearner,
    pub buffer: ReplayBuffer,
    pub batch_size: usize,
    pub episodes: u64,
}

impl MaddpgTrainer {
    pub fn new(learner: MaddpgLearner, capacity: usize, batch_size: usize) -> Self {
        Self {
            learner,
            buffer: ReplayBuffer::new(capacity),
            batch_size,
            episodes: 0,
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, game: &MarkovGame, rng: &mut R) -> Result<StepStats> {
        for t in self.learner.collect_episode(game, rng)? {
            self.buffer.push(t);
        }
        self.episodes += 1;
        let batch = self.buffer.sample(self.batch_size, rng)?;
        self.learner.learner_step(&batch, rng)
    }
}

/// Analytic shared critic `-(a^1 + a^2 - 1)^2` of the continuous
/// cooperative fixture.
pub struct CoopCtsCritic;

impl CriticFn for CoopCtsCritic {
    fn q(&self, g: &mut Graph, _agent: usize, _s: Var, a: Var) -> Result<Var> {
        let sum = g.row_sum(a)?;
        let d = g.add_scalar(sum, -1.0)?;
        let sq = g.square(d);
        Ok(g.neg(sq))
    }
}

/// Critic that ignores its inputs and returns `value` everywhere.
pub struct ConstantCritic(pub f64);

impl CriticFn for ConstantCritic {
    fn q(&self, g: &mut Graph, _agent: usize, s: Var, _a: Var) -> Result<Var> {
        let rows = g.shape(s)[0];
        g.constant(&[rows, 1], vec![self.0; rows])
    }
}

/// Critic over a single-state discrete game from a table `q[agent][joint]`
/// evaluated on one-hot joint actions: `Q = sum_j onehot_j * table_j`.
pub struct TableCritic {
    pub per_agent: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl CriticFn for TableCritic {
    fn q(&self, g: &mut Graph, agent: usize, s: Var, a: Var) -> Result<Var> {
        let rows = g.shape(s)[0];
        let av = g.value(a).to_vec();
        let width: usize = self.counts.iter().sum();
        let mut vals = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &av[r * width..(r + 1) * width];
            let mut idx = 0;
            let mut off = 0;
            for &k in &self.counts {
                let a = argmax(&row[off..off + k]);
                idx = idx * k + a;
                off += k;
            }
            vals.push(self.per_agent[agent][idx]);
        }
        g.constant(&[rows, 1], vals)
    }
}

impl MaddpgLearner {
    /// Tensors of every actor, for isolation checks.
    pub fn actor_snapshot(&self) -> Vec<Vec<Tensor>> {
        self.actors.iter().map(|a| a.params().to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cts_batch(n: usize, r: &mut ChaCha8Rng) -> Vec<JointTransition> {
        (0..n)
            .map(|_| {
                let a1: f64 = r.random_range(-1.0..1.0);
                let a2: f64 = r.random_range(-1.0..1.0);
                let rew = -(a1 + a2 - 1.0).powi(2);
                JointTransition {
                    s: vec![1.0],
                    actions: vec![Action::Continuous(a1), Action::Continuous(a2)],
                    rewards: vec![rew, rew],
                    s_next: vec![1.0],
                    done: true,
                    behavior_probs: None,
                }
            })
            .collect()
    }

    #[test]
    fn actors_respect_spaces() {
        let g = envs::coop_cts();
        let l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(0)).unwrap();
        let mut r = rng(1);
        for _ in 0..200 {
            let (acts, _) = l.act(&[1.0], true, &mut r).unwrap();
            for a in acts {
                assert!((-1.0..=1.0).contains(&a.value()));
            }
        }
        let d = envs::coop_climb().unwrap();
        let l = MaddpgLearner::new(&d, MaddpgConfig::default(), &mut rng(0)).unwrap();
        let p = l.policy(0, &[1.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn terminal_and_undiscounted_targets_are_rewards() {
        let g = envs::two_step_coop().unwrap();
        let l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(2)).unwrap();
        let done = JointTransition {
            s: g.encode_state(1),
            actions: vec![Action::Discrete(1), Action::Discrete(1)],
            rewards: vec![10.0, 10.0],
            s_next: g.encode_state(2),
            done: true,
            behavior_probs: None,
        };
        let u = vec![vec![0.3, 0.6]];
        assert_eq!(l.ctde_targets(&[done.clone()], &u).unwrap(), vec![vec![10.0, 10.0]]);
        assert_eq!(l.decentralized_targets(&[done.clone()], 0, &u).unwrap(), vec![10.0]);

        let cfg = MaddpgConfig {
            gamma: 0.0,
            ..MaddpgConfig::default()
        };
        let l = MaddpgLearner::new(&g, cfg, &mut rng(2)).unwrap();
        let mut live = done;
        live.done = false;
        live.s_next = g.encode_state(0);
        assert_eq!(l.ctde_targets(&[live.clone()], &u).unwrap(), vec![vec![10.0, 10.0]]);
        assert_eq!(l.decentralized_targets(&[live], 1, &u).unwrap(), vec![10.0]);
    }

    #[test]
    fn constant_critic_gives_zero_actor_grads() {
        let g = envs::coop_cts();
        let mut l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(3)).unwrap();
        let before = l.actor_snapshot();
        let batch = cts_batch(16, &mut rng(4));
        l.actor_update_with(&ConstantCritic(2.5), &batch, 0, &mut rng(5)).unwrap();
        assert_eq!(before, l.actor_snapshot());
    }

    #[test]
    fn actor_update_touches_only_its_agent() {
        let g = envs::coop_cts();
        let mut l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(6)).unwrap();
        let before = l.actor_snapshot();
        let batch = cts_batch(16, &mut rng(7));
        l.actor_update_with(&CoopCtsCritic, &batch, 0, &mut rng(8)).unwrap();
        let after = l.actor_snapshot();
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
    }

    #[test]
    fn exact_critic_drives_sum_to_one() {
        let g = envs::coop_cts();
        let mut l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(9)).unwrap();
        let batch = cts_batch(8, &mut rng(10));
        let mut r = rng(11);
        for _ in 0..2000 {
            for i in 0..2 {
                l.actor_update_with(&CoopCtsCritic, &batch, i, &mut r).unwrap();
            }
        }
        let a = l.greedy(&[1.0]).unwrap();
        assert!((a[0].value() + a[1].value() - 1.0).abs() < 0.05, "{a:?}");
    }

    #[test]
    fn score_function_prefers_better_action() {
        let g = envs::matching_pennies().unwrap();
        let mut l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(12)).unwrap();
        // Agent 0 gains 1 from action 1 whatever agent 1 does.
        let critic = TableCritic {
            per_agent: vec![vec![0.0, 0.0, 1.0, 1.0], vec![0.0; 4]],
            counts: vec![2, 2],
        };
        let batch: Vec<JointTransition> = (0..32)
            .map(|_| JointTransition {
                s: vec![1.0],
                actions: vec![Action::Discrete(0), Action::Discrete(0)],
                rewards: vec![0.0, 0.0],
                s_next: vec![1.0],
                done: true,
                behavior_probs: None,
            })
            .collect();
        let mut r = rng(13);
        for _ in 0..3000 {
            l.actor_update_with(&critic, &batch, 0, &mut r).unwrap();
        }
        assert!(l.policy(0, &[1.0]).unwrap()[1] > 0.9);
    }

    fn pennies_batch(n: usize, p0: f64, r: &mut ChaCha8Rng) -> Vec<JointTransition> {
        (0..n)
            .map(|_| {
                let b = if r.random::<f64>() < p0 { 0 } else { 1 };
                JointTransition {
                    s: vec![1.0],
                    actions: vec![Action::Discrete(r.random_range(0..2)), Action::Discrete(b)],
                    rewards: vec![0.0, 0.0],
                    s_next: vec![1.0],
                    done: true,
                    behavior_probs: None,
                }
            })
            .collect()
    }

    #[test]
    fn opponent_model_fits_constant_and_uniform() {
        let g = envs::matching_pennies().unwrap();
        let cfg = MaddpgConfig {
            beta: 0.0,
            ..MaddpgConfig::default()
        };
        let mut l = MaddpgLearner::new(&g, cfg.clone(), &mut rng(14)).unwrap();
        let mut r = rng(15);
        let always = pennies_batch(64, 1.0, &mut r);
        for _ in 0..2000 {
            l.opponent_model_update(&always, 0).unwrap();
        }
        assert!(l.model_probs(0, 1, &[1.0]).unwrap()[0] >= 0.95);

        let mut l = MaddpgLearner::new(&g, cfg, &mut rng(16)).unwrap();
        for _ in 0..2000 {
            let b = pennies_batch(64, 0.5, &mut r);
            l.opponent_model_update(&b, 0).unwrap();
        }
        let p = l.model_probs(0, 1, &[1.0]).unwrap();
        assert!(p.iter().all(|x| (0.45..=0.55).contains(x)), "{p:?}");
    }

    #[test]
    fn large_entropy_weight_keeps_model_uniform() {
        let g = envs::matching_pennies().unwrap();
        let cfg = MaddpgConfig {
            beta: 10.0,
            ..MaddpgConfig::default()
        };
        let mut l = MaddpgLearner::new(&g, cfg, &mut rng(17)).unwrap();
        let mut r = rng(18);
        let always = pennies_batch(64, 1.0, &mut r);
        for _ in 0..2000 {
            l.opponent_model_update(&always, 0).unwrap();
            let p = l.model_probs(0, 1, &[1.0]).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let p = l.model_probs(0, 1, &[1.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 0.05, "{p:?}");
    }

    #[test]
    fn continuous_opponents_rejected() {
        let g = envs::coop_cts();
        let mut l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(19)).unwrap();
        let batch = cts_batch(4, &mut rng(20));
        assert!(matches!(l.opponent_model_update(&batch, 0), Err(Error::ContinuousOpponent)));
        let cfg = MaddpgConfig {
            variant: MaddpgVariant::Decentralized,
            ..MaddpgConfig::default()
        };
        assert!(matches!(MaddpgLearner::new(&g, cfg, &mut rng(0)), Err(Error::ContinuousOpponent)));
    }

    #[test]
    fn critic_input_order_matters() {
        let g = envs::coop_cts();
        let l = MaddpgLearner::new(&g, MaddpgConfig::default(), &mut rng(21)).unwrap();
        let critic = FrozenCritics(l.critics());
        let mut gr = Graph::new();
        let s = gr.constant(&[1, 1], vec![1.0]).unwrap();
        let a = gr.constant(&[1, 2], vec![0.3, -0.7]).unwrap();
        let b = gr.constant(&[1, 2], vec![-0.7, 0.3]).unwrap();
        let qa = critic.q(&mut gr, 0, s, a).unwrap();
        let qb = critic.q(&mut gr, 0, s, b).unwrap();
        assert_ne!(gr.item(qa), gr.item(qb));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let g = envs::two_step_coop().unwrap();
        let cfg = MaddpgConfig {
            variant: MaddpgVariant::Decentralized,
            ..MaddpgConfig::default()
        };
        let a = MaddpgLearner::new(&g, cfg.clone(), &mut rng(1)).unwrap();
        let mut b = MaddpgLearner::new(&g, cfg, &mut rng(2)).unwrap();
        b.load_json(&a.to_json()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }
}
