//! Cooperative value factorization: independent Q-learning, VDN sum mixing
//! and QMIX with hypernetwork-generated monotone mixing.
//!
//! Every agent has a utility net `Q^i(s, .)`. In `vdn` and `qmix` modes the
//! taken utilities are mixed into `Q^tot(s, a)` and trained on
//! `y = r + gamma * Q^tot_target(s', greedy(s'))`; greedy joint actions are
//! always the stacked per-agent argmaxes.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::buffer::ReplayBuffer;
use crate::envs::{Action, JointTransition, MarkovGame};
use crate::error::{Error, Result};
use crate::ndiff::{clip_grad_norm, copy_params, Activation, AdamState, DenseNet, Graph, Tensor, Var};
use crate::oracle::argmax;

pub const GRAD_CLIP: f64 = 10.0;
const COOP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Independent,
    Vdn,
    Qmix,
}

/// Linear decay from `start` to `end` over `steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl LinearSchedule {
    pub fn value(&self, t: u64) -> f64 {
        if self.steps == 0 {
            return self.end;
        }
        let frac = (t as f64 / self.steps as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmixConfig {
    pub mode: MixMode,
    pub hidden: Vec<usize>,
    pub hyper_hidden: usize,
    pub embed_dim: usize,
    pub share_params: bool,
    pub gamma: f64,
    pub lr: f64,
    /// Optional learning-rate decay; overrides `lr` when present.
    #[serde(default)]
    pub lr_schedule: Option<LinearSchedule>,
    pub target_update_interval: u64,
    pub epsilon: LinearSchedule,
    /// Agents whose utilities are trained; `None` means all.
    pub learning_agents: Option<Vec<usize>>,
}

impl Default for QmixConfig {
    fn default() -> Self {
        Self {
            mode: MixMode::Qmix,
            hidden: vec![32],
            hyper_hidden: 16,
            embed_dim: 8,
            share_params: false,
            gamma: 0.99,
            lr: 5e-4,
            lr_schedule: None,
            target_update_interval: 200,
            epsilon: LinearSchedule {
                start: 1.0,
                end: 0.05,
                steps: 10_000,
            },
            learning_agents: None,
        }
    }
}

/// State-conditioned generators of the mixing weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypernets {
    pub w1: DenseNet,
    pub b1: DenseNet,
    pub w2: DenseNet,
    pub b2: DenseNet,
}

impl Hypernets {
    fn new<R: Rng + ?Sized>(state: usize, n: usize, embed: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let make = |out: usize, rng: &mut R| DenseNet::mlp(state, &[hidden], out, Activation::Relu, rng);
        Ok(Self {
            w1: make(n * embed, rng)?,
            b1: make(embed, rng)?,
            w2: make(embed, rng)?,
            b2: make(1, rng)?,
        })
    }

    fn nets(&self) -> [&DenseNet; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn nets_mut(&mut self) -> [&mut DenseNet; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.nets().into_iter().flat_map(|n| n.params().iter())
    }
}

/// Parameters of the mixing stage as bound in one graph.
struct MixBound {
    hyper: Option<[Vec<Var>; 4]>,
}

#[derive(Clone, Debug)]
pub struct QmixLearner {
    cfg: QmixConfig,
    action_counts: Vec<usize>,
    state_width: usize,
    agents: Vec<DenseNet>,
    hyper: Option<Hypernets>,
    target_agents: Vec<DenseNet>,
    target_hyper: Option<Hypernets>,
    adam: AdamState,
    learner_steps: u64,
}

fn frozen_all(nets: &[&DenseNet], g: &mut Graph) -> Vec<Vec<Var>> {
    nets.iter().map(|n| n.bind_frozen(g)).collect()
}

impl QmixLearner {
    pub fn new<R: Rng + ?Sized>(game: &MarkovGame, cfg: QmixConfig, rng: &mut R) -> Result<Self> {
        let action_counts = game.action_counts()?;
        let state_width = game.state_width();
        let n = action_counts.len();
        if cfg.share_params && action_counts.iter().any(|&k| k != action_counts[0]) {
            return Err(Error::InvalidConfig("parameter sharing needs equal action counts".into()));
        }
        let n_nets = if cfg.share_params { 1 } else { n };
        let agents = (0..n_nets)
            .map(|i| DenseNet::mlp(state_width, &cfg.hidden, action_counts[i], Activation::Relu, rng))
            .collect::<Result<Vec<_>>>()?;
        let hyper = match cfg.mode {
            MixMode::Qmix => Some(Hypernets::new(state_width, n, cfg.embed_dim, cfg.hyper_hidden, rng)?),
            _ => None,
        };
        let mut learner = Self {
            action_counts,
            state_width,
            target_agents: agents.clone(),
            target_hyper: hyper.clone(),
            agents,
            hyper,
            adam: AdamState::new(cfg.lr, std::iter::empty()),
            learner_steps: 0,
            cfg,
        };
        learner.adam = AdamState::new(learner.cfg.lr, learner.all_params());
        Ok(learner)
    }

    pub fn config(&self) -> &QmixConfig {
        &self.cfg
    }
    pub fn mode(&self) -> MixMode {
        self.cfg.mode
    }
    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }
    pub fn learner_steps(&self) -> u64 {
        self.learner_steps
    }
    pub fn hypernets(&self) -> Option<&Hypernets> {
        self.hyper.as_ref()
    }
    pub fn hypernets_mut(&mut self) -> Option<&mut Hypernets> {
        self.hyper.as_mut()
    }

    fn net_index(&self, agent: usize) -> usize {
        if self.cfg.share_params {
            0
        } else {
            agent
        }
    }

    pub fn agent_net(&self, agent: usize) -> &DenseNet {
        &self.agents[self.net_index(agent)]
    }

    pub fn agent_net_mut(&mut self, agent: usize) -> &mut DenseNet {
        let i = self.net_index(agent);
        &mut self.agents[i]
    }

    fn all_params(&self) -> impl Iterator<Item = &Tensor> {
        self.agents
            .iter()
            .flat_map(|n| n.params().iter())
            .chain(self.hyper.iter().flat_map(|h| h.params()))
    }

    fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.agents.iter_mut().flat_map(|n| n.params_mut().iter_mut()).collect();
        if let Some(h) = self.hyper.as_mut() {
            for net in h.nets_mut() {
                out.extend(net.params_mut().iter_mut());
            }
        }
        out
    }

    /// `Q^i(s, .)` for every agent from the online nets.
    pub fn utilities(&self, s: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.n_agents()).map(|i| self.agent_net(i).predict(s)).collect()
    }

    /// Per-agent argmax, lowest index on ties.
    pub fn greedy_joint(&self, s: &[f64]) -> Result<Vec<usize>> {
        Ok(self.utilities(s)?.iter().map(|u| argmax(u)).collect())
    }

    /// Each agent independently explores with probability `epsilon`.
    pub fn act_epsilon_greedy<R: Rng + ?Sized>(&self, s: &[f64], epsilon: f64, rng: &mut R) -> Result<Vec<usize>> {
        let greedy = self.greedy_joint(s)?;
        Ok(greedy
            .into_iter()
            .zip(&self.action_counts)
            .map(|(a, &k)| if rng.random::<f64>() < epsilon { rng.random_range(0..k) } else { a })
            .collect())
    }

    pub fn epsilon(&self, step: u64) -> f64 {
        self.cfg.epsilon.value(step)
    }

    fn bind_mix(&self, g: &mut Graph, target: bool) -> MixBound {
        let hyper = if target { &self.target_hyper } else { &self.hyper };
        MixBound {
            hyper: hyper.as_ref().map(|h| {
                let [a, b, c, d] = h.nets();
                if target {
                    [a.bind_frozen(g), b.bind_frozen(g), c.bind_frozen(g), d.bind_frozen(g)]
                } else {
                    [a.bind(g), b.bind(g), c.bind(g), d.bind(g)]
                }
            }),
        }
    }

    /// `q` is `[B, N]`, `s` is `[B, S]`; returns `[B, 1]`.
    fn mix_graph(&self, g: &mut Graph, bound: &MixBound, target: bool, s: Var, q: Var) -> Result<Var> {
        match self.cfg.mode {
            MixMode::Independent => Err(Error::ModeMismatch),
            MixMode::Vdn => g.row_sum(q),
            MixMode::Qmix => {
                let hyper = if target { &self.target_hyper } else { &self.hyper };
                let h = hyper.as_ref().expect("qmix mode has hypernets");
                let b = bound.hyper.as_ref().expect("qmix mode has hypernets");
                let (n, e) = (self.n_agents(), self.cfg.embed_dim);
                let rows = g.shape(q)[0];

                let w1 = h.w1.forward(g, &b[0], s)?;
                let w1 = g.abs(w1);
                let b1 = h.b1.forward(g, &b[1], s)?;
                let w2 = h.w2.forward(g, &b[2], s)?;
                let w2 = g.abs(w2);
                let b2 = h.b2.forward(g, &b[3], s)?;

                // hidden[b, e] = sum_i q[b, i] * w1[b, i*E + e]
                let mut spread = vec![0.0; n * n * e];
                let mut gather = vec![0.0; n * e * e];
                for i in 0..n {
                    for k in 0..e {
                        spread[i * n * e + i * e + k] = 1.0;
                        gather[(i * e + k) * e + k] = 1.0;
                    }
                }
                let spread = g.constant(&[n, n * e], spread)?;
                let gather = g.constant(&[n * e, e], gather)?;
                let q_rep = g.matmul(q, spread)?;
                let weighted = g.mul(q_rep, w1)?;
                let hidden = g.matmul(weighted, gather)?;
                let hidden = g.add(hidden, b1)?;
                let hidden = g.elu(hidden);
                let out = g.mul(hidden, w2)?;
                let out = g.row_sum(out)?;
                debug_assert_eq!(g.shape(out), &[rows, 1]);
                g.add(out, b2)
            }
        }
    }

    /// `Q^tot` for one state and one vector of taken utilities.
    pub fn mix(&self, q_taken: &[f64], s: &[f64]) -> Result<f64> {
        if self.cfg.mode == MixMode::Independent {
            return Err(Error::ModeMismatch);
        }
        let mut g = Graph::new();
        let bound = self.bind_mix(&mut g, false);
        let sv = g.constant(&[1, self.state_width], s.to_vec())?;
        let qv = g.constant(&[1, self.n_agents()], q_taken.to_vec())?;
        let out = self.mix_graph(&mut g, &bound, false, sv, qv)?;
        Ok(g.item(out))
    }

    /// `dQ^tot / dq_i` by reverse mode.
    pub fn mix_grad(&self, q_taken: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        if self.cfg.mode == MixMode::Independent {
            return Err(Error::ModeMismatch);
        }
        let mut g = Graph::new();
        let bound = self.bind_mix(&mut g, false);
        let sv = g.constant(&[1, self.state_width], s.to_vec())?;
        let qt = Tensor::new(vec![1, self.n_agents()], q_taken.to_vec())?.with_grad();
        let qv = g.leaf(&qt);
        let out = self.mix_graph(&mut g, &bound, false, sv, qv)?;
        g.backward(out)?;
        Ok(g.grad(qv))
    }

    /// Makes the hypernets emit `W1 = I`, `b1 = 0`, `W2 = 1`, `b2 = 0` for
    /// every state, so mixing reduces to a sum on nonnegative inputs.
    pub fn force_identity_mixing(&mut self) -> Result<()> {
        let (n, e) = (self.n_agents(), self.cfg.embed_dim);
        if n != e {
            return Err(Error::InvalidConfig(format!(
                "identity mixing needs embed_dim = {n}, got {e}"
            )));
        }
        let h = self.hyper.as_mut().ok_or(Error::ModeMismatch)?;
        let set = |net: &mut DenseNet, bias: Vec<f64>| {
            for t in net.params_mut() {
                t.value_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let last = net.params_mut().len() - 1;
            net.params_mut()[last].value_mut().copy_from_slice(&bias);
        };
        let mut eye = vec![0.0; n * e];
        for i in 0..n {
            eye[i * e + i] = 1.0;
        }
        set(&mut h.w1, eye);
        set(&mut h.b1, vec![0.0; e]);
        set(&mut h.w2, vec![1.0; e]);
        set(&mut h.b2, vec![0.0]);
        Ok(())
    }

    fn learning(&self, agent: usize) -> bool {
        self.cfg
            .learning_agents
            .as_ref()
            .is_none_or(|l| l.contains(&agent))
    }

    fn discrete_actions(&self, t: &JointTransition) -> Result<Vec<usize>> {
        t.actions
            .iter()
            .enumerate()
            .map(|(agent, a)| {
                a.index().ok_or(Error::InvalidAction {
                    agent,
                    detail: "continuous action in a discrete learner".into(),
                })
            })
            .collect()
    }

    /// Builds the TD loss, backpropagates, and leaves gradients in the
    /// parameter tensors. Returns the loss.
    pub fn compute_grads(&mut self, batch: &[JointTransition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        let n = self.n_agents();
        let b = batch.len();
        let mixing = self.cfg.mode != MixMode::Independent;
        if mixing {
            for t in batch {
                if t.rewards.iter().any(|r| (r - t.rewards[0]).abs() > COOP_TOL) {
                    return Err(Error::NonCooperative(t.rewards.clone()));
                }
            }
        }
        let actions: Vec<Vec<usize>> = batch.iter().map(|t| self.discrete_actions(t)).collect::<Result<_>>()?;
        let s: Vec<f64> = batch.iter().flat_map(|t| t.s.iter().copied()).collect();
        let s_next: Vec<f64> = batch.iter().flat_map(|t| t.s_next.iter().copied()).collect();
        let gamma = self.cfg.gamma;

        // Targets from frozen copies.
        let mut tg = Graph::new();
        let sn = tg.constant(&[b, self.state_width], s_next.clone())?;
        let tbound = frozen_all(&self.target_agents.iter().collect::<Vec<_>>(), &mut tg);
        let mut next_taken = Vec::with_capacity(n);
        for i in 0..n {
            let idx = self.net_index(i);
            let u = self.target_agents[idx].forward(&mut tg, &tbound[idx], sn)?;
            let k = self.action_counts[i];
            let greedy: Vec<usize> = tg.value(u).chunks(k).map(argmax).collect();
            next_taken.push(tg.select_cols(u, &greedy)?);
        }
        let targets: Vec<Vec<f64>> = if mixing {
            let qn = tg.concat(&next_taken)?;
            let mb = self.bind_mix(&mut tg, true);
            let qtot = self.mix_graph(&mut tg, &mb, true, sn, qn)?;
            let v = tg.value(qtot).to_vec();
            batch
                .iter()
                .zip(v)
                .map(|(t, q)| vec![t.rewards[0] + if t.done { 0.0 } else { gamma * q }])
                .collect()
        } else {
            batch
                .iter()
                .enumerate()
                .map(|(row, t)| {
                    (0..n)
                        .map(|i| {
                            let q = tg.value(next_taken[i])[row];
                            t.rewards[i] + if t.done { 0.0 } else { gamma * q }
                        })
                        .collect()
                })
                .collect()
        };

        // Online prediction.
        let mut g = Graph::new();
        let sv = g.constant(&[b, self.state_width], s)?;
        let bound: Vec<Vec<Var>> = self.agents.iter().map(|net| net.bind(&mut g)).collect();
        let mut taken = Vec::with_capacity(n);
        for i in 0..n {
            let idx = self.net_index(i);
            let u = self.agents[idx].forward(&mut g, &bound[idx], sv)?;
            let col: Vec<usize> = actions.iter().map(|a| a[i]).collect();
            taken.push(g.select_cols(u, &col)?);
        }
        let mb = self.bind_mix(&mut g, false);
        let loss = if mixing {
            let q = g.concat(&taken)?;
            let qtot = self.mix_graph(&mut g, &mb, false, sv, q)?;
            let y = g.constant(&[b, 1], targets.iter().map(|t| t[0]).collect())?;
            let d = g.sub(qtot, y)?;
            let sq = g.square(d);
            g.mean(sq)
        } else {
            let mut per_agent = Vec::new();
            for (i, &q) in taken.iter().enumerate() {
                if !self.learning(i) {
                    continue;
                }
                let y = g.constant(&[b, 1], targets.iter().map(|t| t[i]).collect())?;
                let d = g.sub(q, y)?;
                let sq = g.square(d);
                per_agent.push(g.mean(sq));
            }
            let mut total = *per_agent.first().ok_or(Error::InvalidConfig("no learning agents".into()))?;
            for &l in &per_agent[1..] {
                total = g.add(total, l)?;
            }
            total
        };
        g.backward(loss)?;
        for (net, bv) in self.agents.iter_mut().zip(&bound) {
            net.accumulate_grads(&g, bv);
        }
        if let (Some(h), Some(hb)) = (self.hyper.as_mut(), mb.hyper.as_ref()) {
            for (net, bv) in h.nets_mut().into_iter().zip(hb) {
                net.accumulate_grads(&g, bv);
            }
        }
        Ok(g.item(loss))
    }

    /// Clips, takes one Adam step, and refreshes the target copy on
    /// schedule.
    pub fn apply_grads(&mut self) -> Result<()> {
        clip_grad_norm(self.all_params_mut(), GRAD_CLIP);
        let mut adam = std::mem::replace(&mut self.adam, AdamState::new(0.0, std::iter::empty()));
        if let Some(sched) = self.cfg.lr_schedule {
            adam.lr = sched.value(self.learner_steps);
        }
        let res = adam.step(self.all_params_mut());
        self.adam = adam;
        res?;
        self.learner_steps += 1;
        if self.cfg.target_update_interval > 0 && self.learner_steps.is_multiple_of(self.cfg.target_update_interval) {
            self.sync_targets()?;
        }
        Ok(())
    }

    pub fn sync_targets(&mut self) -> Result<()> {
        for (src, dst) in self.agents.iter().zip(self.target_agents.iter_mut()) {
            copy_params(src.params(), dst.params_mut())?;
        }
        if let (Some(src), Some(dst)) = (self.hyper.as_ref(), self.target_hyper.as_mut()) {
            for (s, d) in src.nets().into_iter().zip(dst.nets_mut()) {
                copy_params(s.params(), d.params_mut())?;
            }
        }
        Ok(())
    }

    /// One learner step on `batch`; returns the pre-step loss.
    pub fn td_update(&mut self, batch: &[JointTransition]) -> Result<f64> {
        let loss = self.compute_grads(batch)?;
        self.apply_grads()?;
        Ok(loss)
    }

    /// Plays one episode with epsilon-greedy per-agent actions.
    /// `scripted[i]`, when present, replaces agent `i`'s choice with a draw
    /// from the given per-state distribution.
    pub fn collect_episode<R: Rng + ?Sized>(
        &self,
        game: &MarkovGame,
        epsilon: f64,
        scripted: &[Option<Vec<Vec<f64>>>],
        rng: &mut R,
    ) -> Result<Vec<JointTransition>> {
        let mut st = game.reset(rng);
        let mut out = Vec::new();
        while !st.done {
            let s = game.encode_state(st.state);
            let mut joint = self.act_epsilon_greedy(&s, epsilon, rng)?;
            for (i, script) in scripted.iter().enumerate() {
                if let Some(pol) = script {
                    joint[i] = crate::envs::sample_categorical(&pol[st.state], rng.random());
                }
            }
            let actions: Vec<Action> = joint.iter().map(|&a| Action::Discrete(a)).collect();
            let step = game.step(&st, &actions, rng)?;
            out.push(JointTransition {
                s,
                actions,
                rewards: step.rewards,
                s_next: game.encode_state(step.next.state),
                done: step.done,
                behavior_probs: None,
            });
            st = step.next;
        }
        Ok(out)
    }

    /// Greedy rollouts; returns per-agent mean discounted return.
    pub fn evaluate<R: Rng + ?Sized>(&self, game: &MarkovGame, episodes: usize, rng: &mut R) -> Result<Vec<f64>> {
        let mut totals = vec![0.0; self.n_agents()];
        for _ in 0..episodes {
            let mut st = game.reset(rng);
            let mut disc = 1.0;
            while !st.done {
                let s = game.encode_state(st.state);
                let joint = self.greedy_joint(&s)?;
                let actions: Vec<Action> = joint.into_iter().map(Action::Discrete).collect();
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
        let psi: Vec<BTreeMap<String, Vec<f64>>> = self.agents.iter().map(DenseNet::to_named).collect();
        let theta = self.hyper.as_ref().map(|h| {
            json!({
                "w1": h.w1.to_named(),
                "b1": h.b1.to_named(),
                "w2": h.w2.to_named(),
                "b2": h.b2.to_named(),
            })
        });
        json!({
            "mode": self.cfg.mode,
            "psi": psi,
            "theta": theta,
            "config": self.cfg,
        })
    }

    /// Restores parameters written by [`QmixLearner::to_json`] into a
    /// learner built with the same game and config.
    pub fn load_json(&mut self, v: &Value) -> Result<()> {
        let bad = |m: &str| Error::MalformedCheckpoint(m.into());
        let psi: Vec<BTreeMap<String, Vec<f64>>> =
            serde_json::from_value(v.get("psi").cloned().ok_or_else(|| bad("missing psi"))?)?;
        if psi.len() != self.agents.len() {
            return Err(bad("agent count mismatch"));
        }
        for (net, named) in self.agents.iter_mut().zip(&psi) {
            net.load_named(named)?;
        }
        if let Some(h) = self.hyper.as_mut() {
            let theta = v.get("theta").ok_or_else(|| bad("missing theta"))?;
            for (key, net) in ["w1", "b1", "w2", "b2"].into_iter().zip(h.nets_mut()) {
                let named: BTreeMap<String, Vec<f64>> =
                    serde_json::from_value(theta.get(key).cloned().ok_or_else(|| bad("missing hypernet"))?)?;
                net.load_named(&named)?;
            }
        }
        self.sync_targets()
    }
}

/// Standard off-policy loop: one environment episode then one learner
/// step per iteration, with a replay buffer.
pub struct QmixTrainer {
    pub learner: QmixLearner,
    pub buffer: ReplayBuffer,
    pub batch_size: usize,
    pub episodes_per_step: usize,
    pub scripted: Vec<Option<Vec<Vec<f64>>>>,
    /// Overrides the learner's epsilon schedule when set.
    pub fixed_epsilon: Option<f64>,
    pub episodes: u64,
}

impl QmixTrainer {
    pub fn new(learner: QmixLearner, capacity: usize, batch_size: usize) -> Self {
        let n = learner.n_agents();
        Self {
            learner,
            buffer: ReplayBuffer::new(capacity),
            batch_size,
            episodes_per_step: 1,
            scripted: vec![None; n],
            fixed_epsilon: None,
            episodes: 0,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.fixed_epsilon
            .unwrap_or_else(|| self.learner.epsilon(self.learner.learner_steps()))
    }

    /// Collects experience and performs one learner step; returns the loss.
    pub fn step<R: Rng + ?Sized>(&mut self, game: &MarkovGame, rng: &mut R) -> Result<f64> {
        let eps = self.epsilon();
        for _ in 0..self.episodes_per_step {
            for t in self.learner.collect_episode(game, eps, &self.scripted, rng)? {
                self.buffer.push(t);
            }
            self.episodes += 1;
        }
        let batch = self.buffer.sample(self.batch_size, rng)?;
        self.learner.td_update(&batch)
    }
}
