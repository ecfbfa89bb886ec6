//! Differentiable inter-agent communication on the signal-relay task, and
//! a RIAL-style baseline where discrete messages are extra Q-learning
//! actions.
//!
//! Messages are broadcast to every other agent with a one-step delay and
//! never reach the environment: `MarkovGame::step` takes only actions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::buffer::{EpisodeTrace, ReplayBuffer};
use crate::envs::{sample_categorical, Action, MarkovGame};
use crate::error::{Error, Result};
use crate::ndiff::{grad_check_with_fault, Activation, AdamState, DenseNet, Fault, Graph, Tensor, Var};
use crate::oracle::argmax;
use crate::qmix::LinearSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DialConfig {
    pub hidden: Vec<usize>,
    /// Width of the recurrent state each cell passes to itself.
    pub state_dim: usize,
    pub message_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Block gradients at the channel (messages still flow forward).
    pub detach_messages: bool,
}

impl Default for DialConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            state_dim: 8,
            message_dim: 1,
            lr: 1e-3,
            batch_size: 32,
            detach_messages: false,
        }
    }
}

/// One agent's step function:
/// `[obs, incoming, state] -> [scores | message | next state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CommAgentCell {
    pub net: DenseNet,
    obs_width: usize,
    incoming_width: usize,
    n_actions: usize,
    message_dim: usize,
    state_dim: usize,
}

pub struct CellOut {
    pub scores: Var,
    pub message: Var,
    pub state: Var,
}

impl CommAgentCell {
    pub fn new<R: Rng + ?Sized>(
        obs_width: usize,
        incoming_width: usize,
        n_actions: usize,
        cfg: &DialConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let input = obs_width + incoming_width + cfg.state_dim;
        let output = n_actions + cfg.message_dim + cfg.state_dim;
        let mut net = DenseNet::mlp(input, &cfg.hidden, output, Activation::Tanh, rng)?;
        net.zero_output_columns(n_actions..n_actions + cfg.message_dim);
        Ok(Self {
            net,
            obs_width,
            incoming_width,
            n_actions,
            message_dim: cfg.message_dim,
            state_dim: cfg.state_dim,
        })
    }

    pub fn message_dim(&self) -> usize {
        self.message_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn forward(&self, g: &mut Graph, bound: &[Var], obs: Var, incoming: Var, state: Var) -> Result<CellOut> {
        let x = g.concat(&[obs, incoming, state])?;
        let y = self.net.forward(g, bound, x)?;
        let (a, m) = (self.n_actions, self.n_actions + self.message_dim);
        let scores = g.slice(y, 0, a)?;
        let raw = g.slice(y, a, m)?;
        let message = g.tanh(raw);
        let raw = g.slice(y, m, m + self.state_dim)?;
        let state = g.tanh(raw);
        Ok(CellOut { scores, message, state })
    }

    /// Zeroes the message-producing output columns.
    pub fn silence(&mut self) {
        self.net.zero_output_columns(self.n_actions..self.n_actions + self.message_dim);
    }
}

/// One batched unroll: the graph spans every step and agent.
pub struct Unroll {
    pub graph: Graph,
    pub bound: Vec<Vec<Var>>,
    pub traces: Vec<EpisodeTrace>,
    /// `obs[t][agent]`, row-major `[batch, obs_width]`.
    pub obs: Vec<Vec<Vec<f64>>>,
    pub scores: Vec<Vec<Var>>,
    pub messages: Vec<Vec<Var>>,
    /// Each agent's incoming-message input `[t][agent]`.
    pub incoming: Vec<Vec<Var>>,
    pub labels: Vec<usize>,
    pub loss: Var,
    pub version: u64,
}

impl Unroll {
    /// Fraction of episodes where the target agent's final greedy choice
    /// matches the label.
    pub fn accuracy(&self) -> f64 {
        let last = self.scores.last().and_then(|s| s.last()).copied().expect("nonempty unroll");
        let k = self.graph.shape(last)[1];
        let vals = self.graph.value(last);
        let hits = self
            .labels
            .iter()
            .enumerate()
            .filter(|&(r, &y)| argmax(&vals[r * k..(r + 1) * k]) == y)
            .count();
        hits as f64 / self.labels.len().max(1) as f64
    }
}

/// Graph construction shared by the live unroll and its replay.
struct Builder<'a> {
    cells: &'a [CommAgentCell],
    detach: bool,
    batch: usize,
    prev_msgs: Option<Vec<Var>>,
    states: Vec<Var>,
}

impl<'a> Builder<'a> {
    fn new(g: &mut Graph, cells: &'a [CommAgentCell], batch: usize, detach: bool) -> Result<Self> {
        let states = cells
            .iter()
            .map(|c| g.constant(&[batch, c.state_dim], vec![0.0; batch * c.state_dim]))
            .collect::<Result<_>>()?;
        Ok(Self {
            cells,
            detach,
            batch,
            prev_msgs: None,
            states,
        })
    }

    /// Runs every cell for one step; returns `(scores, messages, incoming)`.
    fn step(&mut self, g: &mut Graph, bound: &[Vec<Var>], obs: &[Vec<f64>]) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let n = self.cells.len();
        let (mut scores, mut msgs, mut incoming, mut states) = (vec![], vec![], vec![], vec![]);
        for (i, cell) in self.cells.iter().enumerate() {
            let o = g.constant(&[self.batch, cell.obs_width], obs[i].clone())?;
            let inc = match &self.prev_msgs {
                None => g.constant(&[self.batch, cell.incoming_width], vec![0.0; self.batch * cell.incoming_width])?,
                Some(prev) => {
                    let others: Vec<Var> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| if self.detach { g.detach(prev[j]) } else { prev[j] })
                        .collect();
                    g.concat(&others)?
                }
            };
            let out = cell.forward(g, &bound[i], o, inc, self.states[i])?;
            scores.push(out.scores);
            msgs.push(out.message);
            incoming.push(inc);
            states.push(out.state);
        }
        self.states = states;
        self.prev_msgs = Some(msgs.clone());
        Ok((scores, msgs, incoming))
    }
}

fn cross_entropy(g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var> {
    let p = g.softmax(scores);
    let taken = g.select_cols(p, labels)?;
    let lp = g.log(taken);
    let m = g.mean(lp);
    Ok(g.neg(m))
}

/// Reward-maximising action of the last agent in a final-step state, the
/// supervised label for the relay task.
fn label_for(game: &MarkovGame, state: usize) -> Result<usize> {
    let counts = game.action_counts()?;
    let target = game.n_agents() - 1;
    let mut joint = vec![0; counts.len()];
    let mut best = Vec::with_capacity(counts[target]);
    for a in 0..counts[target] {
        joint[target] = a;
        best.push(game.rewards_discrete(state, &joint)?[target]);
    }
    Ok(argmax(&best))
}

fn check_game(game: &MarkovGame) -> Result<()> {
    if !game.is_tabular() || !game.is_discrete() || !game.has_observations() || game.horizon() < 2 || game.n_agents() < 2 {
        return Err(Error::InvalidGame(
            "communication tasks need a discrete tabular game with observations and horizon >= 2".into(),
        ));
    }
    Ok(())
}

pub struct DialLearner {
    pub cells: Vec<CommAgentCell>,
    cfg: DialConfig,
    adam: AdamState,
    version: u64,
}

impl DialLearner {
    pub fn new<R: Rng + ?Sized>(game: &MarkovGame, cfg: DialConfig, rng: &mut R) -> Result<Self> {
        check_game(game)?;
        let n = game.n_agents();
        let counts = game.action_counts()?;
        let cells = (0..n)
            .map(|i| CommAgentCell::new(game.observation_width(i), (n - 1) * cfg.message_dim, counts[i], &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamState::new(cfg.lr, cells.iter().flat_map(|c| c.net.params()));
        Ok(Self {
            cells,
            cfg,
            adam,
            version: 0,
        })
    }

    pub fn config(&self) -> &DialConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut DialConfig {
        &mut self.cfg
    }

    /// Parameter version, bumped by every update.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Plays `batch` episodes, sampling actions from the softmax of each
    /// cell's scores (`greedy` takes the argmax instead), and returns the
    /// traces together with the graph and the final-step cross-entropy.
    pub fn unroll<R: Rng + ?Sized>(&self, game: &MarkovGame, batch: usize, greedy: bool, rng: &mut R) -> Result<Unroll> {
        let n = self.cells.len();
        let mut g = Graph::new();
        let bound: Vec<Vec<Var>> = self.cells.iter().map(|c| c.net.bind(&mut g)).collect();
        let mut b = Builder::new(&mut g, &self.cells, batch, self.cfg.detach_messages)?;
        let mut envs: Vec<_> = (0..batch).map(|_| game.reset(rng)).collect();
        let mut traces = vec![EpisodeTrace::default(); batch];
        let (mut all_obs, mut all_scores, mut all_msgs, mut all_inc) = (vec![], vec![], vec![], vec![]);
        let mut last_states = vec![0; batch];
        for _t in 0..game.horizon() {
            let obs: Vec<Vec<f64>> = (0..n)
                .map(|i| envs.iter().flat_map(|e| game.observe(e.state, i)).collect())
                .collect();
            let (scores, msgs, inc) = b.step(&mut g, &bound, &obs)?;
            for (r, e) in envs.iter_mut().enumerate() {
                last_states[r] = e.state;
                let mut acts = Vec::with_capacity(n);
                for i in 0..n {
                    let k = self.cells[i].n_actions;
                    let row = &g.value(scores[i])[r * k..(r + 1) * k];
                    acts.push(if greedy { argmax(row) } else { sample_categorical(&softmax(row), rng.random()) });
                }
                let actions: Vec<Action> = acts.iter().map(|&a| Action::Discrete(a)).collect();
                let out = game.step(e, &actions, rng)?;
                let tr = &mut traces[r];
                tr.observations.push((0..n).map(|i| game.observe(e.state, i)).collect());
                tr.actions.push(acts);
                tr.messages.push(
                    (0..n)
                        .map(|i| {
                            let d = self.cells[i].message_dim;
                            g.value(msgs[i])[r * d..(r + 1) * d].to_vec()
                        })
                        .collect(),
                );
                tr.rewards.push(out.rewards);
                tr.dones.push(out.done);
                *e = out.next;
            }
            all_obs.push(obs);
            all_scores.push(scores);
            all_msgs.push(msgs);
            all_inc.push(inc);
        }
        let labels = last_states.iter().map(|&s| label_for(game, s)).collect::<Result<Vec<_>>>()?;
        let last = all_scores.last().expect("horizon >= 2")[n - 1];
        let loss = cross_entropy(&mut g, last, &labels)?;
        Ok(Unroll {
            graph: g,
            bound,
            traces,
            obs: all_obs,
            scores: all_scores,
            messages: all_msgs,
            incoming: all_inc,
            labels,
            loss,
            version: self.version,
        })
    }

    /// Rebuilds the loss of a recorded unroll on externally bound
    /// parameters (one `Var` per tensor, cells in order).
    pub fn replay_loss(&self, g: &mut Graph, params: &[Var], obs: &[Vec<Vec<f64>>], labels: &[usize]) -> Result<Var> {
        let mut bound = Vec::with_capacity(self.cells.len());
        let mut at = 0;
        for c in &self.cells {
            let k = c.net.params().len();
            bound.push(params[at..at + k].to_vec());
            at += k;
        }
        let mut b = Builder::new(g, &self.cells, labels.len(), self.cfg.detach_messages)?;
        let mut last = None;
        for o in obs {
            let (scores, _, _) = b.step(g, &bound, o)?;
            last = scores.last().copied();
        }
        cross_entropy(g, last.expect("nonempty unroll"), labels)
    }

    /// Central-difference check of the unrolled loss over every parameter
    /// of every cell.
    pub fn grad_check(&self, unroll: &Unroll, h: f64, fault: Option<Fault>) -> Result<f64> {
        let mut params: Vec<Tensor> = self.cells.iter().flat_map(|c| c.net.params().iter().cloned()).collect();
        grad_check_with_fault(&mut params, h, fault, |g, vars| self.replay_loss(g, vars, &unroll.obs, &unroll.labels))
    }

    /// Backpropagates the unroll's loss through time and the channel and
    /// takes one Adam step over all cells.
    pub fn dial_update(&mut self, mut unroll: Unroll) -> Result<f64> {
        if unroll.version != self.version {
            return Err(Error::StaleTrace {
                trace: unroll.version,
                current: self.version,
            });
        }
        let loss = unroll.graph.item(unroll.loss);
        unroll.graph.backward(unroll.loss)?;
        for (c, b) in self.cells.iter_mut().zip(&unroll.bound) {
            c.net.accumulate_grads(&unroll.graph, b);
        }
        self.adam.step(self.cells.iter_mut().flat_map(|c| c.net.params_mut().iter_mut()))?;
        self.version += 1;
        Ok(loss)
    }

    pub fn train_step<R: Rng + ?Sized>(&mut self, game: &MarkovGame, rng: &mut R) -> Result<f64> {
        let u = self.unroll(game, self.cfg.batch_size, false, rng)?;
        self.dial_update(u)
    }

    /// Greedy accuracy of the target agent over `episodes` episodes.
    pub fn evaluate<R: Rng + ?Sized>(&self, game: &MarkovGame, episodes: usize, rng: &mut R) -> Result<f64> {
        Ok(self.unroll(game, episodes, true, rng)?.accuracy())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "cells": self.cells.iter().map(|c| c.net.to_named()).collect::<Vec<_>>(),
            "config": self.cfg,
        })
    }

    pub fn load_json(&mut self, v: &Value) -> Result<()> {
        let cells = v["cells"]
            .as_array()
            .filter(|a| a.len() == self.cells.len())
            .ok_or_else(|| Error::MalformedCheckpoint("cells".into()))?;
        for (c, named) in self.cells.iter_mut().zip(cells) {
            c.net.load_named(&serde_json::from_value(named.clone())?)?;
        }
        Ok(())
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

// ---------------------------------------------------------------------------
// RIAL baseline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RialConfig {
    pub hidden: Vec<usize>,
    pub alphabet: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epsilon: LinearSchedule,
}

impl Default for RialConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            alphabet: 2,
            gamma: 1.0,
            lr: 1e-3,
            batch_size: 32,
            buffer_capacity: 5000,
            epsilon: LinearSchedule {
                start: 1.0,
                end: 0.05,
                steps: 10_000,
            },
        }
    }
}

/// Shared trunk with an action head and a message head.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredQHead {
    pub net: DenseNet,
    n_actions: usize,
    n_messages: usize,
}

impl FactoredQHead {
    pub fn new<R: Rng + ?Sized>(input: usize, n_actions: usize, n_messages: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: DenseNet::mlp(input, hidden, n_actions + n_messages, Activation::Relu, rng)?,
            n_actions,
            n_messages,
        })
    }

    pub fn head_widths(&self) -> (usize, usize) {
        (self.n_actions, self.n_messages)
    }

    /// `(action utilities, message utilities)`.
    pub fn utilities(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let y = self.net.predict(x)?;
        Ok((y[..self.n_actions].to_vec(), y[self.n_actions..].to_vec()))
    }

    pub fn greedy(&self, x: &[f64]) -> Result<(usize, usize)> {
        let (qa, qm) = self.utilities(x)?;
        Ok((argmax(&qa), argmax(&qm)))
    }

    /// Independent epsilon-greedy choice on each head.
    pub fn act<R: Rng + ?Sized>(&self, x: &[f64], eps_action: f64, eps_message: f64, rng: &mut R) -> Result<(usize, usize)> {
        let (a, m) = self.greedy(x)?;
        let a = if rng.random::<f64>() < eps_action { rng.random_range(0..self.n_actions) } else { a };
        let m = if rng.random::<f64>() < eps_message { rng.random_range(0..self.n_messages) } else { m };
        Ok((a, m))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RialTransition {
    pub agent: usize,
    pub x: Vec<f64>,
    pub action: usize,
    pub message: usize,
    pub reward: f64,
    /// `None` when the episode ended.
    pub x_next: Option<Vec<f64>>,
}

pub struct RialLearner {
    pub heads: Vec<FactoredQHead>,
    adams: Vec<AdamState>,
    pub buffer: ReplayBuffer<RialTransition>,
    cfg: RialConfig,
    steps: u64,
    obs_widths: Vec<usize>,
}

impl RialLearner {
    pub fn new<R: Rng + ?Sized>(game: &MarkovGame, cfg: RialConfig, rng: &mut R) -> Result<Self> {
        check_game(game)?;
        let n = game.n_agents();
        let counts = game.action_counts()?;
        let widths: Vec<usize> = (0..n).map(|i| game.observation_width(i)).collect();
        let heads = (0..n)
            .map(|i| FactoredQHead::new(2 * widths[i] + cfg.alphabet * n, counts[i], cfg.alphabet, &cfg.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let adams = heads.iter().map(|h| AdamState::new(cfg.lr, h.net.params())).collect();
        Ok(Self {
            heads,
            adams,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            steps: 0,
            obs_widths: widths,
        })
    }

    pub fn config(&self) -> &RialConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon.value(self.steps)
    }

    /// Agent input: current observation, own previous observation, own
    /// previous message and the others' previous messages (one-hot, zero
    /// at the first step).
    fn input(&self, game: &MarkovGame, state: usize, agent: usize, prev: Option<(&[usize], usize)>) -> Vec<f64> {
        let k = self.cfg.alphabet;
        let mut x = game.observe(state, agent);
        match prev {
            Some((msgs, prev_state)) => {
                x.extend(game.observe(prev_state, agent));
                let mut own = vec![0.0; k];
                own[msgs[agent]] = 1.0;
                x.extend(own);
                for (j, &m) in msgs.iter().enumerate() {
                    if j != agent {
                        let mut oh = vec![0.0; k];
                        oh[m] = 1.0;
                        x.extend(oh);
                    }
                }
            }
            None => x.extend(vec![0.0; self.obs_widths[agent] + k * game.n_agents()]),
        }
        x
    }

    /// Plays one episode; returns it as a trace (messages as one-element
    /// vectors holding the symbol) plus per-agent transitions.
    fn play<R: Rng + ?Sized>(&self, game: &MarkovGame, eps: f64, rng: &mut R) -> Result<(EpisodeTrace, Vec<RialTransition>)> {
        let n = game.n_agents();
        let mut st = game.reset(rng);
        let mut prev: Option<(Vec<usize>, usize)> = None;
        let mut trace = EpisodeTrace::default();
        let mut pending: Vec<RialTransition> = Vec::new();
        let mut out = Vec::new();
        loop {
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|i| self.input(game, st.state, i, prev.as_ref().map(|(m, s)| (m.as_slice(), *s))))
                .collect();
            for (p, x) in pending.drain(..).zip(&xs) {
                out.push(RialTransition {
                    x_next: Some(x.clone()),
                    ..p
                });
            }
            let mut acts = Vec::with_capacity(n);
            let mut msgs = Vec::with_capacity(n);
            for (i, x) in xs.iter().enumerate() {
                let (a, m) = self.heads[i].act(x, eps, eps, rng)?;
                acts.push(a);
                msgs.push(m);
            }
            let actions: Vec<Action> = acts.iter().map(|&a| Action::Discrete(a)).collect();
            let step = game.step(&st, &actions, rng)?;
            trace.observations.push((0..n).map(|i| game.observe(st.state, i)).collect());
            trace.actions.push(acts.clone());
            trace.messages.push(msgs.iter().map(|&m| vec![m as f64]).collect());
            trace.rewards.push(step.rewards.clone());
            trace.dones.push(step.done);
            for i in 0..n {
                pending.push(RialTransition {
                    agent: i,
                    x: xs[i].clone(),
                    action: acts[i],
                    message: msgs[i],
                    reward: step.rewards[i],
                    x_next: None,
                });
            }
            if step.done {
                out.append(&mut pending);
                return Ok((trace, out));
            }
            prev = Some((msgs, st.state));
            st = step.next;
        }
    }

    /// One episode into the buffer, then one TD update per agent on a
    /// sampled minibatch. The prediction is `Qa(a) + Qm(m)` and the target
    /// `r + gamma * (max Qa' + max Qm')`.
    pub fn rial_baseline_step<R: Rng + ?Sized>(&mut self, game: &MarkovGame, rng: &mut R) -> Result<f64> {
        let eps = self.epsilon();
        let (_, transitions) = self.play(game, eps, rng)?;
        for t in transitions {
            self.buffer.push(t);
        }
        let batch = self.buffer.sample(self.cfg.batch_size, rng)?;
        let mut total = 0.0;
        for agent in 0..self.heads.len() {
            let rows: Vec<&RialTransition> = batch.iter().filter(|t| t.agent == agent).collect();
            if rows.is_empty() {
                continue;
            }
            let head = &self.heads[agent];
            let (na, nm) = head.head_widths();
            let mut targets = Vec::with_capacity(rows.len());
            for t in &rows {
                let boot = match &t.x_next {
                    Some(x) => {
                        let (qa, qm) = head.utilities(x)?;
                        qa[argmax(&qa)] + qm[argmax(&qm)]
                    }
                    None => 0.0,
                };
                targets.push(t.reward + self.cfg.gamma * boot);
            }
            let width = head.net.input_width();
            let mut g = Graph::new();
            let x = g.constant(&[rows.len(), width], rows.iter().flat_map(|t| t.x.iter().copied()).collect())?;
            let bound = head.net.bind(&mut g);
            let y = head.net.forward(&mut g, &bound, x)?;
            let qa = g.slice(y, 0, na)?;
            let qm = g.slice(y, na, na + nm)?;
            let qa = g.select_cols(qa, &rows.iter().map(|t| t.action).collect::<Vec<_>>())?;
            let qm = g.select_cols(qm, &rows.iter().map(|t| t.message).collect::<Vec<_>>())?;
            let pred = g.add(qa, qm)?;
            let tgt = g.constant(&[rows.len(), 1], targets)?;
            let d = g.sub(pred, tgt)?;
            let sq = g.square(d);
            let loss = g.mean(sq);
            total += g.item(loss);
            g.backward(loss)?;
            let head = &mut self.heads[agent];
            head.net.accumulate_grads(&g, &bound);
            self.adams[agent].step(head.net.params_mut().iter_mut())?;
        }
        self.steps += 1;
        Ok(total)
    }

    /// Greedy success rate: fraction of episodes whose final shared reward
    /// is positive.
    pub fn evaluate<R: Rng + ?Sized>(&self, game: &MarkovGame, episodes: usize, rng: &mut R) -> Result<f64> {
        let mut hits = 0;
        for _ in 0..episodes {
            let (trace, _) = self.play(game, 0.0, rng)?;
            if trace.rewards.last().is_some_and(|r| r[game.n_agents() - 1] > 0.0) {
                hits += 1;
            }
        }
        Ok(hits as f64 / episodes.max(1) as f64)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "heads": self.heads.iter().map(|h| h.net.to_named()).collect::<Vec<_>>(),
            "config": self.cfg,
        })
    }

    pub fn load_json(&mut self, v: &Value) -> Result<()> {
        let heads = v["heads"]
            .as_array()
            .filter(|a| a.len() == self.heads.len())
            .ok_or_else(|| Error::MalformedCheckpoint("heads".into()))?;
        for (h, named) in self.heads.iter_mut().zip(heads) {
            h.net.load_named(&serde_json::from_value(named.clone())?)?;
        }
        Ok(())
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

    fn e1() -> MarkovGame {
        envs::signal_relay().unwrap()
    }

    fn message_row(u: &Unroll, t: usize, agent: usize) -> Vec<f64> {
        u.graph.value(u.messages[t][agent]).to_vec()
    }

    #[test]
    fn routing_delivers_previous_messages() {
        let g = e1();
        let mut l = DialLearner::new(&g, DialConfig::default(), &mut rng(0)).unwrap();
        // Give agent 0 a nonzero message.
        let last = l.cells[0].net.params().len() - 1;
        l.cells[0].net.params_mut()[last].value_mut()[2] = 0.7;
        let u = l.unroll(&g, 4, false, &mut rng(1)).unwrap();
        let sent = message_row(&u, 0, 0);
        assert!(sent.iter().all(|&m| (m - 0.7f64.tanh()).abs() < 1e-12));
        assert_eq!(u.graph.value(u.incoming[1][1]), sent.as_slice());
        assert!(u.graph.value(u.incoming[0][1]).iter().all(|&x| x == 0.0));
        for tr in &u.traces {
            assert!(tr.is_consistent());
            assert_eq!(tr.len(), 2);
        }
    }

    #[test]
    fn silenced_sender_gives_zero_slots() {
        let g = e1();
        let mut l = DialLearner::new(&g, DialConfig::default(), &mut rng(2)).unwrap();
        l.cells[0].silence();
        let u = l.unroll(&g, 8, false, &mut rng(3)).unwrap();
        assert!(u.graph.value(u.incoming[1][1]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn messages_are_bounded_and_state_width_constant() {
        let g = e1();
        let mut l = DialLearner::new(&g, DialConfig::default(), &mut rng(4)).unwrap();
        for t in l.cells[0].net.params_mut() {
            for x in t.value_mut() {
                *x *= 50.0;
            }
        }
        let u = l.unroll(&g, 16, false, &mut rng(5)).unwrap();
        for t in 0..2 {
            assert!(message_row(&u, t, 0).iter().all(|m| m.abs() <= 1.0));
        }
    }

    #[test]
    fn channel_gradient_reaches_sender() {
        let g = e1();
        let l = DialLearner::new(&g, DialConfig::default(), &mut rng(6)).unwrap();
        let mut u = l.unroll(&g, 32, false, &mut rng(7)).unwrap();
        u.graph.backward(u.loss).unwrap();
        let out_w = u.bound[0][u.bound[0].len() - 2];
        let grad = u.graph.grad(out_w);
        let k = l.cells[0].n_actions();
        let cols = l.cells[0].net.output_width();
        let msg_grad: f64 = grad.iter().enumerate().filter(|(i, _)| i % cols == k).map(|(_, v)| v.abs()).sum();
        assert!(msg_grad > 0.0);

        let cfg = DialConfig {
            detach_messages: true,
            ..DialConfig::default()
        };
        let l = DialLearner::new(&g, cfg, &mut rng(6)).unwrap();
        let mut u = l.unroll(&g, 32, false, &mut rng(7)).unwrap();
        u.graph.backward(u.loss).unwrap();
        let grad = u.graph.grad(u.bound[0][u.bound[0].len() - 2]);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unrolled_gradients_match_differences() {
        let g = e1();
        let cfg = DialConfig {
            hidden: vec![6],
            state_dim: 3,
            ..DialConfig::default()
        };
        let mut l = DialLearner::new(&g, cfg, &mut rng(8)).unwrap();
        // Nonzero message weights so every path is exercised.
        let mut r = rng(9);
        for c in &mut l.cells {
            let last = c.net.params().len() - 2;
            for x in c.net.params_mut()[last].value_mut() {
                if *x == 0.0 {
                    *x = r.random_range(-0.5..0.5);
                }
            }
        }
        let u = l.unroll(&g, 6, false, &mut rng(10)).unwrap();
        let err = l.grad_check(&u, 1e-5, None).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn stale_unroll_is_rejected() {
        let g = e1();
        let mut l = DialLearner::new(&g, DialConfig::default(), &mut rng(11)).unwrap();
        let old = l.unroll(&g, 4, false, &mut rng(12)).unwrap();
        l.train_step(&g, &mut rng(13)).unwrap();
        assert!(matches!(l.dial_update(old), Err(Error::StaleTrace { trace: 0, current: 1 })));
    }

    #[test]
    fn messages_do_not_touch_env() {
        let g = e1();
        let mut l = DialLearner::new(&g, DialConfig::default(), &mut rng(14)).unwrap();
        let a = l.unroll(&g, 16, false, &mut rng(15)).unwrap();
        for c in &mut l.cells {
            let (last, k) = (c.net.params().len() - 1, c.n_actions());
            c.net.params_mut()[last].value_mut()[k] = 3.0;
        }
        let b = l.unroll(&g, 16, false, &mut rng(15)).unwrap();
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(x.observations, y.observations);
            assert_eq!(x.dones, y.dones);
        }
        // Rewards follow from the bit and the actions alone.
        for u in [&a, &b] {
            for (tr, &bit) in u.traces.iter().zip(&u.labels) {
                let want = if tr.actions[1][1] == bit { 1.0 } else { 0.0 };
                assert_eq!(tr.rewards[1], vec![want, want]);
                assert_eq!(tr.rewards[0], vec![0.0, 0.0]);
            }
        }
    }

    #[test]
    fn memorizes_single_bit() {
        let g = e1().with_initial(vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut l = DialLearner::new(&g, DialConfig::default(), &mut rng(16)).unwrap();
        let u = l.unroll(&g, 32, false, &mut rng(17)).unwrap();
        let (obs, labels) = (u.obs.clone(), u.labels.clone());
        assert!(labels.iter().all(|&y| y == 1));
        drop(u);
        for _ in 0..500 {
            let u = l.unroll(&g, 32, false, &mut rng(17)).unwrap();
            assert_eq!(u.obs, obs);
            l.dial_update(u).unwrap();
        }
        assert_eq!(l.unroll(&g, 32, true, &mut rng(17)).unwrap().accuracy(), 1.0);
    }

    #[test]
    fn factored_greedy_matches_joint_argmax() {
        let mut r = rng(18);
        for _ in 0..50 {
            let qa: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            let qm: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            let joint: Vec<f64> = (0..4).map(|j| qa[j / 2] + qm[j % 2]).collect();
            let best = argmax(&joint);
            assert_eq!((argmax(&qa), argmax(&qm)), (best / 2, best % 2));
        }
        let g = e1();
        let l = RialLearner::new(&g, RialConfig::default(), &mut rng(19)).unwrap();
        assert_eq!(l.heads[0].head_widths(), (2, 2));
    }

    #[test]
    fn full_exploration_is_uniform_over_pairs() {
        let g = e1();
        let l = RialLearner::new(&g, RialConfig::default(), &mut rng(20)).unwrap();
        let x = vec![0.0; l.heads[0].net.input_width()];
        let mut counts = [0usize; 4];
        let mut r = rng(21);
        for _ in 0..10_000 {
            let (a, m) = l.heads[0].act(&x, 1.0, 1.0, &mut r).unwrap();
            counts[a * 2 + m] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        // 99th percentile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 11.345, "{counts:?} {chi2}");
    }

    #[test]
    fn rial_transitions_chain_correctly() {
        let g = e1();
        let l = RialLearner::new(&g, RialConfig::default(), &mut rng(22)).unwrap();
        let (trace, ts) = l.play(&g, 1.0, &mut rng(23)).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(ts.len(), 4);
        assert!(ts[..2].iter().all(|t| t.x_next.is_some()));
        assert!(ts[2..].iter().all(|t| t.x_next.is_none()));
        // Agent 1 at t=1 sees agent 0's t=0 symbol.
        let x = ts[1].x_next.as_ref().unwrap();
        let w = g.observation_width(1);
        let k = 2;
        let other = &x[2 * w + k..2 * w + 2 * k];
        assert_eq!(other[trace.messages[0][0][0] as usize], 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = e1();
        let a = DialLearner::new(&g, DialConfig::default(), &mut rng(24)).unwrap();
        let mut b = DialLearner::new(&g, DialConfig::default(), &mut rng(25)).unwrap();
        b.load_json(&a.to_json()).unwrap();
        assert_eq!(a.cells, b.cells);
    }
}
