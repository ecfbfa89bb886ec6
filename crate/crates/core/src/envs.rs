//! Markov games `p(s' | s, a)`, `r^i(s, a)` with per-agent action spaces,
//! the built-in fixtures, a JSON game-file format, and the reduction of a
//! game with stationary opponents to a single-agent MDP.
//!
//! Joint actions are enumerated lexicographically with agent 0 as the most
//! significant digit. Tabular arrays are flattened row-major in the order
//! `[state][joint][agent]` (rewards) and `[state][joint][next_state]`
//! (transitions).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Box1D { lo: f64, hi: f64 },
}

impl ActionSpace {
    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }

    /// Number of discrete actions, or `None` for a box.
    pub fn n(&self) -> Option<usize> {
        match self {
            ActionSpace::Discrete(k) => Some(*k),
            ActionSpace::Box1D { .. } => None,
        }
    }

    /// Width of the action when fed to a network (one-hot for discrete).
    pub fn encoded_width(&self) -> usize {
        match self {
            ActionSpace::Discrete(k) => *k,
            ActionSpace::Box1D { .. } => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(f64),
}

impl Action {
    pub fn index(self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(i),
            Action::Continuous(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Action::Discrete(i) => i as f64,
            Action::Continuous(x) => x,
        }
    }

    /// Network encoding under `space`: one-hot or the raw scalar.
    pub fn encode(self, space: &ActionSpace) -> Vec<f64> {
        match (self, space) {
            (Action::Discrete(i), ActionSpace::Discrete(k)) => {
                let mut v = vec![0.0; *k];
                v[i] = 1.0;
                v
            }
            (a, _) => vec![a.value()],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameFlags {
    #[serde(default)]
    pub cooperative: bool,
    #[serde(default)]
    pub zero_sum: bool,
}

/// Reward functions that have no table form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedForm {
    /// Shared reward `-(a1 + a2 - 1)^2`, single state.
    CoopCts,
}

#[derive(Clone, Debug, PartialEq)]
enum Dynamics {
    Tabular {
        rewards: Vec<f64>,
        transition: Vec<f64>,
    },
    ClosedForm(ClosedForm),
}

/// One CTDE experience record.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransition {
    pub s: Vec<f64>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub s_next: Vec<f64>,
    pub done: bool,
    /// Probability each agent's behavior policy gave the taken action.
    pub behavior_probs: Option<Vec<f64>>,
}

/// Episode position, owned by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub state: usize,
    pub t: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// Immutable N-agent environment.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovGame {
    name: String,
    n_agents: usize,
    n_states: usize,
    action_spaces: Vec<ActionSpace>,
    dynamics: Dynamics,
    horizon: usize,
    terminal: Vec<bool>,
    initial: Vec<f64>,
    observations: Option<Vec<Vec<Vec<f64>>>>,
    flags: GameFlags,
    gamma: f64,
}

/// Tabular single-agent (or joint-action) MDP. Arrays are flattened as
/// `reward[s * A + a]` and `transition[(s * A + a) * S + s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub reward: Vec<f64>,
    pub transition: Vec<f64>,
    pub terminal: Vec<bool>,
    pub horizon: usize,
}

impl TabularMdp {
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }
}

/// The MDP that agent `me` faces when all other agents follow fixed
/// stationary policies.
#[derive(Clone, Debug, PartialEq)]
pub struct InducedMdp {
    pub base: MarkovGame,
    pub me: usize,
    /// `opponents[j][s][a]` for every agent except `me`, in agent order.
    pub opponents: Vec<Vec<Vec<f64>>>,
    pub mdp: TabularMdp,
}

fn product(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl MarkovGame {
    /// Builds and validates a tabular game.
    #[allow(clippy::too_many_arguments)]
    pub fn tabular(
        name: impl Into<String>,
        actions: Vec<usize>,
        n_states: usize,
        rewards: Vec<f64>,
        transition: Vec<f64>,
        flags: GameFlags,
        horizon: usize,
    ) -> Result<Self> {
        let n_agents = actions.len();
        let mut initial = vec![0.0; n_states];
        if n_states > 0 {
            initial[0] = 1.0;
        }
        let game = Self {
            name: name.into(),
            n_agents,
            n_states,
            action_spaces: actions.into_iter().map(ActionSpace::Discrete).collect(),
            dynamics: Dynamics::Tabular {
                rewards,
                transition,
            },
            horizon,
            terminal: vec![false; n_states],
            initial,
            observations: None,
            flags,
            gamma: 1.0,
        };
        game.validate()?;
        Ok(game)
    }

    /// Single-state, horizon-1 matrix game from per-agent payoff tables
    /// `payoffs[agent][joint]`.
    pub fn matrix(
        name: impl Into<String>,
        actions: Vec<usize>,
        payoffs: &[Vec<f64>],
        flags: GameFlags,
    ) -> Result<Self> {
        let joint = product(&actions);
        if payoffs.len() != actions.len() || payoffs.iter().any(|p| p.len() != joint) {
            return Err(Error::InvalidGame("payoff table shape".into()));
        }
        let mut rewards = Vec::with_capacity(joint * actions.len());
        for j in 0..joint {
            for p in payoffs {
                rewards.push(p[j]);
            }
        }
        Self::tabular(name, actions, 1, rewards, vec![1.0; joint], flags, 1)
    }

    pub fn with_terminal(mut self, terminal: Vec<bool>) -> Result<Self> {
        self.terminal = terminal;
        self.validate()?;
        Ok(self)
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        self.initial = initial;
        self.validate()?;
        Ok(self)
    }

    pub fn with_observations(mut self, obs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        self.observations = Some(obs);
        self.validate()?;
        Ok(self)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    fn closed_form(name: &str, form: ClosedForm, spaces: Vec<ActionSpace>, flags: GameFlags) -> Self {
        Self {
            name: name.into(),
            n_agents: spaces.len(),
            n_states: 1,
            action_spaces: spaces,
            dynamics: Dynamics::ClosedForm(form),
            horizon: 1,
            terminal: vec![false],
            initial: vec![1.0],
            observations: None,
            flags,
            gamma: 1.0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n_agents(&self) -> usize {
        self.n_agents
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn action_spaces(&self) -> &[ActionSpace] {
        &self.action_spaces
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn flags(&self) -> GameFlags {
        self.flags
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }
    pub fn is_discrete(&self) -> bool {
        self.action_spaces.iter().all(ActionSpace::is_discrete)
    }
    pub fn is_tabular(&self) -> bool {
        matches!(self.dynamics, Dynamics::Tabular { .. })
    }
    pub fn has_observations(&self) -> bool {
        self.observations.is_some()
    }

    /// Per-agent action counts; `NonDiscrete` for any box space.
    pub fn action_counts(&self) -> Result<Vec<usize>> {
        self.action_spaces
            .iter()
            .map(|s| s.n().ok_or(Error::NonDiscrete))
            .collect()
    }

    pub fn n_joint_actions(&self) -> Result<usize> {
        Ok(product(&self.action_counts()?))
    }

    /// Lexicographic joint index of a discrete joint action.
    pub fn joint_index(&self, actions: &[usize]) -> Result<usize> {
        let counts = self.action_counts()?;
        if actions.len() != counts.len() {
            return Err(Error::InvalidAction {
                agent: actions.len(),
                detail: format!("expected {} actions", counts.len()),
            });
        }
        let mut idx = 0;
        for (agent, (&a, &k)) in actions.iter().zip(&counts).enumerate() {
            if a >= k {
                return Err(Error::InvalidAction {
                    agent,
                    detail: format!("action {a} out of 0..{k}"),
                });
            }
            idx = idx * k + a;
        }
        Ok(idx)
    }

    /// Inverse of [`MarkovGame::joint_index`].
    pub fn joint_from_index(&self, mut idx: usize) -> Result<Vec<usize>> {
        let counts = self.action_counts()?;
        let mut out = vec![0; counts.len()];
        for i in (0..counts.len()).rev() {
            out[i] = idx % counts[i];
            idx /= counts[i];
        }
        Ok(out)
    }

    /// Full product of discrete action sets in lexicographic order.
    pub fn enumerate_joint_actions(&self) -> Result<Vec<Vec<usize>>> {
        let counts = self.action_counts()?;
        Ok(enumerate_product(&counts))
    }

    /// Reward vector for a discrete joint action.
    pub fn rewards_discrete(&self, state: usize, actions: &[usize]) -> Result<Vec<f64>> {
        let j = self.joint_index(actions)?;
        match &self.dynamics {
            Dynamics::Tabular { rewards, .. } => {
                let base = (state * self.n_joint_actions()? + j) * self.n_agents;
                Ok(rewards[base..base + self.n_agents].to_vec())
            }
            Dynamics::ClosedForm(_) => Err(Error::NonDiscrete),
        }
    }

    /// Reward vector `(r^1, ..., r^N)` for any valid joint action.
    pub fn rewards(&self, state: usize, actions: &[Action]) -> Result<Vec<f64>> {
        self.check_actions(actions)?;
        match &self.dynamics {
            Dynamics::Tabular { .. } => {
                let idx: Vec<usize> = actions.iter().map(|a| a.index().unwrap()).collect();
                self.rewards_discrete(state, &idx)
            }
            Dynamics::ClosedForm(ClosedForm::CoopCts) => {
                let s: f64 = actions.iter().map(|a| a.value()).sum();
                let r = -(s - 1.0).powi(2);
                Ok(vec![r; self.n_agents])
            }
        }
    }

    /// Next-state distribution for a discrete joint action.
    pub fn transition_row(&self, state: usize, actions: &[usize]) -> Result<&[f64]> {
        let j = self.joint_index(actions)?;
        match &self.dynamics {
            Dynamics::Tabular { transition, .. } => {
                let base = (state * self.n_joint_actions()? + j) * self.n_states;
                Ok(&transition[base..base + self.n_states])
            }
            Dynamics::ClosedForm(_) => Err(Error::NonDiscrete),
        }
    }

    fn check_actions(&self, actions: &[Action]) -> Result<()> {
        if actions.len() != self.n_agents {
            return Err(Error::InvalidAction {
                agent: actions.len(),
                detail: format!("expected {} actions", self.n_agents),
            });
        }
        for (agent, (a, space)) in actions.iter().zip(&self.action_spaces).enumerate() {
            let ok = match (a, space) {
                (Action::Discrete(i), ActionSpace::Discrete(k)) => i < k,
                (Action::Continuous(x), ActionSpace::Box1D { lo, hi }) => {
                    x.is_finite() && *x >= *lo && *x <= *hi
                }
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidAction {
                    agent,
                    detail: format!("{a:?} not in {space:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let state = sample_categorical(&self.initial, rng.random());
        EnvState {
            state,
            t: 0,
            done: false,
        }
    }

    /// Samples `s'`, returns rewards, and ends the episode on a terminal
    /// state or when the horizon is reached.
    pub fn step<R: Rng + ?Sized>(
        &self,
        st: &EnvState,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if st.done || self.terminal[st.state] {
            return Err(Error::SteppedTerminal);
        }
        let rewards = self.rewards(st.state, actions)?;
        let next_state = match &self.dynamics {
            Dynamics::Tabular { .. } => {
                let idx: Vec<usize> = actions.iter().map(|a| a.index().unwrap()).collect();
                sample_categorical(self.transition_row(st.state, &idx)?, rng.random())
            }
            Dynamics::ClosedForm(_) => st.state,
        };
        let t = st.t + 1;
        let done = self.terminal[next_state] || t >= self.horizon;
        Ok(StepOutcome {
            next: EnvState {
                state: next_state,
                t,
                done,
            },
            rewards,
            done,
        })
    }

    /// One-hot state encoding.
    pub fn encode_state(&self, state: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[state] = 1.0;
        v
    }

    pub fn state_width(&self) -> usize {
        self.n_states
    }

    /// Agent-specific observation when the game defines one, else the
    /// full state encoding.
    pub fn observe(&self, state: usize, agent: usize) -> Vec<f64> {
        match &self.observations {
            Some(obs) => obs[state][agent].clone(),
            None => self.encode_state(state),
        }
    }

    pub fn observation_width(&self, agent: usize) -> usize {
        match &self.observations {
            Some(obs) => obs[0][agent].len(),
            None => self.n_states,
        }
    }

    /// Seat-swap symmetry for 2-player games: `r^1(a, b) = r^2(b, a)` in
    /// every state.
    pub fn is_seat_symmetric(&self) -> bool {
        let Ok(counts) = self.action_counts() else {
            return false;
        };
        if counts.len() != 2 || counts[0] != counts[1] {
            return false;
        }
        for s in 0..self.n_states {
            for a in 0..counts[0] {
                for b in 0..counts[1] {
                    let (Ok(ab), Ok(ba)) = (
                        self.rewards_discrete(s, &[a, b]),
                        self.rewards_discrete(s, &[b, a]),
                    ) else {
                        return false;
                    };
                    if (ab[0] - ba[1]).abs() > ROW_TOL {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGame(m));
        if self.n_agents == 0 || self.n_states == 0 {
            return bad("need at least one agent and one state".into());
        }
        if self.terminal.len() != self.n_states || self.initial.len() != self.n_states {
            return bad("terminal/initial length must equal number of states".into());
        }
        if (self.initial.iter().sum::<f64>() - 1.0).abs() > ROW_TOL
            || self.initial.iter().any(|&p| p < 0.0)
        {
            return bad("initial distribution must sum to 1".into());
        }
        if let Some(obs) = &self.observations {
            if obs.len() != self.n_states || obs.iter().any(|o| o.len() != self.n_agents) {
                return bad("observations must be indexed [state][agent]".into());
            }
            for agent in 0..self.n_agents {
                let w = obs[0][agent].len();
                if obs.iter().any(|o| o[agent].len() != w) {
                    return bad(format!("observation width varies for agent {agent}"));
                }
            }
        }
        let Dynamics::Tabular {
            rewards,
            transition,
        } = &self.dynamics
        else {
            return Ok(());
        };
        let joint = self.n_joint_actions()?;
        if rewards.len() != self.n_states * joint * self.n_agents {
            return bad(format!("rewards length {} mismatches shape", rewards.len()));
        }
        if transition.len() != self.n_states * joint * self.n_states {
            return bad(format!("transition length {} mismatches shape", transition.len()));
        }
        for (i, row) in transition.chunks(self.n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL || row.iter().any(|&p| p < 0.0) {
                return bad(format!("transition row {i} sums to {sum}"));
            }
        }
        for (i, r) in rewards.chunks(self.n_agents).enumerate() {
            if self.flags.cooperative && r.iter().any(|&x| x != r[0]) {
                return bad(format!("cooperative flag but rewards differ at entry {i}"));
            }
            if self.flags.zero_sum && r.iter().sum::<f64>() != 0.0 {
                return bad(format!("zero-sum flag but rewards sum to nonzero at entry {i}"));
            }
        }
        Ok(())
    }

    /// Explicit tabular MDP for `me` against fixed opponents:
    /// `p(s'|s,a^i) = sum_{a^-i} p(s'|s,a) prod_{j!=i} pi^j(a^j|s)` and
    /// `r(s,a^i) = E_{a^-i} r^i(s,a)`.
    pub fn induce_mdp(&self, me: usize, opponents: Vec<Vec<Vec<f64>>>) -> Result<InducedMdp> {
        if !self.is_tabular() {
            return Err(Error::NonDiscrete);
        }
        let counts = self.action_counts()?;
        if me >= self.n_agents || opponents.len() + 1 != self.n_agents {
            return Err(Error::InvalidGame(format!(
                "need {} opponent policies for agent {me}",
                self.n_agents - 1
            )));
        }
        let others: Vec<usize> = (0..self.n_agents).filter(|&j| j != me).collect();
        for (pol, &j) in opponents.iter().zip(&others) {
            if pol.len() != self.n_states {
                return Err(Error::InvalidGame(format!("policy of agent {j} needs one row per state")));
            }
            for row in pol {
                if row.len() != counts[j]
                    || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    || row.iter().any(|&p| p < 0.0)
                {
                    return Err(Error::InvalidGame(format!("policy of agent {j} is not a distribution")));
                }
            }
        }
        let (ns, na) = (self.n_states, counts[me]);
        let mut reward = vec![0.0; ns * na];
        let mut transition = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for joint in self.enumerate_joint_actions()? {
                let weight: f64 = opponents
                    .iter()
                    .zip(&others)
                    .map(|(pol, &j)| pol[s][joint[j]])
                    .product();
                if weight == 0.0 {
                    continue;
                }
                let a = joint[me];
                reward[s * na + a] += weight * self.rewards_discrete(s, &joint)?[me];
                let row = self.transition_row(s, &joint)?;
                let base = (s * na + a) * ns;
                for (t, p) in transition[base..base + ns].iter_mut().zip(row) {
                    *t += weight * p;
                }
            }
        }
        Ok(InducedMdp {
            base: self.clone(),
            me,
            opponents,
            mdp: TabularMdp {
                n_states: ns,
                n_actions: na,
                reward,
                transition,
                terminal: self.terminal.clone(),
                horizon: self.horizon,
            },
        })
    }

    /// Cooperative game seen as one agent acting with joint actions; the
    /// shared reward is agent 0's.
    pub fn joint_mdp(&self) -> Result<TabularMdp> {
        if !self.is_tabular() {
            return Err(Error::NonDiscrete);
        }
        let na = self.n_joint_actions()?;
        let ns = self.n_states;
        let mut reward = vec![0.0; ns * na];
        let mut transition = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for (j, joint) in self.enumerate_joint_actions()?.iter().enumerate() {
                reward[s * na + j] = self.rewards_discrete(s, joint)?[0];
                let base = (s * na + j) * ns;
                transition[base..base + ns].copy_from_slice(self.transition_row(s, joint)?);
            }
        }
        Ok(TabularMdp {
            n_states: ns,
            n_actions: na,
            reward,
            transition,
            terminal: self.terminal.clone(),
            horizon: self.horizon,
        })
    }

    /// Seat-1 payoff matrix `[a1][a2]` of a 2-player single-state game.
    pub fn payoff_matrix(&self, agent: usize) -> Result<Vec<Vec<f64>>> {
        let counts = self.action_counts()?;
        if counts.len() != 2 {
            return Err(Error::WrongShape(format!("{} players", counts.len())));
        }
        let mut m = vec![vec![0.0; counts[1]]; counts[0]];
        for (a, row) in m.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = self.rewards_discrete(0, &[a, b])?[agent];
            }
        }
        Ok(m)
    }
}

pub fn enumerate_product(counts: &[usize]) -> Vec<Vec<usize>> {
    let total = product(counts);
    let mut out = Vec::with_capacity(total);
    let mut cur = vec![0; counts.len()];
    if counts.contains(&0) {
        return out;
    }
    for _ in 0..total {
        out.push(cur.clone());
        for i in (0..counts.len()).rev() {
            cur[i] += 1;
            if cur[i] < counts[i] {
                break;
            }
            cur[i] = 0;
        }
    }
    out
}

/// Inverse-CDF draw with a caller-supplied uniform in `[0, 1)`.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

pub const FIXTURE_NAMES: &[&str] = &[
    "matching_pennies",
    "coop_climb",
    "coop_cts",
    "two_step_coop",
    "signal_relay",
    "rock_paper_scissors",
];

pub fn fixture(name: &str) -> Result<MarkovGame> {
    match name {
        "matching_pennies" | "G1" => matching_pennies(),
        "coop_climb" | "G2" => coop_climb(),
        "coop_cts" | "G3" => Ok(coop_cts()),
        "two_step_coop" | "M1" => two_step_coop(),
        "signal_relay" | "E1" => signal_relay(),
        "rock_paper_scissors" | "rps" => rock_paper_scissors(),
        other => Err(Error::UnknownFixture(other.into())),
    }
}

/// Fixture name or path to a game file.
pub fn load_env(spec: &str) -> Result<MarkovGame> {
    let path = Path::new(spec);
    if spec.ends_with(".json") || path.exists() {
        MarkovGame::load(path)
    } else {
        fixture(spec)
    }
}

fn zero_sum_matrix(name: &str, r1: &[&[f64]]) -> Result<MarkovGame> {
    let p1: Vec<f64> = r1.iter().flat_map(|row| row.iter().copied()).collect();
    let p2: Vec<f64> = p1.iter().map(|x| -x).collect();
    let k = r1.len();
    MarkovGame::matrix(
        name,
        vec![k, r1[0].len()],
        &[p1, p2],
        GameFlags {
            cooperative: false,
            zero_sum: true,
        },
    )
}

fn shared_matrix(name: &str, r: &[&[f64]]) -> Result<MarkovGame> {
    let p: Vec<f64> = r.iter().flat_map(|row| row.iter().copied()).collect();
    MarkovGame::matrix(
        name,
        vec![r.len(), r[0].len()],
        &[p.clone(), p],
        GameFlags {
            cooperative: true,
            zero_sum: false,
        },
    )
}

/// G1: seat 1 wins on a match.
pub fn matching_pennies() -> Result<MarkovGame> {
    zero_sum_matrix("matching_pennies", &[&[1.0, -1.0], &[-1.0, 1.0]])
}

pub fn rock_paper_scissors() -> Result<MarkovGame> {
    zero_sum_matrix(
        "rock_paper_scissors",
        &[&[0.0, -1.0, 1.0], &[1.0, 0.0, -1.0], &[-1.0, 1.0, 0.0]],
    )
}

/// G2: shared climbing-game payoff.
pub fn coop_climb() -> Result<MarkovGame> {
    shared_matrix(
        "coop_climb",
        &[&[11.0, -30.0, 0.0], &[-30.0, 7.0, 6.0], &[0.0, 0.0, 5.0]],
    )
}

/// G3: two agents in `[-1, 1]`, shared reward `-(a1 + a2 - 1)^2`.
pub fn coop_cts() -> MarkovGame {
    MarkovGame::closed_form(
        "coop_cts",
        ClosedForm::CoopCts,
        vec![ActionSpace::Box1D { lo: -1.0, hi: 1.0 }; 2],
        GameFlags {
            cooperative: true,
            zero_sum: false,
        },
    )
}

pub const TWO_STEP_HORIZON: usize = 4;

/// M1: states `s0`, `s1` and an absorbing end state. `(0,0)` in `s0` moves
/// to `s1`, anything else stays; in `s1` every joint action ends the
/// episode and `(1,1)` pays 10.
pub fn two_step_coop() -> Result<MarkovGame> {
    let (ns, nj, na) = (3, 4, 2);
    let mut rewards = vec![0.0; ns * nj * na];
    let mut transition = vec![0.0; ns * nj * ns];
    for j in 0..nj {
        let s0 = if j == 0 { 1 } else { 0 };
        transition[j * ns + s0] = 1.0;
        transition[(nj + j) * ns + 2] = 1.0;
        transition[(2 * nj + j) * ns + 2] = 1.0;
    }
    // s1, joint (1,1) = index 3
    rewards[(nj + 3) * na] = 10.0;
    rewards[(nj + 3) * na + 1] = 10.0;
    MarkovGame::tabular(
        "two_step_coop",
        vec![2, 2],
        ns,
        rewards,
        transition,
        GameFlags {
            cooperative: true,
            zero_sum: false,
        },
        TWO_STEP_HORIZON,
    )?
    .with_terminal(vec![false, false, true])
    .map(|g| g.with_gamma(0.99))
}

/// E1: a hidden bit `b` is drawn at reset and shown only to agent 1 at
/// `t = 0` (observation `[2b - 1, 0]`); otherwise observations are `[0, t]`. At `t = 1` the team
/// earns 1 iff agent 2 plays `b`. States: `(t0,b0)`, `(t0,b1)`, `(t1,b0)`,
/// `(t1,b1)`, end.
pub fn signal_relay() -> Result<MarkovGame> {
    let (ns, nj, na) = (5, 4, 2);
    let mut rewards = vec![0.0; ns * nj * na];
    let mut transition = vec![0.0; ns * nj * ns];
    for j in 0..nj {
        transition[j * ns + 2] = 1.0;
        transition[(nj + j) * ns + 3] = 1.0;
        transition[(2 * nj + j) * ns + 4] = 1.0;
        transition[(3 * nj + j) * ns + 4] = 1.0;
        transition[(4 * nj + j) * ns + 4] = 1.0;
        let a2 = j % 2;
        let r = |b: usize| if a2 == b { 1.0 } else { 0.0 };
        for agent in 0..na {
            rewards[(2 * nj + j) * na + agent] = r(0);
            rewards[(3 * nj + j) * na + agent] = r(1);
        }
    }
    let obs = vec![
        vec![vec![-1.0, 0.0], vec![0.0, 0.0]],
        vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        vec![vec![0.0, 0.0], vec![0.0, 0.0]],
    ];
    MarkovGame::tabular(
        "signal_relay",
        vec![2, 2],
        ns,
        rewards,
        transition,
        GameFlags {
            cooperative: true,
            zero_sum: false,
        },
        2,
    )?
    .with_terminal(vec![false, false, false, false, true])?
    .with_initial(vec![0.5, 0.5, 0.0, 0.0, 0.0])?
    .with_observations(obs)
}

/// Hidden bit of an E1 state.
pub fn signal_relay_bit(state: usize) -> usize {
    state % 2
}

// ---------------------------------------------------------------------------
// Game files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ActionEntry {
    Discrete(usize),
    Box { lo: f64, hi: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GameFile {
    #[serde(default)]
    name: Option<String>,
    n_agents: usize,
    actions: Vec<ActionEntry>,
    states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rewards: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transition: Option<Value>,
    #[serde(default)]
    flags: GameFlags,
    horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observations: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    closed_form: Option<ClosedForm>,
}

fn flatten_nested(v: &Value, dims: &[usize], what: &str, out: &mut Vec<f64>) -> Result<()> {
    match dims.split_first() {
        None => {
            let x = v
                .as_f64()
                .ok_or_else(|| Error::InvalidGame(format!("{what}: expected a number")))?;
            out.push(x);
            Ok(())
        }
        Some((&d, rest)) => {
            let arr = v
                .as_array()
                .filter(|a| a.len() == d)
                .ok_or_else(|| Error::InvalidGame(format!("{what}: expected an array of length {d}")))?;
            for item in arr {
                flatten_nested(item, rest, what, out)?;
            }
            Ok(())
        }
    }
}

fn nest(flat: &[f64], dims: &[usize]) -> Value {
    match dims.split_first() {
        None => json!(flat[0]),
        Some((&d, rest)) => {
            let chunk = product(rest);
            Value::Array((0..d).map(|i| nest(&flat[i * chunk..(i + 1) * chunk], rest)).collect())
        }
    }
}

impl MarkovGame {
    pub fn from_json(v: Value) -> Result<Self> {
        let file: GameFile = serde_json::from_value(v)?;
        if file.actions.len() != file.n_agents {
            return Err(Error::InvalidGame("actions length must equal n_agents".into()));
        }
        let spaces: Vec<ActionSpace> = file
            .actions
            .iter()
            .map(|a| match a {
                ActionEntry::Discrete(k) => ActionSpace::Discrete(*k),
                ActionEntry::Box { lo, hi } => ActionSpace::Box1D { lo: *lo, hi: *hi },
            })
            .collect();
        let name = file.name.clone().unwrap_or_else(|| "custom".into());
        let mut game = if let Some(form) = file.closed_form {
            let mut g = MarkovGame::closed_form(&name, form, spaces, file.flags);
            g.horizon = file.horizon;
            g
        } else {
            let counts: Vec<usize> = spaces
                .iter()
                .map(|s| s.n().ok_or(Error::NonDiscrete))
                .collect::<Result<_>>()?;
            let mut dims = vec![file.states];
            dims.extend_from_slice(&counts);
            let mut rdims = dims.clone();
            rdims.push(file.n_agents);
            let mut tdims = dims;
            tdims.push(file.states);
            let mut rewards = Vec::new();
            let rv = file
                .rewards
                .as_ref()
                .ok_or_else(|| Error::InvalidGame("missing rewards".into()))?;
            flatten_nested(rv, &rdims, "rewards", &mut rewards)?;
            let mut transition = Vec::new();
            let tv = file
                .transition
                .as_ref()
                .ok_or_else(|| Error::InvalidGame("missing transition".into()))?;
            flatten_nested(tv, &tdims, "transition", &mut transition)?;
            MarkovGame::tabular(name, counts, file.states, rewards, transition, file.flags, file.horizon)?
        };
        if let Some(t) = file.terminal {
            game.terminal = t;
        }
        if let Some(i) = file.initial {
            game.initial = i;
        }
        game.observations = file.observations;
        if let Some(g) = file.gamma {
            game.gamma = g;
        }
        game.validate()?;
        Ok(game)
    }

    pub fn to_json(&self) -> Value {
        let actions = self
            .action_spaces
            .iter()
            .map(|s| match s {
                ActionSpace::Discrete(k) => ActionEntry::Discrete(*k),
                ActionSpace::Box1D { lo, hi } => ActionEntry::Box { lo: *lo, hi: *hi },
            })
            .collect();
        let (rewards, transition, closed_form) = match &self.dynamics {
            Dynamics::Tabular {
                rewards,
                transition,
            } => {
                let counts = self.action_counts().expect("tabular games are discrete");
                let mut dims = vec![self.n_states];
                dims.extend_from_slice(&counts);
                let mut rdims = dims.clone();
                rdims.push(self.n_agents);
                let mut tdims = dims;
                tdims.push(self.n_states);
                (Some(nest(rewards, &rdims)), Some(nest(transition, &tdims)), None)
            }
            Dynamics::ClosedForm(f) => (None, None, Some(*f)),
        };
        let file = GameFile {
            name: Some(self.name.clone()),
            n_agents: self.n_agents,
            actions,
            states: self.n_states,
            rewards,
            transition,
            flags: self.flags,
            horizon: self.horizon,
            terminal: Some(self.terminal.clone()),
            initial: Some(self.initial.clone()),
            observations: self.observations.clone(),
            gamma: Some(self.gamma),
            closed_form,
        };
        serde_json::to_value(file).expect("game file serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}
