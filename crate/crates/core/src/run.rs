//! Experiment plumbing behind the `marlab` binary: run configs, training
//! loops with CSV metrics, checksummed checkpoints, evaluation, oracle
//! queries and the gradient self-test.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::dial::{DialConfig, DialLearner, RialConfig, RialLearner};
use crate::envs::{load_env, sample_categorical, Action, MarkovGame};
use crate::error::{Error, Result};
use crate::maddpg::{MaddpgConfig, MaddpgLearner, MaddpgTrainer, MaddpgVariant};
use crate::ndiff::{grad_check_with_fault, Activation, DenseNet, Fault, Tensor};
use crate::oracle::{self, DEFAULT_TOL};
use crate::qmix::{LinearSchedule, MixMode, QmixConfig, QmixLearner, QmixTrainer};
use crate::selfplay::{self, CategoricalPolicy, SelfPlayConfig, SelfPlayRun};

pub const METRICS_HEADER: &str = "step,episodes,loss,epsilon,eval_return_mean,eval_return_per_agent,extra";
pub const SEED_ENV_VAR: &str = "MARLAB_SEED";
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Iql,
    Vdn,
    Qmix,
    MaddpgCtde,
    MaddpgDec,
    Selfplay,
    Dial,
    Rial,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Iql => "iql",
            Algo::Vdn => "vdn",
            Algo::Qmix => "qmix",
            Algo::MaddpgCtde => "maddpg_ctde",
            Algo::MaddpgDec => "maddpg_dec",
            Algo::Selfplay => "selfplay",
            Algo::Dial => "dial",
            Algo::Rial => "rial",
        }
    }
}

/// Parsed run configuration. Unset optional keys fall back to
/// per-algorithm defaults at train time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algo: Algo,
    pub env: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_update_interval: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_decay_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_interval: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_episodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Episode-generation threads (self-play only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Let self-play run on zero-sum games that are not seat-symmetric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allow_asymmetric: Option<bool>,
}

impl RunConfig {
    pub fn new(algo: Algo, env: &str) -> Self {
        Self {
            algo,
            env: env.to_string(),
            seed: 0,
            gamma: None,
            lr: None,
            total_steps: None,
            batch_size: None,
            buffer_capacity: None,
            target_update_interval: None,
            tau: None,
            epsilon_start: None,
            epsilon_end: None,
            epsilon_decay_steps: None,
            hidden: None,
            embed_dim: None,
            beta: None,
            eval_interval: None,
            eval_episodes: None,
            out_dir: None,
            threads: None,
            allow_asymmetric: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        for (name, v) in [("lr", self.lr), ("tau", self.tau), ("gamma", self.gamma)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return bad(&format!("{name} must be positive"));
                }
            }
        }
        if self.gamma.is_some_and(|g| g > 1.0) {
            return bad("gamma must be at most 1");
        }
        if self.tau.is_some_and(|t| t > 1.0) {
            return bad("tau must be at most 1");
        }
        if self.beta.is_some_and(|b| !(b.is_finite() && b >= 0.0)) {
            return bad("beta must be nonnegative");
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if v.is_some_and(|e| !(0.0..=1.0).contains(&e)) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        let positive = [
            ("batch_size", self.batch_size.map(|x| x as u64)),
            ("buffer_capacity", self.buffer_capacity.map(|x| x as u64)),
            ("target_update_interval", self.target_update_interval),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes.map(|x| x as u64)),
            ("embed_dim", self.embed_dim.map(|x| x as u64)),
            ("threads", self.threads.map(|x| x as u64)),
        ];
        for (name, v) in positive {
            if v == Some(0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return bad("hidden sizes must be positive");
        }
        if self.threads.is_some_and(|t| t > 1) && self.algo != Algo::Selfplay {
            return bad("threads > 1 is only supported for selfplay");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps.unwrap_or(match self.algo {
            Algo::Iql | Algo::Vdn | Algo::Qmix => 20_000,
            Algo::MaddpgCtde | Algo::MaddpgDec | Algo::Rial => 30_000,
            Algo::Selfplay | Algo::Dial => 5_000,
        })
    }

    fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.algo {
            Algo::MaddpgCtde | Algo::MaddpgDec => 64,
            Algo::Selfplay => 256,
            _ => 32,
        })
    }

    fn buffer_capacity(&self) -> usize {
        self.buffer_capacity.unwrap_or(match self.algo {
            Algo::MaddpgCtde | Algo::MaddpgDec => 10_000,
            _ => 5_000,
        })
    }

    pub fn eval_interval(&self) -> u64 {
        self.eval_interval.unwrap_or((self.total_steps() / 20).max(1))
    }

    pub fn eval_episodes(&self) -> usize {
        self.eval_episodes.unwrap_or(match self.algo {
            Algo::Selfplay => 10_000,
            Algo::Dial | Algo::Rial => 1_000,
            _ => 500,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| {
            let env = Path::new(&self.env)
                .file_stem()
                .map_or_else(|| self.env.clone(), |s| s.to_string_lossy().into_owned());
            PathBuf::from("runs").join(format!("{}_{}_{}", self.algo.name(), env, self.seed))
        })
    }

    fn epsilon(&self, default: LinearSchedule) -> LinearSchedule {
        LinearSchedule {
            start: self.epsilon_start.unwrap_or(default.start),
            end: self.epsilon_end.unwrap_or(default.end),
            steps: self.epsilon_decay_steps.unwrap_or(default.steps),
        }
    }

    pub fn qmix_config(&self, game: &MarkovGame) -> QmixConfig {
        let d = QmixConfig::default();
        QmixConfig {
            mode: match self.algo {
                Algo::Vdn => MixMode::Vdn,
                Algo::Qmix => MixMode::Qmix,
                _ => MixMode::Independent,
            },
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            gamma: self.gamma.unwrap_or(game.gamma()),
            lr: self.lr.unwrap_or(d.lr),
            target_update_interval: self.target_update_interval.unwrap_or(d.target_update_interval),
            epsilon: self.epsilon(d.epsilon),
            ..d
        }
    }

    pub fn maddpg_config(&self, game: &MarkovGame) -> MaddpgConfig {
        let d = MaddpgConfig::default();
        MaddpgConfig {
            variant: if self.algo == Algo::MaddpgDec {
                MaddpgVariant::Decentralized
            } else {
                MaddpgVariant::Ctde
            },
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            gamma: self.gamma.unwrap_or(game.gamma()),
            critic_lr: self.lr.unwrap_or(d.critic_lr),
            actor_lr: self.lr.unwrap_or(d.actor_lr),
            tau: self.tau.unwrap_or(d.tau),
            beta: self.beta.unwrap_or(d.beta),
            ..d
        }
    }

    pub fn selfplay_config(&self) -> SelfPlayConfig {
        let d = SelfPlayConfig::default();
        SelfPlayConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch_episodes: self.batch_size(),
            allow_asymmetric: self.allow_asymmetric.unwrap_or(false),
            threads: self.threads.unwrap_or(1),
            ..d
        }
    }

    pub fn dial_config(&self) -> DialConfig {
        let d = DialConfig::default();
        DialConfig {
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size(),
            ..d
        }
    }

    pub fn rial_config(&self, game: &MarkovGame) -> RialConfig {
        let d = RialConfig::default();
        RialConfig {
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            gamma: self.gamma.unwrap_or(game.gamma()),
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size(),
            buffer_capacity: self.buffer_capacity(),
            epsilon: self.epsilon(d.epsilon),
            ..d
        }
    }
}

/// Builds a config from an optional JSON file, the seed environment
/// variable and `key=value` overrides, in increasing precedence. Override
/// values are parsed as JSON when possible and taken as strings otherwise.
pub fn load_config(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut obj = match file {
        Some(p) => match serde_json::from_str::<Value>(&fs::read_to_string(p)?) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(Error::InvalidConfig("config file must hold a JSON object".into())),
            Err(e) => return Err(Error::InvalidConfig(format!("{}: {e}", p.display()))),
        },
        None => Map::new(),
    };
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV_VAR}={s} is not an unsigned integer")))?;
        obj.insert("seed".into(), json!(seed));
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not key=value")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        obj.insert(k.trim().to_string(), v);
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn incompatible(algo: Algo, env: &str, reason: impl Into<String>) -> Error {
    Error::IncompatibleAlgoEnv {
        algo: algo.name().into(),
        env: env.into(),
        reason: reason.into(),
    }
}

/// Rejects algorithm/environment pairs the learners cannot run.
pub fn check_compat(cfg: &RunConfig, game: &MarkovGame) -> Result<()> {
    let no = |why: &str| Err(incompatible(cfg.algo, &cfg.env, why));
    match cfg.algo {
        Algo::Iql | Algo::Vdn | Algo::Qmix => {
            if !game.is_discrete() || !game.is_tabular() {
                return no("value-based learners need discrete tabular games");
            }
            if cfg.algo != Algo::Iql && !game.flags().cooperative {
                return no("mixing needs a cooperative game");
            }
        }
        Algo::MaddpgCtde => {}
        Algo::MaddpgDec => {
            if !game.is_discrete() {
                return no("opponent models need discrete co-agents");
            }
        }
        Algo::Selfplay => {
            if let Err(e) = selfplay::check_game(game, cfg.allow_asymmetric.unwrap_or(false)) {
                return no(&e.to_string());
            }
        }
        Algo::Dial | Algo::Rial => {
            if !(game.is_tabular() && game.is_discrete() && game.has_observations() && game.horizon() >= 2) {
                return no("communication needs per-agent observations and horizon >= 2");
            }
        }
    }
    Ok(())
}

/// A trainable learner of any supported algorithm.
pub enum Agent {
    Qmix(Box<QmixTrainer>),
    Maddpg(Box<MaddpgTrainer>, Value),
    SelfPlay(Box<SelfPlayRun>, u64),
    Dial(Box<DialLearner>, u64),
    Rial(Box<RialLearner>),
}

impl Agent {
    pub fn build(cfg: &RunConfig, game: &MarkovGame, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_compat(cfg, game)?;
        Ok(match cfg.algo {
            Algo::Iql | Algo::Vdn | Algo::Qmix => {
                let l = QmixLearner::new(game, cfg.qmix_config(game), rng)?;
                Agent::Qmix(Box::new(QmixTrainer::new(l, cfg.buffer_capacity(), cfg.batch_size())))
            }
            Algo::MaddpgCtde | Algo::MaddpgDec => {
                let l = MaddpgLearner::new(game, cfg.maddpg_config(game), rng)?;
                Agent::Maddpg(Box::new(MaddpgTrainer::new(l, cfg.buffer_capacity(), cfg.batch_size())), json!({}))
            }
            Algo::Selfplay => Agent::SelfPlay(Box::new(SelfPlayRun::new(game, cfg.selfplay_config())?), 0),
            Algo::Dial => Agent::Dial(Box::new(DialLearner::new(game, cfg.dial_config(), rng)?), 0),
            Algo::Rial => Agent::Rial(Box::new(RialLearner::new(game, cfg.rial_config(game), rng)?)),
        })
    }

    /// One learner step; returns the step's loss.
    pub fn step(&mut self, game: &MarkovGame, rng: &mut ChaCha8Rng) -> Result<f64> {
        match self {
            Agent::Qmix(t) => t.step(game, rng),
            Agent::Maddpg(t, extra) => {
                let s = t.step(game, rng)?;
                *extra = json!({ "actor_objective": s.actor_objective, "model_nll": s.model_nll });
                Ok(s.critic_loss)
            }
            Agent::SelfPlay(run, episodes) => {
                let seat1 = run.step(rng)?;
                *episodes += run.cfg.batch_episodes as u64;
                // Policy-gradient surrogate has no meaningful value; report
                // the batch's seat-1 payoff instead.
                Ok(seat1)
            }
            Agent::Dial(l, episodes) => {
                *episodes += l.config().batch_size as u64;
                l.train_step(game, rng)
            }
            Agent::Rial(l) => l.rial_baseline_step(game, rng),
        }
    }

    pub fn episodes(&self) -> u64 {
        match self {
            Agent::Qmix(t) => t.episodes,
            Agent::Maddpg(t, _) => t.episodes,
            Agent::SelfPlay(_, e) | Agent::Dial(_, e) => *e,
            Agent::Rial(l) => l.steps(),
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            Agent::Qmix(t) => Some(t.epsilon()),
            Agent::Rial(l) => Some(l.epsilon()),
            _ => None,
        }
    }

    /// Per-agent mean return under the evaluation policy, plus an
    /// algorithm-specific JSON blob.
    pub fn evaluate(&self, game: &MarkovGame, episodes: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Value)> {
        Ok(match self {
            Agent::Qmix(t) => (t.learner.evaluate(game, episodes, rng)?, json!({ "buffer": t.buffer.len() })),
            Agent::Maddpg(t, extra) => (t.learner.evaluate(game, episodes, rng)?, extra.clone()),
            Agent::SelfPlay(run, _) => {
                let s = run.evaluate(episodes, rng)?;
                (vec![s.seat1_mean, s.seat2_mean], json!({ "policy": run.probs() }))
            }
            Agent::Dial(l, _) => {
                let acc = l.evaluate(game, episodes, rng)?;
                (vec![acc; game.n_agents()], json!({ "eval_accuracy": acc }))
            }
            Agent::Rial(l) => {
                let acc = l.evaluate(game, episodes, rng)?;
                (vec![acc; game.n_agents()], json!({ "eval_accuracy": acc }))
            }
        })
    }

    pub fn payload(&self) -> Value {
        match self {
            Agent::Qmix(t) => t.learner.to_json(),
            Agent::Maddpg(t, _) => t.learner.to_json(),
            Agent::SelfPlay(run, _) => run.policy.to_json(),
            Agent::Dial(l, _) => l.to_json(),
            Agent::Rial(l) => l.to_json(),
        }
    }

    pub fn load_payload(&mut self, v: &Value) -> Result<()> {
        match self {
            Agent::Qmix(t) => t.learner.load_json(v),
            Agent::Maddpg(t, _) => t.learner.load_json(v),
            Agent::SelfPlay(run, _) => {
                let p = CategoricalPolicy::from_json(v)?;
                if p.logits.len() != run.policy.logits.len() {
                    return Err(Error::MalformedCheckpoint("policy width".into()));
                }
                run.policy = p;
                Ok(())
            }
            Agent::Dial(l, _) => l.load_json(v),
            Agent::Rial(l) => l.load_json(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episodes: u64,
    pub loss: f64,
    pub epsilon: Option<f64>,
    pub eval_return_mean: f64,
    /// JSON array.
    pub eval_return_per_agent: String,
    /// JSON object.
    pub extra: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub final_eval: Vec<f64>,
    pub rows: Vec<MetricsRow>,
}

fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Trains, writing `metrics.csv`, `checkpoint.json` and `config_echo.json`
/// into the run's output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let game = load_env(&cfg.env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut erng = eval_rng(cfg.seed);
    let mut agent = Agent::build(cfg, &game, &mut rng)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config_echo.json"), serde_json::to_string_pretty(cfg)?)?;

    let total = cfg.total_steps();
    let interval = cfg.eval_interval();
    let mut writer = csv::Writer::from_path(out.join("metrics.csv"))?;
    let mut rows = Vec::new();
    let mut final_eval = Vec::new();
    for step in 1..=total {
        let loss = agent.step(&game, &mut rng)?;
        if step % interval == 0 || step == total {
            let (per_agent, extra) = agent.evaluate(&game, cfg.eval_episodes(), &mut erng)?;
            let row = MetricsRow {
                step,
                episodes: agent.episodes(),
                loss,
                epsilon: agent.epsilon(),
                eval_return_mean: per_agent.iter().sum::<f64>() / per_agent.len().max(1) as f64,
                eval_return_per_agent: serde_json::to_string(&per_agent)?,
                extra: extra.to_string(),
            };
            writer.serialize(&row)?;
            rows.push(row);
            final_eval = per_agent;
        }
    }
    if total == 0 {
        writer.write_record(METRICS_HEADER.split(','))?;
    }
    writer.flush()?;
    save_checkpoint(&out.join("checkpoint.json"), cfg, &agent.payload())?;
    Ok(TrainSummary {
        out_dir: out,
        steps: total,
        final_eval,
        rows,
    })
}

fn checksum(body: &Value) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(body)?)))
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, payload: &Value) -> Result<()> {
    let body = json!({ "algo": cfg.algo, "env": cfg.env, "config": cfg, "payload": payload });
    let sum = checksum(&body)?;
    let mut doc = body;
    doc["checksum"] = Value::String(sum);
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub payload: Value,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| Error::MalformedCheckpoint("not a JSON object".into()))?;
    let stored = match obj.remove("checksum") {
        Some(Value::String(s)) => s,
        _ => return Err(Error::MalformedCheckpoint("missing checksum".into())),
    };
    if checksum(&doc)? != stored {
        return Err(Error::ChecksumMismatch);
    }
    let config: RunConfig =
        serde_json::from_value(doc["config"].clone()).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    Ok(Checkpoint {
        config,
        payload: doc["payload"].clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub algo: String,
    pub env: String,
    pub episodes: usize,
    pub seed: u64,
    pub mean_return_per_agent: Vec<f64>,
    pub mean_return: f64,
    /// Fraction of episodes each agent finished ahead, for zero-sum games.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_rates: Option<Vec<f64>>,
}

/// Per-episode discounted returns of a joint policy.
fn rollout<F>(game: &MarkovGame, episodes: usize, rng: &mut ChaCha8Rng, mut act: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<Action>>,
{
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut st = game.reset(rng);
        let mut ret = vec![0.0; game.n_agents()];
        let mut disc = 1.0;
        while !st.done {
            let actions = act(&game.encode_state(st.state), rng)?;
            let step = game.step(&st, &actions, rng)?;
            for (t, r) in ret.iter_mut().zip(&step.rewards) {
                *t += disc * r;
            }
            disc *= game.gamma();
            st = step.next;
        }
        out.push(ret);
    }
    Ok(out)
}

/// Greedy (or noise-free) evaluation of a saved checkpoint, optionally on
/// a different env than it was trained on.
pub fn eval(checkpoint: &Path, env: Option<&str>, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = ck.config;
    if let Some(e) = env {
        cfg.env = e.to_string();
    }
    let game = load_env(&cfg.env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = Agent::build(&cfg, &game, &mut rng)?;
    agent.load_payload(&ck.payload)?;
    let n = game.n_agents();
    let returns: Option<Vec<Vec<f64>>> = match &agent {
        Agent::Qmix(t) => Some(rollout(&game, episodes, &mut rng, |s, _| {
            Ok(t.learner.greedy_joint(s)?.into_iter().map(Action::Discrete).collect())
        })?),
        Agent::Maddpg(t, _) => Some(rollout(&game, episodes, &mut rng, |s, r| Ok(t.learner.act(s, false, r)?.0))?),
        Agent::SelfPlay(run, _) => {
            let p = run.probs();
            Some(rollout(&game, episodes, &mut rng, |_, r| {
                Ok((0..2).map(|_| Action::Discrete(sample_categorical(&p, r.random()))).collect())
            })?)
        }
        _ => None,
    };
    let (mean, win_rates) = match returns {
        Some(rets) => {
            let k = rets.len().max(1) as f64;
            let mean: Vec<f64> = (0..n).map(|i| rets.iter().map(|r| r[i]).sum::<f64>() / k).collect();
            let wins = game
                .flags()
                .zero_sum
                .then(|| (0..n).map(|i| rets.iter().filter(|r| r[i] > 0.0).count() as f64 / k).collect());
            (mean, wins)
        }
        None => (agent.evaluate(&game, episodes, &mut rng)?.0, None),
    };
    Ok(EvalSummary {
        algo: cfg.algo.name().into(),
        env: cfg.env,
        episodes,
        seed,
        mean_return: mean.iter().sum::<f64>() / n as f64,
        mean_return_per_agent: mean,
        win_rates,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum OracleQuery {
    Nash,
    /// Best joint action of the team payoff in one state.
    Argmax { state: usize },
    Qiter { gamma: Option<f64> },
    BestResp { me: usize, mix: Vec<f64> },
}

/// Runs an oracle query on a fixture or game file; returns JSON.
pub fn oracle_cmd(query: &OracleQuery, env: &str) -> Result<Value> {
    let game = load_env(env)?;
    match query {
        OracleQuery::Nash => {
            let sol = oracle::nash_zero_sum(&game)?;
            Ok(serde_json::to_value(sol)?)
        }
        OracleQuery::Argmax { state } => {
            if *state >= game.n_states() {
                return Err(Error::InvalidConfig(format!("state {state} out of range")));
            }
            let team: Vec<f64> = game
                .enumerate_joint_actions()?
                .iter()
                .map(|j| {
                    let r = game.rewards_discrete(*state, j)?;
                    Ok(if game.flags().cooperative { r[0] } else { r.iter().sum() })
                })
                .collect::<Result<_>>()?;
            let (joint, value) = oracle::joint_argmax(&game, |j| game.joint_index(j).map_or(f64::NAN, |i| team[i]))?;
            Ok(json!({ "joint": joint, "value": value }))
        }
        OracleQuery::Qiter { gamma } => {
            let mdp = game.joint_mdp()?;
            let q = oracle::tabular_q_iteration(&mdp, gamma.unwrap_or(game.gamma()), DEFAULT_TOL)?;
            let rows: Vec<&[f64]> = (0..q.n_states).map(|s| q.row(s)).collect();
            let values: Vec<f64> = (0..q.n_states).map(|s| q.value(s)).collect();
            let greedy: Vec<Vec<usize>> = (0..q.n_states)
                .map(|s| game.joint_from_index(q.greedy(s)))
                .collect::<Result<_>>()?;
            Ok(json!({
                "gamma": q.gamma,
                "sweeps": q.deltas.len(),
                "q": rows,
                "values": values,
                "greedy_joint": greedy,
            }))
        }
        OracleQuery::BestResp { me, mix } => {
            let br = oracle::best_response_value(&game, *me, mix)?;
            Ok(json!({ "me": me, "action": br.action, "value": br.value, "payoffs": br.payoffs }))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

/// Worst relative error of backward against central differences on one
/// random dense net with a random input batch.
pub fn dense_instance(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<f64> {
    const ACTS: [Activation; 4] = [Activation::Elu, Activation::Tanh, Activation::Sigmoid, Activation::Relu];
    let input = rng.random_range(1..=4);
    let depth = rng.random_range(1..=2);
    let mut sizes = vec![input];
    sizes.extend((0..depth).map(|_| rng.random_range(1..=6)));
    sizes.push(rng.random_range(1..=3));
    let mut acts: Vec<Activation> = (0..depth).map(|_| ACTS[rng.random_range(0..ACTS.len())]).collect();
    acts.push(Activation::Identity);
    let net = DenseNet::new(&sizes, &acts, rng)?;
    let rows = rng.random_range(1..=3);
    let x: Vec<f64> = (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut params: Vec<Tensor> = net.params().to_vec();
    // Nonzero biases so every layer's bias path is exercised.
    for t in params.iter_mut().skip(1).step_by(2) {
        for b in t.value_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    params.push(Tensor::new(vec![rows, input], x)?.with_grad());
    let np = params.len();
    grad_check_with_fault(&mut params, 1e-5, fault, |g, vars| {
        let y = net.forward(g, &vars[..np - 1], vars[np - 1])?;
        let sq = g.square(y);
        Ok(g.mean(sq))
    })
}

/// Same check on the full unrolled communication graph of a random small
/// DIAL learner.
pub fn dial_instance(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<f64> {
    let game = crate::envs::signal_relay()?;
    let cfg = DialConfig {
        hidden: vec![rng.random_range(2..=6)],
        state_dim: rng.random_range(1..=4),
        message_dim: rng.random_range(1..=2),
        ..DialConfig::default()
    };
    let mut l = DialLearner::new(&game, cfg, rng)?;
    for c in &mut l.cells {
        for t in c.net.params_mut() {
            for x in t.value_mut() {
                if *x == 0.0 {
                    *x = rng.random_range(-0.5..0.5);
                }
            }
        }
    }
    let batch = rng.random_range(2..=5);
    let u = l.unroll(&game, batch, false, rng)?;
    l.grad_check(&u, 1e-5, fault)
}

/// Runs both gradient suites on `instances` random instances each.
pub fn gradcheck_suites(instances: usize, seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut suites = Vec::new();
    type Instance = fn(&mut ChaCha8Rng, Option<Fault>) -> Result<f64>;
    let kinds: [(&str, Instance); 2] = [("ndiff", dense_instance), ("dial_bptt", dial_instance)];
    for (k, (name, f)) in kinds.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let e = f(&mut rng, fault)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        suites.push(SuiteReport {
            name: name.into(),
            instances,
            max_rel_error: worst,
            threshold: GRADCHECK_THRESHOLD,
            passed: worst < GRADCHECK_THRESHOLD,
        });
    }
    let passed = suites.iter().all(|s| s.passed);
    Ok(GradcheckReport { suites, passed })
}

/// Exit status for an error: 2 for usage and config problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::UnknownFixture(_) | Error::IncompatibleAlgoEnv { .. } | Error::InvalidGame(_) => 2,
        _ => 1,
    }
}
