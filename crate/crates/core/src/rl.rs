//! Desk-scale policy-gradient objectives over a tabular categorical sequence
//! policy: RLOO, GAE, the PPO clipped surrogate and the KL-regularized
//! reward objective, plus a small training harness on enumerable
//! environments.
//!
//! A trajectory is a fixed-length action sequence. The policy's state at step
//! `t` is `(t, previous action)`; state 0 is the start state. Sequence
//! log-probability is the sum of per-token log-probabilities and rewards are
//! terminal.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RlError {
    #[error("leave-one-out baseline needs at least 2 samples per group, got {0}")]
    DegenerateGroup(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("action or state out of range: {0}")]
    OutOfRange(String),
}

pub type Result<T> = std::result::Result<T, RlError>;

/// Softmax policy with one logit per (state, action).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSequencePolicy {
    theta: Vec<f64>,
    vocab: usize,
    horizon: usize,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(logits: &[f64], a: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[a] - lse
}

impl TabularSequencePolicy {
    /// Uniform policy (all logits zero).
    pub fn new(vocab: usize, horizon: usize) -> Self {
        assert!(vocab >= 1 && horizon >= 1, "vocab and horizon must be positive");
        let n = horizon * (vocab + 1) * vocab;
        TabularSequencePolicy { theta: vec![0.0; n], vocab, horizon }
    }

    pub fn from_theta(vocab: usize, horizon: usize, theta: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(vocab, horizon);
        if theta.len() != p.theta.len() {
            return Err(RlError::LengthMismatch(format!(
                "expected {} parameters, got {}",
                p.theta.len(),
                theta.len()
            )));
        }
        p.theta = theta;
        Ok(p)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.horizon * (self.vocab + 1)
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn state_index(&self, t: usize, prev: Option<usize>) -> usize {
        t * (self.vocab + 1) + prev.map_or(0, |a| a + 1)
    }

    /// State visited at each position of `traj`.
    pub fn states_of(&self, traj: &[usize]) -> Vec<usize> {
        (0..traj.len())
            .map(|t| self.state_index(t, t.checked_sub(1).map(|p| traj[p])))
            .collect()
    }

    pub fn logits(&self, state: usize) -> &[f64] {
        &self.theta[state * self.vocab..(state + 1) * self.vocab]
    }

    pub fn action_probs(&self, state: usize) -> Vec<f64> {
        softmax(self.logits(state))
    }

    pub fn log_prob_action(&self, state: usize, action: usize) -> f64 {
        log_softmax_at(self.logits(state), action)
    }

    /// Adds `scale * ∇ log π(action | state)` into `grad`.
    fn accumulate_score(&self, state: usize, action: usize, scale: f64, grad: &mut [f64]) {
        let probs = self.action_probs(state);
        let row = &mut grad[state * self.vocab..(state + 1) * self.vocab];
        for (b, (g, p)) in row.iter_mut().zip(&probs).enumerate() {
            let indicator = if b == action { 1.0 } else { 0.0 };
            *g += scale * (indicator - p);
        }
    }

    fn check_traj(&self, traj: &[usize]) -> Result<()> {
        if traj.len() != self.horizon {
            return Err(RlError::LengthMismatch(format!(
                "trajectory length {} != horizon {}",
                traj.len(),
                self.horizon
            )));
        }
        if let Some(a) = traj.iter().find(|&&a| a >= self.vocab) {
            return Err(RlError::OutOfRange(format!("action {a} >= vocab {}", self.vocab)));
        }
        Ok(())
    }

    pub fn sequence_log_prob(&self, traj: &[usize]) -> f64 {
        self.states_of(traj)
            .into_iter()
            .zip(traj)
            .map(|(s, &a)| self.log_prob_action(s, a))
            .sum()
    }

    /// ∇_θ log π(traj).
    pub fn grad_log_prob(&self, traj: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.theta.len()];
        for (s, &a) in self.states_of(traj).into_iter().zip(traj) {
            self.accumulate_score(s, a, 1.0, &mut g);
        }
        g
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut traj = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let s = self.state_index(t, traj.last().copied());
            let probs = self.action_probs(s);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = self.vocab - 1;
            for (a, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = a;
                    break;
                }
            }
            traj.push(chosen);
        }
        traj
    }

    /// Probability of every full sequence, in lexicographic order.
    pub fn enumerate(&self) -> Vec<(Vec<usize>, f64)> {
        all_sequences(self.vocab, self.horizon)
            .into_iter()
            .map(|y| {
                let p = self.sequence_log_prob(&y).exp();
                (y, p)
            })
            .collect()
    }
}

/// Every action sequence of length `horizon`, lexicographic.
pub fn all_sequences(vocab: usize, horizon: usize) -> Vec<Vec<usize>> {
    let total = vocab.pow(horizon as u32);
    (0..total)
        .map(|mut code| {
            let mut y = vec![0; horizon];
            for slot in y.iter_mut().rev() {
                *slot = code % vocab;
                code /= vocab;
            }
            y
        })
        .collect()
}

/// Environment small enough to enumerate every trajectory.
pub trait EnumerableEnv: Sync {
    fn vocab(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reward(&self, traj: &[usize]) -> f64;
}

/// Single-step bandit with a fixed reward per action.
#[derive(Debug, Clone)]
pub struct Bandit {
    pub rewards: Vec<f64>,
}

impl Bandit {
    pub fn new(rewards: Vec<f64>) -> Self {
        assert!(!rewards.is_empty(), "bandit needs at least one arm");
        Bandit { rewards }
    }
}

impl EnumerableEnv for Bandit {
    fn vocab(&self) -> usize {
        self.rewards.len()
    }
    fn horizon(&self) -> usize {
        1
    }
    fn reward(&self, traj: &[usize]) -> f64 {
        self.rewards[traj[0]]
    }
}

/// Reward 1 iff the whole sequence equals `target`.
#[derive(Debug, Clone)]
pub struct TargetSequence {
    pub vocab: usize,
    pub target: Vec<usize>,
}

impl EnumerableEnv for TargetSequence {
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn horizon(&self) -> usize {
        self.target.len()
    }
    fn reward(&self, traj: &[usize]) -> f64 {
        if traj == self.target.as_slice() {
            1.0
        } else {
            0.0
        }
    }
}

/// E_π[R] by enumeration.
pub fn expected_reward(policy: &TabularSequencePolicy, env: &dyn EnumerableEnv) -> f64 {
    policy.enumerate().iter().map(|(y, p)| p * env.reward(y)).sum()
}

/// ∇_θ E_π[R] = Σ_y π(y) R(y) ∇ log π(y), by enumeration.
pub fn exact_gradient(policy: &TabularSequencePolicy, env: &dyn EnumerableEnv) -> Vec<f64> {
    let mut g = vec![0.0; policy.n_params()];
    for (y, p) in policy.enumerate() {
        let w = p * env.reward(&y);
        if w != 0.0 {
            for (gi, si) in g.iter_mut().zip(policy.grad_log_prob(&y)) {
                *gi += w * si;
            }
        }
    }
    g
}

/// K trajectories sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub prompt_id: u64,
    pub samples: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub logprobs: Vec<f64>,
}

impl SampledGroup {
    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn check(&self) -> Result<()> {
        let k = self.samples.len();
        if self.rewards.len() != k || self.logprobs.len() != k {
            return Err(RlError::LengthMismatch(format!(
                "group {}: {} samples, {} rewards, {} logprobs",
                self.prompt_id,
                k,
                self.rewards.len(),
                self.logprobs.len()
            )));
        }
        if k < 2 {
            return Err(RlError::DegenerateGroup(k));
        }
        Ok(())
    }
}

pub fn sample_group<R: Rng + ?Sized>(
    policy: &TabularSequencePolicy,
    env: &dyn EnumerableEnv,
    k: usize,
    prompt_id: u64,
    rng: &mut R,
) -> SampledGroup {
    let samples: Vec<Vec<usize>> = (0..k).map(|_| policy.sample(rng)).collect();
    let rewards = samples.iter().map(|y| env.reward(y)).collect();
    let logprobs = samples.iter().map(|y| policy.sequence_log_prob(y)).collect();
    SampledGroup { prompt_id, samples, rewards, logprobs }
}

/// a_i = R_i − mean of the other K−1 rewards.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(RlError::DegenerateGroup(k));
    }
    let total: f64 = rewards.iter().sum();
    let peers = (k - 1) as f64;
    Ok(rewards.iter().map(|r| r - (total - r) / peers).collect())
}

/// (1/K) Σ_i a_i ∇ log π(y_i), averaged over groups.
pub fn rloo_gradient(policy: &TabularSequencePolicy, groups: &[SampledGroup]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; policy.n_params()];
    if groups.is_empty() {
        return Ok(g);
    }
    for group in groups {
        group.check()?;
        let adv = rloo_advantages(&group.rewards)?;
        let scale = 1.0 / (group.k() as f64 * groups.len() as f64);
        for (y, a) in group.samples.iter().zip(adv) {
            policy.check_traj(y)?;
            if a == 0.0 {
                continue;
            }
            for (s, &act) in policy.states_of(y).into_iter().zip(y) {
                policy.accumulate_score(s, act, a * scale, &mut g);
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        GaeConfig { gamma: 1.0, lambda: 0.95 }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RlError::InvalidConfig(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A_t = Σ_l (γλ)^l δ_{t+l}, δ_t = r_t + γ V_{t+1} − V_t. `values` carries
/// the bootstrap value as its last entry.
pub fn gae(rewards: &[f64], values: &[f64], config: &GaeConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if values.len() != rewards.len() + 1 {
        return Err(RlError::LengthMismatch(format!(
            "{} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + config.gamma * values[t + 1] - values[t];
        running = delta + config.gamma * config.lambda * running;
        adv[t] = running;
    }
    Ok(adv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub actor_lr: f64,
    pub batch_size: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { clip_eps: 0.2, kl_beta: 0.001, actor_lr: 1e-6, batch_size: 16 }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(RlError::InvalidConfig(format!("clip_eps={} outside (0, 1)", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(RlError::InvalidConfig(format!("kl_beta={} is negative", self.kl_beta)));
        }
        if !(self.actor_lr > 0.0) {
            return Err(RlError::InvalidConfig(format!("actor_lr={} must be positive", self.actor_lr)));
        }
        if self.batch_size == 0 {
            return Err(RlError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One token decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
}

/// Transitions of a trajectory, in order.
pub fn transitions_of(policy: &TabularSequencePolicy, traj: &[usize]) -> Vec<Transition> {
    policy
        .states_of(traj)
        .into_iter()
        .zip(traj)
        .map(|(state, &action)| Transition { state, action })
        .collect()
}

/// Clipped surrogate mean_t min(ρ_t A_t, clip(ρ_t, 1−ε, 1+ε) A_t) and its
/// gradient with respect to θ.
pub fn ppo_objective(
    policy: &TabularSequencePolicy,
    old_logprobs: &[f64],
    actions: &[Transition],
    advantages: &[f64],
    config: &PpoConfig,
) -> Result<(f64, Vec<f64>)> {
    if old_logprobs.len() != actions.len() || advantages.len() != actions.len() {
        return Err(RlError::LengthMismatch(format!(
            "{} actions, {} old logprobs, {} advantages",
            actions.len(),
            old_logprobs.len(),
            advantages.len()
        )));
    }
    let mut grad = vec![0.0; policy.n_params()];
    if actions.is_empty() {
        return Ok((0.0, grad));
    }
    let n = actions.len() as f64;
    let (lo, hi) = (1.0 - config.clip_eps, 1.0 + config.clip_eps);
    let mut total = 0.0;
    for ((tr, &old), &a) in actions.iter().zip(old_logprobs).zip(advantages) {
        if tr.state >= policy.n_states() || tr.action >= policy.vocab() {
            return Err(RlError::OutOfRange(format!("{tr:?}")));
        }
        let ratio = (policy.log_prob_action(tr.state, tr.action) - old).exp();
        let unclipped = ratio * a;
        let clipped = ratio.clamp(lo, hi) * a;
        total += unclipped.min(clipped);
        // The min picks the clipped branch only when it is strictly smaller,
        // which happens exactly when the ratio has left the band in the
        // direction the advantage favours; that branch is flat in θ.
        let flat = clipped < unclipped;
        if !flat {
            policy.accumulate_score(tr.state, tr.action, ratio * a / n, &mut grad);
        }
    }
    Ok((total / n, grad))
}

/// Monte Carlo estimate of E[R_total − β (log π_θ(y) − log π_ref(y))].
pub fn kl_regularized_objective(
    policy: &TabularSequencePolicy,
    ref_policy: &TabularSequencePolicy,
    samples: &[Vec<usize>],
    rewards_total: &[f64],
    beta: f64,
) -> Result<f64> {
    if samples.len() != rewards_total.len() {
        return Err(RlError::LengthMismatch(format!(
            "{} samples, {} rewards",
            samples.len(),
            rewards_total.len()
        )));
    }
    if policy.vocab() != ref_policy.vocab() || policy.horizon() != ref_policy.horizon() {
        return Err(RlError::LengthMismatch("policy and reference differ in shape".into()));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (y, r) in samples.iter().zip(rewards_total) {
        policy.check_traj(y)?;
        let log_ratio = policy.sequence_log_prob(y) - ref_policy.sequence_log_prob(y);
        sum += r - beta * log_ratio;
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rloo,
    Ppo,
}

impl std::str::FromStr for Method {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rloo" => Ok(Method::Rloo),
            "ppo" => Ok(Method::Ppo),
            other => Err(RlError::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Harness settings. `learning_rate` is the desk-scale step size; it is not
/// the large-model actor rate in [`PpoConfig::actor_lr`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Samples per group for RLOO.
    pub k: usize,
    pub groups_per_step: usize,
    /// Optimisation passes over each PPO batch.
    pub ppo_epochs: usize,
    pub ppo: PpoConfig,
    pub gae: GaeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            k: 6,
            groups_per_step: 4,
            ppo_epochs: 4,
            ppo: PpoConfig::default(),
            gae: GaeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(RlError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.k < 2 {
            return Err(RlError::DegenerateGroup(self.k));
        }
        if self.groups_per_step == 0 || self.ppo_epochs == 0 {
            return Err(RlError::InvalidConfig("groups_per_step and ppo_epochs must be positive".into()));
        }
        self.ppo.validate()?;
        self.gae.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub expected_reward: f64,
}

/// Trains in place and returns the enumerated expected reward before the
/// first update and after every step (`steps + 1` points).
pub fn train_toy(
    policy: &mut TabularSequencePolicy,
    env: &dyn EnumerableEnv,
    method: Method,
    steps: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<Vec<TracePoint>> {
    config.validate()?;
    if env.vocab() != policy.vocab() || env.horizon() != policy.horizon() {
        return Err(RlError::LengthMismatch("environment and policy differ in shape".into()));
    }
    let reference = policy.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(TracePoint { step: 0, expected_reward: expected_reward(policy, env) });
    for step in 1..=steps {
        match method {
            Method::Rloo => rloo_step(policy, env, step as u64, seed, config)?,
            Method::Ppo => ppo_step(policy, &reference, env, step as u64, seed, config)?,
        }
        trace.push(TracePoint { step, expected_reward: expected_reward(policy, env) });
    }
    Ok(trace)
}

fn rloo_step(
    policy: &mut TabularSequencePolicy,
    env: &dyn EnumerableEnv,
    step: u64,
    seed: u64,
    config: &TrainConfig,
) -> Result<()> {
    let frozen = &*policy;
    let groups: Vec<SampledGroup> = (0..config.groups_per_step as u64)
        .into_par_iter()
        .map(|g| {
            let mut rng = rng_for(seed, &[step, g]);
            sample_group(frozen, env, config.k, g, &mut rng)
        })
        .collect();
    let grad = rloo_gradient(policy, &groups)?;
    for (t, g) in policy.theta_mut().iter_mut().zip(grad) {
        *t += config.learning_rate * g;
    }
    Ok(())
}

fn ppo_step(
    policy: &mut TabularSequencePolicy,
    reference: &TabularSequencePolicy,
    env: &dyn EnumerableEnv,
    step: u64,
    seed: u64,
    config: &TrainConfig,
) -> Result<()> {
    let mut rng = rng_for(seed, &[step]);
    let batch: Vec<Vec<usize>> = (0..config.ppo.batch_size).map(|_| policy.sample(&mut rng)).collect();

    // Terminal reward shaped by the KL penalty against the reference policy.
    let shaped: Vec<f64> = batch
        .iter()
        .map(|y| {
            let log_ratio = policy.sequence_log_prob(y) - reference.sequence_log_prob(y);
            env.reward(y) - config.ppo.kl_beta * log_ratio
        })
        .collect();

    let critic = TabularCritic::fit(policy, &batch, &shaped, config.gae.gamma);
    let mut transitions = Vec::new();
    let mut old_logprobs = Vec::new();
    let mut advantages = Vec::new();
    for (y, &r) in batch.iter().zip(&shaped) {
        let trs = transitions_of(policy, y);
        let mut rewards = vec![0.0; trs.len()];
        *rewards.last_mut().expect("horizon >= 1") = r;
        let mut values: Vec<f64> = trs.iter().map(|tr| critic.value(tr.state)).collect();
        values.push(0.0);
        advantages.extend(gae(&rewards, &values, &config.gae)?);
        old_logprobs.extend(trs.iter().map(|tr| policy.log_prob_action(tr.state, tr.action)));
        transitions.extend(trs);
    }

    for _ in 0..config.ppo_epochs {
        let (_, grad) = ppo_objective(policy, &old_logprobs, &transitions, &advantages, &config.ppo)?;
        for (t, g) in policy.theta_mut().iter_mut().zip(grad) {
            *t += config.learning_rate * g;
        }
    }
    Ok(())
}

/// Tabular state-value function fit by least squares to discounted returns
/// observed in one batch; for a table this is the per-state mean return.
#[derive(Debug, Clone)]
pub struct TabularCritic {
    values: Vec<f64>,
}

impl TabularCritic {
    pub fn fit(
        policy: &TabularSequencePolicy,
        trajectories: &[Vec<usize>],
        terminal_rewards: &[f64],
        gamma: f64,
    ) -> Self {
        let mut sum = vec![0.0; policy.n_states()];
        let mut count = vec![0usize; policy.n_states()];
        for (y, &r) in trajectories.iter().zip(terminal_rewards) {
            let states = policy.states_of(y);
            let last = states.len() - 1;
            for (t, s) in states.into_iter().enumerate() {
                sum[s] += gamma.powi((last - t) as i32) * r;
                count[s] += 1;
            }
        }
        let values = sum
            .into_iter()
            .zip(count)
            .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        TabularCritic { values }
    }

    pub fn value(&self, state: usize) -> f64 {
        self.values[state]
    }
}
