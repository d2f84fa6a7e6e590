//! Benchmark harness and analyses over recorded episodes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use num_integer::binomial;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_episode, AgentError, EpisodeRecord, Policy, QScorer};
use crate::collect::{with_workers, Refinement};
use crate::embed::Embedder;
use crate::env::{NavWorld, Task};
use crate::iql::ValueNets;
use crate::proposer::ProposerConfig;
use crate::scalar::Scalar;
use crate::seed;

pub const REPORT_FORMAT: u32 = 1;

/// Exact rational probability.
pub type Prob = Ratio<i128>;
/// Exact currency amount.
pub type Money = Ratio<i128>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("repeats must be at least {need}, got {got}")]
    Repeats { need: usize, got: usize },
    #[error("k = {k} exceeds the {n} recorded trials")]
    KTooLarge { k: usize, n: usize },
    #[error("no outcomes")]
    Empty,
    #[error("episode for task {task} has no scores (only Q-scored agents record values)")]
    NoScores { task: String },
    #[error("no price for policy `{0}`")]
    UnknownPolicy(String),
    #[error("bad price `{0}`")]
    BadPrice(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_format: u32,
    pub agent: String,
    pub repeats: usize,
    pub seed: u64,
    pub tasks: Vec<String>,
    /// `outcomes[task][repeat]`.
    pub outcomes: Vec<Vec<bool>>,
    pub steps: Vec<Vec<u32>>,
    pub success_rate: f64,
    pub success_se: f64,
    /// Absent when nothing succeeded.
    pub avg_steps_success: Option<f64>,
    pub avg_steps_se: Option<f64>,
    /// Mean over tasks of the population variance of outcomes; needs two
    /// or more repeats.
    pub mean_task_variance: Option<f64>,
    pub variance_estimator: String,
    /// `(k, pass@k)` for `k` in `1..=repeats`.
    pub pass_at_k: Vec<(usize, f64)>,
    pub total_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSummary>,
    /// Resolved configuration the report was produced with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn from_episodes(agent: String, repeats: usize, seed: u64, tasks: &[Task], episodes: &[EpisodeRecord]) -> Result<Self, EvalError> {
        if repeats == 0 {
            return Err(EvalError::Repeats { need: 1, got: 0 });
        }
        let mut outcomes = vec![Vec::with_capacity(repeats); tasks.len()];
        let mut steps = vec![Vec::with_capacity(repeats); tasks.len()];
        let index: BTreeMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
        for ep in episodes {
            let i = index[ep.task.as_str()];
            outcomes[i].push(ep.success);
            steps[i].push(ep.len() as u32);
        }
        let flat: Vec<f64> = outcomes.iter().flatten().map(|&b| f64::from(u8::from(b))).collect();
        let (success_rate, success_se) = mean_se(&flat);
        let won: Vec<f64> = outcomes
            .iter()
            .zip(&steps)
            .flat_map(|(o, s)| o.iter().zip(s).filter(|(w, _)| **w).map(|(_, &n)| f64::from(n)))
            .collect();
        let (avg_steps_success, avg_steps_se) = if won.is_empty() {
            (None, None)
        } else {
            let (m, se) = mean_se(&won);
            (Some(m), Some(se))
        };
        let mean_task_variance = task_variance(&outcomes).ok();
        let pass_at_k = (1..=repeats).map(|k| (k, pass_at_k(&outcomes, k).map_or(0.0, |p| p))).collect();
        Ok(EvalReport {
            report_format: REPORT_FORMAT,
            agent,
            repeats,
            seed,
            tasks: tasks.iter().map(|t| t.id.clone()).collect(),
            outcomes,
            steps,
            success_rate,
            success_se,
            avg_steps_success,
            avg_steps_se,
            mean_task_variance,
            variance_estimator: "population".into(),
            pass_at_k,
            total_steps: episodes.iter().map(|e| e.len() as u64).sum(),
            cost: None,
            config: None,
        })
    }

    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, p)| *p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `task,repeat,success,steps`.
    pub fn outcomes_csv(&self) -> String {
        let mut out = String::from("task,repeat,success,steps\n");
        for (t, (o, s)) in self.tasks.iter().zip(self.outcomes.iter().zip(&self.steps)) {
            for (r, (w, n)) in o.iter().zip(s).enumerate() {
                let _ = writeln!(out, "{t},{r},{},{n}", u8::from(*w));
            }
        }
        out
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Seed of repeat `r` of `task` in an evaluation.
pub fn eval_seed(seed: u64, repeat: usize, task: &str) -> u64 {
    seed::derive(seed, &["eval", &repeat.to_string(), task])
}

/// Runs `repeats` episodes per task. Episodes are returned in
/// `(task, repeat)` order regardless of `workers`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    world: &NavWorld,
    tasks: &[Task],
    policy: Policy<'_>,
    proposer: &ProposerConfig,
    repeats: usize,
    seed: u64,
    workers: usize,
) -> Result<(EvalReport, Vec<EpisodeRecord>), EvalError> {
    if repeats == 0 {
        return Err(EvalError::Repeats { need: 1, got: 0 });
    }
    let jobs: Vec<(&Task, usize)> = tasks.iter().flat_map(|t| (0..repeats).map(move |r| (t, r))).collect();
    let episodes: Vec<EpisodeRecord> = with_workers(workers, || {
        jobs.par_iter()
            .map(|&(t, r)| run_episode(world, t, policy, proposer, eval_seed(seed, r, &t.id)))
            .collect::<Result<_, _>>()
    })?;
    let report = EvalReport::from_episodes(policy.tag().to_string(), repeats, seed, tasks, &episodes)?;
    Ok((report, episodes))
}

/// Mean over tasks of the population variance of each task's outcomes.
pub fn task_variance(outcomes: &[Vec<bool>]) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for row in outcomes {
        if row.len() < 2 {
            return Err(EvalError::Repeats { need: 2, got: row.len() });
        }
        let p = row.iter().filter(|&&b| b).count() as f64 / row.len() as f64;
        total += p * (1.0 - p);
    }
    Ok(total / outcomes.len() as f64)
}

/// Unbiased pass@k of one task with `c` successes out of `n` trials:
/// `1 - C(n - c, k) / C(n, k)`.
pub fn pass_at_k_task(n: usize, c: usize, k: usize) -> Result<Prob, EvalError> {
    if k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    let miss = Prob::new(binomial(n - c.min(n), k) as i128, binomial(n, k) as i128);
    Ok(Prob::from_integer(1) - miss)
}

/// Task-averaged pass@k, exact.
pub fn pass_at_k_exact(outcomes: &[Vec<bool>], k: usize) -> Result<Prob, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = Prob::zero();
    for row in outcomes {
        let c = row.iter().filter(|&&b| b).count();
        sum += pass_at_k_task(row.len(), c, k)?;
    }
    Ok(sum / Prob::from_integer(outcomes.len() as i128))
}

pub fn pass_at_k(outcomes: &[Vec<bool>], k: usize) -> Result<f64, EvalError> {
    Ok(pass_at_k_exact(outcomes, k)?.to_f64().expect("bounded ratio"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureBreakdown {
    pub not_proposed: f64,
    pub proposed_selected: f64,
    pub proposed_not_selected: f64,
    /// Steps classified.
    pub steps: u64,
    /// Steps with no route to the reward, left out of the fractions.
    pub skipped: u64,
}

impl FailureBreakdown {
    pub fn to_csv(&self) -> String {
        format!(
            "category,fraction\nnot_proposed,{}\nproposed_selected,{}\nproposed_not_selected,{}\n",
            self.not_proposed, self.proposed_selected, self.proposed_not_selected
        )
    }
}

/// Classifies every step by whether the replanned golden action was among
/// the candidates and whether it was taken. Matching is by action equality.
pub fn failure_breakdown(world: &NavWorld, episodes: &[EpisodeRecord]) -> Result<FailureBreakdown, EvalError> {
    let mut counts = [0u64; 3];
    let mut skipped = 0;
    let mut dists = BTreeMap::new();
    for ep in episodes {
        let task = world.task(&ep.task).map_err(AgentError::from)?;
        let dist = dists.entry(task.id.clone()).or_insert_with(|| world.distances(task));
        for s in &ep.steps {
            let Some(golden) = world.golden_action(task, dist, s.state.page).map_err(AgentError::from)? else {
                skipped += 1;
                continue;
            };
            match s.candidates.position(&golden) {
                None => counts[0] += 1,
                Some(i) if i == s.chosen => counts[1] += 1,
                Some(_) => counts[2] += 1,
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let frac = |c: u64| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    Ok(FailureBreakdown {
        not_proposed: frac(counts[0]),
        proposed_selected: frac(counts[1]),
        proposed_not_selected: frac(counts[2]),
        steps: total,
        skipped,
    })
}

/// Per-step `step,v,chosen_q,q0,q1,...` for an episode with recorded scores.
pub fn trace_values(episode: &EpisodeRecord) -> Result<String, EvalError> {
    let width = episode.steps.iter().map(|s| s.candidates.len()).max().unwrap_or(0);
    let mut out = String::from("step,v,chosen_q");
    for i in 0..width {
        let _ = write!(out, ",q{i}");
    }
    out.push('\n');
    for s in &episode.steps {
        let scores = s.scores.as_ref().ok_or_else(|| EvalError::NoScores { task: episode.task.clone() })?;
        let v = s.value.map_or(String::new(), |v| v.to_string());
        let _ = write!(out, "{},{v},{}", s.state.step, scores[s.chosen]);
        for i in 0..width {
            let _ = write!(out, ",{}", scores.get(i).map_or(String::new(), |q| q.to_string()));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Decimal string to exact money, e.g. `"0.15"` -> 3/20.
pub fn parse_money(s: &str) -> Result<Money, EvalError> {
    let bad = || EvalError::BadPrice(s.to_string());
    let s = s.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() || int.starts_with('-') {
        return Err(bad());
    }
    let digits = format!("{int}{frac}");
    let num = i128::from_str(if digits.is_empty() { "0" } else { &digits }).map_err(|_| bad())?;
    let den = 10i128.checked_pow(frac.len() as u32).ok_or_else(bad)?;
    Ok(Money::new(num, den))
}

/// Exact decimal with at least two places when the fraction terminates,
/// otherwise the nearest float.
pub fn format_money(m: &Money) -> String {
    let mut den = *m.denom();
    let mut places = 0u32;
    for f in [2, 5] {
        while den % f == 0 {
            den /= f;
            places += 1;
        }
    }
    if den != 1 {
        return format!("{}", m.to_f64().unwrap_or(f64::NAN));
    }
    let places = places.max(2);
    let scaled = (*m * Money::from_integer(10i128.pow(places))).to_integer();
    let (sign, scaled) = if scaled < 0 { ("-", -scaled) } else { ("", scaled) };
    let unit = 10i128.pow(places);
    let frac = format!("{:0width$}", scaled % unit, width = places as usize);
    let frac = frac.trim_end_matches('0');
    format!("{sign}{}.{:0<2}", scaled / unit, frac)
}

/// Prices per one million tokens, kept as decimal strings on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Price {
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub prices: BTreeMap<String, Price>,
    /// Price table entry for the proposer.
    pub proposer: String,
    /// Price table entry for the embedder behind the Q-function.
    pub scorer: String,
    pub proposer_input_tokens: u64,
    pub proposer_output_tokens: u64,
    /// Per candidate.
    pub scorer_input_tokens: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        let p = |i: &str, o: &str| Price { input: i.into(), output: o.into() };
        let prices = BTreeMap::from([
            ("GPT-4.1".to_string(), p("2.00", "8.00")),
            ("Qwen2.5-VL-72B".to_string(), p("1.00", "4.00")),
            ("Qwen2.5-VL-7B".to_string(), p("0.15", "0.60")),
            ("Qwen2.5-VL-3B".to_string(), p("0.10", "0.40")),
        ]);
        CostModel {
            prices,
            proposer: "Qwen2.5-VL-7B".into(),
            scorer: "Qwen2.5-VL-3B".into(),
            proposer_input_tokens: 3_000,
            proposer_output_tokens: 300,
            scorer_input_tokens: 2_500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Prompting,
    Random,
    EpsGreedy,
    BestOfQ { n: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostBreakdown {
    pub proposer_input: Money,
    pub proposer_output: Money,
    pub scorer_input: Money,
}

impl CostBreakdown {
    pub fn total(&self) -> Money {
        self.proposer_input + self.proposer_output + self.scorer_input
    }

    pub fn to_csv(&self) -> String {
        format!(
            "term,cost\nproposer_input,{}\nproposer_output,{}\nscorer_input,{}\ntotal,{}\n",
            format_money(&self.proposer_input),
            format_money(&self.proposer_output),
            format_money(&self.scorer_input),
            format_money(&self.total())
        )
    }
}

/// Cost terms rendered as decimal strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub proposer_input: String,
    pub proposer_output: String,
    pub scorer_input: String,
    pub total: String,
}

impl From<&CostBreakdown> for CostSummary {
    fn from(c: &CostBreakdown) -> Self {
        CostSummary {
            proposer_input: format_money(&c.proposer_input),
            proposer_output: format_money(&c.proposer_output),
            scorer_input: format_money(&c.scorer_input),
            total: format_money(&c.total()),
        }
    }
}

impl CostModel {
    fn price(&self, name: &str) -> Result<(Money, Money), EvalError> {
        let p = self.prices.get(name).ok_or_else(|| EvalError::UnknownPolicy(name.to_string()))?;
        Ok((parse_money(&p.input)?, parse_money(&p.output)?))
    }

    /// Cost of `tokens` at `per_million`.
    pub fn tokens(tokens: u64, per_million: Money) -> Money {
        Money::from_integer(tokens as i128) * per_million / Money::from_integer(1_000_000)
    }

    /// Proposer tokens for every step, plus for Best-of-Q one scorer input
    /// per candidate per step. The scorer emits no tokens.
    pub fn estimate(&self, steps: u64, kind: AgentKind) -> Result<CostBreakdown, EvalError> {
        let (pin, pout) = self.price(&self.proposer)?;
        let scorer_input = match kind {
            AgentKind::BestOfQ { n } => {
                let (sin, _) = self.price(&self.scorer)?;
                Self::tokens(steps * n as u64 * self.scorer_input_tokens, sin)
            }
            _ => Money::zero(),
        };
        Ok(CostBreakdown {
            proposer_input: Self::tokens(steps * self.proposer_input_tokens, pin),
            proposer_output: Self::tokens(steps * self.proposer_output_tokens, pout),
            scorer_input,
        })
    }
}

pub fn cost_estimate(model: &CostModel, steps: u64, kind: AgentKind) -> Result<CostBreakdown, EvalError> {
    model.estimate(steps, kind)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub cumulative_runs: u32,
    pub episodes: u64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleEfficiency {
    pub points: Vec<CurvePoint>,
    pub prompting_baseline: f64,
}

impl SampleEfficiency {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cumulative_runs,episodes,success_rate,prompting_baseline\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.cumulative_runs, p.episodes, p.success_rate, self.prompting_baseline);
        }
        out
    }
}

/// Evaluates every refinement checkpoint and the Prompting baseline on the
/// same benchmark seeds.
#[allow(clippy::too_many_arguments)]
pub fn sample_efficiency_curve<T: Scalar>(
    world: &NavWorld,
    tasks: &[Task],
    refinement: &Refinement<T>,
    embedder: &Embedder,
    proposer: &ProposerConfig,
    repeats: usize,
    seed: u64,
    workers: usize,
) -> Result<SampleEfficiency, EvalError> {
    let (base, _) = evaluate(world, tasks, Policy::Prompting, proposer, repeats, seed, workers)?;
    let mut points = Vec::new();
    for (nets, summary) in refinement.checkpoints.iter().zip(&refinement.cycles) {
        let scorer = QScorer::new(nets, embedder)?;
        let (r, _) = evaluate(world, tasks, Policy::BestOfQ(&scorer), proposer, repeats, seed, workers)?;
        points.push(CurvePoint { cumulative_runs: summary.cumulative_runs, episodes: summary.episodes, success_rate: r.success_rate });
    }
    Ok(SampleEfficiency { points, prompting_baseline: base.success_rate })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub n_train: usize,
    pub n_infer: usize,
    pub success_rate: f64,
    pub avg_steps_success: Option<f64>,
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("n_train,n_infer,success_rate,avg_steps_success\n");
    for c in cells {
        let steps = c.avg_steps_success.map_or(String::new(), |s| s.to_string());
        let _ = writeln!(out, "{},{},{},{steps}", c.n_train, c.n_infer, c.success_rate);
    }
    out
}

/// Re-evaluates each `(n_train, checkpoint)` with the proposer set to every
/// inference-time `N`.
#[allow(clippy::too_many_arguments)]
pub fn ablate_n<T: Scalar>(
    world: &NavWorld,
    tasks: &[Task],
    checkpoints: &[(usize, &ValueNets<T>)],
    n_infer: &[usize],
    embedder: &Embedder,
    proposer: &ProposerConfig,
    repeats: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<AblationCell>, EvalError> {
    let mut cells = Vec::new();
    for &(n_train, nets) in checkpoints {
        let scorer = QScorer::new(nets, embedder)?;
        for &n in n_infer {
            let cfg = proposer.with_candidates(n);
            let (r, _) = evaluate(world, tasks, Policy::BestOfQ(&scorer), &cfg, repeats, seed, workers)?;
            cells.push(AblationCell { n_train, n_infer: n, success_rate: r.success_rate, avg_steps_success: r.avg_steps_success });
        }
    }
    Ok(cells)
}
