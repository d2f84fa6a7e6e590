//! Seeded navigation world: a directed page graph with typed affordances,
//! horizon-bounded episodes and a sparse terminal reward.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed;

pub const WORLD_FORMAT: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate world: {0}")]
    Degenerate(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("page {0} does not exist")]
    UnknownPage(u32),
    #[error("affordance {affordance} on page {page} targets missing page {target}")]
    DanglingAffordance { page: u32, affordance: u32, target: u32 },
    #[error("affordance id {0} is used twice")]
    DuplicateAffordance(u32),
    #[error("task `{0}` has an empty goal set")]
    EmptyGoal(String),
    #[error("episode already finished at step {step} (horizon {horizon})")]
    EpisodeOver { step: u32, horizon: u32 },
    #[error("task `{0}` has no path to its goal")]
    NoPath(String),
    #[error("unsupported world_format {0}")]
    Format(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AffordanceId(pub u32);

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affordance {
    pub id: AffordanceId,
    pub target: PageId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Page {
    pub id: PageId,
    pub affordances: Vec<Affordance>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    pub start: PageId,
    pub goals: BTreeSet<PageId>,
    /// When set, the task only succeeds on `Answer(token)` issued from a goal page.
    pub answer: Option<String>,
    pub description: String,
    pub solvable: bool,
}

impl Task {
    pub fn new(id: impl Into<String>, start: PageId, goals: impl IntoIterator<Item = PageId>) -> Self {
        let id = id.into();
        Task {
            description: id.clone(),
            id,
            start,
            goals: goals.into_iter().collect(),
            answer: None,
            solvable: false,
        }
    }

    pub fn with_answer(mut self, token: impl Into<String>) -> Self {
        self.answer = Some(token.into());
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }
}

/// Symbolic agent action. The derived ordering is the tie-break order used
/// by shortest-path planning: navigations by affordance id first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Navigate(AffordanceId),
    Answer(String),
    Wait,
    Refresh,
    Restart,
    GoBack,
}

impl Action {
    pub const PLACEHOLDERS: [Action; 3] = [Action::Wait, Action::Refresh, Action::Restart];
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Navigate(a) => write!(f, "nav:{}", a.0),
            Action::Answer(t) => write!(f, "answer:{t}"),
            Action::Wait => f.write_str("wait"),
            Action::Refresh => f.write_str("refresh"),
            Action::Restart => f.write_str("restart"),
            Action::GoBack => f.write_str("back"),
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wait" => Ok(Action::Wait),
            "refresh" => Ok(Action::Refresh),
            "restart" => Ok(Action::Restart),
            "back" => Ok(Action::GoBack),
            _ => {
                if let Some(id) = s.strip_prefix("nav:") {
                    id.parse()
                        .map(|id| Action::Navigate(AffordanceId(id)))
                        .map_err(|e| format!("bad affordance id in `{s}`: {e}"))
                } else if let Some(tok) = s.strip_prefix("answer:") {
                    Ok(Action::Answer(tok.to_string()))
                } else {
                    Err(format!("unknown action `{s}`"))
                }
            }
        }
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What the agent observes: task, current page, step index and the actions
/// executed so far. `back` is the page stack consumed by `GoBack`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsState {
    pub task: String,
    pub page: PageId,
    pub step: u32,
    pub history: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub back: Vec<PageId>,
}

impl ObsState {
    /// Stable textual key of the full observation.
    pub fn key(&self) -> String {
        let mut k = format!("{}|{}|{}", self.task, self.page.0, self.step);
        for a in &self.history {
            k.push('|');
            k.push_str(&a.to_string());
        }
        k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: ObsState,
    pub reward: f64,
    pub done: bool,
    /// `Navigate` named an affordance absent from the current page.
    pub misgrounded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub pages: u32,
    pub branching: u32,
    pub tasks: u32,
    pub horizon: u32,
    pub min_goal_distance: u32,
    /// Defaults to the horizon when absent.
    pub max_goal_distance: Option<u32>,
    pub answer_rate: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            pages: 50,
            branching: 4,
            tasks: 20,
            horizon: 12,
            min_goal_distance: 2,
            max_goal_distance: None,
            answer_rate: 0.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.pages == 0 || self.tasks == 0 || self.horizon == 0 {
            return Err(EnvError::InvalidSpec("pages, tasks and horizon must be positive".into()));
        }
        if self.branching == 0 {
            return Err(EnvError::InvalidSpec("branching must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.answer_rate) {
            return Err(EnvError::InvalidSpec("answer_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavWorld {
    pub world_format: u32,
    pub seed: u64,
    pub horizon: u32,
    pub pages: Vec<Page>,
    pub tasks: Vec<Task>,
}

/// Per-page number of actions needed to collect the reward, `None` when the
/// goal is unreachable. `GoBack` is excluded since its effect depends on history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMap {
    dist: Vec<Option<u32>>,
}

impl DistanceMap {
    pub fn get(&self, page: PageId) -> Option<u32> {
        self.dist.get(page.0 as usize).copied().flatten()
    }
}

pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<NavWorld, EnvError> {
    spec.validate()?;
    let n = spec.pages as usize;
    let mut rng = seed::rng(seed::derive(seed, &["world"]));

    // A random Hamiltonian cycle keeps every page reachable; the remaining
    // out-edges are uniform.
    let mut order: Vec<u32> = (0..spec.pages).collect();
    order.shuffle(&mut rng);
    let mut cycle_next = vec![0u32; n];
    for i in 0..n {
        cycle_next[order[i] as usize] = order[(i + 1) % n];
    }

    let mut pages = Vec::with_capacity(n);
    let mut next_aff = 0u32;
    for p in 0..spec.pages {
        let mut targets: Vec<u32> = Vec::new();
        if n > 1 {
            targets.push(cycle_next[p as usize]);
            let want = (spec.branching as usize).min(n - 1);
            let mut others: Vec<u32> = (0..spec.pages).filter(|&q| q != p && q != targets[0]).collect();
            others.shuffle(&mut rng);
            targets.extend(others.into_iter().take(want - 1));
            targets.shuffle(&mut rng);
        }
        let affordances = targets
            .into_iter()
            .map(|t| {
                let a = Affordance { id: AffordanceId(next_aff), target: PageId(t) };
                next_aff += 1;
                a
            })
            .collect();
        pages.push(Page { id: PageId(p), affordances });
    }

    let mut world = NavWorld { world_format: WORLD_FORMAT, seed, horizon: spec.horizon, pages, tasks: Vec::new() };
    let max_d = spec.max_goal_distance.unwrap_or(spec.horizon);
    for t in 0..spec.tasks {
        let needs_answer = rng.random::<f64>() < spec.answer_rate;
        let extra = u32::from(needs_answer);
        let mut placed = None;
        let mut fallback = None;
        for _ in 0..200 {
            let start = PageId(rng.random_range(0..spec.pages));
            let d = world.nav_distances_from(start);
            let within = |lo: u32, hi: u32| -> Vec<PageId> {
                (0..spec.pages)
                    .filter(|&q| matches!(d[q as usize], Some(x) if x >= lo && x <= hi && x + extra <= spec.horizon))
                    .map(PageId)
                    .collect()
            };
            let preferred = within(spec.min_goal_distance.max(1), max_d);
            if !preferred.is_empty() {
                placed = Some((start, *preferred.choose(&mut rng).expect("non-empty")));
                break;
            }
            if fallback.is_none() {
                let any = within(1, spec.horizon);
                if !any.is_empty() {
                    fallback = Some((start, *any.choose(&mut rng).expect("non-empty")));
                }
            }
        }
        let (start, goal) = placed.or(fallback).ok_or_else(|| {
            EnvError::Degenerate(format!("no start/goal pair within horizon {} for task {t}", spec.horizon))
        })?;
        let id = format!("t{t:03}");
        let mut task = Task::new(id.clone(), start, [goal]).with_description(format!("{id}:goto-{}", goal.0));
        if needs_answer {
            task = task.with_answer(format!("a{t}"));
        }
        world.tasks.push(task);
    }
    world.refresh_solvable();
    if !world.tasks.iter().any(|t| t.solvable) {
        return Err(EnvError::Degenerate("no solvable task could be placed".into()));
    }
    Ok(world)
}

impl NavWorld {
    /// Assembles a hand-built world, validating every invariant and computing
    /// the `solvable` flags.
    pub fn from_parts(pages: Vec<Page>, tasks: Vec<Task>, horizon: u32, seed: u64) -> Result<Self, EnvError> {
        if horizon == 0 {
            return Err(EnvError::InvalidSpec("horizon must be positive".into()));
        }
        let mut world = NavWorld { world_format: WORLD_FORMAT, seed, horizon, pages, tasks };
        world.validate()?;
        world.refresh_solvable();
        Ok(world)
    }

    /// Linear chain `0 -> 1 -> ... -> n-1` with one task from 0 to the last page.
    pub fn chain(n: u32, horizon: u32) -> Result<Self, EnvError> {
        let pages = (0..n)
            .map(|p| Page {
                id: PageId(p),
                affordances: if p + 1 < n {
                    vec![Affordance { id: AffordanceId(p), target: PageId(p + 1) }]
                } else {
                    Vec::new()
                },
            })
            .collect();
        let tasks = vec![Task::new("chain", PageId(0), [PageId(n.saturating_sub(1))])];
        NavWorld::from_parts(pages, tasks, horizon, 0)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.world_format != WORLD_FORMAT {
            return Err(EnvError::Format(self.world_format));
        }
        let mut seen = BTreeSet::new();
        for (i, page) in self.pages.iter().enumerate() {
            if page.id.0 as usize != i {
                return Err(EnvError::UnknownPage(page.id.0));
            }
            for a in &page.affordances {
                if a.target.0 as usize >= self.pages.len() {
                    return Err(EnvError::DanglingAffordance { page: page.id.0, affordance: a.id.0, target: a.target.0 });
                }
                if !seen.insert(a.id) {
                    return Err(EnvError::DuplicateAffordance(a.id.0));
                }
            }
        }
        for t in &self.tasks {
            if t.goals.is_empty() {
                return Err(EnvError::EmptyGoal(t.id.clone()));
            }
            for p in std::iter::once(&t.start).chain(t.goals.iter()) {
                self.page(*p)?;
            }
        }
        Ok(())
    }

    fn refresh_solvable(&mut self) {
        let flags: Vec<bool> = self
            .tasks
            .iter()
            .map(|t| matches!(self.distances(t).get(t.start), Some(d) if d <= self.horizon))
            .collect();
        for (t, f) in self.tasks.iter_mut().zip(flags) {
            t.solvable = f;
        }
    }

    pub fn page(&self, id: PageId) -> Result<&Page, EnvError> {
        self.pages.get(id.0 as usize).ok_or(EnvError::UnknownPage(id.0))
    }

    pub fn task(&self, id: &str) -> Result<&Task, EnvError> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| EnvError::UnknownTask(id.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let w: NavWorld = serde_json::from_str(s).map_err(|e| e.to_string())?;
        w.validate().map_err(|e| e.to_string())?;
        Ok(w)
    }

    /// SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        seed::sha256_hex(self.to_json().as_bytes())
    }

    pub fn reset(&self, task: &Task) -> ObsState {
        ObsState { task: task.id.clone(), page: task.start, step: 0, history: Vec::new(), back: Vec::new() }
    }

    /// Breadth-first navigation distance from `start` to every page.
    fn nav_distances_from(&self, start: PageId) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.pages.len()];
        let mut queue = VecDeque::new();
        dist[start.0 as usize] = Some(0);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let d = dist[p.0 as usize].expect("queued pages have a distance");
            for a in &self.pages[p.0 as usize].affordances {
                let slot = &mut dist[a.target.0 as usize];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(a.target);
                }
            }
        }
        dist
    }

    /// Actions-to-reward from every page for `task`, counting `Restart` as a
    /// one-step jump to the start page and the final `Answer` when required.
    pub fn distances(&self, task: &Task) -> DistanceMap {
        let n = self.pages.len();
        let mut rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        for page in &self.pages {
            for a in &page.affordances {
                rev[a.target.0 as usize].push(page.id.0);
            }
        }
        let extra = u32::from(task.answer.is_some());
        let mut nav = vec![None; n];
        let mut queue = VecDeque::new();
        for g in &task.goals {
            if let Some(slot) = nav.get_mut(g.0 as usize) {
                *slot = Some(extra);
                queue.push_back(g.0);
            }
        }
        while let Some(p) = queue.pop_front() {
            let d: u32 = nav[p as usize].expect("queued pages have a distance");
            for &q in &rev[p as usize] {
                if nav[q as usize].is_none() {
                    nav[q as usize] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
        let via_restart = nav.get(task.start.0 as usize).copied().flatten().map(|d| d + 1);
        let dist = nav
            .into_iter()
            .map(|d| match (d, via_restart) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            })
            .collect();
        DistanceMap { dist }
    }

    /// Every action available on `page` for `task`, in tie-break order.
    /// `GoBack` is omitted; `Answer` is offered only on goal pages.
    pub fn markov_actions(&self, task: &Task, page: PageId) -> Result<Vec<Action>, EnvError> {
        let mut out: Vec<Action> = self.page(page)?.affordances.iter().map(|a| Action::Navigate(a.id)).collect();
        out.sort();
        if let Some(tok) = &task.answer {
            if task.goals.contains(&page) {
                out.push(Action::Answer(tok.clone()));
            }
        }
        out.extend(Action::PLACEHOLDERS);
        Ok(out)
    }

    /// Page reached by a history-independent action; `None` for `GoBack` and
    /// for navigations that are not available on `page`.
    pub fn successor(&self, task: &Task, page: PageId, action: &Action) -> Option<PageId> {
        match action {
            Action::Navigate(id) => {
                self.pages.get(page.0 as usize)?.affordances.iter().find(|a| a.id == *id).map(|a| a.target)
            }
            Action::Answer(_) | Action::Wait | Action::Refresh => Some(page),
            Action::Restart => Some(task.start),
            Action::GoBack => None,
        }
    }

    /// Whether executing `action` from `page` collects the task reward.
    pub fn is_rewarding(&self, task: &Task, page: PageId, action: &Action) -> bool {
        match &task.answer {
            Some(tok) => matches!(action, Action::Answer(a) if a == tok) && task.goals.contains(&page),
            None => match self.successor(task, page, action) {
                Some(next) => task.goals.contains(&next),
                None => false,
            },
        }
    }

    /// Actions on a shortest route to the reward from `page`.
    pub fn optimal_actions(&self, task: &Task, dist: &DistanceMap, page: PageId) -> Result<Vec<Action>, EnvError> {
        let Some(d) = dist.get(page) else { return Ok(Vec::new()) };
        if d == 0 {
            return Ok(Vec::new());
        }
        Ok(self
            .markov_actions(task, page)?
            .into_iter()
            .filter(|a| {
                if self.is_rewarding(task, page, a) {
                    return d == 1;
                }
                self.successor(task, page, a).and_then(|next| dist.get(next)).is_some_and(|nd| nd + 1 == d)
            })
            .collect())
    }

    /// The tie-broken next action on a shortest route from `page`.
    pub fn golden_action(&self, task: &Task, dist: &DistanceMap, page: PageId) -> Result<Option<Action>, EnvError> {
        Ok(self.optimal_actions(task, dist, page)?.into_iter().next())
    }

    /// Shortest action sequence from the task's start page, ties broken by
    /// lowest affordance id.
    pub fn golden_path(&self, task: &Task) -> Result<Vec<Action>, EnvError> {
        let dist = self.distances(task);
        let Some(total) = dist.get(task.start) else {
            return Err(EnvError::NoPath(task.id.clone()));
        };
        let mut page = task.start;
        let mut path = Vec::with_capacity(total as usize);
        for _ in 0..total {
            let a = self.golden_action(task, &dist, page)?.ok_or_else(|| EnvError::NoPath(task.id.clone()))?;
            page = self.successor(task, page, &a).expect("golden actions are history independent");
            path.push(a);
        }
        Ok(path)
    }

    /// Executes one action. Pure: the input state is not modified.
    pub fn step(&self, state: &ObsState, action: &Action) -> Result<StepOutcome, EnvError> {
        if state.step >= self.horizon {
            return Err(EnvError::EpisodeOver { step: state.step, horizon: self.horizon });
        }
        let task = self.task(&state.task)?;
        let mut next = state.clone();
        let mut misgrounded = false;
        match action {
            Action::Navigate(_) => match self.successor(task, state.page, action) {
                Some(target) => {
                    next.back.push(state.page);
                    next.page = target;
                }
                None => misgrounded = true,
            },
            Action::GoBack => {
                if let Some(p) = next.back.pop() {
                    next.page = p;
                }
            }
            Action::Restart => {
                next.page = task.start;
                next.back.clear();
            }
            Action::Answer(_) | Action::Wait | Action::Refresh => {}
        }
        next.history.push(action.clone());
        next.step += 1;
        let success = match &task.answer {
            Some(tok) => matches!(action, Action::Answer(a) if a == tok) && task.goals.contains(&next.page),
            None => task.goals.contains(&next.page),
        };
        let reward = if success { 1.0 } else { 0.0 };
        let done = success || next.step == self.horizon;
        Ok(StepOutcome { state: next, reward, done, misgrounded })
    }
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return<T: Scalar>(rewards: &[T], gamma: T) -> T {
    rewards.iter().rev().fold(T::zero(), |acc, &r| r + gamma * acc)
}
