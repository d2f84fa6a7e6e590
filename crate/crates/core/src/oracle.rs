//! Exact tabular solvers over `(page, remaining budget)` states.
//!
//! Used by tests and analyses as ground truth. Both solvers use the same
//! backup `Q(s, a) = r + gamma * V(s')`, with no bootstrap after the reward
//! or once the budget is exhausted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::collect::Transition;
use crate::env::{Action, EnvError, NavWorld, PageId, Task};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct OracleState {
    pub page: PageId,
    /// Steps left before the horizon.
    pub budget: u32,
}

impl OracleState {
    pub fn new(page: PageId, budget: u32) -> Self {
        OracleState { page, budget }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularValues<T> {
    pub v: BTreeMap<OracleState, T>,
    pub q: BTreeMap<(OracleState, Action), T>,
    pub gamma: T,
}

impl<T: Scalar> TabularValues<T> {
    fn empty(gamma: T) -> Self {
        TabularValues { v: BTreeMap::new(), q: BTreeMap::new(), gamma }
    }

    /// `V(s)`, zero for states outside the table (exhausted budget included).
    pub fn value(&self, s: OracleState) -> T {
        self.v.get(&s).copied().unwrap_or_else(T::zero)
    }

    pub fn q_value(&self, s: OracleState, a: &Action) -> Option<T> {
        self.q.get(&(s, a.clone())).copied()
    }

    /// Debug dump: `page,budget,action,q`, one row per table entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("page,budget,action,q\n");
        for ((s, a), q) in &self.q {
            let _ = writeln!(out, "{},{},{},{}", s.page.0, s.budget, a, q);
        }
        out
    }

    fn recompute_v(&mut self) {
        let mut v: BTreeMap<OracleState, T> = BTreeMap::new();
        for ((s, _), &q) in &self.q {
            let e = v.entry(*s).or_insert(q);
            if q > *e {
                *e = q;
            }
        }
        self.v = v;
    }
}

/// Finite-horizon optimal values of the known MDP for one task. Iterates the
/// Bellman optimality operator until successive tables differ by less than
/// `tol` in sup norm. `GoBack` is left out of the action set because its
/// effect is not a function of `(page, budget)`.
pub fn value_iteration<T: Scalar>(world: &NavWorld, task: &Task, gamma: T, tol: T) -> Result<TabularValues<T>, EnvError> {
    let mut edges: Vec<(OracleState, Action, T, Option<OracleState>)> = Vec::new();
    for page in &world.pages {
        let actions = world.markov_actions(task, page.id)?;
        for budget in 1..=world.horizon {
            let s = OracleState::new(page.id, budget);
            for a in &actions {
                let rewarded = world.is_rewarding(task, page.id, a);
                let next = world.successor(task, page.id, a).expect("markov actions have successors");
                let cont = (!rewarded && budget > 1).then(|| OracleState::new(next, budget - 1));
                edges.push((s, a.clone(), if rewarded { T::one() } else { T::zero() }, cont));
            }
        }
    }
    Ok(solve(edges.into_iter().map(|(s, a, r, n)| (s, a, vec![(r, n)])), gamma, tol))
}

/// Optimal values when the maximization at every state ranges only over the
/// actions that appear at that state in `dataset`, grouped per task.
///
/// States are keyed by `(page, horizon - step)`. If the same key and action
/// were observed with different outcomes (only possible through `GoBack`),
/// the best outcome is kept.
pub fn in_sample_optimal_q<'a, T: Scalar>(
    dataset: impl IntoIterator<Item = &'a Transition>,
    gamma: T,
    horizon: u32,
    tol: T,
) -> BTreeMap<String, TabularValues<T>> {
    type Outcomes<T> = BTreeMap<(OracleState, Action), Vec<(T, Option<OracleState>)>>;
    let mut per_task: BTreeMap<String, Outcomes<T>> = BTreeMap::new();
    for t in dataset {
        let budget = horizon.saturating_sub(t.state.step);
        let s = OracleState::new(t.state.page, budget);
        let next = (!t.done).then(|| OracleState::new(t.next_state.page, budget.saturating_sub(1)));
        let r = T::of(t.reward);
        let outs = per_task.entry(t.state.task.clone()).or_default().entry((s, t.action.clone())).or_default();
        if !outs.contains(&(r, next)) {
            outs.push((r, next));
        }
    }
    per_task
        .into_iter()
        .map(|(task, edges)| (task, solve(edges.into_iter().map(|((s, a), o)| (s, a, o)), gamma, tol)))
        .collect()
}

fn solve<T: Scalar>(
    edges: impl Iterator<Item = (OracleState, Action, Vec<(T, Option<OracleState>)>)>,
    gamma: T,
    tol: T,
) -> TabularValues<T> {
    let edges: Vec<_> = edges.collect();
    let mut table = TabularValues::empty(gamma);
    for (s, a, _) in &edges {
        table.q.insert((*s, a.clone()), T::zero());
    }
    table.recompute_v();
    // Budgets strictly decrease along edges, so this terminates after at most
    // horizon + 1 sweeps; the cap only guards against malformed input.
    for _ in 0..10_000 {
        let mut delta = T::zero();
        for (s, a, outs) in &edges {
            let backup = outs
                .iter()
                .map(|(r, next)| *r + next.map_or_else(T::zero, |n| gamma * table.value(n)))
                .fold(T::neg_infinity(), T::max);
            let slot = table.q.get_mut(&(*s, a.clone())).expect("seeded above");
            delta = delta.max((backup - *slot).abs());
            *slot = backup;
        }
        table.recompute_v();
        if delta < tol {
            break;
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::AffordanceId;

    #[test]
    fn one_step_chain() {
        let w = NavWorld::chain(2, 3).unwrap();
        let vi = value_iteration(&w, &w.tasks[0], 0.99, 1e-12).unwrap();
        let s = OracleState::new(PageId(0), 3);
        assert_eq!(vi.q_value(s, &Action::Navigate(AffordanceId(0))), Some(1.0));
        assert_eq!(vi.value(s), 1.0);
    }

    #[test]
    fn two_step_chain_discounts_once() {
        let w = NavWorld::chain(3, 4).unwrap();
        let vi = value_iteration(&w, &w.tasks[0], 0.99, 1e-12).unwrap();
        let s = OracleState::new(PageId(0), 4);
        assert!((vi.q_value(s, &Action::Navigate(AffordanceId(0))).unwrap() - 0.99f64).abs() < 1e-12);
        // Not enough budget left to reach the goal.
        assert_eq!(vi.value(OracleState::new(PageId(0), 1)), 0.0);
    }

    #[test]
    fn undiscounted_start_value_is_one() {
        let w = crate::env::generate_world(&crate::env::WorldSpec { pages: 12, tasks: 4, horizon: 8, ..Default::default() }, 5)
            .unwrap();
        for t in w.tasks.iter().filter(|t| t.solvable) {
            let vi = value_iteration(&w, t, 1.0f64, 1e-12).unwrap();
            assert_eq!(vi.value(OracleState::new(t.start, w.horizon)), 1.0);
            for (s, &v) in &vi.v {
                assert!((0.0..=1.0).contains(&v), "{s:?} {v}");
            }
        }
    }

    #[test]
    fn empty_dataset_gives_empty_tables() {
        let t: Vec<Transition> = Vec::new();
        assert!(in_sample_optimal_q::<f64>(&t, 0.99, 5, 1e-9).is_empty());
    }
}
