//! Maximum weight independent set: exact branch and bound per connected
//! component, greedy `w/(deg+1)` fallback.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use super::ConflictGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct MwisConfig {
    /// Largest component solved exactly. At most 64.
    pub exact_cap: usize,
    /// Search nodes per component before giving up on exactness.
    pub node_budget: u64,
}

impl Default for MwisConfig {
    fn default() -> Self {
        MwisConfig {
            exact_cap: 64,
            node_budget: 200_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MwisStats {
    /// Search nodes plus greedy selection steps.
    pub steps: u64,
    /// Components handed to greedy because of the cap or the budget.
    pub greedy_fallbacks: u64,
}

/// Sorted vertex indices of the chosen set.
pub type Selection = Vec<usize>;

pub fn weight_of(g: &ConflictGraph, set: &[usize]) -> u64 {
    set.iter().map(|&v| g.weights[v]).sum()
}

/// Connected components, each sorted, ordered by smallest vertex.
pub fn components(g: &ConflictGraph) -> Vec<Vec<usize>> {
    let n = g.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            for &u in &g.adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    comp.push(u);
                    q.push_back(u);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

struct Search<'a> {
    w: &'a [u64],
    nbr: &'a [u64],
    best: u64,
    best_set: u64,
    nodes: u64,
    budget: u64,
}

impl Search<'_> {
    // Include-first DFS over candidates in index order. Because including
    // the lowest candidate is explored before excluding it, optima are met in
    // lexicographic order of their sorted member lists; only a strictly better
    // weight replaces the incumbent, so the first optimum found is kept.
    fn dfs(&mut self, mut cand: u64, mut chosen: u64, mut weight: u64) -> bool {
        self.nodes += 1;
        if self.nodes > self.budget {
            return false;
        }
        // A candidate with no candidate neighbors belongs to every optimum of
        // this subtree.
        loop {
            let mut forced = 0u64;
            let mut rest = cand;
            while rest != 0 {
                let v = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                if self.nbr[v] & cand == 0 {
                    forced |= 1 << v;
                }
            }
            if forced == 0 {
                break;
            }
            cand &= !forced;
            chosen |= forced;
            weight += bits(forced).map(|v| self.w[v]).sum::<u64>();
        }
        if cand == 0 {
            if weight > self.best {
                self.best = weight;
                self.best_set = chosen;
            }
            return true;
        }
        let bound: u64 = weight + bits(cand).map(|v| self.w[v]).sum::<u64>();
        if bound <= self.best {
            return true;
        }
        let v = cand.trailing_zeros() as usize;
        let bit = 1u64 << v;
        if !self.dfs(cand & !bit & !self.nbr[v], chosen | bit, weight + self.w[v]) {
            return false;
        }
        self.dfs(cand & !bit, chosen, weight)
    }
}

fn bits(mut m: u64) -> impl Iterator<Item = usize> {
    core::iter::from_fn(move || {
        if m == 0 {
            None
        } else {
            let v = m.trailing_zeros() as usize;
            m &= m - 1;
            Some(v)
        }
    })
}

/// Exact optimum of one component, or `None` if it is over the cap or the
/// search budget ran out.
fn exact_component(g: &ConflictGraph, comp: &[usize], cfg: &MwisConfig, stats: &mut MwisStats) -> Option<Selection> {
    if comp.len() > cfg.exact_cap.min(64) {
        return None;
    }
    let local = |v: usize| comp.binary_search(&v).ok();
    let w: Vec<u64> = comp.iter().map(|&v| g.weights[v]).collect();
    let nbr: Vec<u64> = comp
        .iter()
        .map(|&v| {
            g.adj[v]
                .iter()
                .filter_map(|&u| local(u))
                .fold(0u64, |m, i| m | (1 << i))
        })
        .collect();
    let all = if comp.len() == 64 {
        u64::MAX
    } else {
        (1u64 << comp.len()) - 1
    };
    let mut s = Search {
        w: &w,
        nbr: &nbr,
        best: 0,
        best_set: 0,
        nodes: 0,
        budget: cfg.node_budget,
    };
    let ok = s.dfs(all, 0, 0);
    stats.steps += s.nodes.min(cfg.node_budget);
    ok.then(|| bits(s.best_set).map(|i| comp[i]).collect())
}

fn greedy_component(g: &ConflictGraph, comp: &[usize], stats: &mut MwisStats) -> Selection {
    let mut alive: Vec<bool> = vec![false; g.len()];
    for &v in comp {
        alive[v] = true;
    }
    let mut deg: Vec<u64> = vec![0; g.len()];
    for &v in comp {
        deg[v] = g.adj[v].len() as u64;
    }
    let mut remaining = comp.len();
    let mut chosen = Vec::new();
    while remaining > 0 {
        stats.steps += 1;
        let mut best: Option<usize> = None;
        for &v in comp {
            if !alive[v] {
                continue;
            }
            best = match best {
                None => Some(v),
                Some(b) => {
                    // w_v/(d_v+1) > w_b/(d_b+1), exactly; ties keep the lower id.
                    let lhs = g.weights[v] as u128 * (deg[b] as u128 + 1);
                    let rhs = g.weights[b] as u128 * (deg[v] as u128 + 1);
                    if lhs > rhs {
                        Some(v)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let v = best.expect("some vertex remains");
        chosen.push(v);
        let mut removed = vec![v];
        removed.extend(g.adj[v].iter().copied().filter(|&u| alive[u]));
        for &r in &removed {
            alive[r] = false;
            remaining -= 1;
        }
        for &r in &removed {
            for &u in &g.adj[r] {
                if alive[u] {
                    deg[u] -= 1;
                }
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Exact solve, component by component. Components over the cap (or over the
/// search budget) fall back to greedy and are counted in the stats.
pub fn solve_mwis_exact(g: &ConflictGraph, cfg: &MwisConfig) -> (Selection, MwisStats) {
    let mut stats = MwisStats::default();
    let mut out = Vec::new();
    for comp in components(g) {
        match exact_component(g, &comp, cfg, &mut stats) {
            Some(sel) => out.extend(sel),
            None => {
                stats.greedy_fallbacks += 1;
                out.extend(greedy_component(g, &comp, &mut stats));
            }
        }
    }
    out.sort_unstable();
    (out, stats)
}

/// Greedy: repeatedly take the live vertex with the largest
/// `weight/(degree+1)` in the remaining graph, lowest index on ties.
pub fn solve_mwis_greedy(g: &ConflictGraph) -> (Selection, MwisStats) {
    let mut stats = MwisStats::default();
    let mut out = Vec::new();
    for comp in components(g) {
        out.extend(greedy_component(g, &comp, &mut stats));
    }
    out.sort_unstable();
    (out, stats)
}
