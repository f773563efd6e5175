use rand::Rng;

use crate::numerics::l2_dist;

fn knn_mean(history: &[Vec<f64>], point: &[f64], k: usize) -> f64 {
    if history.is_empty() {
        return f64::INFINITY;
    }
    let mut d: Vec<f64> = history.iter().map(|h| l2_dist(h, point)).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let take = k.min(d.len());
    d[..take].iter().sum::<f64>() / take as f64
}

/// Attacker-side diversity filter: resample candidates until one clears the
/// assumed detection threshold against the attacker's own query history
/// (image-space metric; the defender's encoder is secret). Returns the best
/// candidate found within the resample budget.
pub fn diversity_greedy<R: Rng, G: FnMut(&mut R) -> Vec<f64>>(
    history: &[Vec<f64>],
    mut candidates: G,
    tau: f64,
    k_assumed: usize,
    max_resamples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..max_resamples.max(1) {
        let c = candidates(rng);
        let d = knn_mean(history, &c, k_assumed);
        if d >= tau {
            return c;
        }
        if best.as_ref().map_or(true, |(bd, _)| d > *bd) {
            best = Some((d, c));
        }
    }
    best.unwrap().1
}

fn conflict_graph(candidates: &[Vec<f64>], tau: f64) -> Vec<Vec<usize>> {
    let n = candidates.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if l2_dist(&candidates[i], &candidates[j]) < tau {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

fn sequential_greedy(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut chosen: Vec<usize> = Vec::new();
    let mut blocked = vec![false; n];
    for i in 0..n {
        if blocked[i] {
            continue;
        }
        chosen.push(i);
        for &j in &adj[i] {
            blocked[j] = true;
        }
    }
    chosen
}

fn min_degree_greedy(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut chosen = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        let v = (0..n)
            .filter(|&i| alive[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        chosen.push(v);
        let mut removed = vec![v];
        for &u in &adj[v] {
            if alive[u] {
                removed.push(u);
            }
        }
        for r in removed {
            alive[r] = false;
            remaining -= 1;
            for &u in &adj[r] {
                if alive[u] {
                    degree[u] -= 1;
                }
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Independent set of candidates under the "too close" relation
/// (distance < tau): iterative minimum-degree greedy, falling back to the
/// plain sequential scan when that happens to do better, so the result is
/// never smaller than the naive baseline.
pub fn diversity_independent_set(candidates: &[Vec<f64>], tau: f64) -> Vec<usize> {
    assert!(!candidates.is_empty());
    let adj = conflict_graph(candidates, tau);
    let a = min_degree_greedy(&adj);
    let b = sequential_greedy(&adj);
    if a.len() >= b.len() {
        a
    } else {
        b
    }
}

/// Exact maximum independent set by branch and bound; test oracle for small
/// instances only.
pub fn brute_force_mis(candidates: &[Vec<f64>], tau: f64) -> usize {
    let adj = conflict_graph(candidates, tau);
    let n = adj.len();
    let masks: Vec<u64> = adj
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let mut m = 1u64 << i;
            for &j in nbrs {
                m |= 1 << j;
            }
            m
        })
        .collect();
    fn rec(free: u64, masks: &[u64]) -> u32 {
        if free == 0 {
            return 0;
        }
        let v = free.trailing_zeros() as usize;
        // branch: exclude v, or include v (removing its closed neighborhood)
        let without = rec(free & !(1u64 << v), masks);
        let with = 1 + rec(free & !masks[v], masks);
        without.max(with)
    }
    rec((1u64 << n) - 1, &masks) as usize
}
