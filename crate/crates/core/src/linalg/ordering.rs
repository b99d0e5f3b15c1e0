use std::collections::VecDeque;

/// Reverse Cuthill-McKee ordering of an undirected graph.
///
/// `adj[v]` lists the neighbours of `v` (self loops are ignored). Returns
/// `perm` with `perm[new] = old`. Each connected component starts from a
/// pseudo-peripheral vertex found by repeated breadth-first sweeps.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adj, &degree, seed);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v]
                .iter()
                .copied()
                .filter(|&w| w != v && !visited[w])
                .collect();
            next.sort_by_key(|&w| (degree[w], w));
            next.dedup();
            for w in next {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; adj.len()];
    seen[start] = true;
    let mut levels = vec![vec![start]];
    loop {
        let mut next = Vec::new();
        for &v in levels.last().unwrap() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return levels;
        }
        levels.push(next);
    }
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut start = seed;
    let mut ecc = bfs_levels(adj, start).len();
    for _ in 0..8 {
        let levels = bfs_levels(adj, start);
        let cand = *levels
            .last()
            .unwrap()
            .iter()
            .min_by_key(|&&v| (degree[v], v))
            .unwrap();
        let cand_ecc = bfs_levels(adj, cand).len();
        if cand_ecc > ecc {
            start = cand;
            ecc = cand_ecc;
        } else {
            break;
        }
    }
    start
}

/// Half-bandwidth of the symmetric pattern `adj` under `perm` (`perm[new] = old`).
pub fn bandwidth(adj: &[Vec<usize>], perm: &[usize]) -> usize {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut bw = 0;
    for (v, nbrs) in adj.iter().enumerate() {
        for &w in nbrs {
            bw = bw.max(inv[v].abs_diff(inv[w]));
        }
    }
    bw
}
