//! Dinic max-flow on a small directed graph with `f64` capacities.

use std::collections::VecDeque;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: f64,
}

#[derive(Debug, Clone)]
pub struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
    level: Vec<i32>,
    next: Vec<usize>,
}

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        FlowGraph {
            edges: Vec::new(),
            adj: vec![Vec::new(); nodes],
            level: vec![0; nodes],
            next: vec![0; nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    /// Adds `u → v` with capacity `cap` and `v → u` with capacity `rev`.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64, rev: f64) {
        debug_assert!(cap >= 0.0 && rev >= 0.0);
        self.adj[u].push(self.edges.len());
        self.edges.push(Edge { to: v, cap });
        self.adj[v].push(self.edges.len());
        self.edges.push(Edge { to: u, cap: rev });
    }

    fn bfs(&mut self, s: usize, t: usize) -> bool {
        self.level.fill(-1);
        self.level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let Edge { to, cap } = self.edges[e];
                if cap > EPS && self.level[to] < 0 {
                    self.level[to] = self.level[u] + 1;
                    queue.push_back(to);
                }
            }
        }
        self.level[t] >= 0
    }

    /// Blocking-flow augmentation with an explicit stack.
    fn augment(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let push = path.iter().map(|&e| self.edges[e].cap).fold(f64::INFINITY, f64::min);
                for &e in &path {
                    self.edges[e].cap -= push;
                    self.edges[e ^ 1].cap += push;
                }
                total += push;
                // Restart from the tail of the first saturated edge.
                let cut = path.iter().position(|&e| self.edges[e].cap <= EPS).unwrap_or(0);
                path.truncate(cut);
                u = if cut == 0 { s } else { self.edges[path[cut - 1]].to };
                continue;
            }
            let mut advanced = false;
            while self.next[u] < self.adj[u].len() {
                let e = self.adj[u][self.next[u]];
                let Edge { to, cap } = self.edges[e];
                if cap > EPS && self.level[to] == self.level[u] + 1 {
                    path.push(e);
                    u = to;
                    advanced = true;
                    break;
                }
                self.next[u] += 1;
            }
            if !advanced {
                // Dead end: retreat.
                self.level[u] = -1;
                match path.pop() {
                    Some(e) => {
                        u = self.edges[e ^ 1].to;
                        self.next[u] += 1;
                    }
                    None => return total,
                }
            }
        }
    }

    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        while self.bfs(s, t) {
            self.next.fill(0);
            flow += self.augment(s, t);
        }
        flow
    }

    /// Nodes reachable from `s` in the residual graph (the source side of a
    /// minimum cut once `max_flow` has run).
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &e in &self.adj[u] {
                let Edge { to, cap } = self.edges[e];
                if cap > EPS && !seen[to] {
                    seen[to] = true;
                    stack.push(to);
                }
            }
        }
        seen
    }
}
