//! Max-flow/min-cut on sparse graphs with dual search trees grown from the
//! source and sink, augmenting along the paths where they meet and adopting
//! orphaned subtrees afterwards.

use std::collections::VecDeque;

const NONE: usize = usize::MAX;
const TERMINAL: usize = usize::MAX - 1;
const ORPHAN: usize = usize::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tree {
    Free,
    Source,
    Sink,
}

#[derive(Debug, Clone)]
pub struct FlowGraph {
    // Arcs come in sister pairs (2k, 2k+1).
    head: Vec<usize>,
    next: Vec<usize>,
    cap: Vec<f64>,
    first: Vec<usize>,
    // Residual terminal capacity: positive towards the source, negative towards the sink.
    tr_cap: Vec<f64>,
    flow: f64,
    tree: Vec<Tree>,
    parent: Vec<usize>,
    ts: Vec<u64>,
    dist: Vec<usize>,
    solved: bool,
}

impl FlowGraph {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            head: Vec::new(),
            next: Vec::new(),
            cap: Vec::new(),
            first: vec![NONE; num_nodes],
            tr_cap: vec![0.0; num_nodes],
            flow: 0.0,
            tree: vec![Tree::Free; num_nodes],
            parent: vec![NONE; num_nodes],
            ts: vec![0; num_nodes],
            dist: vec![0; num_nodes],
            solved: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.first.len()
    }

    /// Adds capacities from the source to `i` and from `i` to the sink.
    pub fn add_tweights(&mut self, i: usize, to_source: f64, to_sink: f64) {
        debug_assert!(to_source >= 0.0 && to_sink >= 0.0);
        let (mut cs, mut ct) = (to_source, to_sink);
        let delta = self.tr_cap[i];
        if delta > 0.0 {
            cs += delta;
        } else {
            ct -= delta;
        }
        self.flow += cs.min(ct);
        self.tr_cap[i] = cs - ct;
    }

    /// Adds arc `i → j` with capacity `cap` and `j → i` with `rev_cap`.
    pub fn add_edge(&mut self, i: usize, j: usize, cap: f64, rev_cap: f64) {
        debug_assert!(i != j && cap >= 0.0 && rev_cap >= 0.0);
        for (from, to, c) in [(i, j, cap), (j, i, rev_cap)] {
            let a = self.head.len();
            self.head.push(to);
            self.cap.push(c);
            self.next.push(self.first[from]);
            self.first[from] = a;
        }
    }

    fn arcs(&self, i: usize) -> ArcIter<'_> {
        ArcIter {
            next: &self.next,
            cur: self.first[i],
        }
    }

    /// Computes the maximum flow; afterwards [`Self::in_source_set`] gives a minimum cut.
    pub fn maxflow(&mut self) -> f64 {
        let n = self.num_nodes();
        let mut active: VecDeque<usize> = VecDeque::new();
        let mut orphans: VecDeque<usize> = VecDeque::new();
        let mut time = 0u64;
        for i in 0..n {
            if self.tr_cap[i] > 0.0 {
                self.tree[i] = Tree::Source;
                self.parent[i] = TERMINAL;
                self.dist[i] = 1;
                active.push_back(i);
            } else if self.tr_cap[i] < 0.0 {
                self.tree[i] = Tree::Sink;
                self.parent[i] = TERMINAL;
                self.dist[i] = 1;
                active.push_back(i);
            }
        }

        while let Some(i) = active.pop_front() {
            if self.tree[i] == Tree::Free {
                continue;
            }
            // Grow the tree of `i` until it touches the other tree.
            let mut bridge = NONE;
            let mut a = self.first[i];
            while a != NONE {
                let j = self.head[a];
                let sister = a ^ 1;
                let residual = match self.tree[i] {
                    Tree::Source => self.cap[a],
                    _ => self.cap[sister],
                };
                if residual > 0.0 {
                    if self.tree[j] == Tree::Free {
                        self.tree[j] = self.tree[i];
                        self.parent[j] = sister;
                        self.ts[j] = self.ts[i];
                        self.dist[j] = self.dist[i] + 1;
                        active.push_back(j);
                    } else if self.tree[j] != self.tree[i] {
                        bridge = if self.tree[i] == Tree::Source { a } else { sister };
                        break;
                    }
                }
                a = self.next[a];
            }
            if bridge == NONE {
                continue;
            }
            // `i` may still have unexplored arcs after the augmentation.
            active.push_front(i);
            time += 1;
            self.augment(bridge, &mut orphans);
            self.adopt(&mut orphans, &mut active, time);
        }
        self.solved = true;
        self.flow
    }

    fn augment(&mut self, bridge: usize, orphans: &mut VecDeque<usize>) {
        // Bottleneck over source half, bridge and sink half.
        let mut b = self.cap[bridge];
        let mut i = self.head[bridge ^ 1];
        while self.parent[i] != TERMINAL {
            let a = self.parent[i];
            b = b.min(self.cap[a ^ 1]);
            i = self.head[a];
        }
        b = b.min(self.tr_cap[i]);
        let mut j = self.head[bridge];
        while self.parent[j] != TERMINAL {
            let a = self.parent[j];
            b = b.min(self.cap[a]);
            j = self.head[a];
        }
        b = b.min(-self.tr_cap[j]);

        self.cap[bridge ^ 1] += b;
        self.cap[bridge] -= b;
        let mut i = self.head[bridge ^ 1];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                self.tr_cap[i] -= b;
                if self.tr_cap[i] <= 0.0 {
                    self.parent[i] = ORPHAN;
                    orphans.push_front(i);
                }
                break;
            }
            self.cap[a] += b;
            self.cap[a ^ 1] -= b;
            let up = self.head[a];
            if self.cap[a ^ 1] <= 0.0 {
                self.parent[i] = ORPHAN;
                orphans.push_front(i);
            }
            i = up;
        }
        let mut j = self.head[bridge];
        loop {
            let a = self.parent[j];
            if a == TERMINAL {
                self.tr_cap[j] += b;
                if self.tr_cap[j] >= 0.0 {
                    self.parent[j] = ORPHAN;
                    orphans.push_front(j);
                }
                break;
            }
            self.cap[a ^ 1] += b;
            self.cap[a] -= b;
            let up = self.head[a];
            if self.cap[a] <= 0.0 {
                self.parent[j] = ORPHAN;
                orphans.push_front(j);
            }
            j = up;
        }
        self.flow += b;
    }

    /// Distance to a terminal through valid parents, or `None` if the chain
    /// ends at an orphan. Marks the traversed chain with `time`.
    fn origin_distance(&mut self, start: usize, time: u64) -> Option<usize> {
        let mut d = 0usize;
        let mut k = start;
        loop {
            if self.ts[k] == time {
                d += self.dist[k];
                break;
            }
            let a = self.parent[k];
            d += 1;
            if a == TERMINAL {
                self.ts[k] = time;
                self.dist[k] = 1;
                break;
            }
            if a == ORPHAN || a == NONE {
                return None;
            }
            k = self.head[a];
        }
        let mut k = start;
        let mut dd = d;
        while self.ts[k] != time {
            self.ts[k] = time;
            self.dist[k] = dd;
            dd -= 1;
            k = self.head[self.parent[k]];
        }
        Some(d)
    }

    fn adopt(&mut self, orphans: &mut VecDeque<usize>, active: &mut VecDeque<usize>, time: u64) {
        while let Some(i) = orphans.pop_front() {
            let tree = self.tree[i];
            let mut best_arc = NONE;
            let mut best_d = usize::MAX;
            let mut a = self.first[i];
            while a != NONE {
                let j = self.head[a];
                let residual = match tree {
                    Tree::Source => self.cap[a ^ 1],
                    _ => self.cap[a],
                };
                if residual > 0.0 && self.tree[j] == tree && self.parent[j] != NONE {
                    if let Some(d) = self.origin_distance(j, time) {
                        if d < best_d {
                            best_d = d;
                            best_arc = a;
                        }
                    }
                }
                a = self.next[a];
            }
            if best_arc != NONE {
                self.parent[i] = best_arc;
                self.ts[i] = time;
                self.dist[i] = best_d + 1;
                continue;
            }
            // No valid parent: release `i` and its children.
            let arcs: Vec<usize> = self.arcs(i).collect();
            for a in arcs {
                let j = self.head[a];
                if self.tree[j] != tree {
                    continue;
                }
                let residual = match tree {
                    Tree::Source => self.cap[a ^ 1],
                    _ => self.cap[a],
                };
                if residual > 0.0 {
                    active.push_back(j);
                }
                let p = self.parent[j];
                if p != TERMINAL && p != ORPHAN && p != NONE && self.head[p] == i {
                    self.parent[j] = ORPHAN;
                    orphans.push_back(j);
                }
            }
            self.tree[i] = Tree::Free;
            self.parent[i] = NONE;
        }
    }

    /// Whether `i` lies on the source side of the minimum cut found by [`Self::maxflow`].
    pub fn in_source_set(&self, i: usize) -> bool {
        assert!(self.solved, "maxflow has not been run");
        self.tree[i] == Tree::Source
    }
}

struct ArcIter<'a> {
    next: &'a [usize],
    cur: usize,
}

impl Iterator for ArcIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.cur == NONE {
            return None;
        }
        let a = self.cur;
        self.cur = self.next[a];
        Some(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Edmonds–Karp on a dense capacity matrix; node n is the source, n+1 the sink.
    fn edmonds_karp(mut cap: Vec<Vec<f64>>, s: usize, t: usize) -> f64 {
        let n = cap.len();
        let mut flow = 0.0;
        loop {
            let mut prev = vec![usize::MAX; n];
            prev[s] = s;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for v in 0..n {
                    if prev[v] == usize::MAX && cap[u][v] > 1e-12 {
                        prev[v] = u;
                        q.push_back(v);
                    }
                }
            }
            if prev[t] == usize::MAX {
                return flow;
            }
            let mut b = f64::INFINITY;
            let mut v = t;
            while v != s {
                b = b.min(cap[prev[v]][v]);
                v = prev[v];
            }
            let mut v = t;
            while v != s {
                cap[prev[v]][v] -= b;
                cap[v][prev[v]] += b;
                v = prev[v];
            }
            flow += b;
        }
    }

    struct Instance {
        n: usize,
        terminals: Vec<(f64, f64)>,
        edges: Vec<(usize, usize, f64, f64)>,
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Instance {
        let terminals = (0..n)
            .map(|_| {
                let s = if rng.gen_bool(0.5) { rng.gen_range(0.0..5.0) } else { 0.0 };
                let t = if rng.gen_bool(0.5) { rng.gen_range(0.0..5.0) } else { 0.0 };
                (s, t)
            })
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(density) {
                    edges.push((i, j, rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)));
                }
            }
        }
        Instance { n, terminals, edges }
    }

    fn solve(inst: &Instance) -> (f64, FlowGraph) {
        let mut g = FlowGraph::new(inst.n);
        for (i, &(s, t)) in inst.terminals.iter().enumerate() {
            g.add_tweights(i, s, t);
        }
        for &(i, j, c, r) in &inst.edges {
            g.add_edge(i, j, c, r);
        }
        (g.maxflow(), g)
    }

    fn oracle(inst: &Instance) -> f64 {
        let n = inst.n;
        let mut cap = vec![vec![0.0; n + 2]; n + 2];
        for (i, &(s, t)) in inst.terminals.iter().enumerate() {
            cap[n][i] += s;
            cap[i][n + 1] += t;
        }
        for &(i, j, c, r) in &inst.edges {
            cap[i][j] += c;
            cap[j][i] += r;
        }
        edmonds_karp(cap, n, n + 1)
    }

    fn cut_value(inst: &Instance, g: &FlowGraph) -> f64 {
        let mut v = 0.0;
        for (i, &(s, t)) in inst.terminals.iter().enumerate() {
            v += if g.in_source_set(i) { t } else { s };
        }
        for &(i, j, c, r) in &inst.edges {
            match (g.in_source_set(i), g.in_source_set(j)) {
                (true, false) => v += c,
                (false, true) => v += r,
                _ => {}
            }
        }
        v
    }

    #[test]
    fn matches_edmonds_karp_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..300 {
            let n = rng.gen_range(1..14);
            let density = rng.gen_range(0.1..0.9);
            let inst = random_instance(&mut rng, n, density);
            let (flow, g) = solve(&inst);
            let want = oracle(&inst);
            assert!((flow - want).abs() < 1e-9, "trial {trial}: {flow} vs {want}");
            // Max-flow/min-cut duality.
            assert!((cut_value(&inst, &g) - flow).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn grid_graphs_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (h, w) = (6, 7);
            let idx = |r: usize, c: usize| r * w + c;
            let terminals = (0..h * w)
                .map(|_| (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)))
                .collect();
            let mut edges = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if c + 1 < w {
                        let k = rng.gen_range(0.0..1.0);
                        edges.push((idx(r, c), idx(r, c + 1), k, k));
                    }
                    if r + 1 < h {
                        let k = rng.gen_range(0.0..1.0);
                        edges.push((idx(r, c), idx(r + 1, c), k, k));
                    }
                }
            }
            let inst = Instance {
                n: h * w,
                terminals,
                edges,
            };
            let (flow, g) = solve(&inst);
            assert!((flow - oracle(&inst)).abs() < 1e-9);
            assert!((cut_value(&inst, &g) - flow).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_example() {
        // s→0 (3), s→1 (2), 0→1 (1), 0→t (2), 1→t (3): max flow 5.
        let mut g = FlowGraph::new(2);
        g.add_tweights(0, 3.0, 2.0);
        g.add_tweights(1, 2.0, 3.0);
        g.add_edge(0, 1, 1.0, 0.0);
        assert_eq!(g.maxflow(), 5.0);
    }
}
