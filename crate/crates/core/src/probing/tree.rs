use std::collections::VecDeque;

use crate::corpus::ParsedSentence;

/// Row-major `n × n` distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// The submatrix over `keep` (in that order).
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let mut out = Self::zeros(keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                out.set(a, b, self.get(i, j));
            }
        }
        out
    }

    /// The strict upper triangle, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                v.push(self.get(i, j));
            }
        }
        v
    }
}

/// Undirected gold edges as `(min, max)` 0-based word pairs.
pub fn gold_edges(sentence: &ParsedSentence) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = sentence
        .heads
        .iter()
        .enumerate()
        .filter(|(_, &h)| h != 0)
        .map(|(i, &h)| (i.min(h - 1), i.max(h - 1)))
        .collect();
    e.sort_unstable();
    e
}

/// Path lengths in the undirected gold tree, by BFS from every word.
pub fn tree_distances(sentence: &ParsedSentence) -> DistanceMatrix {
    let n = sentence.len();
    let mut adj = vec![Vec::new(); n];
    for (a, b) in gold_edges(sentence) {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut d = DistanceMatrix::zeros(n);
    for s in 0..n {
        let mut seen = vec![usize::MAX; n];
        seen[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if seen[v] == usize::MAX {
                    seen[v] = seen[u] + 1;
                    q.push_back(v);
                }
            }
        }
        for (t, &dist) in seen.iter().enumerate() {
            d.set(s, t, dist as f64);
        }
    }
    d
}

/// Prim's algorithm from node 0. Among equal weights the lexicographically
/// smaller `(min, max)` pair wins, both when relaxing and when choosing.
pub fn mst_from_distances(d: &DistanceMatrix) -> Vec<(usize, usize)> {
    let n = d.n;
    if n < 2 {
        return Vec::new();
    }
    let pair = |a: usize, b: usize| (a.min(b), a.max(b));
    let better = |w: f64, p: (usize, usize), bw: f64, bp: (usize, usize)| w < bw || (w == bw && p < bp);
    let mut in_tree = vec![false; n];
    in_tree[0] = true;
    // best connecting edge for every outside node
    let mut key: Vec<(f64, (usize, usize))> = (0..n).map(|j| (d.get(0, j), pair(0, j))).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let mut pick: Option<usize> = None;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            match pick {
                Some(p) if !better(key[j].0, key[j].1, key[p].0, key[p].1) => {}
                _ => pick = Some(j),
            }
        }
        let u = pick.expect("an outside node remains");
        in_tree[u] = true;
        edges.push(key[u].1);
        for j in 0..n {
            if !in_tree[j] {
                let (w, p) = (d.get(u, j), pair(u, j));
                if better(w, p, key[j].0, key[j].1) {
                    key[j] = (w, p);
                }
            }
        }
    }
    edges.sort_unstable();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentence(heads: &[usize]) -> ParsedSentence {
        ParsedSentence {
            tokens: (0..heads.len()).map(|i| format!("w{i}")).collect(),
            upos: vec!["NOUN".into(); heads.len()],
            heads: heads.to_vec(),
        }
    }

    fn matrix(n: usize, entries: &[((usize, usize), f64)]) -> DistanceMatrix {
        let mut d = DistanceMatrix::zeros(n);
        for &((i, j), v) in entries {
            d.set(i, j, v);
            d.set(j, i, v);
        }
        d
    }

    #[test]
    fn two_words() {
        let d = tree_distances(&sentence(&[0, 1]));
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn chain_of_four() {
        // 1 <- 2 <- 3 <- 4, word 4 the root
        let d = tree_distances(&sentence(&[2, 3, 4, 0]));
        assert_eq!(d.get(0, 3), 3.0);
        assert_eq!(d.get(1, 3), 2.0);
    }

    #[test]
    fn three_node_enumeration() {
        let d = matrix(3, &[((0, 1), 1.0), ((0, 2), 5.0), ((1, 2), 2.0)]);
        assert_eq!(mst_from_distances(&d), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn equal_distances_give_a_star() {
        let mut d = DistanceMatrix::zeros(5);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    d.set(i, j, 2.0);
                }
            }
        }
        assert_eq!(mst_from_distances(&d), vec![(0, 1), (0, 2), (0, 3), (0, 4)]);
    }

    #[test]
    fn fewer_than_two_nodes() {
        assert!(mst_from_distances(&DistanceMatrix::zeros(1)).is_empty());
        assert!(mst_from_distances(&DistanceMatrix::zeros(0)).is_empty());
    }

    fn random_heads(n: usize, seed: u64) -> Vec<usize> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "tree", 0);
        // attach word i to a random earlier word, then relabel the root
        let mut heads = vec![0usize; n];
        for i in 1..n {
            heads[i] = rng.random_range(0..i) + 1;
        }
        heads
    }

    /// Union-find connectivity.
    fn spans(n: usize, edges: &[(usize, usize)]) -> bool {
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for &(a, b) in edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let r = find(&mut parent, 0);
        (0..n).all(|x| find(&mut parent, x) == r)
    }

    proptest! {
        #[test]
        fn gold_distances_recover_gold_tree(n in 2usize..25, seed in 0u64..1000) {
            let s = sentence(&random_heads(n, seed));
            let d = tree_distances(&s);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                }
            }
            prop_assert_eq!(mst_from_distances(&d), gold_edges(&s));
        }

        #[test]
        fn mst_is_a_spanning_tree(n in 2usize..20, vals in proptest::collection::vec(0.0f64..10.0, 400)) {
            let mut d = DistanceMatrix::zeros(n);
            for i in 0..n {
                for j in i + 1..n {
                    d.set(i, j, vals[i * 20 + j]);
                    d.set(j, i, vals[i * 20 + j]);
                }
            }
            let e = mst_from_distances(&d);
            prop_assert_eq!(e.len(), n - 1);
            prop_assert!(spans(n, &e));
        }

        #[test]
        fn mst_weight_matches_brute_force(vals in proptest::collection::vec(0u8..6, 10)) {
            // 5 nodes: enumerate every 4-edge subset that spans
            let n = 5;
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            let mut d = DistanceMatrix::zeros(n);
            for (k, &(i, j)) in pairs.iter().enumerate() {
                d.set(i, j, vals[k] as f64);
                d.set(j, i, vals[k] as f64);
            }
            let mut best = f64::INFINITY;
            for mask in 0u32..1 << pairs.len() {
                if mask.count_ones() != 4 {
                    continue;
                }
                let chosen: Vec<(usize, usize)> = (0..pairs.len()).filter(|b| mask >> b & 1 == 1).map(|b| pairs[b]).collect();
                if spans(n, &chosen) {
                    best = best.min(chosen.iter().map(|&(i, j)| d.get(i, j)).sum());
                }
            }
            let got: f64 = mst_from_distances(&d).iter().map(|&(i, j)| d.get(i, j)).sum();
            prop_assert_eq!(got, best);
        }
    }
}
