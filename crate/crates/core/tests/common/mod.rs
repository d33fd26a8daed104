//! Brute-force references shared by integration tests.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

/// Cheapest edit script that walks two cursors through `a` and `b`, where
/// each step deletes, inserts, substitutes (free on a match) or swaps one
/// adjacent pair, and no symbol is touched twice. Solved as a 0-1 BFS over
/// cursor states.
pub fn osa_by_search<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut dist = vec![vec![usize::MAX; m + 1]; n + 1];
    let mut queue = VecDeque::new();
    dist[0][0] = 0;
    queue.push_back((0, 0));
    while let Some((i, j)) = queue.pop_front() {
        let d = dist[i][j];
        let mut relax = |ni: usize, nj: usize, cost: usize, queue: &mut VecDeque<(usize, usize)>| {
            if d + cost < dist[ni][nj] {
                dist[ni][nj] = d + cost;
                if cost == 0 {
                    queue.push_front((ni, nj));
                } else {
                    queue.push_back((ni, nj));
                }
            }
        };
        if i < n {
            relax(i + 1, j, 1, &mut queue);
        }
        if j < m {
            relax(i, j + 1, 1, &mut queue);
        }
        if i < n && j < m {
            relax(i + 1, j + 1, usize::from(a[i] != b[j]), &mut queue);
        }
        if i + 1 < n && j + 1 < m && a[i] == b[j + 1] && a[i + 1] == b[j] {
            relax(i + 2, j + 2, 1, &mut queue);
        }
    }
    dist[n][m]
}

fn neighbours(s: &[u8], alphabet: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for i in 0..=s.len() {
        for &c in alphabet {
            let mut t = s.to_vec();
            t.insert(i, c);
            out.push(t);
        }
    }
    for i in 0..s.len() {
        let mut t = s.to_vec();
        t.remove(i);
        out.push(t);
        for &c in alphabet {
            if c != s[i] {
                let mut t = s.to_vec();
                t[i] = c;
                out.push(t);
            }
        }
        if i + 1 < s.len() {
            let mut t = s.to_vec();
            t.swap(i, i + 1);
            out.push(t);
        }
    }
    out
}

/// Unrestricted Damerau-Levenshtein distance as the length of the shortest
/// chain of single insertions, deletions, substitutions and adjacent swaps
/// turning one string into the other. Bidirectional BFS over strings; every
/// operation is its own inverse's mirror, so both sides use the same moves.
pub fn dl_by_search(a: &[u8], b: &[u8]) -> usize {
    if a == b {
        return 0;
    }
    let mut alphabet: Vec<u8> = a.iter().chain(b).copied().collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let mut seen = [HashMap::new(), HashMap::new()];
    let mut frontier = [vec![a.to_vec()], vec![b.to_vec()]];
    seen[0].insert(a.to_vec(), 0usize);
    seen[1].insert(b.to_vec(), 0usize);
    let mut depth = [0usize, 0usize];
    loop {
        let side = usize::from(frontier[1].len() < frontier[0].len());
        depth[side] += 1;
        let mut next = Vec::new();
        let mut visited: HashSet<Vec<u8>> = HashSet::new();
        let mut best = usize::MAX;
        for s in &frontier[side] {
            for t in neighbours(s, &alphabet) {
                if let Some(&d) = seen[1 - side].get(&t) {
                    best = best.min(depth[side] + d);
                }
                if !seen[side].contains_key(&t) && visited.insert(t.clone()) {
                    next.push(t);
                }
            }
        }
        if best != usize::MAX {
            return best;
        }
        for t in &next {
            seen[side].insert(t.clone(), depth[side]);
        }
        frontier[side] = next;
    }
}

#[test]
fn oracles_on_known_pairs() {
    assert_eq!(osa_by_search(b"ca", b"abc"), 3);
    assert_eq!(dl_by_search(b"ca", b"abc"), 2);
    assert_eq!(osa_by_search(b"kitten", b"sitting"), 3);
    assert_eq!(dl_by_search(b"abcd", b"badc"), 2);
    assert_eq!(osa_by_search::<u8>(b"", b"ab"), 2);
}
