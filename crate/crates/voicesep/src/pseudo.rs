//! Pseudo-polyphonic repeat chains.
//!
//! A repeat chain is a maximal run of at least `k_min` notes sharing one pitch
//! and one beat duration, with consecutive onsets spaced exactly twice that
//! duration apart — the texture of an accompaniment figure alternating with a
//! melody. Chain members are hard-wired into a single voice by every engine.

use std::collections::BTreeSet;

use crate::score::Score;
use crate::time::Beat;

/// Minimum run length that establishes a repetition pattern.
pub const CHAIN_MIN_LEN: usize = 3;

#[derive(Debug, Clone, Default)]
pub struct ChainSet {
    /// Each chain is a list of note indices in onset order.
    pub chains: Vec<Vec<usize>>,
    /// Chain id per note, if any.
    member: Vec<Option<usize>>,
    /// Onsets at which some chain note sounds.
    onsets: BTreeSet<Beat>,
}

impl ChainSet {
    /// True when `n` belongs to a repeat chain (the pp(m) predicate).
    pub fn pp_note(&self, n: usize) -> bool {
        self.member.get(n).copied().flatten().is_some()
    }

    /// True when some chain note sounds at onset `x` (the pp(x) predicate).
    pub fn pp_onset(&self, x: Beat) -> bool {
        self.onsets.contains(&x)
    }

    pub fn chain_of(&self, n: usize) -> Option<usize> {
        self.member.get(n).copied().flatten()
    }

    /// The chain note immediately before `n` in its chain.
    pub fn predecessor(&self, n: usize) -> Option<usize> {
        let chain = &self.chains[self.chain_of(n)?];
        let pos = chain.iter().position(|&m| m == n)?;
        if pos > 0 {
            Some(chain[pos - 1])
        } else {
            None
        }
    }
}

/// Finds all maximal pseudo-polyphonic repeat chains of `k_min` or more notes.
pub fn detect_chains(score: &Score, k_min: usize) -> ChainSet {
    let mut set = ChainSet {
        chains: Vec::new(),
        member: vec![None; score.len()],
        onsets: BTreeSet::new(),
    };
    // Candidates grouped by (pitch, beat duration); score order is already
    // sorted by onset, which keeps each group in onset order.
    let mut groups: Vec<((i32, Beat), Vec<usize>)> = Vec::new();
    for (idx, n) in score.notes().iter().enumerate() {
        let key = (n.ps, n.bd());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(idx),
            None => groups.push((key, vec![idx])),
        }
    }
    for ((_, bd), members) in groups {
        let spacing = bd * 2;
        let mut used = vec![false; members.len()];
        for start in 0..members.len() {
            if used[start] {
                continue;
            }
            let mut chain = vec![members[start]];
            used[start] = true;
            loop {
                let want = score.note(*chain.last().unwrap()).on + spacing;
                let next = members
                    .iter()
                    .enumerate()
                    .position(|(i, &m)| !used[i] && score.note(m).on == want);
                match next {
                    Some(pos) => {
                        used[pos] = true;
                        chain.push(members[pos]);
                    }
                    None => break,
                }
            }
            if chain.len() >= k_min {
                let id = set.chains.len();
                for &m in &chain {
                    set.member[m] = Some(id);
                    set.onsets.insert(score.note(m).on);
                }
                set.chains.push(chain);
            }
        }
    }
    set
}
