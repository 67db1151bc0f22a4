//! Recovery of a support set on Z/LZ from its multiset of pairwise differences
//! when every difference occurs once.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::DifferenceMultiset;

/// Solutions of a beltway instance. Each candidate contains 0 and reproduces
/// the input multiset; `canonical` holds when they are all equivalent under
/// shift and reflection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSolution {
    pub candidates: Vec<Vec<usize>>,
    pub canonical: bool,
}

/// Exhaustive backtracking over supports containing 0.
///
/// With 0 in the support every other point `x` is itself a difference, so
/// candidate points are drawn from the difference set in increasing order and a
/// point is kept only while all its differences to the placed points are still
/// unexplained. The pair realizing the smallest difference is pinned at
/// `{0, d_min}`, which fixes the translation gauge. Solutions are deduplicated up to shift and reflection; each
/// orbit is represented by its lexicographically smallest member containing 0.
pub fn recover_support(d: &DifferenceMultiset, len: usize, s: usize) -> Result<SupportSolution> {
    if d.len_modulus() != len {
        return Err(Error::InvalidInput(format!(
            "multiset is over Z/{} but L = {len}",
            d.len_modulus()
        )));
    }
    if let Some(c) = d.first_collision() {
        return Err(Error::NotCollisionFree { difference: c });
    }
    if s == 0 {
        return Err(Error::InvalidInput("support size must be positive".into()));
    }
    if d.total() != s * (s - 1) {
        return Err(Error::InconsistentDifferences(format!(
            "{} differences cannot come from {s} points",
            d.total()
        )));
    }
    if !d.is_symmetric() {
        return Err(Error::InconsistentDifferences("differences are not symmetric".into()));
    }

    let pool: Vec<usize> = d.counts().keys().copied().collect();
    let mut unexplained = vec![false; len];
    for &x in &pool {
        unexplained[x] = true;
    }
    let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
    if s == 1 {
        found.insert(vec![0]);
    } else {
        // the smallest difference occurs once, so exactly one translate of each
        // solution contains both 0 and that difference
        let d1 = pool[0];
        unexplained[d1] = false;
        unexplained[len - d1] = false;
        let mut placed = vec![0usize, d1];
        search(&pool, 1, s, len, &mut placed, &mut unexplained, &mut found);
    }

    if found.is_empty() {
        return Err(Error::InconsistentDifferences(
            "no support reproduces the differences".into(),
        ));
    }
    let mut reps: BTreeSet<Vec<usize>> = BTreeSet::new();
    for sol in &found {
        reps.insert(orbit_representative(sol, len));
    }
    let candidates: Vec<Vec<usize>> = reps.into_iter().collect();
    for c in &candidates {
        debug_assert_eq!(&DifferenceMultiset::from_support(c, len), d);
    }
    let canonical = candidates.len() == 1;
    Ok(SupportSolution {
        candidates,
        canonical,
    })
}

fn search(
    pool: &[usize],
    start: usize,
    s: usize,
    len: usize,
    placed: &mut Vec<usize>,
    unexplained: &mut [bool],
    found: &mut BTreeSet<Vec<usize>>,
) {
    if placed.len() == s {
        // s(s-1) distinct differences consumed out of s(s-1): all explained
        found.insert(placed.clone());
        return;
    }
    let need = s - placed.len();
    for (pos, &x) in pool.iter().enumerate().skip(start) {
        if pool.len() - pos < need {
            break;
        }
        let mut used = Vec::with_capacity(2 * placed.len());
        let mut ok = true;
        for &y in placed.iter() {
            let a = (x + len - y) % len;
            let b = (y + len - x) % len;
            if !unexplained[a] || !unexplained[b] || a == b || used.contains(&a) || used.contains(&b) {
                ok = false;
                break;
            }
            used.push(a);
            used.push(b);
        }
        if !ok {
            continue;
        }
        for &u in &used {
            unexplained[u] = false;
        }
        placed.push(x);
        search(pool, pos + 1, s, len, placed, unexplained, found);
        placed.pop();
        for &u in &used {
            unexplained[u] = true;
        }
    }
}

fn images(a: &[usize], len: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..len).flat_map(move |g| {
        [false, true].into_iter().map(move |reflect| {
            let mut v: Vec<usize> = a
                .iter()
                .map(|&x| {
                    let y = if reflect { (len - x) % len } else { x };
                    (y + g) % len
                })
                .collect();
            v.sort_unstable();
            v
        })
    })
}

fn orbit_representative(a: &[usize], len: usize) -> Vec<usize> {
    images(a, len)
        .filter(|v| v.first() == Some(&0))
        .min()
        .expect("some translate contains 0")
}

/// True when a shift, possibly composed with `i -> -i`, maps `a` onto `b`.
pub fn supports_equivalent(a: &[usize], b: &[usize], len: usize) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut target = b.iter().map(|x| x % len).collect::<Vec<_>>();
    target.sort_unstable();
    target.dedup();
    images(a, len).any(|v| v == target)
}
