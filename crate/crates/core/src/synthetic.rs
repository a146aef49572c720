//! Rule-generated toy knowledge graph for overfitting and ablation runs.
//!
//! Fifty entities `e0..e49` and five relations:
//!
//! | relation | rule | category |
//! |---|---|---|
//! | `next` | `e_i -> e_{i+1}` | 1-1 |
//! | `near` | `e_i -> e_{i+k}` for `k in {1,2,3,5,8,13}` | N-N |
//! | `owns` | ten hubs, five private tails each | 1-N |
//! | `leads` | five hubs, ten private tails each | 1-N |
//! | `group` | `e_i -> e_{5 (i mod 10)}` | N-1 |
//!
//! Indices wrap modulo 50. Validation and test triples are sampled from
//! the training set, so the graph measures memorisation capacity.

use crate::data::Dataset;
use crate::error::Result;
use crate::numkernel::Rng;

pub const N_ENTITIES: usize = 50;
/// Relations whose categorisation is 1-N.
pub const ONE_TO_MANY: [&str; 2] = ["owns", "leads"];

fn name(i: usize) -> String {
    format!("e{}", i % N_ENTITIES)
}

/// The training triples, in a fixed order.
pub fn rule_triples() -> Vec<(String, String, String)> {
    let n = N_ENTITIES;
    let mut out = Vec::new();
    let mut push = |h: usize, r: &str, t: usize| out.push((name(h), r.to_string(), name(t)));
    for i in 0..n {
        push(i, "next", i + 1);
    }
    for i in 0..n {
        for k in [1, 2, 3, 5, 8, 13] {
            push(i, "near", i + k);
        }
    }
    // (7j + 3) and (13j + 21) are permutations of 0..50, so tails never repeat
    for hub in 0..10 {
        for k in 0..5 {
            push((11 * hub + 4) % n, "owns", (7 * (5 * hub + k) + 3) % n);
        }
    }
    for hub in 0..5 {
        for k in 0..10 {
            push((17 * hub + 9) % n, "leads", (13 * (10 * hub + k) + 21) % n);
        }
    }
    for i in 0..n {
        push(i, "group", 5 * (i % 10));
    }
    out
}

/// Samples `fraction` of the training triples into each of valid and test.
pub fn rule_graph(seed: u64, fraction: f64) -> Result<Dataset> {
    let train = rule_triples();
    let k = ((train.len() as f64) * fraction).round() as usize;
    let rng = Rng::new(seed);
    let sample = |salt: u64| {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        rng.split(salt).shuffle(&mut idx);
        let mut idx = idx[..k].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| train[i].clone()).collect::<Vec<_>>()
    };
    let valid = sample(1);
    let test = sample(2);
    Dataset::from_named(&train, &valid, &test)
}
