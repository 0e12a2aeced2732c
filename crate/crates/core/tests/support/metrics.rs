//! IoU and DICE against a brute-force set-counting oracle.

use std::collections::HashSet;

use rand::{Rng as _, SeedableRng};
use sonoshadow::eval::{dice, iou};
use sonoshadow::mask::BinaryMask;
use sonoshadow::rng::Rng;

pub const PAIRS: u64 = 1000;
pub const IDENTITY_TOL: f64 = 1e-12;

fn coords(m: &BinaryMask) -> HashSet<(usize, usize)> {
    let mut set = HashSet::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                set.insert((r, c));
            }
        }
    }
    set
}

/// `(iou, dice)` by explicit set operations; `None` for two empty masks.
pub fn oracle(a: &BinaryMask, b: &BinaryMask) -> Option<(f64, f64)> {
    let (sa, sb) = (coords(a), coords(b));
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    (union > 0).then(|| {
        (
            inter as f64 / union as f64,
            2.0 * inter as f64 / (sa.len() + sb.len()) as f64,
        )
    })
}

/// Random 16×16 pair with a per-pair fill rate, so both sparse and dense
/// masks (and some empty ones) appear.
pub fn random_pair(rng: &mut Rng) -> (BinaryMask, BinaryMask) {
    let draw = |rng: &mut Rng| {
        let p = match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        BinaryMask::from_fn(16, 16, |_, _| rng.random::<f64>() < p)
    };
    (draw(rng), draw(rng))
}

/// Checks every pair; returns `(pairs, worst identity error)`.
pub fn check_pairs(seed: u64) -> Result<(u64, f64), String> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..PAIRS {
        let (a, b) = random_pair(&mut rng);
        let got = (iou(&a, &b).map_err(|e| e.to_string())?, dice(&a, &b).map_err(|e| e.to_string())?);
        match oracle(&a, &b) {
            Some(want) => {
                if got != want {
                    return Err(format!("pair {i}: got {got:?}, oracle {want:?}"));
                }
                let (j, d) = got;
                let err = (d - 2.0 * j / (1.0 + j)).abs();
                worst = worst.max(err);
                if err > IDENTITY_TOL {
                    return Err(format!("pair {i}: dice {d} vs 2·iou/(1+iou) (err {err:e})"));
                }
            }
            None => {
                if got != (1.0, 1.0) {
                    return Err(format!("pair {i}: both empty but scored {got:?}"));
                }
            }
        }
    }
    Ok((PAIRS, worst))
}
