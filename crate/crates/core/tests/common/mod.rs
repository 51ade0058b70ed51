//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use triplanar::volume::{Volume, VolumeKind};

/// AUC as the probability that a random positive outranks a random negative
/// (ties count half), by brute force over all pairs.
pub fn mann_whitney(prob: &[f32], truth: &[f32]) -> f64 {
    let pos: Vec<f32> = prob.iter().zip(truth).filter(|(_, &t)| t == 1.0).map(|(&p, _)| p).collect();
    let neg: Vec<f32> = prob.iter().zip(truth).filter(|(_, &t)| t == 0.0).map(|(&p, _)| p).collect();
    let mut score = 0.0;
    for &p in &pos {
        for &n in &neg {
            score += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    score / (pos.len() * neg.len()) as f64
}

/// Per-voxel 2-of-3 vote.
pub fn majority(a: &[f32], b: &[f32], c: &[f32]) -> Vec<f32> {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((&a, &b), &c)| {
            let votes = [a, b, c].iter().filter(|&&v| v == 1.0).count();
            if votes >= 2 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn random_mask(rng: &mut impl Rng, dims: [usize; 3], density: f64) -> Volume {
    let n = dims.iter().product();
    let data = (0..n).map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).collect();
    Volume::new(dims, VolumeKind::BinaryMask, data).unwrap()
}

pub fn random_volume(rng: &mut impl Rng, dims: [usize; 3], kind: VolumeKind) -> Volume {
    if kind == VolumeKind::BinaryMask {
        return random_mask(rng, dims, 0.5);
    }
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen::<f32>()).collect();
    Volume::new(dims, kind, data).unwrap()
}

pub fn random_dims(rng: &mut impl Rng, max: usize) -> [usize; 3] {
    [rng.gen_range(1..=max), rng.gen_range(1..=max), rng.gen_range(1..=max)]
}

/// Reference combined loss, written directly from the definition in f64.
pub fn reference_loss(pred: &[f64], target: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(p, s)| p * s).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    let mse: f64 = pred.iter().zip(target).map(|(p, s)| (p - s) * (p - s)).sum::<f64>() / pred.len() as f64;
    -2.0 * inter / total.max(1e-7) + mse
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
