#![allow(dead_code)]

use lrfr_core::matcher::IdentificationResult;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Neumaier-compensated sum.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// One minus the Pearson correlation, evaluated straight from its
/// definition with compensated sums.
pub fn oracle_distance(u: &[f32], v: &[f32]) -> f64 {
    let n = u.len() as f64;
    let mu = exact_sum(u.iter().map(|&x| x as f64)) / n;
    let mv = exact_sum(v.iter().map(|&x| x as f64)) / n;
    let du: Vec<f64> = u.iter().map(|&x| x as f64 - mu).collect();
    let dv: Vec<f64> = v.iter().map(|&x| x as f64 - mv).collect();
    let num = exact_sum(du.iter().zip(&dv).map(|(a, b)| a * b));
    let nu = exact_sum(du.iter().map(|a| a * a)).sqrt();
    let nv = exact_sum(dv.iter().map(|b| b * b)).sqrt();
    (1.0 - num / (nu * nv)).clamp(0.0, 2.0)
}

/// Double-loop nearest-neighbour ranking: every gallery subject with its
/// oracle distance, ordered by distance then subject id.
pub fn oracle_ranking(probe: &[f32], gallery: &[(String, Vec<f32>)]) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = gallery.iter().map(|(s, g)| (s.clone(), oracle_distance(probe, g))).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

pub fn ranking_ids(r: &IdentificationResult) -> Vec<&str> {
    r.ranked.iter().map(|m| m.subject_id.as_str()).collect()
}
