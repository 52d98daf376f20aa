//! Identification rates, CMC curves, repeated random sub-sampling and
//! sweep grids.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::corpus::Manifest;
use crate::embedding::EmbeddingSet;
use crate::matcher::{build_gallery_from, identify_all, IdentificationResult, MatchError};
use crate::report::{write_provenance, Provenance};
use crate::scalar::Scalar;

/// Row label used for the all-conditions aggregate in reports.
pub const OVERALL: &str = "overall";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no identification results to evaluate")]
    EmptyResults,
    #[error("rank must be >= 1")]
    InvalidRank,
    #[error("results rank galleries of different sizes ({0} vs {1})")]
    InconsistentGallery(usize, usize),
    #[error("probe {0} is not a probe of the manifest")]
    UnknownProbe(String),
    #[error("subset of {requested} subjects requested but only {available} enrolled")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("repeats must be >= 1")]
    InvalidRepeats,
    #[error(transparent)]
    Match(#[from] MatchError),
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Percentage of results whose true subject is among the first `k` ranks.
pub fn rank_k_ir<R: Borrow<IdentificationResult>>(results: &[R], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidRank);
    }
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let hits = results
        .iter()
        .map(Borrow::borrow)
        .filter(|r| r.ranked.iter().take(k).any(|m| m.subject_id == r.true_subject_id))
        .count();
    Ok(percent(hits, results.len()))
}

/// Cumulative match characteristic for `k = 1..=G`.
pub fn cmc<R: Borrow<IdentificationResult>>(results: &[R]) -> Result<Vec<(usize, f64)>, EvalError> {
    let first = results.first().ok_or(EvalError::EmptyResults)?.borrow();
    let g = first.ranked.len();
    let mut at_rank = vec![0usize; g + 1];
    for r in results.iter().map(Borrow::borrow) {
        if r.ranked.len() != g {
            return Err(EvalError::InconsistentGallery(g, r.ranked.len()));
        }
        if let Some(rank) = r.true_rank() {
            at_rank[rank] += 1;
        }
    }
    let mut cumulative = 0;
    Ok((1..=g)
        .map(|k| {
            cumulative += at_rank[k];
            (k, percent(cumulative, results.len()))
        })
        .collect())
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for a single
/// value). Deviations are taken from the first value before the usual two
/// passes, so a constant sequence yields its value and exactly zero.
pub fn mean_std<T: Scalar>(values: &[T]) -> Option<(T, T)> {
    let first = *values.first()?;
    let n = T::from_usize(values.len())?;
    let shifted: Vec<T> = values.iter().map(|&v| v - first).collect();
    let shift_mean = shifted.iter().fold(T::zero(), |a, &d| a + d) / n;
    let std = if values.len() < 2 {
        T::zero()
    } else {
        let ss = shifted.iter().fold(T::zero(), |a, &d| a + (d - shift_mean) * (d - shift_mean));
        (ss / (n - T::one())).sqrt()
    };
    Some((first + shift_mean, std))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionReport {
    /// Rank -> identification rate in percent. Empty when no probe of the
    /// condition produced a result.
    pub rank_k_ir: BTreeMap<usize, f64>,
    pub probe_count: usize,
    pub error_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub conditions: BTreeMap<String, ConditionReport>,
    pub overall: ConditionReport,
}

fn condition_report(
    results: &[&IdentificationResult],
    errors: usize,
    ranks: &[usize],
) -> Result<ConditionReport, EvalError> {
    let mut rates = BTreeMap::new();
    if !results.is_empty() {
        for &k in ranks {
            rates.insert(k, rank_k_ir(results, k)?);
        }
    }
    Ok(ConditionReport { rank_k_ir: rates, probe_count: results.len(), error_count: errors })
}

/// Per-condition Rank-k rates. Manifest probes without a result count as
/// errors and are excluded from the denominators.
pub fn evaluate(
    manifest: &Manifest,
    results: &[IdentificationResult],
    ranks: &[usize],
) -> Result<EvalReport, EvalError> {
    if ranks.contains(&0) {
        return Err(EvalError::InvalidRank);
    }
    let condition_of: HashMap<&str, &str> =
        manifest.probes().map(|r| (r.image_id.as_str(), r.condition.as_str())).collect();
    let mut grouped: BTreeMap<&str, Vec<&IdentificationResult>> =
        manifest.conditions().into_iter().map(|c| (c, Vec::new())).collect();
    let mut seen = BTreeSet::new();
    for r in results {
        let cond = condition_of
            .get(r.probe_image_id.as_str())
            .ok_or_else(|| EvalError::UnknownProbe(r.probe_image_id.clone()))?;
        seen.insert(r.probe_image_id.as_str());
        grouped.entry(cond).or_default().push(r);
    }
    let mut missing: BTreeMap<&str, usize> = BTreeMap::new();
    for p in manifest.probes() {
        if !seen.contains(p.image_id.as_str()) {
            *missing.entry(p.condition.as_str()).or_default() += 1;
        }
    }
    let mut report = EvalReport::default();
    for (cond, rs) in &grouped {
        let errors = missing.get(cond).copied().unwrap_or(0);
        report.conditions.insert(cond.to_string(), condition_report(rs, errors, ranks)?);
    }
    let all: Vec<&IdentificationResult> = results.iter().collect();
    report.overall = condition_report(&all, missing.values().sum(), ranks)?;
    Ok(report)
}

pub fn write_eval_csv(report: &EvalReport, provenance: Option<&Provenance>, mut w: impl Write) -> std::io::Result<()> {
    if let Some(p) = provenance {
        write_provenance(&mut w, p)?;
    }
    for (cond, c) in report.conditions.iter().map(|(k, v)| (k.as_str(), v)).chain([(OVERALL, &report.overall)]) {
        writeln!(w, "# counts {cond} probes={} errors={}", c.probe_count, c.error_count)?;
    }
    writeln!(w, "condition,rank,ir_percent")?;
    let rows = report.conditions.iter().map(|(k, v)| (k.as_str(), v)).chain([(OVERALL, &report.overall)]);
    for (cond, c) in rows {
        for (k, ir) in &c.rank_k_ir {
            writeln!(w, "{},{k},{ir}", csv_field(cond))?;
        }
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Uniform integer in `0..bound` from 64-bit draws by rejection sampling.
fn uniform_below(rng: &mut impl RngCore, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let rem = (u64::MAX % bound + 1) % bound;
    let limit = u64::MAX - rem;
    loop {
        let r = rng.next_u64();
        if r <= limit {
            return r % bound;
        }
    }
}

/// Subjects drawn for one repeat: ChaCha8 seeded with `seed` (via
/// `seed_from_u64`) on stream `repeat`, Fisher-Yates over the sorted
/// subject list from the last position down, first `subset_size` taken,
/// returned sorted.
pub fn draw_subjects<'a>(sorted_subjects: &[&'a str], subset_size: usize, seed: u64, repeat: u64) -> Vec<&'a str> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat);
    let mut order = sorted_subjects.to_vec();
    for i in (1..order.len()).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order.truncate(subset_size);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrssvStats {
    pub mean: f64,
    pub std: f64,
    /// Rank-1 rate per repeat, in repeat order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrssvReport {
    pub repeats: usize,
    pub subset_size: usize,
    pub seed: u64,
    pub conditions: BTreeMap<String, RrssvStats>,
    pub subsets: Vec<Vec<String>>,
}

fn gallery_subjects(manifest: &Manifest) -> Vec<&str> {
    let set: BTreeSet<&str> = manifest.gallery().map(|r| r.subject_id.as_str()).collect();
    set.into_iter().collect()
}

fn check_rrssv_args(available: usize, subset_size: usize, repeats: usize) -> Result<(), EvalError> {
    if repeats == 0 {
        return Err(EvalError::InvalidRepeats);
    }
    if subset_size > available || subset_size == 0 {
        return Err(EvalError::SubsetTooLarge { requested: subset_size, available });
    }
    Ok(())
}

fn rank1_by_condition(
    manifest: &Manifest,
    results: &[IdentificationResult],
) -> Result<BTreeMap<String, f64>, EvalError> {
    let report = evaluate(manifest, results, &[1])?;
    Ok(report.conditions.into_iter().filter_map(|(c, r)| r.rank_k_ir.get(&1).map(|&v| (c, v))).collect())
}

fn assemble(
    subset_size: usize,
    seed: u64,
    per_repeat: Vec<BTreeMap<String, f64>>,
    subsets: Vec<Vec<String>>,
) -> RrssvReport {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for repeat in &per_repeat {
        for (c, v) in repeat {
            values.entry(c.clone()).or_default().push(*v);
        }
    }
    let conditions = values
        .into_iter()
        .map(|(c, values)| {
            let (mean, std) = mean_std(&values).expect("at least one repeat");
            (c, RrssvStats { mean, std, values })
        })
        .collect();
    RrssvReport { repeats: per_repeat.len(), subset_size, seed, conditions, subsets }
}

/// RRSSV from existing full rankings. Restricting a full ranking to a
/// subject subset gives exactly the ranking against the restricted gallery,
/// so no re-matching is needed.
pub fn rrssv_from_results(
    manifest: &Manifest,
    results: &[IdentificationResult],
    subset_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<RrssvReport, EvalError> {
    let subjects = gallery_subjects(manifest);
    check_rrssv_args(subjects.len(), subset_size, repeats)?;
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut subsets = Vec::with_capacity(repeats);
    for repeat in 0..repeats {
        let chosen: BTreeSet<&str> = draw_subjects(&subjects, subset_size, seed, repeat as u64).into_iter().collect();
        let restricted: Vec<IdentificationResult> = results
            .iter()
            .filter(|r| chosen.contains(r.true_subject_id.as_str()))
            .map(|r| IdentificationResult {
                probe_image_id: r.probe_image_id.clone(),
                true_subject_id: r.true_subject_id.clone(),
                ranked: r.ranked.iter().filter(|m| chosen.contains(m.subject_id.as_str())).cloned().collect(),
            })
            .collect();
        per_repeat.push(rank1_by_condition(&manifest.restrict(&chosen), &restricted)?);
        subsets.push(chosen.iter().map(|s| s.to_string()).collect());
    }
    Ok(assemble(subset_size, seed, per_repeat, subsets))
}

/// RRSSV by re-matching: each repeat builds a gallery from the drawn
/// subjects and identifies their probes.
pub fn rrssv<T: Scalar>(
    manifest: &Manifest,
    gallery: &EmbeddingSet<T>,
    probes: &EmbeddingSet<T>,
    subset_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<RrssvReport, EvalError> {
    let subjects = gallery_subjects(manifest);
    check_rrssv_args(subjects.len(), subset_size, repeats)?;
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut subsets = Vec::with_capacity(repeats);
    for repeat in 0..repeats {
        let chosen: BTreeSet<&str> = draw_subjects(&subjects, subset_size, seed, repeat as u64).into_iter().collect();
        let g: Vec<_> = gallery.entries.iter().filter(|e| chosen.contains(e.subject_id.as_str())).cloned().collect();
        let p: Vec<_> = probes.entries.iter().filter(|e| chosen.contains(e.subject_id.as_str())).cloned().collect();
        let index = build_gallery_from(gallery.dim, &g)?;
        let batch = identify_all(&p, &index);
        per_repeat.push(rank1_by_condition(&manifest.restrict(&chosen), &batch.results)?);
        subsets.push(chosen.iter().map(|s| s.to_string()).collect());
    }
    Ok(assemble(subset_size, seed, per_repeat, subsets))
}

pub fn write_rrssv_csv(
    report: &RrssvReport,
    provenance: Option<&Provenance>,
    mut w: impl Write,
) -> std::io::Result<()> {
    if let Some(p) = provenance {
        write_provenance(&mut w, p)?;
    }
    writeln!(w, "# rrssv repeats={} subset_size={} seed={}", report.repeats, report.subset_size, report.seed)?;
    write!(w, "condition,mean,std")?;
    for i in 1..=report.repeats {
        write!(w, ",repeat_{i}")?;
    }
    writeln!(w)?;
    for (cond, s) in &report.conditions {
        write!(w, "{},{},{}", csv_field(cond), s.mean, s.std)?;
        for v in &s.values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub crop_ratio: f64,
    pub resolution: u32,
    pub condition: String,
    /// Rank-1 rate in percent, `None` when the cell failed.
    pub rank1_ir: Option<f64>,
    pub error: Option<String>,
}

/// Crop ratio x gallery resolution x condition grid of Rank-1 rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub crop_ratios: Vec<f64>,
    pub resolutions: Vec<u32>,
    pub conditions: Vec<String>,
    /// Row-major over (ratio, resolution, condition).
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, crop_ratio: f64, resolution: u32, condition: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.crop_ratio == crop_ratio && c.resolution == resolution && c.condition == condition)
    }
}

pub fn write_sweep_csv(grid: &SweepGrid, provenance: Option<&Provenance>, mut w: impl Write) -> std::io::Result<()> {
    if let Some(p) = provenance {
        write_provenance(&mut w, p)?;
    }
    for c in grid.cells.iter().filter(|c| c.error.is_some()) {
        writeln!(
            w,
            "# failed crop_ratio={} resolution={} condition={} error={}",
            c.crop_ratio,
            c.resolution,
            c.condition,
            c.error.as_deref().unwrap_or_default().replace('\n', " ")
        )?;
    }
    writeln!(w, "crop_ratio,resolution,condition,rank1_ir")?;
    for c in &grid.cells {
        let ir = c.rank1_ir.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        writeln!(w, "{},{},{},{ir}", c.crop_ratio, c.resolution, csv_field(&c.condition))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageRecord, Role};
    use crate::matcher::RankedMatch;

    fn result(probe: &str, truth: &str, order: &[&str]) -> IdentificationResult {
        IdentificationResult {
            probe_image_id: probe.into(),
            true_subject_id: truth.into(),
            ranked: order
                .iter()
                .enumerate()
                .map(|(i, s)| RankedMatch { subject_id: s.to_string(), distance: i as f64 * 0.1 })
                .collect(),
        }
    }

    #[test]
    fn rank_k_counting() {
        let rs = vec![result("1", "a", &["a", "b"]), result("2", "b", &["b", "a"]), result("3", "a", &["b", "a"])];
        assert_eq!(rank_k_ir(&rs, 1).unwrap(), 200.0 / 3.0);
        assert_eq!(rank_k_ir(&rs, 2).unwrap(), 100.0);
        assert_eq!(rank_k_ir(&rs, 0), Err(EvalError::InvalidRank));
        assert_eq!(rank_k_ir::<IdentificationResult>(&[], 1), Err(EvalError::EmptyResults));
    }

    #[test]
    fn cmc_step_and_flat() {
        let step = vec![result("p", "c", &["a", "b", "c", "d", "e"])];
        let curve: Vec<f64> = cmc(&step).unwrap().into_iter().map(|(_, v)| v).collect();
        assert_eq!(curve, vec![0.0, 0.0, 100.0, 100.0, 100.0]);

        let flat = vec![result("p", "a", &["a", "b"]), result("q", "b", &["b", "a"])];
        assert!(cmc(&flat).unwrap().iter().all(|&(_, v)| v == 100.0));

        let mixed = vec![result("p", "a", &["a", "b"]), result("q", "b", &["b"])];
        assert_eq!(cmc(&mixed), Err(EvalError::InconsistentGallery(2, 1)));
        assert_eq!(cmc::<IdentificationResult>(&[]), Err(EvalError::EmptyResults));
    }

    #[test]
    fn stats() {
        assert_eq!(mean_std(&[75.0f64; 10]), Some((75.0, 0.0)));
        assert_eq!(mean_std(&[100.0 / 3.0f64; 7]), Some((100.0 / 3.0, 0.0)));
        assert_eq!(mean_std(&[4.0f64]), Some((4.0, 0.0)));
        assert_eq!(mean_std::<f64>(&[]), None);
        let (m, s) = mean_std(&[2.0f32, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m, 5.0);
        assert!((s - (32.0f32 / 7.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn subject_draws() {
        let subjects: Vec<String> = (0..130).map(|i| format!("{i:03}")).collect();
        let refs: Vec<&str> = subjects.iter().map(String::as_str).collect();
        let a = draw_subjects(&refs, 80, 42, 0);
        assert_eq!(a.len(), 80);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, draw_subjects(&refs, 80, 42, 0));
        assert_ne!(a, draw_subjects(&refs, 80, 42, 1));
        assert_ne!(a, draw_subjects(&refs, 80, 43, 0));
        assert_eq!(draw_subjects(&refs, 130, 1, 0), refs);
    }

    fn record(id: &str, subject: &str, role: Role, cond: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            subject_id: subject.into(),
            role,
            condition: cond.into(),
            path: id.into(),
            face_box: None,
            landmarks: None,
        }
    }

    #[test]
    fn evaluate_counts_missing_probes() {
        let m = Manifest::new(
            "m",
            vec![
                record("ga", "a", Role::Gallery, "hq"),
                record("gb", "b", Role::Gallery, "hq"),
                record("p1", "a", Role::Probe, "d1"),
                record("p2", "b", Role::Probe, "d1"),
                record("p3", "b", Role::Probe, "d2"),
            ],
        )
        .unwrap();
        let rs = vec![result("p1", "a", &["a", "b"]), result("p3", "b", &["a", "b"])];
        let rep = evaluate(&m, &rs, &[1, 2]).unwrap();
        assert_eq!(rep.conditions["d1"].probe_count, 1);
        assert_eq!(rep.conditions["d1"].error_count, 1);
        assert_eq!(rep.conditions["d1"].rank_k_ir[&1], 100.0);
        assert_eq!(rep.conditions["d2"].rank_k_ir[&1], 0.0);
        assert_eq!(rep.conditions["d2"].rank_k_ir[&2], 100.0);
        assert_eq!(rep.overall.rank_k_ir[&1], 50.0);
        assert_eq!(rep.overall.error_count, 1);

        let unknown = vec![result("zz", "a", &["a", "b"])];
        assert_eq!(evaluate(&m, &unknown, &[1]), Err(EvalError::UnknownProbe("zz".into())));

        let mut buf = Vec::new();
        write_eval_csv(&rep, None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("condition,rank,ir_percent\nd1,1,100\nd1,2,100\nd2,1,0\nd2,2,100\noverall,1,50\n"));
    }

    #[test]
    fn rrssv_argument_checks() {
        let m = Manifest::new("m", vec![record("ga", "a", Role::Gallery, "hq")]).unwrap();
        assert_eq!(rrssv_from_results(&m, &[], 2, 1, 0), Err(EvalError::SubsetTooLarge { requested: 2, available: 1 }));
        assert_eq!(rrssv_from_results(&m, &[], 1, 0, 0), Err(EvalError::InvalidRepeats));
    }

    #[test]
    fn sweep_csv_marks_failures() {
        let grid = SweepGrid {
            crop_ratios: vec![1.0],
            resolutions: vec![24, 32],
            conditions: vec!["d1".into()],
            cells: vec![
                SweepCell {
                    crop_ratio: 1.0,
                    resolution: 24,
                    condition: "d1".into(),
                    rank1_ir: Some(50.0),
                    error: None,
                },
                SweepCell {
                    crop_ratio: 1.0,
                    resolution: 32,
                    condition: "d1".into(),
                    rank1_ir: None,
                    error: Some("boom".into()),
                },
            ],
        };
        let mut buf = Vec::new();
        write_sweep_csv(&grid, None, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# failed crop_ratio=1 resolution=32 condition=d1 error=boom\ncrop_ratio,resolution,condition,rank1_ir\n1,24,d1,50\n1,32,d1,NA\n"
        );
        assert_eq!(grid.cell(1.0, 24, "d1").unwrap().rank1_ir, Some(50.0));
    }
}
