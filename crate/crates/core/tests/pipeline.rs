use std::sync::Arc;

use lrfr_core::embedding::{reference_embed, ReferenceEmbedder};
use lrfr_core::imaging::{match_resolution, resize, ImageBuffer, ResizeKernel};
use lrfr_core::pipeline::{embed_manifest, run_single, sweep, RunConfig};
use lrfr_core::synthetic::{generate, SyntheticSpec};
use lrfr_core::{CROP_RATIOS, MATCH_RESOLUTIONS};

fn scene(side: u32, seed: u64) -> ImageBuffer {
    let spec = SyntheticSpec { subjects: 1, gallery_size: side, seed, ..SyntheticSpec::default() };
    generate(&spec).unwrap().images.swap_remove(0).1
}

#[test]
fn reference_embedding_is_nearly_scale_invariant() {
    // Area averaging composes: 64 -> 16 equals 64 -> 32 -> 16 up to the
    // intermediate and final roundings (at most one gray level per grid
    // cell) plus the induced shift of the grid mean (also at most one).
    for seed in 0..5 {
        let img = scene(64, seed);
        let half = resize(&img, 32, 32, ResizeKernel::Area).unwrap();
        let a = reference_embed(&img);
        let b = reference_embed(&half);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 2.0));
        assert_eq!(a.iter().map(|&x| x as f64).sum::<f64>(), 0.0);
    }
}

#[test]
fn resolution_loss_is_monotone() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/texture_face.png");
    let fixture = ImageBuffer::open(&path).unwrap();
    let img = resize(&fixture, 112, 112, ResizeKernel::Area).unwrap();
    let identity = match_resolution(&img, 112, 112).unwrap().image;
    assert_eq!(identity, img);
    let mad = |t: u32| {
        let m = match_resolution(&img, t, 112).unwrap();
        assert!(m.warning.is_none());
        m.image.pixels().iter().zip(identity.pixels()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
            / img.pixels().len() as f64
    };
    let losses: Vec<f64> = [8, 16, 24, 32, 40, 48, 64, 112].map(mad).to_vec();
    assert!(losses.windows(2).all(|w| w[0] >= w[1]), "{losses:?}");
    assert_eq!(losses[7], 0.0);
}

#[test]
fn embedding_is_independent_of_pool_size() {
    let corpus = generate(&SyntheticSpec::default()).unwrap();
    let source = corpus.source();
    let backend = ReferenceEmbedder::default();
    let config = RunConfig { crop_ratio: 1.3, resolution: Some(24), input_size: Some(112) };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| embed_manifest(&corpus.manifest, &source, &backend, &config))
    };
    let (a, b) = (run(1), run(8));
    assert_eq!(a.gallery, b.gallery);
    assert_eq!(a.probes, b.probes);
    assert!(a.failures.is_empty());
}

#[test]
fn sweep_cells_equal_single_runs() {
    let corpus = generate(&SyntheticSpec::default()).unwrap();
    let source = corpus.source();
    let backend = Arc::new(ReferenceEmbedder::default());
    let (grid, failures) =
        sweep(&corpus.manifest, &source, backend.clone(), &CROP_RATIOS, &MATCH_RESOLUTIONS, Some(112));
    assert!(failures.is_empty());
    assert_eq!(grid.cells.len(), 6 * 5 * 3);
    for &ratio in &CROP_RATIOS {
        for &res in &MATCH_RESOLUTIONS {
            let config = RunConfig { crop_ratio: ratio, resolution: Some(res), input_size: Some(112) };
            let single = run_single(&corpus.manifest, &source, backend.as_ref(), &config, &[1]).unwrap();
            for cond in &grid.conditions {
                let cell = grid.cell(ratio, res, cond).unwrap();
                assert_eq!(cell.rank1_ir, Some(single.report.conditions[cond].rank_k_ir[&1]));
            }
        }
    }
}

#[test]
fn upscaling_gallery_raises_warning() {
    let corpus = generate(&SyntheticSpec { gallery_size: 40, ..SyntheticSpec::default() }).unwrap();
    let config = RunConfig { crop_ratio: 1.0, resolution: Some(64), input_size: Some(112) };
    let out = embed_manifest(&corpus.manifest, &corpus.source(), &ReferenceEmbedder::default(), &config);
    assert_eq!(out.warnings.len(), 10);
    assert!(out.failures.is_empty());
}
