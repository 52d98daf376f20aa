mod common;

use common::{normal_vec, oracle_distance, oracle_ranking, ranking_ids, rng};
use lrfr_core::embedding::{BackendDescriptor, Embedding, EmbeddingSet};
use lrfr_core::matcher::{build_gallery, correlation_distance, identify, identify_all, MatchError};
use rand::Rng;

fn set(dim: usize, entries: Vec<(String, String, Vec<f32>)>) -> EmbeddingSet<f32> {
    let entries =
        entries.into_iter().map(|(image_id, subject_id, vector)| Embedding { image_id, subject_id, vector }).collect();
    EmbeddingSet::new(dim, BackendDescriptor::reference(), entries).unwrap()
}

#[test]
fn distance_matches_compensated_oracle() {
    let mut r = rng(11);
    for dim in [256, 512, 2048] {
        for _ in 0..200 {
            let u = normal_vec(&mut r, dim);
            let v = normal_vec(&mut r, dim);
            let d = correlation_distance(&u, &v).unwrap();
            assert!((d - oracle_distance(&u, &v)).abs() < 1e-9);
        }
    }
}

#[test]
fn distance_is_generic_over_precision() {
    let mut r = rng(12);
    let u = normal_vec(&mut r, 64);
    let v = normal_vec(&mut r, 64);
    let u64v: Vec<f64> = u.iter().map(|&x| x as f64).collect();
    let v64v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    assert_eq!(correlation_distance(&u, &v).unwrap(), correlation_distance(&u64v, &v64v).unwrap());
}

#[test]
fn analytic_cases() {
    assert_eq!(correlation_distance(&[1.0f32, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 0.0);
    assert_eq!(correlation_distance(&[1.0f32, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 2.0);
    assert_eq!(correlation_distance(&[1.0f32, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]).unwrap(), 1.0);
    assert!(matches!(correlation_distance(&[5.0f32; 8], &[1.0; 8]), Err(MatchError::DegenerateEmbedding(_))));
}

#[test]
fn rankings_match_double_loop_oracle() {
    let mut r = rng(13);
    let dim = 128;
    let gallery: Vec<(String, Vec<f32>)> = (0..40).map(|s| (format!("s{s:03}"), normal_vec(&mut r, dim))).collect();
    let probes: Vec<Embedding<f32>> = (0..200)
        .map(|i| {
            let s = i % 40;
            let vector = gallery[s].1.iter().map(|&x| x + 1.5 * r.random::<f32>()).collect();
            Embedding { image_id: format!("p{i}"), subject_id: gallery[s].0.clone(), vector }
        })
        .collect();
    let gset = set(dim, gallery.iter().map(|(s, v)| (format!("g{s}"), s.clone(), v.clone())).collect());
    let batch = identify_all(&probes, &build_gallery(&gset).unwrap());
    assert!(batch.failures.is_empty());
    for (p, res) in probes.iter().zip(&batch.results) {
        let oracle = oracle_ranking(&p.vector, &gallery);
        let ids: Vec<&str> = oracle.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(ranking_ids(res), ids);
    }
}

#[test]
fn ties_break_by_subject_id() {
    let v = vec![1.0f32, 2.0, 4.0, 8.0];
    let gset = set(
        4,
        vec![
            ("g1".into(), "zeta".into(), v.clone()),
            ("g2".into(), "alpha".into(), v.clone()),
            ("g3".into(), "mid".into(), v.iter().map(|x| 2.0 * x + 1.0).collect()),
        ],
    );
    let probe = Embedding { image_id: "p".into(), subject_id: "mid".into(), vector: v };
    let res = identify(&probe, &build_gallery(&gset).unwrap()).unwrap();
    assert_eq!(ranking_ids(&res), ["alpha", "mid", "zeta"]);
    assert!(res.ranked.iter().all(|m| m.distance == 0.0));
}

#[test]
fn rank1_decision_survives_positive_affine_maps() {
    let mut r = rng(14);
    let dim = 256;
    let gallery: Vec<(String, Vec<f32>)> = (0..30).map(|s| (format!("s{s:02}"), normal_vec(&mut r, dim))).collect();
    let gset = set(dim, gallery.iter().map(|(s, v)| (format!("g{s}"), s.clone(), v.clone())).collect());
    let index = build_gallery(&gset).unwrap();
    for i in 0..100 {
        let base = &gallery[i % 30].1;
        let noisy: Vec<f32> = base.iter().map(|&x| x + 2.0 * r.random::<f32>() - 1.0).collect();
        let a = 0.1 + 10.0 * r.random::<f32>();
        let b = 20.0 * r.random::<f32>() - 10.0;
        let mapped: Vec<f32> = noisy.iter().map(|&x| a * x + b).collect();
        let p1 = Embedding { image_id: format!("p{i}"), subject_id: "x".into(), vector: noisy };
        let p2 = Embedding { image_id: format!("q{i}"), subject_id: "x".into(), vector: mapped };
        let d1 = identify(&p1, &index).unwrap();
        let d2 = identify(&p2, &index).unwrap();
        assert_eq!(d1.decision(), d2.decision());
    }
}

#[test]
fn degenerate_probe_is_reported_not_fatal() {
    let gset = set(3, vec![("g".into(), "a".into(), vec![1.0, 2.0, 3.0])]);
    let probes = vec![
        Embedding { image_id: "ok".into(), subject_id: "a".into(), vector: vec![3.0f32, 1.0, 2.0] },
        Embedding { image_id: "flat".into(), subject_id: "a".into(), vector: vec![7.0f32; 3] },
    ];
    let batch = identify_all(&probes, &build_gallery(&gset).unwrap());
    assert_eq!(batch.results.len(), 1);
    assert_eq!(batch.failures.len(), 1);
    assert_eq!(batch.failures[0].image_id, "flat");
}

#[test]
fn results_are_independent_of_pool_size() {
    let mut r = rng(15);
    let dim = 64;
    let gset = set(dim, (0..20).map(|s| (format!("g{s}"), format!("s{s:02}"), normal_vec(&mut r, dim))).collect());
    let probes: Vec<Embedding<f32>> = (0..100)
        .map(|i| Embedding {
            image_id: format!("p{i}"),
            subject_id: format!("s{:02}", i % 20),
            vector: normal_vec(&mut r, dim),
        })
        .collect();
    let index = build_gallery(&gset).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| identify_all(&probes, &index).results)
    };
    assert_eq!(run(1), run(8));
}
