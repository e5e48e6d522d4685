use std::collections::BTreeMap;

use anomaly_recon::evaluate::{volume_detection, Stat};
use anomaly_recon::plot::{roc_svg, Curve};
use ndarray::Array3;

/// Tie-corrected Mann-Whitney U over all positive/negative pairs, normalized to [0, 1].
fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut u = 0.0;
    for p in pos {
        for n in neg {
            u += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    u / (pos.len() * neg.len()) as f64
}

#[test]
fn twenty_voxel_fixture_auc_equals_rank_statistic() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.8, 0.2, 0.5, 0.5, 0.9, 0.05, 0.3, 0.7, 0.6, 0.6, 0.15, 0.45, 0.55, 0.25, 0.65, 0.4];
    let blob = [0, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1];
    let hole = [0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0];
    // voxels 0, 9 and 14 are background
    let body = [0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1];
    let a = |v: &[f64]| Array3::from_shape_vec((1, 4, 5), v.to_vec()).unwrap();
    let m = |v: &[u8]| Array3::from_shape_vec((1, 4, 5), v.to_vec()).unwrap();
    let masks = BTreeMap::from([("metastatic_tumor_analog".to_string(), m(&blob)), ("cavity_analog".to_string(), m(&hole))]);
    let (det, _) = volume_detection("fixture", &a(&scores), &masks, &m(&body)).unwrap().unwrap();

    let oracle = |labels: &[u8], region: &dyn Fn(usize) -> bool| {
        let pos: Vec<f64> = (0..20).filter(|&i| region(i) && labels[i] == 1).map(|i| scores[i]).collect();
        let neg: Vec<f64> = (0..20).filter(|&i| region(i) && blob[i] == 0 && hole[i] == 0).map(|i| scores[i]).collect();
        mann_whitney(&pos, &neg)
    };
    let any: Vec<u8> = blob.iter().zip(&hole).map(|(a, b)| a | b).collect();
    let in_body = |i: usize| body[i] == 1;
    let all = |_: usize| true;
    for (class, labels) in [("metastatic_tumor_analog", &blob[..]), ("cavity_analog", &hole[..]), ("any", &any[..])] {
        assert!((det.auc[class] - oracle(labels, &in_body)).abs() < 1e-12, "{class} rectified");
        assert!((det.auc_all_voxels[class] - oracle(labels, &all)).abs() < 1e-12, "{class} all voxels");
    }
}

#[test]
fn volume_without_lesion_in_body_is_skipped() {
    let scores = Array3::from_elem((1, 2, 2), 0.5);
    let lesion = Array3::from_shape_vec((1, 2, 2), vec![1u8, 0, 0, 0]).unwrap();
    let body = Array3::from_shape_vec((1, 2, 2), vec![0u8, 1, 1, 1]).unwrap();
    let masks = BTreeMap::from([("cavity_analog".to_string(), lesion)]);
    assert!(volume_detection("v", &scores, &masks, &body).unwrap().is_none());
    assert!(volume_detection("v", &scores, &BTreeMap::new(), &body).unwrap().is_none());
}

#[test]
fn spread_is_sample_standard_deviation() {
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.n, 4);
    assert!((s.mean - 2.5).abs() < 1e-15);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!((s.se - s.std / 2.0).abs() < 1e-15);
    assert_eq!(Stat::of(&[7.0]).std, 0.0);
    assert_eq!(Stat::of(&[]).n, 0);
}

#[test]
fn roc_plot_is_well_formed_svg() {
    let svg = roc_svg("a < b & c", &[Curve { label: "x".into(), points: vec![(0.0, 0.0), (0.2, 0.7), (1.0, 1.0)] }]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("a &lt; b &amp; c"));
    assert_eq!(svg.matches("<polyline").count(), 1);
}
