use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mmvm_core::data::{
    binarize_label, binarize_labels, center_crop, generate_synthetic, load_dataset, read_pgm, read_vector,
    resize_bilinear, subject_split, write_dataset, write_pgm, write_vector, DataForm, Dataset, GrayImage,
    LoadOptions, OutputForm, SyntheticConfig, DEFAULT_LABELS,
};
use mmvm_core::eval::auroc;
use mmvm_core::Error;

fn small(n_subjects: usize) -> SyntheticConfig {
    SyntheticConfig { n_subjects, ..Default::default() }
}

#[test]
fn synthetic_is_deterministic_and_well_formed() {
    let a = generate_synthetic(&small(80), 3).unwrap();
    let b = generate_synthetic(&small(80), 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_synthetic(&small(80), 4).unwrap());
    a.validate().unwrap();
    assert_eq!(a.num_labels(), 14);
    assert_eq!(a.label_names, DEFAULT_LABELS.map(String::from).to_vec());
    assert_eq!(a.dims(), [32, 24]);

    // Pairing: every sample of a study pairs a distinct (frontal, lateral) combination.
    let mut per_study = std::collections::BTreeMap::<&str, (BTreeSet<&str>, BTreeSet<&str>, usize)>::new();
    for s in &a.samples {
        let e = per_study.entry(&s.study_id).or_default();
        e.0.insert(&s.frontal_source);
        e.1.insert(&s.lateral_source);
        e.2 += 1;
    }
    for (study, (f, l, n)) in per_study {
        assert_eq!(f.len() * l.len(), n, "{study}");
    }
}

#[test]
fn manifest_bytes_are_reproducible() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small(20), 8).unwrap();
    let m1 = write_dataset(&data, d1.path()).unwrap();
    let m2 = write_dataset(&generate_synthetic(&small(20), 8).unwrap(), d2.path()).unwrap();
    assert_eq!(fs::read(m1).unwrap(), fs::read(m2).unwrap());
}

#[test]
fn prevalence_matches_base_rates() {
    let cfg = SyntheticConfig {
        n_subjects: 10_000,
        studies_per_subject: [1, 1],
        frontal_per_study: [1, 1],
        lateral_per_study: [1, 1],
        output: OutputForm::Vector { dim_f: 2, dim_l: 2 },
        nuisance_dim_f: 1,
        nuisance_dim_l: 1,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg, 21).unwrap();
    assert_eq!(data.len(), 10_000);
    let n = data.len() as f64;
    for (j, p) in cfg.rates().iter().enumerate() {
        let hits = data.label_column(j).iter().filter(|&&y| y == 1).count() as f64;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((hits / n - p).abs() < 3.0 * se, "label {j}: {} vs {p}", hits / n);
    }
}

/// Least-squares linear probe (with intercept), fit by normal equations.
fn linear_probe(x: &[Vec<f64>], y: &[u8]) -> Vec<f64> {
    let d = x[0].len() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.iter().zip(y) {
        let f: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..d {
            for j in 0..d {
                a[i][j] += f[i] * f[j];
            }
            a[i][d] += f[i] * t as f64;
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += 1e-6;
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let k = a[r][c] / a[c][c];
                for j in c..=d {
                    a[r][j] -= k * a[c][j];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

fn probe_auroc(data: &Dataset, m: usize) -> f64 {
    let rows: Vec<Vec<f64>> = data.samples.iter().map(|s| if m == 0 { s.x_f.clone() } else { s.x_l.clone() }).collect();
    let y = data.label_column(0);
    let half = rows.len() / 2;
    let w = linear_probe(&rows[..half], &y[..half]);
    let scores: Vec<f64> = rows[half..].iter().map(|r| w[0] + r.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>()).collect();
    auroc(&scores, &y[half..]).unwrap().value
}

#[test]
fn drowning_one_view_in_noise_leaves_the_other_informative() {
    let base = SyntheticConfig {
        n_subjects: 4000,
        studies_per_subject: [1, 1],
        frontal_per_study: [1, 1],
        lateral_per_study: [1, 1],
        label_count: 1,
        base_rates: vec![0.4],
        label_signal: 3.0,
        ..Default::default()
    };
    let clean = generate_synthetic(&base, 5).unwrap();
    let noisy = generate_synthetic(&SyntheticConfig { sigma_f: 1e6, ..base }, 5).unwrap();
    assert!(probe_auroc(&clean, 0) > 0.7);
    assert!((probe_auroc(&noisy, 0) - 0.5).abs() < 0.05);
    assert!(probe_auroc(&noisy, 1) > 0.7);
}

#[test]
fn subject_split_is_disjoint_and_deterministic() {
    let data = generate_synthetic(&small(200), 1).unwrap();
    let parts = subject_split(&data, [0.8, 0.1, 0.1], 9).unwrap();
    assert_eq!(parts, subject_split(&data, [0.8, 0.1, 0.1], 9).unwrap());
    let ids: Vec<BTreeSet<String>> = parts.iter().map(Dataset::subject_ids).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(ids[i].is_disjoint(&ids[j]));
        }
    }
    // 146 subjects keep at least one pair: 116.8 / 14.6 / 14.6, remainders largest-first.
    assert_eq!(data.subject_ids().len(), 146);
    assert_eq!(ids.iter().map(BTreeSet::len).collect::<Vec<_>>(), vec![117, 15, 14]);
    assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), data.len());

    let ten = generate_synthetic(&SyntheticConfig { lateral_per_study: [1, 2], ..small(10) }, 1).unwrap();
    let parts = subject_split(&ten, [0.8, 0.1, 0.1], 0).unwrap();
    assert_eq!(parts.iter().map(|p| p.subject_ids().len()).collect::<Vec<_>>(), vec![8, 1, 1]);
    assert!(subject_split(&generate_synthetic(&small(2), 1).unwrap(), [0.8, 0.1, 0.1], 0).is_err());
    assert!(subject_split(&ten, [0.8, 0.3, 0.1], 0).is_err());
}

#[test]
fn binarization_table() {
    for (raw, want) in [("1", 1), ("1.0", 1), ("0", 0), ("0.0", 0), ("", 0), ("-1", 0), ("-1.0", 0)] {
        assert_eq!(binarize_label(raw), Some(want), "{raw:?}");
    }
    assert_eq!(binarize_label("2"), None);
    let err = binarize_labels(&["1", "x"], Path::new("m.csv"), 7).unwrap_err();
    assert!(matches!(&err, Error::Parse { msg, .. } if msg.contains("row 7")), "{err}");
}

#[test]
fn vector_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small(30), 2).unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let loaded = load_dataset(&manifest, &LoadOptions::default()).unwrap();
    assert_eq!(loaded, data);
}

#[test]
fn image_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { output: OutputForm::Image { side: 16 }, ..small(15) };
    let data = generate_synthetic(&cfg, 2).unwrap();
    assert_eq!(data.form, DataForm::Image { side: 16 });
    assert!(data.samples.iter().all(|s| s.x_f.iter().all(|v| (0.0..=1.0).contains(v))));
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let loaded = load_dataset(&manifest, &LoadOptions { image_side: Some(16), ..Default::default() }).unwrap();
    assert_eq!(loaded, data);
    let upscaled = load_dataset(&manifest, &LoadOptions::default()).unwrap();
    assert_eq!(upscaled.dims(), [32 * 32, 32 * 32]);
}

#[test]
fn raw_label_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_vector(&dir.path().join("f.vec"), &[1.0, 2.0]).unwrap();
    write_vector(&dir.path().join("l.vec"), &[3.0]).unwrap();
    let manifest = dir.path().join("manifest.csv");
    fs::write(
        &manifest,
        "sample_id,subject_id,study_id,path_frontal,path_lateral,A,B,C,D\ns1,p1,st1,f.vec,l.vec,1,-1,,0\n",
    )
    .unwrap();
    assert!(matches!(load_dataset(&manifest, &LoadOptions::default()), Err(Error::Parse { .. })));
    let data = load_dataset(&manifest, &LoadOptions { raw_labels: true, ..Default::default() }).unwrap();
    assert_eq!(data.samples[0].labels, vec![1, 0, 0, 0]);
    assert_eq!(data.samples[0].x_f, vec![1.0, 2.0]);

    fs::write(&manifest, "sample_id,subject_id,study_id,path_frontal,path_lateral,A\ns1,p1,st1,f.vec,missing.vec,1\n").unwrap();
    assert!(load_dataset(&manifest, &LoadOptions::default()).is_err());
}

#[test]
fn file_format_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.pgm");
    fs::write(&p, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    assert!(matches!(read_pgm(&p), Err(Error::Parse { path, .. }) if path.contains("bad.pgm")));
    let v = dir.path().join("empty.vec");
    fs::write(&v, 0u32.to_le_bytes()).unwrap();
    assert!(matches!(read_vector(&v), Err(Error::Parse { .. })));
    fs::write(&v, [3u8, 0, 0, 0, 1, 2]).unwrap();
    assert!(matches!(read_vector(&v), Err(Error::Parse { .. })));
}

#[test]
fn crop_and_resize() {
    let img = GrayImage { width: 100, height: 60, pixels: (0..6000).map(|i| (i % 100) as u8).collect() };
    let c = center_crop(&img);
    assert_eq!((c.width, c.height), (60, 60));
    assert_eq!(c.pixels[0], 20);
    let constant = vec![0.4; 60 * 60];
    assert!(resize_bilinear(&constant, 60, 60, 17, 17).iter().all(|&v| (v - 0.4).abs() < 1e-15));
    let src: Vec<f64> = (0..25).map(|i| i as f64).collect();
    assert_eq!(resize_bilinear(&src, 5, 5, 5, 5), src);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.pgm");
    write_pgm(&p, &img).unwrap();
    assert_eq!(read_pgm(&p).unwrap(), img);
}
