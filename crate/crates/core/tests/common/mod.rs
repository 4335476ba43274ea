#![allow(dead_code)]

pub mod fusion_oracle;
pub mod parser;

use petgrid_core::metrics::EvalPair;
use petgrid_core::phantom::{Blob, Phantom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
pub struct FixturePair {
    pub id: String,
    pub candidate: String,
    pub reference: String,
    pub human: f64,
}

#[derive(Deserialize)]
pub struct PairExpected {
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
}

#[derive(Deserialize)]
pub struct MetricsExpected {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub per_pair: Vec<PairExpected>,
}

pub fn metrics_fixture() -> (Vec<EvalPair>, MetricsExpected) {
    let raw: Vec<FixturePair> = serde_json::from_str(include_str!("../fixtures/metrics_pairs.json")).unwrap();
    let pairs = raw
        .iter()
        .map(|p| EvalPair::new(&p.id, &p.candidate, &p.reference).with_human(p.human))
        .collect();
    let exp = serde_json::from_str(include_str!("../fixtures/metrics_expected.json")).unwrap();
    (pairs, exp)
}

/// Random phantom with well separated blobs on a `dims` grid.
///
/// Centres are kept `2.5 sigma` from the faces and pairwise at least
/// `3.5 (sigma_i + sigma_j) + 2` voxels apart so half-max regions never touch.
pub fn random_phantom(rng: &mut ChaCha8Rng, dims: [usize; 3], n_blobs: usize, background: f64) -> Phantom {
    let mut blobs: Vec<Blob> = Vec::new();
    while blobs.len() < n_blobs {
        let sigma = rng.random_range(1.5..3.0);
        let margin = 2.5 * sigma + 1.0;
        let center = [0, 1, 2].map(|a| rng.random_range(margin..dims[a] as f64 - 1.0 - margin));
        let peak = rng.random_range(3.0..15.0);
        let ok = blobs.iter().all(|b| {
            let d2: f64 = (0..3).map(|a| (b.center[a] - center[a]).powi(2)).sum();
            d2.sqrt() >= 3.5 * (b.sigma + sigma) + 2.0
        });
        if ok {
            blobs.push(Blob { center, sigma, peak });
        }
    }
    Phantom {
        blobs,
        background,
        dims,
        spacing: 3.0,
        noise_std: 0.0,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small-grid pipeline configuration: 64^3 at 3 mm, 4^3 global tokens.
pub fn small_pipeline_config(reports: &std::path::Path, out: &std::path::Path, workers: usize) -> petgrid_core::config::PipelineConfig {
    use petgrid_core::config::{PathsConfig, PipelineConfig};
    use petgrid_core::fusion::PatchConfig;
    use petgrid_core::volume::GridSpec;
    PipelineConfig {
        grid: GridSpec {
            target_spacing: 3.0,
            target_dims: [64, 64, 64],
        },
        patch: PatchConfig {
            embed_dim: 16,
            lm_dim: 32,
            ..PatchConfig::default()
        },
        paths: PathsConfig {
            reports_dir: reports.to_owned(),
            volumes_dir: None,
            output_dir: out.to_owned(),
        },
        workers,
        ..PipelineConfig::default()
    }
}

/// Three-blob 64^3 phantom exams `exam_a` (plain report) and `exam_b`
/// (second sentence rewritten as a prior-study reference).
pub fn write_phantom_exams(dir: &std::path::Path) -> Vec<petgrid_core::phantom::PhantomOutput> {
    use petgrid_core::phantom::{make_phantom, write_exam};
    let mut outs = Vec::new();
    for (k, exam) in ["exam_a", "exam_b"].into_iter().enumerate() {
        let mut r = rng(100 + k as u64);
        let p = Phantom {
            noise_std: 0.05,
            ..random_phantom(&mut r, [64, 64, 64], 3, 1.0)
        };
        let out = make_phantom(&p, k as u64).unwrap();
        write_exam(dir, exam, &out).unwrap();
        outs.push(out);
    }
    let b = &outs[1].lesions[1];
    let prior = format!(
        "Previously the liver lesion measured SUV max {:.1}, slice {}.",
        b.suv_max,
        b.max_depth + 1
    );
    let text = format!("{} {} {}\n", outs[1].lesions[0].sentence, prior, outs[1].lesions[2].sentence);
    std::fs::write(dir.join("exam_b.txt"), text).unwrap();
    outs
}

/// Every file under `root` as (relative path, bytes), sorted.
pub fn tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Compares two trees file by file, naming the first difference.
pub fn assert_same_tree(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) {
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(a), names(b), "file lists differ");
    for ((n, x), (_, y)) in a.iter().zip(b) {
        assert!(x == y, "{n} differs:\n{}\n{}", String::from_utf8_lossy(x).chars().take(3000).collect::<String>(), String::from_utf8_lossy(y).chars().take(3000).collect::<String>());
    }
}
