//! End-to-end batch run: parse reports, then per lesion segment, crop and
//! encode on the canonical grid.
//!
//! Output layout under `paths.output_dir`:
//!
//! ```text
//! records.jsonl          every parsed LesionRecord, exam order then text order
//! segments.jsonl         one LesionOutcome per record, same order
//! summary.json           stage counts, skips and failures
//! masks/<key>.nii.gz     lesion mask on the canonical grid
//! crops/<key>_{pet,ct,mask}.nii.gz, crops/<key>.json
//! tokens/<key>.bin       fused tokens T (K x 2d)
//! tokens/<key>_pooled.bin  pooled and projected tokens V
//! cache/<key>.json       completion marker holding the LesionOutcome
//! ```
//!
//! `<key>` is a SHA-256 prefix over the input volume bytes, the record and
//! every parameter that affects the lesion's artifacts, so stale outputs are
//! never reused. Lesions are processed on a pool of `workers` threads;
//! the shared JSONL and summary files are written once, in input order, by
//! the calling thread.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::focal::{derive_seed, focal_prompt, CropRecord, CropSpec, PerturbSpec};
use crate::fusion::{encode_fuse, pool_project, BranchInput, RefWeights, TokenMatrix};
use crate::nifti::{load_nifti, write_mask, write_nifti};
use crate::report::{LesionRecord, ParseError, ReportParser};
use crate::seg::{segment_at, SegError};
use crate::volume::{resample, GridTransform, Modality, Volume3D};

/// Bumped whenever artifact content changes for the same inputs.
pub const PIPELINE_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reports directory {0}: {1}")]
    Reports(PathBuf, ParseError),
    #[error("output {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Segment,
    Crop,
    Encode,
    Write,
}

/// Per-lesion result, one line of `segments.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionOutcome {
    pub exam_id: String,
    /// Position of the record within its exam's records.
    pub lesion_index: usize,
    pub sentence_index: usize,
    pub key: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub reported_suv_max: f64,
    /// 0-based axial index on the canonical grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_slice: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub achieved_suv_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_used: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_shape: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_shape: Option<[usize; 2]>,
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub exam_id: String,
    pub lesion_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub pipeline_version: u32,
    pub exams: usize,
    pub records: usize,
    pub skipped_prior: usize,
    pub segmented: usize,
    pub cropped: usize,
    pub encoded: usize,
    pub failed: usize,
    pub failures_by_stage: BTreeMap<String, usize>,
    pub skipped: Vec<Issue>,
    pub failures: Vec<Issue>,
}

/// What a run did besides its artifacts; `cached` is not part of the summary
/// so that a resumed run writes an identical `summary.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub summary: Summary,
    pub outcomes: Vec<LesionOutcome>,
    pub cached: usize,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn find_volume(dir: &Path, exam: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{exam}_{suffix}.{ext}")))
        .find(|p| p.is_file())
}

struct ExamInputs {
    pet_path: Option<PathBuf>,
    ct_path: Option<PathBuf>,
    digest: String,
}

fn exam_inputs(cfg: &PipelineConfig, exam: &str) -> ExamInputs {
    let dir = cfg.paths.volumes_dir();
    let pet_path = find_volume(dir, exam, "pet");
    let ct_path = find_volume(dir, exam, "ct");
    let file_hash = |p: &Option<PathBuf>| match p {
        Some(p) => fs::read(p).map(|b| sha256_hex(&[&b])).unwrap_or_else(|e| format!("unreadable:{e}")),
        None => "missing".to_string(),
    };
    let digest = sha256_hex(&[file_hash(&pet_path).as_bytes(), file_hash(&ct_path).as_bytes()]);
    ExamInputs {
        pet_path,
        ct_path,
        digest,
    }
}

fn lesion_key(cfg: &PipelineConfig, inputs: &ExamInputs, record: &LesionRecord, lesion_index: usize) -> String {
    let params = serde_json::json!({
        "version": PIPELINE_VERSION,
        "grid": cfg.grid,
        "seg": cfg.seg,
        "perturb": cfg.perturb,
        "crop": cfg.crop,
        "patch": cfg.patch,
    });
    let rec = serde_json::to_string(record).expect("record serializes");
    let full = sha256_hex(&[
        inputs.digest.as_bytes(),
        rec.as_bytes(),
        &(lesion_index as u64).to_le_bytes(),
        params.to_string().as_bytes(),
    ]);
    format!("{}_{}_{}", sanitize(&record.exam_id), lesion_index, &full[..16])
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn base_outcome(record: &LesionRecord, lesion_index: usize, key: String) -> LesionOutcome {
    LesionOutcome {
        exam_id: record.exam_id.clone(),
        lesion_index,
        sentence_index: record.sentence_index,
        key,
        status: Status::Ok,
        stage: None,
        reason: None,
        reported_suv_max: record.suv_max,
        grid_slice: None,
        achieved_suv_max: None,
        voxel_count: None,
        iterations_used: None,
        final_threshold: None,
        crop: None,
        token_shape: None,
        pooled_shape: None,
        artifacts: Vec::new(),
    }
}

fn fail(mut o: LesionOutcome, stage: Stage, reason: impl Into<String>) -> LesionOutcome {
    o.status = Status::Failed;
    o.stage = Some(stage);
    o.reason = Some(reason.into());
    o.artifacts.clear();
    o
}

/// Volumes resampled to the canonical grid plus the source->grid transform.
struct Loaded {
    pet: Volume3D,
    ct: Volume3D,
    transform: GridTransform,
    source_depth: usize,
}

fn load_exam(cfg: &PipelineConfig, inputs: &ExamInputs) -> Result<Loaded, String> {
    let pet_path = inputs.pet_path.as_ref().ok_or("missing PET volume")?;
    let ct_path = inputs.ct_path.as_ref().ok_or("missing CT volume")?;
    let pet = load_nifti(pet_path, Modality::Pet).map_err(|e| format!("{}: {e}", pet_path.display()))?;
    let ct = load_nifti(ct_path, Modality::Ct).map_err(|e| format!("{}: {e}", ct_path.display()))?;
    if pet.dims() != ct.dims() {
        return Err(format!("PET dims {:?} differ from CT dims {:?}", pet.dims(), ct.dims()));
    }
    let transform = GridTransform::to_grid(pet.dims(), pet.spacing(), &cfg.grid);
    let source_depth = pet.dims()[0];
    Ok(Loaded {
        pet: resample(&pet, &cfg.grid).map_err(|e| e.to_string())?,
        ct: resample(&ct, &cfg.grid).map_err(|e| e.to_string())?,
        transform,
        source_depth,
    })
}

struct Shared<'a> {
    cfg: &'a PipelineConfig,
    weights: &'a RefWeights,
    crop_spec: CropSpec,
    out: &'a Path,
}

fn process_lesion(sh: &Shared, loaded: &Loaded, record: &LesionRecord, mut o: LesionOutcome) -> LesionOutcome {
    let cfg = sh.cfg;
    let depth = record.axial_index();
    if depth >= loaded.source_depth {
        return fail(o, Stage::Segment, format!("slice {} beyond volume depth {}", record.slice_number, loaded.source_depth));
    }
    let Some(grid_slice) = loaded.transform.map_depth(depth) else {
        return fail(o, Stage::Segment, format!("slice {} falls outside the canonical grid", record.slice_number));
    };
    o.grid_slice = Some(grid_slice);
    let seg = match segment_at(&loaded.pet, record.suv_max, grid_slice, &cfg.seg, false) {
        Ok(r) => r,
        Err(SegError::NotConverged(best)) => {
            o.achieved_suv_max = Some(best.achieved_suv_max);
            o.iterations_used = Some(best.iterations_used);
            return fail(o, Stage::Segment, SegError::NotConverged(best).to_string());
        }
        Err(e) => return fail(o, Stage::Segment, e.to_string()),
    };
    o.achieved_suv_max = Some(seg.achieved_suv_max);
    o.voxel_count = Some(seg.mask.voxel_count());
    o.iterations_used = Some(seg.iterations_used);
    o.final_threshold = Some(seg.final_threshold);

    let perturb = PerturbSpec {
        fraction: cfg.perturb.fraction,
        rng_seed: derive_seed(cfg.base_seed(), &record.exam_id, o.lesion_index),
    };
    let (fc, crop_rec) = match focal_prompt(&loaded.pet, &loaded.ct, &seg.mask, &sh.crop_spec, &perturb) {
        Ok(x) => x,
        Err(e) => return fail(o, Stage::Crop, e.to_string()),
    };
    o.crop = Some(crop_rec.clone());

    let global = BranchInput {
        pet: &loaded.pet,
        ct: &loaded.ct,
        mask: Some(&seg.mask),
    };
    let focal = BranchInput {
        pet: &fc.pet_crop,
        ct: &fc.ct_crop,
        mask: Some(&fc.mask_crop),
    };
    let tokens = match encode_fuse(&global, &focal, &cfg.patch.global(), &cfg.patch.focal(), sh.weights)
        .and_then(|t| pool_project(&t, sh.weights, cfg.patch.pool_factor).map(|v| (t, v)))
    {
        Ok(x) => x,
        Err(e) => return fail(o, Stage::Encode, e.to_string()),
    };
    o.token_shape = Some([tokens.0.rows(), tokens.0.cols()]);
    o.pooled_shape = Some([tokens.1.rows(), tokens.1.cols()]);

    let key = o.key.clone();
    let write = || -> Result<Vec<String>, String> {
        let mut written = Vec::new();
        let mut put = |rel: String, f: &dyn Fn(&Path) -> Result<(), String>| -> Result<(), String> {
            f(&sh.out.join(&rel))?;
            written.push(rel);
            Ok(())
        };
        let s = |e: &dyn std::fmt::Display| e.to_string();
        put(format!("masks/{key}.nii.gz"), &|p| {
            write_mask(p, &seg.mask, loaded.pet.spacing(), loaded.pet.origin()).map_err(|e| s(&e))
        })?;
        put(format!("crops/{key}_pet.nii.gz"), &|p| write_nifti(p, &fc.pet_crop).map_err(|e| s(&e)))?;
        put(format!("crops/{key}_ct.nii.gz"), &|p| write_nifti(p, &fc.ct_crop).map_err(|e| s(&e)))?;
        put(format!("crops/{key}_mask.nii.gz"), &|p| {
            write_mask(p, &fc.mask_crop, fc.pet_crop.spacing(), fc.pet_crop.origin()).map_err(|e| s(&e))
        })?;
        put(format!("crops/{key}.json"), &|p| {
            write_atomic(p, &serde_json::to_vec_pretty(&crop_rec).expect("serializes")).map_err(|e| s(&e))
        })?;
        put(format!("tokens/{key}.bin"), &|p| write_atomic(p, &tokens.0.to_bytes()).map_err(|e| s(&e)))?;
        put(format!("tokens/{key}_pooled.bin"), &|p| {
            write_atomic(p, &tokens.1.to_bytes()).map_err(|e| s(&e))
        })?;
        Ok(written)
    };
    match write() {
        Ok(a) => {
            o.artifacts = a;
            o
        }
        Err(e) => fail(o, Stage::Write, e),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn cached_outcome(out: &Path, key: &str) -> Option<LesionOutcome> {
    let bytes = fs::read(out.join("cache").join(format!("{key}.json"))).ok()?;
    let o: LesionOutcome = serde_json::from_slice(&bytes).ok()?;
    (o.key == key && o.artifacts.iter().all(|a| out.join(a).is_file())).then_some(o)
}

/// Writes `items` as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Reads a JSONL file, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

fn summarize(exams: usize, records: &[LesionRecord], outcomes: &[LesionOutcome]) -> Summary {
    let mut s = Summary {
        schema_version: SUMMARY_SCHEMA,
        pipeline_version: PIPELINE_VERSION,
        exams,
        records: records.len(),
        skipped_prior: 0,
        segmented: 0,
        cropped: 0,
        encoded: 0,
        failed: 0,
        failures_by_stage: BTreeMap::new(),
        skipped: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        let issue = || Issue {
            exam_id: o.exam_id.clone(),
            lesion_index: o.lesion_index,
            stage: o.stage,
            reason: o.reason.clone().unwrap_or_default(),
        };
        match o.status {
            Status::Skipped => {
                s.skipped_prior += 1;
                s.skipped.push(issue());
            }
            Status::Failed => {
                s.failed += 1;
                let stage = o.stage.unwrap_or(Stage::Load);
                *s.failures_by_stage
                    .entry(serde_json::to_value(stage).expect("stage").as_str().unwrap_or("").to_string())
                    .or_insert(0) += 1;
                s.failures.push(issue());
            }
            Status::Ok => {}
        }
        let reached = |st: Stage| o.status == Status::Ok || o.stage.is_some_and(|f| f > st);
        s.segmented += usize::from(reached(Stage::Segment));
        s.cropped += usize::from(reached(Stage::Crop));
        s.encoded += usize::from(reached(Stage::Encode));
    }
    s
}

/// Runs the whole batch. Only configuration, report-directory and output
/// errors are returned; lesion-level problems end up in the summary.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let out = cfg.paths.output_dir.as_path();
    for sub in ["masks", "crops", "tokens", "cache"] {
        fs::create_dir_all(out.join(sub)).map_err(|source| PipelineError::Output {
            path: out.join(sub),
            source,
        })?;
    }
    let parser = ReportParser::default();
    let records = parser
        .parse_dir(&cfg.paths.reports_dir)
        .map_err(|e| PipelineError::Reports(cfg.paths.reports_dir.clone(), e))?;

    // exam id -> record positions, in the (sorted) parse order
    let mut exams: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match exams.last_mut() {
            Some((id, v)) if *id == r.exam_id => v.push(i),
            _ => exams.push((r.exam_id.clone(), vec![i])),
        }
    }
    let n_reports = count_reports(&cfg.paths.reports_dir);

    let weights = RefWeights::generate(cfg.base_seed(), &cfg.patch).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let crop_spec = CropSpec {
        resampled_dims: cfg
            .patch
            .matching_focal_dims(cfg.grid.target_dims)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        ..cfg.crop
    };
    let shared = Shared {
        cfg,
        weights: &weights,
        crop_spec,
        out,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;

    let per_exam: Vec<Vec<(LesionOutcome, bool)>> = pool.install(|| {
        exams
            .par_iter()
            .map(|(exam, idx)| run_exam(&shared, exam, idx.iter().map(|&i| &records[i]).collect()))
            .collect()
    });
    let mut outcomes = Vec::with_capacity(records.len());
    let mut cached = 0;
    for (o, hit) in per_exam.into_iter().flatten() {
        cached += usize::from(hit);
        outcomes.push(o);
    }

    let io_err = |path: PathBuf| move |source| PipelineError::Output { path, source };
    write_jsonl(&out.join("records.jsonl"), &records).map_err(io_err(out.join("records.jsonl")))?;
    write_jsonl(&out.join("segments.jsonl"), &outcomes).map_err(io_err(out.join("segments.jsonl")))?;
    let summary = summarize(n_reports, &records, &outcomes);
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    bytes.write_all(b"\n").expect("vec write");
    write_atomic(&out.join("summary.json"), &bytes).map_err(io_err(out.join("summary.json")))?;
    log::info!(
        "{} exams, {} records, {} ok, {} skipped, {} failed, {} cached",
        summary.exams,
        summary.records,
        summary.encoded,
        summary.skipped_prior,
        summary.failed,
        cached
    );
    Ok(RunReport {
        summary,
        outcomes,
        cached,
    })
}

fn count_reports(dir: &Path) -> usize {
    fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "txt"))
                .count()
        })
        .unwrap_or(0)
}

fn run_exam(sh: &Shared, exam: &str, records: Vec<&LesionRecord>) -> Vec<(LesionOutcome, bool)> {
    let inputs = exam_inputs(sh.cfg, exam);
    let mut slots: Vec<Option<(LesionOutcome, bool)>> = vec![None; records.len()];
    let mut todo = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = lesion_key(sh.cfg, &inputs, r, i);
        if r.is_prior_reference {
            let mut o = base_outcome(r, i, key);
            o.status = Status::Skipped;
            o.reason = Some("prior-study reference".into());
            slots[i] = Some((o, false));
        } else if let Some(o) = cached_outcome(sh.out, &key) {
            slots[i] = Some((o, true));
        } else {
            todo.push((i, key));
        }
    }
    if !todo.is_empty() {
        match load_exam(sh.cfg, &inputs) {
            Ok(loaded) => {
                let done: Vec<(usize, LesionOutcome)> = todo
                    .into_par_iter()
                    .map(|(i, key)| {
                        let o = process_lesion(sh, &loaded, records[i], base_outcome(records[i], i, key));
                        (i, o)
                    })
                    .collect();
                for (i, o) in done {
                    store_cache(sh.out, &o);
                    slots[i] = Some((o, false));
                }
            }
            Err(e) => {
                log::warn!("{exam}: {e}");
                for (i, key) in todo {
                    let o = fail(base_outcome(records[i], i, key), Stage::Load, e.clone());
                    store_cache(sh.out, &o);
                    slots[i] = Some((o, false));
                }
            }
        }
    }
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn store_cache(out: &Path, o: &LesionOutcome) {
    let path = out.join("cache").join(format!("{}.json", o.key));
    if let Err(e) = write_atomic(&path, &serde_json::to_vec(o).expect("outcome serializes")) {
        log::warn!("cannot write {}: {e}", path.display());
    }
}

/// Reads a token file written by the pipeline or `encode`.
pub fn read_tokens(path: &Path) -> Result<TokenMatrix, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    TokenMatrix::from_bytes(&bytes).map_err(|e| e.to_string())
}
