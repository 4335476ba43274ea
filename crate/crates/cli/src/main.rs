use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use petgrid_core::config::PipelineConfig;
use petgrid_core::focal::{focal_prompt, CropSpec};
use petgrid_core::fusion::{encode_fuse, pool_project, BranchInput, RefWeights};
use petgrid_core::metrics::{evaluate, read_human_scores, read_texts, CiderOptions, EvalOptions};
use petgrid_core::nifti::{load_mask, load_nifti, write_mask, write_nifti};
use petgrid_core::phantom::{make_phantom, random_phantom, write_exam, Phantom, RandomPhantomSpec};
use petgrid_core::pipeline::{read_jsonl, run_pipeline, write_jsonl};
use petgrid_core::report::{Lexicon, LesionRecord, PatternInventory, ReportParser};
use petgrid_core::seg::{segment_at, SegParams};
use petgrid_core::volume::{resample, resample_mask, GridTransform, Modality};

#[derive(Parser)]
#[command(name = "petgrid", version, about = "PET/CT lesion grounding toolkit")]
struct Cli {
    /// TOML or JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (perturbations, reference weights, phantoms).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Canonical grid spacing in mm.
    #[arg(long, global = true)]
    spacing: Option<f64>,
    /// Canonical grid dims as D,W,H.
    #[arg(long, global = true, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    /// -v info, -vv debug, -vvv trace.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract lesion records from report text.
    Parse(ParseArgs),
    /// Segment the lesions of a records file on one PET volume.
    Segment(SegmentArgs),
    /// Cut a perturbed focal crop around a lesion mask.
    Crop(CropArgs),
    /// Encode PET/CT/mask into fused tokens.
    Encode(EncodeArgs),
    /// Score generated findings against references.
    Eval(EvalArgs),
    /// Run parse, segment, crop and encode over a directory of exams.
    Pipeline(PipelineArgs),
    /// Write a synthetic exam (PET, CT, truth masks, report).
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct ParseArgs {
    /// Report directory (*.txt) or a single report file.
    #[arg(long)]
    reports: PathBuf,
    /// Anatomy lexicon TSV (term, region, organ, subsite).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Pattern inventory TOML.
    #[arg(long)]
    patterns: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    pet: PathBuf,
    #[arg(long)]
    records: PathBuf,
    /// Output directory for masks and `segments.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// SegParams TOML; overrides the `seg` section of --config.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Only records of this exam (default: PET file name up to `_pet`).
    #[arg(long)]
    exam: Option<String>,
    /// Resample the PET to the canonical grid first.
    #[arg(long)]
    resample: bool,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    pet: PathBuf,
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Resampled crop dims as D,W,H (default from config, 32,32,32).
    #[arg(long, value_parser = parse_dims)]
    crop_dims: Option<[usize; 3]>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    pet: PathBuf,
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Fused tokens T.
    #[arg(long)]
    out: PathBuf,
    /// Also write pooled, projected tokens V here.
    #[arg(long)]
    pooled: Option<PathBuf>,
    /// Resample inputs to the canonical grid first.
    #[arg(long)]
    resample: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// `id,score` CSV of human ratings.
    #[arg(long)]
    human: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Apply the sigma = 6 length penalty inside CIDEr.
    #[arg(long)]
    cider_length_penalty: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    reports: Option<PathBuf>,
    #[arg(long)]
    volumes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "phantom")]
    exam: String,
    /// JSON phantom description (blobs, background, dims, spacing); random otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    blobs: usize,
    #[arg(long, default_value_t = 1.0)]
    background: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|v| format!("expected 3 dims, got {}", v.len()))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.perturb.rng_seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.spacing {
        cfg.grid.target_spacing = s;
    }
    if let Some(d) = cli.dims {
        cfg.grid.target_dims = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn exam_from_path(p: &Path) -> String {
    let name = p.file_name().unwrap_or_default().to_string_lossy();
    let stem = name.trim_end_matches(".gz").trim_end_matches(".nii");
    stem.strip_suffix("_pet").unwrap_or(stem).to_string()
}

fn cmd_parse(a: &ParseArgs) -> Result<()> {
    let inventory = match &a.patterns {
        Some(p) => PatternInventory::load(p)?,
        None => PatternInventory::builtin(),
    };
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::builtin(),
    };
    let parser = ReportParser::new(&inventory, lexicon)?;
    let records = if a.reports.is_dir() {
        parser.parse_dir(&a.reports)?
    } else {
        let exam = a.reports.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = fs::read_to_string(&a.reports).with_context(|| format!("reading {}", a.reports.display()))?;
        parser.parse_report(&exam, &text)
    };
    write_jsonl(&a.out, &records)?;
    info!("{} records -> {}", records.len(), a.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct SegmentLine<'a> {
    exam_id: &'a str,
    sentence_index: usize,
    suv_max: f64,
    slice_number: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    achieved_suv_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    voxel_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations_used: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_slice: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn cmd_segment(a: &SegmentArgs, cfg: &PipelineConfig) -> Result<()> {
    let params: SegParams = match &a.params {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => cfg.seg.clone(),
    };
    params.validate()?;
    let source = load_nifti(&a.pet, Modality::Pet)?;
    let transform = GridTransform::to_grid(source.dims(), source.spacing(), &cfg.grid);
    let pet = if a.resample { resample(&source, &cfg.grid)? } else { source.clone() };
    let exam = a.exam.clone().unwrap_or_else(|| exam_from_path(&a.pet));
    let records: Vec<LesionRecord> = read_jsonl(&a.records)?;
    let mine: Vec<&LesionRecord> = records.iter().filter(|r| r.exam_id == exam).collect();
    if mine.is_empty() {
        warn!("no records for exam {exam:?} in {}", a.records.display());
    }
    fs::create_dir_all(&a.out)?;
    let mut lines = Vec::new();
    for (i, r) in mine.iter().enumerate() {
        let mut line = SegmentLine {
            exam_id: &r.exam_id,
            sentence_index: r.sentence_index,
            suv_max: r.suv_max,
            slice_number: r.slice_number,
            mask: None,
            achieved_suv_max: None,
            voxel_count: None,
            iterations_used: None,
            final_threshold: None,
            seed_slice: None,
            error: None,
        };
        let depth = r.axial_index();
        let slice = if a.resample { transform.map_depth(depth) } else { Some(depth) };
        let result = match slice {
            _ if depth >= source.dims()[0] => Err(format!("slice {} beyond volume depth {}", r.slice_number, source.dims()[0])),
            None => Err(format!("slice {} falls outside the canonical grid", r.slice_number)),
            Some(s) => segment_at(&pet, r.suv_max, s, &params, r.is_prior_reference).map_err(|e| e.to_string()),
        };
        match result {
            Ok(res) => {
                let name = format!("{exam}_{i}.nii.gz");
                write_mask(a.out.join(&name), &res.mask, pet.spacing(), pet.origin())?;
                line.mask = Some(name);
                line.achieved_suv_max = Some(res.achieved_suv_max);
                line.voxel_count = Some(res.mask.voxel_count());
                line.iterations_used = Some(res.iterations_used);
                line.final_threshold = Some(res.final_threshold);
                line.seed_slice = Some(res.selected_component_seed_slice);
            }
            Err(e) => {
                warn!("{exam} record {i}: {e}");
                line.error = Some(e);
            }
        }
        lines.push(line);
    }
    write_jsonl(&a.out.join("segments.jsonl"), &lines)?;
    info!("{} of {} lesions segmented", lines.iter().filter(|l| l.mask.is_some()).count(), lines.len());
    Ok(())
}

fn cmd_crop(a: &CropArgs, cfg: &PipelineConfig) -> Result<()> {
    let pet = load_nifti(&a.pet, Modality::Pet)?;
    let ct = load_nifti(&a.ct, Modality::Ct)?;
    let (mask, _) = load_mask(&a.mask)?;
    let spec = CropSpec {
        resampled_dims: a.crop_dims.unwrap_or(cfg.crop.resampled_dims),
        ..cfg.crop
    };
    let (fc, rec) = focal_prompt(&pet, &ct, &mask, &spec, &cfg.perturb)?;
    fs::create_dir_all(&a.out)?;
    write_nifti(a.out.join("pet.nii.gz"), &fc.pet_crop)?;
    write_nifti(a.out.join("ct.nii.gz"), &fc.ct_crop)?;
    write_mask(a.out.join("mask.nii.gz"), &fc.mask_crop, fc.pet_crop.spacing(), fc.pet_crop.origin())?;
    write_json(&a.out.join("crop.json"), &rec)?;
    info!("crop box start {:?} side {}", rec.box_start, rec.box_side);
    Ok(())
}

fn cmd_encode(a: &EncodeArgs, cfg: &PipelineConfig) -> Result<()> {
    let mut pet = load_nifti(&a.pet, Modality::Pet)?;
    let mut ct = load_nifti(&a.ct, Modality::Ct)?;
    let (mut mask, mask_spacing) = load_mask(&a.mask)?;
    if a.resample {
        pet = resample(&pet, &cfg.grid)?;
        ct = resample(&ct, &cfg.grid)?;
        mask = resample_mask(&mask, mask_spacing, &cfg.grid)?;
    }
    let weights = RefWeights::generate(cfg.base_seed(), &cfg.patch)?;
    let spec = CropSpec {
        resampled_dims: cfg.patch.matching_focal_dims(pet.dims())?,
        ..cfg.crop
    };
    let (fc, _) = focal_prompt(&pet, &ct, &mask, &spec, &cfg.perturb)?;
    let t = encode_fuse(
        &BranchInput {
            pet: &pet,
            ct: &ct,
            mask: Some(&mask),
        },
        &BranchInput {
            pet: &fc.pet_crop,
            ct: &fc.ct_crop,
            mask: Some(&fc.mask_crop),
        },
        &cfg.patch.global(),
        &cfg.patch.focal(),
        &weights,
    )?;
    fs::write(&a.out, t.to_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    info!("T: {} x {} -> {}", t.rows(), t.cols(), a.out.display());
    if let Some(p) = &a.pooled {
        let v = pool_project(&t, &weights, cfg.patch.pool_factor)?;
        fs::write(p, v.to_bytes()).with_context(|| format!("writing {}", p.display()))?;
        info!("V: {} x {} -> {}", v.rows(), v.cols(), p.display());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let preds = read_texts(&a.pred)?;
    let refs = read_texts(&a.reference)?;
    let human = match &a.human {
        Some(p) => read_human_scores(p)?,
        None => Default::default(),
    };
    let opts = EvalOptions {
        cider: CiderOptions {
            length_penalty: a.cider_length_penalty,
            ..Default::default()
        },
    };
    let report = evaluate(&preds, &refs, &human, &opts)?;
    write_json(&a.out, &report)?;
    let c = &report.corpus;
    info!(
        "BLEU-4 {:.4}  ROUGE-L {:.4}  METEOR {:.4}  CIDEr {:.4}",
        c.bleu4, c.rouge_l, c.meteor, c.cider
    );
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(r) = &a.reports {
        cfg.paths.reports_dir = r.clone();
    }
    if let Some(v) = &a.volumes {
        cfg.paths.volumes_dir = Some(v.clone());
    }
    if let Some(o) = &a.out {
        cfg.paths.output_dir = o.clone();
    }
    if !cfg.paths.reports_dir.is_dir() {
        bail!("reports directory {} does not exist", cfg.paths.reports_dir.display());
    }
    let run = run_pipeline(&cfg)?;
    let s = &run.summary;
    println!(
        "exams {}  records {}  encoded {}  skipped {}  failed {}  (cached {})",
        s.exams, s.records, s.encoded, s.skipped_prior, s.failed, run.cached
    );
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs, cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let phantom: Phantom = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => random_phantom(
            &RandomPhantomSpec {
                dims: cli.dims.unwrap_or(RandomPhantomSpec::default().dims),
                spacing: cli.spacing.unwrap_or(3.0),
                blobs: a.blobs,
                background: a.background,
                noise_std: a.noise,
                ..Default::default()
            },
            seed,
        )?,
    };
    let out = make_phantom(&phantom, seed)?;
    write_exam(&a.out, &a.exam, &out)?;
    write_json(&a.out.join(format!("{}_phantom.json", a.exam)), &phantom)?;
    info!("{} lesions -> {}", out.lesions.len(), a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Parse(a) => cmd_parse(a),
        Cmd::Segment(a) => cmd_segment(a, &load_config(cli)?),
        Cmd::Crop(a) => cmd_crop(a, &load_config(cli)?),
        Cmd::Encode(a) => cmd_encode(a, &load_config(cli)?),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Pipeline(a) => cmd_pipeline(a, load_config(cli)?),
        Cmd::Phantom(a) => cmd_phantom(a, cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
