//! End-to-end runs: build world, train, evaluate, persist. Also the
//! smaller world/inversion/translation commands the CLI exposes.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use csid_core::eval::{self, CodeBatch};
use csid_core::gan;
use csid_core::invert;
use csid_core::kernel::{self, KernelSpec};
use csid_core::ldm;
use csid_core::mat::Mat;
use csid_core::models::{self, encode_ldm, GanBundle, NoiseDraw};
use csid_core::rng;
use csid_core::world::{build_world, probe_domain_variability, VariabilityReport, World};

use crate::config::{ExperimentConfig, MethodConfig};
use crate::error::{LabError, Result};
use crate::plots;
use crate::rundir::{
    codes_csv, gan_manifest, gan_trace_csv, ldm_manifest, ldm_trace_csv, list_files, load_model,
    versions, write_bytes, DivergenceInfo, LoadedModel, RunDir, RunMeta, RunReport, CODES_FILE,
    CONFIG_FILE, META_FILE, MODEL_BIN, MODEL_MANIFEST, REPORT_FILE, REPORT_FORMAT, SCATTER_PLOT,
    STYLE_PLOT, TRACE_FILE,
};

/// World-stream allocation (index i reads stream (world.seed, 2 + i)):
/// 32 holds the evaluation batches, 40 + domain feeds the invert and
/// translate commands, 64 + (train seed mod 2³²) feeds training. Training
/// can never collide with the fixed streams because its index starts at 64
/// and the others sit below it.
const EVAL_STREAM: u64 = 32;
const COMMAND_STREAM_BASE: u64 = 40;
const TRAIN_STREAM_BASE: u64 = 64;

/// Independent seed for a tagged sub-purpose of one run seed. Tags: 1 model
/// init, 100 + domain inversion, 200 + domain diversity, 300 + domain
/// generation noise, 400 + row translation.
fn substream(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub diverged: bool,
    /// Absent when the run diverged before evaluation.
    pub report: Option<RunReport>,
    pub wall_time_s: f64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let rd = RunDir::create(out)?;
    let world = build_world(&cfg.world)?;
    let warnings = cfg.world.warnings();
    rd.write_json(CONFIG_FILE, cfg)?;

    let t0 = Instant::now();
    let train_seed = cfg.method.seed();
    let init_seed = substream(train_seed, 1);
    let mut sampler = world.sampler(TRAIN_STREAM_BASE + (train_seed & 0xFFFF_FFFF));

    let (model, divergence) = match &cfg.method {
        MethodConfig::Gan(gcfg) => {
            let bundle = models::init_gan_bundle(
                cfg.world.ambient_dim,
                cfg.model.dc_hat,
                cfg.model.ds_hat,
                cfg.world.n_domains,
                &cfg.model.hidden,
                init_seed,
            )?;
            let outcome = gan::train_gan(bundle, &mut sampler, gcfg)?;
            rd.write_text(TRACE_FILE, &gan_trace_csv(&outcome.trace, cfg.world.n_domains))?;
            let bytes = outcome.bundle.encode();
            write_bytes(&rd.file(MODEL_BIN), &bytes)?;
            rd.write_json(MODEL_MANIFEST, &gan_manifest(&outcome.bundle, bytes.len()))?;
            let div = outcome.diverged.map(|d| DivergenceInfo {
                step: d.step,
                term: d.term,
                value: format!("{}", d.value),
            });
            (LoadedModel::Gan(outcome.bundle), div)
        }
        MethodConfig::Ldm(lcfg) => {
            let bundle = models::init_ldm_bundle(
                cfg.world.ambient_dim,
                cfg.model.dc_hat,
                cfg.model.ds_hat,
                cfg.world.n_domains,
                &cfg.model.hidden,
                init_seed,
            )?;
            let outcome = ldm::train_ldm(bundle, &mut sampler, lcfg)?;
            rd.write_text(TRACE_FILE, &ldm_trace_csv(&outcome.trace))?;
            let bytes = outcome.bundle.encode();
            write_bytes(&rd.file(MODEL_BIN), &bytes)?;
            rd.write_json(MODEL_MANIFEST, &ldm_manifest(&outcome.bundle, bytes.len()))?;
            let div = outcome.diverged.map(|d| DivergenceInfo {
                step: d.step,
                term: d.term,
                value: format!("{}", d.value),
            });
            (LoadedModel::Ldm(outcome.bundle), div)
        }
    };

    if let Some(div) = divergence {
        let wall = t0.elapsed().as_secs_f64();
        write_meta(&rd, cfg, wall, true, Some(div), &warnings)?;
        return Ok(RunSummary { dir: rd.path().to_path_buf(), diverged: true, report: None, wall_time_s: wall });
    }

    let (report, codes, residuals) = evaluate(&world, &model, cfg)?;
    rd.write_text(CODES_FILE, &codes_csv(&codes, residuals.as_deref()))?;
    rd.write_text(
        SCATTER_PLOT,
        &plots::content_scatter_svg(&codes.true_c, &codes.learned_c, &codes.domain),
    )?;
    rd.write_text(
        STYLE_PLOT,
        &plots::style_bars_svg(&codes.learned_s.col_mean_abs(), cfg.eval.metrics.tau_rel),
    )?;
    rd.write_json(REPORT_FILE, &report)?;
    let wall = t0.elapsed().as_secs_f64();
    write_meta(&rd, cfg, wall, false, None, &warnings)?;
    Ok(RunSummary {
        dir: rd.path().to_path_buf(),
        diverged: false,
        report: Some(report),
        wall_time_s: wall,
    })
}

fn write_meta(
    rd: &RunDir,
    cfg: &ExperimentConfig,
    wall: f64,
    diverged: bool,
    divergence: Option<DivergenceInfo>,
    warnings: &[String],
) -> Result<()> {
    let mut files = list_files(rd.path())?;
    files.push(META_FILE.to_string());
    files.sort();
    files.dedup();
    rd.write_json(
        META_FILE,
        &RunMeta {
            format: REPORT_FORMAT,
            created_unix_s: unix_now(),
            wall_time_s: wall,
            versions: versions(),
            train_seed: cfg.method.seed(),
            diverged,
            divergence,
            warnings: warnings.to_vec(),
            files,
        },
    )
}

/// Learned codes for held-out data: inversion for the adversarial route,
/// the encoder for the distribution-matching route.
fn collect_codes(
    world: &World,
    model: &LoadedModel,
    cfg: &ExperimentConfig,
) -> Result<(CodeBatch, Option<Vec<f64>>, Vec<Mat>)> {
    let settings = &cfg.eval;
    let n_domains = cfg.world.n_domains;
    let mut eval_rng = world.stream(EVAL_STREAM);
    let mut true_c = Vec::new();
    let mut true_s = Vec::new();
    let mut learned_c = Vec::new();
    let mut learned_s = Vec::new();
    let mut xs = Vec::new();
    let mut domain = Vec::new();
    let mut residuals = Vec::new();
    for n in 0..n_domains {
        let b = world.sample_domain(n, settings.rows_per_domain, &mut eval_rng)?;
        domain.extend(std::iter::repeat_n(n, b.x.rows()));
        match model {
            LoadedModel::Gan(bundle) => {
                let mut inv = settings.inversion;
                inv.seed = substream(inv.seed, 100 + n as u64);
                let results = invert::invert_batch(bundle, &b.x, n, &inv)?;
                learned_c.push(Mat::from_fn(results.len(), bundle.dc_hat, |i, j| {
                    results[i].c_hat[j]
                }));
                learned_s.push(Mat::from_fn(results.len(), bundle.ds_hat, |i, j| {
                    results[i].s_hat[j]
                }));
                residuals.extend(results.iter().map(|r| r.residual));
            }
            LoadedModel::Ldm(bundle) => {
                let (c, s) = encode_ldm(bundle, &b.x)?;
                learned_c.push(c);
                learned_s.push(s);
            }
        }
        true_c.push(b.c);
        true_s.push(b.s);
        xs.push(b.x);
    }
    let stack = |parts: &[Mat]| Mat::vcat(&parts.iter().collect::<Vec<_>>());
    let codes = CodeBatch {
        true_c: stack(&true_c)?,
        true_s: stack(&true_s)?,
        learned_c: stack(&learned_c)?,
        learned_s: stack(&learned_s)?,
        domain,
    };
    let residuals = match model {
        LoadedModel::Gan(_) => Some(residuals),
        LoadedModel::Ldm(_) => None,
    };
    Ok((codes, residuals, xs))
}

/// Largest pairwise unbiased MMD² between per-domain blocks of learned
/// content. The matching constraint drives this toward zero.
fn content_dm(codes: &CodeBatch, n_domains: usize, kernel: &KernelSpec) -> Result<f64> {
    let rows_of = |n: usize| {
        let idx: Vec<usize> =
            (0..codes.domain.len()).filter(|&i| codes.domain[i] == n).collect();
        codes.learned_c.take_rows(&idx)
    };
    let mut worst = 0.0f64;
    for i in 0..n_domains {
        let a = rows_of(i);
        for j in i + 1..n_domains {
            worst = worst.max(kernel::mmd2_unbiased(&a, &rows_of(j), kernel)?);
        }
    }
    Ok(worst)
}

fn evaluate(
    world: &World,
    model: &LoadedModel,
    cfg: &ExperimentConfig,
) -> Result<(RunReport, CodeBatch, Option<Vec<f64>>)> {
    let settings = &cfg.eval;
    let (codes, residuals, xs) = collect_codes(world, model, cfg)?;

    let encoder;
    let probe: Option<(eval::EncodeFn, &World)> = match model {
        LoadedModel::Ldm(bundle) if settings.invariance_probe => {
            encoder = move |x: &Mat| encode_ldm(bundle, x).map(|(c, _)| c);
            Some((&encoder, world))
        }
        _ => None,
    };
    let ident = eval::make_ident_report(&codes, probe, &settings.metrics)?;
    let dm = content_dm(&codes, cfg.world.n_domains, &settings.metrics.kernel_c)?;

    let (mmd_to_data, diversity) = match model {
        LoadedModel::Gan(bundle) => {
            let mut mmds = Vec::with_capacity(cfg.world.n_domains);
            let mut div_acc = 0.0;
            for (n, x_held) in xs.iter().enumerate() {
                let gen_seed = substream(settings.metrics.seed, 300 + n as u64);
                let noise = NoiseDraw::sample(
                    settings.rows_per_domain,
                    bundle.dc_hat,
                    bundle.ds_hat,
                    &mut rng::stream(gen_seed, 0),
                    &mut rng::stream(gen_seed, 1),
                );
                let x_gen = models::generate(bundle, &noise, n)?;
                mmds.push(kernel::mmd2_unbiased(&x_gen, x_held, &KernelSpec::median())?);
                div_acc += eval::diversity_score(
                    bundle,
                    settings.diversity_contents,
                    settings.diversity_styles_per_content,
                    n,
                    substream(settings.metrics.seed, 200 + n as u64),
                )?;
            }
            (Some(mmds), Some(div_acc / cfg.world.n_domains as f64))
        }
        LoadedModel::Ldm(_) => (None, None),
    };

    let report = RunReport {
        format: REPORT_FORMAT,
        method: cfg.method.name().to_string(),
        preset: cfg.preset.clone(),
        world_seed: cfg.world.seed,
        train_seed: cfg.method.seed(),
        steps_completed: cfg.method.steps(),
        ident,
        content_dm: dm,
        mmd_to_data,
        diversity,
    };
    Ok((report, codes, residuals))
}

/// Re-run evaluation against an existing run's model. Writes the report,
/// codes, and plots into `out` (default: the run directory itself).
pub fn evaluate_run(run: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunReport> {
    let rd = RunDir::open(run)?;
    let mut cfg: ExperimentConfig = rd.read_json(CONFIG_FILE)?;
    cfg.validate()?;
    if let Some(s) = seed {
        cfg.eval.metrics.seed = s;
    }
    let model = load_model(&rd)?;
    let kind_ok = matches!(
        (&model, &cfg.method),
        (LoadedModel::Gan(_), MethodConfig::Gan(_)) | (LoadedModel::Ldm(_), MethodConfig::Ldm(_))
    );
    if !kind_ok {
        return Err(LabError::Artifact(format!(
            "{}: model.bin does not match the configured method",
            run.display()
        )));
    }
    let world = build_world(&cfg.world)?;
    let (report, codes, residuals) = evaluate(&world, &model, &cfg)?;

    let target = match out {
        Some(p) if p != run => {
            std::fs::create_dir_all(p).map_err(crate::error::io_at(p))?;
            RunDir::open_unchecked(p)
        }
        _ => rd,
    };
    target.write_text(CODES_FILE, &codes_csv(&codes, residuals.as_deref()))?;
    target.write_text(
        SCATTER_PLOT,
        &plots::content_scatter_svg(&codes.true_c, &codes.learned_c, &codes.domain),
    )?;
    target.write_text(
        STYLE_PLOT,
        &plots::style_bars_svg(&codes.learned_s.col_mean_abs(), cfg.eval.metrics.tau_rel),
    )?;
    target.write_json(REPORT_FILE, &report)?;
    Ok(report)
}

fn require_gan(model: LoadedModel, run: &Path) -> Result<GanBundle> {
    match model {
        LoadedModel::Gan(b) => Ok(b),
        LoadedModel::Ldm(_) => Err(LabError::config(format!(
            "{}: inversion commands need an adversarial run; this one trained an encoder",
            run.display()
        ))),
    }
}

fn float_cells(out: &mut Vec<String>, slice: &[f64]) {
    out.extend(slice.iter().map(|v| format!("{v}")));
}

fn header_block(head: &mut Vec<String>, prefix: &str, cols: usize) {
    for j in 0..cols {
        head.push(format!("{prefix}_{j}"));
    }
}

/// Invert fresh world samples from one domain against a trained generator;
/// writes `inversions.csv` into `out`.
pub fn invert_samples(
    run: &Path,
    domain: usize,
    count: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<PathBuf> {
    if count == 0 {
        return Err(LabError::config("--count must be at least 1"));
    }
    let rd = RunDir::open(run)?;
    let cfg: ExperimentConfig = rd.read_json(CONFIG_FILE)?;
    let bundle = require_gan(load_model(&rd)?, run)?;
    let world = build_world(&cfg.world)?;
    let mut data_rng = world.stream(COMMAND_STREAM_BASE + domain as u64);
    let b = world.sample_domain(domain, count, &mut data_rng)?;
    let mut inv = cfg.eval.inversion;
    if let Some(s) = seed {
        inv.seed = s;
    }
    let results = invert::invert_batch(&bundle, &b.x, domain, &inv)?;

    let mut head = Vec::new();
    header_block(&mut head, "x", b.x.cols());
    header_block(&mut head, "c", b.c.cols());
    header_block(&mut head, "s", b.s.cols());
    header_block(&mut head, "chat", bundle.dc_hat);
    header_block(&mut head, "shat", bundle.ds_hat);
    head.push("residual".into());
    head.push("restart".into());
    let mut text = head.join(",");
    text.push('\n');
    for (i, r) in results.iter().enumerate() {
        let mut cells = Vec::new();
        float_cells(&mut cells, b.x.row(i));
        float_cells(&mut cells, b.c.row(i));
        float_cells(&mut cells, b.s.row(i));
        float_cells(&mut cells, &r.c_hat);
        float_cells(&mut cells, &r.s_hat);
        cells.push(format!("{}", r.residual));
        cells.push(r.restart.to_string());
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::create_dir_all(out).map_err(crate::error::io_at(out))?;
    let path = out.join("inversions.csv");
    std::fs::write(&path, text).map_err(crate::error::io_at(&path))?;
    Ok(path)
}

/// Translate fresh samples between domains; writes `translations.csv`
/// (source, translated, true source content, and the content latents the
/// translated points project back to).
pub fn translate_samples(
    run: &Path,
    from: usize,
    to: usize,
    count: usize,
    guided: bool,
    seed: Option<u64>,
    out: &Path,
) -> Result<PathBuf> {
    if count == 0 {
        return Err(LabError::config("--count must be at least 1"));
    }
    if from == to {
        return Err(LabError::config("--from and --to must differ"));
    }
    let rd = RunDir::open(run)?;
    let cfg: ExperimentConfig = rd.read_json(CONFIG_FILE)?;
    let bundle = require_gan(load_model(&rd)?, run)?;
    let world = build_world(&cfg.world)?;
    let src = world.sample_domain(from, count, &mut world.stream(COMMAND_STREAM_BASE + from as u64))?;
    let reference = if guided {
        Some(world.sample_domain(to, count, &mut world.stream(COMMAND_STREAM_BASE + to as u64))?)
    } else {
        None
    };
    let base_inv = {
        let mut inv = cfg.eval.inversion;
        if let Some(s) = seed {
            inv.seed = s;
        }
        inv
    };
    let mut style_rng = rng::stream(substream(base_inv.seed, 400), 0);
    let mut translated = Mat::zeros(count, bundle.ambient_dim());
    for i in 0..count {
        let mut inv = base_inv;
        inv.seed = substream(base_inv.seed, 400 + 1 + i as u64);
        let xt = match &reference {
            Some(r) => invert::translate_guided(&bundle, src.x.row(i), from, r.x.row(i), to, &inv)?,
            None => invert::translate_sampled(&bundle, src.x.row(i), from, to, &inv, &mut style_rng)?,
        };
        translated.row_mut(i).copy_from_slice(&xt);
    }
    // Content the translated points carry, read off by projecting back
    // through the ground-truth mixing.
    let (c_tr, _) = world.project_latents(&translated)?;

    let mut head = Vec::new();
    header_block(&mut head, "x", src.x.cols());
    header_block(&mut head, "xt", translated.cols());
    header_block(&mut head, "c_src", src.c.cols());
    header_block(&mut head, "c_tr", c_tr.cols());
    let mut text = head.join(",");
    text.push('\n');
    for i in 0..count {
        let mut cells = Vec::new();
        float_cells(&mut cells, src.x.row(i));
        float_cells(&mut cells, translated.row(i));
        float_cells(&mut cells, src.c.row(i));
        float_cells(&mut cells, c_tr.row(i));
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::create_dir_all(out).map_err(crate::error::io_at(out))?;
    let path = out.join("translations.csv");
    std::fs::write(&path, text).map_err(crate::error::io_at(&path))?;
    Ok(path)
}

/// Build the configured world and measure domain variability empirically.
pub fn verify_world(
    cfg: &ExperimentConfig,
    seed: Option<u64>,
) -> Result<(Vec<String>, VariabilityReport)> {
    cfg.validate()?;
    let world = build_world(&cfg.world)?;
    let mut rng = rng::stream(seed.unwrap_or(cfg.eval.metrics.seed), 48);
    let report =
        probe_domain_variability(&world, cfg.eval.variability_sets, cfg.eval.variability_mc, &mut rng)?;
    Ok((cfg.world.warnings(), report))
}

/// Persist the configured world spec (and optional labeled samples) to
/// `out`. Returns the world's warnings for the caller to print.
pub fn generate_world(
    cfg: &ExperimentConfig,
    out: &Path,
    samples: usize,
    seed: Option<u64>,
) -> Result<Vec<String>> {
    let mut spec = cfg.world.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let world = build_world(&spec)?;
    std::fs::create_dir_all(out).map_err(crate::error::io_at(out))?;
    let path = out.join("world.json");
    let mut text = serde_json::to_string_pretty(&spec)
        .map_err(|e| LabError::Artifact(format!("world.json: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(crate::error::io_at(&path))?;

    if samples > 0 {
        let mut rng = world.stream(0);
        let mut head = vec!["domain".to_string()];
        header_block(&mut head, "x", spec.ambient_dim);
        header_block(&mut head, "c", spec.d_c);
        header_block(&mut head, "s", spec.d_s);
        let mut text = head.join(",");
        text.push('\n');
        for n in 0..spec.n_domains {
            let b = world.sample_domain(n, samples, &mut rng)?;
            for i in 0..samples {
                let mut cells = vec![n.to_string()];
                float_cells(&mut cells, b.x.row(i));
                float_cells(&mut cells, b.c.row(i));
                float_cells(&mut cells, b.s.row(i));
                text.push_str(&cells.join(","));
                text.push('\n');
            }
        }
        let path = out.join("samples.csv");
        std::fs::write(&path, text).map_err(crate::error::io_at(&path))?;
    }
    Ok(spec.warnings())
}
