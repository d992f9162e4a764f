//! Aggregate finished runs into one comparison table plus refreshed plots.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{io_at, Result};
use crate::plots;
use crate::rundir::{parse_codes_csv, RunDir, RunMeta, RunReport, CODES_FILE, META_FILE, REPORT_FILE};

pub const TABLE_FILE: &str = "table.csv";

pub const TABLE_HEADER: &str = "run,status,method,preset,train_seed,content_r2,style_r2,\
leak_c_from_s,leak_s_from_c,eff_style_dim,content_dm,mmd_to_data_max,diversity,wall_time_s";

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One table row per run directory. Headline R² columns carry the
/// direction-minimum scores, so a constant head reads as ~0 here too.
fn row(name: &str, run: &Path) -> Result<String> {
    let rd = RunDir::open(run)?;
    let meta: Option<RunMeta> = rd.read_json(META_FILE).ok();
    let report: Option<RunReport> = rd.read_json(REPORT_FILE).ok();
    let status = match (&report, &meta) {
        (Some(_), _) => "ok",
        (None, Some(m)) if m.diverged => "diverged",
        _ => "incomplete",
    };
    let wall = opt_num(meta.as_ref().map(|m| m.wall_time_s));
    let cells = match &report {
        Some(r) => vec![
            name.to_string(),
            status.to_string(),
            r.method.clone(),
            r.preset.clone().unwrap_or_default(),
            r.train_seed.to_string(),
            num(r.ident.content_score()),
            num(r.ident.style_score()),
            num(r.ident.leakage_c_from_s),
            num(r.ident.leakage_s_from_c),
            r.ident.effective_style_dim.to_string(),
            num(r.content_dm),
            opt_num(r.mmd_to_data.as_ref().and_then(|v| v.iter().cloned().reduce(f64::max))),
            opt_num(r.diversity),
            wall,
        ],
        None => {
            let cfg: Option<ExperimentConfig> = rd.read_json(crate::rundir::CONFIG_FILE).ok();
            let mut cells = vec![name.to_string(), status.to_string()];
            cells.push(cfg.as_ref().map(|c| c.method.name().to_string()).unwrap_or_default());
            cells.push(cfg.as_ref().and_then(|c| c.preset.clone()).unwrap_or_default());
            cells.push(cfg.as_ref().map(|c| c.method.seed().to_string()).unwrap_or_default());
            cells.extend(std::iter::repeat_n(String::new(), 8));
            cells.push(wall);
            cells
        }
    };
    Ok(cells.join(","))
}

fn unique_name(run: &Path, used: &mut Vec<String>) -> String {
    let base = run
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    let mut name = base.clone();
    let mut k = 2;
    while used.contains(&name) {
        name = format!("{base}-{k}");
        k += 1;
    }
    used.push(name.clone());
    name
}

/// Write `table.csv` plus per-run scatter and style-bar SVGs (rebuilt from
/// each run's persisted codes) under `out`. Returns the table text.
pub fn write_comparison(runs: &[PathBuf], out: &Path) -> Result<String> {
    std::fs::create_dir_all(out.join("plots")).map_err(io_at(out))?;
    let mut text = TABLE_HEADER.to_string();
    text.push('\n');
    let mut used = Vec::new();
    for run in runs {
        let name = unique_name(run, &mut used);
        text.push_str(&row(&name, run)?);
        text.push('\n');
        regenerate_plots(run, &name, out)?;
    }
    let path = out.join(TABLE_FILE);
    std::fs::write(&path, &text).map_err(io_at(&path))?;
    Ok(text)
}

fn regenerate_plots(run: &Path, name: &str, out: &Path) -> Result<()> {
    let rd = RunDir::open(run)?;
    let codes_path = rd.file(CODES_FILE);
    if !codes_path.exists() {
        return Ok(());
    }
    let csv = std::fs::read_to_string(&codes_path).map_err(io_at(&codes_path))?;
    let (codes, _) = parse_codes_csv(&csv)?;
    let cfg: ExperimentConfig = rd.read_json(crate::rundir::CONFIG_FILE)?;
    let scatter = plots::content_scatter_svg(&codes.true_c, &codes.learned_c, &codes.domain);
    let bars = plots::style_bars_svg(&codes.learned_s.col_mean_abs(), cfg.eval.metrics.tau_rel);
    let sp = out.join("plots").join(format!("{name}_content_scatter.svg"));
    std::fs::write(&sp, scatter).map_err(io_at(&sp))?;
    let bp = out.join("plots").join(format!("{name}_style_bars.svg"));
    std::fs::write(&bp, bars).map_err(io_at(&bp))?;
    Ok(())
}
