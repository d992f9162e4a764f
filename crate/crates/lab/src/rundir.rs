//! Run-directory layout and the file formats inside it.
//!
//! A completed run holds `config.json` (fully resolved), `trace.csv`,
//! `model.bin` + `model.json`, `codes.csv`, `report.json`, `plots/*.svg`,
//! and `meta.json`. Every file named in `meta.json` exists on disk; a run
//! that ended in divergence keeps the files written up to that point and
//! sets the `diverged` flag. `trace.csv` and `report.json` are byte-exact
//! functions of (config, seed); wall-clock readings live in `meta.json`
//! only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use csid_core::eval::{CodeBatch, IdentReport};
use csid_core::gan::TraceRow;
use csid_core::ldm::LdmTraceRow;
use csid_core::mat::Mat;
use csid_core::models::{hidden_sizes, GanBundle, LdmBundle};

use crate::error::{io_at, LabError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const MODEL_BIN: &str = "model.bin";
pub const MODEL_MANIFEST: &str = "model.json";
pub const CODES_FILE: &str = "codes.csv";
pub const REPORT_FILE: &str = "report.json";
pub const META_FILE: &str = "meta.json";
pub const SCATTER_PLOT: &str = "plots/content_scatter.svg";
pub const STYLE_PLOT: &str = "plots/style_bars.svg";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Claim a directory for a new run. A directory that already holds a
    /// run (it has a `meta.json`) is refused rather than clobbered.
    pub fn create(root: &Path) -> Result<RunDir> {
        if root.join(META_FILE).exists() {
            return Err(LabError::config(format!(
                "{} already holds a run; pick a fresh --out",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("plots")).map_err(io_at(root))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    /// Open an existing run for reading or re-evaluation.
    pub fn open(root: &Path) -> Result<RunDir> {
        if !root.join(CONFIG_FILE).exists() {
            return Err(LabError::Artifact(format!(
                "{} is not a run directory (no {CONFIG_FILE})",
                root.display()
            )));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    /// Treat any directory as a write target without run-layout checks.
    /// Used when re-evaluation or reporting writes beside, not into, a run.
    pub fn open_unchecked(root: &Path) -> RunDir {
        RunDir { root: root.to_path_buf() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.file(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| LabError::Artifact(format!("{name}: {e}")))?;
        text.push('\n');
        fs::write(&path, text).map_err(io_at(&path))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.file(name);
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        serde_json::from_str(&text).map_err(|e| LabError::Artifact(format!("{name}: {e}")))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        fs::write(&path, text).map_err(io_at(&path))
    }
}

/// Deterministic summary of one run; the acceptance-relevant numbers all
/// live here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: u32,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub world_seed: u64,
    pub train_seed: u64,
    pub steps_completed: usize,
    pub ident: IdentReport,
    /// Largest pairwise unbiased MMD² between learned content blocks of
    /// held-out samples across domains.
    pub content_dm: f64,
    /// Per-domain unbiased MMD² between generated and held-out data;
    /// absent for encoder-only methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd_to_data: Option<Vec<f64>>,
    /// Mean over domains of the style-diversity score; generator methods
    /// only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
}

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub core: String,
    pub lab: String,
}

pub fn versions() -> Versions {
    Versions { core: csid_core::VERSION.to_string(), lab: env!("CARGO_PKG_VERSION").to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub step: usize,
    pub term: String,
    /// Rendered as text: the value may be non-finite, which JSON numbers
    /// cannot carry.
    pub value: String,
}

/// Everything about a run that is not a pure function of (config, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format: u32,
    pub created_unix_s: u64,
    pub wall_time_s: f64,
    pub versions: Versions,
    pub train_seed: u64,
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceInfo>,
    pub warnings: Vec<String>,
    /// Relative paths of every artifact present, sorted.
    pub files: Vec<String>,
}

/// Manifest describing `model.bin` without decoding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub dc_hat: usize,
    pub ds_hat: usize,
    pub n_domains: usize,
    pub ambient_dim: usize,
    pub hidden: Vec<usize>,
    pub param_count: usize,
    pub bin_bytes: usize,
}

fn mlp_params(nets: &[&csid_core::mlp::MlpParams]) -> usize {
    nets.iter().map(|m| m.param_count()).sum()
}

pub fn gan_manifest(bundle: &GanBundle, bytes: usize) -> ModelManifest {
    let mut nets: Vec<&csid_core::mlp::MlpParams> = vec![&bundle.q, &bundle.e_c];
    nets.extend(bundle.e_s.iter());
    nets.extend(bundle.disc.iter());
    ModelManifest {
        kind: "gan".to_string(),
        dc_hat: bundle.dc_hat,
        ds_hat: bundle.ds_hat,
        n_domains: bundle.n_domains(),
        ambient_dim: bundle.ambient_dim(),
        hidden: hidden_sizes(&bundle.q),
        param_count: mlp_params(&nets),
        bin_bytes: bytes,
    }
}

pub fn ldm_manifest(bundle: &LdmBundle, bytes: usize) -> ModelManifest {
    let mut nets: Vec<&csid_core::mlp::MlpParams> = vec![&bundle.f, &bundle.decoder];
    nets.extend(bundle.critics.iter());
    ModelManifest {
        kind: "ldm".to_string(),
        dc_hat: bundle.dc_hat,
        ds_hat: bundle.ds_hat,
        n_domains: bundle.n_domains,
        ambient_dim: bundle.ambient_dim(),
        hidden: hidden_sizes(&bundle.f),
        param_count: mlp_params(&nets),
        bin_bytes: bytes,
    }
}

#[derive(Debug)]
pub enum LoadedModel {
    Gan(GanBundle),
    Ldm(LdmBundle),
}

pub fn load_model(dir: &RunDir) -> Result<LoadedModel> {
    let path = dir.file(MODEL_BIN);
    let bytes = fs::read(&path).map_err(io_at(&path))?;
    match bytes.get(..4) {
        Some(b"CSG1") => Ok(LoadedModel::Gan(GanBundle::decode(&bytes)?)),
        Some(b"CSL1") => Ok(LoadedModel::Ldm(LdmBundle::decode(&bytes)?)),
        _ => Err(LabError::Artifact(format!("{}: unrecognized model encoding", path.display()))),
    }
}

/// f64 → CSV field. `{}` on f64 prints the shortest digits that round-trip,
/// so reading the file back reproduces the exact bits.
fn field(v: f64) -> String {
    format!("{v}")
}

fn join_row(cells: &[String]) -> String {
    cells.join(",")
}

pub fn gan_trace_csv(trace: &[TraceRow], n_domains: usize) -> String {
    let mut head = vec!["step".to_string()];
    for n in 0..n_domains {
        head.push(format!("disc_loss_{n}"));
    }
    for n in 0..n_domains {
        head.push(format!("gen_loss_{n}"));
    }
    head.push("sparsity".to_string());
    for n in 0..n_domains {
        head.push(format!("mmd_{n}"));
    }
    let mut out = join_row(&head);
    out.push('\n');
    for row in trace {
        let mut cells = vec![row.step.to_string()];
        cells.extend(row.disc_loss.iter().map(|&v| field(v)));
        cells.extend(row.gen_loss.iter().map(|&v| field(v)));
        cells.push(field(row.sparsity));
        cells.extend(row.mmd_to_data.iter().map(|&v| field(v)));
        out.push_str(&join_row(&cells));
        out.push('\n');
    }
    out
}

pub fn ldm_trace_csv(trace: &[LdmTraceRow]) -> String {
    let mut out = "step,dm,indep,recon,sparse,total\n".to_string();
    for row in trace {
        out.push_str(&join_row(&[
            row.step.to_string(),
            field(row.dm),
            field(row.indep),
            field(row.recon),
            field(row.sparse),
            field(row.total),
        ]));
        out.push('\n');
    }
    out
}

/// codes.csv: row-aligned true latents and learned codes, plus the
/// inversion residual when codes came from inversion.
pub fn codes_csv(codes: &CodeBatch, residuals: Option<&[f64]>) -> String {
    let mut head = vec!["domain".to_string()];
    let block = |prefix: &str, cols: usize, head: &mut Vec<String>| {
        for j in 0..cols {
            head.push(format!("{prefix}_{j}"));
        }
    };
    block("c", codes.true_c.cols(), &mut head);
    block("s", codes.true_s.cols(), &mut head);
    block("chat", codes.learned_c.cols(), &mut head);
    block("shat", codes.learned_s.cols(), &mut head);
    if residuals.is_some() {
        head.push("residual".to_string());
    }
    let mut out = join_row(&head);
    out.push('\n');
    for i in 0..codes.rows() {
        let mut cells = vec![codes.domain[i].to_string()];
        for m in [&codes.true_c, &codes.true_s, &codes.learned_c, &codes.learned_s] {
            cells.extend(m.row(i).iter().map(|&v| field(v)));
        }
        if let Some(r) = residuals {
            cells.push(field(r[i]));
        }
        out.push_str(&join_row(&cells));
        out.push('\n');
    }
    out
}

/// Inverse of [`codes_csv`]; the residual column is optional.
pub fn parse_codes_csv(text: &str) -> Result<(CodeBatch, Option<Vec<f64>>)> {
    let bad = |msg: String| LabError::Artifact(format!("codes.csv: {msg}"));
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty".into()))?.split(',').collect();
    let count = |prefix: &str| head.iter().filter(|h| h.starts_with(prefix)).count();
    let (d_c, d_s) = (count("c_"), count("s_"));
    let (dc_hat, ds_hat) = (count("chat_"), count("shat_"));
    let has_residual = head.last() == Some(&"residual");
    let expected = 1 + d_c + d_s + dc_hat + ds_hat + usize::from(has_residual);
    if head.first() != Some(&"domain") || head.len() != expected || dc_hat == 0 {
        return Err(bad(format!("unrecognized header {head:?}")));
    }
    let mut domain = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut residuals = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let parse_err = |what: &str| bad(format!("row {}: bad {what}", lineno + 2));
        domain.push(
            cells
                .next()
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| parse_err("domain"))?,
        );
        for (block, width) in values.iter_mut().zip([d_c, d_s, dc_hat, ds_hat]) {
            for _ in 0..width {
                block.push(
                    cells
                        .next()
                        .and_then(|c| c.parse::<f64>().ok())
                        .ok_or_else(|| parse_err("value"))?,
                );
            }
        }
        if has_residual {
            residuals.push(
                cells
                    .next()
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| parse_err("residual"))?,
            );
        }
        if cells.next().is_some() {
            return Err(parse_err("width"));
        }
    }
    let rows = domain.len();
    let to_mat = |data: Vec<f64>, cols: usize| {
        if cols == 0 {
            Ok(Mat::zeros(rows, 0))
        } else {
            Mat::from_vec(rows, cols, data)
        }
    };
    let mut it = values.into_iter();
    let codes = CodeBatch {
        true_c: to_mat(it.next().unwrap(), d_c)?,
        true_s: to_mat(it.next().unwrap(), d_s)?,
        learned_c: to_mat(it.next().unwrap(), dc_hat)?,
        learned_s: to_mat(it.next().unwrap(), ds_hat)?,
        domain,
    };
    codes.validate()?;
    Ok((codes, has_residual.then_some(residuals)))
}

/// Write with an explicit flush so partially written artifacts are never
/// silently truncated by a later crash.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_at(path))?;
    f.write_all(bytes).map_err(io_at(path))?;
    f.flush().map_err(io_at(path))
}

/// Relative paths under `root`, sorted, for the meta manifest.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else if let Ok(rel) = path.strip_prefix(root) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out).map_err(io_at(root))?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use csid_core::rng;

    #[test]
    fn codes_csv_round_trips_exactly() {
        let mut r = rng::stream(900, 0);
        let codes = CodeBatch {
            true_c: rng::normal_mat(&mut r, 7, 2),
            true_s: rng::normal_mat(&mut r, 7, 2),
            learned_c: rng::normal_mat(&mut r, 7, 4),
            learned_s: rng::normal_mat(&mut r, 7, 3),
            domain: vec![0, 1, 0, 1, 1, 0, 0],
        };
        let residuals: Vec<f64> = (0..7).map(|i| 1e-5 * i as f64 + 1e-13).collect();

        let text = codes_csv(&codes, Some(&residuals));
        let (back, res) = parse_codes_csv(&text).unwrap();
        assert_eq!(back, codes);
        assert_eq!(res.unwrap(), residuals);

        let text = codes_csv(&codes, None);
        let (back, res) = parse_codes_csv(&text).unwrap();
        assert_eq!(back, codes);
        assert!(res.is_none());

        assert!(parse_codes_csv("nope\n1,2\n").is_err());
    }

    #[test]
    fn trace_csv_shapes_and_determinism() {
        let rows = vec![
            TraceRow {
                step: 200,
                disc_loss: vec![1.25, 1.5],
                gen_loss: vec![0.75, 0.5],
                sparsity: 0.125,
                mmd_to_data: vec![0.03125, 0.0625],
            };
            2
        ];
        let a = gan_trace_csv(&rows, 2);
        let b = gan_trace_csv(&rows, 2);
        assert_eq!(a, b);
        let head = a.lines().next().unwrap();
        assert_eq!(head, "step,disc_loss_0,disc_loss_1,gen_loss_0,gen_loss_1,sparsity,mmd_0,mmd_1");
        assert_eq!(a.lines().count(), 3);
        assert!(a.contains("200,1.25,1.5,0.75,0.5,0.125,0.03125,0.0625"));

        let l = ldm_trace_csv(&[LdmTraceRow {
            step: 1,
            dm: 0.5,
            indep: 0.25,
            recon: 1.0,
            sparse: 0.125,
            total: 1.875,
        }]);
        assert_eq!(l, "step,dm,indep,recon,sparse,total\n1,0.5,0.25,1,0.125,1.875\n");
    }

    #[test]
    fn run_dir_refuses_reuse() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let rd = RunDir::create(&root).unwrap();
        rd.write_json(META_FILE, &serde_json::json!({"format": 1})).unwrap();
        let err = RunDir::create(&root).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(RunDir::open(&root).is_err(), "no config.json yet");
        rd.write_text(CONFIG_FILE, "{}").unwrap();
        RunDir::open(&root).unwrap();
    }
}
